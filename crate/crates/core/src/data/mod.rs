//! Synthetic datasets standing in for real corpora.
//!
//! Splits are drawn from distinct generator streams of one seed, so train,
//! dev and test never share randomness.

mod digits;
mod seq_task;
mod token_task;

pub use digits::{generate_digits, render_glyph, DigitSample, GlyphStyle, IMAGE_PIXELS, IMAGE_SIDE};
pub use seq_task::{generate_seq_task, majority_pattern_label, SeqTaskSpec};
pub use token_task::{generate_token_task, rule_tags, TokenTaskSpec};

use crate::error::{Error, Result};
use crate::transformer::{Batch, Labels, Task};

pub const PAD: usize = 0;
pub const CLS: usize = 1;

/// Low-resource training-set sizes.
pub const LOW_RESOURCE_SIZES: [usize; 4] = [100, 200, 500, 1000];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train = 0,
    Dev = 1,
    Test = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    /// One tag per token; `None` where no tag is scored (the leading CLS).
    Tags(Vec<Option<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Starts with `CLS`; never contains `PAD`.
    pub tokens: Vec<usize>,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &[Example] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Dev => &self.dev,
            SplitKind::Test => &self.test,
        }
    }

    pub fn check_nonempty(&self) -> Result<()> {
        for (name, split) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            if split.is_empty() {
                return Err(Error::Config(format!("{name} split is empty")));
            }
        }
        Ok(())
    }
}

/// Pads `examples` to their longest length and collects their labels.
pub fn make_batch(examples: &[&Example], task: Task) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::invalid("make_batch", "no examples"));
    }
    let seq = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(examples.len() * seq);
    let mut valid = Vec::with_capacity(examples.len() * seq);
    for e in examples {
        ids.extend_from_slice(&e.tokens);
        ids.resize(ids.len() + seq - e.tokens.len(), PAD);
        valid.extend((0..seq).map(|i| i < e.tokens.len()));
    }
    let labels = match task {
        Task::Sequence => Labels::Sequence(
            examples
                .iter()
                .map(|e| match &e.target {
                    Target::Class(c) => Ok(*c),
                    Target::Tags(_) => Err(Error::invalid("make_batch", "tag target in a sequence task")),
                })
                .collect::<Result<_>>()?,
        ),
        Task::Token => {
            let mut tags = Vec::with_capacity(ids.len());
            for e in examples {
                let Target::Tags(t) = &e.target else {
                    return Err(Error::invalid("make_batch", "class target in a token task"));
                };
                tags.extend_from_slice(t);
                tags.resize(tags.len() + seq - t.len(), None);
            }
            Labels::Tokens(tags)
        }
    };
    Batch::new(ids, examples.len(), seq, valid, labels)
}
