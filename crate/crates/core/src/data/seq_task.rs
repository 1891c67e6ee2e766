//! Keyword-pattern sequence classification.
//!
//! Every class owns a set of keyword tokens. A sequence of class `y` contains
//! `planted` keywords of `y`, `distractors` keywords of other classes, and
//! Zipf-distributed filler. A per-class "spurious" token co-occurs with the
//! label in the train and dev splits with probability `spurious_rate`, but is
//! unrelated to the label in the test split.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, SplitKind, SplitSizes, Target, CLS};
use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose};
use crate::transformer::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqTaskSpec {
    pub vocab: usize,
    /// Maximum length including the leading CLS.
    pub seq_len: usize,
    pub min_len: usize,
    pub num_classes: usize,
    pub keywords_per_class: usize,
    pub planted: usize,
    pub distractors: usize,
    pub spurious_rate: f64,
    /// Zipf exponent of the filler distribution.
    pub zipf: f64,
}

impl Default for SeqTaskSpec {
    fn default() -> Self {
        Self {
            vocab: 256,
            seq_len: 32,
            min_len: 12,
            num_classes: 2,
            keywords_per_class: 4,
            planted: 3,
            distractors: 2,
            spurious_rate: 0.5,
            zipf: 1.0,
        }
    }
}

impl SeqTaskSpec {
    fn first_keyword(&self) -> usize {
        CLS + 1
    }

    pub fn keyword(&self, class: usize, i: usize) -> usize {
        self.first_keyword() + class * self.keywords_per_class + i
    }

    /// Class owning `token` as a keyword.
    pub fn keyword_class(&self, token: usize) -> Option<usize> {
        let first = self.first_keyword();
        let end = first + self.num_classes * self.keywords_per_class;
        (first..end).contains(&token).then(|| (token - first) / self.keywords_per_class)
    }

    pub fn spurious(&self, class: usize) -> usize {
        self.first_keyword() + self.num_classes * self.keywords_per_class + class
    }

    fn first_filler(&self) -> usize {
        self.spurious(self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("data.num_classes {} < 2", self.num_classes));
        }
        if self.keywords_per_class == 0 {
            return bad("data.keywords_per_class must be positive".into());
        }
        if self.first_filler() + 1 > self.vocab {
            return bad(format!("vocab {} too small for the keyword layout", self.vocab));
        }
        let body = self.planted + self.distractors + 1;
        if self.min_len < body + 1 || self.min_len > self.seq_len {
            return bad(format!("data.min_len {} must be in {}..={}", self.min_len, body + 1, self.seq_len));
        }
        if !(0.0..=1.0).contains(&self.spurious_rate) {
            return bad(format!("data.spurious_rate {} outside [0, 1]", self.spurious_rate));
        }
        if !(self.zipf >= 0.0) {
            return bad(format!("data.zipf {} must be non-negative", self.zipf));
        }
        Ok(())
    }

    fn sample(&self, split: SplitKind, rng: &mut impl Rng, filler: &Zipf<f64>) -> Example {
        let label = rng.random_range(0..self.num_classes);
        let len = rng.random_range(self.min_len..=self.seq_len);
        let body = len - 1;
        let first_filler = self.first_filler();
        let mut tokens: Vec<usize> = (0..body).map(|_| first_filler + filler.sample(rng) as usize - 1).collect();
        let mut slots: Vec<usize> = (0..body).collect();
        slots.shuffle(rng);
        let mut slots = slots.into_iter();
        for _ in 0..self.planted {
            let k = rng.random_range(0..self.keywords_per_class);
            tokens[slots.next().expect("min_len checked")] = self.keyword(label, k);
        }
        for _ in 0..self.distractors {
            let other = (label + rng.random_range(1..self.num_classes)) % self.num_classes;
            let k = rng.random_range(0..self.keywords_per_class);
            tokens[slots.next().expect("min_len checked")] = self.keyword(other, k);
        }
        if rng.random::<f64>() < self.spurious_rate {
            let class = if split == SplitKind::Test { rng.random_range(0..self.num_classes) } else { label };
            tokens[slots.next().expect("min_len checked")] = self.spurious(class);
        }
        let mut all = Vec::with_capacity(len);
        all.push(CLS);
        all.extend(tokens);
        Example { tokens: all, target: Target::Class(label) }
    }
}

/// Classifies by the class with the most keyword occurrences (ties go to
/// the lowest class index).
pub fn majority_pattern_label(spec: &SeqTaskSpec, tokens: &[usize]) -> usize {
    let mut counts = vec![0usize; spec.num_classes];
    for &t in tokens {
        if let Some(c) = spec.keyword_class(t) {
            counts[c] += 1;
        }
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

pub fn generate_seq_task(spec: &SeqTaskSpec, sizes: SplitSizes, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let fillers = spec.vocab - spec.first_filler();
    let filler = Zipf::new(fillers as f64, spec.zipf).map_err(|e| Error::Config(format!("zipf: {e}")))?;
    let rng = CounterRng::new(seed);
    let split = |kind: SplitKind, n: usize| {
        let mut r = rng.stream(Purpose::Data, kind as u64);
        (0..n).map(|_| spec.sample(kind, &mut r, &filler)).collect()
    };
    Ok(Dataset {
        task: Task::Sequence,
        num_classes: spec.num_classes,
        train: split(SplitKind::Train, sizes.train),
        dev: split(SplitKind::Dev, sizes.dev),
        test: split(SplitKind::Test, sizes.test),
    })
}
