//! BIO span tagging driven by local context.
//!
//! Tags follow a Markov chain: an open span continues with probability
//! `p_continue`; otherwise a span of a uniformly chosen type begins with
//! probability `p_begin`. A begin tag emits a marker token of its type, an
//! inside tag emits a continuation token. Outside tags emit filler, except
//! that continuation tokens may also appear as filler when no span is open,
//! so tagging them needs the previous tag.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, SplitKind, SplitSizes, Target, CLS};
use crate::error::{Error, Result};
use crate::metrics::{begin_tag, inside_tag, tag_kind, OUTSIDE};
use crate::rng::{CounterRng, Purpose};
use crate::transformer::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTaskSpec {
    pub vocab: usize,
    pub seq_len: usize,
    pub min_len: usize,
    pub entity_types: usize,
    pub markers_per_type: usize,
    pub continuation_tokens: usize,
    pub p_begin: f64,
    pub p_continue: f64,
    /// Probability that an outside token outside any span is a continuation token.
    pub p_ambiguous: f64,
}

impl Default for TokenTaskSpec {
    fn default() -> Self {
        Self {
            vocab: 256,
            seq_len: 32,
            min_len: 12,
            entity_types: 2,
            markers_per_type: 6,
            continuation_tokens: 8,
            p_begin: 0.15,
            p_continue: 0.5,
            p_ambiguous: 0.1,
        }
    }
}

impl TokenTaskSpec {
    pub fn num_tags(&self) -> usize {
        2 * self.entity_types + 1
    }

    pub fn marker(&self, kind: usize, i: usize) -> usize {
        CLS + 1 + kind * self.markers_per_type + i
    }

    pub fn marker_kind(&self, token: usize) -> Option<usize> {
        let first = CLS + 1;
        let end = first + self.entity_types * self.markers_per_type;
        (first..end).contains(&token).then(|| (token - first) / self.markers_per_type)
    }

    fn first_continuation(&self) -> usize {
        CLS + 1 + self.entity_types * self.markers_per_type
    }

    pub fn is_continuation(&self, token: usize) -> bool {
        let first = self.first_continuation();
        (first..first + self.continuation_tokens).contains(&token)
    }

    fn first_filler(&self) -> usize {
        self.first_continuation() + self.continuation_tokens
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.entity_types == 0 || self.markers_per_type == 0 || self.continuation_tokens == 0 {
            return bad("token task needs entity types, markers and continuation tokens".into());
        }
        if self.first_filler() >= self.vocab {
            return bad(format!("vocab {} too small for the token layout", self.vocab));
        }
        if self.min_len < 2 || self.min_len > self.seq_len {
            return bad(format!("data.min_len {} must be in 2..={}", self.min_len, self.seq_len));
        }
        for (name, p) in [("p_begin", self.p_begin), ("p_continue", self.p_continue), ("p_ambiguous", self.p_ambiguous)]
        {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("data.{name} {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> Example {
        let len = rng.random_range(self.min_len..=self.seq_len);
        let mut tokens = vec![CLS];
        let mut tags = vec![None];
        let mut open: Option<usize> = None;
        for _ in 1..len {
            let continuing = open.filter(|_| rng.random::<f64>() < self.p_continue);
            let (tag, token) = if let Some(kind) = continuing {
                let t = self.first_continuation() + rng.random_range(0..self.continuation_tokens);
                (inside_tag(kind), t)
            } else if rng.random::<f64>() < self.p_begin {
                let kind = rng.random_range(0..self.entity_types);
                (begin_tag(kind), self.marker(kind, rng.random_range(0..self.markers_per_type)))
            } else {
                let t = if open.is_none() && rng.random::<f64>() < self.p_ambiguous {
                    self.first_continuation() + rng.random_range(0..self.continuation_tokens)
                } else {
                    rng.random_range(self.first_filler()..self.vocab)
                };
                (OUTSIDE, t)
            };
            open = tag_kind(tag);
            tokens.push(token);
            tags.push(Some(tag));
        }
        Example { tokens, target: Target::Tags(tags) }
    }
}

/// Deterministic tagger implementing the generator's context rules.
pub fn rule_tags(spec: &TokenTaskSpec, tokens: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut prev = OUTSIDE;
    for &t in tokens {
        let tag = if t == CLS {
            OUTSIDE
        } else if let Some(kind) = spec.marker_kind(t) {
            begin_tag(kind)
        } else if spec.is_continuation(t) {
            tag_kind(prev).map_or(OUTSIDE, inside_tag)
        } else {
            OUTSIDE
        };
        out.push(tag);
        prev = tag;
    }
    out
}

pub fn generate_token_task(spec: &TokenTaskSpec, sizes: SplitSizes, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let rng = CounterRng::new(seed);
    let split = |kind: SplitKind, n: usize| {
        let mut r = rng.stream(Purpose::Data, 16 + kind as u64);
        (0..n).map(|_| spec.sample(&mut r)).collect()
    };
    Ok(Dataset {
        task: Task::Token,
        num_classes: spec.num_tags(),
        train: split(SplitKind::Train, sizes.train),
        dev: split(SplitKind::Dev, sizes.dev),
        test: split(SplitKind::Test, sizes.test),
    })
}
