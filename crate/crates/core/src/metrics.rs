//! Task metrics, all reported as fractions in `[0, 1]`.
//!
//! Token tags use the BIO scheme: tag 0 is outside, and for entity type `k`
//! tag `2k + 1` begins a span and `2k + 2` continues it.

use std::collections::HashSet;

pub const OUTSIDE: usize = 0;

pub fn begin_tag(kind: usize) -> usize {
    2 * kind + 1
}

pub fn inside_tag(kind: usize) -> usize {
    2 * kind + 2
}

/// Entity type of a non-outside tag.
pub fn tag_kind(tag: usize) -> Option<usize> {
    (tag != OUTSIDE).then(|| (tag - 1) / 2)
}

pub fn is_begin(tag: usize) -> bool {
    tag != OUTSIDE && (tag - 1).is_multiple_of(2)
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "accuracy over unequal lengths");
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

/// Spans `(start, end_exclusive, kind)` of one tag sequence. An inside tag
/// that does not continue a span of its own kind opens a new span.
pub fn spans(tags: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &t) in tags.iter().enumerate() {
        let continues = matches!(open, Some((_, k)) if !is_begin(t) && tag_kind(t) == Some(k));
        if continues {
            continue;
        }
        if let Some((start, kind)) = open.take() {
            out.push((start, i, kind));
        }
        if let Some(kind) = tag_kind(t) {
            open = Some((i, kind));
        }
    }
    if let Some((start, kind)) = open {
        out.push((start, tags.len(), kind));
    }
    out
}

/// Micro-averaged exact-match span F1 over sentences. Both sides empty
/// counts as perfect.
pub fn span_f1(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "span_f1 over unequal sentence counts");
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let ps: HashSet<_> = spans(p).into_iter().collect();
        let gs: HashSet<_> = spans(g).into_iter().collect();
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / np as f64;
    let recall = tp as f64 / ng as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Sample mean and (n − 1)-denominator standard deviation; the deviation is
/// 0 for fewer than two values.
pub fn mean_stddev(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
