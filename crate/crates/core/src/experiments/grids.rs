//! Built-in ablation grids.
//!
//! Compression widths are scaled to the mini encoder's width of 64: the
//! 32/64/128/256/512 ladder of a 768-wide encoder maps to 4/8/16/24/48,
//! which keeps the default pool (16, 24, 48) as the 128/256/512 analog.

use super::ablate::{AblationGrid, GridPoint};
use crate::error::{Error, Result};

pub const GRID_NAMES: [&str; 7] = ["layers", "hae_count", "dims", "pool_kind", "granularity", "inference", "lowres"];

/// Width ladder standing in for 32, 64, 128, 256 and 512.
pub const DIM_LADDER: [usize; 5] = [4, 8, 16, 24, 48];
/// Outer width of the HAE-count grid (the 256 analog).
pub const COUNT_DIM: usize = 24;
pub const HAE_COUNTS: [usize; 6] = [1, 2, 3, 4, 5, 10];
pub const INSERTION_LAYERS: [usize; 6] = [1, 2, 6, 7, 11, 12];

/// Base settings shared by the built-in grids: the low-resource sequence
/// task with 100 training examples and the mini encoder.
pub fn base_lines() -> Vec<(String, String)> {
    [
        ("model.num_layers", "4"),
        ("model.hidden_dim", "64"),
        ("model.heads", "4"),
        ("model.ffn_dim", "128"),
        ("mvcr.layers", "1"),
        ("mvcr.dims", "16,24,48"),
        ("train.total_epochs", "40"),
        ("train.pretrain_epochs", "8"),
        ("train.lr_task", "1e-3"),
        ("train.lr_mse", "1e-2"),
        ("train.eval_every", "1"),
        ("data.kind", "seq"),
        ("data.train", "100"),
        ("data.dev", "100"),
        ("data.test", "300"),
        ("data.seq_len", "16"),
        ("data.min_len", "8"),
        ("data.spurious_rate", "0.2"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn point(label: impl Into<String>, group: impl Into<String>, overrides: &[(&str, String)]) -> GridPoint {
    GridPoint {
        label: label.into(),
        group: group.into(),
        overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        mvcr_at_inference: false,
    }
}

fn dims(d: &[usize]) -> String {
    d.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn builtin_grid(name: &str) -> Result<AblationGrid> {
    let mut base = base_lines();
    let points = match name {
        "layers" => {
            base.push(("model.num_layers".into(), "12".into()));
            INSERTION_LAYERS
                .iter()
                .map(|&l| {
                    let group = match l {
                        1 | 2 => "bottom",
                        6 | 7 => "middle",
                        _ => "top",
                    };
                    point(format!("l{l}"), group, &[("mvcr.layers", l.to_string())])
                })
                .collect()
        }
        "hae_count" => HAE_COUNTS
            .iter()
            .map(|&n| point(format!("n{n}"), format!("n{n}"), &[("mvcr.dims", dims(&vec![COUNT_DIM; n]))]))
            .collect(),
        "dims" => {
            let mut pts = Vec::new();
            for &x in &DIM_LADDER {
                pts.push(point(format!("aaa-{x}"), "aaa", &[("mvcr.dims", dims(&[x, x, x]))]));
            }
            for a in [8, 24] {
                for &x in &DIM_LADDER {
                    pts.push(point(format!("aab-{a}-{x}"), "aab", &[("mvcr.dims", dims(&[a, a, x]))]));
                }
            }
            for &x in &DIM_LADDER {
                pts.push(point(format!("abc-{x}"), "abc", &[("mvcr.dims", dims(&[16, 24, x]))]));
            }
            pts
        }
        "pool_kind" => ["hae", "ae", "vae"].iter().map(|k| point(*k, *k, &[("mvcr.kind", k.to_string())])).collect(),
        "granularity" => {
            ["token", "layer"].iter().map(|g| point(*g, *g, &[("mvcr.granularity", g.to_string())])).collect()
        }
        "inference" => {
            let mut with = point("with", "with", &[]);
            with.mvcr_at_inference = true;
            vec![point("without", "without", &[]), with]
        }
        "lowres" => {
            let mut pts = Vec::new();
            for n in crate::data::LOW_RESOURCE_SIZES {
                pts.push(point(
                    format!("vanilla-{n}"),
                    "vanilla",
                    &[("mvcr.layers", "none".into()), ("data.train", n.to_string())],
                ));
                pts.push(point(format!("mvcr1-{n}"), "mvcr1", &[("data.train", n.to_string())]));
            }
            pts
        }
        other => {
            return Err(Error::Config(format!("unknown grid `{other}` (expected one of {})", GRID_NAMES.join(", "))))
        }
    };
    let seeds = if name == "inference" { vec![0, 1, 2] } else { vec![0, 1, 2, 3, 4] };
    Ok(AblationGrid { name: name.to_string(), seeds, jobs: 1, base, points })
}
