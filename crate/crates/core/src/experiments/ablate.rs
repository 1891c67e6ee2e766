//! Sweep grids: a base config, named points that override some keys, and a
//! list of seeds. Every (point, seed) pair is one training run; runs whose
//! resolved configs coincide are trained once and shared.
//!
//! Grid files use the config syntax plus three kinds of keys:
//!
//! ```text
//! grid.name = layers
//! grid.seeds = 0,1,2,3,4
//! grid.jobs = 1
//! point.l1 = mvcr.layers=1; train.lr_task=1e-3
//! point.l1.group = bottom
//! ```
//!
//! Any other key sets the base config. The point-only key
//! `eval.mvcr_at_inference=true` scores the selected model with the MVCR
//! path kept at inference instead of plugged out.
//!
//! The CSV has one row per (point, seed) and the fixed header [`CSV_HEADER`].
//! `point_*` columns aggregate the test metric over the seeds of a point,
//! `group_*` columns over every row of a group; deviations use the n − 1
//! denominator.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::mean_stddev;

use super::run::{train_experiment, RunSummary};

pub const CSV_HEADER: [&str; 10] = [
    "grid",
    "point",
    "group",
    "seed",
    "dev_metric",
    "test_metric",
    "point_mean",
    "point_stddev",
    "group_mean",
    "group_stddev",
];

const INFERENCE_KEY: &str = "eval.mvcr_at_inference";

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub group: String,
    pub overrides: Vec<(String, String)>,
    pub mvcr_at_inference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Runs trained concurrently.
    pub jobs: usize,
    /// Base config lines, applied in order before each point's overrides.
    pub base: Vec<(String, String)>,
    pub points: Vec<GridPoint>,
}

fn valid_label(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_+".contains(c))
}

impl AblationGrid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid =
            AblationGrid { name: String::new(), seeds: vec![0], jobs: 1, base: Vec::new(), points: Vec::new() };
        let mut groups: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| Error::Config(format!("grid line {}: {m}", i + 1));
            let (key, value) =
                line.split_once('=').ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(setting) = key.strip_prefix("grid.") {
                match setting {
                    "name" => grid.name = value.to_string(),
                    "seeds" => {
                        grid.seeds = value
                            .split(',')
                            .map(|s| s.trim().parse().map_err(|_| bad(format!("seed `{s}`"))))
                            .collect::<Result<_>>()?
                    }
                    "jobs" => grid.jobs = value.parse().map_err(|_| bad(format!("jobs `{value}`")))?,
                    _ => return Err(Error::UnknownKey { key: key.to_string(), line: i + 1 }),
                }
            } else if let Some(rest) = key.strip_prefix("point.") {
                if let Some(label) = rest.strip_suffix(".group") {
                    groups.push((label.to_string(), value.to_string()));
                    continue;
                }
                if !valid_label(rest) {
                    return Err(bad(format!("point label `{rest}` must be [A-Za-z0-9_+-]")));
                }
                if grid.points.iter().any(|p| p.label == rest) {
                    return Err(bad(format!("duplicate point `{rest}`")));
                }
                let mut point = GridPoint {
                    label: rest.to_string(),
                    group: rest.to_string(),
                    overrides: Vec::new(),
                    mvcr_at_inference: false,
                };
                for part in value.split(';').map(str::trim).filter(|p| !p.is_empty()) {
                    let (k, v) =
                        part.split_once('=').ok_or_else(|| bad(format!("override `{part}` is not key=value")))?;
                    let (k, v) = (k.trim(), v.trim());
                    if k == INFERENCE_KEY {
                        point.mvcr_at_inference = v.parse().map_err(|_| bad(format!("{INFERENCE_KEY} = `{v}`")))?;
                    } else {
                        point.overrides.push((k.to_string(), v.to_string()));
                    }
                }
                grid.points.push(point);
            } else {
                grid.base.push((key.to_string(), value.to_string()));
            }
        }
        for (label, group) in groups {
            let p = grid
                .points
                .iter_mut()
                .find(|p| p.label == label)
                .ok_or_else(|| Error::Config(format!("group given for unknown point `{label}`")))?;
            p.group = group;
        }
        if !valid_label(&grid.name) {
            return Err(Error::Config(format!("grid.name `{}` must be [A-Za-z0-9_+-]", grid.name)));
        }
        if grid.points.is_empty() || grid.seeds.is_empty() || grid.jobs == 0 {
            return Err(Error::Config("a grid needs points, seeds and jobs > 0".into()));
        }
        // Surface bad keys before any training starts.
        for p in &grid.points {
            grid.point_config(p, grid.seeds[0])?.validate()?;
        }
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("grid.name = {}\n", self.name);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        out += &format!("grid.seeds = {}\ngrid.jobs = {}\n\n", seeds.join(","), self.jobs);
        for (k, v) in &self.base {
            out += &format!("{k} = {v}\n");
        }
        out.push('\n');
        for p in &self.points {
            let mut parts: Vec<String> = p.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
            if p.mvcr_at_inference {
                parts.push(format!("{INFERENCE_KEY}=true"));
            }
            out += &format!("point.{} = {}\n", p.label, parts.join("; "));
            if p.group != p.label {
                out += &format!("point.{}.group = {}\n", p.label, p.group);
            }
        }
        out
    }

    /// Appends a base override applied after the file's base keys.
    pub fn override_base(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        ExperimentConfig::default().set(k.trim(), v.trim())?;
        self.base.push((k.trim().to_string(), v.trim().to_string()));
        Ok(())
    }

    /// The resolved config of `point` at `seed`.
    pub fn point_config(&self, point: &GridPoint, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in self.base.iter().chain(&point.overrides) {
            cfg.set(k, v)?;
        }
        cfg.schedule.seed = seed;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: String,
    pub point: String,
    pub group: String,
    pub seed: u64,
    pub dev_metric: f64,
    pub test_metric: f64,
    pub point_mean: f64,
    pub point_stddev: f64,
    pub group_mean: f64,
    pub group_stddev: f64,
}

/// Fills the aggregate columns of `rows` from their test metrics.
pub fn aggregate(rows: &mut [AblationRow]) {
    let mut by_point: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut by_group: HashMap<&str, Vec<f64>> = HashMap::new();
    for r in rows.iter() {
        by_point.entry(&r.point).or_default().push(r.test_metric);
        by_group.entry(&r.group).or_default().push(r.test_metric);
    }
    let points: HashMap<String, (f64, f64)> =
        by_point.into_iter().map(|(k, v)| (k.to_string(), mean_stddev(&v))).collect();
    let groups: HashMap<String, (f64, f64)> =
        by_group.into_iter().map(|(k, v)| (k.to_string(), mean_stddev(&v))).collect();
    for r in rows.iter_mut() {
        (r.point_mean, r.point_stddev) = points[&r.point];
        (r.group_mean, r.group_stddev) = groups[&r.group];
    }
}

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.grid.clone(),
            r.point.clone(),
            r.group.clone(),
            r.seed.to_string(),
            format!("{:.6}", r.dev_metric),
            format!("{:.6}", r.test_metric),
            format!("{:.6}", r.point_mean),
            format!("{:.6}", r.point_stddev),
            format!("{:.6}", r.group_mean),
            format!("{:.6}", r.group_stddev),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::Config(format!("{}: unexpected CSV header {header:?}", path.display())));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub csv: Option<PathBuf>,
}

/// Runs every (point, seed) of `grid`. With `out`, each distinct run writes
/// its artifacts under `out/<grid>/runs/<point>/seed<seed>/` and the
/// comparison matrix goes to `out/<grid>.csv` once every run has finished.
pub fn run_grid(
    grid: &AblationGrid,
    out: Option<&Path>,
    progress: Option<&mut (dyn Write + Send)>,
) -> Result<AblationResult> {
    // Distinct configs in first-appearance order.
    let mut jobs: Vec<(ExperimentConfig, PathBuf)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cells = Vec::new();
    for p in &grid.points {
        for &seed in &grid.seeds {
            let cfg = grid.point_config(p, seed)?;
            cfg.validate()?;
            let key = cfg.to_text();
            let j = *index.entry(key).or_insert_with(|| {
                jobs.push((cfg, PathBuf::from(&p.label).join(format!("seed{seed}"))));
                jobs.len() - 1
            });
            cells.push((p, seed, j));
        }
    }
    let results: Vec<Mutex<Option<Result<RunSummary>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let log = Mutex::new(progress);
    let run_dir = |rel: &Path| out.map(|o| o.join(&grid.name).join("runs").join(rel));
    std::thread::scope(|s| {
        for _ in 0..grid.jobs.min(jobs.len()) {
            s.spawn(|| loop {
                let j = {
                    let mut n = next.lock().expect("queue lock");
                    let j = *n;
                    *n += 1;
                    j
                };
                let Some((cfg, rel)) = jobs.get(j) else { break };
                let res = train_experiment(cfg, run_dir(rel).as_deref());
                if let Some(w) = log.lock().expect("log lock").as_mut() {
                    let status = match &res {
                        Ok(s) => format!("dev {:.4} test {:.4}", s.best_dev, s.best_test),
                        Err(e) => format!("failed: {e}"),
                    };
                    let _ = writeln!(w, "[{}/{}] {} {}", j + 1, jobs.len(), rel.display(), status);
                }
                *results[j].lock().expect("result lock") = Some(res);
            });
        }
    });
    let results: Vec<RunSummary> = results
        .into_iter()
        .map(|m| m.into_inner().expect("result lock").expect("every job ran"))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cells.len());
    for (p, seed, j) in cells {
        let s = &results[j];
        let (dev, test) = if p.mvcr_at_inference {
            s.mvcr_inference.ok_or_else(|| {
                Error::Config(format!("point `{}` keeps MVCR at inference but has no MVCR layers", p.label))
            })?
        } else {
            (s.best_dev, s.best_test)
        };
        rows.push(AblationRow {
            grid: grid.name.clone(),
            point: p.label.clone(),
            group: p.group.clone(),
            seed,
            dev_metric: dev,
            test_metric: test,
            point_mean: f64::NAN,
            point_stddev: f64::NAN,
            group_mean: f64::NAN,
            group_stddev: f64::NAN,
        });
    }
    aggregate(&mut rows);
    let csv = match out {
        Some(o) => {
            std::fs::create_dir_all(o)?;
            let path = o.join(format!("{}.csv", grid.name));
            write_csv(&rows, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(AblationResult { rows, csv })
}
