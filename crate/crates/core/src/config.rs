//! Experiment configuration as flat `key = value` text with dotted namespaces.
//!
//! ```text
//! # comment
//! model.num_layers = 4
//! mvcr.layers = 1,12
//! train.lr_task = 1e-3
//! ```
//!
//! Every key must be known; a typo is an error, never a silent default.
//! [`ExperimentConfig::to_text`] writes every key, and parsing that text
//! reproduces the config exactly (floats use shortest round-trip formatting).

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{generate_seq_task, generate_token_task, Dataset, SeqTaskSpec, SplitSizes, TokenTaskSpec};
use crate::error::{Error, Result};
use crate::mvcr::MvcrConfig;
use crate::nn::{Baseline, BaselineKind};
use crate::tensor::ElemType;
use crate::train::TrainSchedule;
use crate::transformer::{EncoderConfig, Task};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "MVCR_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Seq,
    Token,
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(DataKind::Seq),
            "token" => Ok(DataKind::Token),
            _ => Err(Error::Config(format!("unknown data kind `{s}` (seq|token)"))),
        }
    }
}

impl Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataKind::Seq => "seq",
            DataKind::Token => "token",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DataKind,
    pub sizes: SplitSizes,
    /// Added to the run seed to seed the generator.
    pub seed: u64,
    pub seq: SeqTaskSpec,
    pub token: TokenTaskSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Seq,
            sizes: SplitSizes { train: 100, dev: 100, test: 300 },
            seed: 7,
            seq: SeqTaskSpec { seq_len: 16, min_len: 8, spurious_rate: 0.2, ..SeqTaskSpec::default() },
            token: TokenTaskSpec { seq_len: 16, min_len: 8, ..TokenTaskSpec::default() },
        }
    }
}

impl DataConfig {
    pub fn task(&self) -> Task {
        match self.kind {
            DataKind::Seq => Task::Sequence,
            DataKind::Token => Task::Token,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            DataKind::Seq => self.seq.num_classes,
            DataKind::Token => self.token.num_tags(),
        }
    }

    fn vocab_and_len(&self) -> (usize, usize) {
        match self.kind {
            DataKind::Seq => (self.seq.vocab, self.seq.seq_len),
            DataKind::Token => (self.token.vocab, self.token.seq_len),
        }
    }

    /// The dataset for a run with seed `run_seed`.
    pub fn generate(&self, run_seed: u64) -> Result<Dataset> {
        let seed = self.seed.wrapping_add(run_seed);
        match self.kind {
            DataKind::Seq => generate_seq_task(&self.seq, self.sizes, seed),
            DataKind::Token => generate_token_task(&self.token, self.sizes, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Task and class count are taken from `data` when the model is built.
    pub model: EncoderConfig,
    pub elem: ElemType,
    /// MVCR settings; no MVCR is attached when `mvcr.layers` is empty.
    pub mvcr: MvcrConfig,
    pub schedule: TrainSchedule,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: EncoderConfig::default(),
            elem: ElemType::F32,
            mvcr: MvcrConfig::default(),
            schedule: TrainSchedule::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let v = value.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn list(v: &[usize]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = `{value}`: expected a boolean"))),
    }
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key = value` lines (blank lines and `#` comments ignored).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::UnknownKey { key, .. } => Error::UnknownKey { key, line: i + 1 },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) =
            kv.split_once('=').ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let mv = &mut self.mvcr;
        let s = &mut self.schedule;
        let d = &mut self.data;
        match key {
            "model.num_layers" => m.num_layers = parse(key, v)?,
            "model.hidden_dim" => m.hidden_dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, v)?,
            "model.vocab_size" => m.vocab_size = parse(key, v)?,
            "model.max_seq_len" => m.max_seq_len = parse(key, v)?,
            "model.elem" => self.elem = parse(key, v)?,

            "mvcr.layers" => mv.layers = parse_list(key, v)?,
            "mvcr.dims" => mv.dims = parse_list(key, v)?,
            "mvcr.layer_gate_prob" => mv.layer_gate_prob = parse(key, v)?,
            "mvcr.sub_skip_prob" => mv.sub_skip_prob = parse(key, v)?,
            "mvcr.granularity" => mv.granularity = parse(key, v)?,
            "mvcr.enabled" => mv.enabled = parse_bool(key, v)?,
            "mvcr.kind" => mv.kind = parse(key, v)?,
            "mvcr.num_sub" => mv.num_sub = parse(key, v)?,
            "mvcr.vae_beta" => mv.vae_beta = parse(key, v)?,
            "mvcr.tanh" => mv.tanh = parse_bool(key, v)?,
            "mvcr.recon_full_flow" => mv.recon_full_flow = parse_bool(key, v)?,

            "train.total_epochs" => s.total_epochs = parse(key, v)?,
            "train.pretrain_epochs" => s.pretrain_epochs = parse(key, v)?,
            "train.batch_size" => s.batch_size = parse(key, v)?,
            "train.lr_task" => s.lr_task = parse(key, v)?,
            "train.lr_mse" => s.lr_mse = parse(key, v)?,
            "train.seed" => s.seed = parse(key, v)?,
            "train.eval_every" => s.eval_every = parse(key, v)?,
            "train.alternate_updates" => s.alternate_updates = parse_bool(key, v)?,
            "train.probe_size" => s.probe_size = parse(key, v)?,
            "train.baseline" => {
                s.baseline = match v {
                    "none" => None,
                    _ => {
                        let (kind, strength) = v
                            .split_once(':')
                            .ok_or_else(|| Error::Config(format!("{key} = `{v}`: expected none or kind:strength")))?;
                        let kind: BaselineKind = kind.trim().parse()?;
                        Some(Baseline::new(kind, parse(key, strength.trim())?)?)
                    }
                }
            }

            "data.kind" => d.kind = parse(key, v)?,
            "data.train" => d.sizes.train = parse(key, v)?,
            "data.dev" => d.sizes.dev = parse(key, v)?,
            "data.test" => d.sizes.test = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "data.vocab" => {
                d.seq.vocab = parse(key, v)?;
                d.token.vocab = d.seq.vocab;
            }
            "data.seq_len" => {
                d.seq.seq_len = parse(key, v)?;
                d.token.seq_len = d.seq.seq_len;
            }
            "data.min_len" => {
                d.seq.min_len = parse(key, v)?;
                d.token.min_len = d.seq.min_len;
            }
            "data.num_classes" => d.seq.num_classes = parse(key, v)?,
            "data.keywords_per_class" => d.seq.keywords_per_class = parse(key, v)?,
            "data.planted" => d.seq.planted = parse(key, v)?,
            "data.distractors" => d.seq.distractors = parse(key, v)?,
            "data.spurious_rate" => d.seq.spurious_rate = parse(key, v)?,
            "data.zipf" => d.seq.zipf = parse(key, v)?,
            "data.entity_types" => d.token.entity_types = parse(key, v)?,
            "data.markers_per_type" => d.token.markers_per_type = parse(key, v)?,
            "data.continuation_tokens" => d.token.continuation_tokens = parse(key, v)?,
            "data.p_begin" => d.token.p_begin = parse(key, v)?,
            "data.p_continue" => d.token.p_continue = parse(key, v)?,
            "data.p_ambiguous" => d.token.p_ambiguous = parse(key, v)?,

            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::UnknownKey { key: key.to_string(), line: 0 }),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let mv = &self.mvcr;
        let s = &self.schedule;
        let d = &self.data;
        vec![
            ("model.num_layers", m.num_layers.to_string()),
            ("model.hidden_dim", m.hidden_dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.ffn_dim", m.ffn_dim.to_string()),
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.max_seq_len", m.max_seq_len.to_string()),
            ("model.elem", self.elem.to_string()),
            ("mvcr.layers", list(&mv.layers)),
            ("mvcr.dims", list(&mv.dims)),
            ("mvcr.layer_gate_prob", mv.layer_gate_prob.to_string()),
            ("mvcr.sub_skip_prob", mv.sub_skip_prob.to_string()),
            ("mvcr.granularity", mv.granularity.to_string()),
            ("mvcr.enabled", mv.enabled.to_string()),
            ("mvcr.kind", mv.kind.to_string()),
            ("mvcr.num_sub", mv.num_sub.to_string()),
            ("mvcr.vae_beta", mv.vae_beta.to_string()),
            ("mvcr.tanh", mv.tanh.to_string()),
            ("mvcr.recon_full_flow", mv.recon_full_flow.to_string()),
            ("train.total_epochs", s.total_epochs.to_string()),
            ("train.pretrain_epochs", s.pretrain_epochs.to_string()),
            ("train.batch_size", s.batch_size.to_string()),
            ("train.lr_task", s.lr_task.to_string()),
            ("train.lr_mse", s.lr_mse.to_string()),
            ("train.seed", s.seed.to_string()),
            ("train.eval_every", s.eval_every.to_string()),
            ("train.alternate_updates", s.alternate_updates.to_string()),
            ("train.probe_size", s.probe_size.to_string()),
            ("train.baseline", s.baseline.map_or("none".to_string(), |b| format!("{}:{}", b.kind, b.strength))),
            ("data.kind", d.kind.to_string()),
            ("data.train", d.sizes.train.to_string()),
            ("data.dev", d.sizes.dev.to_string()),
            ("data.test", d.sizes.test.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.vocab", d.seq.vocab.to_string()),
            ("data.seq_len", d.seq.seq_len.to_string()),
            ("data.min_len", d.seq.min_len.to_string()),
            ("data.num_classes", d.seq.num_classes.to_string()),
            ("data.keywords_per_class", d.seq.keywords_per_class.to_string()),
            ("data.planted", d.seq.planted.to_string()),
            ("data.distractors", d.seq.distractors.to_string()),
            ("data.spurious_rate", d.seq.spurious_rate.to_string()),
            ("data.zipf", d.seq.zipf.to_string()),
            ("data.entity_types", d.token.entity_types.to_string()),
            ("data.markers_per_type", d.token.markers_per_type.to_string()),
            ("data.continuation_tokens", d.token.continuation_tokens.to_string()),
            ("data.p_begin", d.token.p_begin.to_string()),
            ("data.p_continue", d.token.p_continue.to_string()),
            ("data.p_ambiguous", d.token.p_ambiguous.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// `Some` when at least one insertion layer is configured.
    pub fn mvcr_config(&self) -> Option<MvcrConfig> {
        (!self.mvcr.layers.is_empty()).then(|| self.mvcr.clone())
    }

    /// The encoder config with task and classes taken from the data settings.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { task: self.data.task(), num_classes: self.data.num_classes(), ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let enc = self.encoder_config();
        enc.validate()?;
        if let Some(m) = self.mvcr_config() {
            m.validate(enc.num_layers, enc.hidden_dim)?;
        }
        self.schedule.validate()?;
        match self.data.kind {
            DataKind::Seq => self.data.seq.validate()?,
            DataKind::Token => self.data.token.validate()?,
        }
        let (vocab, len) = self.data.vocab_and_len();
        if vocab > enc.vocab_size {
            return Err(Error::Config(format!("data.vocab {vocab} exceeds model.vocab_size {}", enc.vocab_size)));
        }
        if len > enc.max_seq_len {
            return Err(Error::Config(format!("data.seq_len {len} exceeds model.max_seq_len {}", enc.max_seq_len)));
        }
        Ok(())
    }

    /// Output directory, relocated under `$MVCR_OUTPUT_ROOT` when it is relative
    /// and the variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

/// Resolves a relative output path against `$MVCR_OUTPUT_ROOT` when set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvcr::Granularity;

    #[test]
    fn text_round_trip_is_exact() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("mvcr.layers = 1,4\ntrain.lr_task = 3.3e-4 # comment\ntrain.baseline = wd:0.25\n").unwrap();
        cfg.apply_override("mvcr.granularity=layer").unwrap();
        assert_eq!(cfg.mvcr.layers, vec![1, 4]);
        assert_eq!(cfg.mvcr.granularity, Granularity::Layer);
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let err = ExperimentConfig::parse("model.heads = 4\n\nmodel.hiden_dim = 8\n").unwrap_err();
        match err {
            Error::UnknownKey { key, line } => {
                assert_eq!(key, "model.hiden_dim");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(ExperimentConfig::default().apply_override("nope=1").is_err());
        assert!(ExperimentConfig::parse("model.heads 4").is_err());
        assert!(ExperimentConfig::parse("mvcr.tanh = maybe").is_err());
    }

    #[test]
    fn empty_layers_mean_vanilla() {
        let cfg = ExperimentConfig::parse("mvcr.layers = none").unwrap();
        assert!(cfg.mvcr_config().is_none());
        cfg.validate().unwrap();
        assert_eq!(cfg.encoder_config().task, Task::Sequence);
        let tok = ExperimentConfig::parse("data.kind = token").unwrap();
        assert_eq!(tok.encoder_config().num_classes, 5);
    }

    #[test]
    fn validation_catches_inconsistent_sizes() {
        assert!(ExperimentConfig::parse("data.seq_len = 64\ndata.min_len = 8").unwrap().validate().is_err());
        assert!(ExperimentConfig::parse("mvcr.layers = 9").unwrap().validate().is_err());
    }
}
