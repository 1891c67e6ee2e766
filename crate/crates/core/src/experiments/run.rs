//! One training run from an [`ExperimentConfig`], plus checkpoint-based
//! evaluation and inspection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{make_batch, Dataset, Example};
use crate::error::{Error, Result};
use crate::mvcr::AugmentationTrace;
use crate::nn::Group;
use crate::rng::CounterRng;
use crate::tensor::{ElemType, Scalar, Tape};
use crate::train::{evaluate, run_training, EVAL_SEED};
use crate::transformer::{EncoderModel, ForwardOptions};

pub const RUN_LOG: &str = "run.jsonl";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
/// The selected model with its pools plugged out.
pub const MODEL_CKPT: &str = "model.ckpt";
pub const SUMMARY: &str = "summary.json";
pub const CONFIG_ECHO: &str = "config.txt";

/// Evaluation batch size.
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub backbone: usize,
    pub head: usize,
    pub hae: usize,
}

impl GroupCounts {
    pub fn total(&self) -> usize {
        self.backbone + self.head + self.hae
    }

    fn of_store<T: Scalar>(store: &crate::nn::ParamStore<T>) -> Self {
        Self { backbone: store.count(Group::Backbone), head: store.count(Group::Head), hae: store.count(Group::Hae) }
    }

    fn of_checkpoint(ck: &Checkpoint) -> Self {
        Self { backbone: ck.count(Group::Backbone), head: ck.count(Group::Head), hae: ck.count(Group::Hae) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub with_mvcr: bool,
    pub best_epoch: Option<usize>,
    pub best_dev: f64,
    pub best_test: f64,
    pub final_dev: Option<f64>,
    pub final_test: Option<f64>,
    /// Dev and test metric of the selected model with MVCR kept at inference.
    pub mvcr_inference: Option<(f64, f64)>,
    pub probe_mse: Vec<f64>,
    pub params: GroupCounts,
    pub plugged_out: GroupCounts,
}

/// Trains `cfg` with its own seed. With `out`, writes the run log, the
/// checkpoints, the config echo and the summary there.
pub fn train_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    match cfg.elem {
        ElemType::F32 => train_typed::<f32>(cfg, out),
        ElemType::F64 => train_typed::<f64>(cfg, out),
    }
}

fn train_typed<T: Scalar>(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    let seed = cfg.schedule.seed;
    let dataset = cfg.data.generate(seed)?;
    let model = EncoderModel::<T>::new(cfg.encoder_config(), cfg.mvcr_config(), seed)?;
    let with_mvcr = model.mvcr.is_some();
    let params = GroupCounts::of_store(&model.store);
    let echo = cfg.to_text();
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(CONFIG_ECHO), &echo)?;
            Some(BufWriter::new(File::create(dir.join(RUN_LOG))?))
        }
        None => None,
    };
    let run = run_training(model, &dataset, &cfg.schedule, log.as_mut().map(|w| w as &mut dyn Write))?;
    drop(log);
    let best = run.best_model();
    let plugged = best.plug_out()?;
    let mvcr_inference = if with_mvcr {
        Some((evaluate(&best, &dataset.dev, EVAL_BATCH, true)?, evaluate(&best, &dataset.test, EVAL_BATCH, true)?))
    } else {
        None
    };
    let last = run.history.last();
    let summary = RunSummary {
        seed,
        with_mvcr,
        best_epoch: run.best_epoch,
        best_dev: run.best_dev,
        best_test: run.best_test,
        final_dev: last.and_then(|r| r.dev_metric),
        final_test: last.and_then(|r| r.test_metric),
        mvcr_inference,
        probe_mse: run.probe_mse.clone(),
        params,
        plugged_out: GroupCounts::of_store(&plugged.store),
    };
    if let Some(dir) = out {
        Checkpoint::from_store(&run.final_model().store, seed, echo.clone()).save(&dir.join(FINAL_CKPT))?;
        Checkpoint::from_store(&best.store, seed, echo.clone()).save(&dir.join(BEST_CKPT))?;
        Checkpoint::from_store(&plugged.store, seed, echo).save(&dir.join(MODEL_CKPT))?;
        let mut f = File::create(dir.join(SUMMARY))?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        f.write_all(b"\n")?;
    }
    Ok(summary)
}

/// The config echoed in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(&ck.config)
}

/// Rebuilds the model stored in `ck`: pools are attached exactly when the
/// checkpoint holds HAE parameters.
pub fn model_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<EncoderModel<T>> {
    let cfg = checkpoint_config(ck)?;
    let mvcr = if ck.count(Group::Hae) > 0 {
        Some(cfg.mvcr_config().ok_or_else(|| {
            Error::CheckpointFormat("checkpoint has HAE parameters but its config has no MVCR layers".into())
        })?)
    } else {
        None
    };
    let mut model = EncoderModel::<T>::new(cfg.encoder_config(), mvcr, ck.seed)?;
    ck.load_into(&mut model.store)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub with_mvcr: bool,
    pub dev_metric: f64,
    pub test_metric: f64,
}

/// Scores a checkpoint on the dev and test splits regenerated from its config.
pub fn eval_checkpoint(path: &Path, with_mvcr: bool) -> Result<EvalReport> {
    let ck = Checkpoint::load(path)?;
    let (dev, test) = match ck.elem {
        ElemType::F32 => eval_typed::<f32>(&ck, with_mvcr)?,
        ElemType::F64 => eval_typed::<f64>(&ck, with_mvcr)?,
    };
    Ok(EvalReport { checkpoint: path.to_path_buf(), with_mvcr, dev_metric: dev, test_metric: test })
}

fn eval_typed<T: Scalar>(ck: &Checkpoint, with_mvcr: bool) -> Result<(f64, f64)> {
    let model = model_from_checkpoint::<T>(ck)?;
    if with_mvcr && model.mvcr.is_none() {
        return Err(Error::Config(
            "--with-mvcr needs a checkpoint that still has its HAE pools (final.ckpt or best.ckpt)".into(),
        ));
    }
    let data: Dataset = checkpoint_config(ck)?.data.generate(ck.seed)?;
    Ok((evaluate(&model, &data.dev, EVAL_BATCH, with_mvcr)?, evaluate(&model, &data.test, EVAL_BATCH, with_mvcr)?))
}

/// Raw logits of `model` over `examples`, batch by batch.
pub fn logits<T: Scalar>(model: &EncoderModel<T>, examples: &[Example], mvcr_at_inference: bool) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, chunk) in examples.chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = make_batch(&refs, model.config.task)?;
        let opts = if mvcr_at_inference {
            ForwardOptions::train(CounterRng::new(EVAL_SEED), i as u64)
        } else {
            ForwardOptions::eval()
        };
        let mut tape = Tape::new();
        let params = model.store.bind(&mut tape, |_| false);
        let res = model.task_forward(&mut tape, &params, &batch, &opts, &mut AugmentationTrace::default())?;
        out.extend_from_slice(tape.value(res.logits).data());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub elem: ElemType,
    pub seed: u64,
    pub tensors: usize,
    pub params: GroupCounts,
    /// Parameters of a vanilla model built from the same config.
    pub vanilla_total: usize,
    /// Backbone plus head equals the vanilla count, i.e. plugging out the
    /// pools leaves a model of the original size.
    pub plug_out_matches_vanilla: bool,
}

pub fn inspect_checkpoint(path: &Path) -> Result<InspectReport> {
    let ck = Checkpoint::load(path)?;
    let cfg = checkpoint_config(&ck)?;
    let vanilla = EncoderModel::<f64>::new(cfg.encoder_config(), None, ck.seed)?;
    let params = GroupCounts::of_checkpoint(&ck);
    let vanilla_total = vanilla.store.total_count();
    Ok(InspectReport {
        elem: ck.elem,
        seed: ck.seed,
        tensors: ck.tensors.len(),
        params,
        vanilla_total,
        plug_out_matches_vanilla: params.backbone + params.head == vanilla_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::parse(
            "model.num_layers = 2\nmodel.hidden_dim = 16\nmodel.heads = 2\nmodel.ffn_dim = 32\n\
             mvcr.dims = 4,8\ntrain.total_epochs = 3\ntrain.pretrain_epochs = 1\n\
             train.lr_task = 1e-3\ntrain.lr_mse = 1e-2\ndata.train = 24\ndata.dev = 16\ndata.test = 16\n",
        )
        .unwrap()
    }

    #[test]
    fn artifacts_round_trip_through_eval_and_inspect() {
        let dir = tempfile::tempdir().unwrap();
        let summary = train_experiment(&tiny(), Some(dir.path())).unwrap();
        assert!(summary.with_mvcr && summary.params.hae > 0);
        assert_eq!(summary.plugged_out.hae, 0);
        for f in [RUN_LOG, FINAL_CKPT, BEST_CKPT, MODEL_CKPT, SUMMARY, CONFIG_ECHO] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let best = eval_checkpoint(&dir.path().join(BEST_CKPT), false).unwrap();
        let plugged = eval_checkpoint(&dir.path().join(MODEL_CKPT), false).unwrap();
        assert_eq!(best.test_metric, summary.best_test);
        assert_eq!(plugged.test_metric, summary.best_test);
        let with = eval_checkpoint(&dir.path().join(BEST_CKPT), true).unwrap();
        assert_eq!(Some((with.dev_metric, with.test_metric)), summary.mvcr_inference);
        assert!(eval_checkpoint(&dir.path().join(MODEL_CKPT), true).is_err());
        let report = inspect_checkpoint(&dir.path().join(MODEL_CKPT)).unwrap();
        assert_eq!(report.params.hae, 0);
        assert!(report.plug_out_matches_vanilla);
        assert!(matches!(eval_checkpoint(&dir.path().join("missing.ckpt"), false), Err(Error::Checkpoint { .. })));
    }
}
