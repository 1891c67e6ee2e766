//! Training protocol: HAE pretraining on a frozen backbone, then joint
//! fine-tuning with two learning rates, plus the baseline regularizers.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Dataset, Example, Target};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, span_f1};
use crate::mvcr::{AugmentationTrace, DrawContext, Mode};
use crate::nn::{mixout, weight_decay_to_init, Baseline, BaselineKind, Group, ParamId, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{CounterRng, Purpose};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::transformer::{argmax_rows, EncoderModel, ForwardOptions, Task};

/// Seed of the stochastic path when MVCR is kept at inference.
pub const EVAL_SEED: u64 = 0x5eed_e7a1;
/// Seed of the routing draws used to score the probe batch.
const PROBE_SEED: u64 = 0x9_0be;

pub const DEFAULT_LR_TASK: f64 = 2e-5;
pub const DEFAULT_LR_MSE: f64 = 2e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    HaePretrain,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::HaePretrain => "hae_pretrain",
            Phase::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr_task: f64,
    pub lr_mse: f64,
    pub seed: u64,
    pub baseline: Option<Baseline>,
    /// Evaluate dev/test every this many epochs (and always after the last).
    pub eval_every: usize,
    /// Alternate task and reconstruction updates between steps instead of
    /// applying both in every step.
    pub alternate_updates: bool,
    /// Training examples in the fixed probe batch.
    pub probe_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_epochs: 100,
            pretrain_epochs: 20,
            batch_size: 32,
            lr_task: DEFAULT_LR_TASK,
            lr_mse: DEFAULT_LR_MSE,
            seed: 0,
            baseline: None,
            eval_every: 1,
            alternate_updates: false,
            probe_size: 32,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pretrain_epochs > self.total_epochs {
            return bad(format!("pretrain_epochs {} exceeds total_epochs {}", self.pretrain_epochs, self.total_epochs));
        }
        if !(self.lr_task > 0.0) || !(self.lr_mse > 0.0) {
            return bad(format!("learning rates must be positive ({}, {})", self.lr_task, self.lr_mse));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.probe_size == 0 {
            return bad("batch_size, eval_every and probe_size must be positive".into());
        }
        Ok(())
    }

    /// Epoch phases for a model with (`true`) or without MVCR. Models without
    /// MVCR skip the pretraining epochs entirely.
    pub fn phases(&self, has_mvcr: bool) -> Vec<Phase> {
        if has_mvcr {
            let mut p = vec![Phase::HaePretrain; self.pretrain_epochs];
            p.resize(self.total_epochs, Phase::Joint);
            p
        } else {
            vec![Phase::Joint; self.total_epochs - self.pretrain_epochs]
        }
    }
}

/// Squared-norm-rooted gradient size per parameter group.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GroupNorms(pub [f64; 3]);

impl GroupNorms {
    fn index(g: Group) -> usize {
        match g {
            Group::Backbone => 0,
            Group::Head => 1,
            Group::Hae => 2,
        }
    }

    pub fn get(&self, g: Group) -> f64 {
        self.0[Self::index(g)]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepMetrics {
    pub task_loss: Option<f64>,
    pub mse_loss: Option<f64>,
    pub task_grad_norms: GroupNorms,
    pub recon_grad_norms: GroupNorms,
}

/// One record of the JSON-lines run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub task_loss: Option<f64>,
    pub mse_loss: Option<f64>,
    pub dev_metric: Option<f64>,
    pub test_metric: Option<f64>,
    pub wall_ms: u64,
}

/// A model with its optimizer state and the initial weights that the
/// to-init regularizers refer to.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: EncoderModel<T>,
    pub schedule: TrainSchedule,
    pub init: ParamStore<T>,
    pub task_opt: Adam<T>,
    pub recon_opt: Adam<T>,
    pub step: u64,
    pub trace: AugmentationTrace,
    /// Keep the augmentation trace of every step instead of only the last.
    pub keep_trace: bool,
}

fn grad_norms<T: Scalar>(
    store: &ParamStore<T>,
    vars: &[(ParamId, Var)],
    grads: &crate::tensor::Gradients<T>,
) -> GroupNorms {
    let mut sq = [0.0; 3];
    for &(id, v) in vars {
        if let Some(g) = grads.get(v) {
            sq[GroupNorms::index(store.get(id).group)] += g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
    }
    GroupNorms(sq.map(f64::sqrt))
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: EncoderModel<T>, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        let init = model.store.clone();
        Ok(Self {
            model,
            schedule,
            init,
            task_opt: Adam::new(AdamConfig::default()),
            recon_opt: Adam::new(AdamConfig::default()),
            step: 0,
            trace: AugmentationTrace::default(),
            keep_trace: false,
        })
    }

    fn rng(&self) -> CounterRng {
        CounterRng::new(self.schedule.seed)
    }

    fn ids_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.model.store.iter().filter(|(_, p)| groups.contains(&p.group)).map(|(id, _)| id).collect()
    }

    fn abort(&self, epoch: usize, reason: String) -> Error {
        let mut snapshot = String::from("parameter norms:");
        for g in Group::ALL {
            let sq: f64 = self
                .model
                .store
                .iter()
                .filter(|(_, p)| p.group == g)
                .flat_map(|(_, p)| p.value.data().iter().map(|v| v.as_f64() * v.as_f64()))
                .sum();
            snapshot.push_str(&format!(" {g}={:.6e}", sq.sqrt()));
        }
        Error::RunAborted { epoch, step: self.step, reason, snapshot }
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &crate::transformer::Batch, phase: Phase, epoch: usize) -> Result<StepMetrics> {
        if !self.keep_trace {
            self.trace.clear();
        }
        let draw = DrawContext { rng: self.rng(), step: self.step };
        let mut tape = Tape::new();
        let mut metrics = StepMetrics::default();
        match phase {
            Phase::HaePretrain => {
                if self.model.mvcr.is_none() {
                    return Err(Error::invalid("train_step", "hae_pretrain needs an MVCR model"));
                }
                let params = self.model.store.bind(&mut tape, |g| g == Group::Hae);
                let opts = ForwardOptions { draw, ..ForwardOptions::eval() };
                let enc = self.model.encode(&mut tape, &params, batch, &opts, &mut self.trace)?;
                let recon = self
                    .model
                    .reconstruction_loss(&mut tape, &params, batch, &enc, &draw, &mut self.trace)?
                    .expect("mvcr checked");
                let value = tape.value(recon).data()[0].as_f64();
                if !value.is_finite() {
                    return Err(self.abort(epoch, format!("reconstruction loss is {value}")));
                }
                metrics.mse_loss = Some(value);
                let vars: Vec<(ParamId, Var)> = self.model.store.ids().map(|id| (id, params.var(id))).collect();
                let grads = tape.backward(recon)?;
                metrics.recon_grad_norms = grad_norms(&self.model.store, &vars, &grads);
                let updates: Vec<(ParamId, Tensor<T>)> =
                    self.ids_in(&[Group::Hae]).into_iter().map(|id| (id, grads.wrt(params.var(id)))).collect();
                self.recon_opt.step(&mut self.model.store, &updates, self.schedule.lr_mse)?;
            }
            Phase::Joint => {
                let params = self.model.store.bind(&mut tape, |_| true);
                let baseline = self.schedule.baseline;
                let strength = |kind: BaselineKind| baseline.filter(|b| b.kind == kind).map_or(0.0, |b| b.strength);
                let opts = ForwardOptions {
                    mvcr_mode: Mode::Train,
                    dropout: strength(BaselineKind::Dropout),
                    noise_scale: strength(BaselineKind::GaussianNoise),
                    draw,
                };
                let out = self.model.task_forward(&mut tape, &params, batch, &opts, &mut self.trace)?;
                let task = out.loss.ok_or_else(|| Error::invalid("train_step", "batch has no labels"))?;
                let task_value = tape.value(task).data()[0].as_f64();
                if !task_value.is_finite() {
                    return Err(self.abort(epoch, format!("task loss is {task_value}")));
                }
                metrics.task_loss = Some(task_value);
                let backbone = self.ids_in(&[Group::Backbone]);
                let objective = match strength(BaselineKind::WeightDecayToInit) {
                    l if l > 0.0 => match weight_decay_to_init(&mut tape, &params, &self.init, &backbone, l)? {
                        Some(p) => tape.add(task, p)?,
                        None => task,
                    },
                    _ => task,
                };
                let recon =
                    self.model.reconstruction_loss(&mut tape, &params, batch, &out.encoded, &draw, &mut self.trace)?;
                if let Some(r) = recon {
                    let v = tape.value(r).data()[0].as_f64();
                    if !v.is_finite() {
                        return Err(self.abort(epoch, format!("reconstruction loss is {v}")));
                    }
                    metrics.mse_loss = Some(v);
                }
                let alternate = self.schedule.alternate_updates && recon.is_some();
                let do_task = !alternate || self.step.is_multiple_of(2);
                let do_recon = recon.is_some() && (!alternate || self.step % 2 == 1);
                let vars: Vec<(ParamId, Var)> = self.model.store.ids().map(|id| (id, params.var(id))).collect();

                let task_updates = if do_task {
                    let grads = tape.backward(objective)?;
                    metrics.task_grad_norms = grad_norms(&self.model.store, &vars, &grads);
                    Some(vars.iter().map(|&(id, v)| (id, grads.wrt(v))).collect::<Vec<_>>())
                } else {
                    None
                };
                let recon_updates = match recon {
                    Some(r) if do_recon => {
                        let grads = tape.backward(r)?;
                        metrics.recon_grad_norms = grad_norms(&self.model.store, &vars, &grads);
                        let trainable = if self.model.mvcr.as_ref().is_some_and(|m| m.config.recon_full_flow) {
                            self.model.store.ids().collect()
                        } else {
                            self.ids_in(&[Group::Hae])
                        };
                        Some(trainable.into_iter().map(|id| (id, grads.wrt(params.var(id)))).collect::<Vec<_>>())
                    }
                    _ => None,
                };
                if let Some(u) = task_updates {
                    self.task_opt.step(&mut self.model.store, &u, self.schedule.lr_task)?;
                }
                if let Some(u) = recon_updates {
                    self.recon_opt.step(&mut self.model.store, &u, self.schedule.lr_mse)?;
                }
                let p = strength(BaselineKind::Mixout);
                if p > 0.0 {
                    let mut rng = draw.rng.stream(Purpose::Mixout, self.step);
                    mixout(&mut self.model.store, &self.init, &backbone, p, &mut rng)?;
                }
            }
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Reconstruction loss on `examples` with the backbone in eval mode and
    /// fixed routing draws. `None` without MVCR.
    pub fn probe_mse(&self, examples: &[Example]) -> Result<Option<f64>> {
        if self.model.mvcr.is_none() || examples.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = make_batch(&refs, self.model.config.task)?;
        let mut tape = Tape::new();
        let params = self.model.store.bind(&mut tape, |_| false);
        let mut trace = AugmentationTrace::default();
        let enc = self.model.encode(&mut tape, &params, &batch, &ForwardOptions::eval(), &mut trace)?;
        let draw = DrawContext { rng: CounterRng::new(PROBE_SEED), step: 0 };
        let loss = self.model.reconstruction_loss(&mut tape, &params, &batch, &enc, &draw, &mut trace)?;
        Ok(loss.map(|l| tape.value(l).data()[0].as_f64()))
    }
}

/// Metric of `model` on `split`: accuracy for sequence tasks, span F1 for
/// token tasks. With `mvcr_at_inference` the stochastic MVCR path runs with
/// draws fixed by [`EVAL_SEED`].
pub fn evaluate<T: Scalar>(
    model: &EncoderModel<T>,
    split: &[Example],
    batch_size: usize,
    mvcr_at_inference: bool,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let task = model.config.task;
    let mut pred_classes = Vec::new();
    let mut gold_classes = Vec::new();
    let mut pred_tags = Vec::new();
    let mut gold_tags = Vec::new();
    for (i, chunk) in split.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = make_batch(&refs, task)?;
        let opts = if mvcr_at_inference {
            ForwardOptions::train(CounterRng::new(EVAL_SEED), i as u64)
        } else {
            ForwardOptions::eval()
        };
        let mut tape = Tape::new();
        let params = model.store.bind(&mut tape, |_| false);
        let mut trace = AugmentationTrace::default();
        let out = model.task_forward(&mut tape, &params, &batch, &opts, &mut trace)?;
        let pred = argmax_rows(tape.value(out.logits).data(), model.config.num_classes);
        for (j, e) in chunk.iter().enumerate() {
            match (&e.target, task) {
                (Target::Class(c), Task::Sequence) => {
                    pred_classes.push(pred[j]);
                    gold_classes.push(*c);
                }
                (Target::Tags(tags), Task::Token) => {
                    let mut p = Vec::new();
                    let mut g = Vec::new();
                    for (pos, t) in tags.iter().enumerate() {
                        if let Some(t) = t {
                            g.push(*t);
                            p.push(pred[j * batch.seq + pos]);
                        }
                    }
                    pred_tags.push(p);
                    gold_tags.push(g);
                }
                _ => return Err(Error::invalid("evaluate", "target does not match the task")),
            }
        }
    }
    Ok(match task {
        Task::Sequence => accuracy(&pred_classes, &gold_classes),
        Task::Token => span_f1(&pred_tags, &gold_tags),
    })
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub history: Vec<EpochRecord>,
    /// Probe-batch reconstruction loss before training (`[0]`) and after each epoch.
    pub probe_mse: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_dev: f64,
    /// Test metric at the selected epoch.
    pub best_test: f64,
    /// Parameters at the selected epoch.
    pub best: ParamStore<T>,
    pub trainer: Trainer<T>,
}

impl<T: Scalar> TrainRun<T> {
    /// The model with its parameters at the selected epoch.
    pub fn best_model(&self) -> EncoderModel<T> {
        let mut m = self.trainer.model.clone();
        m.store = self.best.clone();
        m
    }

    pub fn final_model(&self) -> &EncoderModel<T> {
        &self.trainer.model
    }
}

/// Trains `model` on `dataset`, writing one JSON line per epoch to `log`.
/// The selected epoch is the joint-phase epoch with the best dev metric,
/// ties going to the earlier epoch.
pub fn run_training<T: Scalar>(
    model: EncoderModel<T>,
    dataset: &Dataset,
    schedule: &TrainSchedule,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainRun<T>> {
    dataset.check_nonempty()?;
    if dataset.task != model.config.task || dataset.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset ({}, {} classes) does not match the model ({}, {} classes)",
            dataset.task, dataset.num_classes, model.config.task, model.config.num_classes
        )));
    }
    let mut trainer = Trainer::new(model, schedule.clone())?;
    let phases = schedule.phases(trainer.model.mvcr.is_some());
    let probe = &dataset.train[..schedule.probe_size.min(dataset.train.len())];
    let mut probe_mse = Vec::new();
    if let Some(p) = trainer.probe_mse(probe)? {
        probe_mse.push(p);
    }
    let mut history = Vec::with_capacity(phases.len());
    let mut best: Option<(usize, f64, f64, ParamStore<T>)> = None;
    let root = CounterRng::new(schedule.seed);
    for (i, &phase) in phases.iter().enumerate() {
        let epoch = i + 1;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut root.stream(Purpose::Shuffle, epoch as u64));
        let (mut task_sum, mut mse_sum, mut task_n, mut mse_n) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(schedule.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&j| &dataset.train[j]).collect();
            let batch = make_batch(&refs, dataset.task)?;
            let m = trainer.train_step(&batch, phase, epoch)?;
            if let Some(t) = m.task_loss {
                task_sum += t;
                task_n += 1;
            }
            if let Some(r) = m.mse_loss {
                mse_sum += r;
                mse_n += 1;
            }
        }
        if let Some(p) = trainer.probe_mse(probe)? {
            probe_mse.push(p);
        }
        let evaluate_now = epoch % schedule.eval_every == 0 || epoch == phases.len();
        let (dev, test) = if evaluate_now {
            let dev = evaluate(&trainer.model, &dataset.dev, schedule.batch_size.max(64), false)?;
            let test = evaluate(&trainer.model, &dataset.test, schedule.batch_size.max(64), false)?;
            (Some(dev), Some(test))
        } else {
            (None, None)
        };
        if let (Phase::Joint, Some(d), Some(t)) = (phase, dev, test) {
            if best.as_ref().is_none_or(|b| d > b.1) {
                best = Some((epoch, d, t, trainer.model.store.clone()));
            }
        }
        let record = EpochRecord {
            epoch,
            phase,
            task_loss: (task_n > 0).then(|| task_sum / task_n as f64),
            mse_loss: (mse_n > 0).then(|| mse_sum / mse_n as f64),
            dev_metric: dev,
            test_metric: test,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        history.push(record);
    }
    let (best_epoch, best_dev, best_test, best_store) = match best {
        Some((e, d, t, s)) => (Some(e), d, t, s),
        None => (None, f64::NAN, f64::NAN, trainer.model.store.clone()),
    };
    Ok(TrainRun { history, probe_mse, best_epoch, best_dev, best_test, best: best_store, trainer })
}

/// Runs every strength in `kind`'s grid and keeps the run with the best dev
/// metric (earlier grid point on ties).
pub fn sweep_baseline<T: Scalar>(
    make_model: impl Fn() -> Result<EncoderModel<T>>,
    dataset: &Dataset,
    schedule: &TrainSchedule,
    kind: BaselineKind,
) -> Result<(Baseline, TrainRun<T>)> {
    let mut best: Option<(Baseline, TrainRun<T>)> = None;
    for &strength in kind.grid() {
        let baseline = Baseline::new(kind, strength)?;
        let sched = TrainSchedule { baseline: Some(baseline), ..schedule.clone() };
        let run = run_training(make_model()?, dataset, &sched, None)?;
        if best.as_ref().is_none_or(|(_, b)| run.best_dev > b.best_dev) {
            best = Some((baseline, run));
        }
    }
    Ok(best.expect("baseline grids are non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_defaults_and_validation() {
        let s = TrainSchedule::default();
        s.validate().unwrap();
        assert_eq!((s.total_epochs, s.pretrain_epochs, s.batch_size), (100, 20, 32));
        assert_eq!((s.lr_task, s.lr_mse), (2e-5, 2e-3));
        assert!(TrainSchedule { pretrain_epochs: 101, ..s.clone() }.validate().is_err());
        assert!(TrainSchedule { lr_task: 0.0, ..s.clone() }.validate().is_err());
        assert!(TrainSchedule { lr_mse: -1.0, ..s }.validate().is_err());
    }

    #[test]
    fn baselines_skip_pretraining_epochs() {
        let s = TrainSchedule::default();
        let mvcr = s.phases(true);
        assert_eq!(mvcr.len(), 100);
        assert_eq!(mvcr.iter().filter(|&&p| p == Phase::HaePretrain).count(), 20);
        assert!(mvcr[..20].iter().all(|&p| p == Phase::HaePretrain));
        let vanilla = s.phases(false);
        assert_eq!(vanilla.len(), 80);
        assert!(vanilla.iter().all(|&p| p == Phase::Joint));
    }
}
