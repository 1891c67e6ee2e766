//! Training-loop contracts: what each phase may touch, replay determinism,
//! evaluation sanity and a closed-form optimizer step.

use mvcr_core::config::ExperimentConfig;
use mvcr_core::data::{make_batch, Dataset, Example, Target};
use mvcr_core::nn::{Group, ParamStore};
use mvcr_core::optim::{Adam, AdamConfig};
use mvcr_core::rng::{CounterRng, Purpose};
use mvcr_core::tensor::Tensor;
use mvcr_core::train::{evaluate, run_training, EpochRecord, Phase, Trainer};
use mvcr_core::transformer::EncoderModel;
use rand::Rng;

fn tiny(extra: &str) -> ExperimentConfig {
    let text = format!(
        "model.num_layers = 2\nmodel.hidden_dim = 16\nmodel.heads = 2\nmodel.ffn_dim = 32\n\
         mvcr.layers = 1,2\nmvcr.dims = 4,8\ntrain.total_epochs = 4\ntrain.pretrain_epochs = 2\n\
         train.batch_size = 8\ntrain.lr_task = 1e-3\ntrain.lr_mse = 1e-2\n\
         data.train = 24\ndata.dev = 16\ndata.test = 16\n{extra}"
    );
    ExperimentConfig::parse(&text).unwrap()
}

fn setup(cfg: &ExperimentConfig) -> (EncoderModel<f64>, Dataset) {
    let seed = cfg.schedule.seed;
    let data = cfg.data.generate(seed).unwrap();
    let model = EncoderModel::new(cfg.encoder_config(), cfg.mvcr_config(), seed).unwrap();
    (model, data)
}

fn snapshot(store: &ParamStore<f64>, group: Group) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .filter(|(_, p)| p.group == group)
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn pretraining_only_moves_the_pools() {
    let cfg = tiny("");
    let (model, data) = setup(&cfg);
    let mut trainer = Trainer::new(model, cfg.schedule.clone()).unwrap();
    let before: Vec<_> = Group::ALL.iter().map(|&g| snapshot(&trainer.model.store, g)).collect();
    for chunk in data.train.chunks(8) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = make_batch(&refs, data.task).unwrap();
        let m = trainer.train_step(&batch, Phase::HaePretrain, 1).unwrap();
        assert!(m.task_loss.is_none() && m.mse_loss.is_some());
        // The frozen groups are constants on the tape and receive nothing.
        assert_eq!(m.recon_grad_norms.get(Group::Backbone), 0.0);
        assert_eq!(m.recon_grad_norms.get(Group::Head), 0.0);
        assert!(m.recon_grad_norms.get(Group::Hae) > 0.0);
    }
    for (i, &g) in Group::ALL.iter().enumerate() {
        let after = snapshot(&trainer.model.store, g);
        if g == Group::Hae {
            assert_ne!(after, before[i]);
        } else {
            assert_eq!(after, before[i], "{g} moved during pretraining");
        }
    }
}

#[test]
fn joint_step_routes_each_loss_to_its_groups() {
    let cfg = tiny("");
    let (model, data) = setup(&cfg);
    let mut trainer = Trainer::new(model, cfg.schedule.clone()).unwrap();
    let refs: Vec<&Example> = data.train[..8].iter().collect();
    let batch = make_batch(&refs, data.task).unwrap();
    let m = trainer.train_step(&batch, Phase::Joint, 1).unwrap();
    assert!(m.task_loss.is_some() && m.mse_loss.is_some());
    assert!(m.task_grad_norms.get(Group::Backbone) > 0.0);
    assert!(m.task_grad_norms.get(Group::Head) > 0.0);
    let store = &trainer.model.store;
    for (id, p) in store.iter() {
        // The task optimizer updates everything on the task path; the
        // reconstruction optimizer only ever sees pool parameters.
        if p.group != Group::Hae {
            assert_eq!(trainer.task_opt.steps(id), 1, "{}", p.name);
            assert_eq!(trainer.recon_opt.steps(id), 0, "{}", p.name);
        } else {
            assert_eq!(trainer.recon_opt.steps(id), 1, "{}", p.name);
        }
    }
    // Reconstruction reads the layer outputs, so the head never sees its gradient.
    assert_eq!(m.recon_grad_norms.get(Group::Head), 0.0);
}

fn strip_wall(log: &str) -> Vec<EpochRecord> {
    log.lines()
        .map(|l| {
            let mut r: EpochRecord = serde_json::from_str(l).unwrap();
            r.wall_ms = 0;
            r
        })
        .collect()
}

#[test]
fn identical_seeds_replay_identically() {
    let cfg = tiny("");
    let run = || {
        let (model, data) = setup(&cfg);
        let mut log = Vec::new();
        let run = run_training(model, &data, &cfg.schedule, Some(&mut log)).unwrap();
        (String::from_utf8(log).unwrap(), run)
    };
    let (log_a, a) = run();
    let (log_b, b) = run();
    assert_eq!(strip_wall(&log_a), strip_wall(&log_b));
    assert_eq!(a.probe_mse, b.probe_mse);
    for g in Group::ALL {
        assert_eq!(snapshot(&a.final_model().store, g), snapshot(&b.final_model().store, g));
    }
    let other = tiny("train.seed = 1\n");
    let (model, data) = setup(&other);
    let c = run_training(model, &data, &other.schedule, None).unwrap();
    assert_ne!(snapshot(&a.final_model().store, Group::Backbone), snapshot(&c.final_model().store, Group::Backbone));
}

#[test]
fn random_labels_score_at_chance() {
    let cfg = tiny("data.test = 2000\n");
    let (model, data) = setup(&cfg);
    let mut rng = CounterRng::new(77).stream(Purpose::Data, 0);
    let relabeled: Vec<Example> = data
        .test
        .iter()
        .map(|e| Example { tokens: e.tokens.clone(), target: Target::Class(rng.random_range(0..2)) })
        .collect();
    let acc = evaluate(&model, &relabeled, 64, false).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn eval_without_pools_equals_plugged_out_model() {
    let cfg = tiny("");
    let (model, data) = setup(&cfg);
    let run = run_training(model, &data, &cfg.schedule, None).unwrap();
    let trained = run.final_model();
    let plugged = trained.plug_out().unwrap();
    assert_eq!(plugged.store.count(Group::Hae), 0);
    for split in [&data.dev, &data.test] {
        assert_eq!(evaluate(trained, split, 64, false).unwrap(), evaluate(&plugged, split, 64, false).unwrap());
    }
}

#[test]
fn single_adam_step_matches_closed_form() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Group::Backbone, Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
    let g = [0.2, -3.0, 1e-3];
    let cfg = AdamConfig::default();
    let mut adam = Adam::new(cfg);
    adam.step(&mut store, &[(id, Tensor::new(vec![3], g.to_vec()).unwrap())], 0.1).unwrap();
    // After one step the bias-corrected moments are g and g², so each
    // coordinate moves by lr · g / (|g| + eps).
    let start = [0.5, -1.0, 2.0];
    for i in 0..3 {
        let want = start[i] - 0.1 * g[i] / (g[i].abs() + cfg.eps);
        assert!((store.value(id).data()[i] - want).abs() < 1e-12);
    }
    let (m, v) = adam.moments(id).unwrap();
    assert!((m[1] - 0.1 * -3.0).abs() < 1e-12);
    assert!((v[1] - 0.001 * 9.0).abs() < 1e-12);
}
