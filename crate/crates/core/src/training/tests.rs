use super::*;
use crate::data::{synthetic_records, DataConfig, ShapeKind};
use crate::geometry::centroid;
use crate::model::ModelConfig;

fn records(n_per_class: usize, seed: u64) -> Vec<DatasetRecord> {
    let cfg = DataConfig {
        kinds: vec![ShapeKind::Sphere, ShapeKind::Torus],
        per_class: n_per_class,
        num_points: 128,
        seed,
        ..DataConfig::default()
    };
    synthetic_records(Exec::Sequential, &cfg).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        base_lr: 1e-3,
        warmup_epochs: 1,
        test_mode: true,
        ..TrainConfig::paper()
    }
}

#[test]
fn augment_is_affine_and_deterministic() {
    let pts = records(1, 0).remove(0).points;
    let cfg = AugmentConfig::default();
    let a = augment(&pts, &cfg, &mut Rng::new(4));
    assert_eq!(a, augment(&pts, &cfg, &mut Rng::new(4)));

    let mut rng = Rng::new(4);
    let s = rng.uniform_in(0.8, 1.25);
    let t: [f64; 3] = std::array::from_fn(|_| rng.uniform_in(-0.1, 0.1));
    let (c0, c1) = (centroid(&pts), centroid(&a));
    for k in 0..3 {
        assert!((c1[k] - (s * c0[k] + t[k])).abs() < 1e-6);
    }
    let identity = AugmentConfig {
        scale_min: 1.0,
        scale_max: 1.0,
        shift: 0.0,
    };
    assert_eq!(augment(&pts, &identity, &mut Rng::new(1)), pts);
}

#[test]
fn one_epoch_of_eight_at_batch_four_is_two_steps() {
    let data = records(4, 1);
    let cfg = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        ..quick_config()
    };
    let model = Model::new(ModelConfig::small(), 0).unwrap();
    let mut log = Vec::new();
    let t = train(model, cfg, Exec::Sequential, &data, &mut log, None).unwrap();
    assert_eq!(t.step(), 2);
    assert_eq!(log.iter().map(|m| m.step).collect::<Vec<_>>(), vec![1, 2]);
    assert!(log.iter().all(|m| m.wall_ms == 0 && m.loss.is_finite()));
}

fn bits(m: &Model<f32>) -> Vec<u32> {
    m.params()
        .iter()
        .flat_map(|p| p.value.data().iter().map(|x| x.to_bits()))
        .collect()
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = records(5, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 3,
        ..quick_config()
    };
    let model = Model::new(ModelConfig::small(), 3).unwrap();
    let mut full_log = Vec::new();
    let full = train(model, cfg.clone(), Exec::Sequential, &data, &mut full_log, Some(dir.path())).unwrap();
    assert_eq!(full.step(), 4);

    let ck = Checkpoint::load(dir.path().join(checkpoint_name(3))).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ck, cfg).unwrap();
    assert_eq!(resumed.step(), 3);
    let mut tail = Vec::new();
    resumed.run(Exec::Parallel, &data, &mut tail, None).unwrap();
    assert_eq!(tail, full_log[3..].to_vec());
    assert_eq!(bits(&resumed.model), bits(&full.model));
    assert_eq!(resumed.optimizer, full.optimizer);
    let fin = Checkpoint::load(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(fin, resumed.checkpoint());
}

#[test]
fn shard_order_does_not_matter() {
    let data = records(4, 3);
    let mut reversed = data.clone();
    reversed.reverse();
    let run = |d: &[DatasetRecord]| {
        let model = Model::new(ModelConfig::small(), 1).unwrap();
        let mut log = Vec::new();
        let t = train(model, quick_config(), Exec::Parallel, d, &mut log, None).unwrap();
        (bits(&t.model), log)
    };
    assert_eq!(run(&data), run(&reversed));
}

#[test]
fn non_finite_loss_names_the_step() {
    let data = records(4, 4);
    let mut model = Model::new(ModelConfig::small(), 1).unwrap();
    model.params_mut().get_mut("head.recon.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = train(model, quick_config(), Exec::Sequential, &data, &mut Vec::new(), None).unwrap_err();
    assert!(matches!(err, Error::Numeric(ref m) if m.contains("step 0")), "{err}");
}

#[test]
fn too_few_samples_is_config_error() {
    let data = records(1, 5);
    let model = Model::new(ModelConfig::small(), 1).unwrap();
    let err = train(model, quick_config(), Exec::Sequential, &data, &mut Vec::new(), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn fixed_sample_loss_halves_in_fifty_steps() {
    let pts = records(1, 6).remove(0).points;
    let mut model = Model::<f32>::new(ModelConfig::small(), 2).unwrap();
    let hyper = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(model.params(), hyper);
    let first = model.pretrain_loss(&pts, &mut Rng::new(0)).unwrap();
    for _ in 0..50 {
        let (_, g) = model.pretrain_grads(&pts, &mut Rng::new(0)).unwrap();
        opt.step(model.params_mut(), &g, 1e-3).unwrap();
    }
    let last = model.pretrain_loss(&pts, &mut Rng::new(0)).unwrap();
    assert!(last <= 0.5 * first, "{first} -> {last}");
}
