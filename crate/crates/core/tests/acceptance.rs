//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! `cargo test --release -p m2ae-core --test acceptance` runs all of them;
//! trailing numbers select a subset, e.g. `... --test acceptance -- 3 7`.

use m2ae::config::{Profile, RunConfig};
use m2ae::data::{decode_pcb, encode_pcb, in_train_split, load_pcb, save_pcb, synthetic_records, DatasetRecord};
use m2ae::eval::probe_model;
use m2ae::geometry::{
    chamfer_l2, fps, interpolate, interpolation_weights, knn, lex_cmp, sq_dist, Point, PointSet,
};
use m2ae::gradcheck::{central_diff, max_rel_err};
use m2ae::masking::{build_scales, closure_holds, generate_mask, minimality_holds};
use m2ae::model::{Checkpoint, Model, ModelConfig, ModelParams, Param, TokenSet};
use m2ae::training::{
    train, AdamWConfig, JsonlSink, OptimizerState, Schedule, TrainConfig, Trainer, FINAL_CHECKPOINT,
};
use m2ae::{Exec, Graph, Result, Rng, Tensor, Var};
use std::cmp::Ordering;
use std::time::{Duration, Instant};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn cloud(n: usize, rng: &mut Rng) -> PointSet {
    let pts = (0..n)
        .map(|_| std::array::from_fn(|_| rng.uniform_in(-1.0, 1.0) as f32))
        .collect();
    PointSet::new(pts).unwrap()
}

// ---------------------------------------------------------------- 1

/// Greedy furthest point sampling recomputed from scratch every round.
fn fps_oracle(points: &[Point], m: usize) -> Vec<usize> {
    let n = points.len();
    let mut c = [0.0f64; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a] as f64;
        }
    }
    c.iter_mut().for_each(|x| *x /= n as f64);
    let key = |i: usize, d: f64, j: usize, e: f64| {
        // true if (i, d) beats (j, e)
        d > e || (d == e && lex_cmp(&points[i], &points[j]) == Ordering::Less)
    };
    let dc = |i: usize| (0..3).map(|a| (points[i][a] as f64 - c[a]).powi(2)).sum::<f64>();
    let mut best = 0;
    for i in 1..n {
        if key(i, dc(i), best, dc(best)) {
            best = i;
        }
    }
    let mut out = vec![best];
    while out.len() < m {
        let mut pick: Option<(usize, f64)> = None;
        for i in (0..n).filter(|i| !out.contains(i)) {
            let d = out.iter().map(|&s| sq_dist(&points[i], &points[s])).fold(f64::INFINITY, f64::min);
            if pick.is_none_or(|(j, e)| key(i, d, j, e)) {
                pick = Some((i, d));
            }
        }
        out.push(pick.unwrap().0);
    }
    out
}

fn knn_oracle(q: &Point, sources: &[Point], k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..sources.len()).collect();
    all.sort_by(|&a, &b| {
        sq_dist(q, &sources[a])
            .total_cmp(&sq_dist(q, &sources[b]))
            .then_with(|| lex_cmp(&sources[a], &sources[b]))
            .then(a.cmp(&b))
    });
    all.truncate(k);
    all
}

fn criterion_1() -> Outcome {
    let mut rng = Rng::new(1);
    for trial in 0..1000 {
        let n = 1 + rng.below(64);
        // A coarse grid makes exact distance ties common.
        let pts: Vec<Point> = if trial % 2 == 0 {
            cloud(n, &mut rng).into_coords()
        } else {
            (0..n).map(|_| std::array::from_fn(|_| rng.below(4) as f32)).collect()
        };
        let m = 1 + rng.below(n.min(16));
        let got = ok(fps(&pts, m))?;
        ensure!(got == fps_oracle(&pts, m), "fps differs from oracle on trial {trial}");
        let k = 1 + rng.below(n);
        let q = cloud(1 + rng.below(8), &mut rng).into_coords();
        let nn = ok(knn(&q, &pts, k))?;
        for (i, qp) in q.iter().enumerate() {
            ensure!(nn.row(i) == knn_oracle(qp, &pts, k), "knn differs on trial {trial}");
        }
        let self_nn = ok(knn(&pts, &pts, 1))?;
        for i in 0..n {
            ensure!(sq_dist(&pts[self_nn.row(i)[0]], &pts[i]) == 0.0, "self query not first");
        }
    }
    let single = ok(chamfer_l2(&[[0.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]))?;
    ensure!(single == 2.0, "singleton chamfer {single}");
    // a = {0, 2}, b = {1}: forward (1 + 1) / 2, backward 1.
    let two = ok(chamfer_l2(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]))?;
    ensure!(two == 2.0, "two-point chamfer {two}");
    for _ in 0..100 {
        let a = cloud(1 + rng.below(30), &mut rng);
        let b = cloud(1 + rng.below(30), &mut rng);
        let ab = ok(chamfer_l2(&a, &b))?;
        let ba = ok(chamfer_l2(&b, &a))?;
        ensure!(ab == ba, "chamfer asymmetric: {ab} vs {ba}");
        ensure!(ok(chamfer_l2(&a, &a))? == 0.0, "chamfer(a, a) != 0");
    }
    Ok("1000 fps/knn instances match oracles; chamfer singleton = 2".into())
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let cfg = ModelConfig::paper();
    let masked_top = (0.8f64 * 64.0).floor() as usize;
    for trial in 0..100 {
        let pts = cloud(2048, &mut Rng::stream(2, "cloud", trial));
        let repr = ok(build_scales(&pts, &cfg.counts, &cfg.ks))?;
        let mask = ok(generate_mask(&repr, cfg.mask_ratio, true, &mut Rng::stream(2, "mask", trial)))?;
        ensure!(closure_holds(&repr, &mask), "closure fails on cloud {trial}");
        ensure!(minimality_holds(&repr, &mask), "minimality fails on cloud {trial}");
        ensure!(mask.visible_count(3) == 64 - masked_top, "scale-3 visible {}", mask.visible_count(3));
        ensure!(mask.visible_count(3) == 13, "scale-3 visible {}", mask.visible_count(3));
    }
    let pts = cloud(2048, &mut Rng::new(2002));
    let repr = ok(build_scales(&pts, &cfg.counts, &cfg.ks))?;
    let ind = ok(generate_mask(&repr, cfg.mask_ratio, false, &mut Rng::new(7)))?;
    ensure!(!closure_holds(&repr, &ind), "independent masks kept closure on the fixed seed");
    Ok("100 clouds: closure and minimality hold, 13 visible; ablation violates closure".into())
}

// ---------------------------------------------------------------- 3

/// `sum(w * op(inputs))` for a fixed random `w`; every input coordinate is
/// checked against central differences.
fn primitive_check<F>(shapes: &[&[usize]], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = Rng::new(seed);
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let flat: Vec<f64> = (0..sizes.iter().sum()).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
    let wseed = rng.next_u64();
    let eval = |x: &[f64], grad: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let mut off = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&sizes)
            .map(|(s, &n)| {
                let v = g.param(Tensor::new(s.to_vec(), x[off..off + n].to_vec()).unwrap());
                off += n;
                v
            })
            .collect();
        let out = build(&mut g, &vars).unwrap();
        let mut wr = Rng::new(wseed);
        let w: Vec<f64> = (0..g.value(out).numel()).map(|_| wr.uniform_in(-2.0, 2.0)).collect();
        let wv = g.constant(Tensor::new(g.shape(out).to_vec(), w).unwrap());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).item();
        if !grad {
            return (value, vec![]);
        }
        g.backward(loss).unwrap();
        (value, vars.iter().flat_map(|&v| g.grad(v).unwrap().to_vec()).collect())
    };
    let (_, analytic) = eval(&flat, true);
    let coords: Vec<usize> = (0..flat.len()).collect();
    let numeric = central_diff(|x| eval(x, false).0, &flat, &coords, 1e-5);
    max_rel_err(&analytic, &numeric, 1e-6)
}

fn pretrain_check(samples: usize, seed: u64) -> std::result::Result<f64, String> {
    let model = ok(Model::<f64>::new(ModelConfig::small(), seed))?;
    let points = cloud(256, &mut Rng::new(seed + 1));
    let (_, grads) = ok(model.pretrain_grads(&points, &mut Rng::new(seed + 2)))?;
    let flat_grads: Vec<f64> = grads.into_iter().flatten().collect();
    let flat: Vec<f64> = model.params().iter().flat_map(|p| p.value.data().to_vec()).collect();
    let shapes: Vec<(String, Vec<usize>)> =
        model.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    let picks = Rng::new(seed + 3).choose_distinct(flat.len(), samples);
    let loss_at = |x: &[f64]| {
        let mut off = 0;
        let entries = shapes
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                off += n;
                Param {
                    name: name.clone(),
                    value: Tensor::new(shape.clone(), x[off - n..off].to_vec()).unwrap(),
                }
            })
            .collect();
        let params = ModelParams::from_entries(entries).unwrap();
        let m = Model::from_parts(model.config().clone(), params).unwrap();
        m.pretrain_loss(&points, &mut Rng::new(seed + 2)).unwrap()
    };
    // Max-pooling and ReLU make the loss piecewise smooth; a step of 1e-5 can
    // straddle a branch switch, so the whole-model check uses a finer step.
    let numeric = central_diff(loss_at, &flat, &picks, 1e-6);
    let analytic: Vec<f64> = picks.iter().map(|&i| flat_grads[i]).collect();
    Ok(max_rel_err(&analytic, &numeric, 1e-6))
}

fn criterion_3() -> Outcome {
    let mut allow: Vec<bool> = {
        let mut rng = Rng::new(10);
        (0..20).map(|_| rng.below(3) > 0).collect()
    };
    (0..4).for_each(|r| allow[r * 5] = true);
    let target = Tensor::new(vec![8, 3], {
        let mut rng = Rng::new(19);
        (0..24).map(|_| rng.uniform_in(-2.0, 2.0)).collect()
    })
    .unwrap();
    type Build<'a> = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a>;
    let cases: Vec<(&str, Vec<&[usize]>, Build)> = vec![
        ("matmul", vec![&[3, 4], &[4, 5]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("transpose", vec![&[3, 4]], Box::new(|g, v| g.transpose(v[0]))),
        ("add", vec![&[4, 3], &[4, 3]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![&[4, 3], &[4, 3]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![&[4, 3], &[4, 3]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add_bias", vec![&[4, 3], &[3]], Box::new(|g, v| g.add_bias(v[0], v[1]))),
        ("scale", vec![&[4, 3]], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("gelu", vec![&[6, 5]], Box::new(|g, v| g.gelu(v[0]))),
        (
            "layer_norm",
            vec![&[4, 8], &[8], &[8]],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("masked_softmax", vec![&[4, 5]], Box::new(|g, v| g.masked_softmax(v[0], &allow))),
        ("concat_cols", vec![&[3, 2], &[3, 4]], Box::new(|g, v| g.concat_cols(&[v[0], v[1], v[0]]))),
        ("concat_rows", vec![&[3, 2], &[1, 2]], Box::new(|g, v| g.concat_rows(&[v[0], v[1], v[0]]))),
        ("slice_cols", vec![&[3, 6]], Box::new(|g, v| g.slice_cols(v[0], 2, 3))),
        ("gather_rows", vec![&[4, 3]], Box::new(|g, v| g.gather_rows(v[0], &[3, 0, 0, 2, 3]))),
        ("reshape", vec![&[4, 3]], Box::new(|g, v| g.reshape(v[0], vec![2, 6]))),
        ("sum", vec![&[4, 3]], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![&[4, 3]], Box::new(|g, v| g.mean(v[0]))),
        ("segment_max", vec![&[7, 3]], Box::new(|g, v| g.segment_max(v[0], &[2, 4, 1]))),
        ("segment_mean", vec![&[7, 3]], Box::new(|g, v| g.segment_mean(v[0], &[3, 3, 1]))),
        (
            "weighted_rows",
            vec![&[4, 3]],
            Box::new(|g, v| g.weighted_rows(v[0], &[0, 2, 1, 3, 3, 0], &[0.2, 0.8, 0.5, 0.5, 0.9, 0.1], 2)),
        ),
        ("chamfer", vec![&[6, 3]], Box::new(|g, v| g.chamfer(v[0], &target, 3, 4))),
        ("cross_entropy", vec![&[5, 4]], Box::new(|g, v| g.cross_entropy(v[0], &[0, 3, 2, 2, 1]))),
    ];
    let mut worst = (0.0, "");
    for (i, (name, shapes, build)) in cases.iter().enumerate() {
        let e = primitive_check(shapes, 100 + i as u64, build);
        ensure!(e <= 1e-3, "{name}: relative error {e:.2e}");
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let e2e = pretrain_check(120, 21)?;
    ensure!(e2e <= 1e-3, "end-to-end pretrain loss: relative error {e2e:.2e}");
    Ok(format!(
        "{} primitives (worst {} {:.1e}); pretrain loss on 120 params {:.1e}",
        cases.len(),
        worst.1,
        worst.0,
        e2e
    ))
}

// ---------------------------------------------------------------- 4

fn random_tokens(s: &mut m2ae::model::Session<'_, f32>, coords: Vec<Point>, seed: u64) -> TokenSet {
    let c = s.config().dim(1);
    let mut rng = Rng::new(seed);
    let data = (0..coords.len() * c).map(|_| rng.normal() as f32).collect();
    let feats = s.graph_mut().constant(Tensor::new(vec![coords.len(), c], data).unwrap());
    TokenSet {
        scale: 1,
        indices: (0..coords.len()).collect(),
        coords,
        feats,
    }
}

fn criterion_4() -> Outcome {
    let model = ok(Model::<f32>::new(ModelConfig::small(), 9))?;
    let radius = 0.32;
    let (mut far, mut worst) = (0usize, 0.0f32);
    for trial in 0..20 {
        let coords = cloud(24, &mut Rng::stream(4, "tokens", trial)).into_coords();
        let mut s = model.session();
        let tokens = random_tokens(&mut s, coords.clone(), trial);
        let pos = ok(s.positional(&coords, "encoder.stage1.pos"))?;
        let (_, weights) = ok(s.encoder_block(&tokens, pos, "encoder.stage1.block0", Some(radius)))?;
        let n = coords.len();
        for w in weights {
            let w = s.graph().value(w);
            for a in 0..n {
                for b in 0..n {
                    if sq_dist(&coords[a], &coords[b]).sqrt() > radius {
                        far += 1;
                        ensure!(w.data()[a * n + b] == 0.0, "nonzero weight beyond radius, trial {trial}");
                    }
                }
            }
        }
        // Coordinates lie in [-1, 1]^3, so radius 4 exceeds the diameter.
        let (local, _) = ok(s.encoder_block(&tokens, pos, "encoder.stage1.block0", Some(4.0)))?;
        let (plain, _) = ok(s.encoder_block(&tokens, pos, "encoder.stage1.block0", None))?;
        let a = s.graph().value(local.feats).data();
        let b = s.graph().value(plain.feats).data();
        let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        ensure!(d <= 1e-6, "saturated radius differs from plain block by {d}");
        worst = worst.max(d);
    }
    ensure!(far > 0, "no pair beyond the radius was exercised");
    Ok(format!("{far} far pairs exactly 0; saturated vs plain max diff {worst:.1e}"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let sources = cloud(3 + rng.below(40), &mut rng).into_coords();
        let targets = cloud(1 + rng.below(40), &mut rng).into_coords();
        let (_, w) = ok(interpolation_weights(&targets, &sources, 3))?;
        for row in w.chunks(3) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        // Targets placed on sources reproduce the source features. The leak to
        // the other k-1 sources is about eps * sum(1/d^2), so sources sit on a
        // jittered lattice (spacing >= 0.3) where the coincident term dominates.
        let sources: Vec<Point> = {
            let mut cells: Vec<usize> = (0..125).collect();
            rng.shuffle(&mut cells);
            cells[..3 + rng.below(40)]
                .iter()
                .map(|&c| {
                    let mut p = [0.0f32; 3];
                    for (a, q) in p.iter_mut().enumerate() {
                        let i = (c / 5usize.pow(a as u32)) % 5;
                        *q = (i as f64 * 0.5 - 1.0 + rng.uniform_in(-0.1, 0.1)) as f32;
                    }
                    p
                })
                .collect()
        };
        let c = 4;
        let feats: Vec<f64> = (0..sources.len() * c).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut g = Graph::<f64>::new();
        let fv = g.constant(Tensor::new(vec![sources.len(), c], feats.clone()).unwrap());
        let out = ok(interpolate(&mut g, &sources, &sources, fv, 3))?;
        for (i, row) in g.value(out).data().chunks(c).enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let e = (x - feats[i * c + j]).abs();
                ensure!(e <= 1e-6, "coincident point {i} off by {e}");
            }
        }
    }
    ensure!(worst <= 1e-6, "weights sum off by {worst}");
    Ok(format!("partition of unity within {worst:.1e}; coincident points reproduced"))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let model = ok(Model::<f32>::new(ModelConfig::desk(), 6))?;
    let pts = cloud(1024, &mut Rng::new(60));
    let base = ok(model.global_feature(&pts))?;
    let norm = base.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        Rng::stream(6, "perm", trial).shuffle(&mut perm);
        let shuffled = PointSet::new(pts.select(&perm)).unwrap();
        let f = ok(model.global_feature(&shuffled))?;
        let diff = f.iter().zip(&base).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    ensure!(worst <= 1e-5, "relative difference {worst:.2e}");
    Ok(format!("20 permutations, max relative difference {worst:.1e}"))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let data = synthetic(32, 256, 7);
    let cfg = TrainConfig {
        epochs: 300,
        batch_size: 32,
        base_lr: 1e-3,
        min_lr: 1e-5,
        warmup_epochs: 10,
        test_mode: true,
        ..TrainConfig::paper()
    };
    let model = ok(Model::<f32>::new(ModelConfig::small(), 7))?;
    let mut log = Vec::new();
    ok(train(model, cfg, Exec::Sequential, &data, &mut log, None))?;
    ensure!(log.len() == 300, "{} steps", log.len());
    let (first, last) = (log[0].loss, log[299].loss);
    ensure!(last <= 0.1 * first, "loss {first:.4} -> {last:.4}");
    Ok(format!("300 steps: loss {first:.4} -> {last:.4} ({:.1}%)", 100.0 * last / first))
}

/// `count` shapes cycling through the five kinds.
fn synthetic(count: usize, points: usize, seed: u64) -> Vec<DatasetRecord> {
    let cfg = m2ae::data::DataConfig {
        per_class: count.div_ceil(5),
        num_points: points,
        seed,
        ..Default::default()
    };
    let mut recs = synthetic_records(Exec::Parallel, &cfg).unwrap();
    // Interleave classes before truncating so every kind stays represented.
    recs.sort_by_key(|r| (r.id.rsplit('-').next().unwrap().to_string(), r.label));
    recs.truncate(count);
    recs
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let run = RunConfig::profile(Profile::Small);
    let (train_set, test_set): (Vec<_>, Vec<_>) = synthetic_from(&run, 512)
        .into_iter()
        .partition(|r| in_train_split(&r.id, run.data.split_seed, run.data.train_fraction));
    let classes = run.data.kinds.len();
    let fresh = ok(Model::<f32>::new(run.model.clone(), run.training.seed))?;
    let before = ok(probe_model(&fresh, Exec::Parallel, &train_set, &test_set, classes, &run.eval.probe))?;
    let mut log = Vec::new();
    let tcfg = TrainConfig {
        epochs: 60,
        ..run.training.clone()
    };
    let trained = ok(train(fresh, tcfg, Exec::Parallel, &train_set, &mut log, None))?;
    let after = ok(probe_model(&trained.model, Exec::Parallel, &train_set, &test_set, classes, &run.eval.probe))?;
    let summary = format!(
        "{} train / {} test; probe random-init {:.3}, pretrained {:.3}; loss {:.3} -> {:.3}",
        train_set.len(),
        test_set.len(),
        before.accuracy,
        after.accuracy,
        log[0].loss,
        log.last().unwrap().loss
    );
    ensure!(after.accuracy >= before.accuracy && after.accuracy >= 0.90, "{summary}");
    Ok(summary)
}

/// The run's synthetic records, class-interleaved and cut to `count`.
fn synthetic_from(run: &RunConfig, count: usize) -> Vec<DatasetRecord> {
    let cfg = m2ae::data::DataConfig {
        per_class: count.div_ceil(run.data.kinds.len()),
        ..run.data.clone()
    };
    let mut recs = synthetic_records(Exec::Parallel, &cfg).unwrap();
    recs.sort_by_key(|r| (r.id.rsplit('-').next().unwrap().to_string(), r.label));
    recs.truncate(count);
    recs
}

// ---------------------------------------------------------------- 9

fn pretrain_to(dir: &std::path::Path, data: &[DatasetRecord], cfg: &TrainConfig) -> Result<()> {
    let model = Model::<f32>::new(ModelConfig::small(), cfg.seed)?;
    let mut sink = JsonlSink::create(dir.join("metrics.jsonl"), false)?;
    train(model, cfg.clone(), Exec::Sequential, data, &mut sink, Some(dir))?;
    Ok(())
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        base_lr: 1e-3,
        warmup_epochs: 1,
        checkpoint_every: 2,
        seed: 9,
        test_mode: true,
        ..TrainConfig::paper()
    }
}

fn criterion_9() -> Outcome {
    let data = synthetic(12, 256, 9);
    let cfg = tiny_train_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        ok(pretrain_to(d.path(), &data, &cfg))?;
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    ensure!(names.len() >= 3, "expected metrics and checkpoints, found {names:?}");
    for name in &names {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure!(a == b, "{name} differs between runs");
    }
    Ok(format!("{} files bit-identical across two runs", names.len()))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let s = Schedule {
        base_lr: 1e-4,
        min_lr: 1e-6,
        warmup_epochs: 10,
        total_epochs: 300,
        steps_per_epoch: 7,
    };
    let (w, t) = (70.0, 2100.0);
    let analytic = |k: f64| {
        if k < w {
            1e-4 * k / w
        } else {
            1e-6 + 0.5 * (1e-4 - 1e-6) * (1.0 + (std::f64::consts::PI * (k - w) / (t - w)).cos())
        }
    };
    let mut rng = Rng::new(10);
    let mut worst = 0.0f64;
    let mut steps: Vec<u64> = vec![0, 1, 69, 70, 71, 2099, 2100];
    steps.extend((0..93).map(|_| rng.below(2101) as u64));
    for &k in &steps {
        let e = (s.lr_at(k) - analytic(k as f64)).abs();
        worst = worst.max(e);
    }
    ensure!(worst <= 1e-12, "lr_at off by {worst:.2e}");

    // First AdamW step: m = (1-b1) g, v = (1-b2) g^2, so after bias
    // correction the update is x (1 - lr wd) - lr g / (|g| + eps).
    let hyper = AdamWConfig::default();
    let (lr, wd, eps) = (1e-3, hyper.weight_decay, hyper.eps);
    let x0: Vec<f64> = (0..6).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let g0: Vec<f64> = (0..6).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let mut params = ok(ModelParams::from_entries(vec![
        Param { name: "w.weight".into(), value: Tensor::new(vec![2, 2], x0[..4].to_vec()).unwrap() },
        Param { name: "n.gamma".into(), value: Tensor::new(vec![2], x0[4..].to_vec()).unwrap() },
    ]))?;
    let mut opt = OptimizerState::new(&params, hyper);
    ok(opt.step(&mut params, &vec![g0[..4].to_vec(), g0[4..].to_vec()], lr))?;
    let got: Vec<f64> = params.iter().flat_map(|p| p.value.data().to_vec()).collect();
    let mut worst_adam = 0.0f64;
    for i in 0..6 {
        let decay = if i < 4 { 1.0 - lr * wd } else { 1.0 };
        let want = x0[i] * decay - lr * g0[i] / (g0[i].abs() + eps);
        worst_adam = worst_adam.max((got[i] - want).abs());
    }
    ensure!(worst_adam <= 1e-10, "first AdamW step off by {worst_adam:.2e}");
    Ok(format!("lr_at max error {worst:.1e} over {} steps; AdamW step {worst_adam:.1e}", steps.len()))
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(11);
    for i in 0..20 {
        let mut pts = cloud(1 + rng.below(500), &mut rng).into_coords();
        pts[0] = [f32::MIN_POSITIVE, -0.0, f32::MAX];
        let path = dir.path().join(format!("c{i}.pcb"));
        ok(save_pcb(&path, &pts))?;
        let back = ok(load_pcb(&path))?;
        let same = back.iter().zip(&pts).all(|(a, b)| (0..3).all(|k| a[k].to_bits() == b[k].to_bits()));
        ensure!(back.len() == pts.len() && same, "PCB round trip changed cloud {i}");
        ensure!(encode_pcb(&ok(decode_pcb(&encode_pcb(&pts)))?) == encode_pcb(&pts), "re-encode differs");
    }

    // Train 3 epochs straight through, or stop at the step-2 checkpoint,
    // reload it from disk, and finish.
    let data = synthetic(12, 256, 11);
    let cfg = tiny_train_config();
    let full = tempfile::tempdir().unwrap();
    ok(pretrain_to(full.path(), &data, &cfg))?;
    let ck = ok(Checkpoint::load(full.path().join("step-0000002.pm2a")))?;
    let reloaded = ok(Checkpoint::from_bytes(&ck.to_bytes()))?;
    ensure!(reloaded.to_bytes() == ck.to_bytes(), "checkpoint bytes changed on reload");
    let mut resumed = ok(Trainer::from_checkpoint(&reloaded, cfg.clone()))?;
    let part = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    ok(resumed.run(Exec::Sequential, &data, &mut log, Some(part.path())))?;
    let a = std::fs::read(full.path().join(FINAL_CHECKPOINT)).unwrap();
    let b = std::fs::read(part.path().join(FINAL_CHECKPOINT)).unwrap();
    ensure!(a == b, "resumed final checkpoint differs");
    let full_log = std::fs::read_to_string(full.path().join("metrics.jsonl")).unwrap();
    let tail: Vec<&str> = full_log.lines().skip(2).collect();
    let resumed_log: Vec<String> = log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    ensure!(tail == resumed_log, "resumed metrics differ");
    Ok(format!("20 PCB clouds bit-identical; resume from step 2 matches {} later steps", log.len()))
}

// ----------------------------------------------------------------

type Criterion = (usize, &'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "geometry oracles", criterion_1, Duration::from_secs(10)),
        (2, "mask consistency", criterion_2, Duration::from_secs(10)),
        (3, "gradient checks", criterion_3, Duration::from_secs(120)),
        (4, "attention locality", criterion_4, Duration::MAX),
        (5, "interpolation", criterion_5, Duration::MAX),
        (6, "permutation invariance", criterion_6, Duration::MAX),
        (7, "overfit regression", criterion_7, Duration::from_secs(300)),
        (8, "pretraining helps", criterion_8, Duration::from_secs(1800)),
        (9, "determinism", criterion_9, Duration::MAX),
        (10, "schedule and optimizer", criterion_10, Duration::MAX),
        (11, "round trips", criterion_11, Duration::MAX),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run, budget) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > budget => Err(format!("{msg}; took {elapsed:.1?}, budget {budget:.0?}")),
            o => o,
        };
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("[{tag}] {id:>2} {name:<24} {elapsed:>8.1?}  {msg}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
