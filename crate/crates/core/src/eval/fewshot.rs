use super::probe::{linear_probe, ProbeConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::Serialize;

/// Test shapes drawn per class in every episode.
pub const QUERIES_PER_CLASS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FewShotEpisode {
    pub way: usize,
    pub shot: usize,
    /// Original class ids, in episode label order.
    pub classes: Vec<usize>,
    /// Row indices into the feature table; `shot` per class, grouped by class.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl FewShotEpisode {
    /// `run` of the episodes generated from `seed`: `way` distinct classes,
    /// then `shot + 20` distinct samples per class, the first `shot` for
    /// training.
    pub fn sample(labels: &[usize], num_classes: usize, way: usize, shot: usize, seed: u64, run: u64) -> Result<Self> {
        if way < 2 || way > num_classes {
            return Err(Error::Config(format!("way {way} must be in [2, {num_classes}]")));
        }
        if shot == 0 {
            return Err(Error::Config("shot must be positive".into()));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let need = shot + QUERIES_PER_CLASS;
        let mut rng = Rng::stream(seed, "episode", run);
        let classes = rng.choose_distinct(num_classes, way);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for &c in &classes {
            let pool = &by_class[c];
            if pool.len() < need {
                return Err(Error::Config(format!(
                    "class {c} has {} samples, {way}-way {shot}-shot needs {need}",
                    pool.len()
                )));
            }
            let pick = rng.choose_distinct(pool.len(), need);
            train.extend(pick[..shot].iter().map(|&j| pool[j]));
            test.extend(pick[shot..].iter().map(|&j| pool[j]));
        }
        Ok(FewShotEpisode {
            way,
            shot,
            classes,
            train,
            test,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FewShotResult {
    pub way: usize,
    pub shot: usize,
    pub runs: usize,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FewShotConfig {
    pub way: usize,
    pub shot: usize,
    pub runs: usize,
    pub seed: u64,
}

/// `runs` independent episodes, each scored by a linear probe on the given
/// frozen features.
pub fn few_shot_eval(
    features: &[Vec<f32>],
    labels: &[usize],
    num_classes: usize,
    cfg: &FewShotConfig,
    probe: &ProbeConfig,
) -> Result<FewShotResult> {
    let FewShotConfig { way, shot, runs, seed } = *cfg;
    if runs == 0 {
        return Err(Error::Config("runs must be positive".into()));
    }
    let mut accuracies = Vec::with_capacity(runs);
    for run in 0..runs {
        let ep = FewShotEpisode::sample(labels, num_classes, way, shot, seed, run as u64)?;
        let relabel = |i: &usize| ep.classes.iter().position(|&c| c == labels[*i]).unwrap();
        let tx: Vec<Vec<f32>> = ep.train.iter().map(|&i| features[i].clone()).collect();
        let ty: Vec<usize> = ep.train.iter().map(relabel).collect();
        let vx: Vec<Vec<f32>> = ep.test.iter().map(|&i| features[i].clone()).collect();
        let vy: Vec<usize> = ep.test.iter().map(relabel).collect();
        accuracies.push(linear_probe(&tx, &ty, &vx, &vy, way, probe)?.accuracy);
    }
    let mean = accuracies.iter().sum::<f64>() / runs as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / runs as f64;
    Ok(FewShotResult {
        way,
        shot,
        runs,
        mean,
        std: var.sqrt(),
        accuracies,
    })
}
