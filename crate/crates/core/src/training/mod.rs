//! Pretraining loop: warmup-cosine schedule, AdamW, scale/shift
//! augmentation, batching, metrics and resumable checkpoints.

mod optim;
mod schedule;

pub use optim::{clip_grad_norm, AdamWConfig, OptimizerState};
pub use schedule::Schedule;

use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::model::{Checkpoint, Gradients, Model, ModelParams};
use crate::parallel::Exec;
use crate::rng::Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Translation is uniform in `[-shift, shift]` per axis.
    pub shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: 0.8,
            scale_max: 1.25,
            shift: 0.1,
        }
    }
}

/// One scale factor shared by all axes, then one translation vector.
pub fn augment(points: &PointSet, cfg: &AugmentConfig, rng: &mut Rng) -> PointSet {
    let s = rng.uniform_in(cfg.scale_min, cfg.scale_max);
    let t: [f64; 3] = std::array::from_fn(|_| rng.uniform_in(-cfg.shift, cfg.shift));
    PointSet::new(
        points
            .iter()
            .map(|p| std::array::from_fn(|a| (s * p[a] as f64 + t[a]) as f32))
            .collect(),
    )
    .expect("affine map keeps points finite")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub adamw: AdamWConfig,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Write a checkpoint every this many steps; `0` writes only the final one.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Zero wall-clock fields so metric streams are byte-identical.
    pub test_mode: bool,
}

impl TrainConfig {
    /// Published pretraining settings.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 128,
            base_lr: 1e-4,
            min_lr: 1e-6,
            warmup_epochs: 10,
            adamw: AdamWConfig::default(),
            grad_clip: 0.0,
            augment: true,
            augmentation: AugmentConfig::default(),
            checkpoint_every: 0,
            seed: 0,
            test_mode: false,
        }
    }

    pub fn schedule(&self, num_samples: usize) -> Result<Schedule> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let steps_per_epoch = num_samples / self.batch_size;
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "{num_samples} samples do not fill one batch of {}",
                self.batch_size
            )));
        }
        let s = Schedule {
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.augmentation;
        if !(a.scale_min > 0.0 && a.scale_min <= a.scale_max && a.shift >= 0.0) {
            return Err(Error::Config(format!("invalid augmentation {a:?}")));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        let h = &self.adamw;
        if !((0.0..1.0).contains(&h.beta1) && (0.0..1.0).contains(&h.beta2) && h.eps > 0.0) {
            return Err(Error::Config(format!("invalid AdamW settings {h:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub trait MetricSink {
    fn record(&mut self, m: &MetricRecord) -> Result<()>;
}

impl MetricSink for Vec<MetricRecord> {
    fn record(&mut self, m: &MetricRecord) -> Result<()> {
        self.push(m.clone());
        Ok(())
    }
}

/// Appends one JSON object per line.
pub struct JsonlSink {
    path: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl JsonlSink {
    pub fn create(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(JsonlSink {
            path,
            file: std::io::BufWriter::new(file),
        })
    }
}

impl MetricSink for JsonlSink {
    fn record(&mut self, m: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(m).expect("metric records serialise");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub const FINAL_CHECKPOINT: &str = "final.pm2a";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:07}.pm2a")
}

/// Model, optimizer and step counter of a pretraining run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: OptimizerState<f32>,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.params(), config.adamw);
        Ok(Trainer {
            model,
            optimizer,
            config,
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Model parameters plus `optim.m.*` / `optim.v.*` moment records and the
    /// step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.meta.insert("step".into(), self.optimizer.step.to_string());
        ck.meta.insert("seed".into(), self.config.seed.to_string());
        for (tag, moments) in [("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
            for (p, data) in self.model.params().iter().zip(moments) {
                ck.push(
                    format!("optim.{tag}.{}", p.name),
                    p.value.shape().to_vec(),
                    data.clone(),
                );
            }
        }
        ck
    }

    /// Restores a run written by [`Trainer::checkpoint`]. Checkpoints without
    /// optimizer records start from fresh moments at step 0.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = ck.model()?;
        let mut t = Trainer::new(model, config)?;
        if ck.meta.contains_key("step") {
            let moments = |tag: &str| -> Result<Vec<Vec<f32>>> {
                let p: ModelParams<f32> = ck.params_with_prefix(&format!("optim.{tag}."))?;
                p.check_layout(t.model.params())?;
                Ok(p.iter().map(|x| x.value.data().to_vec()).collect())
            };
            t.optimizer.m = moments("m")?;
            t.optimizer.v = moments("v")?;
            t.optimizer.step = ck.meta_u64("step")?;
        }
        Ok(t)
    }

    /// Mean loss and mean gradient over one batch. Per-sample work runs on
    /// `exec`; the reduction always sums in batch order.
    pub fn batch_gradient(
        &self,
        exec: Exec,
        samples: &[&PointSet],
        first_sample: u64,
    ) -> Result<(f64, Gradients<f32>)> {
        let cfg = &self.config;
        let per = exec.try_map(samples.len(), |j| {
            let mut rng = Rng::stream(cfg.seed, "sample", first_sample + j as u64);
            let pts = if cfg.augment {
                augment(samples[j], &cfg.augmentation, &mut rng)
            } else {
                samples[j].clone()
            };
            self.model.pretrain_grads(&pts, &mut rng)
        })?;
        let mut grads = self.model.params().zero_grads();
        let mut loss = 0.0;
        for (l, g) in &per {
            loss += *l as f64;
            for (acc, part) in grads.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(part) {
                    *a += *b;
                }
            }
        }
        let inv = 1.0 / samples.len() as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        Ok((loss / samples.len() as f64, grads))
    }

    /// Runs until `epochs * steps_per_epoch` steps are done, continuing from
    /// the current step. Records are ordered by id before shuffling, so the
    /// input order does not matter. Each epoch draws its permutation from
    /// stream `(seed, "shuffle", epoch)`, drops the last partial batch, and
    /// sample `i` of step `t` uses stream `(seed, "sample", t * batch + i)`.
    pub fn run(
        &mut self,
        exec: Exec,
        data: &[DatasetRecord],
        sink: &mut dyn MetricSink,
        checkpoint_dir: Option<&Path>,
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by(|&a, &b| data[a].id.cmp(&data[b].id));
        let sched = self.config.schedule(data.len())?;
        let b = self.config.batch_size;
        let total = sched.total_steps();
        let mut epoch_order: Option<(u64, Vec<usize>)> = None;
        let start = Instant::now();
        while self.step() < total {
            let step = self.step();
            let epoch = step / sched.steps_per_epoch as u64;
            if epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm = order.clone();
                Rng::stream(self.config.seed, "shuffle", epoch).shuffle(&mut perm);
                epoch_order = Some((epoch, perm));
            }
            let perm = &epoch_order.as_ref().unwrap().1;
            let pos = (step % sched.steps_per_epoch as u64) as usize;
            let batch: Vec<&PointSet> = perm[pos * b..(pos + 1) * b]
                .iter()
                .map(|&i| &data[i].points)
                .collect();

            let (loss, mut grads) = self.batch_gradient(exec, &batch, step * b as u64)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {loss} at step {step}")));
            }
            if self.config.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, self.config.grad_clip);
            }
            let lr = sched.lr_at(step + 1);
            self.optimizer.step(self.model.params_mut(), &grads, lr)?;
            if !self.model.params().is_finite() {
                return Err(Error::Numeric(format!("non-finite parameters after step {step}")));
            }
            let done = self.step();
            sink.record(&MetricRecord {
                step: done,
                epoch,
                loss,
                lr,
                wall_ms: if self.config.test_mode {
                    0
                } else {
                    start.elapsed().as_millis() as u64
                },
            })?;
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && done.is_multiple_of(every) && done < total {
                    self.checkpoint().save(dir.join(checkpoint_name(done)))?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.checkpoint().save(dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    }
}

/// Trains `model` from step 0 and returns the finished trainer.
pub fn train(
    model: Model<f32>,
    config: TrainConfig,
    exec: Exec,
    data: &[DatasetRecord],
    sink: &mut dyn MetricSink,
    checkpoint_dir: Option<&Path>,
) -> Result<Trainer> {
    let mut t = Trainer::new(model, config)?;
    t.run(exec, data, sink, checkpoint_dir)?;
    Ok(t)
}

#[cfg(test)]
mod tests;
