use super::probe::ProbeResult;
use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::model::{Checkpoint, Gradients, Model, ModelConfig, ModelParams, Session};
use crate::parallel::Exec;
use crate::rng::Rng;
use crate::tensor::{Real, Var};
use crate::training::{
    augment, clip_grad_norm, MetricRecord, MetricSink, OptimizerState, TrainConfig,
};

pub const HEAD: &str = "head.cls";

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub head_hidden: usize,
    /// Train only the classification head; encoder weights stay bit-identical.
    pub frozen_encoder: bool,
}

impl FinetuneConfig {
    /// Published fine-tuning settings.
    pub fn paper() -> Self {
        FinetuneConfig {
            train: TrainConfig {
                batch_size: 32,
                base_lr: 5e-4,
                ..TrainConfig::paper()
            },
            head_hidden: 256,
            frozen_encoder: false,
        }
    }
}

/// Pretrained model parameters plus a three-layer MLP head on the global
/// feature.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub num_classes: usize,
    pub head_hidden: usize,
}

/// Head logits (`1 x classes`) for one cloud, unmasked.
pub fn classifier_logits<R: Real>(s: &mut Session<'_, R>, points: &PointSet) -> Result<Var> {
    let f = s.extract_global_feature(points)?;
    let h = s.linear(f, &format!("{HEAD}.0"))?;
    let h = s.graph_mut().gelu(h)?;
    let h = s.linear(h, &format!("{HEAD}.1"))?;
    let h = s.graph_mut().gelu(h)?;
    s.linear(h, &format!("{HEAD}.2"))
}

impl Classifier {
    pub fn new(model: &Model<f32>, num_classes: usize, head_hidden: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 || head_hidden == 0 {
            return Err(Error::Config(format!(
                "classifier needs >= 2 classes and a hidden width (got {num_classes}, {head_hidden})"
            )));
        }
        let mut params = model.params().clone();
        let c = model.config().dim(model.config().num_stages());
        for p in ModelParams::mlp_head(HEAD, [c, head_hidden, head_hidden, num_classes], seed) {
            params.push(p)?;
        }
        Ok(Classifier {
            config: model.config().clone(),
            params,
            num_classes,
            head_hidden,
        })
    }

    pub fn session(&self) -> Session<'_, f32> {
        Session::new(&self.config, &self.params)
    }

    pub fn logits(&self, points: &PointSet) -> Result<Vec<f32>> {
        let mut s = self.session();
        let l = classifier_logits(&mut s, points)?;
        Ok(s.graph().value(l).data().to_vec())
    }

    pub fn predict(&self, points: &PointSet) -> Result<usize> {
        let l = self.logits(points)?;
        Ok((0..l.len()).fold(0, |best, c| if l[c] > l[best] { c } else { best }))
    }

    pub fn evaluate(&self, exec: Exec, records: &[DatasetRecord], num_train: usize) -> Result<ProbeResult> {
        let pred = exec.try_map(records.len(), |i| self.predict(&records[i].points))?;
        let truth: Vec<usize> = records.iter().map(|r| r.label).collect();
        Ok(ProbeResult::from_predictions(&truth, &pred, self.num_classes, num_train))
    }

    /// Encoder/decoder plus head records; metadata carries the head shape.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.clone());
        ck.push_params("", &self.params);
        ck.meta.insert("num_classes".into(), self.num_classes.to_string());
        ck.meta.insert("head_hidden".into(), self.head_hidden.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let num_classes = ck.meta_u64("num_classes")? as usize;
        let head_hidden = ck.meta_u64("head_hidden")? as usize;
        let mut c = Classifier::new(&model, num_classes, head_hidden, 0)?;
        for p in c.params.entries_mut() {
            if p.name.starts_with(HEAD) {
                let r = ck
                    .record(&p.name)
                    .ok_or_else(|| Error::Parse(format!("checkpoint lacks {}", p.name)))?;
                if r.shape != p.value.shape() {
                    return Err(Error::Parse(format!("{} has shape {:?}", p.name, r.shape)));
                }
                p.value.data_mut().copy_from_slice(&r.data);
            }
        }
        Ok(c)
    }
}

fn trainable(frozen: bool) -> impl Fn(&str) -> bool {
    move |name: &str| name.starts_with(HEAD) || (!frozen && name.starts_with("encoder."))
}

/// Trains the head (and, unless frozen, the encoder) with softmax
/// cross-entropy and reports accuracy on `val`. Sample `i` of step `t` draws
/// its augmentation from stream `(seed, "finetune", t * batch + i)`.
pub fn finetune_classifier(
    model: &Model<f32>,
    train: &[DatasetRecord],
    val: &[DatasetRecord],
    num_classes: usize,
    cfg: &FinetuneConfig,
    exec: Exec,
    sink: &mut dyn MetricSink,
) -> Result<(Classifier, ProbeResult)> {
    let tc = &cfg.train;
    tc.validate()?;
    if let Some(r) = train.iter().chain(val).find(|r| r.label >= num_classes) {
        return Err(Error::Config(format!("{} has label {} >= {num_classes}", r.id, r.label)));
    }
    let mut clf = Classifier::new(model, num_classes, cfg.head_hidden, tc.seed)?;
    let sched = tc.schedule(train.len())?;
    let mut opt = OptimizerState::new(&clf.params, tc.adamw);
    let keep = trainable(cfg.frozen_encoder);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| train[a].id.cmp(&train[b].id));
    let b = tc.batch_size;
    let start = std::time::Instant::now();
    for step in 0..sched.total_steps() {
        let epoch = step / sched.steps_per_epoch as u64;
        let pos = (step % sched.steps_per_epoch as u64) as usize;
        let mut perm = order.clone();
        Rng::stream(tc.seed, "finetune-shuffle", epoch).shuffle(&mut perm);
        let batch = &perm[pos * b..(pos + 1) * b];
        let per = exec.try_map(b, |j| {
            let r = &train[batch[j]];
            let pts = if tc.augment {
                let mut rng = Rng::stream(tc.seed, "finetune", step * b as u64 + j as u64);
                augment(&r.points, &tc.augmentation, &mut rng)
            } else {
                r.points.clone()
            };
            let mut s = clf.session();
            if cfg.frozen_encoder {
                s = s.freeze("encoder.");
            }
            let logits = classifier_logits(&mut s, &pts)?;
            let loss = s.graph_mut().cross_entropy(logits, &[r.label])?;
            let value = s.graph().value(loss).item();
            s.backward(loss)?;
            Ok::<_, Error>((value, s.param_grads()))
        })?;
        let mut grads: Gradients<f32> = clf.params.zero_grads();
        let mut loss = 0.0;
        for (l, g) in &per {
            loss += *l as f64;
            for (acc, part) in grads.iter_mut().zip(g) {
                for (a, x) in acc.iter_mut().zip(part) {
                    *a += *x;
                }
            }
        }
        let inv = 1.0 / b as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at step {step}")));
        }
        if tc.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, tc.grad_clip);
        }
        let lr = sched.lr_at(step + 1);
        opt.step_where(&mut clf.params, &grads, lr, &keep)?;
        sink.record(&MetricRecord {
            step: step + 1,
            epoch,
            loss,
            lr,
            wall_ms: if tc.test_mode {
                0
            } else {
                start.elapsed().as_millis() as u64
            },
        })?;
    }
    let result = clf.evaluate(exec, val, train.len())?;
    Ok((clf, result))
}
