use crate::error::{Error, Result};
use serde::Serialize;

/// Full-batch gradient descent settings for the linear probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Standardise each feature with the training mean and deviation.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 500,
            lr: 0.1,
            weight_decay: 1e-4,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub num_train: usize,
    pub num_test: usize,
}

impl ProbeResult {
    pub fn from_predictions(truth: &[usize], pred: &[usize], num_classes: usize, num_train: usize) -> Self {
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        ProbeResult {
            accuracy: if truth.is_empty() {
                0.0
            } else {
                correct as f64 / truth.len() as f64
            },
            per_class,
            confusion,
            num_train,
            num_test: truth.len(),
        }
    }
}

/// Multinomial logistic regression `softmax(x W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `dim x classes`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
}

impl LinearClassifier {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardized(&self, x: &[f32]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, m), s)| (v as f64 - m) / s)
            .collect()
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let z = self.standardized(x);
        let k = self.classes;
        let mut out = self.bias.clone();
        for (d, &zd) in z.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += zd * self.weight[d * k + c];
            }
        }
        out
    }

    /// Highest logit, lowest class id on ties.
    pub fn predict(&self, x: &[f32]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, c| if l[c] > l[best] { c } else { best })
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Mean cross-entropy plus `wd / 2 * |W|^2`, and its gradient with respect to
/// `(W, b)`, on already standardised rows.
pub(crate) fn objective(
    clf: &LinearClassifier,
    z: &[Vec<f64>],
    labels: &[usize],
    wd: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let k = clf.classes;
    let m = z.len() as f64;
    let mut gw = vec![0.0; clf.weight.len()];
    let mut gb = vec![0.0; k];
    let mut loss = 0.0;
    for (row, &y) in z.iter().zip(labels) {
        let mut p = clf.bias.clone();
        for (d, &zd) in row.iter().enumerate() {
            for (c, pc) in p.iter_mut().enumerate() {
                *pc += zd * clf.weight[d * k + c];
            }
        }
        softmax_in_place(&mut p);
        loss -= p[y].max(1e-300).ln() / m;
        p[y] -= 1.0;
        for (c, pc) in p.iter().enumerate() {
            gb[c] += pc / m;
        }
        for (d, &zd) in row.iter().enumerate() {
            for c in 0..k {
                gw[d * k + c] += zd * p[c] / m;
            }
        }
    }
    for (g, w) in gw.iter_mut().zip(&clf.weight) {
        *g += wd * w;
    }
    loss += 0.5 * wd * clf.weight.iter().map(|w| w * w).sum::<f64>();
    (loss, gw, gb)
}

/// Fits the classifier from zero weights; fully deterministic.
pub fn fit_linear(
    features: &[Vec<f32>],
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearClassifier> {
    if features.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.len() < num_classes {
        return Err(Error::Config(format!(
            "{} training rows cannot cover {num_classes} classes",
            features.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Config(format!("label {bad} >= {num_classes} classes")));
    }
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Config("probe needs at least two classes in training data".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Contract("ragged feature rows".into()));
    }
    let n = features.len() as f64;
    let (mean, scale) = if cfg.standardize {
        let mean: Vec<f64> = (0..dim)
            .map(|d| features.iter().map(|f| f[d] as f64).sum::<f64>() / n)
            .collect();
        let scale = (0..dim)
            .map(|d| {
                let var = features
                    .iter()
                    .map(|f| (f[d] as f64 - mean[d]).powi(2))
                    .sum::<f64>()
                    / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        (mean, scale)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let mut clf = LinearClassifier {
        mean,
        scale,
        weight: vec![0.0; dim * num_classes],
        bias: vec![0.0; num_classes],
        classes: num_classes,
    };
    let z: Vec<Vec<f64>> = features.iter().map(|f| clf.standardized(f)).collect();
    for _ in 0..cfg.iterations {
        let (_, gw, gb) = objective(&clf, &z, labels, cfg.weight_decay);
        for (w, g) in clf.weight.iter_mut().zip(&gw) {
            *w -= cfg.lr * g;
        }
        for (b, g) in clf.bias.iter_mut().zip(&gb) {
            *b -= cfg.lr * g;
        }
    }
    Ok(clf)
}

/// Trains on `(train_x, train_y)` and scores on `(test_x, test_y)`.
pub fn linear_probe(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    test_x: &[Vec<f32>],
    test_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let clf = fit_linear(train_x, train_y, num_classes, cfg)?;
    if let Some(&bad) = test_y.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Config(format!("test label {bad} >= {num_classes} classes")));
    }
    let pred: Vec<usize> = test_x.iter().map(|x| clf.predict(x)).collect();
    Ok(ProbeResult::from_predictions(test_y, &pred, num_classes, train_x.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn one_hot_features_are_solved() {
        let x: Vec<Vec<f32>> = (0..30)
            .map(|i| (0..3).map(|c| if c == i % 3 { 1.0 } else { 0.0 }).collect())
            .collect();
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let r = linear_probe(&x, &y, &x, &y, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0); 3]);
        let trace: usize = (0..3).map(|c| r.confusion[c][c]).sum();
        assert_eq!(r.accuracy, trace as f64 / r.num_test as f64);
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let mut rng = Rng::new(3);
        let mut make = |n: usize| -> (Vec<Vec<f32>>, Vec<usize>) {
            let x = (0..n)
                .map(|_| (0..8).map(|_| rng.normal() as f32).collect())
                .collect();
            let y = (0..n).map(|_| rng.below(5)).collect();
            (x, y)
        };
        let (tx, ty) = make(400);
        let (vx, vy) = make(2000);
        let r = linear_probe(&tx, &ty, &vx, &vy, 5, &ProbeConfig::default()).unwrap();
        assert!((r.accuracy - 0.2).abs() <= 0.1, "{}", r.accuracy);
    }

    #[test]
    fn single_class_is_config_error() {
        let x = vec![vec![1.0f32], vec![2.0]];
        let err = linear_probe(&x, &[0, 0], &x, &[0, 0], 2, &ProbeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn gradient_matches_tape_cross_entropy() {
        let mut rng = Rng::new(8);
        let (m, d, k) = (7, 4, 3);
        let z: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let y: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
        let clf = LinearClassifier {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
            weight: (0..d * k).map(|_| rng.normal()).collect(),
            bias: (0..k).map(|_| rng.normal()).collect(),
            classes: k,
        };
        let (loss, gw, gb) = objective(&clf, &z, &y, 0.0);

        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![m, d], z.concat()).unwrap());
        let w = g.param(Tensor::new(vec![d, k], clf.weight.clone()).unwrap());
        let b = g.param(Tensor::new(vec![k], clf.bias.clone()).unwrap());
        let h = g.matmul(x, w).unwrap();
        let logits = g.add_bias(h, b).unwrap();
        let l = g.cross_entropy(logits, &y).unwrap();
        g.backward(l).unwrap();
        assert!((g.value(l).item() - loss).abs() < 1e-12);
        for (a, b) in g.grad(w).unwrap().iter().zip(&gw) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.grad(b).unwrap().iter().zip(&gb) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
