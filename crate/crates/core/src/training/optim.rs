use crate::error::{contract, Result};
use crate::model::{decays, Gradients, ModelParams};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<R> {
    pub hyper: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
}

impl<R: Real> OptimizerState<R> {
    pub fn new(params: &ModelParams<R>, hyper: AdamWConfig) -> Self {
        OptimizerState {
            hyper,
            step: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    /// One bias-corrected update. Decoupled decay `p -= lr * wd * p` skips
    /// norm parameters and the mask token.
    pub fn step(&mut self, params: &mut ModelParams<R>, grads: &Gradients<R>, lr: f64) -> Result<()> {
        self.step_where(params, grads, lr, |_| true)
    }

    /// [`OptimizerState::step`] restricted to parameters accepted by
    /// `trainable`; the rest (and their moments) are left untouched.
    pub fn step_where(
        &mut self,
        params: &mut ModelParams<R>,
        grads: &Gradients<R>,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        contract!(
            grads.len() == params.len() && self.m.len() == params.len(),
            "optimizer: {} grads / {} moments for {} params",
            grads.len(),
            self.m.len(),
            params.len()
        );
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = R::of(1.0 - h.beta1.powi(t));
        let bc2 = R::of(1.0 - h.beta2.powi(t));
        let (b1, b2) = (R::of(h.beta1), R::of(h.beta2));
        let (one, eps, lr_r) = (R::one(), R::of(h.eps), R::of(lr));
        for (i, p) in params.entries_mut().iter_mut().enumerate() {
            if !trainable(&p.name) {
                continue;
            }
            let g = &grads[i];
            contract!(
                g.len() == p.value.numel(),
                "gradient for {} has {} entries, expected {}",
                p.name,
                g.len(),
                p.value.numel()
            );
            let decay = if decays(&p.name) {
                R::of(1.0 - lr * h.weight_decay)
            } else {
                one
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x = *x * decay - lr_r * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<R: Real>(grads: &mut Gradients<R>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = R::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}
