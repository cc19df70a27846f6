use super::{Gradients, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::{points_tensor, Point};
use crate::tensor::{Graph, Real, Var};

const LN_EPS: f64 = 1e-5;

/// One forward (and optionally backward) evaluation: a fresh tape plus the
/// lazily bound parameter leaves.
pub struct Session<'a, R: Real> {
    pub(crate) cfg: &'a ModelConfig,
    params: &'a ModelParams<R>,
    bound: Vec<Option<Var>>,
    frozen_prefix: Option<String>,
    g: Graph<R>,
}

impl<'a, R: Real> Session<'a, R> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams<R>) -> Self {
        Session {
            cfg,
            params,
            bound: vec![None; params.len()],
            frozen_prefix: None,
            g: Graph::new(),
        }
    }

    /// Parameters whose name starts with `prefix` enter the tape as constants.
    pub fn freeze(mut self, prefix: &str) -> Self {
        self.frozen_prefix = Some(prefix.to_string());
        self
    }

    pub fn graph(&self) -> &Graph<R> {
        &self.g
    }

    pub fn graph_mut(&mut self) -> &mut Graph<R> {
        &mut self.g
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    /// Leaf for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let value = self.params.entries()[i].value.clone();
        let frozen = self
            .frozen_prefix
            .as_deref()
            .is_some_and(|pre| name.starts_with(pre));
        let v = if frozen {
            self.g.constant(value)
        } else {
            self.g.param(value)
        };
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.g.backward(loss)
    }

    /// Gradients after [`Session::backward`]; parameters that were never used
    /// (or frozen) get zeros.
    pub fn param_grads(&self) -> Gradients<R> {
        self.params
            .iter()
            .zip(&self.bound)
            .map(|(p, b)| match b.and_then(|v| self.g.grad(v)) {
                Some(g) => g.to_vec(),
                None => vec![R::zero(); p.value.numel()],
            })
            .collect()
    }

    pub fn coords(&mut self, points: &[Point]) -> Result<Var> {
        let t = points_tensor(points)?;
        Ok(self.g.constant(t))
    }

    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_bias(y, b)
    }

    /// `Linear -> GELU -> Linear`.
    pub fn mlp(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.0"))?;
        let h = self.g.gelu(h)?;
        self.linear(h, &format!("{name}.1"))
    }

    pub fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        self.g.layer_norm(x, gamma, beta, R::of(LN_EPS))
    }

    /// Multi-head self-attention over the rows of `x`. `allow` is the
    /// row-major `n x n` attention mask (`None` = every pair). Returns the
    /// projected output and the per-head attention weights.
    pub fn attention(
        &mut self,
        x: Var,
        name: &str,
        allow: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let n = self.g.value(x).rows();
        let c = self.g.value(x).cols();
        let heads = self.cfg.heads;
        let d = c / heads;
        let full;
        let allow = match allow {
            Some(a) => a,
            None => {
                full = vec![true; n * n];
                &full
            }
        };
        let qkv = self.linear(x, &format!("{name}.qkv"))?;
        let scale = R::of(1.0 / (d as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = self.g.slice_cols(qkv, h * d, d)?;
            let k = self.g.slice_cols(qkv, c + h * d, d)?;
            let v = self.g.slice_cols(qkv, 2 * c + h * d, d)?;
            let kt = self.g.transpose(k)?;
            let scores = self.g.matmul(q, kt)?;
            let scores = self.g.scale(scores, scale)?;
            let probs = self.g.masked_softmax(scores, allow)?;
            outs.push(self.g.matmul(probs, v)?);
            weights.push(probs);
        }
        let cat = self.g.concat_cols(&outs)?;
        let out = self.linear(cat, &format!("{name}.proj"))?;
        Ok((out, weights))
    }

    /// Pre-norm transformer block with the positional encoding added to the
    /// block input: `h = x + pos; h += attn(ln1(h)); h += ffn(ln2(h))`.
    pub fn block(
        &mut self,
        x: Var,
        pos: Var,
        name: &str,
        allow: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let h = self.g.add(x, pos)?;
        let n1 = self.norm(h, &format!("{name}.ln1"))?;
        let (a, weights) = self.attention(n1, &format!("{name}.attn"), allow)?;
        let h = self.g.add(h, a)?;
        let n2 = self.norm(h, &format!("{name}.ln2"))?;
        let f = self.mlp(n2, &format!("{name}.ffn"))?;
        Ok((self.g.add(h, f)?, weights))
    }
}
