use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub value: Tensor<R>,
}

/// Named parameter arrays in a fixed declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<R> {
    entries: Vec<Param<R>>,
    index: HashMap<String, usize>,
}

/// One gradient buffer per parameter, aligned with [`ModelParams::iter`].
pub type Gradients<R> = Vec<Vec<R>>;

enum Init {
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Ones,
    /// `N(0, std^2)`.
    Normal(f64),
}

struct Builder {
    rng: Rng,
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Xavier => {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| self.rng.uniform_in(-bound, bound)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| std * self.rng.normal()).collect(),
        };
        self.entries.push((name, shape, data));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.add(format!("{name}.weight"), vec![fan_in, fan_out], Init::Xavier);
        self.add(format!("{name}.bias"), vec![fan_out], Init::Zeros);
    }

    fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize) {
        self.linear(&format!("{name}.0"), fan_in, hidden);
        self.linear(&format!("{name}.1"), hidden, fan_out);
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.add(format!("{name}.gamma"), vec![dim], Init::Ones);
        self.add(format!("{name}.beta"), vec![dim], Init::Zeros);
    }

    fn block(&mut self, name: &str, dim: usize, mlp_ratio: usize) {
        self.norm(&format!("{name}.ln1"), dim);
        self.linear(&format!("{name}.attn.qkv"), dim, 3 * dim);
        self.linear(&format!("{name}.attn.proj"), dim, dim);
        self.norm(&format!("{name}.ln2"), dim);
        self.mlp(&format!("{name}.ffn"), dim, mlp_ratio * dim, dim);
    }
}

/// Number of attention blocks in encoder stage `stage` (1-based).
pub(crate) fn encoder_stage_blocks(cfg: &ModelConfig, stage: usize) -> usize {
    match (cfg.flags.hierarchical_encoder, stage) {
        (true, _) => cfg.encoder_blocks,
        (false, 1) => cfg.num_stages() * cfg.encoder_blocks,
        (false, _) => 0,
    }
}

/// Number of decoder stages and blocks per stage.
pub(crate) fn decoder_layout(cfg: &ModelConfig) -> (usize, usize) {
    let s = cfg.num_stages();
    if cfg.flags.hierarchical_decoder {
        (s - 1, cfg.decoder_blocks)
    } else {
        (1, (s - 1) * cfg.decoder_blocks)
    }
}

/// Scale handled by decoder stage `j` (1-based).
pub(crate) fn decoder_stage_scale(cfg: &ModelConfig, j: usize) -> usize {
    cfg.num_stages() + 1 - j
}

impl<R: Real> ModelParams<R> {
    /// Declares every parameter of `cfg` in a fixed order and initialises it
    /// from a single stream seeded with `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut b = Builder {
            rng: Rng::stream(seed, "init", 0),
            entries: Vec::new(),
        };
        let s = cfg.num_stages();
        let c1 = cfg.dim(1);
        b.mlp("encoder.embed.mlp1", 3, c1, c1);
        b.mlp("encoder.embed.mlp2", c1, c1, c1);
        for i in 1..=s {
            if i > 1 {
                b.mlp(&format!("encoder.merge{i}"), cfg.dim(i - 1) + 3, cfg.dim(i), cfg.dim(i));
            }
            let blocks = encoder_stage_blocks(cfg, i);
            if blocks == 0 {
                continue;
            }
            let c = cfg.dim(i);
            b.mlp(&format!("encoder.stage{i}.pos"), 3, c, c);
            for k in 0..blocks {
                b.block(&format!("encoder.stage{i}.block{k}"), c, cfg.mlp_ratio);
            }
            b.norm(&format!("encoder.stage{i}.norm"), c);
        }

        b.add("decoder.mask_token".into(), vec![cfg.dim(s)], Init::Normal(0.02));
        let (stages, blocks) = decoder_layout(cfg);
        for j in 1..=stages {
            let scale = decoder_stage_scale(cfg, j);
            let c = cfg.dim(scale);
            if j > 1 {
                b.linear(&format!("decoder.up{j}"), cfg.dim(scale + 1), c);
                if cfg.flags.skip_connections {
                    b.linear(&format!("decoder.skip{j}"), 2 * c, c);
                }
            }
            b.mlp(&format!("decoder.stage{j}.pos"), 3, c, c);
            for k in 0..blocks {
                b.block(&format!("decoder.stage{j}.block{k}"), c, cfg.mlp_ratio);
            }
        }
        let rs = cfg.reconstruction_scale();
        b.norm("decoder.norm", cfg.dim(rs));
        b.linear("head.recon", cfg.dim(rs), cfg.ks[rs - 1] * 3);

        let entries = b
            .entries
            .into_iter()
            .map(|(name, shape, data)| Param {
                name,
                value: Tensor::new(shape, data.into_iter().map(R::of).collect())
                    .expect("declared shapes are consistent"),
            })
            .collect();
        ModelParams::from_entries(entries).expect("declared names are unique")
    }

    /// Xavier-initialised `Linear -> GELU -> Linear -> GELU -> Linear` stack
    /// named `{name}.0`, `{name}.1`, `{name}.2`.
    pub fn mlp_head(name: &str, dims: [usize; 4], seed: u64) -> Vec<Param<R>> {
        let mut b = Builder {
            rng: Rng::stream(seed, name, 0),
            entries: Vec::new(),
        };
        for l in 0..3 {
            b.linear(&format!("{name}.{l}"), dims[l], dims[l + 1]);
        }
        b.entries
            .into_iter()
            .map(|(name, shape, data)| Param {
                name,
                value: Tensor::new(shape, data.into_iter().map(R::of).collect())
                    .expect("declared shapes are consistent"),
            })
            .collect()
    }

    /// Appends a parameter; names must stay unique.
    pub fn push(&mut self, p: Param<R>) -> Result<()> {
        if self.index.contains_key(&p.name) {
            return Err(Error::Contract(format!("duplicate parameter {}", p.name)));
        }
        self.index.insert(p.name.clone(), self.entries.len());
        self.entries.push(p);
        Ok(())
    }

    pub fn from_entries(entries: Vec<Param<R>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, p) in entries.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(ModelParams { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.entries.iter()
    }

    pub fn entries(&self) -> &[Param<R>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<R>] {
        &mut self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.position(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.position(name).map(move |i| &mut self.entries[i].value)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.is_finite())
    }

    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Zero gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Gradients<R> {
        self.entries
            .iter()
            .map(|p| vec![R::zero(); p.value.numel()])
            .collect()
    }

    /// Same names, order and shapes as `other`.
    pub fn check_layout<S: Real>(&self, other: &ModelParams<S>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Parse(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(other.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Parse(format!(
                    "parameter layout mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Norm parameters and the mask token are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".gamma") || name.ends_with(".beta") || name == "decoder.mask_token")
}
