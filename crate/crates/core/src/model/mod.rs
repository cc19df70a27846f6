//! Hierarchical masked autoencoder: token embedding and merging, local
//! spatial attention, mask tokens, token propagation with skip connections
//! and the Chamfer reconstruction head.

mod checkpoint;
mod decoder;
mod encoder;
mod params;
mod session;

pub use checkpoint::{Checkpoint, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decoder::{reconstruction_targets, DecoderOutput};
pub use encoder::{EncoderOutput, TokenSet};
pub use params::{decays, Gradients, ModelParams, Param};
pub use session::Session;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointSet};
use crate::masking;
use crate::parallel::Exec;
use crate::rng::Rng;
use crate::tensor::Real;
use serde::{Deserialize, Serialize};

/// Architecture switches for the ablation matrix. All `true` is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub hierarchical_encoder: bool,
    pub hierarchical_decoder: bool,
    pub skip_connections: bool,
    pub local_attention: bool,
    pub multi_scale_mask: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            hierarchical_encoder: true,
            hierarchical_decoder: true,
            skip_connections: true,
            local_attention: true,
            multi_scale_mask: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Seeds per scale `N_1 > ... > N_S`.
    pub counts: Vec<usize>,
    /// Token width per scale `C_i`.
    pub dims: Vec<usize>,
    /// Local attention radius per encoder stage.
    pub radii: Vec<f64>,
    /// Neighbourhood size per scale `k_i`.
    pub ks: Vec<usize>,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of the token width.
    pub mlp_ratio: usize,
    /// Neighbours used by decoder token propagation.
    pub interp_k: usize,
    pub mask_ratio: f64,
    pub flags: AblationFlags,
}

impl ModelConfig {
    /// Three-stage encoder, two-stage decoder at the published sizes.
    pub fn paper() -> Self {
        ModelConfig {
            counts: vec![512, 256, 64],
            dims: vec![96, 192, 384],
            radii: vec![0.32, 0.64, 1.28],
            ks: vec![16, 8, 8],
            encoder_blocks: 5,
            decoder_blocks: 1,
            heads: 6,
            mlp_ratio: 4,
            interp_k: 3,
            mask_ratio: 0.8,
            flags: AblationFlags::default(),
        }
    }

    /// Reduced widths and depth for CPU runs; same point hierarchy as [`ModelConfig::paper`].
    pub fn desk() -> Self {
        ModelConfig {
            dims: vec![48, 96, 192],
            encoder_blocks: 2,
            ..ModelConfig::paper()
        }
    }

    /// Smallest configuration used by gradient checks and regression tests.
    pub fn small() -> Self {
        ModelConfig {
            counts: vec![64, 32, 8],
            dims: vec![32, 64, 128],
            radii: vec![0.32, 0.64, 1.28],
            ks: vec![16, 8, 8],
            encoder_blocks: 1,
            decoder_blocks: 1,
            heads: 4,
            mlp_ratio: 2,
            interp_k: 3,
            mask_ratio: 0.8,
            flags: AblationFlags::default(),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.counts.len()
    }

    /// Scale whose masked tokens feed the reconstruction head.
    pub fn reconstruction_scale(&self) -> usize {
        if self.flags.hierarchical_decoder {
            2
        } else {
            self.num_stages()
        }
    }

    pub fn dim(&self, scale: usize) -> usize {
        self.dims[scale - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.counts.len();
        let bad = |msg: String| Err(Error::Config(msg));
        if s < 2 {
            return bad(format!("need at least 2 stages, got {s}"));
        }
        if self.dims.len() != s || self.radii.len() != s || self.ks.len() != s {
            return bad(format!(
                "counts, dims, radii and ks must have equal length ({s}, {}, {}, {})",
                self.dims.len(),
                self.radii.len(),
                self.ks.len()
            ));
        }
        if self.counts.windows(2).any(|w| w[1] >= w[0]) || self.counts.contains(&0) {
            return bad(format!("counts must strictly decrease: {:?}", self.counts));
        }
        if self.dims.windows(2).any(|w| w[1] < w[0]) || self.dims.contains(&0) {
            return bad(format!("dims must be positive and non-decreasing: {:?}", self.dims));
        }
        if self.radii.windows(2).any(|w| w[1] <= w[0]) || self.radii.iter().any(|&r| r <= 0.0)
        {
            return bad(format!("radii must be positive and increasing: {:?}", self.radii));
        }
        if self.heads == 0 || self.dims.iter().any(|d| d % self.heads != 0) {
            return bad(format!("{} heads must divide every dim {:?}", self.heads, self.dims));
        }
        for i in 1..s {
            if self.ks[i] > self.counts[i - 1] {
                return bad(format!(
                    "k = {} at scale {} exceeds {} parent points",
                    self.ks[i],
                    i + 1,
                    self.counts[i - 1]
                ));
            }
        }
        if self.ks.contains(&0) {
            return bad("ks must be positive".into());
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return bad("stages need at least one block".into());
        }
        if self.mlp_ratio == 0 || self.interp_k == 0 {
            return bad("mlp_ratio and interp_k must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        Ok(())
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model<R: Real> {
    config: ModelConfig,
    params: ModelParams<R>,
}

impl<R: Real> Model<R> {
    /// Fresh model with deterministic initialisation from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<R>) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::<R>::init(&config, 0);
        params.check_layout(&expected)?;
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<R> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ModelParams<R>) {
        (self.config, self.params)
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn session(&self) -> Session<'_, R> {
        Session::new(&self.config, &self.params)
    }

    /// Pretraining loss only (no backward).
    pub fn pretrain_loss(&self, points: &PointSet, rng: &mut Rng) -> Result<R> {
        let mut s = self.session();
        let loss = s.forward_pretrain(points, rng)?;
        Ok(s.graph().value(loss).item())
    }

    /// Pretraining loss and the gradient of every parameter.
    pub fn pretrain_grads(&self, points: &PointSet, rng: &mut Rng) -> Result<(R, Gradients<R>)> {
        let mut s = self.session();
        let loss = s.forward_pretrain(points, rng)?;
        let value = s.graph().value(loss).item();
        s.backward(loss)?;
        Ok((value, s.param_grads()))
    }

    /// Summed max and mean pooling of the coarsest encoder tokens, unmasked.
    pub fn global_feature(&self, points: &PointSet) -> Result<Vec<R>> {
        let mut s = self.session();
        let f = s.extract_global_feature(points)?;
        Ok(s.graph().value(f).data().to_vec())
    }

    /// [`Model::global_feature`] for many clouds.
    pub fn global_features(&self, exec: Exec, clouds: &[PointSet]) -> Result<Vec<Vec<R>>> {
        exec.try_map(clouds.len(), |i| self.global_feature(&clouds[i]))
    }

    pub fn build_scales(&self, points: &PointSet) -> Result<masking::MultiScaleRepr> {
        masking::build_scales(points, &self.config.counts, &self.config.ks)
    }
}

/// Coordinates of `index` within `points`.
pub(crate) fn pick(points: &[Point], index: &[usize]) -> Vec<Point> {
    index.iter().map(|&i| points[i]).collect()
}
