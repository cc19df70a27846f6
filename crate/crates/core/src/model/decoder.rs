use super::params::{decoder_layout, decoder_stage_scale};
use super::{pick, EncoderOutput, Session};
use crate::error::{contract, Result};
use crate::geometry::{interpolate, Point, PointSet};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor, Var};

/// Decoder tokens at every point of one scale (visible and masked), rows in
/// point-index order.
pub struct DecoderOutput {
    pub scale: usize,
    pub coords: Vec<Point>,
    pub feats: Var,
}

/// Row order that interleaves `visible` rows (ranked first in a stacked
/// tensor) with rows supplied by `masked_row(rank)`.
fn splice_index(visible: &[bool], masked_row: impl Fn(usize) -> usize) -> Vec<usize> {
    let mut v = 0;
    let mut m = 0;
    visible
        .iter()
        .map(|&vis| {
            if vis {
                v += 1;
                v - 1
            } else {
                m += 1;
                masked_row(m - 1)
            }
        })
        .collect()
}

impl<R: Real> Session<'_, R> {
    fn decoder_stage(&mut self, x: Var, coords: &[Point], j: usize) -> Result<Var> {
        let (_, blocks) = decoder_layout(self.cfg);
        let pos = self.positional(coords, &format!("decoder.stage{j}.pos"))?;
        let mut x = x;
        for b in 0..blocks {
            x = self.block(x, pos, &format!("decoder.stage{j}.block{b}"), None)?.0;
        }
        Ok(x)
    }

    /// Mask tokens at the masked coarsest positions, then per stage: vanilla
    /// attention blocks; between stages, interpolation onto the next finer
    /// scale, a width-changing linear layer and skip fusion of the visible
    /// tokens with the matching encoder tokens.
    pub fn decode(&mut self, enc: &EncoderOutput) -> Result<DecoderOutput> {
        let s = self.cfg.num_stages();
        let (stages, _) = decoder_layout(self.cfg);
        let top = enc.scale(s);
        let n_vis = top.len();
        let token = self.p("decoder.mask_token")?;
        let c = self.cfg.dim(s);
        let token = self.graph_mut().reshape(token, vec![1, c])?;
        let stacked = self.graph_mut().concat_rows(&[top.feats, token])?;
        let order = splice_index(enc.mask.visible(s), |_| n_vis);
        let mut x = self.graph_mut().gather_rows(stacked, &order)?;
        let mut coords = enc.repr.points(s).to_vec();
        x = self.decoder_stage(x, &coords, 1)?;

        for j in 2..=stages {
            let scale = decoder_stage_scale(self.cfg, j);
            let fine = enc.repr.points(scale).to_vec();
            let k = self.cfg.interp_k.min(coords.len());
            let up = interpolate(self.graph_mut(), &fine, &coords, x, k)?;
            let mut h = self.linear(up, &format!("decoder.up{j}"))?;
            if self.cfg.flags.skip_connections {
                let visible = enc.mask.visible(scale);
                let vis_idx = enc.mask.visible_indices(scale);
                let masked_idx = enc.mask.masked_indices(scale);
                let skip = enc.scale(scale).feats;
                let hv = self.graph_mut().gather_rows(h, &vis_idx)?;
                let cat = self.graph_mut().concat_cols(&[hv, skip])?;
                let fused = self.linear(cat, &format!("decoder.skip{j}"))?;
                let mut parts = vec![fused];
                if !masked_idx.is_empty() {
                    parts.push(self.graph_mut().gather_rows(h, &masked_idx)?);
                }
                let stacked = self.graph_mut().concat_rows(&parts)?;
                let n_vis = vis_idx.len();
                let order = splice_index(visible, |m| n_vis + m);
                h = self.graph_mut().gather_rows(stacked, &order)?;
            }
            coords = fine;
            x = self.decoder_stage(h, &coords, j)?;
        }
        let feats = self.norm(x, "decoder.norm")?;
        Ok(DecoderOutput {
            scale: self.cfg.reconstruction_scale(),
            coords,
            feats,
        })
    }

    /// Predicts, for every masked token at the reconstruction scale, its `k`
    /// neighbours one scale down as offsets from the token's own position,
    /// and scores them with the per-token Chamfer distance averaged over
    /// tokens. Returns `(predictions [n_masked, k, 3], loss)`.
    pub fn reconstruct(&mut self, dec: &DecoderOutput, enc: &EncoderOutput) -> Result<(Var, Var)> {
        let scale = dec.scale;
        let masked = enc.mask.masked_indices(scale);
        contract!(
            !masked.is_empty(),
            "reconstruction needs at least one masked token at scale {scale}"
        );
        let table = enc.repr.neighbors(scale);
        let k = table.k();
        let h = self.graph_mut().gather_rows(dec.feats, &masked)?;
        let flat = self.linear(h, "head.recon")?;
        let pred = self.graph_mut().reshape(flat, vec![masked.len(), k, 3])?;

        let seeds = enc.repr.points(scale);
        let finer = enc.repr.points(scale - 1);
        let mut target = Vec::with_capacity(masked.len() * k * 3);
        for &m in &masked {
            for &j in table.row(m) {
                for a in 0..3 {
                    target.push(R::of(finer[j][a] as f64 - seeds[m][a] as f64));
                }
            }
        }
        let target = Tensor::new(vec![masked.len() * k, 3], target)?;
        let loss = self.graph_mut().chamfer(pred, &target, k, k)?;
        Ok((pred, loss))
    }

    /// `encode -> decode -> reconstruct`; returns the scalar loss.
    pub fn forward_pretrain(&mut self, points: &PointSet, rng: &mut Rng) -> Result<Var> {
        let enc = self.encode(points, rng)?;
        let dec = self.decode(&enc)?;
        Ok(self.reconstruct(&dec, &enc)?.1)
    }
}

/// Ground-truth neighbour offsets for the masked tokens at `scale`, grouped per
/// token, computed in `f64` off the tape.
pub fn reconstruction_targets(enc: &EncoderOutput, scale: usize) -> Vec<Vec<[f64; 3]>> {
    let seeds = enc.repr.points(scale);
    let finer = enc.repr.points(scale - 1);
    enc.mask
        .masked_indices(scale)
        .iter()
        .map(|&m| {
            pick(finer, enc.repr.neighbors(scale).row(m))
                .iter()
                .map(|p| std::array::from_fn(|a| p[a] as f64 - seeds[m][a] as f64))
                .collect()
        })
        .collect()
}
