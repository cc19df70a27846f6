use super::params::encoder_stage_blocks;
use super::{pick, Session};
use crate::error::Result;
use crate::geometry::{ball_adjacency, knn, Point, PointSet};
use crate::masking::{self, MaskAssignment, MultiScaleRepr};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor, Var};

/// Tokens living at one scale.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub scale: usize,
    /// Point indices within the scale, in row order of `feats`.
    pub indices: Vec<usize>,
    pub coords: Vec<Point>,
    pub feats: Var,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub struct EncoderOutput {
    pub repr: MultiScaleRepr,
    pub mask: MaskAssignment,
    /// Visible tokens `T_i^v`; entry `i - 1` holds scale `i`.
    pub tokens: Vec<TokenSet>,
}

impl EncoderOutput {
    pub fn scale(&self, i: usize) -> &TokenSet {
        &self.tokens[i - 1]
    }
}

/// Offsets of `p` relative to `center`, as constant rows.
fn relative<'a, R: Real>(points: &'a [Point], center: &Point) -> impl Iterator<Item = R> + 'a {
    let c = *center;
    points
        .iter()
        .flat_map(move |p| (0..3).map(move |a| R::of(p[a] as f64 - c[a] as f64)))
}

impl<R: Real> Session<'_, R> {
    /// Mini-PointNet over each visible scale-1 seed's `k_1` raw neighbours:
    /// relative coordinates, shared MLP, max over the neighbourhood, second MLP.
    pub fn embed_tokens(&mut self, repr: &MultiScaleRepr, mask: &MaskAssignment) -> Result<TokenSet> {
        let vis = mask.visible_indices(1);
        let table = repr.neighbors(1);
        let k = table.k();
        let raw = repr.points(0);
        let seeds = repr.points(1);
        let mut rel = Vec::with_capacity(vis.len() * k * 3);
        for &s in &vis {
            let nb = pick(raw, table.row(s));
            rel.extend(relative::<R>(&nb, &seeds[s]));
        }
        let rel = self.g_constant(vec![vis.len() * k, 3], rel)?;
        let h = self.mlp(rel, "encoder.embed.mlp1")?;
        let h = self.graph_mut().segment_max(h, &vec![k; vis.len()])?;
        let feats = self.mlp(h, "encoder.embed.mlp2")?;
        Ok(TokenSet {
            scale: 1,
            coords: pick(seeds, &vis),
            indices: vis,
            feats,
        })
    }

    /// Pools the scale-`(i-1)` tokens around each visible scale-`i` seed:
    /// gather neighbours, append their offsets to the seed, MLP, max-pool.
    ///
    /// With multi-scale masking every neighbour in `I_i` is a visible token;
    /// a missing one means the mask was built incorrectly and panics. Under
    /// the independent-mask ablation the neighbourhood is instead the nearest
    /// visible tokens.
    pub fn merge_tokens(
        &mut self,
        prev: &TokenSet,
        repr: &MultiScaleRepr,
        mask: &MaskAssignment,
        i: usize,
    ) -> Result<TokenSet> {
        let vis = mask.visible_indices(i);
        let seeds = repr.points(i);
        let (rows, k): (Vec<usize>, usize) = if self.cfg.flags.multi_scale_mask {
            let mut row_of = vec![usize::MAX; repr.points(i - 1).len()];
            for (r, &p) in prev.indices.iter().enumerate() {
                row_of[p] = r;
            }
            let table = repr.neighbors(i);
            let rows = vis
                .iter()
                .flat_map(|&s| table.row(s).iter().map(|&j| row_of[j]))
                .inspect(|&r| {
                    assert!(r != usize::MAX, "merge at scale {i}: neighbour token is masked");
                })
                .collect();
            (rows, table.k())
        } else {
            let k = repr.neighbors(i).k().min(prev.len());
            let nn = knn(&pick(seeds, &vis), &prev.coords, k)?;
            (nn.flat().to_vec(), k)
        };
        let gathered = self.graph_mut().gather_rows(prev.feats, &rows)?;
        let mut rel = Vec::with_capacity(rows.len() * 3);
        for (t, &s) in vis.iter().enumerate() {
            let nb = pick(&prev.coords, &rows[t * k..(t + 1) * k]);
            rel.extend(relative::<R>(&nb, &seeds[s]));
        }
        let rel = self.g_constant(vec![rows.len(), 3], rel)?;
        let x = self.graph_mut().concat_cols(&[gathered, rel])?;
        let h = self.mlp(x, &format!("encoder.merge{i}"))?;
        let feats = self.graph_mut().segment_max(h, &vec![k; vis.len()])?;
        Ok(TokenSet {
            scale: i,
            coords: pick(seeds, &vis),
            indices: vis,
            feats,
        })
    }

    /// Ball mask for `coords`, or `None` (all pairs) when local attention is off.
    pub fn local_mask(&self, coords: &[Point], radius: f64) -> Option<Vec<bool>> {
        self.cfg
            .flags
            .local_attention
            .then(|| ball_adjacency(coords, radius))
    }

    /// Positional encoding of token coordinates through a two-layer MLP.
    pub fn positional(&mut self, coords: &[Point], name: &str) -> Result<Var> {
        let c = self.coords(coords)?;
        self.mlp(c, name)
    }

    /// One encoder block with attention restricted to pairs within `radius`
    /// (`None` = unrestricted). Returns the new tokens and attention weights.
    pub fn encoder_block(
        &mut self,
        tokens: &TokenSet,
        pos: Var,
        name: &str,
        radius: Option<f64>,
    ) -> Result<(TokenSet, Vec<Var>)> {
        let allow = radius.and_then(|r| self.local_mask(&tokens.coords, r));
        let (feats, weights) = self.block(tokens.feats, pos, name, allow.as_deref())?;
        Ok((TokenSet { feats, ..tokens.clone() }, weights))
    }

    /// All blocks of encoder stage `i` followed by the stage norm.
    pub fn encoder_stage(&mut self, tokens: TokenSet, i: usize) -> Result<TokenSet> {
        let blocks = encoder_stage_blocks(self.cfg, i);
        if blocks == 0 {
            return Ok(tokens);
        }
        let pos = self.positional(&tokens.coords, &format!("encoder.stage{i}.pos"))?;
        let allow = self.local_mask(&tokens.coords, self.cfg.radii[i - 1]);
        let mut x = tokens.feats;
        for b in 0..blocks {
            x = self
                .block(x, pos, &format!("encoder.stage{i}.block{b}"), allow.as_deref())?
                .0;
        }
        let feats = self.norm(x, &format!("encoder.stage{i}.norm"))?;
        Ok(TokenSet { feats, ..tokens })
    }

    /// Encoder on a prepared hierarchy and mask.
    pub fn encode_with(&mut self, repr: MultiScaleRepr, mask: MaskAssignment) -> Result<EncoderOutput> {
        let s = self.cfg.num_stages();
        let mut tokens = Vec::with_capacity(s);
        let t1 = self.embed_tokens(&repr, &mask)?;
        tokens.push(self.encoder_stage(t1, 1)?);
        for i in 2..=s {
            let merged = self.merge_tokens(&tokens[i - 2], &repr, &mask, i)?;
            tokens.push(self.encoder_stage(merged, i)?);
        }
        Ok(EncoderOutput { repr, mask, tokens })
    }

    /// Builds the hierarchy, draws the mask from `rng`, and encodes.
    pub fn encode(&mut self, points: &PointSet, rng: &mut Rng) -> Result<EncoderOutput> {
        let repr = masking::build_scales(points, &self.cfg.counts, &self.cfg.ks)?;
        let mask = masking::generate_mask(
            &repr,
            self.cfg.mask_ratio,
            self.cfg.flags.multi_scale_mask,
            rng,
        )?;
        self.encode_with(repr, mask)
    }

    /// Unmasked encoding pooled into one `C_S` vector: max pool plus mean pool
    /// over the coarsest tokens.
    pub fn extract_global_feature(&mut self, points: &PointSet) -> Result<Var> {
        let repr = masking::build_scales(points, &self.cfg.counts, &self.cfg.ks)?;
        let mask = MaskAssignment::all_visible(&repr);
        let enc = self.encode_with(repr, mask)?;
        let top = enc.tokens.last().expect("at least two stages");
        self.pool_max_mean(top.feats)
    }

    /// `max_rows(x) + mean_rows(x)` as a `1 x C` row.
    pub fn pool_max_mean(&mut self, x: Var) -> Result<Var> {
        let n = self.graph().value(x).rows();
        let g = self.graph_mut();
        let mx = g.segment_max(x, &[n])?;
        let mean = g.segment_mean(x, &[n])?;
        g.add(mx, mean)
    }

    pub(crate) fn g_constant(&mut self, shape: Vec<usize>, data: Vec<R>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.graph_mut().constant(t))
    }
}
