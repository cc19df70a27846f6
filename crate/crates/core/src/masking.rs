//! Multi-scale point hierarchy and cross-scale consistent masking.
//!
//! Scale 0 is the raw cloud. Scale `i` seeds are chosen by FPS from scale
//! `i - 1` and each seed records its `k_i` nearest scale-`(i-1)` points. The
//! random mask is drawn only at the coarsest scale and then pushed down: a
//! scale-`i` point is visible exactly when it is a neighbour of some visible
//! scale-`(i+1)` seed.

use crate::error::{Error, Result};
use crate::geometry::{fps, knn, NeighborIndex, Point, PointSet};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Scale {
    /// Seed coordinates `P_i`.
    pub seeds: Vec<Point>,
    /// Position of each seed inside the parent scale.
    pub parent_index: Vec<usize>,
    /// `k_i` nearest parent-scale points of each seed.
    pub neighbors: NeighborIndex,
}

#[derive(Clone, Debug)]
pub struct MultiScaleRepr {
    input: PointSet,
    scales: Vec<Scale>,
}

impl MultiScaleRepr {
    /// Number of scales `S` (excluding the raw input).
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Coordinates at scale `i`; `0` is the raw input.
    pub fn points(&self, i: usize) -> &[Point] {
        if i == 0 {
            self.input.coords()
        } else {
            &self.scales[i - 1].seeds
        }
    }

    /// Scale `i >= 1`.
    pub fn scale(&self, i: usize) -> &Scale {
        &self.scales[i - 1]
    }

    /// Neighbour table `I_i` into scale `i - 1`, for `i >= 1`.
    pub fn neighbors(&self, i: usize) -> &NeighborIndex {
        &self.scales[i - 1].neighbors
    }

    pub fn counts(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.seeds.len()).collect()
    }

    pub fn input(&self) -> &PointSet {
        &self.input
    }
}

/// Successive FPS + k-NN grouping.
pub fn build_scales(points: &PointSet, counts: &[usize], ks: &[usize]) -> Result<MultiScaleRepr> {
    validate_hierarchy(points.len(), counts, ks)?;
    let mut scales: Vec<Scale> = Vec::with_capacity(counts.len());
    for (&n, &k) in counts.iter().zip(ks) {
        let parent: &[Point] = scales.last().map_or(points.coords(), |s| &s.seeds);
        let parent_index = fps(parent, n)?;
        let seeds: Vec<Point> = parent_index.iter().map(|&j| parent[j]).collect();
        let neighbors = knn(&seeds, parent, k)?;
        scales.push(Scale {
            seeds,
            parent_index,
            neighbors,
        });
    }
    Ok(MultiScaleRepr {
        input: points.clone(),
        scales,
    })
}

/// Checks `N > N_1 > ... > N_S >= 1` and `1 <= k_i <= N_{i-1}`.
pub fn validate_hierarchy(n: usize, counts: &[usize], ks: &[usize]) -> Result<()> {
    if counts.is_empty() || counts.len() != ks.len() {
        return Err(Error::Config(format!(
            "need one k per scale: {} counts vs {} ks",
            counts.len(),
            ks.len()
        )));
    }
    let mut prev = n;
    for (i, (&c, &k)) in counts.iter().zip(ks).enumerate() {
        if c == 0 || c >= prev {
            return Err(Error::Config(format!(
                "scale {} count {c} must be in [1, {prev})",
                i + 1
            )));
        }
        if k == 0 || k > prev {
            return Err(Error::Config(format!(
                "scale {} k = {k} must be in [1, {prev}]",
                i + 1
            )));
        }
        prev = c;
    }
    Ok(())
}

/// Per-scale visibility; `visible(i)` for scale `i` in `1..=S`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskAssignment {
    visible: Vec<Vec<bool>>,
}

impl MaskAssignment {
    pub fn new(visible: Vec<Vec<bool>>) -> Self {
        MaskAssignment { visible }
    }

    /// Every point of every scale visible.
    pub fn all_visible(repr: &MultiScaleRepr) -> Self {
        MaskAssignment {
            visible: repr.counts().iter().map(|&n| vec![true; n]).collect(),
        }
    }

    pub fn num_scales(&self) -> usize {
        self.visible.len()
    }

    pub fn visible(&self, i: usize) -> &[bool] {
        &self.visible[i - 1]
    }

    pub fn visible_indices(&self, i: usize) -> Vec<usize> {
        self.visible(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &v)| v.then_some(j))
            .collect()
    }

    pub fn masked_indices(&self, i: usize) -> Vec<usize> {
        self.visible(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &v)| (!v).then_some(j))
            .collect()
    }

    pub fn visible_count(&self, i: usize) -> usize {
        self.visible(i).iter().filter(|&&v| v).count()
    }

    pub fn masked_count(&self, i: usize) -> usize {
        self.visible(i).len() - self.visible_count(i)
    }
}

/// `floor(ratio * n)`. The tiny slack absorbs products such as
/// `0.29 * 100 = 28.999999999999996`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Exactly `masked_count(n, ratio)` positions set to `false`, drawn uniformly
/// without replacement.
pub fn sample_scale_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    let m = masked_count(n, ratio).min(n);
    let mut visible = vec![true; n];
    for j in rng.choose_distinct(n, m) {
        visible[j] = false;
    }
    Ok(visible)
}

/// Pushes the coarsest-scale visibility down through the neighbour tables.
pub fn back_project(repr: &MultiScaleRepr, top_visible: Vec<bool>) -> Result<MaskAssignment> {
    let s = repr.num_scales();
    if top_visible.len() != repr.points(s).len() {
        return Err(Error::Contract(format!(
            "mask length {} does not match {} seeds at scale {s}",
            top_visible.len(),
            repr.points(s).len()
        )));
    }
    if !top_visible.iter().any(|&v| v) {
        return Err(Error::Contract(format!(
            "no visible seed at scale {s}; the encoder needs at least one token"
        )));
    }
    let mut visible = vec![Vec::new(); s];
    visible[s - 1] = top_visible;
    for i in (1..s).rev() {
        let mut vis = vec![false; repr.points(i).len()];
        let upper = &visible[i];
        let table = repr.neighbors(i + 1);
        for (seed, &v) in upper.iter().enumerate() {
            if v {
                for &j in table.row(seed) {
                    vis[j] = true;
                }
            }
        }
        visible[i - 1] = vis;
    }
    Ok(MaskAssignment { visible })
}

/// Multi-scale mask: sample at scale S, then back-project.
pub fn multi_scale_mask(repr: &MultiScaleRepr, ratio: f64, rng: &mut Rng) -> Result<MaskAssignment> {
    let top = sample_scale_mask(repr.points(repr.num_scales()).len(), ratio, rng)?;
    back_project(repr, top)
}

/// Ablation: an independent random mask at every scale, no back-projection.
pub fn independent_masks(
    repr: &MultiScaleRepr,
    ratio: f64,
    rng: &mut Rng,
) -> Result<MaskAssignment> {
    let visible = (1..=repr.num_scales())
        .map(|i| sample_scale_mask(repr.points(i).len(), ratio, rng))
        .collect::<Result<Vec<_>>>()?;
    if visible.iter().any(|v| !v.iter().any(|&x| x)) {
        return Err(Error::Contract("a scale has no visible point".into()));
    }
    Ok(MaskAssignment { visible })
}

pub fn generate_mask(
    repr: &MultiScaleRepr,
    ratio: f64,
    multi_scale: bool,
    rng: &mut Rng,
) -> Result<MaskAssignment> {
    if multi_scale {
        multi_scale_mask(repr, ratio, rng)
    } else {
        independent_masks(repr, ratio, rng)
    }
}

/// Every neighbour of a visible scale-`(i+1)` seed is visible at scale `i`.
pub fn closure_holds(repr: &MultiScaleRepr, mask: &MaskAssignment) -> bool {
    (1..repr.num_scales()).all(|i| {
        let table = repr.neighbors(i + 1);
        mask.visible(i + 1)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .all(|(seed, _)| table.row(seed).iter().all(|&j| mask.visible(i)[j]))
    })
}

/// No scale-`i` point is visible unless some visible coarser seed claims it.
pub fn minimality_holds(repr: &MultiScaleRepr, mask: &MaskAssignment) -> bool {
    (1..repr.num_scales()).all(|i| {
        let table = repr.neighbors(i + 1);
        let mut claimed = vec![false; repr.points(i).len()];
        for (seed, &v) in mask.visible(i + 1).iter().enumerate() {
            if v {
                for &j in table.row(seed) {
                    claimed[j] = true;
                }
            }
        }
        mask.visible(i)
            .iter()
            .zip(&claimed)
            .all(|(&vis, &cl)| !vis || cl)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(rng: &mut Rng, n: usize) -> PointSet {
        PointSet::new(
            (0..n)
                .map(|_| {
                    [
                        rng.uniform_in(-1.0, 1.0) as f32,
                        rng.uniform_in(-1.0, 1.0) as f32,
                        rng.uniform_in(-1.0, 1.0) as f32,
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_hierarchy_shapes() {
        let mut rng = Rng::new(1);
        let pts = cloud(&mut rng, 2048);
        let repr = build_scales(&pts, &[512, 256, 64], &[16, 8, 8]).unwrap();
        let shapes: Vec<(usize, usize, usize)> = (1..=3)
            .map(|i| (repr.points(i).len(), repr.neighbors(i).rows(), repr.neighbors(i).k()))
            .collect();
        assert_eq!(shapes, vec![(512, 512, 16), (256, 256, 8), (64, 64, 8)]);
        for i in 1..=3 {
            let parent = repr.points(i - 1);
            for s in repr.points(i) {
                assert!(parent.contains(s));
            }
        }
    }

    #[test]
    fn small_hierarchy_shapes() {
        let mut rng = Rng::new(2);
        let repr = build_scales(&cloud(&mut rng, 8), &[4, 2], &[2, 2]).unwrap();
        assert_eq!(repr.counts(), vec![4, 2]);
        assert_eq!(repr.neighbors(1).rows(), 4);
        assert_eq!(repr.neighbors(2).k(), 2);
    }

    #[test]
    fn hierarchy_config_errors() {
        let mut rng = Rng::new(3);
        let pts = cloud(&mut rng, 8);
        assert!(matches!(build_scales(&pts, &[4, 4], &[2, 2]), Err(Error::Config(_))));
        assert!(matches!(build_scales(&pts, &[8], &[2]), Err(Error::Config(_))));
        assert!(matches!(build_scales(&pts, &[4, 2], &[2, 5]), Err(Error::Config(_))));
        assert!(matches!(build_scales(&pts, &[4, 2], &[2]), Err(Error::Config(_))));
    }

    #[test]
    fn scale_mask_counts() {
        let mut rng = Rng::new(4);
        let m = sample_scale_mask(64, 0.8, &mut rng).unwrap();
        assert_eq!(m.iter().filter(|&&v| !v).count(), 51);
        assert_eq!(m.iter().filter(|&&v| v).count(), 13);
        assert!(sample_scale_mask(10, 0.0, &mut rng).unwrap().iter().all(|&v| v));
        assert!(sample_scale_mask(10, 1.0, &mut rng).is_err());
        assert!(sample_scale_mask(10, -0.1, &mut rng).is_err());
        let a = sample_scale_mask(64, 0.8, &mut Rng::new(9)).unwrap();
        let b = sample_scale_mask(64, 0.8, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn floor_rule() {
        assert_eq!(masked_count(64, 0.8), 51);
        assert_eq!(masked_count(100, 0.29), 29);
        assert_eq!(masked_count(7, 0.5), 3);
    }

    fn two_scale_fixture() -> MultiScaleRepr {
        // Scale 1 has four points; scale 2 seeds 0 and 1 group {0,1} and {2,3}.
        let raw = PointSet::new(vec![[0.0; 3]; 5]).unwrap();
        let pts: Vec<Point> = (0..4).map(|i| [i as f32, 0.0, 0.0]).collect();
        MultiScaleRepr {
            input: raw,
            scales: vec![
                Scale {
                    seeds: pts.clone(),
                    parent_index: vec![0, 1, 2, 3],
                    neighbors: NeighborIndex::from_rows(1, vec![0, 1, 2, 3]).unwrap(),
                },
                Scale {
                    seeds: vec![pts[0], pts[2]],
                    parent_index: vec![0, 2],
                    neighbors: NeighborIndex::from_rows(2, vec![0, 1, 2, 3]).unwrap(),
                },
            ],
        }
    }

    #[test]
    fn back_project_definition_example() {
        let repr = two_scale_fixture();
        let mask = back_project(&repr, vec![true, false]).unwrap();
        assert_eq!(mask.visible(1), &[true, true, false, false]);
        let all = back_project(&repr, vec![true, true]).unwrap();
        assert_eq!(all.visible(1), &[true; 4]);
        assert!(back_project(&repr, vec![false, false]).is_err());
        assert!(back_project(&repr, vec![true]).is_err());
    }

    #[test]
    fn closure_and_minimality_on_random_clouds() {
        let mut rng = Rng::new(5);
        for trial in 0..20 {
            let pts = cloud(&mut rng, 300);
            let repr = build_scales(&pts, &[64, 32, 8], &[16, 8, 8]).unwrap();
            let mask = multi_scale_mask(&repr, 0.8, &mut Rng::new(trial)).unwrap();
            assert!(closure_holds(&repr, &mask));
            assert!(minimality_holds(&repr, &mask));
            for i in 1..=3 {
                assert!(mask.visible_count(i) > 0);
            }
            assert_eq!(mask.visible_count(3), 8 - masked_count(8, 0.8));
        }
    }

    #[test]
    fn independent_masks_break_closure() {
        let mut rng = Rng::new(6);
        let pts = cloud(&mut rng, 600);
        let repr = build_scales(&pts, &[128, 64, 16], &[16, 8, 8]).unwrap();
        let mask = independent_masks(&repr, 0.8, &mut Rng::new(1)).unwrap();
        assert!(!closure_holds(&repr, &mask));
    }

    #[test]
    fn visible_coordinates_ignore_input_order() {
        let mut rng = Rng::new(7);
        let pts = cloud(&mut rng, 200);
        let mut perm: Vec<usize> = (0..200).collect();
        rng.shuffle(&mut perm);
        let permuted = PointSet::new(pts.select(&perm)).unwrap();
        let visible_sets = |p: &PointSet| {
            let repr = build_scales(p, &[64, 16, 4], &[8, 8, 4]).unwrap();
            let mask = multi_scale_mask(&repr, 0.5, &mut Rng::new(3)).unwrap();
            (1..=3)
                .map(|i| {
                    let mut v: Vec<Point> = mask
                        .visible_indices(i)
                        .iter()
                        .map(|&j| repr.points(i)[j])
                        .collect();
                    v.sort_by(crate::geometry::lex_cmp);
                    v
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(visible_sets(&pts), visible_sets(&permuted));
    }
}
