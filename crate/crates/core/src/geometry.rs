//! Exact point-set kernels.
//!
//! All distances are computed in `f64` from `f32` coordinates with a fixed
//! x, y, z summation order, so results do not depend on input order. Every
//! tie is broken by coordinates first (lexicographic x, y, z) and by index
//! only between identical points; permuting the input therefore permutes the
//! returned indices without changing the selected coordinates.

use crate::error::{contract, Error, Result};
use crate::parallel::Exec;
use crate::tensor::{Graph, Real, Tensor, Var};
use std::cmp::Ordering;

pub type Point = [f32; 3];

/// Non-empty set of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    coords: Vec<Point>,
}

impl PointSet {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        contract!(!coords.is_empty(), "point set must contain at least one point");
        if let Some(i) = coords.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Contract(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointSet { coords })
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<Point> {
        self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn select(&self, index: &[usize]) -> Vec<Point> {
        index.iter().map(|&i| self.coords[i]).collect()
    }
}

impl std::ops::Deref for PointSet {
    type Target = [Point];
    fn deref(&self) -> &[Point] {
        &self.coords
    }
}

/// Row-major `rows x k` table of source indices, each row ascending by distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn from_rows(k: usize, indices: Vec<usize>) -> Result<Self> {
        contract!(k > 0 && indices.len().is_multiple_of(k), "neighbor table is not rectangular");
        Ok(NeighborIndex { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, j: usize) -> &[usize] {
        &self.indices[j * self.k..(j + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

pub fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Centroid whose value does not depend on point order: each axis is summed
/// after sorting.
pub fn centroid(points: &[Point]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (axis, out) in c.iter_mut().enumerate() {
        let mut vals: Vec<f64> = points.iter().map(|p| p[axis] as f64).collect();
        vals.sort_by(f64::total_cmp);
        *out = vals.iter().sum::<f64>() / points.len() as f64;
    }
    c
}

/// Orders candidates "farther first", then smaller coordinates, then smaller index.
fn farther_first(points: &[Point], (i, di): (usize, f64), (j, dj): (usize, f64)) -> Ordering {
    dj.total_cmp(&di)
        .then_with(|| lex_cmp(&points[i], &points[j]))
        .then(i.cmp(&j))
}

/// Furthest point sampling.
///
/// Starts at the point farthest from the centroid, then repeatedly takes the
/// unselected point whose distance to the selected set is largest. Indices are
/// returned in selection order and never repeat.
pub fn fps(points: &[Point], m: usize) -> Result<Vec<usize>> {
    let n = points.len();
    contract!(m >= 1 && m <= n, "fps needs 1 <= m <= N, got m = {m}, N = {n}");
    let c = centroid(points);
    let cp = |p: &Point| {
        let d = [p[0] as f64 - c[0], p[1] as f64 - c[1], p[2] as f64 - c[2]];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    };
    let start = (0..n)
        .map(|i| (i, cp(&points[i])))
        .min_by(|&a, &b| farther_first(points, a, b))
        .map(|(i, _)| i)
        .expect("non-empty");

    let mut selected = vec![false; n];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[start])).collect();
    let mut order = Vec::with_capacity(m);
    order.push(start);
    selected[start] = true;
    while order.len() < m {
        let next = (0..n)
            .filter(|&i| !selected[i])
            .map(|i| (i, min_d[i]))
            .min_by(|&a, &b| farther_first(points, a, b))
            .map(|(i, _)| i)
            .expect("m <= N leaves a candidate");
        selected[next] = true;
        order.push(next);
        let np = points[next];
        for (d, p) in min_d.iter_mut().zip(points) {
            let nd = sq_dist(p, &np);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(order)
}

fn knn_row(query: &Point, sources: &[Point], k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| (sq_dist(query, s), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0)
            .then_with(|| lex_cmp(&sources[a.1], &sources[b.1]))
            .then(a.1.cmp(&b.1))
    };
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Exact k nearest sources for every query, sequentially.
pub fn knn(queries: &[Point], sources: &[Point], k: usize) -> Result<NeighborIndex> {
    knn_with(Exec::Sequential, queries, sources, k)
}

/// [`knn`] with rows evaluated under the given execution mode.
pub fn knn_with(exec: Exec, queries: &[Point], sources: &[Point], k: usize) -> Result<NeighborIndex> {
    contract!(
        k >= 1 && k <= sources.len(),
        "knn needs 1 <= k <= N_source, got k = {k}, N_source = {}",
        sources.len()
    );
    contract!(!queries.is_empty(), "knn with no queries");
    let rows = exec.map(queries.len(), |q| knn_row(&queries[q], sources, k));
    NeighborIndex::from_rows(k, rows.concat())
}

/// `n x n` row-major mask, `true` where the pair lies within `radius`
/// (inclusive). The diagonal is always `true`.
pub fn ball_adjacency(points: &[Point], radius: f64) -> Vec<bool> {
    let n = points.len();
    let r2 = radius * radius;
    let mut mask = vec![false; n * n];
    for a in 0..n {
        for b in 0..n {
            mask[a * n + b] = a == b || sq_dist(&points[a], &points[b]) <= r2;
        }
    }
    mask
}

/// Regulariser added to squared distances in inverse-distance weights.
pub const INTERP_EPS: f64 = 1e-8;

/// Neighbour indices and normalised inverse-squared-distance weights for
/// interpolating from `sources` onto `targets`.
pub fn interpolation_weights(
    targets: &[Point],
    sources: &[Point],
    k: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let nn = knn(targets, sources, k)?;
    let mut weights = Vec::with_capacity(nn.flat().len());
    for (t, tp) in targets.iter().enumerate() {
        let inv: Vec<f64> = nn
            .row(t)
            .iter()
            .map(|&s| 1.0 / (sq_dist(tp, &sources[s]) + INTERP_EPS))
            .collect();
        let total: f64 = inv.iter().sum();
        weights.extend(inv.iter().map(|w| w / total));
    }
    Ok((nn.indices, weights))
}

/// Inverse-distance interpolation of `feats` (rows aligned with `sources`)
/// onto `targets`, differentiable with respect to `feats`.
pub fn interpolate<R: Real>(
    g: &mut Graph<R>,
    targets: &[Point],
    sources: &[Point],
    feats: Var,
    k: usize,
) -> Result<Var> {
    if g.value(feats).rows() != sources.len() {
        return Err(Error::Dimension {
            op: "interpolate",
            lhs: g.shape(feats).to_vec(),
            rhs: vec![sources.len()],
        });
    }
    let (index, weights) = interpolation_weights(targets, sources, k)?;
    let w: Vec<R> = weights.iter().map(|&w| R::of(w)).collect();
    g.weighted_rows(feats, &index, &w, k)
}

/// Squared-distance Chamfer distance:
/// `mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2`.
pub fn chamfer_l2(a: &[Point], b: &[Point]) -> Result<f64> {
    contract!(!a.is_empty() && !b.is_empty(), "chamfer distance of an empty set");
    let one_way = |x: &[Point], y: &[Point]| {
        x.iter()
            .map(|p| y.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// Differentiable Chamfer distance between a predicted `n x 3` tensor and a
/// fixed point set.
pub fn chamfer_l2_var<R: Real>(g: &mut Graph<R>, pred: Var, target: &[Point]) -> Result<Var> {
    let n = g.value(pred).rows();
    let t = points_tensor::<R>(target)?;
    g.chamfer(pred, &t, n, target.len())
}

/// `n x 3` tensor of coordinates.
pub fn points_tensor<R: Real>(points: &[Point]) -> Result<Tensor<R>> {
    contract!(!points.is_empty(), "empty point list");
    let data = points
        .iter()
        .flat_map(|p| p.iter().map(|&c| R::of(c as f64)))
        .collect();
    Tensor::new(vec![points.len(), 3], data)
}
