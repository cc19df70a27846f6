//! Surface samplers for five primitive shapes.
//!
//! Parameterisations (`size` = `[a, b, c]`):
//! * sphere: radius `a`; direction from a normalised Gaussian triple.
//! * cube-surface: half-extents `a, b, c`; face chosen with probability
//!   proportional to its area, then a uniform point on it.
//! * cylinder: radius `a`, half-height `b`, closed by two caps; lateral
//!   surface versus caps chosen by area, caps sampled with `r = a * sqrt(u)`.
//! * torus: major radius `a`, tube radius `b`; tube angle accepted with
//!   probability `(a + b cos t) / (a + b)` so the density is uniform in area.
//! * plane: the rectangle `[-a, a] x [-b, b]` at `z = 0`.
//!
//! Noise is isotropic Gaussian with standard deviation `noise`.

use super::DatasetRecord;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointSet};
use crate::rng::Rng;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Sphere,
    CubeSurface,
    Cylinder,
    Torus,
    Plane,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::CubeSurface,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::Plane,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::CubeSurface => "cube-surface",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
        }
    }

    /// Random size parameters used when building datasets.
    pub fn random_size(self, rng: &mut Rng) -> [f64; 3] {
        let mut u = |lo: f64, hi: f64| rng.uniform_in(lo, hi);
        match self {
            ShapeKind::Sphere => [u(0.5, 1.0), 0.0, 0.0],
            ShapeKind::CubeSurface => [u(0.4, 1.0), u(0.4, 1.0), u(0.4, 1.0)],
            ShapeKind::Cylinder => [u(0.3, 0.6), u(0.5, 1.0), 0.0],
            ShapeKind::Torus => [u(0.6, 0.8), u(0.15, 0.3), 0.0],
            ShapeKind::Plane => [u(0.5, 1.0), u(0.5, 1.0), 0.0],
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown shape kind {s:?} (expected one of sphere, cube-surface, cylinder, torus, plane)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShapeSpec {
    pub kind: ShapeKind,
    pub size: [f64; 3],
    pub noise: f64,
    pub count: usize,
    pub seed: u64,
}

impl SyntheticShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic shape needs at least one point".into()));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        let used = match self.kind {
            ShapeKind::Sphere => 1,
            ShapeKind::CubeSurface => 3,
            _ => 2,
        };
        if self.size[..used].iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("{} sizes must be positive: {:?}", self.kind, self.size)));
        }
        if self.kind == ShapeKind::Torus && self.size[1] >= self.size[0] {
            return Err(Error::Config("torus tube radius must be below the major radius".into()));
        }
        Ok(())
    }
}

fn surface_point(kind: ShapeKind, [a, b, c]: [f64; 3], rng: &mut Rng) -> [f64; 3] {
    match kind {
        ShapeKind::Sphere => loop {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                break [a * v[0] / n, a * v[1] / n, a * v[2] / n];
            }
        },
        ShapeKind::CubeSurface => {
            // Face pairs normal to x, y, z have areas 4bc, 4ac, 4ab.
            let areas = [b * c, a * c, a * b];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.uniform() * total;
            let mut axis = 2;
            for (i, &ar) in areas.iter().enumerate() {
                if pick < ar {
                    axis = i;
                    break;
                }
                pick -= ar;
            }
            let half = [a, b, c];
            let sign = if rng.below(2) == 0 { -1.0 } else { 1.0 };
            let mut p = [0.0; 3];
            for (i, x) in p.iter_mut().enumerate() {
                *x = if i == axis {
                    sign * half[i]
                } else {
                    rng.uniform_in(-half[i], half[i])
                };
            }
            p
        }
        ShapeKind::Cylinder => {
            let lateral = 2.0 * PI * a * 2.0 * b;
            let caps = 2.0 * PI * a * a;
            let theta = rng.uniform_in(0.0, 2.0 * PI);
            if rng.uniform() * (lateral + caps) < lateral {
                [a * theta.cos(), a * theta.sin(), rng.uniform_in(-b, b)]
            } else {
                let r = a * rng.uniform().sqrt();
                let z = if rng.below(2) == 0 { -b } else { b };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
        ShapeKind::Torus => {
            let t = loop {
                let t = rng.uniform_in(0.0, 2.0 * PI);
                if rng.uniform() * (a + b) <= a + b * t.cos() {
                    break t;
                }
            };
            let phi = rng.uniform_in(0.0, 2.0 * PI);
            let ring = a + b * t.cos();
            [ring * phi.cos(), ring * phi.sin(), b * t.sin()]
        }
        ShapeKind::Plane => [rng.uniform_in(-a, a), rng.uniform_in(-b, b), 0.0],
    }
}

/// Samples `spec.count` surface points; identical specs give identical clouds.
pub fn sample_surface(spec: &SyntheticShapeSpec) -> Result<PointSet> {
    spec.validate()?;
    let mut rng = Rng::stream(spec.seed, spec.kind.name(), 0);
    let pts: Vec<Point> = (0..spec.count)
        .map(|_| {
            let p = surface_point(spec.kind, spec.size, &mut rng);
            std::array::from_fn(|i| {
                let n = if spec.noise > 0.0 { spec.noise * rng.normal() } else { 0.0 };
                (p[i] + n) as f32
            })
        })
        .collect();
    PointSet::new(pts)
}

/// One labelled record; the label is the kind's position in [`ShapeKind::ALL`].
pub fn gen_synthetic(spec: &SyntheticShapeSpec) -> Result<DatasetRecord> {
    Ok(DatasetRecord {
        points: sample_surface(spec)?,
        label: ShapeKind::ALL.iter().position(|&k| k == spec.kind).unwrap(),
        id: format!("{}-{}", spec.kind, spec.seed),
    })
}

/// Uniformly random rotation (normalised Gaussian quaternion).
pub fn random_rotation(rng: &mut Rng) -> [[f64; 3]; 3] {
    let q = loop {
        let q = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break q.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn rotate(points: &PointSet, r: &[[f64; 3]; 3]) -> PointSet {
    let pts = points
        .iter()
        .map(|p| std::array::from_fn(|i| (0..3).map(|j| r[i][j] * p[j] as f64).sum::<f64>() as f32))
        .collect();
    PointSet::new(pts).expect("rotation keeps points finite")
}
