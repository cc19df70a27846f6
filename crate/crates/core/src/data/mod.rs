//! Point-cloud records, normalisation, resampling, file formats and the
//! synthetic shape dataset.

mod io;
mod synthetic;

pub use io::*;
pub use synthetic::{
    gen_synthetic, random_rotation, rotate, sample_surface, ShapeKind, SyntheticShapeSpec,
};

use crate::error::{Error, Result};
use crate::geometry::{centroid, fps, PointSet};
use crate::parallel::Exec;
use crate::rng::{hash_unit, stable_hash, Rng};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub points: PointSet,
    pub label: usize,
    pub id: String,
}

/// Subtracts the centroid and divides by the largest remaining norm (by 1 if
/// every point coincides).
pub fn normalize_unit_sphere(points: &PointSet) -> PointSet {
    let c = centroid(points);
    let shifted: Vec<[f64; 3]> = points
        .iter()
        .map(|p| std::array::from_fn(|a| p[a] as f64 - c[a]))
        .collect();
    let max = shifted
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let s = if max > 0.0 { 1.0 / max } else { 1.0 };
    PointSet::new(
        shifted
            .iter()
            .map(|p| std::array::from_fn(|a| (p[a] * s) as f32))
            .collect(),
    )
    .expect("normalisation keeps points finite")
}

/// Exactly `n` points: FPS when the cloud is larger, otherwise every point
/// plus random duplicates drawn with replacement.
pub fn resample(points: &PointSet, n: usize, rng: &mut Rng) -> Result<PointSet> {
    if n == 0 {
        return Err(Error::Config("cannot resample to 0 points".into()));
    }
    let have = points.len();
    if have >= n {
        if have == n {
            return Ok(points.clone());
        }
        return PointSet::new(points.select(&fps(points, n)?));
    }
    let mut pts = points.coords().to_vec();
    pts.extend((have..n).map(|_| points[rng.below(have)]));
    PointSet::new(pts)
}

/// Deterministic split: an id goes to train when its hash under `seed`
/// falls below `train_fraction`.
pub fn in_train_split(id: &str, seed: u64, train_fraction: f64) -> bool {
    hash_unit(format!("{seed}:{id}").as_bytes()) < train_fraction
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub kinds: Vec<ShapeKind>,
    pub per_class: usize,
    pub num_points: usize,
    pub noise: f64,
    /// Apply a uniformly random rotation to each synthetic shape. Off by
    /// default, so every kind keeps its canonical axes.
    pub rotate: bool,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            kinds: ShapeKind::ALL.to_vec(),
            per_class: 128,
            num_points: 2048,
            noise: 0.01,
            rotate: false,
            train_fraction: 0.8,
            split_seed: 0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_points == 0 {
            return Err(Error::Config("data.num_points must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config(format!(
                "train fraction {} outside [0, 1]",
                self.train_fraction
            )));
        }
        if self.source == DataSource::Synthetic {
            if self.kinds.is_empty() {
                return Err(Error::Config("no shape kinds selected".into()));
            }
            if self.per_class == 0 {
                return Err(Error::Config("empty class: per_class is 0".into()));
            }
            let mut seen = self.kinds.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != self.kinds.len() {
                return Err(Error::Config(format!("duplicate kinds in {:?}", self.kinds)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn all(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.train.iter().chain(&self.val)
    }
}

/// `per_class` normalised shapes of every kind; the label is the position of
/// the kind within `kinds`. Sample `j` of kind `c` draws from stream
/// `(seed, "synthetic", c * per_class + j)`.
pub fn synthetic_records(exec: Exec, cfg: &DataConfig) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    let total = cfg.kinds.len() * cfg.per_class;
    exec.try_map(total, |i| {
        let kind = cfg.kinds[i / cfg.per_class];
        let j = i % cfg.per_class;
        let mut rng = Rng::stream(cfg.seed, "synthetic", i as u64);
        let spec = SyntheticShapeSpec {
            kind,
            size: kind.random_size(&mut rng),
            noise: cfg.noise,
            count: cfg.num_points,
            seed: rng.next_u64(),
        };
        let mut points = sample_surface(&spec)?;
        if cfg.rotate {
            points = rotate(&points, &random_rotation(&mut rng));
        }
        Ok(DatasetRecord {
            points: normalize_unit_sphere(&points),
            label: i / cfg.per_class,
            id: format!("{kind}-{j:05}"),
        })
    })
}

/// Reads `<root>/<class>/<id>.pcb|.xyz`. Labels come from `labels.tsv` when
/// present, otherwise from the sorted class directory names.
pub fn load_directory(root: &Path) -> Result<(Vec<DatasetRecord>, Vec<String>)> {
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(p, e)))
            .collect::<Result<_>>()?;
        v.sort();
        Ok(v)
    };
    let class_dirs: Vec<PathBuf> = read_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Config(format!("{}: no class directories", root.display())));
    }
    let sidecar = root.join("labels.tsv");
    let labels: Option<HashMap<String, usize>> = if sidecar.exists() {
        Some(load_labels(&sidecar)?.into_iter().collect())
    } else {
        None
    };
    let mut records = Vec::new();
    let mut names: HashMap<usize, String> = HashMap::new();
    for (c, dir) in class_dirs.iter().enumerate() {
        let class = dir.file_name().unwrap().to_string_lossy().to_string();
        let mut any = false;
        for file in read_dir(dir)? {
            let ext = file.extension().and_then(|e| e.to_str());
            if !matches!(ext, Some("pcb" | "xyz")) {
                continue;
            }
            let id = file.file_stem().unwrap().to_string_lossy().to_string();
            let label = match &labels {
                Some(map) => *map.get(&id).ok_or_else(|| {
                    Error::Config(format!("{}: id {id} missing from labels.tsv", file.display()))
                })?,
                None => c,
            };
            if let Some(prev) = names.insert(label, class.clone()) {
                if prev != class {
                    return Err(Error::Config(format!(
                        "label {label} used by classes {prev} and {class}"
                    )));
                }
            }
            records.push(DatasetRecord {
                points: load_points(&file)?,
                label,
                id,
            });
            any = true;
        }
        if !any {
            return Err(Error::Config(format!("empty class: {}", dir.display())));
        }
    }
    let num_classes = names.keys().max().map_or(0, |m| m + 1);
    let class_names = (0..num_classes)
        .map(|l| {
            names
                .get(&l)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no files carry label {l}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((records, class_names))
}

/// Builds records (synthetic or from disk), normalises and resamples them to
/// `num_points`, and splits by id hash. Both halves are sorted by id.
pub fn make_dataset(exec: Exec, cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (records, class_names) = match &cfg.source {
        DataSource::Synthetic => (
            synthetic_records(exec, cfg)?,
            cfg.kinds.iter().map(|k| k.name().to_string()).collect(),
        ),
        DataSource::Directory(root) => {
            let (raw, names) = load_directory(root)?;
            let fixed = exec.try_map(raw.len(), |i| {
                let r = &raw[i];
                let mut rng = Rng::stream(cfg.seed, "resample", stable_hash(r.id.as_bytes()));
                let pts = resample(&normalize_unit_sphere(&r.points), cfg.num_points, &mut rng)?;
                Ok::<_, Error>(DatasetRecord {
                    points: pts,
                    ..r.clone()
                })
            })?;
            (fixed, names)
        }
    };
    let (mut train, mut val): (Vec<_>, Vec<_>) = records
        .into_iter()
        .partition(|r| in_train_split(&r.id, cfg.split_seed, cfg.train_fraction));
    train.sort_by(|a, b| a.id.cmp(&b.id));
    val.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Dataset {
        train,
        val,
        class_names,
    })
}

/// Writes `records` as `<root>/<class>/<id>.pcb` plus `<root>/labels.tsv`.
pub fn write_directory(root: &Path, records: &[DatasetRecord], class_names: &[String]) -> Result<()> {
    for name in class_names {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for r in records {
        save_pcb(root.join(&class_names[r.label]).join(format!("{}.pcb", r.id)), &r.points)?;
    }
    let rows: Vec<(String, usize)> = records.iter().map(|r| (r.id.clone(), r.label)).collect();
    save_labels(root.join("labels.tsv"), &rows)
}
