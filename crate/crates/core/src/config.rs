//! INI run configuration: `[model]`, `[masking]`, `[training]`, `[data]` and
//! `[eval]` sections of `key = value` lines, plus `section.key` overrides.

use crate::data::{DataConfig, DataSource};
use crate::error::{Error, Result};
use crate::eval::{FewShotConfig, FinetuneConfig, ProbeConfig};
use crate::model::{AblationFlags, ModelConfig};
use crate::rng::stable_hash;
use crate::training::{AdamWConfig, AugmentConfig, TrainConfig};
use ini::Ini;
use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::Path;
use std::str::FromStr;

/// Flat `(section, key) -> value` view of an INI document. Values are
/// consumed as they are read so leftovers can be reported as unknown keys.
#[derive(Clone, Debug, Default)]
pub struct Fields {
    map: BTreeMap<(String, String), String>,
}

impl Fields {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("ini: {e}")))?;
        let mut map = BTreeMap::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key {k} outside any section")));
                }
                continue;
            };
            for (k, v) in props.iter() {
                map.insert((section.to_string(), k.to_string()), v.trim().to_string());
            }
        }
        Ok(Fields { map })
    }

    /// Applies `section.key = value`.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (section, key) = dotted
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override {dotted} is not section.key")))?;
        self.map
            .insert((section.to_string(), key.to_string()), value.trim().to_string());
        Ok(())
    }

    pub fn take_raw(&mut self, section: &str, key: &str) -> Option<String> {
        self.map.remove(&(section.to_string(), key.to_string()))
    }

    pub fn take<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T> {
        match self.take_raw(section, key) {
            None => Ok(default),
            Some(v) => parse_value(section, key, &v),
        }
    }

    pub fn take_list<T: FromStr>(&mut self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.take_raw(section, key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_value(section, key, s))
                .collect(),
        }
    }

    /// Errors on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some((s, k)) => Err(Error::Config(format!("unknown key {s}.{k}"))),
        }
    }
}

fn parse_value<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{section}.{key}: cannot parse {v:?}")))
}

/// Accumulates `key = value` lines section by section.
#[derive(Default)]
pub struct IniWriter {
    out: String,
}

impl IniWriter {
    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        let _ = writeln!(self.out, "[{name}]");
        self
    }

    pub fn kv(&mut self, key: &str, value: impl Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {value}");
        self
    }

    pub fn list<T: Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.kv(key, joined.join(", "))
    }

    pub fn finish(self) -> String {
        self.out
    }
}

pub(crate) fn write_model(w: &mut IniWriter, m: &ModelConfig) {
    w.section("model")
        .list("counts", &m.counts)
        .list("dims", &m.dims)
        .list("radii", &m.radii)
        .list("ks", &m.ks)
        .kv("encoder_blocks", m.encoder_blocks)
        .kv("decoder_blocks", m.decoder_blocks)
        .kv("heads", m.heads)
        .kv("mlp_ratio", m.mlp_ratio)
        .kv("interp_k", m.interp_k)
        .kv("hierarchical_encoder", m.flags.hierarchical_encoder)
        .kv("hierarchical_decoder", m.flags.hierarchical_decoder)
        .kv("skip_connections", m.flags.skip_connections)
        .kv("local_attention", m.flags.local_attention);
    w.section("masking")
        .kv("ratio", m.mask_ratio)
        .kv("multi_scale", m.flags.multi_scale_mask);
}

pub(crate) fn read_model(f: &mut Fields, base: ModelConfig) -> Result<ModelConfig> {
    let d = base.flags;
    let m = ModelConfig {
        counts: f.take_list("model", "counts", base.counts)?,
        dims: f.take_list("model", "dims", base.dims)?,
        radii: f.take_list("model", "radii", base.radii)?,
        ks: f.take_list("model", "ks", base.ks)?,
        encoder_blocks: f.take("model", "encoder_blocks", base.encoder_blocks)?,
        decoder_blocks: f.take("model", "decoder_blocks", base.decoder_blocks)?,
        heads: f.take("model", "heads", base.heads)?,
        mlp_ratio: f.take("model", "mlp_ratio", base.mlp_ratio)?,
        interp_k: f.take("model", "interp_k", base.interp_k)?,
        mask_ratio: f.take("masking", "ratio", base.mask_ratio)?,
        flags: AblationFlags {
            hierarchical_encoder: f.take("model", "hierarchical_encoder", d.hierarchical_encoder)?,
            hierarchical_decoder: f.take("model", "hierarchical_decoder", d.hierarchical_decoder)?,
            skip_connections: f.take("model", "skip_connections", d.skip_connections)?,
            local_attention: f.take("model", "local_attention", d.local_attention)?,
            multi_scale_mask: f.take("masking", "multi_scale", d.multi_scale_mask)?,
        },
    };
    m.validate()?;
    Ok(m)
}

/// `[model]` and `[masking]` sections for `m`.
pub fn model_to_text(m: &ModelConfig) -> String {
    let mut w = IniWriter::default();
    write_model(&mut w, m);
    w.finish()
}

/// Inverse of [`model_to_text`]. Missing keys take the published defaults.
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut f = Fields::parse(text)?;
    let m = read_model(&mut f, ModelConfig::paper())?;
    f.finish()?;
    Ok(m)
}

/// Named bundles of defaults. `paper` is valid but sized for accelerators;
/// `desk` is the CPU default; `small` matches the regression fixtures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
    Small,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
            Profile::Small => "small",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            "small" => Ok(Profile::Small),
            _ => Err(Error::Config(format!("unknown profile {s:?} (desk, paper, small)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub fewshot: FewShotConfig,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let paper_ft = FinetuneConfig::paper();
        let fewshot = FewShotConfig {
            way: 5,
            shot: 10,
            runs: 10,
            seed: 0,
        };
        match profile {
            Profile::Paper => RunConfig {
                profile,
                model: ModelConfig::paper(),
                training: TrainConfig::paper(),
                data: DataConfig {
                    per_class: 1000,
                    ..DataConfig::default()
                },
                eval: EvalConfig {
                    probe: ProbeConfig::default(),
                    fewshot,
                    finetune: paper_ft,
                },
            },
            Profile::Desk | Profile::Small => {
                let small = profile == Profile::Small;
                let desk_train = TrainConfig {
                    epochs: if small { 60 } else { 20 },
                    batch_size: if small { 32 } else { 16 },
                    base_lr: 1e-3,
                    warmup_epochs: if small { 6 } else { 2 },
                    ..TrainConfig::paper()
                };
                RunConfig {
                    profile,
                    model: if small {
                        ModelConfig::small()
                    } else {
                        ModelConfig::desk()
                    },
                    data: DataConfig {
                        per_class: if small { 103 } else { 64 },
                        num_points: if small { 256 } else { 1024 },
                        ..DataConfig::default()
                    },
                    eval: EvalConfig {
                        probe: ProbeConfig::default(),
                        fewshot,
                        finetune: FinetuneConfig {
                            train: TrainConfig {
                                epochs: 20,
                                batch_size: 16,
                                base_lr: 5e-4,
                                warmup_epochs: 2,
                                ..desk_train.clone()
                            },
                            head_hidden: 128,
                            frozen_encoder: false,
                        },
                    },
                    training: desk_train,
                }
            }
        }
    }

    /// Profile defaults (from `run.profile`, default `desk`), then the
    /// file's keys, then `overrides` (`("section.key", "value")`).
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut f = Fields::parse(text)?;
        for (k, v) in overrides {
            f.set(k, v)?;
        }
        let profile: Profile = f.take("run", "profile", Profile::Desk)?;
        let base = RunConfig::profile(profile);
        let model = read_model(&mut f, base.model)?;
        let training = read_train(&mut f, "training", "", base.training)?;
        let data = read_data(&mut f, base.data)?;
        let eval = read_eval(&mut f, base.eval)?;
        f.finish()?;
        let cfg = RunConfig {
            profile,
            model,
            training,
            data,
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_text(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.data.validate()?;
        self.eval.finetune.train.validate()?;
        if self.data.num_points <= self.model.counts[0] {
            return Err(Error::Config(format!(
                "data.num_points {} must exceed the first scale's {} seeds",
                self.data.num_points, self.model.counts[0]
            )));
        }
        Ok(())
    }

    /// Every field, explicitly; loading it back yields the same config.
    pub fn to_text(&self) -> String {
        let mut w = IniWriter::default();
        w.section("run").kv("profile", self.profile.name());
        write_model(&mut w, &self.model);
        write_train(&mut w, "training", "", &self.training);
        let d = &self.data;
        w.section("data")
            .kv(
                "source",
                match &d.source {
                    DataSource::Synthetic => "synthetic".to_string(),
                    DataSource::Directory(p) => p.display().to_string(),
                },
            )
            .list("kinds", &d.kinds)
            .kv("per_class", d.per_class)
            .kv("num_points", d.num_points)
            .kv("noise", d.noise)
            .kv("rotate", d.rotate)
            .kv("train_fraction", d.train_fraction)
            .kv("split_seed", d.split_seed)
            .kv("seed", d.seed);
        let e = &self.eval;
        w.section("eval")
            .kv("probe_iterations", e.probe.iterations)
            .kv("probe_lr", e.probe.lr)
            .kv("probe_weight_decay", e.probe.weight_decay)
            .kv("probe_standardize", e.probe.standardize)
            .kv("way", e.fewshot.way)
            .kv("shot", e.fewshot.shot)
            .kv("runs", e.fewshot.runs)
            .kv("seed", e.fewshot.seed)
            .kv("head_hidden", e.finetune.head_hidden)
            .kv("frozen_encoder", e.finetune.frozen_encoder);
        write_train(&mut w, "eval", "finetune_", &e.finetune.train);
        w.finish()
    }

    /// Hex FNV-1a digest of [`RunConfig::to_text`].
    pub fn digest(&self) -> String {
        format!("{:016x}", stable_hash(self.to_text().as_bytes()))
    }
}

fn write_train(w: &mut IniWriter, section: &str, p: &str, t: &TrainConfig) {
    // Fine-tuning keys carry a prefix and live in the already open [eval].
    if p.is_empty() {
        w.section(section);
    }
    let a = &t.augmentation;
    let rows: [(&str, String); 17] = [
        ("epochs", t.epochs.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("base_lr", t.base_lr.to_string()),
        ("min_lr", t.min_lr.to_string()),
        ("warmup_epochs", t.warmup_epochs.to_string()),
        ("beta1", t.adamw.beta1.to_string()),
        ("beta2", t.adamw.beta2.to_string()),
        ("eps", t.adamw.eps.to_string()),
        ("weight_decay", t.adamw.weight_decay.to_string()),
        ("grad_clip", t.grad_clip.to_string()),
        ("augment", t.augment.to_string()),
        ("scale_min", a.scale_min.to_string()),
        ("scale_max", a.scale_max.to_string()),
        ("shift", a.shift.to_string()),
        ("checkpoint_every", t.checkpoint_every.to_string()),
        ("seed", t.seed.to_string()),
        ("test_mode", t.test_mode.to_string()),
    ];
    for (k, v) in rows {
        w.kv(&format!("{p}{k}"), v);
    }
}

fn read_train(f: &mut Fields, s: &str, p: &str, b: TrainConfig) -> Result<TrainConfig> {
    let k = |key: &str| format!("{p}{key}");
    Ok(TrainConfig {
        epochs: f.take(s, &k("epochs"), b.epochs)?,
        batch_size: f.take(s, &k("batch_size"), b.batch_size)?,
        base_lr: f.take(s, &k("base_lr"), b.base_lr)?,
        min_lr: f.take(s, &k("min_lr"), b.min_lr)?,
        warmup_epochs: f.take(s, &k("warmup_epochs"), b.warmup_epochs)?,
        adamw: AdamWConfig {
            beta1: f.take(s, &k("beta1"), b.adamw.beta1)?,
            beta2: f.take(s, &k("beta2"), b.adamw.beta2)?,
            eps: f.take(s, &k("eps"), b.adamw.eps)?,
            weight_decay: f.take(s, &k("weight_decay"), b.adamw.weight_decay)?,
        },
        grad_clip: f.take(s, &k("grad_clip"), b.grad_clip)?,
        augment: f.take(s, &k("augment"), b.augment)?,
        augmentation: AugmentConfig {
            scale_min: f.take(s, &k("scale_min"), b.augmentation.scale_min)?,
            scale_max: f.take(s, &k("scale_max"), b.augmentation.scale_max)?,
            shift: f.take(s, &k("shift"), b.augmentation.shift)?,
        },
        checkpoint_every: f.take(s, &k("checkpoint_every"), b.checkpoint_every)?,
        seed: f.take(s, &k("seed"), b.seed)?,
        test_mode: f.take(s, &k("test_mode"), b.test_mode)?,
    })
}

fn read_data(f: &mut Fields, b: DataConfig) -> Result<DataConfig> {
    let source = match f.take_raw("data", "source") {
        None => b.source,
        Some(s) if s == "synthetic" => DataSource::Synthetic,
        Some(s) => DataSource::Directory(s.into()),
    };
    let kinds = match f.take_raw("data", "kinds") {
        None => b.kinds,
        Some(v) => v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?,
    };
    Ok(DataConfig {
        source,
        kinds,
        per_class: f.take("data", "per_class", b.per_class)?,
        num_points: f.take("data", "num_points", b.num_points)?,
        noise: f.take("data", "noise", b.noise)?,
        rotate: f.take("data", "rotate", b.rotate)?,
        train_fraction: f.take("data", "train_fraction", b.train_fraction)?,
        split_seed: f.take("data", "split_seed", b.split_seed)?,
        seed: f.take("data", "seed", b.seed)?,
    })
}

fn read_eval(f: &mut Fields, b: EvalConfig) -> Result<EvalConfig> {
    Ok(EvalConfig {
        probe: ProbeConfig {
            iterations: f.take("eval", "probe_iterations", b.probe.iterations)?,
            lr: f.take("eval", "probe_lr", b.probe.lr)?,
            weight_decay: f.take("eval", "probe_weight_decay", b.probe.weight_decay)?,
            standardize: f.take("eval", "probe_standardize", b.probe.standardize)?,
        },
        fewshot: FewShotConfig {
            way: f.take("eval", "way", b.fewshot.way)?,
            shot: f.take("eval", "shot", b.fewshot.shot)?,
            runs: f.take("eval", "runs", b.fewshot.runs)?,
            seed: f.take("eval", "seed", b.fewshot.seed)?,
        },
        finetune: FinetuneConfig {
            head_hidden: f.take("eval", "head_hidden", b.finetune.head_hidden)?,
            frozen_encoder: f.take("eval", "frozen_encoder", b.finetune.frozen_encoder)?,
            train: read_train(f, "eval", "finetune_", b.finetune.train)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips_for_every_profile() {
        for p in [Profile::Desk, Profile::Paper, Profile::Small] {
            let cfg = RunConfig::profile(p);
            cfg.validate().unwrap();
            let back = RunConfig::from_text(&cfg.to_text(), &[]).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.digest(), cfg.digest());
        }
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let text = "[run]\nprofile = small\n[training]\nepochs = 3\n";
        let cfg = RunConfig::from_text(text, &[("masking.ratio".into(), "0.6".into())]).unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.model.mask_ratio, 0.6);
        assert_eq!(cfg.model.counts, vec![64, 32, 8]);
        let err = RunConfig::from_text("[training]\nepoch = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("training.epoch"), "{err}");
        assert!(RunConfig::from_text("[model]\nheads = x\n", &[]).is_err());
        assert!(RunConfig::from_text("[data]\nkinds = sphere, blob\n", &[]).is_err());
    }

    #[test]
    fn invalid_model_rejected_before_compute() {
        let err = RunConfig::from_text("[model]\ncounts = 64, 128, 8\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = RunConfig::from_text("[masking]\nratio = 1.0\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn published_defaults() {
        let p = RunConfig::profile(Profile::Paper);
        assert_eq!(p.model.counts, vec![512, 256, 64]);
        assert_eq!(p.model.dims, vec![96, 192, 384]);
        assert_eq!(p.model.radii, vec![0.32, 0.64, 1.28]);
        assert_eq!(p.model.ks, vec![16, 8, 8]);
        assert_eq!((p.model.heads, p.model.encoder_blocks, p.model.decoder_blocks), (6, 5, 1));
        assert_eq!(p.model.mask_ratio, 0.8);
        let t = &p.training;
        assert_eq!((t.epochs, t.batch_size, t.warmup_epochs), (300, 128, 10));
        assert_eq!((t.base_lr, t.adamw.weight_decay), (1e-4, 5e-2));
        let ft = &p.eval.finetune.train;
        assert_eq!((ft.base_lr, ft.batch_size), (5e-4, 32));
    }
}
