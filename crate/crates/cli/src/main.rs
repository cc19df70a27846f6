//! `m2ae`: pretraining, evaluation, data generation and mask inspection.
//!
//! Any `--section.key value` (or `--section.key=value`) argument overrides
//! that key of the run configuration. Exit codes: 0 ok, 2 config or usage
//! error, 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use m2ae::config::{Profile, RunConfig};
use m2ae::data::{self as pio, make_dataset, DataConfig, DataSource, ShapeKind};
use m2ae::eval::{self, FewShotConfig};
use m2ae::masking::{closure_holds, generate_mask, minimality_holds};
use m2ae::model::{Checkpoint, Model};
use m2ae::training::{JsonlSink, Trainer, FINAL_CHECKPOINT};
use m2ae::{Error, Exec, Result, Rng};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "m2ae", version, about = "Multi-scale masked autoencoding for point clouds")]
struct Cli {
    /// Worker threads (default: all cores). `1` runs everything in order.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Deterministic logs: wall-clock fields are written as 0.
    #[arg(long, global = true)]
    test_mode: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// INI run configuration. Missing keys take the profile's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk, paper or small (overrides `run.profile`).
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct ModelSource {
    /// Checkpoint whose encoder is evaluated.
    #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a freshly initialised encoder instead.
    #[arg(long)]
    random_init: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Self-supervised pretraining.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen global features (train split -> val split).
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        source: ModelSource,
        /// Also append a CSV row to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Few-shot episodes over every record of the dataset.
    Fewshot {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Supervised fine-tuning of a classification head.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        frozen_encoder: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory for the classifier checkpoint and metrics.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a synthetic dataset as PCB files plus labels.tsv.
    GenData {
        /// Comma-separated shape kinds.
        #[arg(long, value_delimiter = ',', default_value = "sphere,cube-surface,cylinder,torus,plane")]
        kinds: Vec<String>,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 1024)]
        num_points: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        /// Randomly rotate every shape.
        #[arg(long)]
        rotate: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Builds the scale hierarchy and a mask for one cloud and exports the
    /// visible and masked points of every scale as XYZ.
    InspectMask {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Independent per-scale masks instead of back-projection.
        #[arg(long)]
        no_ms_mask: bool,
    },
}

type Overrides = Vec<(String, String)>;

/// Pulls `--section.key value` pairs out of argv before clap sees it.
fn split_overrides(args: Vec<String>) -> std::result::Result<(Vec<String>, Overrides), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| {
            let name = k.split('=').next().unwrap_or("");
            name.contains('.') && !name.contains('/') && !name.starts_with('.')
        });
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| format!("--{k} needs a value"))?;
                    overrides.push((k.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

struct Ctx {
    exec: Exec,
    test_mode: bool,
    overrides: Vec<(String, String)>,
}

impl Ctx {
    fn config(&self, run: &RunArgs, extra: &[(&str, String)]) -> Result<RunConfig> {
        let mut ov = Vec::new();
        if let Some(p) = &run.profile {
            p.parse::<Profile>()?;
            ov.push(("run.profile".to_string(), p.clone()));
        }
        if let Some(s) = run.seed {
            for k in ["training.seed", "data.seed", "eval.seed", "eval.finetune_seed"] {
                ov.push((k.to_string(), s.to_string()));
            }
        }
        if self.test_mode {
            ov.push(("training.test_mode".into(), "true".into()));
            ov.push(("eval.finetune_test_mode".into(), "true".into()));
        }
        ov.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        ov.extend(self.overrides.iter().cloned());
        let cfg = RunConfig::load(run.config.as_deref(), &ov)?;
        if cfg.profile == Profile::Paper {
            eprintln!("note: the paper profile is not expected to complete at desk scale");
        }
        Ok(cfg)
    }

    fn model(&self, cfg: &RunConfig, source: &ModelSource) -> Result<Model<f32>> {
        match &source.checkpoint {
            Some(p) => {
                let model = Checkpoint::load(p)?.model()?;
                eprintln!("loaded {}", p.display());
                Ok(model)
            }
            None => Model::new(cfg.model.clone(), cfg.training.seed),
        }
    }
}

/// Results go to stdout; a closed pipe is not an error worth panicking over.
fn print_json(v: &serde_json::Value) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v).expect("json values serialise");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli, ctx: Ctx) -> Result<()> {
    match cli.cmd {
        Command::Pretrain {
            run,
            out,
            epochs,
            resume,
        } => {
            let extra: Vec<(&str, String)> = epochs.map(|e| ("training.epochs", e.to_string())).into_iter().collect();
            let cfg = ctx.config(&run, &extra)?;
            let dataset = make_dataset(ctx.exec, &cfg.data)?;
            create_dir(&out)?;
            let snapshot = out.join("config.ini");
            std::fs::write(&snapshot, cfg.to_text()).map_err(|e| Error::io(&snapshot, e))?;
            eprintln!(
                "pretraining on {} clouds ({} classes), digest {}",
                dataset.train.len(),
                dataset.num_classes(),
                cfg.digest()
            );
            let mut trainer = match &resume {
                Some(p) => Trainer::from_checkpoint(&Checkpoint::load(p)?, cfg.training.clone())?,
                None => Trainer::new(Model::new(cfg.model.clone(), cfg.training.seed)?, cfg.training.clone())?,
            };
            let mut sink = JsonlSink::create(out.join("metrics.jsonl"), resume.is_some())?;
            trainer.run(ctx.exec, &dataset.train, &mut sink, Some(&out))?;
            eprintln!("wrote {}", out.join(FINAL_CHECKPOINT).display());
            Ok(())
        }
        Command::Probe { run, source, csv } => {
            let cfg = ctx.config(&run, &[])?;
            let model = ctx.model(&cfg, &source)?;
            let ds = make_dataset(ctx.exec, &cfg.data)?;
            let r = eval::probe_model(&model, ctx.exec, &ds.train, &ds.val, ds.num_classes(), &cfg.eval.probe)?;
            let digest = cfg.digest();
            if let Some(path) = csv {
                let name = if source.random_init { "probe-random-init" } else { "probe" };
                append_csv(&path, &eval::csv_row(name, &r, &digest))?;
            }
            print_json(&eval::result_json(&r, &digest));
            Ok(())
        }
        Command::Fewshot {
            run,
            source,
            way,
            shot,
            runs,
        } => {
            let cfg = ctx.config(&run, &[])?;
            let fs = FewShotConfig {
                way: way.unwrap_or(cfg.eval.fewshot.way),
                shot: shot.unwrap_or(cfg.eval.fewshot.shot),
                runs: runs.unwrap_or(cfg.eval.fewshot.runs),
                seed: cfg.eval.fewshot.seed,
            };
            let model = ctx.model(&cfg, &source)?;
            let ds = make_dataset(ctx.exec, &cfg.data)?;
            let records: Vec<_> = ds.all().cloned().collect();
            let features = eval::extract_features(&model, ctx.exec, &records)?;
            let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
            let r = eval::few_shot_eval(&features, &labels, ds.num_classes(), &fs, &cfg.eval.probe)?;
            print_json(&eval::tagged_json(&r, &cfg.digest()));
            Ok(())
        }
        Command::Finetune {
            run,
            source,
            frozen_encoder,
            epochs,
            out,
        } => {
            let mut extra = Vec::new();
            if frozen_encoder {
                extra.push(("eval.frozen_encoder", "true".to_string()));
            }
            if let Some(e) = epochs {
                extra.push(("eval.finetune_epochs", e.to_string()));
            }
            let cfg = ctx.config(&run, &extra)?;
            let model = ctx.model(&cfg, &source)?;
            let ds = make_dataset(ctx.exec, &cfg.data)?;
            let mut records = Vec::new();
            let (clf, r) = eval::finetune_classifier(
                &model,
                &ds.train,
                &ds.val,
                ds.num_classes(),
                &cfg.eval.finetune,
                ctx.exec,
                &mut records,
            )?;
            if let Some(dir) = out {
                create_dir(&dir)?;
                let mut sink = JsonlSink::create(dir.join("metrics.jsonl"), false)?;
                for rec in &records {
                    m2ae::training::MetricSink::record(&mut sink, rec)?;
                }
                clf.checkpoint().save(dir.join("classifier.pm2a"))?;
            }
            print_json(&eval::result_json(&r, &cfg.digest()));
            Ok(())
        }
        Command::GenData {
            kinds,
            per_class,
            num_points,
            noise,
            rotate,
            out,
            seed,
        } => {
            let kinds = kinds.iter().map(|k| k.trim().parse()).collect::<Result<Vec<ShapeKind>>>()?;
            let cfg = DataConfig {
                source: DataSource::Synthetic,
                kinds: kinds.clone(),
                per_class,
                num_points,
                noise,
                rotate,
                seed,
                ..DataConfig::default()
            };
            let records = pio::synthetic_records(ctx.exec, &cfg)?;
            let names: Vec<String> = kinds.iter().map(|k| k.name().to_string()).collect();
            pio::write_directory(&out, &records, &names)?;
            eprintln!("wrote {} clouds to {}", records.len(), out.display());
            Ok(())
        }
        Command::InspectMask {
            run,
            input,
            out,
            no_ms_mask,
        } => {
            let mut extra = Vec::new();
            if no_ms_mask {
                extra.push(("masking.multi_scale", "false".to_string()));
            }
            let cfg = ctx.config(&run, &extra)?;
            let points = pio::load_points(&input)?;
            let m = &cfg.model;
            let model_seed = cfg.training.seed;
            let repr = m2ae::masking::build_scales(&points, &m.counts, &m.ks)?;
            let mut rng = Rng::stream(model_seed, "inspect-mask", 0);
            let mask = generate_mask(&repr, m.mask_ratio, m.flags.multi_scale_mask, &mut rng)?;
            create_dir(&out)?;
            let counts: Vec<String> = repr.counts().iter().map(|c| c.to_string()).collect();
            println!("scale counts: {}", counts.join(" "));
            for i in 1..=repr.num_scales() {
                let pts = repr.points(i);
                let vis: Vec<_> = mask.visible_indices(i).iter().map(|&j| pts[j]).collect();
                let hid: Vec<_> = mask.masked_indices(i).iter().map(|&j| pts[j]).collect();
                println!("scale {i}: {} visible, {} masked", vis.len(), hid.len());
                pio::save_xyz(out.join(format!("scale{i}_visible.xyz")), &vis)?;
                pio::save_xyz(out.join(format!("scale{i}_masked.xyz")), &hid)?;
            }
            let ok = closure_holds(&repr, &mask);
            println!("closure: {}", if ok { "OK" } else { "VIOLATED" });
            if !no_ms_mask {
                let min = minimality_holds(&repr, &mask);
                println!("minimality: {}", if min { "OK" } else { "VIOLATED" });
            }
            Ok(())
        }
    }
}

fn append_csv(path: &Path, row: &str) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(eval::CSV_HEADER);
        text.push('\n');
    }
    text.push_str(row);
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn exec_for(threads: Option<usize>) -> std::result::Result<Exec, String> {
    if threads == Some(0) {
        return Err("--threads must be at least 1".into());
    }
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(if threads == Some(1) { Exec::Sequential } else { Exec::Parallel })
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let exec = match exec_for(cli.threads) {
        Ok(e) => e,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let ctx = Ctx {
        exec,
        test_mode: cli.test_mode,
        overrides,
    };
    match run(cli, ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Numeric(_)) { 3 } else { 2 })
        }
    }
}
