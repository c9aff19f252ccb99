use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use vtr_core::diff::{finite_diff_scaled, relative_error};
use vtr_core::error::Error;
use vtr_core::features::{load_checkpoint, AnalyticExtractor, ExtractorWeights, FeatureExtractor, NetworkConfig};
use vtr_core::synth::{make_dataset, read_dataset, write_dataset, Dataset};
use vtr_core::training::{sample_loss, train, CHECKPOINT_DIR, CURVE_FILE};
use vtr_core::vtr::{
    emit_report, load_map, read_report, read_sequence, render_sequence, repeat, repeat_path, save_map, teach, teach_path,
    ConditionMatrix, TaggedRun, MATRIX_FILE,
};

use crate::config::{Layers, RunConfig};
use crate::{Cli, Command, ExtractorArgs, SequenceKind};

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Numeric(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Numeric(_) => "numeric",
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::Data { .. } | Error::Shape(_) | Error::TeachFailure { .. } | Error::InvalidViewpoint(_) => {
                    "data"
                }
                _ => "numeric",
            },
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }

    /// One-line `key=value` rendering for scripts.
    pub fn line(&self) -> String {
        format!(
            "error kind={} code={} message={}",
            self.kind(),
            exit_code(self),
            serde_json::to_string(&self.message()).expect("strings serialize")
        )
    }
}

pub fn exit_code(err: &CliError) -> u8 {
    match err.kind() {
        "usage" => 2,
        "data" => 3,
        _ => 4,
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn require_dir(path: &Path, what: &str) -> CliResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut layers = Layers::defaults();
    if let Some(path) = &cli.config {
        if !path.is_file() {
            return Err(CliError::Usage(format!("config file {} does not exist", path.display())));
        }
        layers.apply_file(path)?;
    }
    for s in &cli.set {
        layers.apply_assignment(s)?;
    }
    let mut flag = |key: &str, v: Option<toml::Value>| -> CliResult {
        if let Some(v) = v {
            layers.apply(key, v)?;
        }
        Ok(())
    };
    flag("seed", cli.seed.map(|s| toml::Value::Integer(s as i64)))?;
    let int = |v: Option<usize>| v.map(|v| toml::Value::Integer(v as i64));
    let float = |v: Option<f64>| v.map(toml::Value::Float);
    match &cli.command {
        Command::Synth(a) => {
            flag("data.count", int(a.count))?;
            flag("data.val_count", int(a.val_count))?;
            flag("path.frames", int(a.frames))?;
            flag("condition", a.condition.clone().map(toml::Value::String))?;
        }
        Command::Train(a) => {
            flag("train.lr", float(a.lr))?;
            flag("train.epochs", int(a.epochs))?;
            flag("train.batch", int(a.batch))?;
        }
        Command::EvalGrad(a) => {
            flag("grad.probes", int(a.probes))?;
            flag("grad.tolerance", float(a.tolerance))?;
        }
        Command::Repeat(a) => flag("vtr.mode", a.mode.clone().map(toml::Value::String))?,
        Command::Teach(_) | Command::Report(_) => {}
    }
    Ok(layers.resolve()?)
}

fn output_dir(cli: &Cli, explicit: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    let dir = explicit.clone().unwrap_or_else(|| cli.run_dir.join(name));
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: &'a [String],
    seed: u64,
    threads: Option<usize>,
    config: &'a RunConfig,
    details: serde_json::Value,
}

fn write_manifest(dir: &Path, command: &str, argv: &[String], cli: &Cli, cfg: &RunConfig, details: serde_json::Value) -> CliResult {
    let m = Manifest {
        tool: "vtr",
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv: &argv[1..],
        seed: cfg.seed,
        threads: cli.threads,
        config: cfg,
        details,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| CliError::Core(Error::Io { path, source: e }))
}

enum Extractor {
    Learned(ExtractorWeights),
    Analytic(AnalyticExtractor),
}

impl Extractor {
    fn load(args: &ExtractorArgs, cfg: &RunConfig) -> CliResult<Self> {
        match (&args.ckpt, args.analytic) {
            (Some(dir), false) => {
                require_dir(dir, "checkpoint")?;
                let mut w = load_checkpoint(dir)?;
                w.config.window = cfg.vtr.window;
                Ok(Extractor::Learned(w))
            }
            (None, true) => Ok(Extractor::Analytic(AnalyticExtractor { window: cfg.vtr.window })),
            _ => Err(CliError::Usage("pass exactly one of --ckpt or --analytic".into())),
        }
    }

    fn get(&self) -> &dyn FeatureExtractor {
        match self {
            Extractor::Learned(w) => w,
            Extractor::Analytic(a) => a,
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Synth(a) => synth(&cli, argv, &cfg, a.sequence, &a.out),
        Command::Train(a) => {
            require_dir(&a.data, "dataset")?;
            if let Some(init) = &a.init {
                require_dir(init, "checkpoint")?;
            }
            let data = read_dataset(&a.data)?;
            let init = match &a.init {
                Some(dir) => load_checkpoint(dir)?,
                None => ExtractorWeights::init(cfg.network())?,
            };
            let out = output_dir(&cli, &a.out, "train")?;
            let report = train(&data, init, &cfg.train(), &cfg.loss(), Some(&out), |r| {
                eprintln!(
                    "epoch {:3}  train {:.6}  val {:.6}  val_pose_loss {:.6}  val_pose_err {:.6}",
                    r.epoch, r.train_loss, r.val_loss, r.val_pose_loss, r.val_pose_err
                )
            })?;
            let details = json!({
                "data": a.data,
                "init": a.init,
                "best_epoch": report.best_epoch,
                "final_epoch": report.final_epoch(),
                "checkpoint": CHECKPOINT_DIR,
                "curve": CURVE_FILE,
            });
            write_manifest(&out, "train", argv, &cli, &cfg, details)?;
            println!("best epoch {} of {}, outputs in {}", report.best_epoch, report.final_epoch(), out.display());
            Ok(())
        }
        Command::EvalGrad(a) => {
            require_dir(&a.data, "dataset")?;
            let weights = match &a.ckpt {
                Some(dir) => {
                    require_dir(dir, "checkpoint")?;
                    load_checkpoint(dir)?
                }
                None => ExtractorWeights::init(NetworkConfig {
                    channels: cfg.grad.channels,
                    ..cfg.network()
                })?,
            };
            let data = read_dataset(&a.data)?;
            let out = output_dir(&cli, &a.out, "eval-grad")?;
            let check = gradient_check(&data, weights, &cfg)?;
            write_manifest(&out, "eval-grad", argv, &cli, &cfg, serde_json::to_value(&check).expect("check serializes"))?;
            println!(
                "sample {} params {} probed {} relative error {:.3e} (tolerance {:.1e})",
                check.sample, check.params, check.probed, check.relative_error, cfg.grad.tolerance
            );
            if check.relative_error <= cfg.grad.tolerance {
                Ok(())
            } else {
                Err(CliError::Numeric(format!(
                    "gradient relative error {:.3e} exceeds {:.1e}",
                    check.relative_error, cfg.grad.tolerance
                )))
            }
        }
        Command::Teach(a) => {
            require_dir(&a.frames, "sequence")?;
            let ext = Extractor::load(&a.extractor, &cfg)?;
            let seq = read_sequence(&a.frames)?;
            let out = output_dir(&cli, &a.out, "teach")?;
            let mut map = teach(&seq.frames, ext.get(), &seq.intrinsics, &cfg.disparity()?)?;
            map.condition = Some(seq.condition.clone());
            save_map(&out, &map)?;
            let details = json!({
                "frames": a.frames,
                "ckpt": a.extractor.ckpt,
                "extractor": map.extractor,
                "condition": seq.condition,
                "vertices": map.vertices.len(),
            });
            write_manifest(&out, "teach", argv, &cli, &cfg, details)?;
            println!("taught {} vertices under {} into {}", map.vertices.len(), seq.condition, out.display());
            Ok(())
        }
        Command::Repeat(a) => {
            require_dir(&a.map, "map")?;
            for f in &a.frames {
                require_dir(f, "sequence")?;
            }
            let ext = Extractor::load(&a.extractor, &cfg)?;
            let params = cfg.localize()?;
            let map = load_map(&a.map)?;
            let taught = map.condition.clone().unwrap_or_else(|| "unknown".into());
            let out = output_dir(&cli, &a.out, "repeat")?;
            let mut runs = Vec::new();
            for f in &a.frames {
                let seq = read_sequence(f)?;
                let report = repeat(&seq.condition, &seq.frames, &map, ext.get(), &params)?;
                println!(
                    "{} -> {}: mean inliers {:.2}, failures {}/{} ({:.1}%), planar rmse {:.4}",
                    taught,
                    report.condition,
                    report.mean_inliers,
                    report.failures,
                    report.frames.len(),
                    100.0 * report.failure_fraction,
                    report.planar_rmse
                );
                runs.push(TaggedRun {
                    teach: taught.clone(),
                    report,
                });
            }
            emit_report(&out, &runs)?;
            let details = json!({ "map": a.map, "frames": a.frames, "ckpt": a.extractor.ckpt, "mode": cfg.vtr.mode });
            write_manifest(&out, "repeat", argv, &cli, &cfg, details)?;
            Ok(())
        }
        Command::Report(a) => {
            for r in &a.runs {
                require_dir(r, "run")?;
            }
            let mut runs = Vec::new();
            for r in &a.runs {
                runs.extend(read_report(r)?);
            }
            let out = output_dir(&cli, &a.out, "report")?;
            emit_report(&out, &runs)?;
            let matrix = ConditionMatrix::from_runs(&runs);
            print_matrix(&matrix);
            write_manifest(&out, "report", argv, &cli, &cfg, json!({ "runs": a.runs, "matrix": MATRIX_FILE }))?;
            Ok(())
        }
    }
}

fn print_matrix(m: &ConditionMatrix) {
    print!("{:>10}", "teach\\rep");
    for c in &m.conditions {
        print!("{c:>10}");
    }
    println!();
    for (c, row) in m.conditions.iter().zip(&m.mean_inliers) {
        print!("{c:>10}");
        for v in row {
            if v.is_nan() {
                print!("{:>10}", "-");
            } else {
                print!("{v:>10.2}");
            }
        }
        println!();
    }
}

fn synth(cli: &Cli, argv: &[String], cfg: &RunConfig, kind: Option<SequenceKind>, out: &Option<PathBuf>) -> CliResult {
    match kind {
        None => {
            let data = make_dataset(&cfg.dataset())?;
            let out = output_dir(cli, out, "data")?;
            write_dataset(&out, &data)?;
            let details = json!({ "train": data.train.len(), "val": data.val.len() });
            write_manifest(&out, "synth", argv, cli, cfg, details)?;
            println!("wrote {} training and {} validation pairs to {}", data.train.len(), data.val.len(), out.display());
        }
        Some(kind) => {
            let path = cfg.path();
            let (poses, tag) = match kind {
                SequenceKind::Teach => (teach_path(&path)?, "teach"),
                SequenceKind::Repeat => (repeat_path(&path)?, "repeat"),
            };
            let noise = vtr_core::seed::derive(cfg.seed, tag, 0);
            let seq = render_sequence(&path.scene(), &path.camera(), &poses, &cfg.condition, noise)?;
            let out = output_dir(cli, out, &format!("{tag}-{}", cfg.condition))?;
            vtr_core::vtr::write_sequence(&out, &seq)?;
            let details = json!({ "sequence": tag, "condition": cfg.condition, "frames": seq.frames.len() });
            write_manifest(&out, "synth", argv, cli, cfg, details)?;
            println!("wrote {} {tag} frames under {} to {}", seq.frames.len(), cfg.condition, out.display());
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradCheck {
    sample: usize,
    params: usize,
    probed: usize,
    relative_error: f64,
}

/// Checks the first usable training sample; probes are a seeded subset
/// of weights when `grad.probes` is nonzero.
fn gradient_check(data: &Dataset, mut weights: ExtractorWeights, cfg: &RunConfig) -> CliResult<GradCheck> {
    let lc = cfg.loss();
    let k = data.intrinsics;
    for (i, sample) in data.train.iter().enumerate() {
        let Some((_, Some(grad))) = sample_loss(&weights, sample, &k, &lc, true)? else {
            continue;
        };
        let base = weights.flatten();
        let n = base.len();
        let probes: Vec<usize> = if cfg.grad.probes == 0 || cfg.grad.probes >= n {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = vtr_core::seed::rng(vtr_core::seed::derive(cfg.seed, "grad-probes", 0));
            idx.shuffle(&mut rng);
            idx.truncate(cfg.grad.probes);
            idx.sort_unstable();
            idx
        };
        let sub: Vec<f64> = probes.iter().map(|&j| base[j]).collect();
        let mut flat = base.clone();
        let mut failed = None;
        let fd = finite_diff_scaled(
            |x| {
                for (&j, &v) in probes.iter().zip(x) {
                    flat[j] = v;
                }
                weights.set_flat(&flat).expect("same length");
                match sample_loss(&weights, sample, &k, &lc, false) {
                    Ok(Some((o, _))) => o.loss,
                    Ok(None) => {
                        failed = Some("gating changed under perturbation".to_string());
                        f64::NAN
                    }
                    Err(e) => {
                        failed = Some(e.to_string());
                        f64::NAN
                    }
                }
            },
            &sub,
            cfg.grad.step,
        );
        if let Some(msg) = failed {
            return Err(CliError::Numeric(msg));
        }
        let analytic: Vec<f64> = probes.iter().map(|&j| grad[j]).collect();
        return Ok(GradCheck {
            sample: i,
            params: n,
            probed: probes.len(),
            relative_error: relative_error(&analytic, &fd),
        });
    }
    Err(CliError::Numeric("no training sample survives gating".into()))
}
