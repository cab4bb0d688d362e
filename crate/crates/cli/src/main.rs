//! `auattn`: train, evaluate and inspect the AU attention model.
//!
//! The CRF works on dense `l^2 x l^2` kernel matrices, so memory grows with
//! `l^4`. The default `l = 32` needs a few megabytes per image; the full
//! `l = 176` setting needs about 7 GB per image and is impractical here.

mod overrides;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use auattn::checkpoint::Checkpoint;
use auattn::config::RunConfig;
use auattn::crf::CrfHyperParams;
use auattn::data::{load_image, DatasetManifest};
use auattn::diagnostics::{crf_oracle_comparison, model_grad_check};
use auattn::synth::SyntheticSpec;
use auattn::tensor::gradcheck::{GradCheckOptions, DEFAULT_STEP};
use auattn::train::{attention_maps, evaluate, export_attention, LabelledImages, Trainer};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "auattn", version, about = "Action-unit detection with CRF-refined attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest; writes per-epoch checkpoints and a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest and print the metrics JSON.
    Eval(EvalArgs),
    /// Render a synthetic dataset with known AU regions.
    Synth(SynthArgs),
    /// Write the attention maps of one image as PGM files.
    ExportAttn(ExportArgs),
    /// Finite-difference check of every model gradient.
    GradCheck(GradCheckArgs),
    /// Compare mean-field marginals with exact enumeration on small CRFs.
    CrfOracle(OracleArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON, field names as in the config type).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set crf.w1=0.1 --set T=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => base,
        };
        let mut doc = serde_json::to_value(&base)?;
        let mut set = self.set.clone();
        if let Some(v) = self.epochs {
            set.push(format!("epochs={v}"));
        }
        if let Some(v) = self.seed {
            set.push(format!("seed={v}"));
        }
        if let Some(v) = self.batch_size {
            set.push(format!("batch_size={v}"));
        }
        overrides::apply(&mut doc, &set)?;
        let cfg: RunConfig = serde_json::from_value(doc).context("config after overrides")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct FoldArgs {
    /// Split the manifest into this many subject-exclusive folds.
    #[arg(long, requires = "fold")]
    folds: Option<usize>,
    /// Fold held out from training (0-based); `eval` uses only this fold.
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
}

impl FoldArgs {
    /// Training rows and evaluation rows of `manifest`.
    fn split(&self, manifest: DatasetManifest) -> Result<(DatasetManifest, DatasetManifest)> {
        match (self.folds, self.fold) {
            (Some(k), Some(f)) => {
                if f >= k {
                    bail!("fold {f} out of range for {k} folds");
                }
                let folds = manifest.folds(k)?;
                Ok(manifest.split(&folds, f))
            }
            _ => Ok((manifest.clone(), manifest)),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    /// Initialise from another run's checkpoint (branch heads are reset if
    /// the AU count differs).
    #[arg(long, conflicts_with = "resume")]
    init_from: Option<PathBuf>,
    /// Continue an interrupted run; its stored config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    /// Override the stored decision threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives the images and `manifest.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Full synthetic spec as JSON; the flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Check at most this many entries per tensor.
    #[arg(long)]
    max_entries: Option<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 6)]
    pixels: usize,
    #[arg(long, default_value_t = 0.1)]
    w1: f64,
    #[arg(long, default_value_t = 0.0)]
    w2: f64,
    #[arg(long, default_value_t = 1.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit with failure when the largest deviation reaches this value.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Synth(a) => synth(a).map(|_| true),
        Command::ExportAttn(a) => export(a).map(|_| true),
        Command::GradCheck(a) => grad_check(a),
        Command::CrfOracle(a) => oracle(a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let (train_rows, held_rows) = a.folds.split(manifest)?;
    let data = LabelledImages::load(&train_rows)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?, &data)?;
            if let Some(e) = a.config.epochs {
                t.config.epochs = e;
            }
            t
        }
        None => {
            let cfg = a.config.resolve(RunConfig::default())?;
            let mut t = Trainer::new(cfg, &data)?;
            if let Some(path) = &a.init_from {
                t.warm_start(&Checkpoint::load(path)?)?;
            }
            t
        }
    };
    let ckpt_dir = a.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    write_file(&a.out.join("config.json"), trainer.config.to_json()?.as_bytes())?;
    let log_path = a.out.join("epochs.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    trainer.fit(&data, |t, entry| {
        let path = ckpt_dir.join(format!("epoch_{:04}.ckpt", t.epoch));
        t.checkpoint().save(&path)?;
        let line = serde_json::to_string(entry)?;
        writeln!(log, "{line}").map_err(|e| auattn::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        Ok(())
    })?;
    let final_path = a.out.join("final.ckpt");
    trainer.checkpoint().save(&final_path)?;
    let held = LabelledImages::load(&held_rows)?;
    let threshold = trainer.config.threshold;
    let report = evaluate(&mut trainer.model, &held, trainer.config.batch_size, threshold)?;
    write_file(&a.out.join("metrics.json"), report.to_json()?.as_bytes())?;
    println!(
        "trained {} epochs; avg F1 {:.4}, avg accuracy {:.4}",
        trainer.epoch, report.avg_f1, report.avg_accuracy
    );
    println!("checkpoint {}", final_path.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut model = Trainer::model_from_checkpoint(&ckpt)?;
    let (_, rows) = a.folds.split(DatasetManifest::load(&a.manifest)?)?;
    let data = LabelledImages::load(&rows)?;
    let threshold = a.threshold.unwrap_or(ckpt.config.threshold);
    let report = evaluate(&mut model, &data, ckpt.config.batch_size, threshold)?;
    let json = report.to_json()?;
    match &a.out {
        Some(path) => write_file(path, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SyntheticSpec::default(),
    };
    spec.count = a.count.unwrap_or(spec.count);
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.side = a.side.unwrap_or(spec.side);
    spec.noise = a.noise.unwrap_or(spec.noise);
    let manifest = spec.generate(&a.out)?;
    println!(
        "wrote {} images and {}",
        manifest.len(),
        a.out.join("manifest.csv").display()
    );
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut model = Trainer::model_from_checkpoint(&ckpt)?;
    let image = load_image(&a.image)?;
    let maps = attention_maps(&mut model, &image)?;
    let written = export_attention(&maps, &a.out)?;
    for (k, au) in maps.per_au.iter().enumerate() {
        println!("AU {}: probability {:.4}", k + 1, au.probability);
    }
    println!("wrote {} files to {}", written.len(), a.out.display());
    Ok(())
}

/// The small full-model setting used for gradient checks.
fn grad_check_config() -> RunConfig {
    RunConfig {
        l: 16,
        c: 1,
        n: 2,
        t: 2,
        ..RunConfig::default()
    }
}

fn grad_check(a: GradCheckArgs) -> Result<bool> {
    let cfg = a.config.resolve(grad_check_config())?;
    let opts = GradCheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        max_entries_per_param: a.max_entries,
    };
    let report = model_grad_check(&cfg, a.batch, cfg.seed, opts)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let pass = report.passed();
    eprintln!(
        "{}: max relative error {:.3e} over {} entries ({} skipped), tolerance {:.1e}",
        if pass { "PASS" } else { "FAIL" },
        report.max_rel_err,
        report.checked,
        report.skipped,
        report.tolerance
    );
    Ok(pass)
}

fn oracle(a: OracleArgs) -> Result<bool> {
    let hyper = CrfHyperParams {
        w1: a.w1,
        w2: a.w2,
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
        iterations: a.iterations,
        damping: 0.0,
    };
    let cmp = crf_oracle_comparison(a.instances, a.pixels, &hyper, a.seed)?;
    println!("{}", serde_json::to_string_pretty(&cmp)?);
    Ok(cmp.max_abs_diff < a.tolerance)
}
