use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mapfuse_core::config::RunConfig;
use mapfuse_core::dataset::Dataset;
use mapfuse_core::gradsuite;
use mapfuse_core::metrics::MetricsReport;
use mapfuse_core::inference::{score_directory, Predictor};
use mapfuse_core::synth::generate_split;
use mapfuse_core::train::{self, run_matrix, write_matrix_csv, Checkpoint, ExperimentConfig};
use mapfuse_core::Error;

#[derive(Parser)]
#[command(name = "mapfuse", version, about = "Map-conditioned change detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        print!("{}", cfg.to_text());
        Ok(cfg)
    }

    /// Degradation given explicitly on the command line or in the config file.
    fn degradation_override(&self) -> anyhow::Result<Option<mapfuse_core::model::Degradation>> {
        let in_file = match &self.config {
            Some(p) => std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .lines()
                .any(|l| l.trim_start().starts_with("degradation")),
            None => false,
        };
        let in_sets = self.overrides.iter().any(|o| o.starts_with("degradation"));
        Ok((in_file || in_sets).then(|| self.load()).transpose()?.map(|c| c.experiment.degradation))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train and test splits under <out-dir>/train and <out-dir>/test.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on `data.train`, writing checkpoint and logs to <out-dir>.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from <out-dir>/checkpoint.cdp when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a manifest and write metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to score; defaults to `data.test`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write predicted change masks (and post-change maps) for a manifest.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write argmax-over-K attention rasters.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sample ids to export (comma separated); all samples when omitted.
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<u64>>,
        /// Fused channels to export (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "0")]
        channels: Vec<usize>,
    },
    /// Finite-difference check of every operation and three whole models.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a folder of predictions against a manifest's ground truth.
    Metrics {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Also write metrics.json here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train and test a grid of configurations, writing results.csv.
    RunMatrix {
        #[command(flatten)]
        common: Common,
        /// One grid cell as `;`-separated overrides, e.g. `regime=bi_temporal;fusion.kind=concat`.
        #[arg(long = "cell", required = true)]
        cells: Vec<String>,
        /// Seeds every cell is run with.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
}

fn manifest_or_test(data: &Option<PathBuf>, common: &Common) -> anyhow::Result<PathBuf> {
    if let Some(d) = data {
        return Ok(d.clone());
    }
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    cfg.experiment
        .test_manifest
        .ok_or_else(|| Error::Config("no --data given and data.test is not set".into()).into())
}

fn predictor(common: &Common, checkpoint: &Path) -> anyhow::Result<Predictor> {
    let ckpt = Checkpoint::load(checkpoint)?;
    Ok(Predictor::from_checkpoint(ckpt, common.degradation_override()?)?)
}

fn write_json(path: &Path, report: &MetricsReport) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.load()?;
            let train_dir = common.out_dir.join("train");
            let test_dir = common.out_dir.join("test");
            generate_split(&cfg.world, 0, cfg.train_samples, &train_dir)?;
            generate_split(&cfg.world, cfg.train_samples as u64, cfg.test_samples, &test_dir)?;
            eprintln!(
                "wrote {} train and {} test samples under {}",
                cfg.train_samples,
                cfg.test_samples,
                common.out_dir.display()
            );
        }
        Command::Train { common, resume } => {
            let cfg = common.load()?;
            let ckpt = train::train_to_dir(&cfg.experiment, &common.out_dir, resume)?;
            eprintln!("trained to step {}; outputs in {}", ckpt.step, common.out_dir.display());
        }
        Command::Eval { common, checkpoint, data } => {
            let manifest = manifest_or_test(&data, &common)?;
            let p = predictor(&common, &checkpoint)?;
            let ds = Dataset::load(&manifest)?;
            let report = train::evaluate(&p.model, &p.params, &p.classes, &ds, &p.degradation)?;
            std::fs::create_dir_all(&common.out_dir)?;
            write_json(&common.out_dir.join("metrics.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Predict { common, checkpoint, data } => {
            let manifest = manifest_or_test(&data, &common)?;
            let n = predictor(&common, &checkpoint)?.predict_to_dir(&manifest, &common.out_dir)?;
            eprintln!("wrote predictions for {n} samples to {}", common.out_dir.display());
        }
        Command::ExportAttention { common, checkpoint, data, ids, channels } => {
            let manifest = manifest_or_test(&data, &common)?;
            let n = predictor(&common, &checkpoint)?.export_attention(
                &manifest,
                ids.as_deref(),
                &channels,
                &common.out_dir,
            )?;
            eprintln!("wrote {n} attention rasters to {}", common.out_dir.display());
        }
        Command::GradCheck { seed } => {
            let entries = gradsuite::run_suite(seed, |e| {
                println!(
                    "{:<32} max_rel_error {:.3e}  coords {:>5}  {}",
                    e.name,
                    e.report.max_rel_error,
                    e.report.coords_checked,
                    if e.passed() { "ok" } else { "FAIL" }
                );
            })?;
            if entries.iter().any(|e| !e.passed()) {
                eprintln!("gradient check failed (tolerance {:e})", gradsuite::TOLERANCE);
                return Ok(ExitCode::from(1));
            }
        }
        Command::Metrics { data, pred, out_dir } => {
            let report = score_directory(&data, &pred)?;
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                write_json(&dir.join("metrics.json"), &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::RunMatrix { common, cells, seeds } => {
            let base = common.load()?;
            let mut grid: Vec<(String, ExperimentConfig)> = Vec::new();
            for cell in &cells {
                for &seed in &seeds {
                    let mut sets = common.overrides.clone();
                    sets.extend(cell.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from));
                    sets.push(format!("seed={seed}"));
                    let cfg = RunConfig::load(common.config.as_deref(), &sets)
                        .with_context(|| format!("cell {cell:?}"))?;
                    grid.push((cell.clone(), cfg.experiment));
                }
            }
            let load = |p: &Option<PathBuf>, key: &str| -> anyhow::Result<Dataset> {
                let p = p.as_ref().ok_or_else(|| Error::Config(format!("{key} is not set")))?;
                Ok(Dataset::load(p)?)
            };
            let train_ds = load(&base.experiment.train_manifest, "data.train")?;
            let test_ds = load(&base.experiment.test_manifest, "data.test")?;
            let rows = run_matrix(&grid, &train_ds, &test_ds, |r| eprintln!("{} ({})", r.csv_line(), r.label));
            std::fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join("results.csv");
            write_matrix_csv(&rows, &path)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            for r in rows.iter().filter(|r| r.result.is_err()) {
                eprintln!("failed: {} seed {}: {}", r.label, r.seed, r.result.as_ref().unwrap_err());
            }
            eprintln!("wrote {} ({} rows, {failed} failed)", path.display(), rows.len());
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
