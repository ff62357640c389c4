use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mmfpt::backbone::{Model, TuningMode};
use mmfpt::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TOOL_VERSION};
use mmfpt::config::ExperimentConfig;
use mmfpt::data::{read_dataset, write_dataset, Dataset};
use mmfpt::eval::{evaluate_condition, evaluate_matrix, failure_rows, EvalReport, ReportRow, RowKind};
use mmfpt::metrics::compute_miou;
use mmfpt::modality::parse_condition;
use mmfpt::store::write_json;
use mmfpt::train::{train, write_loss_csv, Regime};
use mmfpt::{Error, Result};

#[derive(Parser)]
#[command(name = "mmfpt", version, about = "Missing-modality robust multi-modal segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenerateData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Overrides data.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides data.scenes.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and write a checkpoint, loss log and resolved config.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// complete | mms | fixed_ratio:<r>
        #[arg(long)]
        regime: Option<String>,
        /// full | decoder_only | plus_fpt | plus_adapter
        #[arg(long)]
        tuning: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint under missing conditions and/or sensor failures.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated present modalities, e.g. "R,D".
        #[arg(long, conflicts_with_all = ["matrix", "failures"])]
        condition: Option<String>,
        /// Every missing condition plus every applicable failure.
        #[arg(long, conflicts_with = "failures")]
        matrix: bool,
        /// Failure rows only.
        #[arg(long)]
        failures: bool,
        /// Overrides eval.severity.
        #[arg(long)]
        severity: Option<f64>,
    },
    /// Run the numerical self-test suite.
    Verify,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: &'a str,
    tool_version: &'a str,
    steps: usize,
    masks_sampled: usize,
    condition_visits: &'a [usize],
    final_loss: Option<f64>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn check_dataset(config: &ExperimentConfig, dataset: &Dataset) -> Result<()> {
    let b = &config.backbone;
    let d = &dataset.config;
    if (d.height, d.width) != b.image_size || d.num_classes != b.num_classes {
        return Err(Error::Config(format!(
            "dataset is {}x{} with {} classes, backbone expects {:?} with {}",
            d.height, d.width, d.num_classes, b.image_size, b.num_classes
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, out, seed, count } => {
            let mut config = config.load()?;
            config.data.seed = seed.or(config.data.seed);
            config.data.scenes = count.unwrap_or(config.data.scenes);
            let seed = config
                .data
                .seed
                .ok_or_else(|| Error::Config("data seed is required (--seed or data.seed)".into()))?;
            let dataset = Dataset::generate(&config.scene_config(), seed, config.data.scenes)?;
            let index = write_dataset(&out, &dataset, &config.hash())?;
            println!("wrote {} scenes (seed {seed}) to {}", index.scene_count, out.display());
        }
        Command::Train {
            config,
            dataset,
            out,
            seed,
            regime,
            tuning,
            epochs,
        } => {
            let mut config = config.load()?;
            config.train.seed = seed.or(config.train.seed);
            if let Some(r) = regime {
                config.train.regime = r.parse::<Regime>()?;
            }
            if let Some(t) = tuning {
                config.train.tuning = t.parse::<TuningMode>()?;
            }
            config.train.epochs = epochs.unwrap_or(config.train.epochs);
            let train_config = config.train.to_train_config()?;
            let (data, _) = read_dataset(&dataset)?;
            check_dataset(&config, &data)?;
            let mut backbone = config.backbone.clone();
            if train_config.tuning == TuningMode::PlusAdapter {
                backbone = backbone.without_prompts();
            }
            let mut model = Model::new(backbone, config.modality.clone(), train_config.spectral, train_config.seed)?;
            let report = train(&mut model, &data.scenes, &train_config)?;
            let hash = config.hash();
            write_checkpoint(
                &out,
                &Checkpoint {
                    model,
                    tuning: train_config.tuning,
                    config_hash: hash.clone(),
                },
            )?;
            write_loss_csv(&out.join("loss.csv"), &report.losses, &hash)?;
            write_text(
                &out.join("config.toml"),
                &format!("# config_hash = {hash}\n# tool_version = {TOOL_VERSION}\n{}", config.to_toml()),
            )?;
            write_json(
                &out.join("train.json"),
                &TrainSummary {
                    config_hash: &hash,
                    tool_version: TOOL_VERSION,
                    steps: report.steps,
                    masks_sampled: report.masks_sampled,
                    condition_visits: &report.condition_visits,
                    final_loss: report.losses.last().map(|l| l.loss),
                },
            )?;
            println!(
                "trained {} steps ({} regime, {} tuning); checkpoint in {}",
                report.steps,
                train_config.regime,
                train_config.tuning,
                out.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            dataset,
            out,
            condition,
            matrix,
            failures,
            severity,
        } => {
            let mut config = config.load()?;
            if let Some(s) = severity {
                config.eval.severity = s;
                config.validate()?;
            }
            let ck = read_checkpoint(&checkpoint)?;
            let (data, _) = read_dataset(&dataset)?;
            let model = &ck.model;
            let options = config.eval_options();
            let report = if matrix {
                evaluate_matrix(model, &data.scenes, &options, &ck.config_hash)?
            } else if failures {
                EvalReport::new(failure_rows(model, &data.scenes, &options)?, &ck.config_hash)
            } else {
                let text = condition.as_deref().unwrap_or("");
                let cond = if text.is_empty() {
                    mmfpt::modality::enumerate_conditions(&model.spec).remove(0)
                } else {
                    parse_condition(&model.spec, text)?
                };
                let cm = evaluate_condition(model, &data.scenes, &cond, options.dropout)?;
                let row = ReportRow {
                    kind: RowKind::Condition,
                    label: cond.label(),
                    miou: compute_miou(&cm)?,
                    per_class_iou: cm.per_class_iou(),
                    pixels: cm.total(),
                };
                EvalReport::new(vec![row], &ck.config_hash)
            };
            report.write(&out)?;
            print!("{}", report.to_table());
        }
        Command::Verify => {
            let outcomes = mmfpt::verify::run_all()?;
            let mut failed = 0;
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                failed += usize::from(!o.passed);
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} verification checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
