//! Command-line driver for the shivae toolkit.
//!
//! Each pipeline stage is its own subcommand operating on files, so the
//! full experiment can run either as one `pipeline` invocation or as a
//! chain of `generate | mask | train | impute | evaluate | report`
//! calls. `--seed` always sets the root seed; every stage derives its
//! own substream from it, so the stage-by-stage chain reproduces the
//! one-shot pipeline bit for bit.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric fault.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use shivae::data::{read_dataset, read_overlay, write_dataset, write_overlay, HeterogeneousDataset};
use shivae::impute::impute_dataset;
use shivae::metrics::MeanStd;
use shivae::pipeline::{
    build_dataset, build_registry, completed_dataset, evaluate_run, render_report, run_pipeline,
    ExperimentConfig, SUB_IMPUTE, SUB_MASK, SUB_TRAIN,
};
use shivae::synth::{derive_seed, generate_mask_suite, BurstSpec};
use shivae::train::{load_checkpoint, save_checkpoint, train, TrainConfig};
use shivae::Result;

#[derive(Parser)]
#[command(
    name = "shivae",
    version,
    about = "Impute bursty missing data in heterogeneous time series"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate (or load) the dataset of an experiment preset and write
    /// it as data.csv + schema.json
    Generate {
        /// Preset name or path to an experiment JSON file
        #[arg(long, default_value = "synthetic")]
        config: String,
        /// Root seed override
        #[arg(long)]
        seed: Option<u64>,
        /// Input directory for presets that load instead of generate
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay burst masks on a dataset, one CSV per replicate
    Mask {
        /// Dataset directory (data.csv + schema.json)
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "synthetic")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for mask_r<NN>.csv files
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model, optionally hiding the cells of a mask overlay
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Mask overlay CSV whose cells are hidden from the objective
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "synthetic")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint file to write; the best-validation checkpoint goes
        /// next to it with a _best suffix
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the missing cells of a dataset with one method
    Impute {
        #[arg(long)]
        data: PathBuf,
        /// Extra cells to hide before imputing (for mask evaluations)
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Trained checkpoint; required for the model-based method
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Imputation method registry name
        #[arg(long, default_value = "shi-vae")]
        method: String,
        /// Forward samples averaged per estimate
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset directory with every cell filled
        #[arg(long)]
        out: PathBuf,
    },
    /// Score imputed datasets against the ground truth on hidden cells
    Evaluate {
        /// Ground-truth dataset directory
        #[arg(long)]
        truth: PathBuf,
        /// Directory of <method>_r<NN> imputed dataset directories
        #[arg(long)]
        imputed: PathBuf,
        /// Directory of mask_r<NN>.csv overlays
        #[arg(long)]
        mask: PathBuf,
        /// Report directory for metrics.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Render summary tables and bar charts from metrics.json
    Report {
        /// metrics.json written by evaluate
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage end to end and write a run manifest
    Pipeline {
        #[arg(long, default_value = "synthetic")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory receiving all artifacts
        #[arg(long)]
        out: PathBuf,
    },
}

/// Accept either a built-in preset name or a path to an experiment
/// JSON file, then apply command-line overrides.
fn resolve_config(
    text: &str,
    seed: Option<u64>,
    data: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    let mut cfg = if Path::new(text).is_file() {
        ExperimentConfig::from_json_file(Path::new(text))?
    } else {
        ExperimentConfig::named(text)?
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if data.is_some() {
        cfg.data_dir = data;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(m: Option<MeanStd>) -> String {
    m.map(|m| m.to_string()).unwrap_or_else(|| "n/a".to_string())
}

fn mean_hidden_rate(ds: &HeterogeneousDataset, overlay: &shivae::data::MaskOverlay) -> f64 {
    let d = ds.num_attrs();
    (0..d).map(|j| overlay.hidden_rate(ds, j)).sum::<f64>() / d as f64
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { config, seed, data, out } => {
            let cfg = resolve_config(&config, seed, data)?;
            let source = build_dataset(&cfg)?;
            for note in &source.notes {
                eprintln!("note: {note}");
            }
            write_dataset(&source.dataset, &out)?;
            let max_t = source.dataset.sequences.iter().map(|s| s.len()).max().unwrap_or(0);
            println!(
                "{}; wrote {} sequences (T up to {max_t}, {} attributes) to {}",
                source.description,
                source.dataset.num_sequences(),
                source.dataset.num_attrs(),
                out.display()
            );
        }
        Cmd::Mask { data, config, seed, out } => {
            let cfg = resolve_config(&config, seed, Some(data.clone()))?;
            let ds = read_dataset(&data, None)?;
            let spec =
                BurstSpec::new(cfg.mask_rate, cfg.num_masks, derive_seed(cfg.seed, SUB_MASK));
            let suite = generate_mask_suite(&ds, &spec)?;
            for (r, overlay) in suite.overlays.iter().enumerate() {
                let path = out.join(format!("mask_r{r:02}.csv"));
                write_overlay(overlay, &ds, &path)?;
                println!(
                    "{}  (achieved rate {:.3}, target {:.3})",
                    path.display(),
                    mean_hidden_rate(&ds, overlay),
                    spec.target_rate
                );
            }
        }
        Cmd::Train { data, mask, config, seed, out } => {
            let cfg = resolve_config(&config, seed, Some(data.clone()))?;
            let ds = read_dataset(&data, None)?;
            let overlay = mask.map(|p| read_overlay(&p, &ds)).transpose()?;
            let train_cfg =
                TrainConfig { seed: derive_seed(cfg.seed, SUB_TRAIN), ..cfg.train.clone() };
            let outcome = train(&ds, overlay.as_ref(), &train_cfg)?;
            for stats in outcome.final_checkpoint.history.iter().filter(|s| {
                s.epoch % 10 == 0 || s.epoch == 1 || s.epoch == outcome.final_checkpoint.epoch
            }) {
                println!(
                    "epoch {:>4}  beta {:.2}  train {:>10.4}  val {}",
                    stats.epoch,
                    stats.train.beta,
                    stats.train.total,
                    stats.val.map_or("n/a".to_string(), |v| format!("{:.4}", v.total)),
                );
            }
            if let Some(reason) = &outcome.aborted {
                eprintln!("warning: training aborted early: {reason}");
            }
            save_checkpoint(&outcome.final_checkpoint, &out)?;
            println!("final checkpoint: {}", out.display());
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            let best_path = out.with_file_name(format!("{stem}_best.json"));
            save_checkpoint(&outcome.best_checkpoint, &best_path)?;
            println!("best checkpoint (epoch {}): {}", outcome.best_epoch, best_path.display());
        }
        Cmd::Impute { data, mask, ckpt, method, samples, seed, out } => {
            let cfg_seed = seed.unwrap_or(0);
            let ds = read_dataset(&data, None)?;
            let overlay = mask.map(|p| read_overlay(&p, &ds)).transpose()?;
            let checkpoint = ckpt.map(|p| load_checkpoint(&p)).transpose()?;
            // baselines fit on the observed cells of this dataset, with
            // the overlay already applied
            let fit_view = match &overlay {
                Some(ov) => {
                    let seqs = ds
                        .sequences
                        .iter()
                        .zip(&ov.per_seq)
                        .map(|(s, h)| s.with_hidden(h))
                        .collect::<Result<Vec<_>>>()?;
                    HeterogeneousDataset::new(ds.schema.clone(), seqs)?
                }
                None => ds.clone(),
            };
            let registry = build_registry(checkpoint.as_ref(), Some(&fit_view), samples)?;
            let imputer = registry.get(&method)?;
            let results =
                impute_dataset(imputer, &ds, overlay.as_ref(), derive_seed(cfg_seed, SUB_IMPUTE))?;
            let filled: usize = ds
                .sequences
                .iter()
                .zip(&results)
                .map(|(s, _)| {
                    let hidden = overlay
                        .as_ref()
                        .map(|ov| {
                            ov.per_seq[ds.sequences.iter().position(|q| q.id == s.id).unwrap()]
                                .iter()
                                .filter(|&&h| h)
                                .count()
                        })
                        .unwrap_or(0);
                    s.mask.iter().filter(|&&m| !m).count() + hidden
                })
                .sum();
            let out_ds = completed_dataset(&ds.schema, &ds, &results)?;
            write_dataset(&out_ds, &out)?;
            println!(
                "method '{method}': filled {filled} cells across {} sequences; wrote {}",
                ds.num_sequences(),
                out.display()
            );
        }
        Cmd::Evaluate { truth, imputed, mask, out } => {
            let reports = evaluate_run(&truth, &imputed, &mask, &out)?;
            println!(
                "{:<12} {:>20} {:>20} {:>22}",
                "method", "error", "xcorr", "xcorr (continuous)"
            );
            for (method, report) in &reports {
                println!(
                    "{method:<12} {:>20} {:>20} {:>22}",
                    fmt_opt(report.error),
                    fmt_opt(report.xcorr),
                    fmt_opt(report.xcorr_continuous),
                );
            }
            println!("metrics: {}", out.join("metrics.json").display());
        }
        Cmd::Report { metrics, out } => {
            for path in render_report(&metrics, &out)? {
                println!("{}", path.display());
            }
        }
        Cmd::Pipeline { config, seed, data, out } => {
            let cfg = resolve_config(&config, seed, data)?;
            let manifest = run_pipeline(&cfg, &out)?;
            println!("data: {}", manifest.data_source);
            for stage in &manifest.stages {
                println!("stage {:<10} {:>8} ms  {}", stage.name, stage.wall_ms, stage.status);
                for note in &stage.notes {
                    println!("    note: {note}");
                }
            }
            for (method, summary) in &manifest.metrics {
                println!(
                    "{method:<12} error {}  xcorr {}",
                    fmt_opt(summary.error),
                    fmt_opt(summary.xcorr)
                );
            }
            println!("manifest: {}", out.join("manifest.json").display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
