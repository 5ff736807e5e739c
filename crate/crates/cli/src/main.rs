//! `svsnet`: validate data, train, evaluate and score speaker voice
//! similarity models.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use svsnet_core::dataset::validate_manifest;
use svsnet_core::metrics::{predict, report};
use svsnet_core::model::{read_checkpoint, write_checkpoint, Checkpoint};
use svsnet_core::train::write_history;
use svsnet_core::{forward, read_lrp, split_dataset, train, Dataset, ReprSource};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "svsnet",
    version,
    about = "Speaker voice similarity scoring on layer-wise speech representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a manifest and every representation file it references
    Validate {
        manifest: PathBuf,
        repr_dir: PathBuf,
    },

    /// Train a model from a TOML run configuration
    Train { config: PathBuf },

    /// Score a dataset with a checkpoint and print the metrics report as JSON
    Evaluate {
        checkpoint: PathBuf,
        manifest: PathBuf,
        repr_dir: PathBuf,
        /// Also write the report to this file
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-system means as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write per-pair predictions as newline-delimited JSON
        #[arg(long)]
        predictions: Option<PathBuf>,
    },

    /// Print the similarity score of one test/reference pair
    Score {
        checkpoint: PathBuf,
        test: PathBuf,
        reference: PathBuf,
    },

    /// Print the learned layer weights of a checkpoint
    InspectWeights { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { manifest, repr_dir } => cmd_validate(&manifest, &repr_dir),
        Command::Train { config } => cmd_train(&config).map(|()| true),
        Command::Evaluate {
            checkpoint,
            manifest,
            repr_dir,
            out,
            csv,
            predictions,
        } => cmd_evaluate(&checkpoint, &manifest, &repr_dir, out, csv, predictions).map(|()| true),
        Command::Score {
            checkpoint,
            test,
            reference,
        } => cmd_score(&checkpoint, &test, &reference).map(|()| true),
        Command::InspectWeights { checkpoint } => cmd_inspect_weights(&checkpoint).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Loads a dataset, printing every diagnostic before failing.
fn load_checked(manifest: &Path, repr_dir: &Path) -> Result<Dataset> {
    let report = validate_manifest(manifest, repr_dir)?;
    if let Some(ds) = report.dataset {
        return Ok(ds);
    }
    for d in &report.diagnostics {
        eprintln!("{}: {d}", manifest.display());
    }
    bail!(
        "{}: {} problem(s) in {} record(s)",
        manifest.display(),
        report.diagnostics.len(),
        report.num_records
    )
}

fn cmd_validate(manifest: &Path, repr_dir: &Path) -> Result<bool> {
    let report = validate_manifest(manifest, repr_dir)?;
    for d in &report.diagnostics {
        println!("{d}");
    }
    if report.is_clean() {
        println!("{} pairs OK", report.num_records);
        Ok(true)
    } else {
        println!(
            "{} problem(s) in {} record(s)",
            report.diagnostics.len(),
            report.num_records
        );
        Ok(false)
    }
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let mut run = RunConfig::load(config_path)?;
    let data = run.data.clone();
    let train_full = load_checked(&data.train_manifest, &data.train_repr_dir)?;
    let (train_ds, valid_ds) = match (&data.valid_manifest, data.train_fraction) {
        (Some(m), _) => {
            let dir = data
                .valid_repr_dir
                .as_deref()
                .unwrap_or(&data.train_repr_dir);
            (train_full, load_checked(m, dir)?)
        }
        (None, Some(fraction)) => split_dataset(&train_full, fraction, run.training.seed)?,
        (None, None) => unreachable!("config check fills train_fraction"),
    };
    let (l, d) = train_ds.shape().context("training set is empty")?;
    if valid_ds.shape() != Some((l, d)) {
        bail!(
            "validation representations {:?} do not match training (L={l}, D={d})",
            valid_ds.shape()
        );
    }
    let model_cfg = run.model_config(l, d)?;
    let train_cfg = run.train_config();

    let out = &run.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("resolved_config.toml"), run.to_toml()?)?;
    eprintln!(
        "training on {} pairs, validating on {} pairs (L={l}, D={d})",
        train_ds.len(),
        valid_ds.len()
    );

    let outcome = train(&train_ds, &valid_ds, &model_cfg, &train_cfg)?;
    write_history(out.join("history.jsonl"), &outcome.history)?;
    write_checkpoint(
        out.join("best.svs"),
        &Checkpoint::new(model_cfg, outcome.best_params)?,
    )?;
    write_checkpoint(
        out.join("final.svs"),
        &Checkpoint::new(model_cfg, outcome.final_params)?,
    )?;

    let best = &outcome.history[outcome.best_epoch];
    let metric = train_cfg.selection_metric;
    let value = best.valid.map(|v| metric.value(&v.system));
    eprintln!(
        "selected epoch {} ({metric:?} = {}); outputs in {}",
        best.epoch,
        value.map_or("n/a".into(), |v| format!("{v:.6}")),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    checkpoint: &Path,
    manifest: &Path,
    repr_dir: &Path,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
    predictions: Option<PathBuf>,
) -> Result<()> {
    let ckpt = read_checkpoint(checkpoint)?;
    let ds = load_checked(manifest, repr_dir)?;
    let preds = predict(&ckpt.params, &ckpt.config, &ds)?;
    let rep = report(&preds, ckpt.config.mode)?;
    let json = serde_json::to_string_pretty(&rep)?;
    println!("{json}");
    if let Some(path) = out {
        fs::write(&path, format!("{json}\n"))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = csv {
        fs::write(&path, rep.per_system_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = predictions {
        let mut text = String::new();
        for p in &preds {
            text.push_str(&serde_json::to_string(p)?);
            text.push('\n');
        }
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_score(checkpoint: &Path, test: &Path, reference: &Path) -> Result<()> {
    let ckpt = read_checkpoint(checkpoint)?;
    let t = read_lrp(test).with_context(|| format!("reading {}", test.display()))?;
    let r = read_lrp(reference).with_context(|| format!("reading {}", reference.display()))?;
    let out = forward(&t, &r, &ckpt.params, &ckpt.config)?;
    println!("{:.6}", out.score());
    Ok(())
}

fn cmd_inspect_weights(checkpoint: &Path) -> Result<()> {
    let ckpt = read_checkpoint(checkpoint)?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    if ckpt.config.repr_source == ReprSource::LastLayer {
        writeln!(
            w,
            "checkpoint uses the last layer only (layer {}); layer weights are not used",
            ckpt.config.dims.num_layers - 1
        )?;
        return Ok(());
    }
    writeln!(w, "layer\tweight\tlogit")?;
    let weights = ckpt.params.layer_weights();
    for (l, (wl, z)) in weights.iter().zip(&ckpt.params.layer_logits).enumerate() {
        writeln!(w, "{l}\t{wl:.6}\t{z:.6}")?;
    }
    writeln!(w, "sum\t{:.6}", weights.iter().sum::<f64>())?;
    Ok(())
}
