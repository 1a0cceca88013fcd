//! Command-line interface: train / eval / explain / faithfulness / report.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! I/O and file-format failures.

use crate::config::apply_config_file;
use crate::data::{resolve_dataset, Dataset};
use crate::error::{Error, Result};
use crate::export;
use crate::faithfulness::faithfulness_study;
use crate::pnm;
use crate::stats;
use crate::train::{
    evaluate, explain_dataset, train, EvalPooling, ExperimentConfig, Mode, Network, RunResult,
};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

/// Fixed generator seed for the synthetic dataset so every run sees the
/// same data.
const SYNTH_DATA_SEED: u64 = 1000;

#[derive(Parser)]
#[command(name = "bla", about = "Bounded logit attention toolkit", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Dataset: `mnist38`, `synthetic`, or a directory of IDX files.
    #[arg(long, default_value = "mnist38")]
    data: String,
    /// Optional key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more models and write checkpoints plus run records.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Training mode: bl, bla, bla-t, bla-ph, l2xf, l2x-pixel.
        #[arg(long)]
        mode: Option<String>,
        /// Output directory for checkpoints and records.
        #[arg(long)]
        out: PathBuf,
        /// Seed for a single run (ignored with --runs).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run seeds 0..N-1 instead of a single seed.
        #[arg(long)]
        runs: Option<u64>,
        /// Trained baseline checkpoint, required for mode bla-ph.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pooling override: average, soft, hard, thresholded, topk.
        #[arg(long)]
        pooling: Option<String>,
    },
    /// Export explanations (and optionally images) for validation inputs.
    Explain {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of inputs to explain (default: all).
        #[arg(long)]
        count: Option<usize>,
        /// Additionally write PGM/PPM visualizations for this many inputs.
        #[arg(long, default_value_t = 0)]
        images: usize,
    },
    /// Run the LIME-referenced faithfulness study.
    Faithfulness {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of validation images in the study.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// LIME occlusion samples per image.
        #[arg(long, default_value_t = 1000)]
        num_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize run-record files as a table with significance tests.
    Report {
        /// Run-record files produced by `train`.
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

/// Parses argv and runs the chosen command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &CommonOpts, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(Mode::Bl, seed);
    if let Some(path) = &common.config {
        apply_config_file(path, &mut cfg)?;
    }
    Ok(cfg)
}

fn datasets(common: &CommonOpts) -> Result<(Dataset, Dataset)> {
    resolve_dataset(&common.data, SYNTH_DATA_SEED)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            mode,
            out,
            seed,
            runs,
            init_checkpoint,
        } => cmd_train(common, mode, out, seed, runs, init_checkpoint),
        Command::Eval {
            common,
            checkpoint,
            pooling,
        } => cmd_eval(common, checkpoint, pooling),
        Command::Explain {
            common,
            checkpoint,
            out,
            count,
            images,
        } => cmd_explain(common, checkpoint, out, count, images),
        Command::Faithfulness {
            common,
            checkpoint,
            out,
            count,
            num_samples,
            seed,
        } => cmd_faithfulness(common, checkpoint, out, count, num_samples, seed),
        Command::Report { records } => cmd_report(records),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_train(
    common: CommonOpts,
    mode: Option<String>,
    out: PathBuf,
    seed: u64,
    runs: Option<u64>,
    init_checkpoint: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(&common, seed)?;
    if let Some(m) = &mode {
        let m = Mode::parse(m)?;
        let defaults = ExperimentConfig::new(m, cfg.seed);
        cfg.mode = m;
        cfg.bla.gamma = defaults.bla.gamma;
    }
    let init = match (cfg.mode, &init_checkpoint) {
        (Mode::BlaPh, Some(path)) => Some(Network::load(path, cfg.bla, cfg.l2x)?),
        (Mode::BlaPh, None) => {
            return Err(Error::Config(
                "mode bla-ph requires --init-checkpoint with a trained baseline".into(),
            ))
        }
        (_, Some(_)) => {
            return Err(Error::Config(format!(
                "--init-checkpoint only applies to mode bla-ph, not {}",
                cfg.mode
            )))
        }
        (_, None) => None,
    };

    let (train_ds, val_ds) = datasets(&common)?;
    ensure_dir(&out)?;
    let seeds: Vec<u64> = match runs {
        Some(n) => (0..n).collect(),
        None => vec![seed],
    };
    let mut records = Vec::new();
    for &s in &seeds {
        cfg.seed = s;
        let (net, result) = train(&cfg, &train_ds, &val_ds, init.as_ref())?;
        let ckpt = out.join(format!("{}-seed{}.blam", cfg.mode, s));
        net.save(&ckpt)?;
        let line = result.to_record();
        println!("{line}");
        records.push(line);
    }
    export::write_lines(&out.join("runs.txt"), records)?;
    Ok(())
}

fn reporting_pooling(net: &Network) -> EvalPooling {
    match net {
        Network::Pixel(_) => EvalPooling::TopK,
        Network::Standard(m) => match m.pooling {
            crate::nn::PoolingMode::Average => EvalPooling::Average,
            crate::nn::PoolingMode::L2xF => EvalPooling::TopK,
            _ => EvalPooling::Hard,
        },
    }
}

fn cmd_eval(common: CommonOpts, checkpoint: PathBuf, pooling: Option<String>) -> Result<()> {
    let cfg = load_config(&common, 0)?;
    let net = Network::load(&checkpoint, cfg.bla, cfg.l2x)?;
    let (_, val_ds) = datasets(&common)?;
    let pooling = match pooling {
        Some(p) => EvalPooling::parse(&p)?,
        None => reporting_pooling(&net),
    };
    let (accuracy, loss) = evaluate(&net, &val_ds, pooling)?;
    println!("accuracy={accuracy} loss={loss}");
    Ok(())
}

fn cmd_explain(
    common: CommonOpts,
    checkpoint: PathBuf,
    out: PathBuf,
    count: Option<usize>,
    images: usize,
) -> Result<()> {
    let cfg = load_config(&common, 0)?;
    let net = Network::load(&checkpoint, cfg.bla, cfg.l2x)?;
    let model = net.as_standard()?;
    let (_, val_ds) = datasets(&common)?;
    let count = count.unwrap_or(val_ds.len()).min(val_ds.len());
    let subset = Dataset {
        images: val_ds.images[..count].to_vec(),
        labels: val_ds.labels[..count].to_vec(),
        masks: None,
        split: val_ds.split,
    };
    ensure_dir(&out)?;
    let explained = explain_dataset(model, &subset)?;
    export::write_lines(
        &out.join("explanations.txt"),
        explained.iter().map(export::explanation_record),
    )?;
    for e in explained.iter().take(images) {
        let img = &subset.images[e.index];
        let bytes = pnm::image_bytes(img)?;
        let (h, w) = (img.shape()[0], img.shape()[1]);
        pnm::write_pgm(&out.join(format!("input-{}.pgm", e.index)), w, h, &bytes)?;
        pnm::write_q_pgm(&out.join(format!("qmap-{}.pgm", e.index)), &e.soft.q, e.soft.grid)?;
        pnm::write_heatmap_ppm(
            &out.join(format!("heatmap-{}.ppm", e.index)),
            &e.soft.q,
            e.soft.grid,
        )?;
        pnm::write_overlay_ppm(
            &out.join(format!("overlay-{}.ppm", e.index)),
            img,
            &e.soft.q,
            e.soft.grid,
        )?;
    }
    println!("explained {count} inputs");
    Ok(())
}

fn cmd_faithfulness(
    common: CommonOpts,
    checkpoint: PathBuf,
    out: PathBuf,
    count: usize,
    num_samples: usize,
    seed: u64,
) -> Result<()> {
    let cfg = load_config(&common, 0)?;
    let net = Network::load(&checkpoint, cfg.bla, cfg.l2x)?;
    let model = net.as_standard()?;
    let (_, val_ds) = datasets(&common)?;
    let outcome = faithfulness_study(model, &val_ds, count, num_samples, seed)?;
    ensure_dir(&out)?;
    let mut lines = Vec::new();
    for r in &outcome.per_image {
        lines.push(export::saliency_record(r.index, &r.bla));
        lines.push(export::saliency_record(r.index, &r.cam));
        lines.push(export::saliency_record(r.index, &r.lime));
        lines.push(export::saliency_record(r.index, &r.random));
    }
    export::write_lines(&out.join("saliency.txt"), lines)?;
    println!(
        "spearman_lime_soft={} stderr={}",
        outcome.mean_rho_bla, outcome.stderr_rho_bla
    );
    println!(
        "spearman_lime_cam={} stderr={}",
        outcome.mean_rho_cam, outcome.stderr_rho_cam
    );
    println!(
        "spearman_lime_random={} stderr={}",
        outcome.mean_rho_random, outcome.stderr_rho_random
    );
    println!("p_soft_vs_random={}", outcome.p_bla_vs_random);
    Ok(())
}

fn cmd_report(paths: Vec<PathBuf>) -> Result<()> {
    let mut results: Vec<RunResult> = Vec::new();
    for path in &paths {
        for line in export::read_lines(path)? {
            results.push(RunResult::parse_record(&line)?);
        }
    }
    if results.is_empty() {
        return Err(Error::Config("no run records found".into()));
    }
    let mut modes: Vec<Mode> = Vec::new();
    for r in &results {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    let by_mode = |m: Mode| -> Vec<f64> {
        results
            .iter()
            .filter(|r| r.mode == m)
            .map(|r| r.accuracy)
            .collect()
    };

    println!("{:<10} {:>5} {:>22} {:>12} {:>12}", "mode", "runs", "accuracy % (stderr)", "size mean", "size std");
    for &m in &modes {
        let accs = by_mode(m);
        let group: Vec<&RunResult> = results.iter().filter(|r| r.mode == m).collect();
        let size_mean = group.iter().map(|r| r.size_mean).sum::<f64>() / group.len() as f64;
        let size_std = group.iter().map(|r| r.size_std).sum::<f64>() / group.len() as f64;
        if accs.len() >= 2 {
            let (mean, stderr) = stats::mean_stderr(&accs)?;
            println!(
                "{:<10} {:>5} {:>14.2} ({:.2}) {:>12.2} {:>12.2}",
                m.to_string(),
                accs.len(),
                100.0 * mean,
                100.0 * stderr,
                size_mean,
                size_std
            );
        } else {
            println!(
                "{:<10} {:>5} {:>14.2} {:>6} {:>12.2} {:>12.2}",
                m.to_string(),
                accs.len(),
                100.0 * accs[0],
                "(-)",
                size_mean,
                size_std
            );
        }
    }
    let baseline = modes[0];
    for &m in modes.iter().skip(1) {
        let a = by_mode(baseline);
        let b = by_mode(m);
        if a.len() >= 2 && b.len() >= 2 {
            let (u, p) = stats::mann_whitney_u(&a, &b)?;
            println!("mann-whitney {baseline} vs {m}: U={u} p={p:.4}");
        }
    }
    Ok(())
}
