//! `xbl`: generate the decoy dataset, train, refine, evaluate, explain.
//!
//! Exit status: 0 on success, 2 for configuration or usage errors, 3 for
//! data errors, 1 for anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xbl_core::config::RunConfig;
use xbl_core::data::SplitName;
use xbl_core::exemplar::ExemplarPolicy;
use xbl_core::harness::{self, StageReport, REFINED, UNREFINED};
use xbl_core::metrics::MetricsRow;
use xbl_core::XblError;

#[derive(Parser)]
#[command(name = "xbl", version, about = "Exemplar explanation-based learning on a decoy image benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded decoy dataset.
    Generate(Common),
    /// Train the unrefined model with cross-entropy.
    Train(Common),
    /// Refine a checkpoint with the configured explanation loss.
    Refine {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to refine; defaults to this run's unrefined model.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Manual exemplars as GOOD,BAD training-split indices.
        #[arg(long, value_name = "GOOD,BAD")]
        exemplars: Option<String>,
    },
    /// Accuracy and activation precision of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the configured one.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Top-percent threshold; defaults to the configured tau.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Input | heatmap | overlay panels for selected images.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Comma-separated `<split>:<index>` ids.
        #[arg(long, value_name = "IDS", value_delimiter = ',', required = true)]
        ids: Vec<String>,
        /// Defaults to `<output_dir>/panels`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &XblError) -> u8 {
    match e {
        XblError::Config(_) => 2,
        XblError::Dataset(_)
        | XblError::Parse { .. }
        | XblError::Io { .. }
        | XblError::Lookup(_)
        | XblError::Selection(_)
        | XblError::Generation(_) => 3,
        _ => 1,
    }
}

fn load_config(c: &Common) -> Result<RunConfig, XblError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn guard_existing(path: &Path, force: bool) -> Result<(), XblError> {
    if path.exists() && !force {
        return Err(XblError::Dataset(format!(
            "{} already exists; pass --force to overwrite it",
            path.display()
        )));
    }
    Ok(())
}

fn parse_pair(text: &str) -> Result<ExemplarPolicy, XblError> {
    let bad = || XblError::Config(format!("--exemplars expects GOOD,BAD indices, got {text:?}"));
    let (g, b) = text.split_once(',').ok_or_else(bad)?;
    Ok(ExemplarPolicy::Manual {
        good: g.trim().parse().map_err(|_| bad())?,
        bad: b.trim().parse().map_err(|_| bad())?,
    })
}

fn print_metrics(rows: &[MetricsRow]) {
    println!("{:<14} {:>9} {:>9}", "split", "accuracy", "AP");
    for r in rows {
        let ap = r
            .activation_precision
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        println!("{:<14} {:>9.4} {:>9}", r.split, r.accuracy, ap);
    }
}

fn print_stage(r: &StageReport) {
    println!(
        "{}: {} epochs, best epoch {}, checkpoint {}",
        r.run_id,
        r.epochs_run,
        r.best_epoch,
        r.checkpoint.display()
    );
    if let Some(sel) = &r.selection {
        println!(
            "exemplars: good #{} (class {}), bad #{} (class {})",
            sel.pair.good_source_id, sel.good_class, sel.pair.bad_source_id, sel.bad_class
        );
    }
    print_metrics(&r.metrics);
}

fn run(cli: Cli) -> Result<(), XblError> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load_config(&c)?;
            let data = harness::cmd_generate(&cfg, c.force)?;
            println!("dataset written to {}", cfg.data_dir().display());
            for split in SplitName::ALL {
                println!("{:<14} {:>5} images", split, data.split(split).len());
            }
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            guard_existing(&harness::checkpoint_path(&cfg, UNREFINED), c.force)?;
            print_stage(&harness::cmd_train(&cfg)?);
        }
        Command::Refine {
            common,
            checkpoint,
            exemplars,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(text) = exemplars {
                cfg.exemplar_policy = parse_pair(&text)?;
            }
            guard_existing(&harness::checkpoint_path(&cfg, REFINED), common.force)?;
            print_stage(&harness::cmd_refine(&cfg, checkpoint.as_deref())?);
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            tau,
        } => {
            let cfg = load_config(&common)?;
            let dir = data.unwrap_or_else(|| cfg.data_dir());
            let tau = tau.unwrap_or(cfg.tau);
            if !(tau > 0.0 && tau < 100.0) {
                return Err(XblError::Config(format!("--tau must be in (0, 100), got {tau}")));
            }
            let (rows, path) = harness::cmd_evaluate(&cfg, &checkpoint, &dir, tau)?;
            print_metrics(&rows);
            println!("written to {}", path.display());
        }
        Command::Explain {
            common,
            checkpoint,
            ids,
            out,
        } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("panels"));
            for p in harness::cmd_explain(&cfg, &checkpoint, &ids, &out)? {
                println!("{}", p.display());
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
            ExitCode::from(exit_code(&e))
        }
    }
}
