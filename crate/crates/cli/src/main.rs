use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use comp_attn::analysis::Grouping;
use comp_attn_cli::analyze::analyze_checkpoint;
use comp_attn_cli::train::run_experiment;
use comp_attn_cli::verify::{run_suite, Suite};
use comp_attn_cli::{CliError, ExperimentConfig, OUTPUT_ENV};

#[derive(Parser)]
#[command(
    name = "comp-attn",
    version,
    about = "Train, verify and analyse compositional attention models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run seeds on separate threads.
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Run a verification suite and print its JSON report.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Summarise the value scores of a trained checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "combo")]
        group: Group,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Group {
    Retrieval,
    Combo,
}

fn output_override() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn write_report(dir: &Path, file: &str, text: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(file), text).with_context(|| format!("writing {file}"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, parallel_seeds } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = cfg.output_dir(output_override().as_deref());
            let manifest = run_experiment(&cfg, &dir, parallel_seeds)?;
            for s in &manifest.seeds {
                println!(
                    "seed {}: in-dist {:.4}  ood {}  [{:?}]",
                    s.seed,
                    s.final_in_dist_loss.unwrap_or(f64::NAN),
                    s.final_ood_loss.map_or("-".to_string(), |v| format!("{v:.4}")),
                    s.status
                );
            }
            if let Some(m) = manifest.summary.in_dist_loss {
                println!("in-dist L1 {:.4} ± {:.4} over {} seeds", m.mean, m.std, m.n);
            }
            if let Some(m) = manifest.summary.ood_loss {
                println!("OoD L1     {:.4} ± {:.4} over {} seeds", m.mean, m.std, m.n);
            }
            println!("artifacts in {}", dir.display());
            if manifest.diverged() {
                return Err(CliError::Numeric(format!(
                    "{} seed(s) diverged",
                    manifest.summary.diverged
                )));
            }
            Ok(())
        }
        Command::Verify { suite } => {
            let outcome = run_suite(suite)?;
            let text = serde_json::to_string_pretty(&outcome).context("serializing report")? + "\n";
            if let Some(root) = output_override() {
                let name = serde_json::to_value(suite).context("suite name")?;
                write_report(
                    &root,
                    &format!("verify_{}.json", name.as_str().unwrap_or("suite")),
                    &text,
                )?;
            }
            print!("{text}");
            if outcome.passed {
                Ok(())
            } else {
                Err(CliError::Numeric(format!("verification suite {suite:?} failed")))
            }
        }
        Command::Analyze {
            checkpoint,
            group,
            batches,
            batch_size,
        } => {
            let (grouping, label) = match group {
                Group::Retrieval => (Grouping::Retrieval, "retrieval"),
                Group::Combo => (Grouping::Combo, "combo"),
            };
            let dir = match output_override() {
                Some(root) => root.join(format!("analysis_{label}")),
                None => checkpoint
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join(format!("analysis_{label}")),
            };
            let out = analyze_checkpoint(&checkpoint, grouping, &dir, batches, batch_size)?;
            if let Some(w) = &out.specialization.warning {
                eprintln!("warning: {w}");
            }
            println!(
                "{} groups; label specialization quality {:.3}",
                out.stats.groups.len(),
                out.specialization.label_quality
            );
            if let Some(c) = &out.specialization.split_contrast {
                println!("train vs held-out value-score distance {:.4}", c.frobenius);
            }
            println!("artifacts in {}", dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
