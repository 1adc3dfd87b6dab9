use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sec_core::harness::{self, RunConfig};
use sec_core::Error;

#[derive(Parser)]
#[command(name = "sec", version, about = "Simplex-enabled safe continual learning on a cart-pole")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured output directory.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize and verify the student design; writes design.json.
    Synth,
    /// Pretrain the student over randomized plants; writes checkpoints.
    Pretrain,
    /// Continual learning on the gapped plant from a checkpoint.
    Continual {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Three-model comparison bundle (phase data, plots, reward curves).
    Compare {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Verify a design file, or re-scan a run trace.
    Verify {
        #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
        design: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// The trace was produced with the coordinator in the loop.
        #[arg(long)]
        supervised: bool,
    },
    /// Render a run trace as an SVG phase plot.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_seed_override(std::env::var(harness::SEED_ENV).ok().as_deref())?;
            c
        }
    };
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load(&cli)?;
    match cli.cmd {
        Command::Synth => {
            let path = harness::cmd_synth(&cfg)?;
            println!("verified design written to {}", path.display());
        }
        Command::Pretrain => {
            let path = harness::cmd_pretrain(&cfg)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Continual { checkpoint } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            let trace = harness::cmd_continual(&cfg)?;
            for e in &trace.episodes {
                println!(
                    "episode {}: {} steps, return {:.2}, violations {}, teacher activations {} ({})",
                    e.episode,
                    e.steps,
                    e.total_return,
                    e.violations,
                    e.teacher_activations,
                    e.termination.as_str()
                );
            }
        }
        Command::Compare { checkpoint } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            let dir = harness::cmd_compare(&cfg)?;
            println!("comparison bundle written to {}", dir.display());
        }
        Command::Verify { design, trace, supervised } => {
            if let Some(d) = design {
                let report = harness::cmd_verify_design(&d)?;
                print!("{report}");
                if !report.all_passed() {
                    return Err(Error::SynthesisInfeasible {
                        reason: "design fails verification".into(),
                        failing: report.failures().iter().map(|c| c.name.clone()).collect(),
                    });
                }
            } else if let Some(t) = trace {
                let report = harness::cmd_check_trace(&cfg, &t, supervised)?;
                println!(
                    "{} rows, {} episodes, {} violations ({} envelope, {} box), {} teacher activations",
                    report.rows,
                    report.episodes,
                    report.violations,
                    report.envelope_violations,
                    report.box_exits,
                    report.teacher_activations
                );
                for issue in &report.issues {
                    println!("issue: {issue}");
                }
                if !report.ok() {
                    return Err(Error::Format(format!("{} trace issues", report.issues.len())));
                }
            }
        }
        Command::Plot { trace, svg } => {
            let svg = svg.unwrap_or_else(|| trace.with_extension("svg"));
            harness::cmd_plot(&cfg, &trace, &svg)?;
            println!("plot written to {}", svg.display());
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
