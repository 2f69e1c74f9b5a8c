use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dice_cli::{cmd_experiment, cmd_influence, cmd_train, cmd_verify, exit_code, InfluenceArgs};
use dice_core::influence::{Estimator, HopAttribution};

#[derive(Parser)]
#[command(name = "dice", version, about = "Decentralized SGD with data influence")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Gt,
    Estimate,
}

#[derive(Clone, Copy, ValueEnum)]
enum HopsArg {
    Reachable,
    ShortestPath,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Alignment,
    Anomaly,
    Cascade,
    InfluenceQuery,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and write a replayable trace directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Influence of one node's update, from a saved trace.
    Influence {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        node: usize,
        #[arg(long = "iter")]
        iteration: usize,
        #[arg(long, default_value_t = 1)]
        radius: usize,
        #[arg(long, value_enum, default_value = "estimate")]
        estimator: EstimatorArg,
        #[arg(long, value_enum, default_value = "reachable")]
        hops: HopsArg,
        #[arg(long)]
        per_sample: bool,
        /// Remove a single shard sample instead of the whole update.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and run the experiment block of a config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Derivative checks and the step-halving study.
    Verify {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, out, seed, force } => cmd_train(&config, &out, seed, force).map(|trace| {
            println!(
                "trained {} nodes for {} rounds, trace in {}",
                trace.n(),
                trace.rounds(),
                out.display()
            );
            true
        }),
        Cmd::Influence {
            trace,
            node,
            iteration,
            radius,
            estimator,
            hops,
            per_sample,
            sample,
            out,
            force,
        } => {
            let args = InfluenceArgs {
                node,
                iteration,
                radius,
                estimator: match estimator {
                    EstimatorArg::Gt => Estimator::Gt,
                    EstimatorArg::Estimate => Estimator::Estimate,
                },
                hops: match hops {
                    HopsArg::Reachable => HopAttribution::Reachable,
                    HopsArg::ShortestPath => HopAttribution::ShortestPath,
                },
                per_sample,
                sample,
            };
            cmd_influence(&trace, &args, &out, force).map(|rep| {
                let hops: Vec<String> = rep.per_hop.iter().map(|v| format!("{v:.6e}")).collect();
                println!("total {:.6e} per hop [{}]", rep.total, hops.join(", "));
                true
            })
        }
        Cmd::Experiment {
            config,
            kind,
            out,
            seed,
            force,
        } => {
            let kind = match kind {
                Kind::Alignment => "alignment",
                Kind::Anomaly => "anomaly",
                Kind::Cascade => "cascade",
                Kind::InfluenceQuery => "influence-query",
            };
            cmd_experiment(&config, kind, &out, seed, force).map(|s| {
                for c in &s.checks {
                    println!("{} {}: {:.4} (threshold {})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
                }
                println!("{kind}: wrote {}", s.files.join(", "));
                true
            })
        }
        Cmd::Verify { seeds, out, force } => cmd_verify(seeds, &out, force).inspect(|&ok| {
            println!("numerics {}", if ok { "passed" } else { "FAILED" });
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
