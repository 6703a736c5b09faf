use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gnnood_core::experiment::{
    ablation_suite, compare_models, load_report, render_ablation, render_report, run_experiment_with_threads,
    ExperimentConfig, GeneratorSpec, ShiftKind,
};
use gnnood_core::graph::{save_graph, GeneratorConfig};
use gnnood_core::ib::{random_fixture, sphere_fixture, two_blob_fixture, verify};
use gnnood_core::{Error, Result};

const THREADS_VAR: &str = "GNNOOD_THREADS";

#[derive(Parser)]
#[command(name = "gnnood", version, about = "Graph neural networks under distribution shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a grid experiment and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; GNNOOD_THREADS takes precedence.
        #[arg(long)]
        threads: Option<usize>,
        /// Reject grid values outside the published search space.
        #[arg(long)]
        paper_grid: bool,
    },
    /// Paired t-test between the selected points of two reports.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Train DGAT and its three ablated variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check the clustering/attention correspondence on a fixture.
    IbVerify {
        #[arg(long, value_enum, default_value_t = Fixture::TwoBlob)]
        fixture: Fixture,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic shifted graph in the text format.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long, default_value_t = 0.9)]
        corr_train: f64,
        #[arg(long, default_value_t = 0.1)]
        corr_ood: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    TwoBlob,
    Sphere,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Covariate,
    Concept,
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{THREADS_VAR}={v:?} is not a thread count"))),
        Err(_) => Ok(flag),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            threads: flag,
            paper_grid,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.paper_grid |= paper_grid;
            let report = run_experiment_with_threads(&cfg, threads(flag)?)?;
            if cfg.output.is_some() {
                print!("{}", render_report(&report));
            } else {
                print!("{}", report.to_json());
            }
        }
        Command::Compare { a, b } => {
            let entry = compare_models(&load_report(a)?, &load_report(b)?)?;
            println!("{}", serde_json::to_string_pretty(&entry).expect("serialisable"));
        }
        Command::Ablate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let table = ablation_suite(&cfg)?;
            print!("{}", render_ablation(&table));
            if let Some(out) = &cfg.output {
                std::fs::write(out, serde_json::to_string_pretty(&table).expect("serialisable") + "\n").map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
            }
        }
        Command::IbVerify { fixture, seed } => {
            let f = match fixture {
                Fixture::TwoBlob => two_blob_fixture(seed),
                Fixture::Sphere => sphere_fixture(seed),
                Fixture::Random => random_fixture(seed),
            };
            println!("{}", serde_json::to_string_pretty(&verify(&f)?).expect("serialisable"));
        }
        Command::GenData {
            kind,
            out,
            seed,
            nodes,
            corr_train,
            corr_ood,
        } => {
            let mut config = GeneratorConfig::default();
            if let Some(n) = nodes {
                config.nodes = n;
            }
            let spec = GeneratorSpec {
                kind: match kind {
                    Kind::Covariate => ShiftKind::Covariate,
                    Kind::Concept => ShiftKind::Concept,
                },
                config,
                corr_train,
                corr_ood,
                seed,
            };
            let g = spec.generate()?;
            save_graph(&g, &out)?;
            eprintln!("wrote {} nodes, {} edges to {}", g.num_nodes(), g.undirected_edges().len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
