use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eit_layout::pipeline::{self, Pipeline, PipelineConfig};
use eit_layout::{Error, Result};

#[derive(Parser)]
#[command(name = "eitopt", version, about = "Electrode layout optimization for 2D EIT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "EITOPT_OUT", default_value = "out")]
    out: PathBuf,
    /// Replace every stage seed by one derived from this value.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count; results do not depend on it.
    #[arg(long, env = "EITOPT_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct LayoutPair {
    /// Reference layout CSV; defaults to `<out>/layout_uniform.csv`.
    #[arg(long)]
    layout_a: Option<PathBuf>,
    /// Candidate layout CSV; defaults to `<out>/layout_optimized.csv`.
    #[arg(long)]
    layout_b: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training set.
    GenData(Common),
    /// Train the inverse network on a generated training set.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training set directory; defaults to `<out>/dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Query the network for the optimized layout.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Network file; defaults to `<out>/network.json`.
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// Compare two layouts on modeling error, conditioning and distinguishability.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        layouts: LayoutPair,
    },
    /// Reconstruction study with a standard and an optimized layout.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        layouts: LayoutPair,
    },
    /// Distinguishability study for two layouts.
    Distinguish {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        layouts: LayoutPair,
    },
    /// gen-data, train, optimize, evaluate and reconstruct in sequence.
    FullPipeline(Common),
}

fn setup(c: &Common) -> Result<Pipeline> {
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("--threads", e.to_string()))?;
    }
    let config = PipelineConfig::read(&c.config)?;
    match c.seed {
        Some(s) => Pipeline::with_seed(config, s),
        None => Pipeline::new(config),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let p = setup(&c)?;
            let (_, s) = pipeline::cmd_gen_data(&p, &c.out)?;
            println!(
                "{} columns ({} with sentinel kappa); kappa in [{:.3e}, {:.3e}], beta in [{:.3e}, {:.3e}]",
                s.columns, s.sentinel_columns, s.kappa_min, s.kappa_max, s.beta_min, s.beta_max
            );
        }
        Command::Train { common: c, dataset } => {
            let p = setup(&c)?;
            let net = pipeline::cmd_train(&p, &c.out, dataset.as_deref())?;
            let r = &net.record;
            println!(
                "{} epochs, stop: {}; best epoch {}, validation loss {:.4e}, test loss {:.4e}",
                r.epochs,
                r.stop_reason,
                r.best_epoch,
                r.validation_loss.get(r.best_epoch).copied().unwrap_or(f64::NAN),
                r.test_loss
            );
        }
        Command::Optimize { common: c, network } => {
            let p = setup(&c)?;
            let (opt, uni) = pipeline::cmd_optimize(&p, &c.out, network.as_deref())?;
            println!("optimized layout {}; max deviation from uniform {:.4}", opt.id(), pipeline::max_deviation(&opt, &uni));
        }
        Command::Evaluate { common: c, layouts } => {
            let p = setup(&c)?;
            let (a, b) = pipeline::load_layouts(&p, &c.out, layouts.layout_a.as_deref(), layouts.layout_b.as_deref())?;
            let r = pipeline::cmd_evaluate(&p, &c.out, &a, &b)?;
            print!("{}", r.summary_csv());
        }
        Command::Reconstruct { common: c, layouts } => {
            let p = setup(&c)?;
            let (a, b) = pipeline::load_layouts(&p, &c.out, layouts.layout_a.as_deref(), layouts.layout_b.as_deref())?;
            let s = pipeline::cmd_reconstruct(&p, &c.out, &a, &b)?;
            print!("{}", s.table_csv());
        }
        Command::Distinguish { common: c, layouts } => {
            let p = setup(&c)?;
            let (a, b) = pipeline::load_layouts(&p, &c.out, layouts.layout_a.as_deref(), layouts.layout_b.as_deref())?;
            let d = pipeline::cmd_distinguish(&p, &c.out, &a, &b)?;
            for l in &d.levels {
                println!("h_max {}: layout B wins {:.1}% of {} pairs", l.h_max, 100.0 * l.win_rate_b, d.n_pairs);
            }
        }
        Command::FullPipeline(c) => {
            let p = setup(&c)?;
            let s = pipeline::cmd_full(&p, &c.out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
