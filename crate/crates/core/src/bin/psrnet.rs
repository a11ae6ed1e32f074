use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psrnet::classical::SolverVariant;
use psrnet::commands::{self, Method, TrainOptions};
use psrnet::config::Config;
use psrnet::unfold::{Variant, WeightMode};
use psrnet::Error;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nnetwork file format: PSRN v1\nkernel file format: PSF1\ntensor file format: TEN1"
);

/// Photothermal super-resolution with deep-unfolded block-sparse networks.
#[derive(Parser)]
#[command(name = "psrnet", version, long_version = LONG_VERSION)]
struct Cli {
    /// TOML configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the thermal point spread function.
    Psf {
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV dump.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate the training set and the test scene.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured network.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Training set written by `synth` (generated when omitted).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many checkpoints (resume later with --resume).
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        weight_mode: Option<WeightMode>,
        #[arg(long)]
        layers: Option<usize>,
    },
    /// Reconstruct a measurement stack (default: the configured test scene).
    Reconstruct {
        #[arg(long)]
        out: PathBuf,
        /// Trained network file.
        #[arg(long, required_unless_present = "solver", conflicts_with = "solver")]
        net: Option<PathBuf>,
        /// Use a classical solver instead: ista, fista, enet or fenet.
        #[arg(long)]
        solver: Option<SolverVariant>,
        #[arg(long, default_value_t = 0.05)]
        lambda1: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda2: f64,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        /// Stack as a TEN1 tensor or a CSV with one row per measurement.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Average this many adjacent y-rows first.
        #[arg(long, default_value_t = 1)]
        bin: usize,
    },
    /// Run the variant grid, layer study and binning study.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// 1280-pixel rows, 120 measurements, six layers.
        #[arg(long)]
        full_scale: bool,
    },
}

fn load_config(cli: &Cli) -> psrnet::Result<Config> {
    let mut config = match &cli.config {
        Some(p) => {
            commands::check_input(p)?;
            Config::load(p)?
        }
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(config)
}

fn run(cli: Cli) -> psrnet::Result<()> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Psf { out, csv } => commands::cmd_psf(&config, &out, csv.as_deref()),
        Command::Synth { out } => commands::cmd_synth(&config, &out),
        Command::Train { out, data, resume, stop_after, variant, weight_mode, layers } => {
            if let Some(v) = variant {
                config.network.variant = v;
            }
            if let Some(m) = weight_mode {
                config.network.weight_mode = m;
            }
            if let Some(k) = layers {
                config.network.layers = k;
            }
            let (_, report) = commands::cmd_train(&config, &out, &TrainOptions { data, resume, stop_after })?;
            println!("final loss {:.6e} (initial {:.6e})", report.final_loss, report.initial_loss);
            Ok(())
        }
        Command::Reconstruct { out, net, solver, lambda1, lambda2, max_iters, input, bin } => {
            let method = match (net, solver) {
                (Some(p), _) => Method::Network(p),
                (None, Some(variant)) => Method::Solver { variant, lambda1, lambda2, max_iters },
                (None, None) => unreachable!("clap requires --net or --solver"),
            };
            if let Some(r) = commands::cmd_reconstruct(&config, &method, input.as_deref(), bin, &out)? {
                println!("pearson r {r:.6}");
            }
            Ok(())
        }
        Command::Bench { out, full_scale } => {
            if full_scale {
                commands::full_scale(&mut config);
            }
            let res = commands::cmd_bench(&config, &out)?;
            for r in &res.grid {
                match r.pearson_r {
                    Some(v) => println!("{:<28} {v:.4}", r.cell.name()),
                    None => println!("{:<28} {}", r.cell.name(), r.status),
                }
            }
            println!("results in {}", Path::new(&out).display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Interrupted(n)) => {
            println!("stopped after {n} checkpoint(s); continue with --resume");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
