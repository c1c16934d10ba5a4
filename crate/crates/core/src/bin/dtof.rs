use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dtof::commands::{self, Method, ModeName, Overrides, RunConfig, DTOF_DIR, REPORT_NAME};

#[derive(Parser)]
#[command(
    name = "dtof",
    version,
    about = "dToF simulation, super-resolution and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for scene generation and shot noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// hist | peak
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ModeName>,
    /// nearest | bilinear | bilateral | candidate | candidate+temporal
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,
    /// Histogram bins.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Bin width in nanoseconds.
    #[arg(long = "t0-ns", global = true)]
    t0_ns: Option<f64>,
    /// Downsampling factor.
    #[arg(long, global = true)]
    s: Option<usize>,
    /// Compression sections.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Histogram threshold applied before compression.
    #[arg(long = "noise-floor", global = true)]
    noise_floor: Option<f64>,
    /// Expected photons per dToF pixel; enables shot noise.
    #[arg(long = "photon-budget", global = true)]
    photon_budget: Option<f64>,
    /// δ threshold; repeat for several.
    #[arg(long = "tau", global = true)]
    tau: Vec<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural RGB-D sequence.
    Synth {
        /// Scene spec TOML; a desk scene is generated when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate dToF frames into <out>/dtof.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upsample dToF frames into <out>/pred.
    Superres {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to <out>/dtof.
        #[arg(long)]
        dtof: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a metric report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Defaults to report.txt next to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of ae,delta,tepe.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
    },
    /// Print one pixel of a DTFH file.
    Inspect {
        file: PathBuf,
        #[arg(long, num_args = 2, value_names = ["X", "Y"], default_values_t = [0, 0])]
        pixel: Vec<usize>,
        /// DTFH file to measure the Wasserstein distance against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<ModeName, String> {
    s.parse().map_err(|e: dtof::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: dtof::Error| e.to_string())
}

fn run(cli: Cli) -> dtof::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode,
        method: cli.method,
        k: cli.k,
        t0_ns: cli.t0_ns,
        s: cli.s,
        m: cli.m,
        noise_floor: cli.noise_floor,
        photon_budget: cli.photon_budget,
        taus: (!cli.tau.is_empty()).then_some(cli.tau),
    };
    let mut config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth { spec, out } => {
            let m = commands::cmd_synth(spec.as_deref(), &out, &config)?;
            println!("{}", m.display());
        }
        Command::Simulate { manifest, out } => {
            let dir = commands::cmd_simulate(&manifest, &config, &out)?;
            println!("{}", dir.display());
        }
        Command::Superres {
            manifest,
            dtof,
            out,
        } => {
            let dtof = dtof.unwrap_or_else(|| out.join(DTOF_DIR));
            let dir = commands::cmd_superres(&manifest, &dtof, &config, &out)?;
            println!("{}", dir.display());
        }
        Command::Eval {
            manifest,
            pred,
            out,
            metrics,
        } => {
            if metrics.is_some() {
                config.eval.metrics = metrics;
                config.validate()?;
            }
            let out = out.unwrap_or_else(|| {
                pred.parent()
                    .map_or_else(|| PathBuf::from(REPORT_NAME), |p| p.join(REPORT_NAME))
            });
            let report = commands::cmd_eval(&manifest, &pred, &config, &out)?;
            print!("{}", report.to_text());
        }
        Command::Inspect {
            file,
            pixel,
            reference,
        } => {
            let text =
                commands::cmd_inspect(&file, (pixel[0], pixel[1]), reference.as_deref(), &config)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
