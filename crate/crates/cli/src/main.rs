use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nmpc_core::harness::{run_experiment, Experiment, ExperimentConfig, ExperimentError};
use nmpc_core::nmpc::Scheme;
use nmpc_core::reference::{synth_track, SynthParams, TrackKind};

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;

/// Closed-loop NMPC tracking experiments on a kinematic car.
#[derive(Parser)]
#[command(name = "nmpc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scheme in closed loop and write its trace and summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// classic, multistep, multistep_reopt or multistep_sens.
        #[arg(long, default_value = "classic")]
        scheme: Scheme,
    },
    /// Run several schemes under the same noise realization.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Schemes to compare (repeatable); all four by default.
        #[arg(long)]
        scheme: Vec<Scheme>,
    },
    /// Solve the first OCP of the experiment and print its regularity report.
    CheckRegularity {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic reference trajectory as CSV (`.gz` compresses).
    SynthTrack {
        /// straight, circle, oval or chicane.
        #[arg(long, default_value = "oval")]
        kind: TrackKind,
        /// Output file; `-` writes to stdout.
        #[arg(long, short, default_value = "-")]
        out: PathBuf,
        /// Length of the reference [s].
        #[arg(long)]
        duration: Option<f64>,
        /// Sampling time [s].
        #[arg(long)]
        h: Option<f64>,
        /// Constant speed [m/s].
        #[arg(long)]
        speed: Option<f64>,
        /// Turn radius [m].
        #[arg(long)]
        radius: Option<f64>,
        /// Straight length [m].
        #[arg(long)]
        straight: Option<f64>,
        /// Initial lateral position of the reference [m].
        #[arg(long)]
        y0: Option<f64>,
    },
}

/// Options shared by the experiment commands. Flags override the config file.
#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for trace CSVs and summaries.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Noise amplitude (half-width unless the config says otherwise).
    #[arg(long)]
    noise: Option<f64>,
    /// Reference CSV to track instead of the synthetic track.
    #[arg(long)]
    track: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| e.to_string())?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(a) = self.noise {
            cfg.noise.amplitude = a;
        }
        if let Some(t) = &self.track {
            cfg.track.file = Some(t.clone());
        }
        if self.sequential {
            cfg.parallel = false;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_CONFIG)
}

fn experiment_error(e: ExperimentError) -> ExitCode {
    if e.is_config_error() {
        config_error(e)
    } else {
        eprintln!("error: {e}");
        ExitCode::FAILURE
    }
}

fn run_schemes(common: &Common, schemes: Option<Vec<Scheme>>) -> ExitCode {
    let mut cfg = match common.load() {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    if let Some(s) = schemes {
        cfg.schemes = s;
    }
    let report = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => return experiment_error(e),
    };
    print!("{}", report.summary.to_text());
    for f in &report.files {
        log::info!("wrote {}", f.display());
    }
    if report.summary.all_ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_SOLVER)
    }
}

fn check_regularity(common: &Common) -> ExitCode {
    let cfg = match common.load() {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    let exp = match Experiment::new(cfg) {
        Ok(e) => e,
        Err(e) => return experiment_error(e),
    };
    match exp.solve_initial() {
        Ok(sol) => {
            let kkt = &sol.kkt;
            println!(
                "objective {}  iterations {}  stationarity {:e}  feasibility {:e}  complementarity {:e}  active {}",
                sol.objective,
                kkt.iterations,
                kkt.kkt_residual,
                kkt.feasibility,
                kkt.complementarity,
                kkt.active_set.len()
            );
            println!(
                "{}",
                serde_json::to_string_pretty(&kkt.regularity).expect("report serializes")
            );
            println!("strongly regular: {}", kkt.regularity.is_strongly_regular());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn synth(
    kind: TrackKind,
    out: &PathBuf,
    duration: Option<f64>,
    h: Option<f64>,
    speed: Option<f64>,
    radius: Option<f64>,
    straight: Option<f64>,
    y0: Option<f64>,
) -> ExitCode {
    let d = SynthParams::default();
    let params = SynthParams {
        duration: duration.unwrap_or(d.duration),
        h: h.unwrap_or(d.h),
        speed: speed.unwrap_or(d.speed),
        radius: radius.unwrap_or(d.radius),
        straight_length: straight.unwrap_or(d.straight_length),
        y0: y0.unwrap_or(d.y0),
        ..d
    };
    let track = match synth_track(kind, &params) {
        Ok(t) => t,
        Err(e) => return config_error(e),
    };
    let written = if out.as_os_str() == "-" {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        track
            .write_csv(&mut lock)
            .and_then(|_| lock.flush().map_err(Into::into))
    } else {
        track.save_csv(out)
    };
    match written {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { common, scheme } => run_schemes(common, Some(vec![*scheme])),
        Command::Compare { common, scheme } => {
            run_schemes(common, (!scheme.is_empty()).then(|| scheme.clone()))
        }
        Command::CheckRegularity { common } => check_regularity(common),
        Command::SynthTrack {
            kind,
            out,
            duration,
            h,
            speed,
            radius,
            straight,
            y0,
        } => synth(*kind, out, *duration, *h, *speed, *radius, *straight, *y0),
    }
}
