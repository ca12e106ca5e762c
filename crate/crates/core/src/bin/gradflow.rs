use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradflow::harness::{self, resolve_out, RunConfig, RunStatus};
use gradflow::Error;

#[derive(Parser)]
#[command(name = "gradflow", about = "Gradient-explosion diagnostics and layer-wise adaptive training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the closed-form explosion rate over a grid of R as CSV.
    Analytic {
        /// R_MIN R_MAX STEPS
        #[arg(long, num_args = 3, value_names = ["R_MIN", "R_MAX", "STEPS"], allow_negative_numbers = true)]
        table: Vec<String>,
    },
    /// Injected-gradient probe at initialization.
    Probe {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sampled gradient and curvature per dense layer.
    Hessian {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and log per-step diagnostics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every config in a directory over several seeds.
    Sweep {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io { .. } => EXIT_CONFIG,
        Error::Format { .. } | Error::Csv { .. } => EXIT_FORMAT,
        _ => 1,
    }
}

fn parse_table(v: &[String]) -> gradflow::Result<(f64, f64, usize)> {
    let bad = |s: &String| Error::Config(format!("bad --table value {s:?}"));
    let r_min: f64 = v[0].parse().map_err(|_| bad(&v[0]))?;
    let r_max: f64 = v[1].parse().map_err(|_| bad(&v[1]))?;
    let steps: usize = v[2].parse().map_err(|_| bad(&v[2]))?;
    Ok((r_min, r_max, steps))
}

fn run(cmd: Cmd) -> gradflow::Result<u8> {
    match cmd {
        Cmd::Analytic { table } => {
            let (lo, hi, steps) = parse_table(&table)?;
            let stdout = std::io::stdout();
            match harness::analytic_table(&mut stdout.lock(), lo, hi, steps) {
                // a closed pipe (e.g. `| head`) is not a failure
                Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::BrokenPipe => {}
                other => other?,
            }
        }
        Cmd::Probe { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = cfg.output_dir();
            let res = harness::run_probe(&cfg, &out)?;
            println!("geometric mean rate {:.6} over {} blocks", res.profile.geometric_mean_rate(), res.profile.depth());
            println!("wrote {}", out.display());
        }
        Cmd::Hessian { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = cfg.output_dir();
            let rep = harness::run_hessian(&cfg, &out)?;
            match rep.slope {
                Some(s) => println!("log-log slope {s:.4} over {} layers", rep.layers),
                None => println!("log-log slope undefined over {} layers", rep.layers),
            }
            println!("wrote {}", out.display());
        }
        Cmd::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = cfg.output_dir();
            let s = harness::run_train(&cfg, &out)?;
            println!("{}", serde_json::to_string(&s).expect("summary serializes"));
            println!("wrote {}", out.display());
            if s.status == RunStatus::Diverged {
                return Ok(EXIT_DIVERGED);
            }
        }
        Cmd::Sweep { configs, seeds } => {
            let out = resolve_out(Some(Path::new("gradflow_out/sweep")));
            for a in harness::run_sweep(&configs, seeds, &out)? {
                let loss = a.loss.map(|(m, s)| format!("{m:.6} ± {:.6}", s.unwrap_or(f64::NAN))).unwrap_or_else(|| "n/a".into());
                println!("{}: {}/{} completed, {} diverged, {} failed, final loss {loss}", a.config, a.completed, a.runs, a.diverged, a.failed);
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("gradflow: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
