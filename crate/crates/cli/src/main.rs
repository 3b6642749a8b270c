use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use migbatchsim::engine::write_event_trace;
use migbatchsim::scenario::{self, Scenario, SweepSpec};
use migbatchsim::tuning::{MigConfig, DEFAULT_BUCKET_WIDTH_S, DEFAULT_KNEE_DELTA};

/// Simulate dynamic batching on MIG-partitioned GPUs.
#[derive(Debug, Parser)]
#[command(name = "migbatchsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and print its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for report.json, policy.json and traces.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-request trace CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Run a grid of scenarios and write one CSV row per point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Derive a batching policy from a latency profile.
    Tune {
        #[arg(long)]
        profile: PathBuf,
        /// MIG configuration such as `1g.5gb(7x)`.
        #[arg(long, default_value = "1g.5gb(7x)")]
        mig: MigConfig,
        #[arg(long, default_value_t = DEFAULT_BUCKET_WIDTH_S)]
        bucket_width: f64,
        #[arg(long, default_value_t = DEFAULT_KNEE_DELTA)]
        delta: f64,
        /// Policy JSON destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario and dump every processed event.
    TraceDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load(config: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut scenario =
        Scenario::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(seed) = seed {
        scenario.config.sim.seed = seed;
    }
    Ok(scenario)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            trace,
        } => {
            let mut scenario = load(&config, seed)?;
            scenario.config.outputs.trace |= trace;
            let outcome = scenario::run(&scenario)?;
            if let Some(t) = &outcome.tuning {
                log::info!(
                    "knee per bucket {:?}, time_queue {}",
                    t.policy.batch_max,
                    t.policy.time_queue
                );
            }
            if let Some(dir) = out {
                for path in scenario::write_run_artifacts(&outcome, &scenario.config.outputs, &dir)?
                {
                    log::info!("wrote {}", path.display());
                }
            }
            println!("{}", outcome.output.report.to_json());
        }
        Command::Sweep {
            config,
            seed,
            out,
            parallel,
        } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut spec = SweepSpec::from_toml(&text)?;
            if let Some(seed) = seed {
                spec.base.sim.seed = seed;
            }
            let base_dir = config.parent().unwrap_or(Path::new(""));
            let result = scenario::sweep(&spec, base_dir, parallel)?;
            write_or_print(out.as_deref(), &result.to_csv())?;
            if let Some((point, err)) = result.failure {
                bail!("sweep aborted at {point:?}: {err}");
            }
        }
        Command::Tune {
            profile,
            mig,
            bucket_width,
            delta,
            out,
        } => {
            mig.validate()?;
            let tuning = scenario::tune(&profile, &mig, bucket_width, delta)?;
            eprintln!("{tuning}");
            write_or_print(out.as_deref(), &format!("{}\n", tuning.policy.to_json()))?;
        }
        Command::TraceDump { config, seed, out } => {
            let mut scenario = load(&config, seed)?;
            scenario.config.outputs.events = true;
            let outcome = scenario::run(&scenario)?;
            let events = outcome.output.events.unwrap_or_default();
            let mut buf = Vec::new();
            write_event_trace(&mut buf, &events)?;
            write_or_print(out.as_deref(), &String::from_utf8(buf)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIGBATCHSIM_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
