use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use greenwave::experiment::{
    cmd_optimize, cmd_scalability, cmd_simulate, cmd_trace, cmd_validate, reverse_sweep, write_csv_artifact,
    write_json, write_scalability_csv, write_sweep_csv, write_trace_csv, write_validation_csv, Manifest,
    OptimizeMode, REVERSE_SWEEP,
};
use greenwave::fd::FdConfig;
use greenwave::optimizer::OptimizerConfig;
use greenwave::scenario::{paper_3x, parse_scenario, RateMode, Scenario, DEFAULT_RATE_WINDOW};
use greenwave::Error;

#[derive(Parser)]
#[command(name = "greenwave", version, about = "Fluid artery simulator with IPA-driven signal tuning")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file; the bundled three-intersection setup when omitted.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSVs, manifests and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Source of arrival rates for the derivative replay.
    #[arg(long, global = true, value_enum)]
    rate_mode: Option<RateModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RateModeArg {
    ExactFluid,
    WindowedEstimate,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Batch,
    Online,
    /// Batch runs over the reverse-artery demand levels.
    Sweep,
}

#[derive(Subcommand)]
enum Verb {
    /// Run one sample path and report its metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write the event log as events.csv.
        #[arg(long)]
        emit_events: bool,
    },
    /// Tune the GREEN thresholds by gradient descent.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "batch")]
        mode: ModeArg,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
        #[arg(long, default_value_t = 10)]
        replications: usize,
        /// Online update period in seconds.
        #[arg(long, default_value_t = 1500.0)]
        window: f64,
    },
    /// Compare IPA against common-random-number finite differences.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Number of common seeds.
        #[arg(long, default_value_t = 50)]
        replications: usize,
        /// Finite-difference step in seconds.
        #[arg(long, default_value_t = 0.5)]
        fd_step: f64,
    },
    /// Time the engine and the replay on growing chains.
    Scalability {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "3,5,10,20")]
        ns: Vec<usize>,
        /// Timing repeats per chain length; the minimum is kept.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Show how a perturbation of one threshold travels along the artery.
    Trace {
        #[command(flatten)]
        common: Common,
        /// 1-based parameter index (2n-1 artery, 2n side).
        #[arg(long, default_value_t = 1)]
        param: usize,
    },
}

fn load(common: &Common) -> anyhow::Result<(Scenario, u64, String)> {
    let (mut s, source) = match &common.scenario {
        Some(p) => (
            parse_scenario(p).with_context(|| format!("loading {}", p.display()))?,
            p.display().to_string(),
        ),
        None => (paper_3x(), "builtin:paper-3x".to_string()),
    };
    if let Some(seed) = common.seed {
        s.master_seed = seed;
    }
    if let Some(mode) = common.rate_mode {
        let window = match s.rate_mode {
            RateMode::WindowedEstimate { window } => window,
            RateMode::ExactFluid => DEFAULT_RATE_WINDOW,
        };
        s.rate_mode = match mode {
            RateModeArg::ExactFluid => RateMode::ExactFluid,
            RateModeArg::WindowedEstimate => RateMode::WindowedEstimate { window },
        };
    }
    let seed = s.master_seed;
    Ok((s, seed, source))
}

fn manifest(command: &str, s: &Scenario, seed: u64, source: &str) -> Manifest {
    Manifest::new(command, s, seed)
        .flag("scenario", source)
        .flag("rate-mode", s.rate_mode.label())
}

fn csv_path(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.verb {
        Verb::Simulate { common, emit_events } => {
            let (s, seed, source) = load(&common)?;
            let m = manifest("simulate", &s, seed, &source).flag("emit-events", emit_events);
            let path = csv_path(&common.out, "events.csv");
            let r = cmd_simulate(&s, &s.theta0, seed, emit_events.then_some((path.as_path(), &m)))?;
            write_json(&common.out.join("metrics.json"), &r)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Verb::Optimize {
            common,
            mode,
            iterations,
            replications,
            window,
        } => {
            let (s, seed, source) = load(&common)?;
            let config = OptimizerConfig {
                iterations,
                replications,
                window,
                ..OptimizerConfig::default()
            };
            let m = manifest("optimize", &s, seed, &source)
                .flag("iterations", iterations)
                .flag("replications", replications)
                .flag("window", window);
            match mode {
                ModeArg::Sweep => {
                    let reports = reverse_sweep(&s, &config, &REVERSE_SWEEP)?;
                    write_csv_artifact(&csv_path(&common.out, "sweep.csv"), &m.flag("mode", "sweep"), |w| {
                        write_sweep_csv(&reports, w)
                    })?;
                    write_json(&common.out.join("report.json"), &reports)?;
                    println!("{}", serde_json::to_string_pretty(&reports)?);
                }
                ModeArg::Batch | ModeArg::Online => {
                    let mode = if matches!(mode, ModeArg::Batch) {
                        OptimizeMode::Batch
                    } else {
                        OptimizeMode::Online
                    };
                    let label = if mode == OptimizeMode::Batch { "batch" } else { "online" };
                    let (report, log) = cmd_optimize(&s, &config, mode)?;
                    write_csv_artifact(&csv_path(&common.out, "optimization.csv"), &m.flag("mode", label), |w| {
                        log.write_csv(w)
                    })?;
                    write_json(&common.out.join("report.json"), &report)?;
                    println!("{}", serde_json::to_string_pretty(&report)?);
                }
            }
        }
        Verb::Validate {
            common,
            replications,
            fd_step,
        } => {
            let (s, seed, source) = load(&common)?;
            if replications == 0 {
                bail!("--replications must be at least 1");
            }
            let seeds: Vec<u64> = (0..replications as u64).map(|k| seed.wrapping_add(k)).collect();
            let config = FdConfig::central(fd_step, seeds);
            let report = cmd_validate(&s, &s.theta0, &config)?;
            let m = manifest("validate", &s, seed, &source)
                .flag("replications", replications)
                .flag("fd-step", fd_step);
            write_csv_artifact(&csv_path(&common.out, "validation.csv"), &m, |w| {
                write_validation_csv(&report, w)
            })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Verb::Scalability { common, ns, repeats } => {
            let (s, seed, source) = load(&common)?;
            let report = cmd_scalability(&ns, &s, seed, repeats)?;
            let ns_text: Vec<String> = ns.iter().map(|n| n.to_string()).collect();
            let m = manifest("scalability", &s, seed, &source)
                .flag("ns", ns_text.join(","))
                .flag("repeats", repeats);
            write_csv_artifact(&csv_path(&common.out, "scalability.csv"), &m, |w| {
                write_scalability_csv(&report, w)
            })?;
            write_json(&common.out.join("scalability.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Verb::Trace { common, param } => {
            let (s, seed, source) = load(&common)?;
            if param == 0 || param > s.model.dim() {
                bail!("--param must be in 1..={}", s.model.dim());
            }
            let hops = cmd_trace(&s, &s.theta0, seed, param - 1)?;
            let m = manifest("trace", &s, seed, &source).flag("param", param);
            write_csv_artifact(&csv_path(&common.out, "trace.csv"), &m, |w| write_trace_csv(&hops, w))?;
            for h in &hops {
                println!("{h}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let assumption = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<Error>(),
                    Some(Error::Assumption(_) | Error::Blocking { .. } | Error::Degenerate { .. })
                )
            });
            if assumption {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
