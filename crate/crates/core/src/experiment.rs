//! Experiment drivers behind the CLI verbs. Each writes fixed-order CSVs and
//! a manifest beside every CSV so a run can be repeated from its artifacts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::arrival::ArrivalProcess;
use crate::engine::{run_sample_path, MetricsReport, SimOptions, Simulator};
use crate::error::{Error, Result};
use crate::fd::{finite_difference_gradient, FdConfig};
use crate::ipa::trace::Hop;
use crate::ipa::{ipa_gradient, propagation_trace, replay_segment, ReplayOptions};
use crate::model::{ArteryModel, Dir, QueueId, ThetaVector};
use crate::optimizer::{batch_optimize, online_optimize, OptimizationLog, OptimizerConfig};
use crate::scenario::{Scenario, DEFAULT_MEAN_OFF, DEFAULT_MEAN_ON};

/// Reverse-artery demands of the unbalanced bidirectional sweep.
pub const REVERSE_SWEEP: [f64; 5] = [0.0, 0.05, 0.15, 0.25, 0.35];

/// Run description written next to each CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub scenario: String,
    pub seed: u64,
    pub flags: BTreeMap<String, String>,
    pub output: String,
}

impl Manifest {
    pub fn new(command: &str, scenario: &Scenario, seed: u64) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            scenario: scenario.name.clone(),
            seed,
            flags: BTreeMap::new(),
            output: String::new(),
        }
    }

    pub fn flag(mut self, key: &str, value: impl ToString) -> Self {
        self.flags.insert(key.into(), value.to_string());
        self
    }
}

/// `out/events.csv` -> `out/events.manifest.json`.
pub fn manifest_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.manifest.json"))
}

/// Creates `path`, lets `fill` write the CSV body, then writes the manifest.
pub fn write_csv_artifact<F>(path: &Path, manifest: &Manifest, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    fill(&mut w)?;
    w.flush()?;
    let mut m = manifest.clone();
    m.output = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(manifest_path(path), text + "\n")?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn reduction(initial: Option<f64>, last: Option<f64>) -> Option<f64> {
    match (initial, last) {
        (Some(a), Some(b)) if a > 0.0 => Some(100.0 * (a - b) / a),
        _ => None,
    }
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateResult {
    pub metrics: MetricsReport,
    pub events: usize,
}

/// One sample path. With `events_csv` set the logged events are written there.
pub fn cmd_simulate(
    scenario: &Scenario,
    theta: &ThetaVector,
    seed: u64,
    events_csv: Option<(&Path, &Manifest)>,
) -> Result<SimulateResult> {
    let options = if events_csv.is_some() {
        SimOptions::with_states()
    } else {
        SimOptions::with_events()
    };
    let (traj, metrics) = run_sample_path(scenario, theta, seed, options)?;
    if let Some((path, manifest)) = events_csv {
        write_csv_artifact(path, manifest, |w| traj.write_events_csv(w))?;
    }
    Ok(SimulateResult {
        metrics,
        events: traj.events.len(),
    })
}

// ---------------------------------------------------------------- optimize

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizeMode {
    Batch,
    /// One continuous path over the scenario horizon.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub mode: OptimizeMode,
    pub reverse_rate: Option<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub cost_reduction_pct: f64,
    /// Mean cost over the last quarter of the log.
    pub final_quartile_cost: f64,
    pub initial_stop_ratio: Option<f64>,
    pub final_stop_ratio: Option<f64>,
    pub stop_ratio_reduction_pct: Option<f64>,
    pub initial_stop_ratio_reverse: Option<f64>,
    pub final_stop_ratio_reverse: Option<f64>,
    pub stop_ratio_reverse_reduction_pct: Option<f64>,
    pub theta_opt: Vec<f64>,
    pub rows: usize,
    pub wall_seconds: f64,
}

impl ExperimentReport {
    pub fn from_log(scenario: &Scenario, mode: OptimizeMode, log: &OptimizationLog, wall_seconds: f64) -> Self {
        let (a, b) = (log.first(), log.last());
        let quarter = (log.rows.len() / 4).max(1);
        let tail = &log.rows[log.rows.len() - quarter..];
        Self {
            scenario: scenario.name.clone(),
            mode,
            reverse_rate: None,
            initial_cost: a.cost,
            final_cost: b.cost,
            cost_reduction_pct: reduction(Some(a.cost), Some(b.cost)).unwrap_or(0.0),
            final_quartile_cost: tail.iter().map(|r| r.cost).sum::<f64>() / tail.len() as f64,
            initial_stop_ratio: a.stop_ratio,
            final_stop_ratio: b.stop_ratio,
            stop_ratio_reduction_pct: reduction(a.stop_ratio, b.stop_ratio),
            initial_stop_ratio_reverse: a.stop_ratio_reverse,
            final_stop_ratio_reverse: b.stop_ratio_reverse,
            stop_ratio_reverse_reduction_pct: reduction(a.stop_ratio_reverse, b.stop_ratio_reverse),
            theta_opt: b.theta.clone(),
            rows: log.rows.len(),
            wall_seconds,
        }
    }
}

pub fn cmd_optimize(
    scenario: &Scenario,
    config: &OptimizerConfig,
    mode: OptimizeMode,
) -> Result<(ExperimentReport, OptimizationLog)> {
    let start = Instant::now();
    let log = match mode {
        OptimizeMode::Batch => batch_optimize(scenario, &scenario.theta0, config)?,
        OptimizeMode::Online => online_optimize(scenario, &scenario.theta0, config, scenario.horizon)?,
    };
    let report = ExperimentReport::from_log(scenario, mode, &log, start.elapsed().as_secs_f64());
    Ok((report, log))
}

/// The scenario made bidirectional with reverse-artery demand `rate` entering
/// at the last intersection (no source when `rate` is zero).
pub fn with_reverse_demand(scenario: &Scenario, rate: f64) -> Result<Scenario> {
    let mut s = scenario.clone();
    s.model.bidirectional = true;
    let head = QueueId::new(s.model.n - 1, Dir::Reverse);
    s.arrivals.retain(|(q, _)| *q != head);
    if rate > 0.0 {
        let like = s
            .arrivals
            .iter()
            .find(|(q, _)| q.dir == Dir::Artery)
            .map(|(_, p)| (p.mean_on, p.mean_off))
            .unwrap_or((DEFAULT_MEAN_ON, DEFAULT_MEAN_OFF));
        let process = if like.1 == 0.0 {
            ArrivalProcess::constant(rate)
        } else {
            ArrivalProcess::on_off(rate, like.0, like.1)
        };
        s = s.with_arrival(head, process);
    }
    s.name = format!("{}-reverse-{rate}", scenario.name);
    s.validate()?;
    Ok(s)
}

/// Batch optimization once per reverse demand level.
pub fn reverse_sweep(scenario: &Scenario, config: &OptimizerConfig, rates: &[f64]) -> Result<Vec<ExperimentReport>> {
    rates
        .iter()
        .map(|&rate| {
            let s = with_reverse_demand(scenario, rate)?;
            let (mut report, _) = cmd_optimize(&s, config, OptimizeMode::Batch)?;
            report.reverse_rate = Some(rate);
            Ok(report)
        })
        .collect()
}

/// Columns: reverse_rate, initial_cost, final_cost, cost_reduction_pct,
/// stop_ratio_reduction_pct, stop_ratio_reverse_reduction_pct, theta_opt.
pub fn write_sweep_csv<W: Write>(reports: &[ExperimentReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "reverse_rate",
        "initial_cost",
        "final_cost",
        "cost_reduction_pct",
        "stop_ratio_reduction_pct",
        "stop_ratio_reverse_reduction_pct",
        "theta_opt",
    ])?;
    for r in reports {
        let theta: Vec<String> = r.theta_opt.iter().map(|t| format!("{t}")).collect();
        w.write_record([
            opt(r.reverse_rate),
            format!("{}", r.initial_cost),
            format!("{}", r.final_cost),
            format!("{}", r.cost_reduction_pct),
            opt(r.stop_ratio_reduction_pct),
            opt(r.stop_ratio_reverse_reduction_pct),
            theta.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRow {
    /// 1-based parameter index.
    pub coordinate: usize,
    pub ipa: f64,
    pub ipa_std_error: f64,
    pub fd: f64,
    pub fd_std_error: f64,
    pub order_change: bool,
}

impl ValidationRow {
    pub fn signs_agree(&self) -> bool {
        self.ipa.signum() == self.fd.signum() || (self.ipa == 0.0 && self.fd == 0.0)
    }

    pub fn relative_gap(&self) -> f64 {
        let scale = self.fd.abs().max(1e-12);
        (self.ipa - self.fd).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub rows: Vec<ValidationRow>,
    pub sign_agreements: usize,
    pub max_relative_gap: f64,
}

pub fn cmd_validate(scenario: &Scenario, theta: &ThetaVector, config: &FdConfig) -> Result<ValidationReport> {
    config.validate()?;
    let g = ipa_gradient(scenario, theta, &config.seeds)?;
    let se = g.standard_error();
    let mut rows = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let fd = finite_difference_gradient(scenario, theta, i, config)?;
        rows.push(ValidationRow {
            coordinate: i + 1,
            ipa: g.mean[i],
            ipa_std_error: se[i],
            fd: fd.mean,
            fd_std_error: fd.std_error,
            order_change: fd.order_changed(),
        });
    }
    Ok(ValidationReport {
        sign_agreements: rows.iter().filter(|r| r.signs_agree()).count(),
        max_relative_gap: rows.iter().map(ValidationRow::relative_gap).fold(0.0, f64::max),
        rows,
    })
}

/// Columns: coordinate, ipa, fd, spread, order_change.
pub fn write_validation_csv<W: Write>(report: &ValidationReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["coordinate", "ipa", "fd", "spread", "order_change"])?;
    for r in &report.rows {
        w.write_record([
            r.coordinate.to_string(),
            format!("{}", r.ipa),
            format!("{}", r.fd),
            format!("{}", r.fd_std_error),
            (r.order_change as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ------------------------------------------------------------- scalability

/// CPU time consumed by the calling thread.
pub fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleRow {
    pub n: usize,
    pub events: usize,
    pub ipa_cpu_seconds: f64,
    pub sim_cpu_seconds: f64,
}

impl ScaleRow {
    pub fn ipa_seconds_per_event(&self) -> f64 {
        self.ipa_cpu_seconds / self.events.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares; `None` with fewer than two distinct x values.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let k = xs.len() as f64;
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some(LinearFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalabilityReport {
    pub rows: Vec<ScaleRow>,
    /// IPA CPU seconds against N.
    pub fit: Option<LinearFit>,
}

/// A chain of `n` intersections repeating the template's per-intersection
/// demand and thresholds, with the template's first link geometry.
pub fn chain_scenario(template: &Scenario, n: usize) -> Result<Scenario> {
    if n == 0 {
        return Err(Error::Config("N must be at least 1".into()));
    }
    let tm = &template.model;
    let length = tm.link_length.first().copied().unwrap_or(200.0);
    let speed = tm.link_speed.first().copied().unwrap_or(10.0);
    let model = ArteryModel::uniform(n, length, speed, tm.vehicle_length, tm.h).with_bidirectional(tm.bidirectional);
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let j = k % template.theta0.intersections();
            (template.theta0.get(j, 0), template.theta0.get(j, 1))
        })
        .collect();
    let theta = ThetaVector::from_pairs(&pairs, template.theta0.min, template.theta0.max)?;
    let mut s = Scenario::new(model, theta, template.horizon);
    s.name = format!("{}-chain-{n}", template.name);
    s.master_seed = template.master_seed;
    s.rate_mode = template.rate_mode;
    let sides: Vec<ArrivalProcess> = template
        .arrivals
        .iter()
        .filter(|(q, _)| q.dir == Dir::Side)
        .map(|(_, p)| *p)
        .collect();
    if !sides.is_empty() {
        for k in 0..n {
            s = s.with_arrival(QueueId::new(k, Dir::Side), sides[k % sides.len()]);
        }
    }
    if let Some(p) = template.arrival(QueueId::new(0, Dir::Artery)) {
        s = s.with_arrival(QueueId::new(0, Dir::Artery), *p);
    }
    if tm.bidirectional {
        if let Some(p) = template.arrival(QueueId::new(tm.n - 1, Dir::Reverse)) {
            s = s.with_arrival(QueueId::new(n - 1, Dir::Reverse), *p);
        }
    }
    s.validate()?;
    Ok(s)
}

/// Times the engine and the derivative replay separately, on the calling
/// thread, for each chain length. Each measurement is the minimum over
/// `repeats` runs.
pub fn cmd_scalability(ns: &[usize], template: &Scenario, seed: u64, repeats: usize) -> Result<ScalabilityReport> {
    if ns.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!("chain sizes {ns:?} must be ascending")));
    }
    let repeats = repeats.max(1);
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let s = chain_scenario(template, n)?;
        let replay = ReplayOptions::new(s.rate_mode);
        let mut sim_best = f64::INFINITY;
        let mut ipa_best = f64::INFINITY;
        let mut events = 0;
        for _ in 0..repeats {
            let t0 = thread_cpu_seconds();
            let traj = Simulator::new(&s, &s.theta0, seed, SimOptions::default())?.finish(s.horizon)?;
            let t1 = thread_cpu_seconds();
            let out = replay_segment(&s.model, &traj.segment, &replay)?;
            let t2 = thread_cpu_seconds();
            std::hint::black_box(&out);
            sim_best = sim_best.min(t1 - t0);
            ipa_best = ipa_best.min(t2 - t1);
            events = traj.segment.records.len();
        }
        rows.push(ScaleRow {
            n,
            events,
            ipa_cpu_seconds: ipa_best,
            sim_cpu_seconds: sim_best,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.ipa_cpu_seconds).collect();
    Ok(ScalabilityReport {
        fit: linear_fit(&xs, &ys),
        rows,
    })
}

/// Columns: n, events, ipa_cpu_seconds, sim_cpu_seconds.
pub fn write_scalability_csv<W: Write>(report: &ScalabilityReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "events", "ipa_cpu_seconds", "sim_cpu_seconds"])?;
    for r in &report.rows {
        w.write_record([
            r.n.to_string(),
            r.events.to_string(),
            format!("{}", r.ipa_cpu_seconds),
            format!("{}", r.sim_cpu_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ------------------------------------------------------------------- trace

pub fn cmd_trace(scenario: &Scenario, theta: &ThetaVector, seed: u64, i: usize) -> Result<Vec<Hop>> {
    let (traj, _) = run_sample_path(scenario, theta, seed, SimOptions::default())?;
    propagation_trace(&scenario.model, &traj, i)
}

/// Columns: t, kind, n (1-based), d, link (1-based), x_prime_before,
/// x_prime_after, tau_prime.
pub fn write_trace_csv<W: Write>(hops: &[Hop], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "kind", "n", "d", "link", "x_prime_before", "x_prime_after", "tau_prime"])?;
    for h in hops {
        w.write_record([
            format!("{}", h.t),
            h.kind.label().to_string(),
            (h.queue.n + 1).to_string(),
            h.queue.dir.code().to_string(),
            h.link.map(|k| (k + 1).to_string()).unwrap_or_default(),
            format!("{}", h.x_prime_before),
            format!("{}", h.x_prime_after),
            format!("{}", h.tau_prime),
        ])?;
    }
    w.flush()?;
    Ok(())
}
