//! Projected gradient descent on the GREEN thresholds, batch and online.

use std::io::Write;

use serde::Serialize;

use crate::arrival::derive_seed;
use crate::engine::{run_sample_path, MetricsReport, SimOptions, Simulator};
use crate::error::{Error, Result};
use crate::ipa::{ipa_gradient, replay_segment, ReplayOptions};
use crate::model::ThetaVector;
use crate::parallel::par_map;
use crate::scenario::Scenario;

/// Seed tag for gradient paths: `[GRAD_TAG, iteration, replication]`.
pub const GRAD_TAG: u64 = 0x6AD;
/// Seed tag for evaluation paths: `[EVAL_TAG, k]`.
pub const EVAL_TAG: u64 = 0xE7A1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Normalization {
    None,
    GradientNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub rho0: f64,
    /// Step exponent: `rho_l = rho0 / l^decay`.
    pub decay: f64,
    pub iterations: usize,
    pub replications: usize,
    /// Online update period, seconds.
    pub window: f64,
    pub normalization: Normalization,
    /// Held-out paths used to score each iterate in batch mode.
    pub eval_paths: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rho0: 5.0,
            decay: 0.6,
            iterations: 20,
            replications: 10,
            window: 1500.0,
            normalization: Normalization::GradientNorm,
            eval_paths: 10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho0 > 0.0) {
            return Err(Error::Config("rho0 must be positive".into()));
        }
        if self.iterations == 0 || self.replications == 0 || self.eval_paths == 0 {
            return Err(Error::Config(
                "iterations, replications and evaluation paths must be at least 1".into(),
            ));
        }
        if !(self.window > 0.0) {
            return Err(Error::Config("window must be positive".into()));
        }
        Ok(())
    }

    pub fn step(&self, l: usize) -> f64 {
        self.rho0 / (l as f64).powf(self.decay)
    }
}

/// One projected step `clip(theta - rho * g)`.
pub fn update_theta(
    theta: &ThetaVector,
    grad: &[f64],
    rho: f64,
    normalization: Normalization,
) -> Result<ThetaVector> {
    if grad.len() != theta.len() {
        return Err(Error::Config(format!(
            "gradient has {} entries, theta {}",
            grad.len(),
            theta.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Domain(format!("non-finite gradient {grad:?}")));
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = match normalization {
        Normalization::GradientNorm if norm > 0.0 => 1.0 / norm,
        _ => 1.0,
    };
    let mut next = theta.clone();
    for (v, g) in next.values.iter_mut().zip(grad) {
        *v = (*v - rho * scale * g).clamp(theta.min, theta.max);
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    /// End of the data window (online) or the path horizon (batch).
    pub t_end: f64,
    pub theta: Vec<f64>,
    pub cost: f64,
    pub wait_artery: Option<f64>,
    pub wait_side: Option<f64>,
    pub wait_overall: Option<f64>,
    pub stop_ratio: Option<f64>,
    pub stop_ratio_reverse: Option<f64>,
    pub grad: Vec<f64>,
    pub step: f64,
}

impl LogRow {
    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    fn from_metrics(iteration: usize, t_end: f64, theta: &ThetaVector, m: &MetricsReport) -> Self {
        Self {
            iteration,
            t_end,
            theta: theta.values.clone(),
            cost: m.cost,
            wait_artery: m.wait_artery,
            wait_side: m.wait_side,
            wait_overall: m.wait_overall,
            stop_ratio: m.stop_ratio,
            stop_ratio_reverse: m.stop_ratio_reverse,
            grad: vec![0.0; theta.len()],
            step: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationLog {
    pub rows: Vec<LogRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl OptimizationLog {
    pub fn first(&self) -> &LogRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &LogRow {
        self.rows.last().expect("non-empty log")
    }

    /// Columns: iteration, t_end, theta_n_d..., cost, waits, stop ratios,
    /// grad_norm, step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.rows.first().map_or(0, |r| r.theta.len());
        let mut header = vec!["iteration".to_string(), "t_end".into()];
        header.extend((0..dim).map(|i| format!("theta_{}_{}", i / 2 + 1, i % 2)));
        header.extend(
            [
                "cost",
                "wait_artery",
                "wait_side",
                "wait_overall",
                "stop_ratio",
                "stop_ratio_reverse",
                "grad_norm",
                "step",
            ]
            .map(String::from),
        );
        w.write_record(&header)?;
        for r in &self.rows {
            let mut row = vec![r.iteration.to_string(), format!("{}", r.t_end)];
            row.extend(r.theta.iter().map(|t| format!("{t}")));
            row.push(format!("{}", r.cost));
            row.extend([
                fmt_opt(r.wait_artery),
                fmt_opt(r.wait_side),
                fmt_opt(r.wait_overall),
                fmt_opt(r.stop_ratio),
                fmt_opt(r.stop_ratio_reverse),
            ]);
            row.push(format!("{}", r.grad_norm()));
            row.push(format!("{}", r.step));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Metrics averaged over the held-out evaluation paths.
pub fn evaluate(scenario: &Scenario, theta: &ThetaVector, paths: usize) -> Result<MetricsReport> {
    let seeds: Vec<u64> = (0..paths as u64)
        .map(|k| derive_seed(scenario.master_seed, &[EVAL_TAG, k]))
        .collect();
    let reports = par_map(&seeds, |&seed| {
        run_sample_path(scenario, theta, seed, SimOptions::default())
            .map(|(_, r)| r)
            .map_err(|e| Error::Path {
                seed,
                source: Box::new(e),
            })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let k = reports.len() as f64;
    let mut out = reports[0].clone();
    out.cost = reports.iter().map(|r| r.cost).sum::<f64>() / k;
    out.wait_artery = mean_opt(reports.iter().map(|r| r.wait_artery));
    out.wait_side = mean_opt(reports.iter().map(|r| r.wait_side));
    out.wait_reverse = mean_opt(reports.iter().map(|r| r.wait_reverse));
    out.wait_overall = mean_opt(reports.iter().map(|r| r.wait_overall));
    out.stop_ratio = mean_opt(reports.iter().map(|r| r.stop_ratio));
    out.stop_ratio_reverse = mean_opt(reports.iter().map(|r| r.stop_ratio_reverse));
    for (q, x) in out.mean_queue.iter_mut().enumerate() {
        *x = reports.iter().map(|r| r.mean_queue[q]).sum::<f64>() / k;
    }
    Ok(out)
}

/// Averages IPA gradients over fresh paths each iteration. Row 0 scores the
/// starting point; row `l` scores the iterate produced by step `l`.
pub fn batch_optimize(
    scenario: &Scenario,
    theta0: &ThetaVector,
    config: &OptimizerConfig,
) -> Result<OptimizationLog> {
    config.validate()?;
    theta0.validate()?;
    let mut theta = theta0.clone();
    let m0 = evaluate(scenario, &theta, config.eval_paths)?;
    let mut rows = vec![LogRow::from_metrics(0, scenario.horizon, &theta, &m0)];
    for l in 1..=config.iterations {
        let seeds: Vec<u64> = (0..config.replications as u64)
            .map(|r| derive_seed(scenario.master_seed, &[GRAD_TAG, l as u64, r]))
            .collect();
        let g = ipa_gradient(scenario, &theta, &seeds)?;
        let rho = config.step(l);
        theta = update_theta(&theta, &g.mean, rho, config.normalization)?;
        let m = evaluate(scenario, &theta, config.eval_paths)?;
        let mut row = LogRow::from_metrics(l, scenario.horizon, &theta, &m);
        row.grad = g.mean;
        row.step = rho;
        rows.push(row);
    }
    Ok(OptimizationLog { rows })
}

/// Number of parameter updates for an online run.
pub fn online_updates(t_total: f64, window: f64) -> usize {
    ((t_total / window).floor() as usize).max(1)
}

/// One continuous path; the gradient of each window's cost drives an update
/// at the window end. Row `j` describes window `j` under the thresholds that
/// were in force during it.
pub fn online_optimize(
    scenario: &Scenario,
    theta0: &ThetaVector,
    config: &OptimizerConfig,
    t_total: f64,
) -> Result<OptimizationLog> {
    config.validate()?;
    theta0.validate()?;
    if !(t_total > 0.0) {
        return Err(Error::Config("total time must be positive".into()));
    }
    let updates = online_updates(t_total, config.window);
    let window = config.window.min(t_total);
    let seed = derive_seed(scenario.master_seed, &[GRAD_TAG, 1, 0]);
    let mut sim = Simulator::new(scenario, theta0, seed, SimOptions::default())?;
    let mut theta = theta0.clone();
    let replay = ReplayOptions::new(scenario.rate_mode);
    let mut rows = Vec::with_capacity(updates);
    for j in 1..=updates {
        let t_end = j as f64 * window;
        let path_err = |e| Error::Path {
            seed,
            source: Box::new(e),
        };
        sim.run_until(t_end).map_err(path_err)?;
        let (segment, totals) = sim.take_segment();
        let out = replay_segment(&scenario.model, &segment, &replay).map_err(path_err)?;
        let m = MetricsReport::from_totals(&scenario.model, &totals, segment.duration());
        let rho = config.step(j);
        let mut row = LogRow::from_metrics(j, t_end, &theta, &m);
        row.grad = out.cost.grad.clone();
        row.step = rho;
        rows.push(row);
        theta = update_theta(&theta, &out.cost.grad, rho, config.normalization)?;
        sim.set_theta(&theta)?;
    }
    Ok(OptimizationLog { rows })
}
