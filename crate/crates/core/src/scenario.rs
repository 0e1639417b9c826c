//! Scenario files: JSON tree parsed strictly, then checked against the model
//! invariants. Intersections are numbered from 1 in files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arrival::ArrivalProcess;
use crate::error::{Error, Result};
use crate::model::{ArteryModel, Dir, QueueId, ThetaVector};

pub const DEFAULT_RATE_WINDOW: f64 = 20.0;
pub const DEFAULT_BOUNDS: [f64; 2] = [5.0, 120.0];
pub const DEFAULT_MEAN_ON: f64 = 10.0;
pub const DEFAULT_MEAN_OFF: f64 = 10.0;

/// Source of the arrival rates used by the derivative engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    /// Exact fluid rates from the engine.
    ExactFluid,
    /// Rates estimated from arrival volume in a sliding window.
    WindowedEstimate { window: f64 },
}

impl RateMode {
    pub fn parse(s: &str, window: f64) -> Result<RateMode> {
        match s {
            "exact-fluid" => Ok(RateMode::ExactFluid),
            "windowed-estimate" => Ok(RateMode::WindowedEstimate { window }),
            other => Err(Error::Config(format!(
                "unknown rate mode `{other}` (expected exact-fluid or windowed-estimate)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RateMode::ExactFluid => "exact-fluid",
            RateMode::WindowedEstimate { .. } => "windowed-estimate",
        }
    }
}

/// Step change of a queue's mean arrival rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub time: f64,
    pub queue: QueueId,
    pub mean_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub model: ArteryModel,
    pub arrivals: Vec<(QueueId, ArrivalProcess)>,
    pub theta0: ThetaVector,
    pub horizon: f64,
    pub master_seed: u64,
    pub perturbations: Vec<Perturbation>,
    pub rate_mode: RateMode,
}

impl Scenario {
    /// A scenario with no demand; add sources with [`Scenario::with_arrival`].
    pub fn new(model: ArteryModel, theta0: ThetaVector, horizon: f64) -> Self {
        Self {
            name: "unnamed".into(),
            model,
            arrivals: Vec::new(),
            theta0,
            horizon,
            master_seed: 0,
            perturbations: Vec::new(),
            rate_mode: RateMode::ExactFluid,
        }
    }

    pub fn with_arrival(mut self, queue: QueueId, process: ArrivalProcess) -> Self {
        self.arrivals.retain(|(q, _)| *q != queue);
        self.arrivals.push((queue, process));
        self.arrivals.sort_by_key(|(q, _)| *q);
        self
    }

    pub fn with_perturbation(mut self, p: Perturbation) -> Self {
        self.perturbations.push(p);
        self.perturbations
            .sort_by(|a, b| a.time.total_cmp(&b.time));
        self
    }

    pub fn arrival(&self, queue: QueueId) -> Option<&ArrivalProcess> {
        self.arrivals.iter().find(|(q, _)| *q == queue).map(|(_, p)| p)
    }

    pub fn arrival_mut(&mut self, queue: QueueId) -> Option<&mut ArrivalProcess> {
        self.arrivals
            .iter_mut()
            .find(|(q, _)| *q == queue)
            .map(|(_, p)| p)
    }

    pub fn validate(&self) -> Result<()> {
        let inv = |invariant: &'static str, detail: String| Error::Invariant {
            path: self.name.clone(),
            invariant,
            detail,
        };
        self.model.validate().map_err(|e| inv("model", e.to_string()))?;
        self.theta0.validate().map_err(|e| inv("theta0", e.to_string()))?;
        if self.theta0.intersections() != self.model.n {
            return Err(inv(
                "theta0 has one pair per intersection",
                format!("{} pairs for N = {}", self.theta0.intersections(), self.model.n),
            ));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(inv("horizon > 0", format!("horizon = {}", self.horizon)));
        }
        for (k, (q, p)) in self.arrivals.iter().enumerate() {
            if self.model.queue_index(*q).is_none() {
                return Err(inv("arrival queue exists", format!("arrivals[{k}]: {q}")));
            }
            if !self.model.is_exogenous(*q) {
                return Err(inv(
                    "only exogenous queues have arrival processes",
                    format!("arrivals[{k}]: {q} is fed by an upstream link"),
                ));
            }
            p.validate()
                .map_err(|e| inv("arrival process", format!("arrivals[{k}]: {e}")))?;
            if self.arrivals[..k].iter().any(|(other, _)| other == q) {
                return Err(inv("one process per queue", format!("arrivals[{k}]: {q}")));
            }
        }
        for (k, p) in self.perturbations.iter().enumerate() {
            if !(p.time >= 0.0 && p.time <= self.horizon) {
                return Err(inv(
                    "perturbation times within horizon",
                    format!("perturbations[{k}].time = {}", p.time),
                ));
            }
            if !(p.mean_rate >= 0.0) {
                return Err(inv(
                    "rates >= 0",
                    format!("perturbations[{k}].mean_rate = {}", p.mean_rate),
                ));
            }
            if self.arrival(p.queue).is_none() {
                return Err(inv(
                    "perturbed queue has an arrival process",
                    format!("perturbations[{k}]: {}", p.queue),
                ));
            }
        }
        if let RateMode::WindowedEstimate { window } = self.rate_mode {
            if !(window > 0.0) {
                return Err(inv("rate window > 0", format!("rate_window = {window}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n: usize,
    #[serde(default)]
    link_length: Vec<f64>,
    #[serde(default)]
    link_speed: Vec<f64>,
    vehicle_length: f64,
    h: f64,
    #[serde(default)]
    h_override: Vec<[Option<f64>; 3]>,
    #[serde(default)]
    weights: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    bidirectional: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrivalFile {
    n: usize,
    dir: Dir,
    mean_rate: f64,
    #[serde(default = "default_on")]
    mean_on: f64,
    #[serde(default = "default_off")]
    mean_off: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PerturbationFile {
    time: f64,
    n: usize,
    dir: Dir,
    mean_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    model: ModelFile,
    #[serde(default)]
    arrivals: Vec<ArrivalFile>,
    theta0: Vec<[f64; 2]>,
    #[serde(default)]
    bounds: Option<[f64; 2]>,
    horizon: f64,
    #[serde(default)]
    master_seed: u64,
    #[serde(default)]
    perturbations: Vec<PerturbationFile>,
    #[serde(default = "default_rate_mode")]
    rate_mode: String,
    #[serde(default = "default_window")]
    rate_window: f64,
}

fn default_on() -> f64 {
    DEFAULT_MEAN_ON
}
fn default_off() -> f64 {
    DEFAULT_MEAN_OFF
}
fn default_rate_mode() -> String {
    "exact-fluid".into()
}
fn default_window() -> f64 {
    DEFAULT_RATE_WINDOW
}

fn queue_from_file(n: usize, dir: Dir, path: &str, field: String) -> Result<QueueId> {
    if n == 0 {
        return Err(Error::Invariant {
            path: path.into(),
            invariant: "intersections are numbered from 1",
            detail: format!("{field}.n = 0"),
        });
    }
    Ok(QueueId::new(n - 1, dir))
}

/// Parses and validates scenario text; `path` is used in diagnostics only.
pub fn parse_scenario_str(text: &str, path: &str) -> Result<Scenario> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| Error::Schema {
        path: path.into(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let inv = |invariant: &'static str, detail: String| Error::Invariant {
        path: path.into(),
        invariant,
        detail,
    };
    let m = file.model;
    for (k, &len) in m.link_length.iter().enumerate() {
        if !(len > 0.0) {
            return Err(inv("L_n > 0", format!("model.link_length[{k}] = {len}")));
        }
    }
    for (k, &v) in m.link_speed.iter().enumerate() {
        if !(v > 0.0) {
            return Err(inv("v_n > 0", format!("model.link_speed[{k}] = {v}")));
        }
    }
    if !(m.vehicle_length > 0.0) {
        return Err(inv("l > 0", format!("model.vehicle_length = {}", m.vehicle_length)));
    }
    if !(m.h > 0.0) {
        return Err(inv("H > 0", format!("model.h = {}", m.h)));
    }
    let omega = match m.weights {
        Some(w) => w,
        None => vec![[1.0; 3]; m.n],
    };
    if let Some((k, _)) = omega
        .iter()
        .enumerate()
        .find(|(_, row)| row.iter().any(|w| !(*w >= 0.0)))
    {
        return Err(inv("omega >= 0", format!("model.weights[{k}]")));
    }
    let h_override = if m.h_override.is_empty() {
        vec![[None; 3]; m.n]
    } else {
        m.h_override
    };
    let model = ArteryModel {
        n: m.n,
        link_length: m.link_length,
        link_speed: m.link_speed,
        vehicle_length: m.vehicle_length,
        h: m.h,
        h_override,
        omega,
        bidirectional: m.bidirectional,
    };
    let [lo, hi] = file.bounds.unwrap_or(DEFAULT_BOUNDS);
    let pairs: Vec<(f64, f64)> = file.theta0.iter().map(|p| (p[0], p[1])).collect();
    let theta0 = ThetaVector {
        values: pairs.iter().flat_map(|&(a, s)| [a, s]).collect(),
        min: lo,
        max: hi,
    };
    let mut arrivals = Vec::new();
    for (k, a) in file.arrivals.iter().enumerate() {
        let q = queue_from_file(a.n, a.dir, path, format!("arrivals[{k}]"))?;
        let process = if a.mean_off == 0.0 {
            ArrivalProcess::constant(a.mean_rate)
        } else {
            ArrivalProcess::on_off(a.mean_rate, a.mean_on, a.mean_off)
        };
        arrivals.push((q, process));
    }
    let mut perturbations = Vec::new();
    for (k, p) in file.perturbations.iter().enumerate() {
        perturbations.push(Perturbation {
            time: p.time,
            queue: queue_from_file(p.n, p.dir, path, format!("perturbations[{k}]"))?,
            mean_rate: p.mean_rate,
        });
    }
    perturbations.sort_by(|a, b| a.time.total_cmp(&b.time));
    let rate_mode = RateMode::parse(&file.rate_mode, file.rate_window)
        .map_err(|e| inv("rate_mode", e.to_string()))?;
    let scenario = Scenario {
        name: file.name,
        model,
        arrivals,
        theta0,
        horizon: file.horizon,
        master_seed: file.master_seed,
        perturbations,
        rate_mode,
    };
    scenario.validate().map_err(|e| match e {
        Error::Invariant {
            invariant, detail, ..
        } => Error::Invariant {
            path: path.into(),
            invariant,
            detail,
        },
        other => other,
    })?;
    Ok(scenario)
}

pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario_str(&text, &path.display().to_string())
}

/// The three-intersection setup used throughout the experiments, with
/// per-intersection side demand `side` and artery entry demand `artery`.
pub fn paper_3x() -> Scenario {
    let model = ArteryModel::uniform(3, 200.0, 10.0, 5.0, 1.3);
    let theta0 =
        ThetaVector::from_pairs(&[(35.0, 26.0), (30.0, 20.0), (21.0, 31.0)], 5.0, 120.0)
            .expect("valid theta");
    let mut s = Scenario::new(model, theta0, 2000.0);
    s.name = "paper-3x".into();
    s.master_seed = 2024;
    for (n, rate) in [0.1, 0.15, 0.1].into_iter().enumerate() {
        s = s.with_arrival(
            QueueId::new(n, Dir::Side),
            ArrivalProcess::on_off(rate, DEFAULT_MEAN_ON, DEFAULT_MEAN_OFF),
        );
    }
    s.with_arrival(
        QueueId::new(0, Dir::Artery),
        ArrivalProcess::on_off(0.25, DEFAULT_MEAN_ON, DEFAULT_MEAN_OFF),
    )
}
