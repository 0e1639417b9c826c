//! Infinitesimal perturbation analysis over recorded events.
//!
//! The replay walks the event records of a segment once, keeping `x'` per
//! queue, the derivative of the last switch time per intersection and the
//! derivative of every front still on a link. Derivatives only change at
//! events, so the cost gradient is a sum of constant pieces per NEP.

pub mod cost;
pub mod trace;

use std::collections::VecDeque;

use serde::Serialize;

use crate::arrival::{estimate_arrival_rate_after, integrate_steps, step_value};
use crate::engine::{
    Cause, EventRecord, QueueEffect, Segment, SimOptions, Simulator, Trajectory, Transition,
};
use crate::error::{Error, Result};
use crate::model::{ArteryModel, Link, QueueId, ThetaVector};
use crate::parallel::par_map;
use crate::scenario::{RateMode, Scenario};
use crate::sparse::SparseGrad;

pub use cost::{accumulate_cost_derivative, CostAccumulator, NepRecord};
pub use trace::{DerivRow, Hop, HopKind};

/// Relative size below which the post-E derivative counts as zero.
const RESET_TOL: f64 = 1e-9;
/// Smallest admissible denominator in an event-time derivative.
const DENOM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DerivState {
    pub x: Vec<SparseGrad>,
    /// Derivative of the most recent switch time per intersection.
    pub last_switch: Vec<SparseGrad>,
    /// Departure-time derivatives of the fronts on each link, oldest first.
    pub fronts: Vec<VecDeque<SparseGrad>>,
}

impl DerivState {
    /// All derivatives zero; fronts already in flight carry zero.
    pub fn new(queues: usize, intersections: usize, in_flight: &[usize]) -> Self {
        Self {
            x: vec![SparseGrad::zero(); queues],
            last_switch: vec![SparseGrad::zero(); intersections],
            fronts: in_flight
                .iter()
                .map(|&k| std::iter::repeat_with(SparseGrad::zero).take(k).collect())
                .collect(),
        }
    }
}

/// Arrival rates used by the state-derivative updates at one queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalRates {
    pub alpha_pre: f64,
    pub alpha_post: f64,
}

impl LocalRates {
    pub fn exact(effect: &QueueEffect) -> Self {
        Self {
            alpha_pre: effect.alpha_pre,
            alpha_post: effect.alpha_post,
        }
    }
}

fn effect_of(record: &EventRecord, queue: usize) -> Result<&QueueEffect> {
    record
        .effects
        .iter()
        .find(|e| e.queue == queue)
        .ok_or_else(|| Error::Internal(format!("event at {} lacks its own queue effect", record.tau)))
}

/// Derivative of the event time with respect to every parameter.
pub fn event_time_derivative(
    record: &EventRecord,
    deriv: &DerivState,
    links: &[Link],
    vehicle_length: f64,
) -> Result<SparseGrad> {
    match record.cause {
        Cause::Exogenous { .. } => Ok(SparseGrad::zero()),
        Cause::Switch { n, ending_phase } => {
            let mut tp = deriv.last_switch[n].clone();
            tp.add_unit(ThetaVector::index(n, ending_phase), 1.0);
            Ok(tp)
        }
        Cause::Empty { queue } => {
            let e = effect_of(record, queue)?;
            let denom = e.alpha_pre - e.beta_pre;
            if denom.abs() < DENOM_TOL {
                return Err(Error::Degenerate {
                    event: "E",
                    time: record.tau,
                    denominator: denom,
                });
            }
            Ok(deriv.x[queue].scaled(-1.0 / denom))
        }
        Cause::Arrival { link, queue, kind } => {
            let e = effect_of(record, queue)?;
            let v = links[link].speed;
            let denom = v + vehicle_length * e.xdot_pre();
            if denom.abs() < DENOM_TOL {
                return Err(Error::Degenerate {
                    event: match kind {
                        crate::engine::FrontKind::End => "Je",
                        crate::engine::FrontKind::Start => "J",
                        crate::engine::FrontKind::Shift => "rate shift",
                    },
                    time: record.tau,
                    denominator: denom,
                });
            }
            let b = deriv.fronts[link].front().ok_or_else(|| {
                Error::Internal(format!("no departure derivative for front on link {}", link + 1))
            })?;
            let c = v / denom;
            let mut tp = b.scaled(c);
            tp.add_scaled(&deriv.x[queue], -c * vehicle_length / v);
            Ok(tp)
        }
    }
}

/// New `x'` of one queue after an event with time derivative `tau_prime`.
pub fn state_derivative_update(
    effect: &QueueEffect,
    tau_prime: &SparseGrad,
    x_prime: &SparseGrad,
    rates: LocalRates,
) -> Result<SparseGrad> {
    use Transition::*;
    let shifted = |c: f64| {
        let mut out = x_prime.clone();
        out.add_scaled(tau_prime, c);
        out
    };
    Ok(match effect.transition {
        InsideEp | StartExogenous => SparseGrad::zero(),
        EndNep => {
            let out = shifted(effect.alpha_pre - effect.beta_pre);
            let scale = x_prime.max_abs().max(1.0);
            if out.max_abs() > RESET_TOL * scale {
                return Err(Error::Internal(format!(
                    "x' not reset at queue emptying: residual {:e}",
                    out.max_abs()
                )));
            }
            SparseGrad::zero()
        }
        StartBySwitch => tau_prime.scaled(-rates.alpha_pre),
        StartByJoin => tau_prime.scaled(effect.beta_post - rates.alpha_post),
        SwitchToRedInNep => shifted(-effect.h),
        SwitchToGreenInNep => shifted(effect.h),
        JoinInNep => shifted(-rates.alpha_post),
        JoinEndInNep => shifted(rates.alpha_pre),
        ShiftInNep => shifted(rates.alpha_pre - rates.alpha_post),
        ExogenousInNep => x_prime.clone(),
    })
}

pub fn transition_label(t: Transition) -> &'static str {
    match t {
        Transition::InsideEp => "inside_ep",
        Transition::EndNep => "E",
        Transition::StartBySwitch => "S_switch",
        Transition::StartByJoin => "S_join",
        Transition::StartExogenous => "S_exogenous",
        Transition::SwitchToRedInNep => "G2R",
        Transition::SwitchToGreenInNep => "R2G",
        Transition::JoinInNep => "J",
        Transition::JoinEndInNep => "Je",
        Transition::ShiftInNep => "rate_shift",
        Transition::ExogenousInNep => "exogenous",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOptions {
    pub rate_mode: RateMode,
    /// Parameter (0-based) whose propagation hops are collected.
    pub trace_param: Option<usize>,
    pub log_derivatives: bool,
    pub keep_neps: bool,
}

impl ReplayOptions {
    pub fn new(rate_mode: RateMode) -> Self {
        Self {
            rate_mode,
            trace_param: None,
            log_derivatives: false,
            keep_neps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutput {
    pub cost: CostAccumulator,
    pub neps: Vec<NepRecord>,
    pub trace: Vec<Hop>,
    pub derivatives: Vec<DerivRow>,
    pub events: usize,
}

fn rates_for(effect: &QueueEffect, tau: f64, segment: &Segment, mode: RateMode) -> LocalRates {
    match mode {
        RateMode::ExactFluid => LocalRates::exact(effect),
        RateMode::WindowedEstimate { window } => {
            let steps = &segment.arrival_steps[effect.queue];
            let start = (tau - window).max(segment.t_start);
            let alpha_pre = if tau > start {
                integrate_steps(steps, start, tau) / (tau - start)
            } else {
                step_value(steps, tau)
            };
            let alpha_post = estimate_arrival_rate_after(steps, tau, window, segment.t_end);
            LocalRates {
                alpha_pre,
                alpha_post,
            }
        }
    }
}

fn with_time(err: Error, tau: f64) -> Error {
    match err {
        Error::Internal(m) => Error::Internal(format!("{m} (t = {tau})")),
        other => other,
    }
}

/// Replays the event records of one segment and returns its cost and
/// gradient. Derivatives start at zero at the segment start.
pub fn replay_segment(
    model: &ArteryModel,
    segment: &Segment,
    options: &ReplayOptions,
) -> Result<ReplayOutput> {
    let links = model.links();
    let ids: Vec<QueueId> = model.queue_ids().collect();
    let qn = ids.len();
    let duration = segment.duration();
    if !(duration > 0.0) {
        return Err(Error::Data(format!("segment [{}, {}] is empty", segment.t_start, segment.t_end)));
    }
    let mut deriv = DerivState::new(qn, model.n, &segment.initial_in_flight);
    let mut open: Vec<Option<NepRecord>> = vec![None; qn];
    let mut counts = vec![0usize; qn];
    for q in 0..qn {
        if segment.initial_busy[q] {
            open[q] = Some(NepRecord::open(
                q,
                ids[q],
                0,
                segment.t_start,
                segment.initial_x[q],
                SparseGrad::zero(),
            ));
            counts[q] = 1;
        }
    }
    let mut grad = SparseGrad::zero();
    let mut cost = 0.0;
    let mut kept = Vec::new();
    let mut per_nep = Vec::new();
    let mut trace = Vec::new();
    let mut rows = Vec::new();
    let mut carries = vec![false; qn];

    let mut finish = |nep: NepRecord, cost: &mut f64, grad: &mut SparseGrad| -> Result<()> {
        if nep.eta <= nep.xi {
            return Ok(());
        }
        let w = model.weight_of(nep.id) / duration;
        let c = w * nep.area()?;
        *cost += c;
        grad.add_scaled(&nep.derivative_area()?, w);
        if options.keep_neps {
            per_nep.push(c);
            kept.push(nep);
        }
        Ok(())
    };

    for rec in &segment.records {
        let tau = rec.tau;
        let tp = event_time_derivative(rec, &deriv, &links, model.vehicle_length)
            .map_err(|e| with_time(e, tau))?;
        match rec.cause {
            Cause::Arrival { link, .. } => {
                deriv.fronts[link].pop_front();
            }
            Cause::Switch { n, .. } => deriv.last_switch[n] = tp.clone(),
            _ => {}
        }
        for eff in &rec.effects {
            let q = eff.queue;
            let rates = rates_for(eff, tau, segment, options.rate_mode);
            let before = std::mem::take(&mut deriv.x[q]);
            let after = state_derivative_update(eff, &tp, &before, rates)
                .map_err(|e| with_time(e, tau))?;

            if let Some(i) = options.trace_param {
                let (b, a, t) = (before.get(i), after.get(i), tp.get(i));
                let hop = |kind, link| Hop {
                    t: tau,
                    kind,
                    queue: ids[q],
                    link,
                    x_prime_before: b,
                    x_prime_after: a,
                    tau_prime: t,
                };
                match (rec.cause, eff.transition) {
                    (_, Transition::EndNep) => {
                        if b != 0.0 {
                            trace.push(hop(HopKind::Reset, None));
                        }
                        carries[q] = false;
                    }
                    (_, Transition::SwitchToRedInNep) if carries[q] && b != 0.0 => {
                        trace.push(hop(HopKind::GreenWaveBreak, None));
                    }
                    (Cause::Arrival { link, .. }, tr) if t != 0.0 => {
                        if a != b {
                            trace.push(hop(HopKind::Propagated, Some(link)));
                            carries[q] = true;
                        } else if tr == Transition::InsideEp && !rec.emissions.is_empty() {
                            trace.push(hop(HopKind::Relayed, Some(link)));
                        }
                    }
                    _ => {}
                }
            }

            if options.log_derivatives {
                let mut idx: Vec<usize> = after.iter().map(|(i, _)| i).chain(tp.iter().map(|(i, _)| i)).collect();
                idx.sort_unstable();
                idx.dedup();
                for i in idx {
                    rows.push(DerivRow {
                        t: tau,
                        event: transition_label(eff.transition),
                        n: ids[q].n + 1,
                        d: ids[q].dir.code(),
                        i: i + 1,
                        x_prime: after.get(i),
                        tau_prime: tp.get(i),
                    });
                }
            }

            let t = eff.transition;
            if t.opens_nep() {
                if open[q].is_some() {
                    return Err(Error::Internal(format!("queue {} opened a second NEP at {tau}", ids[q])));
                }
                open[q] = Some(NepRecord::open(q, ids[q], counts[q], tau, eff.x, after.clone()));
                counts[q] += 1;
            } else if t.inside_nep() {
                let nep = open[q].as_mut().ok_or_else(|| {
                    Error::Internal(format!("in-NEP event at queue {} outside any NEP (t = {tau})", ids[q]))
                })?;
                nep.push_event(tau, eff.x, after.clone());
            } else if t == Transition::EndNep {
                let mut nep = open[q].take().ok_or_else(|| {
                    Error::Internal(format!("queue {} emptied outside any NEP (t = {tau})", ids[q]))
                })?;
                nep.close(tau, 0.0);
                finish(nep, &mut cost, &mut grad)?;
            }
            deriv.x[q] = after;
        }
        for em in &rec.emissions {
            deriv.fronts[em.link].push_back(tp.clone());
        }
    }
    for q in 0..qn {
        if let Some(mut nep) = open[q].take() {
            nep.close(segment.t_end, segment.final_x[q]);
            finish(nep, &mut cost, &mut grad)?;
        }
    }
    drop(finish);
    Ok(ReplayOutput {
        cost: CostAccumulator {
            cost,
            grad: grad.to_dense(model.dim()),
            per_nep,
        },
        neps: kept,
        trace,
        derivatives: rows,
        events: segment.records.len(),
    })
}

/// Cost and IPA gradient of one sample path.
pub fn path_gradient(scenario: &Scenario, theta: &ThetaVector, seed: u64) -> Result<CostAccumulator> {
    let sim = Simulator::new(scenario, theta, seed, SimOptions::default())?;
    let traj = sim.finish(scenario.horizon)?;
    let out = replay_segment(&scenario.model, &traj.segment, &ReplayOptions::new(scenario.rate_mode))?;
    Ok(out.cost)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    pub mean_cost: f64,
    pub per_path: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
}

impl GradientEstimate {
    /// Standard error of the mean per coordinate (zero for one path).
    pub fn standard_error(&self) -> Vec<f64> {
        standard_errors(&self.per_path, &self.mean)
    }
}

pub(crate) fn standard_errors(samples: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let k = samples.len();
    if k < 2 {
        return vec![0.0; mean.len()];
    }
    (0..mean.len())
        .map(|i| {
            let ss: f64 = samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum();
            (ss / (k - 1) as f64 / k as f64).sqrt()
        })
        .collect()
}

/// Mean IPA gradient over `seeds`, one independent path per seed.
pub fn ipa_gradient(scenario: &Scenario, theta: &ThetaVector, seeds: &[u64]) -> Result<GradientEstimate> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let results = par_map(seeds, |&seed| {
        path_gradient(scenario, theta, seed).map_err(|e| Error::Path {
            seed,
            source: Box::new(e),
        })
    });
    let mut per_path = Vec::with_capacity(seeds.len());
    let mut costs = Vec::with_capacity(seeds.len());
    for r in results {
        let acc = r?;
        costs.push(acc.cost);
        per_path.push(acc.grad);
    }
    let k = seeds.len() as f64;
    let dim = scenario.model.dim();
    let mean = (0..dim)
        .map(|i| per_path.iter().map(|g| g[i]).sum::<f64>() / k)
        .collect();
    Ok(GradientEstimate {
        mean,
        mean_cost: costs.iter().sum::<f64>() / k,
        per_path,
        costs,
    })
}

/// Propagation hops of parameter `i` along a completed path.
pub fn propagation_trace(model: &ArteryModel, traj: &Trajectory, i: usize) -> Result<Vec<Hop>> {
    if i >= model.dim() {
        return Err(Error::Config(format!("parameter index {} out of range", i + 1)));
    }
    let mut options = ReplayOptions::new(RateMode::ExactFluid);
    options.trace_param = Some(i);
    Ok(replay_segment(model, &traj.segment, &options)?.trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arrival::ArrivalProcess;
    use crate::engine::{run_sample_path, FrontKind};
    use crate::fd::{finite_difference_gradient, FdConfig};
    use crate::model::Dir;

    fn effect(transition: Transition, alpha: (f64, f64), beta: (f64, f64)) -> QueueEffect {
        QueueEffect {
            queue: 0,
            transition,
            x: 0.0,
            alpha_pre: alpha.0,
            alpha_post: alpha.1,
            beta_pre: beta.0,
            beta_post: beta.1,
            h: 1.3,
        }
    }

    fn record(cause: Cause, eff: QueueEffect) -> EventRecord {
        EventRecord {
            tau: 10.0,
            cause,
            effects: vec![eff],
            emissions: vec![],
        }
    }

    fn link() -> Vec<Link> {
        vec![Link {
            from: 0,
            to: 0,
            length: 200.0,
            speed: 10.0,
        }]
    }

    #[test]
    fn empty_event_time_derivative() {
        let mut d = DerivState::new(1, 1, &[0]);
        d.x[0] = SparseGrad::from_dense(&[2.0, 0.0]);
        let rec = record(Cause::Empty { queue: 0 }, effect(Transition::EndNep, (0.2, 0.2), (1.3, 0.2)));
        let tp = event_time_derivative(&rec, &d, &[], 5.0).unwrap();
        assert!((tp.get(0) - 2.0 / 1.1).abs() < 1e-12);
        let after = state_derivative_update(&rec.effects[0], &tp, &d.x[0], LocalRates::exact(&rec.effects[0])).unwrap();
        assert!(after.is_zero());
    }

    #[test]
    fn vanishing_empty_denominator_is_degenerate() {
        let d = DerivState::new(1, 1, &[0]);
        let rec = record(Cause::Empty { queue: 0 }, effect(Transition::EndNep, (1.3, 1.3), (1.3, 1.3)));
        assert!(matches!(
            event_time_derivative(&rec, &d, &[], 5.0),
            Err(Error::Degenerate { event: "E", .. })
        ));
    }

    #[test]
    fn switch_time_derivative_is_an_indicator() {
        let d = DerivState::new(2, 1, &[]);
        let rec = record(
            Cause::Switch { n: 0, ending_phase: 0 },
            effect(Transition::InsideEp, (0.0, 0.0), (0.0, 0.0)),
        );
        let tp = event_time_derivative(&rec, &d, &[], 5.0).unwrap();
        assert_eq!(tp.to_dense(2), vec![1.0, 0.0]);
    }

    #[test]
    fn join_on_red_empty_queue() {
        let mut d = DerivState::new(1, 1, &[1]);
        d.fronts[0][0] = SparseGrad::unit(0);
        let rec = record(
            Cause::Arrival { link: 0, queue: 0, kind: FrontKind::Start },
            effect(Transition::StartByJoin, (0.0, 1.3), (0.0, 0.0)),
        );
        let tp = event_time_derivative(&rec, &d, &link(), 5.0).unwrap();
        assert_eq!(tp.get(0), 1.0);
    }

    #[test]
    fn exogenous_events_have_zero_time_derivative() {
        let mut d = DerivState::new(1, 1, &[0]);
        d.x[0] = SparseGrad::unit(1);
        let rec = record(Cause::Exogenous { queue: 0 }, effect(Transition::ExogenousInNep, (0.0, 0.4), (1.3, 1.3)));
        let tp = event_time_derivative(&rec, &d, &[], 5.0).unwrap();
        assert!(tp.is_zero());
        let after = state_derivative_update(&rec.effects[0], &tp, &d.x[0], LocalRates::exact(&rec.effects[0])).unwrap();
        assert_eq!(after, d.x[0]);
    }

    #[test]
    fn state_updates_from_cases() {
        let tp = SparseGrad::unit(0);
        let e = effect(Transition::StartBySwitch, (0.25, 0.25), (0.0, 0.0));
        let out = state_derivative_update(&e, &tp, &SparseGrad::zero(), LocalRates::exact(&e)).unwrap();
        assert_eq!(out.get(0), -0.25);
        let e = effect(Transition::SwitchToGreenInNep, (0.25, 0.25), (0.0, 1.3));
        let x = SparseGrad::from_dense(&[-0.25]);
        let out = state_derivative_update(&e, &tp, &x, LocalRates::exact(&e)).unwrap();
        assert!((out.get(0) - 1.05).abs() < 1e-12);
        let e = effect(Transition::JoinInNep, (0.0, 1.3), (1.3, 1.3));
        let out = state_derivative_update(&e, &tp, &SparseGrad::zero(), LocalRates::exact(&e)).unwrap();
        assert_eq!(out.get(0), -1.3);
    }

    fn det_single() -> Scenario {
        let model = ArteryModel::uniform(1, 200.0, 10.0, 5.0, 1.3);
        let theta = ThetaVector::from_pairs(&[(30.0, 20.0)], 5.0, 120.0).unwrap();
        Scenario::new(model, theta, 45.0)
            .with_arrival(QueueId::new(0, Dir::Side), ArrivalProcess::constant(0.1))
    }

    #[test]
    fn ipa_matches_triangle_wave_slope() {
        let s = det_single();
        let g = ipa_gradient(&s, &s.theta0, &[1]).unwrap();
        assert!((g.mean[0] - 3.25 / 45.0).abs() < 1e-12, "{:?}", g.mean);
        assert_eq!(g.mean[1], 0.0);
    }

    #[test]
    fn accumulator_cost_matches_engine_integral() {
        let s = crate::scenario::paper_3x();
        let (traj, report) = run_sample_path(&s, &s.theta0, 4, SimOptions::default()).unwrap();
        let mut opts = ReplayOptions::new(RateMode::ExactFluid);
        opts.keep_neps = true;
        let out = replay_segment(&s.model, &traj.segment, &opts).unwrap();
        assert!((out.cost.cost - report.cost).abs() <= 1e-9 * report.cost);
        let again = accumulate_cost_derivative(&out.neps, &s.model, s.horizon).unwrap();
        assert!((again.cost - out.cost.cost).abs() <= 1e-12 * report.cost);
        for (a, b) in again.grad.iter().zip(&out.cost.grad) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn two_intersection_ipa_matches_fd() {
        let model = ArteryModel::uniform(2, 200.0, 10.0, 5.0, 1.3);
        let theta = ThetaVector::from_pairs(&[(30.0, 20.0), (25.0, 22.0)], 5.0, 120.0).unwrap();
        let s = Scenario::new(model, theta.clone(), 300.0)
            .with_arrival(QueueId::new(0, Dir::Artery), ArrivalProcess::constant(0.3))
            .with_arrival(QueueId::new(0, Dir::Side), ArrivalProcess::constant(0.1))
            .with_arrival(QueueId::new(1, Dir::Side), ArrivalProcess::constant(0.15));
        let g = ipa_gradient(&s, &theta, &[1]).unwrap();
        for i in 0..4 {
            let fd = finite_difference_gradient(&s, &theta, i, &FdConfig::central(1e-3, vec![1])).unwrap();
            eprintln!("i={i} ipa={} fd={} changed={}", g.mean[i], fd.mean, fd.order_changed());
            if !fd.order_changed() {
                let tol = 1e-3 * fd.mean.abs().max(1e-3);
                assert!((g.mean[i] - fd.mean).abs() <= tol, "i={i}: {} vs {}", g.mean[i], fd.mean);
            }
        }
    }
}
