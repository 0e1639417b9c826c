#![allow(dead_code)]

use std::collections::VecDeque;

use greenwave::arrival::ArrivalProcess;
use greenwave::engine::{run_sample_path, Cause, SimOptions, Transition};
use greenwave::ipa::{event_time_derivative, path_gradient, state_derivative_update, DerivState, LocalRates};
use greenwave::model::{ArteryModel, Dir, QueueId, ThetaVector};
use greenwave::scenario::Scenario;
use greenwave::Error;
use proptest::prelude::*;

/// Small random arteries: up to three intersections, light to moderate
/// demand, short horizons.
pub fn mini_scenario() -> impl Strategy<Value = (Scenario, u64)> {
    (1usize..=3, any::<bool>(), 100.0f64..300.0, 8.0f64..15.0, 0.5f64..1.5)
        .prop_flat_map(|(n, bidir, length, speed, h)| {
            let k = if bidir { 3 } else { 2 };
            (
                Just((n, bidir, length, speed, h)),
                prop::collection::vec(5.0f64..60.0, 2 * n),
                prop::collection::vec((0.0f64..0.3, any::<bool>()), k),
                prop::collection::vec(0.0f64..0.2, n),
                100.0f64..400.0,
                any::<u64>(),
            )
        })
        .prop_map(|((n, bidir, length, speed, h), theta, heads, sides, horizon, seed)| {
            let model = ArteryModel::uniform(n, length, speed, 5.0, h).with_bidirectional(bidir);
            let theta = ThetaVector::new(theta, 5.0, 120.0).unwrap();
            let mut s = Scenario::new(model, theta, horizon);
            let process = |rate: f64, constant: bool| {
                if constant {
                    ArrivalProcess::constant(rate)
                } else {
                    ArrivalProcess::on_off(rate, 10.0, 10.0)
                }
            };
            s = s.with_arrival(QueueId::new(0, Dir::Artery), process(heads[0].0, heads[0].1));
            if bidir {
                s = s.with_arrival(QueueId::new(n - 1, Dir::Reverse), process(heads[2].0, heads[2].1));
            }
            for (k, &rate) in sides.iter().enumerate() {
                s = s.with_arrival(QueueId::new(k, Dir::Side), process(rate, heads[1].1));
            }
            (s, seed)
        })
}

pub struct Checked {
    pub events: usize,
    pub skipped: bool,
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Runs one path and checks the structural invariants of the engine and the
/// derivative replay. Paths that end in a declared model violation (queue
/// spill-back) are reported as skipped.
pub fn check_path(s: &Scenario, seed: u64) -> Result<Checked, String> {
    let (traj, _) = match run_sample_path(s, &s.theta0, seed, SimOptions::with_states()) {
        Ok(v) => v,
        Err(Error::Blocking { .. }) => {
            return Ok(Checked {
                events: 0,
                skipped: true,
            })
        }
        Err(e) => return Err(format!("engine error: {e}")),
    };
    let model = &s.model;
    let links = model.links();

    // Contents stay non-negative.
    for (k, row) in traj.states.iter().enumerate() {
        if let Some(x) = row.iter().find(|x| **x < -1e-9) {
            return Err(format!("negative content {x} at logged event {k}"));
        }
    }
    for rec in &traj.segment.records {
        for e in &rec.effects {
            if e.x < -1e-9 {
                return Err(format!("negative content {} at t={}", e.x, rec.tau));
            }
        }
    }

    // Exactly one phase is GREEN: switches alternate per intersection.
    let mut last_phase = vec![None; model.n];
    for rec in &traj.segment.records {
        if let Cause::Switch { n, ending_phase } = rec.cause {
            if last_phase[n] == Some(ending_phase) {
                return Err(format!("intersection {n} ended phase {ending_phase} twice in a row"));
            }
            last_phase[n] = Some(ending_phase);
        }
    }

    // Fronts reach the downstream queue in emission order after a delay in
    // (0, L/v] that matches the queue content they meet.
    let mut pending: Vec<VecDeque<(f64, greenwave::engine::FrontKind)>> = vec![VecDeque::new(); links.len()];
    for rec in &traj.segment.records {
        if let Cause::Arrival { link, queue, kind } = rec.cause {
            let (t0, k0) = pending[link]
                .pop_front()
                .ok_or_else(|| format!("front arrived on link {link} at t={} before any emission", rec.tau))?;
            if k0 != kind {
                return Err(format!("link {link}: emitted {k0:?} but {kind:?} arrived (FIFO broken)"));
            }
            let lk = &links[link];
            let delta = rec.tau - t0;
            if !(delta > 0.0 && delta <= lk.length / lk.speed + 1e-9) {
                return Err(format!("link {link}: transit {delta} outside (0, L/v]"));
            }
            let x = rec.effects.iter().find(|e| e.queue == queue).map(|e| e.x).unwrap_or(0.0);
            let expect = (lk.length - model.vehicle_length * x) / lk.speed;
            if (delta - expect).abs() > 1e-6 {
                return Err(format!("link {link}: transit {delta} but content {x} implies {expect}"));
            }
        }
        for em in &rec.emissions {
            pending[em.link].push_back((rec.tau, em.kind));
        }
    }

    // Flow conservation per queue, per link and across the network. Link
    // inflow is counted in upstream departure time; the difference to the
    // arrival-time integral is the compression of bursts by a moving tail.
    let ids: Vec<QueueId> = model.queue_ids().collect();
    let mut exo_in = 0.0;
    let mut out = 0.0;
    for (q, t) in traj.totals.iter().enumerate() {
        let x = traj.segment.final_x[q];
        if !rel_close(t.arrived - t.departed, x, 1e-9) {
            return Err(format!("queue {q}: in {} - out {} != content {x}", t.arrived, t.departed));
        }
        if model.is_exogenous(ids[q]) {
            exo_in += t.arrived;
        } else {
            exo_in += t.arrived - t.joined_departure;
        }
        let feeds_link = links.iter().any(|l| l.from == q);
        if !feeds_link {
            out += t.departed;
        }
    }
    for (k, l) in links.iter().enumerate() {
        let up = traj.totals[l.from].departed;
        let down = traj.totals[l.to].joined_departure;
        if !rel_close(up, down + traj.in_transit[k], 1e-9) {
            return Err(format!("link {k}: sent {up}, received {down}, in transit {}", traj.in_transit[k]));
        }
    }
    let stored: f64 = traj.segment.final_x.iter().sum::<f64>() + traj.in_transit.iter().sum::<f64>();
    if !rel_close(exo_in, out + stored, 1e-9) {
        return Err(format!("network: in {exo_in}, out {out}, stored {stored}"));
    }

    // Derivative replay: zero event-time derivative at exogenous events,
    // zero state derivative inside empty periods and after emptying.
    let mut deriv = DerivState::new(ids.len(), model.n, &traj.segment.initial_in_flight);
    for rec in &traj.segment.records {
        let tp = event_time_derivative(rec, &deriv, &links, model.vehicle_length)
            .map_err(|e| format!("event-time derivative at t={}: {e}", rec.tau))?;
        match rec.cause {
            Cause::Exogenous { .. } if !tp.is_zero() => {
                return Err(format!("exogenous event at t={} has nonzero tau'", rec.tau));
            }
            Cause::Arrival { link, .. } => {
                deriv.fronts[link].pop_front();
            }
            Cause::Switch { n, .. } => deriv.last_switch[n] = tp.clone(),
            _ => {}
        }
        for e in &rec.effects {
            let before = std::mem::take(&mut deriv.x[e.queue]);
            let after = state_derivative_update(e, &tp, &before, LocalRates::exact(e))
                .map_err(|err| format!("state derivative at t={}: {err}", rec.tau))?;
            if matches!(e.transition, Transition::EndNep | Transition::InsideEp) && !after.is_zero() {
                return Err(format!(
                    "x' nonzero after {:?} at t={} on queue {}",
                    e.transition, rec.tau, e.queue
                ));
            }
            deriv.x[e.queue] = after;
        }
        for em in &rec.emissions {
            deriv.fronts[em.link].push_back(tp.clone());
        }
    }

    // Same seed, same log and gradient.
    let (again, _) = run_sample_path(s, &s.theta0, seed, SimOptions::with_states()).map_err(|e| e.to_string())?;
    if again.events != traj.events || again.states != traj.states {
        return Err("rerun with the same seed produced a different log".into());
    }
    let g1 = path_gradient(s, &s.theta0, seed).map_err(|e| e.to_string())?;
    let g2 = path_gradient(s, &s.theta0, seed).map_err(|e| e.to_string())?;
    if g1.grad != g2.grad || g1.cost != g2.cost {
        return Err("rerun with the same seed produced a different gradient".into());
    }

    Ok(Checked {
        events: traj.segment.records.len(),
        skipped: false,
    })
}
