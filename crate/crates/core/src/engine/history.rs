//! Delayed-flow bookkeeping on a link.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Upstream departure-rate history: a step function kept from
/// `retained_from` onward. Breakpoints older than the oldest front still on
/// the road are pruned.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepHistory {
    base: f64,
    retained_from: f64,
    steps: VecDeque<(f64, f64)>,
}

impl StepHistory {
    pub fn new(base: f64, retained_from: f64) -> Self {
        Self {
            base,
            retained_from,
            steps: VecDeque::new(),
        }
    }

    pub fn push(&mut self, time: f64, rate: f64) {
        debug_assert!(self.steps.back().map_or(true, |s| s.0 <= time));
        self.steps.push_back((time, rate));
    }

    /// Drops the oldest breakpoint, making its rate the new base.
    pub fn pop_front(&mut self) -> Option<(f64, f64)> {
        let step = self.steps.pop_front()?;
        self.base = step.1;
        self.retained_from = step.0;
        Some(step)
    }

    pub fn front(&self) -> Option<(f64, f64)> {
        self.steps.front().copied()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn retained_from(&self) -> f64 {
        self.retained_from
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn value_at(&self, s: f64) -> Result<f64> {
        if s < self.retained_from {
            return Err(Error::Internal(format!(
                "rate history starts at {}, queried at {}",
                self.retained_from, s
            )));
        }
        let k = self.steps.partition_point(|step| step.0 <= s);
        Ok(if k == 0 { self.base } else { self.steps[k - 1].1 })
    }

    /// Integral of the history over `[a, b]` (`a >= retained_from`).
    pub fn volume(&self, a: f64, b: f64) -> Result<f64> {
        if b <= a {
            return Ok(0.0);
        }
        if a < self.retained_from {
            return Err(Error::Internal(format!(
                "rate history starts at {}, integrated from {}",
                self.retained_from, a
            )));
        }
        let mut total = 0.0;
        let mut t = a;
        let mut rate = self.value_at(a)?;
        for &(time, r) in self.steps.iter().filter(|s| s.0 > a) {
            if time >= b {
                break;
            }
            total += rate * (time - t);
            t = time;
            rate = r;
        }
        Ok(total + rate * (b - t))
    }
}

/// Downstream arrival rate `beta_up(t - delta)`.
pub fn delayed_upstream_rate(history: &StepHistory, t: f64, delta: f64) -> Result<f64> {
    history.value_at(t - delta)
}

/// Time after `now` at which a clock `y` (slope 1) meets a delay that is
/// `delta` now and changes at `delta_slope` per second. Returns `None` when
/// the two never meet.
pub fn clock_crossing(y: f64, delta: f64, delta_slope: f64) -> Option<f64> {
    let closing = 1.0 - delta_slope;
    let gap = delta - y;
    if gap <= 0.0 {
        return Some(0.0);
    }
    if closing <= 0.0 {
        return None;
    }
    Some(gap / closing)
}

/// Plain linear root of `x + xdot * s = 0` for a draining queue.
pub fn linear_root(x: f64, xdot: f64) -> Option<f64> {
    if xdot < 0.0 {
        Some((x / -xdot).max(0.0))
    } else {
        None
    }
}
