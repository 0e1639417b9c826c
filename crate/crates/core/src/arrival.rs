//! Exogenous arrival processes rendered as ON/OFF fluid rates, plus seed
//! splitting and the windowed arrival-rate estimator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ON/OFF fluid source with exponential sojourns. `mean_off == 0` is a
/// constant source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProcess {
    pub mean_rate: f64,
    pub on_rate: f64,
    pub mean_on: f64,
    pub mean_off: f64,
}

impl ArrivalProcess {
    pub fn on_off(mean_rate: f64, mean_on: f64, mean_off: f64) -> Self {
        Self {
            mean_rate,
            on_rate: mean_rate * (mean_on + mean_off) / mean_on,
            mean_on,
            mean_off,
        }
    }

    pub fn constant(rate: f64) -> Self {
        Self {
            mean_rate: rate,
            on_rate: rate,
            mean_on: 1.0,
            mean_off: 0.0,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.mean_off == 0.0
    }

    /// Same ON/OFF timing with the ON rate rescaled to a new mean.
    pub fn with_mean(&self, mean_rate: f64) -> Self {
        Self {
            mean_rate,
            on_rate: mean_rate * (self.mean_on + self.mean_off) / self.mean_on,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_rate >= 0.0) || !(self.on_rate >= 0.0) {
            return Err(Error::Config("arrival rates must be non-negative".into()));
        }
        if !(self.mean_on > 0.0) || !(self.mean_off >= 0.0) {
            return Err(Error::Config(
                "ON duration must be positive and OFF duration non-negative".into(),
            ));
        }
        let implied = self.on_rate * self.mean_on / (self.mean_on + self.mean_off);
        if (implied - self.mean_rate).abs() > 1e-9 * self.mean_rate.max(1.0) {
            return Err(Error::Config(format!(
                "ON rate {} with duty cycle gives mean {}, expected {}",
                self.on_rate, implied, self.mean_rate
            )));
        }
        Ok(())
    }
}

/// Counter-based seed splitting (splitmix64 finalizer over the tag chain).
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(master), |acc, &t| mix(acc ^ mix(t)))
}

/// Lazily sampled ON/OFF rate path of one queue.
#[derive(Debug, Clone)]
pub struct OnOffStream {
    process: ArrivalProcess,
    rng: ChaCha8Rng,
    on: bool,
    next_switch: f64,
}

impl OnOffStream {
    pub fn new(process: ArrivalProcess, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if process.is_constant() {
            return Self {
                process,
                rng,
                on: true,
                next_switch: f64::INFINITY,
            };
        }
        let p_on = process.mean_on / (process.mean_on + process.mean_off);
        let on = rng.random::<f64>() < p_on;
        let mut stream = Self {
            process,
            rng,
            on,
            next_switch: 0.0,
        };
        stream.next_switch = stream.draw_sojourn();
        stream
    }

    fn draw_sojourn(&mut self) -> f64 {
        let mean = if self.on {
            self.process.mean_on
        } else {
            self.process.mean_off
        };
        Exp::new(1.0 / mean).expect("positive mean").sample(&mut self.rng)
    }

    pub fn rate(&self) -> f64 {
        if self.on {
            self.process.on_rate
        } else {
            0.0
        }
    }

    pub fn is_on(&self) -> bool {
        self.on
    }

    pub fn next_switch(&self) -> f64 {
        self.next_switch
    }

    /// Toggles ON/OFF at the scheduled switch and returns the new rate.
    pub fn advance(&mut self) -> f64 {
        let t = self.next_switch;
        self.on = !self.on;
        self.next_switch = t + self.draw_sojourn();
        self.rate()
    }

    pub fn set_mean_rate(&mut self, mean_rate: f64) {
        self.process = self.process.with_mean(mean_rate);
    }

    pub fn process(&self) -> &ArrivalProcess {
        &self.process
    }
}

/// Right-continuous step function: `(time, rate)` from each time onward.
pub type RateSteps = Vec<(f64, f64)>;

/// Samples the rate path of `process` on `[0, horizon]`; only actual rate
/// changes are recorded.
pub fn sample_arrival_path(process: &ArrivalProcess, horizon: f64, seed: u64) -> Result<RateSteps> {
    if !(horizon > 0.0) {
        return Err(Error::Config("horizon must be positive".into()));
    }
    process.validate()?;
    let mut stream = OnOffStream::new(*process, seed);
    let mut steps = vec![(0.0, stream.rate())];
    while stream.next_switch() < horizon {
        let t = stream.next_switch();
        let rate = stream.advance();
        if rate != steps.last().unwrap().1 {
            steps.push((t, rate));
        }
    }
    Ok(steps)
}

/// Integral of a step function over `[a, b]`.
pub fn integrate_steps(steps: &[(f64, f64)], a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut total = 0.0;
    for (k, &(t, rate)) in steps.iter().enumerate() {
        let end = steps.get(k + 1).map_or(f64::INFINITY, |s| s.0);
        let lo = t.max(a);
        let hi = end.min(b);
        if hi > lo {
            total += rate * (hi - lo);
        }
        if end >= b {
            break;
        }
    }
    total
}

/// Value of a step function at `t` (right-continuous).
pub fn step_value(steps: &[(f64, f64)], t: f64) -> f64 {
    match steps.partition_point(|s| s.0 <= t) {
        0 => 0.0,
        k => steps[k - 1].1,
    }
}

/// Arrival volume over the `t_w` window ending at `tau`, divided by the
/// window length. Windows reaching before `t = 0` are truncated.
pub fn estimate_arrival_rate(steps: &[(f64, f64)], tau: f64, t_w: f64) -> Result<f64> {
    if !(t_w > 0.0) {
        return Err(Error::Config("rate-estimation window must be positive".into()));
    }
    let start = (tau - t_w).max(0.0);
    if tau <= start {
        return Ok(step_value(steps, tau));
    }
    Ok(integrate_steps(steps, start, tau) / (tau - start))
}

/// Forward-looking counterpart of [`estimate_arrival_rate`] over
/// `[tau, min(tau + t_w, end)]`.
pub fn estimate_arrival_rate_after(steps: &[(f64, f64)], tau: f64, t_w: f64, end: f64) -> f64 {
    let stop = (tau + t_w).min(end);
    if stop <= tau {
        return step_value(steps, tau);
    }
    integrate_steps(steps, tau, stop) / (stop - tau)
}
