//! Finite-difference gradients with common random numbers. Uses only the
//! simulator's own cost integral, never the derivative replay.

use serde::Serialize;

use crate::engine::{run_sample_path, SimOptions};
use crate::error::{Error, Result};
use crate::model::ThetaVector;
use crate::parallel::par_map;
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FdScheme {
    Forward,
    Central,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdConfig {
    pub h: f64,
    pub scheme: FdScheme,
    pub seeds: Vec<u64>,
}

impl FdConfig {
    pub fn central(h: f64, seeds: Vec<u64>) -> Self {
        Self {
            h,
            scheme: FdScheme::Central,
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::Config(format!("FD step {} must be positive", self.h)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("FD needs at least one seed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub per_seed: Vec<f64>,
    /// Seeds whose two perturbed paths saw different event orders.
    pub order_changes: usize,
}

impl FdEstimate {
    pub fn order_changed(&self) -> bool {
        self.order_changes > 0
    }
}

fn shifted(theta: &ThetaVector, i: usize, delta: f64) -> Result<ThetaVector> {
    let mut t = theta.clone();
    t.values[i] += delta;
    t.validate().map_err(|_| {
        Error::Config(format!(
            "theta[{}] = {} shifted by {} leaves [{}, {}]",
            i + 1,
            theta.values[i],
            delta,
            theta.min,
            theta.max
        ))
    })?;
    Ok(t)
}

/// Difference quotient of the sample cost in coordinate `i`, averaged over
/// the configured seeds; both evaluations of a seed share its streams.
pub fn finite_difference_gradient(
    scenario: &Scenario,
    theta: &ThetaVector,
    i: usize,
    config: &FdConfig,
) -> Result<FdEstimate> {
    config.validate()?;
    if i >= theta.len() {
        return Err(Error::Config(format!("parameter index {} out of range", i + 1)));
    }
    let (lo, hi, width) = match config.scheme {
        FdScheme::Central => (shifted(theta, i, -config.h)?, shifted(theta, i, config.h)?, 2.0 * config.h),
        FdScheme::Forward => (theta.clone(), shifted(theta, i, config.h)?, config.h),
    };
    let results = par_map(&config.seeds, |&seed| -> Result<(f64, bool)> {
        let wrap = |e| Error::Path {
            seed,
            source: Box::new(e),
        };
        let (a, ra) = run_sample_path(scenario, &lo, seed, SimOptions::with_events()).map_err(wrap)?;
        let (b, rb) = run_sample_path(scenario, &hi, seed, SimOptions::with_events()).map_err(wrap)?;
        Ok(((rb.cost - ra.cost) / width, a.signature() != b.signature()))
    });
    let mut per_seed = Vec::with_capacity(results.len());
    let mut order_changes = 0;
    for r in results {
        let (d, changed) = r?;
        per_seed.push(d);
        order_changes += changed as usize;
    }
    let k = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / k;
    let std_error = if per_seed.len() > 1 {
        (per_seed.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };
    Ok(FdEstimate {
        mean,
        std_error,
        per_seed,
        order_changes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arrival::ArrivalProcess;
    use crate::model::{ArteryModel, Dir, QueueId};

    #[test]
    fn zero_demand_has_zero_difference() {
        let model = ArteryModel::uniform(2, 200.0, 10.0, 5.0, 1.3);
        let theta = ThetaVector::from_pairs(&[(30.0, 20.0), (25.0, 25.0)], 5.0, 120.0).unwrap();
        let s = Scenario::new(model, theta.clone(), 500.0);
        let est = finite_difference_gradient(&s, &theta, 2, &FdConfig::central(1e-3, vec![1, 2])).unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn side_queue_cost_slope_matches_hand_computation() {
        // One RED period of the side queue per cycle: area a*th0^2*h/(2(h-a))
        // every th0+th1 seconds; a = 0.1, h = 1.3, th0 = 30, th1 = 20. Over a
        // 45 s horizon the derivative in th0 is
        // a*th0*h/(h-a) / T = 0.1*30*1.3/1.2/45.
        let model = ArteryModel::uniform(1, 200.0, 10.0, 5.0, 1.3);
        let theta = ThetaVector::from_pairs(&[(30.0, 20.0)], 5.0, 120.0).unwrap();
        let s = Scenario::new(model, theta.clone(), 45.0)
            .with_arrival(QueueId::new(0, Dir::Side), ArrivalProcess::constant(0.1));
        let est = finite_difference_gradient(&s, &theta, 0, &FdConfig::central(1e-3, vec![7])).unwrap();
        assert!((est.mean - 3.25 / 45.0).abs() < 1e-6, "{}", est.mean);
        assert!(!est.order_changed());
    }

    #[test]
    fn out_of_bounds_step_is_rejected() {
        let model = ArteryModel::uniform(1, 200.0, 10.0, 5.0, 1.3);
        let theta = ThetaVector::from_pairs(&[(5.0, 20.0)], 5.0, 120.0).unwrap();
        let s = Scenario::new(model, theta.clone(), 50.0);
        assert!(finite_difference_gradient(&s, &theta, 0, &FdConfig::central(0.1, vec![1])).is_err());
    }
}
