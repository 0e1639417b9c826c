//! Sample cost and its gradient assembled from non-empty periods.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ArteryModel, QueueId};
use crate::sparse::SparseGrad;

/// One non-empty period of a queue with the derivative snapshots needed to
/// integrate `x'` over it.
#[derive(Debug, Clone, PartialEq)]
pub struct NepRecord {
    pub queue: usize,
    pub id: QueueId,
    /// Ordinal of this NEP on its queue.
    pub k: usize,
    pub xi: f64,
    pub eta: f64,
    /// Interior event times `t^1 .. t^P`.
    pub event_times: Vec<f64>,
    /// `x'` just after `xi` and after each interior event (`P + 1` entries).
    pub snapshots: Vec<SparseGrad>,
    /// Queue content at `xi`, each interior event and `eta` (`P + 2` entries).
    pub x_values: Vec<f64>,
}

impl NepRecord {
    pub fn open(queue: usize, id: QueueId, k: usize, xi: f64, x: f64, deriv: SparseGrad) -> Self {
        Self {
            queue,
            id,
            k,
            xi,
            eta: xi,
            event_times: Vec::new(),
            snapshots: vec![deriv],
            x_values: vec![x],
        }
    }

    pub fn push_event(&mut self, t: f64, x: f64, deriv: SparseGrad) {
        self.event_times.push(t);
        self.x_values.push(x);
        self.snapshots.push(deriv);
    }

    pub fn close(&mut self, eta: f64, x: f64) {
        self.eta = eta;
        self.x_values.push(x);
    }

    /// Knot times `xi, t^1, .., t^P, eta`.
    pub fn knots(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.xi)
            .chain(self.event_times.iter().copied())
            .chain(std::iter::once(self.eta))
    }

    fn check(&self) -> Result<()> {
        let p = self.event_times.len();
        if !(self.eta > self.xi) {
            return Err(Error::Data(format!(
                "NEP {} of queue {} has eta {} <= xi {}",
                self.k, self.id, self.eta, self.xi
            )));
        }
        if self.snapshots.len() != p + 1 || self.x_values.len() != p + 2 {
            return Err(Error::Data(format!(
                "NEP {} of queue {}: {} events, {} snapshots, {} contents",
                self.k,
                self.id,
                p,
                self.snapshots.len(),
                self.x_values.len()
            )));
        }
        Ok(())
    }

    /// Integral of the queue content over the NEP (content is linear
    /// between knots).
    pub fn area(&self) -> Result<f64> {
        self.check()?;
        let t: Vec<f64> = self.knots().collect();
        Ok(t.windows(2)
            .zip(self.x_values.windows(2))
            .map(|(t, x)| 0.5 * (x[0] + x[1]) * (t[1] - t[0]))
            .sum())
    }

    /// Integral of `x'` over the NEP (piecewise constant between knots).
    pub fn derivative_area(&self) -> Result<SparseGrad> {
        self.check()?;
        let t: Vec<f64> = self.knots().collect();
        let mut out = SparseGrad::zero();
        for (j, snap) in self.snapshots.iter().enumerate() {
            out.add_scaled(snap, t[j + 1] - t[j]);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostAccumulator {
    /// Weighted mean queue content over the segment.
    pub cost: f64,
    pub grad: Vec<f64>,
    /// Per-NEP cost contributions (already weighted and normalized).
    pub per_nep: Vec<f64>,
}

/// Cost and gradient of `(1/T) sum omega * integral of x` over the given NEPs.
pub fn accumulate_cost_derivative(
    neps: &[NepRecord],
    model: &ArteryModel,
    duration: f64,
) -> Result<CostAccumulator> {
    if !(duration > 0.0) {
        return Err(Error::Data(format!("segment duration {duration} must be positive")));
    }
    let mut grad = vec![0.0; model.dim()];
    let mut cost = 0.0;
    let mut per_nep = Vec::with_capacity(neps.len());
    for nep in neps {
        let w = model.weight_of(nep.id) / duration;
        let c = w * nep.area()?;
        cost += c;
        per_nep.push(c);
        nep.derivative_area()?.add_to_dense(&mut grad, w);
    }
    Ok(CostAccumulator {
        cost,
        grad,
        per_nep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dir;

    fn model() -> ArteryModel {
        ArteryModel::uniform(1, 200.0, 10.0, 5.0, 1.3)
    }

    fn id() -> QueueId {
        QueueId::new(0, Dir::Side)
    }

    #[test]
    fn nep_without_interior_events() {
        let mut nep = NepRecord::open(1, id(), 0, 30.0, 0.0, SparseGrad::from_dense(&[-0.25, 0.0]));
        nep.close(40.0, 0.0);
        let acc = accumulate_cost_derivative(&[nep], &model(), 100.0).unwrap();
        assert!((acc.grad[0] - (-2.5 / 100.0)).abs() < 1e-15);
    }

    #[test]
    fn nep_with_one_interior_event() {
        // -0.25 over 6 s, then 1.05 over 4 s.
        let mut nep = NepRecord::open(1, id(), 0, 0.0, 0.0, SparseGrad::from_dense(&[-0.25, 0.0]));
        nep.push_event(6.0, 1.5, SparseGrad::from_dense(&[1.05, 0.0]));
        nep.close(10.0, 0.0);
        let area = nep.derivative_area().unwrap();
        assert!((area.get(0) - 2.7).abs() < 1e-12);
        let acc = accumulate_cost_derivative(&[nep], &model(), 1.0).unwrap();
        assert!((acc.grad[0] - 2.7).abs() < 1e-12);
        assert!((acc.cost - 7.5).abs() < 1e-12);
    }

    #[test]
    fn zero_snapshots_give_zero() {
        let mut nep = NepRecord::open(1, id(), 0, 0.0, 0.0, SparseGrad::zero());
        nep.push_event(3.0, 1.0, SparseGrad::zero());
        nep.close(5.0, 0.0);
        let acc = accumulate_cost_derivative(&[nep], &model(), 10.0).unwrap();
        assert_eq!(acc.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn malformed_nep_is_rejected() {
        let mut nep = NepRecord::open(1, id(), 0, 5.0, 0.0, SparseGrad::zero());
        nep.close(5.0, 0.0);
        assert!(matches!(
            accumulate_cost_derivative(&[nep], &model(), 10.0),
            Err(Error::Data(_))
        ));
    }
}
