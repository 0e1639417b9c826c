//! Performance measures built from per-queue integrals.

use serde::Serialize;

use crate::model::{ArteryModel, Dir, QueueId};

/// Integrals of one queue over an interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct QueueTotals {
    /// Integral of the queue content (vehicle-seconds).
    pub queue_time: f64,
    pub arrived: f64,
    pub departed: f64,
    /// Inflow that met a nonempty queue or a RED light.
    pub stopped: f64,
    /// Inflow mapped back to upstream departure time; equals the upstream
    /// volume that has reached this queue.
    pub joined_departure: f64,
}

impl QueueTotals {
    pub fn minus(&self, other: &QueueTotals) -> QueueTotals {
        QueueTotals {
            queue_time: self.queue_time - other.queue_time,
            arrived: self.arrived - other.arrived,
            departed: self.departed - other.departed,
            stopped: self.stopped - other.stopped,
            joined_departure: self.joined_departure - other.joined_departure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub duration: f64,
    /// Weighted mean queue content.
    pub cost: f64,
    pub mean_queue: Vec<f64>,
    pub arrival_rate: Vec<f64>,
    /// Little's-law wait per queue (absent without arrivals).
    pub wait: Vec<Option<f64>>,
    /// Mean time an artery vehicle spends queued along the whole artery.
    pub wait_artery: Option<f64>,
    pub wait_reverse: Option<f64>,
    /// Mean wait of a side-street vehicle.
    pub wait_side: Option<f64>,
    /// Mean wait over all vehicles entering the network.
    pub wait_overall: Option<f64>,
    pub stop_ratio: Option<f64>,
    pub stop_ratio_reverse: Option<f64>,
    pub throughput: Vec<f64>,
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b > 0.0).then(|| a / b)
}

impl MetricsReport {
    pub fn from_totals(model: &ArteryModel, totals: &[QueueTotals], duration: f64) -> Self {
        let ids: Vec<QueueId> = model.queue_ids().collect();
        let mean_queue: Vec<f64> = totals.iter().map(|t| t.queue_time / duration).collect();
        let arrival_rate: Vec<f64> = totals.iter().map(|t| t.arrived / duration).collect();
        let wait = mean_queue
            .iter()
            .zip(&arrival_rate)
            .map(|(&x, &a)| ratio(x, a))
            .collect();
        let cost = ids
            .iter()
            .zip(&mean_queue)
            .map(|(id, x)| model.weight_of(*id) * x)
            .sum();

        let mut queued = [0.0; 3];
        let mut entering = [0.0; 3];
        let mut stopped = [0.0; 3];
        let mut arrived = [0.0; 3];
        for (k, id) in ids.iter().enumerate() {
            let d = id.dir.code() as usize;
            queued[d] += mean_queue[k];
            stopped[d] += totals[k].stopped;
            arrived[d] += totals[k].arrived;
            if model.is_exogenous(*id) {
                entering[d] += arrival_rate[k];
            }
        }
        let code = |d: Dir| d.code() as usize;
        Self {
            duration,
            cost,
            wait,
            wait_artery: ratio(queued[code(Dir::Artery)], entering[code(Dir::Artery)]),
            wait_reverse: ratio(queued[code(Dir::Reverse)], entering[code(Dir::Reverse)]),
            wait_side: ratio(queued[code(Dir::Side)], entering[code(Dir::Side)]),
            wait_overall: ratio(queued.iter().sum(), entering.iter().sum()),
            stop_ratio: ratio(stopped[code(Dir::Artery)], arrived[code(Dir::Artery)]),
            stop_ratio_reverse: ratio(stopped[code(Dir::Reverse)], arrived[code(Dir::Reverse)]),
            throughput: totals.iter().map(|t| t.departed).collect(),
            mean_queue,
            arrival_rate,
        }
    }
}
