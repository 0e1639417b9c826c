//! How a perturbation of one parameter travels between intersections.

use std::fmt;

use serde::Serialize;

use crate::model::QueueId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HopKind {
    /// A front arrival changed the downstream queue's derivative.
    Propagated,
    /// An empty GREEN queue passed a perturbed front straight through.
    Relayed,
    /// The queue emptied and its derivative returned to zero.
    Reset,
    /// The light turned RED while the queue still held a perturbation that
    /// came from upstream.
    GreenWaveBreak,
}

impl HopKind {
    pub fn label(self) -> &'static str {
        match self {
            HopKind::Propagated => "propagated",
            HopKind::Relayed => "relayed",
            HopKind::Reset => "reset",
            HopKind::GreenWaveBreak => "green-wave-break",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hop {
    pub t: f64,
    pub kind: HopKind,
    pub queue: QueueId,
    /// Link the perturbation arrived on, for arrival hops.
    pub link: Option<usize>,
    pub x_prime_before: f64,
    pub x_prime_after: f64,
    pub tau_prime: f64,
}

impl fmt::Display for Hop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={:.3} {:<16} queue {}",
            self.t,
            self.kind.label(),
            self.queue
        )?;
        if let Some(k) = self.link {
            write!(f, " via link {}", k + 1)?;
        }
        write!(
            f,
            " x' {:+.6} -> {:+.6} tau' {:+.6}",
            self.x_prime_before, self.x_prime_after, self.tau_prime
        )
    }
}

/// One row of the per-event derivative log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivRow {
    pub t: f64,
    pub event: &'static str,
    /// 1-based intersection.
    pub n: usize,
    pub d: u8,
    /// 1-based parameter index.
    pub i: usize,
    pub x_prime: f64,
    pub tau_prime: f64,
}
