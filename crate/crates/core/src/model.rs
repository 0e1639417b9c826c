//! Static artery geometry, parameter vector and the local transition rules
//! of the hybrid queue model.
//!
//! Intersections are indexed `0..n` internally; files and reports use the
//! 1-based numbering. Each intersection owns an artery queue (`d = 0`), a side
//! queue (`d = 1`) and, in bidirectional mode, a reverse-artery queue that is
//! GREEN together with the artery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when comparing clocks against thresholds and event times.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dir {
    Artery,
    Side,
    Reverse,
}

impl Dir {
    /// Direction code used in logs: 0 artery, 1 side, 2 reverse artery.
    pub fn code(self) -> u8 {
        match self {
            Dir::Artery => 0,
            Dir::Side => 1,
            Dir::Reverse => 2,
        }
    }

    /// The signal phase that gives this queue GREEN.
    pub fn phase(self) -> usize {
        match self {
            Dir::Artery | Dir::Reverse => 0,
            Dir::Side => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueueId {
    pub n: usize,
    pub dir: Dir,
}

impl QueueId {
    pub fn new(n: usize, dir: Dir) -> Self {
        Self { n, dir }
    }

    /// Stable stream id for random-number splitting; independent of `N`.
    pub fn stream_id(self) -> u64 {
        self.n as u64 * 4 + self.dir.code() as u64
    }
}

impl std::fmt::Display for QueueId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.n + 1, self.dir.code())
    }
}

/// A road segment carrying discharged artery flow to the next queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub from: usize,
    pub to: usize,
    pub length: f64,
    pub speed: f64,
}

/// Static geometry and flow constants of an artery with `n` intersections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArteryModel {
    pub n: usize,
    /// Road length between intersection k and k+1, meters (`n - 1` entries).
    pub link_length: Vec<f64>,
    /// Burst speed on each link, m/s (`n - 1` entries).
    pub link_speed: Vec<f64>,
    /// Effective vehicle length including headway, meters.
    pub vehicle_length: f64,
    /// Unconstrained departure rate, vehicles/s.
    pub h: f64,
    /// Per-queue departure-rate overrides, indexed `[n][dir code]`.
    #[serde(default)]
    pub h_override: Vec<[Option<f64>; 3]>,
    /// Cost weights indexed `[n][dir code]`.
    pub omega: Vec<[f64; 3]>,
    pub bidirectional: bool,
}

impl ArteryModel {
    /// Equal links, unit weights, no overrides.
    pub fn uniform(n: usize, length: f64, speed: f64, vehicle_length: f64, h: f64) -> Self {
        Self {
            n,
            link_length: vec![length; n.saturating_sub(1)],
            link_speed: vec![speed; n.saturating_sub(1)],
            vehicle_length,
            h,
            h_override: vec![[None; 3]; n],
            omega: vec![[1.0; 3]; n],
            bidirectional: false,
        }
    }

    pub fn with_bidirectional(mut self, on: bool) -> Self {
        self.bidirectional = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if self.link_length.len() != self.n - 1 || self.link_speed.len() != self.n - 1 {
            return Err(Error::Config(format!(
                "expected {} link lengths and speeds, got {} and {}",
                self.n - 1,
                self.link_length.len(),
                self.link_speed.len()
            )));
        }
        if self.omega.len() != self.n {
            return Err(Error::Config(format!("expected {} weight rows", self.n)));
        }
        if !self.h_override.is_empty() && self.h_override.len() != self.n {
            return Err(Error::Config(format!("expected {} override rows", self.n)));
        }
        if !(self.vehicle_length > 0.0) {
            return Err(Error::Config("vehicle length must be positive".into()));
        }
        if !(self.h > 0.0) {
            return Err(Error::Config("departure rate H must be positive".into()));
        }
        for (k, (&len, &v)) in self.link_length.iter().zip(&self.link_speed).enumerate() {
            if !(len > 0.0) {
                return Err(Error::Config(format!("link {} length must be positive", k + 1)));
            }
            if !(v > 0.0) {
                return Err(Error::Config(format!("link {} speed must be positive", k + 1)));
            }
        }
        for row in &self.omega {
            if row.iter().any(|w| !(*w >= 0.0)) {
                return Err(Error::Config("weights must be non-negative".into()));
            }
        }
        for row in &self.h_override {
            if row.iter().flatten().any(|h| !(*h > 0.0)) {
                return Err(Error::Config("departure-rate overrides must be positive".into()));
            }
        }
        // A draining queue pulls its tail forward at l*h; the join guard
        // y = Delta(t) only has a finite root while bursts outrun it.
        for link in self.links() {
            let h_max = self.h_of(self.queue_id(link.to));
            if link.speed <= self.vehicle_length * h_max {
                return Err(Error::Config(format!(
                    "burst speed {} must exceed l*h = {}",
                    link.speed,
                    self.vehicle_length * h_max
                )));
            }
        }
        Ok(())
    }

    /// Number of controllable parameters (`2N`).
    pub fn dim(&self) -> usize {
        2 * self.n
    }

    pub fn queues_per_intersection(&self) -> usize {
        if self.bidirectional {
            3
        } else {
            2
        }
    }

    pub fn queue_count(&self) -> usize {
        self.n * self.queues_per_intersection()
    }

    pub fn queue_index(&self, id: QueueId) -> Option<usize> {
        if id.n >= self.n {
            return None;
        }
        let k = self.queues_per_intersection();
        match id.dir {
            Dir::Artery => Some(id.n * k),
            Dir::Side => Some(id.n * k + 1),
            Dir::Reverse if self.bidirectional => Some(id.n * k + 2),
            Dir::Reverse => None,
        }
    }

    pub fn queue_id(&self, index: usize) -> QueueId {
        let k = self.queues_per_intersection();
        let dir = match index % k {
            0 => Dir::Artery,
            1 => Dir::Side,
            _ => Dir::Reverse,
        };
        QueueId::new(index / k, dir)
    }

    pub fn queue_ids(&self) -> impl Iterator<Item = QueueId> + '_ {
        (0..self.queue_count()).map(|q| self.queue_id(q))
    }

    /// Queues whose arrivals are exogenous (not fed by an upstream link).
    pub fn is_exogenous(&self, id: QueueId) -> bool {
        match id.dir {
            Dir::Side => true,
            Dir::Artery => id.n == 0,
            Dir::Reverse => id.n + 1 == self.n,
        }
    }

    pub fn h_of(&self, id: QueueId) -> f64 {
        self.h_override
            .get(id.n)
            .and_then(|row| row[id.dir.code() as usize])
            .unwrap_or(self.h)
    }

    pub fn weight_of(&self, id: QueueId) -> f64 {
        self.omega[id.n][id.dir.code() as usize]
    }

    /// Forward links first (`0..n-1`), then reverse links in the same order.
    pub fn links(&self) -> Vec<Link> {
        let mut out = Vec::new();
        for k in 0..self.n.saturating_sub(1) {
            out.push(Link {
                from: self.queue_index(QueueId::new(k, Dir::Artery)).unwrap(),
                to: self.queue_index(QueueId::new(k + 1, Dir::Artery)).unwrap(),
                length: self.link_length[k],
                speed: self.link_speed[k],
            });
        }
        if self.bidirectional {
            for k in 0..self.n.saturating_sub(1) {
                out.push(Link {
                    from: self.queue_index(QueueId::new(k + 1, Dir::Reverse)).unwrap(),
                    to: self.queue_index(QueueId::new(k, Dir::Reverse)).unwrap(),
                    length: self.link_length[k],
                    speed: self.link_speed[k],
                });
            }
        }
        out
    }
}

/// GREEN-cycle thresholds ordered `[θ_1^0, θ_1^1, ..., θ_N^0, θ_N^1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl ThetaVector {
    pub fn new(values: Vec<f64>, min: f64, max: f64) -> Result<Self> {
        let theta = Self { values, min, max };
        theta.validate()?;
        Ok(theta)
    }

    /// Builds from `(artery, side)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)], min: f64, max: f64) -> Result<Self> {
        Self::new(pairs.iter().flat_map(|&(a, s)| [a, s]).collect(), min, max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0) || !(self.max >= self.min) {
            return Err(Error::Config(format!(
                "theta bounds [{}, {}] must satisfy 0 < min <= max",
                self.min, self.max
            )));
        }
        if self.values.len() % 2 != 0 {
            return Err(Error::Config("theta needs two entries per intersection".into()));
        }
        for (i, &v) in self.values.iter().enumerate() {
            if !(v >= self.min && v <= self.max) {
                return Err(Error::Config(format!(
                    "theta[{}] = {} outside [{}, {}]",
                    i + 1,
                    v,
                    self.min,
                    self.max
                )));
            }
        }
        Ok(())
    }

    /// Parameter index of `θ_n^phase` (0-based).
    pub fn index(n: usize, phase: usize) -> usize {
        2 * n + phase
    }

    pub fn get(&self, n: usize, phase: usize) -> f64 {
        self.values[Self::index(n, phase)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn intersections(&self) -> usize {
        self.values.len() / 2
    }
}

/// Signal pair `(u^0, u^1)` from the phase clocks of one intersection.
pub fn control_signal(z: [f64; 2], theta: [f64; 2]) -> Result<(u8, u8)> {
    let positive = [z[0] > 0.0, z[1] > 0.0];
    if positive[0] == positive[1] {
        return Err(Error::InvalidState(format!(
            "exactly one phase clock must be positive, got z = {:?}",
            z
        )));
    }
    let at_threshold = |d: usize| (z[d] - theta[d]).abs() <= TIME_EPS;
    let green = |d: usize| {
        let running = z[d] > 0.0 && z[d] < theta[d] - TIME_EPS && z[1 - d] == 0.0;
        running || at_threshold(1 - d)
    };
    Ok((green(0) as u8, green(1) as u8))
}

/// Departure rate of a queue under the current signal.
pub fn departure_rate(x: f64, u: u8, alpha: f64, h: f64) -> Result<f64> {
    if x < 0.0 || alpha < 0.0 || h < 0.0 {
        return Err(Error::Domain(format!(
            "negative input to departure rate: x={x}, alpha={alpha}, h={h}"
        )));
    }
    Ok(match (u, x > 0.0) {
        (1, true) => h,
        (1, false) => alpha,
        _ => 0.0,
    })
}

/// Travel time from the upstream stop line to the downstream queue tail.
pub fn transit_delay(length: f64, x_down: f64, vehicle_length: f64, speed: f64) -> Result<f64> {
    if x_down < 0.0 || !(speed > 0.0) || !(vehicle_length > 0.0) {
        return Err(Error::Domain(format!(
            "transit delay inputs out of range: x={x_down}, v={speed}, l={vehicle_length}"
        )));
    }
    let free = length - x_down * vehicle_length;
    if free <= 0.0 {
        return Err(Error::Blocking {
            link: None,
            time: f64::NAN,
            content: x_down,
        });
    }
    Ok(free / speed)
}

pub fn queue_rate(alpha: f64, beta: f64) -> f64 {
    alpha - beta
}

/// Event taxonomy of the hybrid model, including NEP start/end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    XDown0,
    XUp0,
    ZHitTheta,
    AlphaUp0,
    AlphaDown0,
    G2R,
    R2G,
    BurstGen,
    BurstJoin,
    BurstGenEnd,
    BurstJoinEnd,
    NepStart,
    NepEnd,
    RateChange,
}

impl EventKind {
    pub fn label(self) -> &'static str {
        match self {
            EventKind::XDown0 => "x_down0",
            EventKind::XUp0 => "x_up0",
            EventKind::ZHitTheta => "z_hit_theta",
            EventKind::AlphaUp0 => "alpha_up0",
            EventKind::AlphaDown0 => "alpha_down0",
            EventKind::G2R => "G2R",
            EventKind::R2G => "R2G",
            EventKind::BurstGen => "G",
            EventKind::BurstJoin => "J",
            EventKind::BurstGenEnd => "Ge",
            EventKind::BurstJoinEnd => "Je",
            EventKind::NepStart => "S",
            EventKind::NepEnd => "E",
            EventKind::RateChange => "rate_change",
        }
    }
}

/// One logged event occurrence. `n` is 0-based; `m` is the GREEN-cycle index
/// of the originating intersection for burst events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub kind: EventKind,
    pub n: usize,
    pub d: u8,
    pub m: Option<u64>,
    pub tau: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_signal_threshold_cases() {
        assert_eq!(control_signal([30.0, 0.0], [30.0, 20.0]).unwrap(), (0, 1));
        assert_eq!(control_signal([12.0, 0.0], [30.0, 20.0]).unwrap(), (1, 0));
        assert_eq!(control_signal([0.0, 20.0], [30.0, 20.0]).unwrap(), (1, 0));
        assert_eq!(control_signal([0.0, 7.5], [30.0, 20.0]).unwrap(), (0, 1));
    }

    #[test]
    fn control_signal_rejects_ambiguous_clocks() {
        assert!(matches!(
            control_signal([0.0, 0.0], [30.0, 20.0]),
            Err(Error::InvalidState(_))
        ));
        assert!(matches!(
            control_signal([3.0, 4.0], [30.0, 20.0]),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn departure_rate_cases() {
        assert_eq!(departure_rate(4.2, 1, 0.25, 1.3).unwrap(), 1.3);
        assert_eq!(departure_rate(0.0, 1, 0.25, 1.3).unwrap(), 0.25);
        assert_eq!(departure_rate(7.0, 0, 0.25, 1.3).unwrap(), 0.0);
        assert_eq!(departure_rate(0.0, 0, 0.25, 1.3).unwrap(), 0.0);
        assert!(matches!(departure_rate(-1.0, 1, 0.2, 1.3), Err(Error::Domain(_))));
        assert!(matches!(departure_rate(1.0, 1, -0.2, 1.3), Err(Error::Domain(_))));
    }

    #[test]
    fn transit_delay_cases() {
        assert_eq!(transit_delay(200.0, 10.0, 5.0, 10.0).unwrap(), 15.0);
        assert_eq!(transit_delay(200.0, 0.0, 5.0, 10.0).unwrap(), 20.0);
        assert!(matches!(
            transit_delay(100.0, 20.0, 5.0, 10.0),
            Err(Error::Blocking { .. })
        ));
    }

    #[test]
    fn queue_rate_cases() {
        assert!((queue_rate(0.25, 1.3) + 1.05).abs() < 1e-15);
        assert_eq!(queue_rate(0.25, 0.25), 0.0);
        assert_eq!(queue_rate(0.25, 0.0), 0.25);
    }

    #[test]
    fn layout_round_trips() {
        let m = ArteryModel::uniform(3, 200.0, 10.0, 5.0, 1.3).with_bidirectional(true);
        for q in 0..m.queue_count() {
            assert_eq!(m.queue_index(m.queue_id(q)), Some(q));
        }
        assert!(m.is_exogenous(QueueId::new(0, Dir::Artery)));
        assert!(!m.is_exogenous(QueueId::new(1, Dir::Artery)));
        assert!(m.is_exogenous(QueueId::new(2, Dir::Reverse)));
        assert!(!m.is_exogenous(QueueId::new(0, Dir::Reverse)));
        let links = m.links();
        assert_eq!(links.len(), 4);
        assert_eq!(m.queue_id(links[2].from), QueueId::new(1, Dir::Reverse));
        assert_eq!(m.queue_id(links[2].to), QueueId::new(0, Dir::Reverse));
    }

    #[test]
    fn model_validation() {
        let mut m = ArteryModel::uniform(2, 200.0, 10.0, 5.0, 1.3);
        assert!(m.validate().is_ok());
        m.link_length[0] = -1.0;
        assert!(m.validate().is_err());
        let slow = ArteryModel::uniform(2, 200.0, 6.0, 5.0, 1.3);
        assert!(slow.validate().is_err());
        assert!(ThetaVector::from_pairs(&[(35.0, 26.0)], 5.0, 120.0).is_ok());
        assert!(ThetaVector::from_pairs(&[(3.0, 26.0)], 5.0, 120.0).is_err());
        assert!(ThetaVector::new(vec![10.0, 10.0], 0.0, 120.0).is_err());
    }
}
