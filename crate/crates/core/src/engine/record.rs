//! Observed event data handed from the simulator to the derivative engine.
//!
//! Each record carries only what a roadside observer could measure at the
//! event: which queues changed mode, their contents and the flow rates just
//! before and after. The derivative engine never looks at simulator state.

use crate::arrival::RateSteps;

/// What a burst front does to the rate it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrontKind {
    /// Departure rate rises from zero: burst generation / head joins.
    Start,
    /// Departure rate falls to zero: generation ends / tail leaves the road.
    End,
    /// Positive-to-positive rate change inside a burst.
    Shift,
}

impl FrontKind {
    pub fn classify(before: f64, after: f64) -> Option<FrontKind> {
        if before == after {
            None
        } else if before == 0.0 {
            Some(FrontKind::Start)
        } else if after == 0.0 {
            Some(FrontKind::End)
        } else {
            Some(FrontKind::Shift)
        }
    }
}

/// The primary event of a record; its time derivative is inherited by every
/// induced effect in the same record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cause {
    /// Exogenous arrival-rate change (including the t = 0 start-up and
    /// demand perturbations).
    Exogenous { queue: usize },
    /// Phase clock reached its threshold; `ending_phase` goes RED.
    Switch { n: usize, ending_phase: usize },
    /// Queue content reached zero.
    Empty { queue: usize },
    /// A front on `link` reached the tail of `queue`.
    Arrival {
        link: usize,
        queue: usize,
        kind: FrontKind,
    },
}

/// Which state-derivative update applies to a queue at an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transition {
    /// Queue empty before and after.
    InsideEp,
    /// Queue content reached zero.
    EndNep,
    /// RED switch with positive inflow opens a NEP.
    StartBySwitch,
    /// Front arrival opens a NEP.
    StartByJoin,
    /// Exogenous inflow opens a NEP.
    StartExogenous,
    SwitchToRedInNep,
    SwitchToGreenInNep,
    /// Burst head joins a nonempty queue.
    JoinInNep,
    /// Burst tail joins a nonempty queue.
    JoinEndInNep,
    /// In-burst rate change reaches a nonempty queue.
    ShiftInNep,
    /// Exogenous rate change inside a NEP.
    ExogenousInNep,
}

impl Transition {
    pub fn opens_nep(self) -> bool {
        matches!(
            self,
            Transition::StartBySwitch | Transition::StartByJoin | Transition::StartExogenous
        )
    }

    pub fn inside_nep(self) -> bool {
        matches!(
            self,
            Transition::SwitchToRedInNep
                | Transition::SwitchToGreenInNep
                | Transition::JoinInNep
                | Transition::JoinEndInNep
                | Transition::ShiftInNep
                | Transition::ExogenousInNep
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueEffect {
    pub queue: usize,
    pub transition: Transition,
    /// Queue content at the event.
    pub x: f64,
    pub alpha_pre: f64,
    pub alpha_post: f64,
    pub beta_pre: f64,
    pub beta_post: f64,
    pub h: f64,
}

impl QueueEffect {
    pub fn xdot_pre(&self) -> f64 {
        self.alpha_pre - self.beta_pre
    }
}

/// A departure-rate breakpoint put on a link; it inherits the record's
/// event-time derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emission {
    pub link: usize,
    pub kind: FrontKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub tau: f64,
    pub cause: Cause,
    pub effects: Vec<QueueEffect>,
    pub emissions: Vec<Emission>,
}

/// Everything observed on `[t_start, t_end]`, enough to rebuild costs and
/// derivatives without the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub initial_x: Vec<f64>,
    pub initial_busy: Vec<bool>,
    /// Fronts already on each link at `t_start`.
    pub initial_in_flight: Vec<usize>,
    pub final_x: Vec<f64>,
    pub records: Vec<EventRecord>,
    /// Per-queue arrival-rate steps over the segment (for windowed estimates).
    pub arrival_steps: Vec<RateSteps>,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}
