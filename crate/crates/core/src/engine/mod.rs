//! Event-driven execution of the fluid artery model.
//!
//! Every queue content is piecewise linear between events, so each guard
//! crossing has a closed-form time. Queues are advanced lazily: a queue is
//! only brought up to the current clock when an event touches it, and its
//! integrals (queue time, arrivals, departures, stopped flow) are accumulated
//! at that moment.

pub mod history;
pub mod metrics;
pub mod record;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::arrival::{derive_seed, OnOffStream, RateSteps};
use crate::error::{Error, Result};
use crate::model::{ArteryModel, Dir, EventKind, QueueId, SimEvent, ThetaVector, TIME_EPS};
use crate::scenario::{Perturbation, Scenario};

pub use history::{clock_crossing, delayed_upstream_rate, linear_root, StepHistory};
pub use metrics::{MetricsReport, QueueTotals};
pub use record::{Cause, Emission, EventRecord, FrontKind, QueueEffect, Segment, Transition};

/// Seed tag for per-queue arrival streams.
pub const ARRIVAL_TAG: u64 = 0xA441;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Keep the [`SimEvent`] log.
    pub record_events: bool,
    /// Keep a snapshot of every queue content at each logged event.
    pub record_states: bool,
}

impl SimOptions {
    pub fn with_events() -> Self {
        Self {
            record_events: true,
            record_states: false,
        }
    }

    pub fn with_states() -> Self {
        Self {
            record_events: true,
            record_states: true,
        }
    }
}

/// A flow burst travelling on a link: one maximal interval of positive
/// upstream discharge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurstRecord {
    pub origin: usize,
    pub ordinal: u64,
    /// GREEN-cycle index of the origin intersection at generation.
    pub cycle: u64,
    pub generated: f64,
    pub generation_ended: Option<f64>,
    pub joined: bool,
}

#[derive(Debug, Clone, Copy)]
struct FrontMeta {
    kind: FrontKind,
    burst: u64,
    cycle: u64,
}

#[derive(Debug, Clone)]
struct LinkState {
    from: usize,
    to: usize,
    length: f64,
    speed: f64,
    history: StepHistory,
    fronts: VecDeque<FrontMeta>,
    bursts: VecDeque<BurstRecord>,
    next_burst: u64,
}

#[derive(Debug, Clone)]
struct QueueState {
    id: QueueId,
    h: f64,
    x: f64,
    /// Time at which `x` was last brought up to date.
    t: f64,
    alpha: f64,
    beta: f64,
    busy: bool,
    feeds: Option<usize>,
    fed_by: Option<usize>,
    /// `l / v` of the feeding link, zero for exogenous queues.
    lv: f64,
    totals: QueueTotals,
}

impl QueueState {
    fn xdot(&self) -> f64 {
        self.alpha - self.beta
    }

    fn x_at(&self, t: f64) -> f64 {
        (self.x + self.xdot() * (t - self.t)).max(0.0)
    }

    fn advance(&mut self, t: f64, green: bool) {
        let dt = t - self.t;
        if dt <= 0.0 {
            return;
        }
        let xdot = self.xdot();
        let mut x1 = self.x + xdot * dt;
        let area = if x1 < 0.0 {
            let to_zero = self.x / -xdot;
            x1 = 0.0;
            0.5 * self.x * to_zero
        } else {
            0.5 * (self.x + x1) * dt
        };
        let tot = &mut self.totals;
        tot.queue_time += area;
        tot.arrived += self.alpha * dt;
        tot.departed += self.beta * dt;
        if self.busy || !green {
            tot.stopped += self.alpha * dt;
        }
        tot.joined_departure += self.alpha * (dt + self.lv * (x1 - self.x));
        self.x = x1;
        self.t = t;
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    green: usize,
    phase_start: f64,
    cycle: u64,
}

#[derive(Debug, Clone)]
struct ExoSource {
    queue: usize,
    stream: OnOffStream,
}

#[derive(Debug, Clone, Copy)]
enum Trigger {
    SwitchToRed,
    SwitchToGreen,
    Arrival(FrontKind),
    Exogenous,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    time: f64,
    prio: u8,
    key: usize,
    version: u64,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.prio.cmp(&self.prio))
            .then(other.key.cmp(&self.key))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Tie priorities: light switches first, then burst tails, burst heads and
// in-burst shifts, queue emptying, exogenous changes.
const PRIO_BLOCK: u8 = 0;
const PRIO_SWITCH: u8 = 1;
const PRIO_JOIN_END: u8 = 4;
const PRIO_JOIN: u8 = 5;
const PRIO_EMPTY: u8 = 6;
const PRIO_EXO: u8 = 7;

#[derive(Debug, Clone, Copy)]
enum Source {
    Switch(usize),
    Empty(usize),
    Block(usize),
    Front(usize),
    Exo(usize),
    Perturb,
}

#[derive(Debug, Clone)]
struct SegmentStart {
    t: f64,
    x: Vec<f64>,
    busy: Vec<bool>,
    in_flight: Vec<usize>,
    totals: Vec<QueueTotals>,
}

/// The event-driven simulator for one sample path.
#[derive(Debug, Clone)]
pub struct Simulator {
    model: ArteryModel,
    theta: ThetaVector,
    now: f64,
    queues: Vec<QueueState>,
    links: Vec<LinkState>,
    nodes: Vec<Node>,
    exo: Vec<ExoSource>,
    perturbations: Vec<Perturbation>,
    next_perturbation: usize,
    heap: BinaryHeap<Entry>,
    versions: Vec<u64>,
    options: SimOptions,
    events: Vec<SimEvent>,
    states: Vec<Vec<f64>>,
    records: Vec<EventRecord>,
    arrival_steps: Vec<RateSteps>,
    start: SegmentStart,
}

impl Simulator {
    /// Builds the initial state (all queues empty, artery GREEN) and applies
    /// the arrival rates in force at `t = 0`.
    pub fn new(scenario: &Scenario, theta: &ThetaVector, seed: u64, options: SimOptions) -> Result<Self> {
        let model = scenario.model.clone();
        model.validate()?;
        theta.validate()?;
        if theta.intersections() != model.n {
            return Err(Error::Config(format!(
                "theta has {} pairs for N = {}",
                theta.intersections(),
                model.n
            )));
        }
        let links_spec = model.links();
        let mut queues: Vec<QueueState> = model
            .queue_ids()
            .map(|id| QueueState {
                id,
                h: model.h_of(id),
                x: 0.0,
                t: 0.0,
                alpha: 0.0,
                beta: 0.0,
                busy: false,
                feeds: None,
                fed_by: None,
                lv: 0.0,
                totals: QueueTotals::default(),
            })
            .collect();
        let mut links = Vec::with_capacity(links_spec.len());
        for (k, l) in links_spec.iter().enumerate() {
            queues[l.from].feeds = Some(k);
            queues[l.to].fed_by = Some(k);
            queues[l.to].lv = model.vehicle_length / l.speed;
            links.push(LinkState {
                from: l.from,
                to: l.to,
                length: l.length,
                speed: l.speed,
                history: StepHistory::new(0.0, 0.0),
                fronts: VecDeque::new(),
                bursts: VecDeque::new(),
                next_burst: 0,
            });
        }
        let mut exo = Vec::new();
        for (id, process) in &scenario.arrivals {
            let queue = model.queue_index(*id).ok_or_else(|| {
                Error::Config(format!("arrival process for missing queue {id}"))
            })?;
            if !model.is_exogenous(*id) {
                return Err(Error::Config(format!("queue {id} is not exogenous")));
            }
            process.validate()?;
            let stream = OnOffStream::new(*process, derive_seed(seed, &[ARRIVAL_TAG, id.stream_id()]));
            exo.push(ExoSource { queue, stream });
        }
        let qn = queues.len();
        let key_count = model.n + 2 * qn + links.len() + exo.len() + 1;
        let start = SegmentStart {
            t: 0.0,
            x: vec![0.0; qn],
            busy: vec![false; qn],
            in_flight: vec![0; links.len()],
            totals: vec![QueueTotals::default(); qn],
        };
        let mut sim = Self {
            nodes: vec![
                Node {
                    green: 0,
                    phase_start: 0.0,
                    cycle: 1,
                };
                model.n
            ],
            model,
            theta: theta.clone(),
            now: 0.0,
            queues,
            links,
            exo,
            perturbations: scenario.perturbations.clone(),
            next_perturbation: 0,
            heap: BinaryHeap::new(),
            versions: vec![0; key_count],
            options,
            events: Vec::new(),
            states: Vec::new(),
            records: Vec::new(),
            arrival_steps: vec![vec![(0.0, 0.0)]; qn],
            start,
        };
        sim.perturbations.sort_by(|a, b| a.time.total_cmp(&b.time));
        for e in 0..sim.exo.len() {
            let rate = sim.exo[e].stream.rate();
            sim.apply_exogenous(e, rate)?;
            let next = sim.exo[e].stream.next_switch();
            sim.schedule(Source::Exo(e), Some(next));
        }
        for n in 0..sim.model.n {
            let t = sim.theta.get(n, 0);
            sim.schedule(Source::Switch(n), Some(t));
        }
        sim.schedule_next_perturbation();
        Ok(sim)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn model(&self) -> &ArteryModel {
        &self.model
    }

    pub fn theta(&self) -> &ThetaVector {
        &self.theta
    }

    /// Queue contents at the current time.
    pub fn contents(&self) -> Vec<f64> {
        self.queues.iter().map(|q| q.x_at(self.now)).collect()
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn bursts(&self, link: usize) -> impl Iterator<Item = &BurstRecord> {
        self.links[link].bursts.iter()
    }

    /// Replaces the thresholds; a phase whose new threshold has already
    /// elapsed switches immediately.
    pub fn set_theta(&mut self, theta: &ThetaVector) -> Result<()> {
        theta.validate()?;
        if theta.intersections() != self.model.n {
            return Err(Error::Config("theta dimension changed mid-run".into()));
        }
        self.theta = theta.clone();
        for n in 0..self.model.n {
            let node = self.nodes[n];
            let t = node.phase_start + self.theta.get(n, node.green);
            self.schedule(Source::Switch(n), Some(t.max(self.now)));
        }
        Ok(())
    }

    /// Processes every event strictly before `t_end` and advances all queues
    /// to `t_end`.
    pub fn run_until(&mut self, t_end: f64) -> Result<()> {
        if t_end < self.now {
            return Err(Error::Config(format!(
                "cannot run backwards from {} to {}",
                self.now, t_end
            )));
        }
        while let Some(entry) = self.pop_next(t_end) {
            self.now = self.now.max(entry.time);
            self.dispatch(entry)?;
        }
        self.now = t_end;
        for q in 0..self.queues.len() {
            self.touch(q);
        }
        Ok(())
    }

    /// Hands over the records observed since the previous call (or since
    /// `t = 0`) and starts a new segment at the current time.
    pub fn take_segment(&mut self) -> (Segment, Vec<QueueTotals>) {
        for q in 0..self.queues.len() {
            self.touch(q);
        }
        let now = self.now;
        let final_x: Vec<f64> = self.queues.iter().map(|q| q.x).collect();
        let busy: Vec<bool> = self.queues.iter().map(|q| q.busy).collect();
        let in_flight: Vec<usize> = self.links.iter().map(|l| l.fronts.len()).collect();
        let totals: Vec<QueueTotals> = self.queues.iter().map(|q| q.totals).collect();
        let window: Vec<QueueTotals> = totals
            .iter()
            .zip(&self.start.totals)
            .map(|(a, b)| a.minus(b))
            .collect();
        let fresh_steps = self.queues.iter().map(|q| vec![(now, q.alpha)]).collect();
        let segment = Segment {
            t_start: self.start.t,
            t_end: now,
            initial_x: std::mem::replace(&mut self.start.x, final_x.clone()),
            initial_busy: std::mem::replace(&mut self.start.busy, busy),
            initial_in_flight: std::mem::replace(&mut self.start.in_flight, in_flight),
            final_x,
            records: std::mem::take(&mut self.records),
            arrival_steps: std::mem::replace(&mut self.arrival_steps, fresh_steps),
        };
        self.start.t = now;
        self.start.totals = totals;
        (segment, window)
    }

    /// Cumulative per-queue totals since `t = 0`.
    pub fn totals(&self) -> Vec<QueueTotals> {
        self.queues
            .iter()
            .map(|q| {
                let mut c = q.clone();
                c.advance(self.now, self.is_green(q));
                c.totals
            })
            .collect()
    }

    /// Upstream discharge still on each link at the current time.
    pub fn in_transit(&self) -> Result<Vec<f64>> {
        self.links
            .iter()
            .map(|l| {
                let x = self.queues[l.to].x_at(self.now);
                let delta = (l.length - self.model.vehicle_length * x) / l.speed;
                let from = (self.now - delta).max(l.history.retained_from());
                l.history.volume(from, self.now)
            })
            .collect()
    }

    fn is_green(&self, q: &QueueState) -> bool {
        self.nodes[q.id.n].green == q.id.dir.phase()
    }

    fn touch(&mut self, q: usize) {
        let green = self.is_green(&self.queues[q]);
        let now = self.now;
        self.queues[q].advance(now, green);
    }

    fn key(&self, source: Source) -> usize {
        let n = self.model.n;
        let qn = self.queues.len();
        let kn = self.links.len();
        match source {
            Source::Switch(i) => i,
            Source::Empty(q) => n + q,
            Source::Block(q) => n + qn + q,
            Source::Front(k) => n + 2 * qn + k,
            Source::Exo(e) => n + 2 * qn + kn + e,
            Source::Perturb => n + 2 * qn + kn + self.exo.len(),
        }
    }

    fn source(&self, key: usize) -> Source {
        let n = self.model.n;
        let qn = self.queues.len();
        let kn = self.links.len();
        if key < n {
            Source::Switch(key)
        } else if key < n + qn {
            Source::Empty(key - n)
        } else if key < n + 2 * qn {
            Source::Block(key - n - qn)
        } else if key < n + 2 * qn + kn {
            Source::Front(key - n - 2 * qn)
        } else if key < n + 2 * qn + kn + self.exo.len() {
            Source::Exo(key - n - 2 * qn - kn)
        } else {
            Source::Perturb
        }
    }

    fn schedule(&mut self, source: Source, time: Option<f64>) {
        let key = self.key(source);
        self.versions[key] += 1;
        let Some(time) = time.filter(|t| t.is_finite()) else {
            return;
        };
        let prio = match source {
            Source::Block(_) => PRIO_BLOCK,
            Source::Switch(_) => PRIO_SWITCH,
            Source::Front(k) => match self.links[k].fronts.front().map(|f| f.kind) {
                Some(FrontKind::End) => PRIO_JOIN_END,
                _ => PRIO_JOIN,
            },
            Source::Empty(_) => PRIO_EMPTY,
            Source::Exo(_) | Source::Perturb => PRIO_EXO,
        };
        self.heap.push(Entry {
            time,
            prio,
            key,
            version: self.versions[key],
        });
    }

    fn is_live(&self, e: &Entry) -> bool {
        self.versions[e.key] == e.version
    }

    /// Earliest live entry before `t_end`; among entries within the tie
    /// window of it, the one with the best priority.
    fn pop_next(&mut self, t_end: f64) -> Option<Entry> {
        while let Some(top) = self.heap.peek() {
            if self.is_live(top) {
                break;
            }
            self.heap.pop();
        }
        let first = *self.heap.peek()?;
        if first.time >= t_end {
            return None;
        }
        self.heap.pop();
        let mut best = first;
        let mut held = Vec::new();
        while let Some(next) = self.heap.peek().copied() {
            if next.time > first.time + TIME_EPS {
                break;
            }
            self.heap.pop();
            if !self.is_live(&next) {
                continue;
            }
            if (next.prio, next.key) < (best.prio, best.key) {
                held.push(best);
                best = next;
            } else {
                held.push(next);
            }
        }
        self.heap.extend(held);
        Some(best)
    }

    fn dispatch(&mut self, entry: Entry) -> Result<()> {
        match self.source(entry.key) {
            Source::Switch(n) => self.handle_switch(n),
            Source::Empty(q) => self.handle_empty(q),
            Source::Block(q) => {
                self.touch(q);
                Err(Error::Blocking {
                    link: self.queues[q].fed_by,
                    time: self.now,
                    content: self.queues[q].x,
                })
            }
            Source::Front(k) => self.handle_arrival(k),
            Source::Exo(e) => {
                let rate = self.exo[e].stream.advance();
                self.apply_exogenous(e, rate)?;
                let next = self.exo[e].stream.next_switch();
                self.schedule(Source::Exo(e), Some(next));
                Ok(())
            }
            Source::Perturb => {
                let p = self.perturbations[self.next_perturbation];
                self.next_perturbation += 1;
                let q = self.model.queue_index(p.queue).expect("validated queue");
                if let Some(e) = self.exo.iter().position(|s| s.queue == q) {
                    self.exo[e].stream.set_mean_rate(p.mean_rate);
                    if self.exo[e].stream.is_on() {
                        let rate = self.exo[e].stream.rate();
                        self.apply_exogenous(e, rate)?;
                    }
                }
                self.schedule_next_perturbation();
                Ok(())
            }
        }
    }

    fn schedule_next_perturbation(&mut self) {
        let t = self.perturbations.get(self.next_perturbation).map(|p| p.time);
        self.schedule(Source::Perturb, t);
    }

    fn log(&mut self, kind: EventKind, n: usize, d: u8, m: Option<u64>) {
        if !self.options.record_events {
            return;
        }
        self.events.push(SimEvent {
            kind,
            n,
            d,
            m,
            tau: self.now,
        });
        if self.options.record_states {
            let now = self.now;
            self.states.push(self.queues.iter().map(|q| q.x_at(now)).collect());
        }
    }

    fn apply_exogenous(&mut self, e: usize, rate: f64) -> Result<()> {
        let q = self.exo[e].queue;
        self.touch(q);
        let before = self.queues[q].alpha;
        if rate == before {
            return Ok(());
        }
        let id = self.queues[q].id;
        let kind = if before == 0.0 {
            EventKind::AlphaUp0
        } else if rate == 0.0 {
            EventKind::AlphaDown0
        } else {
            EventKind::RateChange
        };
        self.log(kind, id.n, id.dir.code(), None);
        let mut rec = self.record(Cause::Exogenous { queue: q });
        self.retune(q, rate, Trigger::Exogenous, &mut rec)?;
        self.records.push(rec);
        Ok(())
    }

    fn record(&self, cause: Cause) -> EventRecord {
        EventRecord {
            tau: self.now,
            cause,
            effects: Vec::new(),
            emissions: Vec::new(),
        }
    }

    fn handle_switch(&mut self, n: usize) -> Result<()> {
        let k = self.model.queues_per_intersection();
        for q in n * k..(n + 1) * k {
            self.touch(q);
        }
        let ending = self.nodes[n].green;
        let starting = 1 - ending;
        {
            let node = &mut self.nodes[n];
            node.green = starting;
            node.phase_start = self.now;
            if starting == 0 {
                node.cycle += 1;
            }
        }
        self.log(EventKind::ZHitTheta, n, ending as u8, None);
        self.log(EventKind::G2R, n, ending as u8, None);
        self.log(EventKind::R2G, n, starting as u8, None);
        let mut rec = self.record(Cause::Switch {
            n,
            ending_phase: ending,
        });
        for q in n * k..(n + 1) * k {
            let trigger = if self.queues[q].id.dir.phase() == starting {
                Trigger::SwitchToGreen
            } else {
                Trigger::SwitchToRed
            };
            let alpha = self.queues[q].alpha;
            self.retune(q, alpha, trigger, &mut rec)?;
        }
        self.records.push(rec);
        let next = self.now + self.theta.get(n, starting);
        self.schedule(Source::Switch(n), Some(next));
        Ok(())
    }

    fn handle_empty(&mut self, q: usize) -> Result<()> {
        self.touch(q);
        let id = self.queues[q].id;
        self.log(EventKind::XDown0, id.n, id.dir.code(), None);
        self.log(EventKind::NepEnd, id.n, id.dir.code(), None);
        let mut rec = self.record(Cause::Empty { queue: q });
        let alpha = self.queues[q].alpha;
        self.retune(q, alpha, Trigger::Empty, &mut rec)?;
        self.records.push(rec);
        Ok(())
    }

    fn handle_arrival(&mut self, k: usize) -> Result<()> {
        let q = self.links[k].to;
        self.touch(q);
        let link = &mut self.links[k];
        let (_, rate) = link
            .history
            .pop_front()
            .ok_or_else(|| Error::Internal(format!("arrival on empty link {}", k + 1)))?;
        let meta = link.fronts.pop_front().expect("fronts mirror history");
        match meta.kind {
            FrontKind::Start => {
                let pending = link.bursts.iter_mut().find(|b| !b.joined);
                match pending {
                    Some(b) if b.ordinal == meta.burst => b.joined = true,
                    _ => {
                        return Err(Error::Assumption(format!(
                            "burst {} on link {} joined out of creation order",
                            meta.burst,
                            k + 1
                        )))
                    }
                }
            }
            FrontKind::End => match link.bursts.pop_front() {
                Some(b) if b.ordinal == meta.burst && b.joined => {}
                _ => {
                    return Err(Error::Assumption(format!(
                        "burst {} on link {} ended out of creation order",
                        meta.burst,
                        k + 1
                    )))
                }
            },
            FrontKind::Shift => {}
        }
        let origin = self.queues[self.links[k].from].id;
        let event = match meta.kind {
            FrontKind::Start => EventKind::BurstJoin,
            FrontKind::End => EventKind::BurstJoinEnd,
            FrontKind::Shift => EventKind::RateChange,
        };
        self.log(event, origin.n, origin.dir.code(), Some(meta.cycle));
        let mut rec = self.record(Cause::Arrival {
            link: k,
            queue: q,
            kind: meta.kind,
        });
        self.retune(q, rate, Trigger::Arrival(meta.kind), &mut rec)?;
        self.records.push(rec);
        Ok(())
    }

    /// Applies a new arrival rate and/or the current signal to queue `q`,
    /// records the effect, emits a front if the departure rate changed and
    /// refreshes the queue's pending events.
    fn retune(&mut self, q: usize, alpha: f64, trigger: Trigger, rec: &mut EventRecord) -> Result<()> {
        let green = self.is_green(&self.queues[q]);
        let now = self.now;
        let qs = &mut self.queues[q];
        let (alpha_pre, beta_pre, busy_pre) = (qs.alpha, qs.beta, qs.busy);
        if matches!(trigger, Trigger::Empty) {
            qs.x = 0.0;
            qs.busy = false;
        }
        qs.alpha = alpha;
        let (busy, beta) = if qs.busy {
            (true, if green { qs.h } else { 0.0 })
        } else if !green {
            (alpha > 0.0, 0.0)
        } else if alpha > qs.h {
            (true, qs.h)
        } else {
            (false, alpha)
        };
        qs.busy = busy;
        qs.beta = beta;
        let transition = classify(busy_pre, busy, trigger).ok_or_else(|| {
            Error::Internal(format!(
                "no transition for {:?} at queue {} (busy {} -> {})",
                trigger, qs.id, busy_pre, busy
            ))
        })?;
        rec.effects.push(QueueEffect {
            queue: q,
            transition,
            x: qs.x,
            alpha_pre,
            alpha_post: alpha,
            beta_pre,
            beta_post: beta,
            h: qs.h,
        });
        let id = qs.id;
        let feeds = qs.feeds;
        if alpha != alpha_pre {
            let steps = &mut self.arrival_steps[q];
            match steps.last_mut() {
                Some(last) if last.0 == now => last.1 = alpha,
                _ => steps.push((now, alpha)),
            }
        }
        if transition.opens_nep() {
            self.log(EventKind::XUp0, id.n, id.dir.code(), None);
            self.log(EventKind::NepStart, id.n, id.dir.code(), None);
        }
        if let Some(k) = feeds {
            if let Some(kind) = FrontKind::classify(beta_pre, beta) {
                self.emit(k, kind, beta, rec);
            }
        }
        self.refresh(q);
        Ok(())
    }

    fn emit(&mut self, k: usize, kind: FrontKind, rate: f64, rec: &mut EventRecord) {
        let now = self.now;
        let origin = self.queues[self.links[k].from].id;
        let cycle = self.nodes[origin.n].cycle;
        let link = &mut self.links[k];
        let burst = match kind {
            FrontKind::Start => {
                let ordinal = link.next_burst;
                link.next_burst += 1;
                link.bursts.push_back(BurstRecord {
                    origin: origin.n,
                    ordinal,
                    cycle,
                    generated: now,
                    generation_ended: None,
                    joined: false,
                });
                ordinal
            }
            FrontKind::End | FrontKind::Shift => {
                let open = link
                    .bursts
                    .back_mut()
                    .expect("positive discharge belongs to a burst");
                if kind == FrontKind::End {
                    open.generation_ended = Some(now);
                }
                open.ordinal
            }
        };
        link.history.push(now, rate);
        link.fronts.push_back(FrontMeta { kind, burst, cycle });
        let first = link.fronts.len() == 1;
        rec.emissions.push(Emission { link: k, kind });
        match kind {
            FrontKind::Start => self.log(EventKind::BurstGen, origin.n, origin.dir.code(), Some(cycle)),
            FrontKind::End => self.log(EventKind::BurstGenEnd, origin.n, origin.dir.code(), Some(cycle)),
            FrontKind::Shift => {}
        }
        if first {
            let t = self.front_time(k);
            self.schedule(Source::Front(k), t);
        }
    }

    /// Arrival time of the head front on link `k`: the first time at which
    /// its age equals the transit delay to the downstream queue tail.
    fn front_time(&self, k: usize) -> Option<f64> {
        let link = &self.links[k];
        let (departed, _) = link.history.front()?;
        let q = &self.queues[link.to];
        let delta = (link.length - self.model.vehicle_length * q.x) / link.speed;
        let slope = -q.lv * q.xdot();
        let s = clock_crossing(q.t - departed, delta, slope)?;
        Some((q.t + s).max(self.now))
    }

    fn refresh(&mut self, q: usize) {
        let qs = &self.queues[q];
        let xdot = qs.xdot();
        let empty = if qs.busy {
            linear_root(qs.x, xdot).map(|s| qs.t + s)
        } else {
            None
        };
        let block = match qs.fed_by {
            Some(k) if xdot > 0.0 => {
                let cap = self.links[k].length / self.model.vehicle_length;
                Some(qs.t + ((cap - qs.x) / xdot).max(0.0))
            }
            _ => None,
        };
        let fed_by = qs.fed_by;
        self.schedule(Source::Empty(q), empty);
        self.schedule(Source::Block(q), block);
        if let Some(k) = fed_by {
            let t = self.front_time(k);
            self.schedule(Source::Front(k), t);
        }
    }

    /// Consumes the simulator after running to `horizon`.
    pub fn finish(mut self, horizon: f64) -> Result<Trajectory> {
        self.run_until(horizon)?;
        let in_transit = self.in_transit()?;
        let totals: Vec<QueueTotals> = self.queues.iter().map(|q| q.totals).collect();
        let queue_ids: Vec<QueueId> = self.queues.iter().map(|q| q.id).collect();
        let (segment, _) = self.take_segment();
        Ok(Trajectory {
            horizon,
            queue_ids,
            events: self.events,
            states: self.states,
            segment,
            totals,
            in_transit,
        })
    }
}

fn classify(busy_pre: bool, busy_post: bool, trigger: Trigger) -> Option<Transition> {
    use Transition::*;
    if let Trigger::Empty = trigger {
        return Some(EndNep);
    }
    Some(match (busy_pre, busy_post) {
        (false, false) => InsideEp,
        (false, true) => match trigger {
            Trigger::SwitchToRed => StartBySwitch,
            Trigger::Arrival(_) => StartByJoin,
            Trigger::Exogenous => StartExogenous,
            _ => return None,
        },
        (true, true) => match trigger {
            Trigger::SwitchToRed => SwitchToRedInNep,
            Trigger::SwitchToGreen => SwitchToGreenInNep,
            Trigger::Arrival(FrontKind::Start) => JoinInNep,
            Trigger::Arrival(FrontKind::End) => JoinEndInNep,
            Trigger::Arrival(FrontKind::Shift) => ShiftInNep,
            Trigger::Exogenous => ExogenousInNep,
            Trigger::Empty => return None,
        },
        (true, false) => return None,
    })
}

/// A completed sample path on `[0, horizon]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub horizon: f64,
    pub queue_ids: Vec<QueueId>,
    pub events: Vec<SimEvent>,
    /// Queue contents at each logged event (empty unless requested).
    pub states: Vec<Vec<f64>>,
    pub segment: Segment,
    pub totals: Vec<QueueTotals>,
    /// Discharged volume still on each link at the horizon.
    pub in_transit: Vec<f64>,
}

impl Trajectory {
    pub fn throughput(&self) -> Vec<f64> {
        self.totals.iter().map(|t| t.departed).collect()
    }

    /// Event kinds with their indices, for comparing event orders.
    pub fn signature(&self) -> Vec<(EventKind, usize, u8)> {
        self.events.iter().map(|e| (e.kind, e.n, e.d)).collect()
    }

    /// Writes `t,kind,n,d,m` plus one content column per queue. Requires the
    /// path to have been run with [`SimOptions::with_states`].
    pub fn write_events_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "kind".into(), "n".into(), "d".into(), "m".into()];
        header.extend(self.queue_ids.iter().map(|q| format!("x_{}_{}", q.n + 1, q.dir.code())));
        w.write_record(&header)?;
        for (k, e) in self.events.iter().enumerate() {
            let mut row = vec![
                format!("{}", e.tau),
                e.kind.label().to_string(),
                (e.n + 1).to_string(),
                e.d.to_string(),
                e.m.map(|m| m.to_string()).unwrap_or_default(),
            ];
            if let Some(xs) = self.states.get(k) {
                row.extend(xs.iter().map(|x| format!("{x}")));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one sample path on `[0, scenario.horizon]` at `theta`.
pub fn run_sample_path(
    scenario: &Scenario,
    theta: &ThetaVector,
    seed: u64,
    options: SimOptions,
) -> Result<(Trajectory, MetricsReport)> {
    let sim = Simulator::new(scenario, theta, seed, options)?;
    let traj = sim.finish(scenario.horizon)?;
    let report = MetricsReport::from_totals(&scenario.model, &traj.totals, traj.horizon);
    Ok((traj, report))
}

/// Stop ratio per artery direction `(forward, reverse)`.
pub fn stop_ratio(model: &ArteryModel, traj: &Trajectory) -> (Option<f64>, Option<f64>) {
    let r = MetricsReport::from_totals(model, &traj.totals, traj.horizon);
    (r.stop_ratio, r.stop_ratio_reverse)
}

/// Queue indices of the artery in travel order for one direction.
pub fn artery_chain(model: &ArteryModel, dir: Dir) -> Vec<usize> {
    let mut v: Vec<usize> = (0..model.n)
        .filter_map(|n| model.queue_index(QueueId::new(n, dir)))
        .collect();
    if dir == Dir::Reverse {
        v.reverse();
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arrival::ArrivalProcess;
    use crate::scenario::paper_3x;

    fn single(theta: (f64, f64), side: f64, artery: f64, horizon: f64) -> Scenario {
        let model = ArteryModel::uniform(1, 200.0, 10.0, 5.0, 1.3);
        let theta = ThetaVector::from_pairs(&[theta], 5.0, 120.0).unwrap();
        let mut s = Scenario::new(model, theta, horizon);
        if side > 0.0 {
            s = s.with_arrival(QueueId::new(0, Dir::Side), ArrivalProcess::constant(side));
        }
        if artery > 0.0 {
            s = s.with_arrival(QueueId::new(0, Dir::Artery), ArrivalProcess::constant(artery));
        }
        s
    }

    #[test]
    fn empty_network_costs_nothing() {
        let s = single((30.0, 20.0), 0.0, 0.0, 500.0);
        let (traj, report) = run_sample_path(&s, &s.theta0, 1, SimOptions::with_events()).unwrap();
        assert_eq!(report.cost, 0.0);
        assert!(!traj.events.iter().any(|e| e.kind == EventKind::NepStart));
        assert_eq!(report.stop_ratio, None);
    }

    #[test]
    fn side_queue_triangle_wave() {
        // RED for 30 s at 0.1 veh/s: peak 3.0, then drains at 1.3 - 0.1 = 1.2.
        let s = single((30.0, 20.0), 0.1, 0.0, 50.0);
        let mut sim = Simulator::new(&s, &s.theta0, 1, SimOptions::with_states()).unwrap();
        sim.run_until(30.0).unwrap();
        assert!((sim.contents()[1] - 3.0).abs() < 1e-12);
        sim.run_until(31.0).unwrap();
        assert!((sim.contents()[1] - 1.8).abs() < 1e-12);
        let traj = sim.finish(50.0).unwrap();
        let end = traj
            .events
            .iter()
            .find(|e| e.kind == EventKind::NepEnd)
            .unwrap();
        assert!((end.tau - 32.5).abs() < 1e-12);
        // Area of the triangle: 0.5 * 3.0 * 32.5.
        assert!((traj.totals[1].queue_time - 48.75).abs() < 1e-9);
    }

    #[test]
    fn empty_downstream_queue_gives_free_flow_transit() {
        let model = ArteryModel::uniform(2, 200.0, 10.0, 5.0, 1.3);
        let theta = ThetaVector::from_pairs(&[(30.0, 20.0), (30.0, 20.0)], 5.0, 120.0).unwrap();
        let s = Scenario::new(model, theta, 200.0)
            .with_arrival(QueueId::new(0, Dir::Artery), ArrivalProcess::constant(0.5));
        let (traj, _) = run_sample_path(&s, &s.theta0, 3, SimOptions::with_events()).unwrap();
        let gen = traj.events.iter().find(|e| e.kind == EventKind::BurstGen).unwrap();
        let join = traj.events.iter().find(|e| e.kind == EventKind::BurstJoin).unwrap();
        assert!((join.tau - gen.tau - 20.0).abs() < 1e-9);
    }

    #[test]
    fn loaded_downstream_queue_shortens_transit() {
        // Long artery RED at intersection 2 lets its queue build up, so later
        // fronts join the tail before covering the whole link.
        let model = ArteryModel::uniform(2, 200.0, 10.0, 5.0, 1.3);
        let theta = ThetaVector::from_pairs(&[(30.0, 20.0), (20.0, 40.0)], 5.0, 120.0).unwrap();
        let s = Scenario::new(model, theta, 300.0)
            .with_arrival(QueueId::new(0, Dir::Artery), ArrivalProcess::constant(0.25));
        let (traj, _) = run_sample_path(&s, &s.theta0, 3, SimOptions::with_events()).unwrap();
        let gens = traj.events.iter().filter(|e| e.kind == EventKind::BurstGen);
        let joins = traj.events.iter().filter(|e| e.kind == EventKind::BurstJoin);
        let transits: Vec<f64> = gens.zip(joins).map(|(g, j)| j.tau - g.tau).collect();
        assert!(transits.iter().all(|d| *d > 0.0 && *d <= 20.0 + 1e-9));
        assert!(transits.iter().any(|d| *d < 19.0), "{transits:?}");
    }

    #[test]
    fn paper_setup_has_finite_positive_cost() {
        let s = paper_3x();
        let (traj, report) = run_sample_path(&s, &s.theta0, 11, SimOptions::with_events()).unwrap();
        assert!(report.cost > 0.0 && report.cost.is_finite());
        assert!(!traj.events.is_empty());
        let sr = report.stop_ratio.unwrap();
        assert!((0.0..=1.0).contains(&sr));
    }

    #[test]
    fn same_seed_same_path() {
        let s = paper_3x();
        let a = run_sample_path(&s, &s.theta0, 5, SimOptions::with_states()).unwrap();
        let b = run_sample_path(&s, &s.theta0, 5, SimOptions::with_states()).unwrap();
        assert_eq!(a.0.events, b.0.events);
        assert_eq!(a.0.states, b.0.states);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn flow_and_network_conservation() {
        let s = paper_3x();
        let (traj, _) = run_sample_path(&s, &s.theta0, 8, SimOptions::default()).unwrap();
        for (q, t) in traj.totals.iter().enumerate() {
            let lhs = t.arrived - t.departed;
            let rhs = traj.segment.final_x[q];
            assert!((lhs - rhs).abs() <= 1e-9 * t.arrived.max(1.0), "queue {q}: {lhs} vs {rhs}");
        }
        for (k, l) in s.model.links().iter().enumerate() {
            let up = traj.totals[l.from].departed;
            let down = traj.totals[l.to].joined_departure + traj.in_transit[k];
            assert!((up - down).abs() <= 1e-9 * up.max(1.0), "link {k}: {up} vs {down}");
        }
    }

    #[test]
    fn blocking_aborts_the_path() {
        let mut model = ArteryModel::uniform(2, 40.0, 10.0, 5.0, 1.3);
        model.link_length = vec![40.0];
        let theta = ThetaVector::from_pairs(&[(60.0, 5.0), (5.0, 60.0)], 5.0, 120.0).unwrap();
        let s = Scenario::new(model, theta, 500.0)
            .with_arrival(QueueId::new(0, Dir::Artery), ArrivalProcess::constant(1.0));
        let err = run_sample_path(&s, &s.theta0, 1, SimOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Blocking { link: Some(0), .. }), "{err}");
    }

    #[test]
    fn set_theta_switches_overdue_phase_now() {
        let s = single((30.0, 20.0), 0.1, 0.0, 100.0);
        let mut sim = Simulator::new(&s, &s.theta0, 1, SimOptions::with_events()).unwrap();
        sim.run_until(12.0).unwrap();
        let t = ThetaVector::from_pairs(&[(10.0, 20.0)], 5.0, 120.0).unwrap();
        sim.set_theta(&t).unwrap();
        sim.run_until(12.5).unwrap();
        let sw = sim.events().iter().find(|e| e.kind == EventKind::G2R).unwrap();
        assert_eq!(sw.tau, 12.0);
    }
}
