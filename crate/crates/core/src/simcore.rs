//! Discrete-event kernel: a (time, seq) ordered queue, a run loop with safety
//! bounds, per-owner fair-share link flows, and FIFO compute resources.

use serde::Serialize;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("clock moved backward: event at {event} s scheduled while clock is {now} s")]
    ClockBackward { now: f64, event: f64 },
    #[error("event queue exceeded {limit} pending events at t = {now} s (possible livelock)")]
    QueueOverflow { limit: u64, now: f64 },
    #[error("processed more than {limit} events at t = {now} s (possible livelock)")]
    EventLimit { limit: u64, now: f64 },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

struct Entry<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    // reversed: BinaryHeap is a max-heap and we want the earliest event on top
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Pending events ordered by (time, insertion sequence).
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    next_seq: u64,
    now: f64,
    queue_limit: u64,
    overflow: bool,
}

impl<E> EventQueue<E> {
    pub fn new(queue_limit: u64) -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: 0.0,
            queue_limit,
            overflow: false,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `event` at absolute time `at`; returns its sequence number.
    /// Times in the past are clamped by the run loop's backward-clock check.
    pub fn schedule(&mut self, at: f64, event: E) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time: at, seq, event });
        if self.heap.len() as u64 > self.queue_limit {
            self.overflow = true;
        }
        seq
    }

    pub fn schedule_in(&mut self, delay: f64, event: E) -> u64 {
        let at = self.now + delay;
        self.schedule(at, event)
    }

    fn pop(&mut self) -> Option<(f64, u64, E)> {
        self.heap.pop().map(|e| (e.time, e.seq, e.event))
    }
}

/// Something that reacts to events.
pub trait World {
    type Event;
    fn handle(&mut self, now: f64, event: Self::Event, queue: &mut EventQueue<Self::Event>) -> Result<(), SimError>;
}

/// Processes events in (time, seq) order until none remain.
pub fn run_until_idle<W: World>(
    world: &mut W,
    queue: &mut EventQueue<W::Event>,
    event_limit: u64,
) -> Result<f64, SimError> {
    let mut processed: u64 = 0;
    while let Some((time, _seq, ev)) = queue.pop() {
        if time < queue.now {
            return Err(SimError::ClockBackward {
                now: queue.now,
                event: time,
            });
        }
        queue.now = time;
        processed += 1;
        if processed > event_limit {
            return Err(SimError::EventLimit {
                limit: event_limit,
                now: time,
            });
        }
        world.handle(time, ev, queue)?;
        if queue.overflow {
            return Err(SimError::QueueOverflow {
                limit: queue.queue_limit,
                now: time,
            });
        }
    }
    Ok(queue.now)
}

// ---------------------------------------------------------------------------
// Link flows

pub type FlowId = usize;

#[derive(Debug, Clone, Serialize)]
pub struct LinkFlow {
    pub owner_rank: usize,
    pub reader_rank: usize,
    pub bytes: f64,
    pub bytes_remaining: f64,
    pub started_at: f64,
    pub rate: f64,
    /// Bytes accounted so far by integrating rate over time.
    pub delivered: f64,
    pub finished_at: Option<f64>,
    pub tag: u64,
    version: u32,
}

/// A completion event the caller should schedule. Stale ones (older
/// version) are ignored by [`Fabric::complete`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTimer {
    pub flow: FlowId,
    pub version: u32,
    pub at: f64,
}

#[derive(Debug, Clone, Default)]
struct OwnerLink {
    active: Vec<FlowId>,
    last_update: f64,
    peak_readers: usize,
}

/// Per-owner egress links shared equally among active flows.
#[derive(Debug, Clone)]
pub struct Fabric {
    link_bandwidth: f64,
    contended: bool,
    owners: Vec<OwnerLink>,
    flows: Vec<LinkFlow>,
    max_conservation_error: f64,
    bytes_moved: f64,
    /// Whole-byte ledgers: bytes handed to the fabric and bytes delivered.
    injected_exact: u128,
    delivered_exact: u128,
}

impl Fabric {
    pub fn new(ranks: usize, link_bandwidth: f64) -> Self {
        Fabric {
            link_bandwidth,
            contended: true,
            owners: vec![OwnerLink::default(); ranks],
            flows: Vec::new(),
            max_conservation_error: 0.0,
            bytes_moved: 0.0,
            injected_exact: 0,
            delivered_exact: 0,
        }
    }

    /// With contention off every flow runs at full link speed.
    pub fn set_contended(&mut self, on: bool) {
        self.contended = on;
    }

    pub fn flow(&self, id: FlowId) -> &LinkFlow {
        &self.flows[id]
    }

    pub fn flows(&self) -> &[LinkFlow] {
        &self.flows
    }

    pub fn active_readers(&self, owner: usize) -> usize {
        self.owners[owner].active.len()
    }

    pub fn peak_readers(&self) -> Vec<usize> {
        self.owners.iter().map(|o| o.peak_readers).collect()
    }

    /// Sum of the current rates on an owner's egress.
    pub fn egress_rate(&self, owner: usize) -> f64 {
        self.owners[owner].active.iter().map(|&f| self.flows[f].rate).sum()
    }

    /// Largest |integrated bytes - flow bytes| / flow bytes seen so far.
    pub fn max_conservation_error(&self) -> f64 {
        self.max_conservation_error
    }

    pub fn bytes_moved(&self) -> f64 {
        self.bytes_moved
    }

    /// (bytes injected, bytes delivered) in whole bytes.
    pub fn byte_ledger(&self) -> (u128, u128) {
        (self.injected_exact, self.delivered_exact)
    }

    /// Registers a flow and returns the timers to (re)schedule for every flow
    /// on that owner. The new flow's timer is among them.
    pub fn start_flow(
        &mut self,
        now: f64,
        owner: usize,
        reader: usize,
        bytes: f64,
        tag: u64,
    ) -> (FlowId, Vec<FlowTimer>) {
        assert!(bytes > 0.0, "flows carry at least one byte");
        self.advance(owner, now);
        self.injected_exact += bytes.ceil() as u128;
        let id = self.flows.len();
        self.flows.push(LinkFlow {
            owner_rank: owner,
            reader_rank: reader,
            bytes,
            bytes_remaining: bytes,
            started_at: now,
            rate: 0.0,
            delivered: 0.0,
            finished_at: None,
            tag,
            version: 0,
        });
        let link = &mut self.owners[owner];
        link.active.push(id);
        link.peak_readers = link.peak_readers.max(link.active.len());
        let timers = self.reshare(owner, now);
        (id, timers)
    }

    /// Handles a completion timer. Returns `None` for stale timers, otherwise
    /// the finished flow and the timers of the owner's remaining flows.
    pub fn complete(&mut self, now: f64, timer_flow: FlowId, version: u32) -> Option<(LinkFlow, Vec<FlowTimer>)> {
        let f = &self.flows[timer_flow];
        if f.version != version || f.finished_at.is_some() {
            return None;
        }
        let owner = f.owner_rank;
        self.advance(owner, now);
        let f = &mut self.flows[timer_flow];
        let err = (f.delivered - f.bytes).abs() / f.bytes;
        self.max_conservation_error = self.max_conservation_error.max(err);
        self.bytes_moved += f.bytes;
        self.delivered_exact += f.bytes.ceil() as u128;
        f.bytes_remaining = 0.0;
        f.rate = 0.0;
        f.finished_at = Some(now);
        let done = f.clone();
        self.owners[owner].active.retain(|&x| x != timer_flow);
        let timers = self.reshare(owner, now);
        Some((done, timers))
    }

    /// Integrates progress of every active flow on `owner` up to `now`.
    fn advance(&mut self, owner: usize, now: f64) {
        let link = &mut self.owners[owner];
        let dt = now - link.last_update;
        if dt > 0.0 {
            for &id in &link.active {
                let f = &mut self.flows[id];
                let moved = f.rate * dt;
                f.delivered += moved;
                f.bytes_remaining = (f.bytes_remaining - moved).max(0.0);
            }
        }
        link.last_update = now;
    }

    fn reshare(&mut self, owner: usize, now: f64) -> Vec<FlowTimer> {
        let n = self.owners[owner].active.len();
        if n == 0 {
            return Vec::new();
        }
        let rate = if self.contended {
            self.link_bandwidth / n as f64
        } else {
            self.link_bandwidth
        };
        let mut timers = Vec::with_capacity(n);
        for &id in &self.owners[owner].active {
            let f = &mut self.flows[id];
            f.rate = rate;
            f.version += 1;
            timers.push(FlowTimer {
                flow: id,
                version: f.version,
                at: now + f.bytes_remaining / rate,
            });
        }
        timers
    }
}

// ---------------------------------------------------------------------------
// Compute

/// A GPU (or TP group) executing one compute task at a time, FIFO.
#[derive(Debug, Clone, Serialize)]
pub struct GpuResource {
    pub rank: usize,
    pub busy_until: f64,
    pub busy_total: f64,
}

impl GpuResource {
    pub fn new(rank: usize) -> Self {
        GpuResource {
            rank,
            busy_until: 0.0,
            busy_total: 0.0,
        }
    }

    /// Queues a task of `duration` requested at `now`; returns (start, end).
    pub fn reserve(&mut self, now: f64, duration: f64) -> (f64, f64) {
        let start = now.max(self.busy_until);
        let end = start + duration;
        self.busy_until = end;
        self.busy_total += duration;
        (start, end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Recorder {
        seen: Vec<(f64, u32)>,
    }

    impl World for Recorder {
        type Event = u32;
        fn handle(&mut self, now: f64, ev: u32, q: &mut EventQueue<u32>) -> Result<(), SimError> {
            self.seen.push((now, ev));
            if ev == 100 {
                q.schedule(now - 1.0, 101);
            }
            if ev == 200 {
                q.schedule_in(0.0, 200);
            }
            Ok(())
        }
    }

    #[test]
    fn empty_queue_returns_zero() {
        let mut w = Recorder { seen: vec![] };
        let mut q = EventQueue::new(10);
        assert_eq!(run_until_idle(&mut w, &mut q, 10).unwrap(), 0.0);
    }

    #[test]
    fn ties_run_in_insertion_order() {
        let mut w = Recorder { seen: vec![] };
        let mut q = EventQueue::new(10);
        q.schedule(1.0, 3);
        q.schedule(1.0, 1);
        q.schedule(0.5, 9);
        q.schedule(1.0, 2);
        run_until_idle(&mut w, &mut q, 10).unwrap();
        let order: Vec<u32> = w.seen.iter().map(|x| x.1).collect();
        assert_eq!(order, vec![9, 3, 1, 2]);
    }

    #[test]
    fn backward_clock_aborts() {
        let mut w = Recorder { seen: vec![] };
        let mut q = EventQueue::new(10);
        q.schedule(2.0, 100);
        assert!(matches!(
            run_until_idle(&mut w, &mut q, 10),
            Err(SimError::ClockBackward { .. })
        ));
    }

    #[test]
    fn livelock_guard() {
        let mut w = Recorder { seen: vec![] };
        let mut q = EventQueue::new(10);
        q.schedule(0.0, 200);
        assert!(matches!(
            run_until_idle(&mut w, &mut q, 1000),
            Err(SimError::EventLimit { limit: 1000, .. })
        ));
    }

    /// Drives a fabric to completion without a world; returns finish times.
    fn drain(fab: &mut Fabric, mut timers: Vec<FlowTimer>, mut starts: Vec<(f64, usize, f64)>) -> Vec<f64> {
        let mut pending: Vec<FlowTimer> = Vec::new();
        pending.append(&mut timers);
        loop {
            pending.sort_by(|a, b| a.at.total_cmp(&b.at));
            let next_timer = pending.first().copied();
            let next_start = starts.first().copied();
            match (next_timer, next_start) {
                (None, None) => break,
                (_, Some(s)) if next_timer.is_none_or(|t| s.0 <= t.at) => {
                    starts.remove(0);
                    let (_, t) = fab.start_flow(s.0, s.1, 9, s.2, 0);
                    pending.extend(t);
                }
                (Some(t), _) => {
                    pending.remove(0);
                    if let Some((_, more)) = fab.complete(t.at, t.flow, t.version) {
                        pending.extend(more);
                    }
                }
                _ => unreachable!(),
            }
        }
        fab.flows().iter().map(|f| f.finished_at.unwrap()).collect()
    }

    #[test]
    fn single_flow_ten_ms() {
        let mut fab = Fabric::new(1, 400e9);
        let done = drain(&mut fab, vec![], vec![(0.0, 0, 4e9)]);
        assert_relative_eq!(done[0], 0.01, max_relative = 1e-12);
    }

    #[test]
    fn two_flows_share_equally() {
        let mut fab = Fabric::new(1, 400e9);
        let done = drain(&mut fab, vec![], vec![(0.0, 0, 4e9), (0.0, 0, 4e9)]);
        assert_relative_eq!(done[0], 0.02, max_relative = 1e-12);
        assert_relative_eq!(done[1], 0.02, max_relative = 1e-12);
    }

    #[test]
    fn late_second_flow() {
        // first alone for 5 ms (2e9 B), then both share: the first needs 2e9 more
        // at 200e9 B/s = 10 ms, so it ends at 15 ms instead of 10 ms. The second
        // has 2e9 left at 15 ms and finishes alone 5 ms later.
        let mut fab = Fabric::new(1, 400e9);
        let done = drain(&mut fab, vec![], vec![(0.0, 0, 4e9), (0.005, 0, 4e9)]);
        assert_relative_eq!(done[0], 0.015, max_relative = 1e-12);
        assert_relative_eq!(done[1], 0.020, max_relative = 1e-12);
        assert!(fab.max_conservation_error() < 1e-12);
    }

    #[test]
    fn owners_are_independent() {
        let mut fab = Fabric::new(2, 400e9);
        let done = drain(&mut fab, vec![], vec![(0.0, 0, 4e9), (0.0, 1, 4e9)]);
        assert_relative_eq!(done[0], 0.01, max_relative = 1e-12);
        assert_relative_eq!(done[1], 0.01, max_relative = 1e-12);
        assert_eq!(fab.peak_readers(), vec![1, 1]);
    }

    #[test]
    fn uncontended_links_run_full_speed() {
        let mut fab = Fabric::new(1, 400e9);
        fab.set_contended(false);
        let done = drain(&mut fab, vec![], vec![(0.0, 0, 4e9), (0.0, 0, 4e9)]);
        assert_relative_eq!(done[1], 0.01, max_relative = 1e-12);
    }

    #[test]
    fn gpu_fifo() {
        let mut g = GpuResource::new(0);
        assert_eq!(g.reserve(1.0, 2.0), (1.0, 3.0));
        assert_eq!(g.reserve(2.0, 1.0), (3.0, 4.0));
        assert_eq!(g.reserve(10.0, 1.0), (10.0, 11.0));
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    /// Drives a fabric through a set of (start time, owner, bytes) flows.
    fn drive(fab: &mut Fabric, mut starts: Vec<(f64, usize, f64)>) {
        starts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut starts = std::collections::VecDeque::from(starts);
        let mut timers: Vec<FlowTimer> = Vec::new();
        loop {
            timers.sort_by(|a, b| a.at.total_cmp(&b.at));
            let next_timer = timers.first().copied();
            match (next_timer, starts.front().copied()) {
                (None, None) => break,
                (t, Some(s)) if t.is_none_or(|t| s.0 <= t.at) => {
                    starts.pop_front();
                    let (_, more) = fab.start_flow(s.0, s.1, 0, s.2, 0);
                    timers.extend(more);
                }
                (Some(t), _) => {
                    timers.remove(0);
                    if let Some((_, more)) = fab.complete(t.at, t.flow, t.version) {
                        timers.extend(more);
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fabric_delivers_every_byte(
            flows in prop::collection::vec((0.0f64..0.05, 0usize..4, 1.0e3f64..5.0e9), 1..24),
            contended in any::<bool>(),
        ) {
            let mut fab = Fabric::new(4, 400e9);
            fab.set_contended(contended);
            drive(&mut fab, flows.clone());
            let (inj, del) = fab.byte_ledger();
            prop_assert_eq!(inj, del);
            let want: u128 = flows.iter().map(|f| f.2.ceil() as u128).sum();
            prop_assert_eq!(inj, want);
            prop_assert!(fab.max_conservation_error() < 1e-6);
            for f in fab.flows() {
                let done = f.finished_at.unwrap();
                // never faster than the whole link, never before it started
                prop_assert!(done - f.started_at >= f.bytes / 400e9 * (1.0 - 1e-9));
            }
            // fair sharing never exceeds one link per owner
            let peak = fab.peak_readers();
            prop_assert!(peak.iter().sum::<usize>() <= flows.len());
        }
    }
}
