//! Weight-as-a-Service: layer ownership, peak-shifted prefetch plans and the
//! per-rank slot cache.
//!
//! Layer `l` is owned by rank `l mod d`. Layers are grouped in cycles of `d`
//! consecutive indices; inside a cycle rank `r` starts after its own layer and
//! wraps around, so at every step of a cycle all ranks read from different
//! owners.

use crate::simcore::SimError;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};

pub fn owner_of(layer: usize, d: usize) -> usize {
    layer % d
}

/// Layers of the cycle starting at `cycle_start` in the order rank `rank`
/// fetches them, for a model with `num_layers` layers (the last cycle may be
/// short). With `shifted == false` every rank uses the ascending order.
pub fn cycle_order(rank: usize, cycle_start: usize, d: usize, num_layers: usize, shifted: bool) -> Vec<usize> {
    let offset = if shifted { rank } else { 0 };
    (0..d)
        .map(|k| cycle_start + (offset + k) % d)
        .filter(|&l| l < num_layers && owner_of(l, d) != rank)
        .collect()
}

/// Peak-shifted order for a full cycle: `c + ((rank + k) mod d)` for
/// k = 0..d, without the rank's own layer.
pub fn peak_shift_order(rank: usize, cycle_start: usize, d: usize) -> Vec<usize> {
    cycle_order(rank, cycle_start, d, cycle_start + d, true)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrefetchPlan {
    pub rank: usize,
    pub layers: Vec<usize>,
    pub lookahead: usize,
}

pub fn build_prefetch_plan(rank: usize, num_layers: usize, d: usize, lookahead: usize) -> PrefetchPlan {
    build_plan(rank, num_layers, d, lookahead, true)
}

pub fn build_plan(rank: usize, num_layers: usize, d: usize, lookahead: usize, shifted: bool) -> PrefetchPlan {
    let layers = (0..num_layers)
        .step_by(d)
        .flat_map(|c| cycle_order(rank, c, d, num_layers, shifted))
        .collect();
    PrefetchPlan {
        rank,
        layers,
        lookahead,
    }
}

// ---------------------------------------------------------------------------
// Slots

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Free,
    Reserved,
    Filling,
    Ready,
    InUse,
}

impl SlotState {
    /// The only legal successor of each state.
    pub fn next(self) -> SlotState {
        match self {
            SlotState::Free => SlotState::Reserved,
            SlotState::Reserved => SlotState::Filling,
            SlotState::Filling => SlotState::Ready,
            SlotState::Ready => SlotState::InUse,
            SlotState::InUse => SlotState::Free,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheSlot {
    pub slot_id: usize,
    pub state: SlotState,
    pub layer: Option<usize>,
    pub ready_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotTransition {
    pub time: f64,
    pub rank: usize,
    pub slot: usize,
    pub layer: usize,
    pub from: SlotState,
    pub to: SlotState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SlotAudit {
    pub transitions: u64,
    pub illegal_transitions: u64,
    pub max_occupied: usize,
    /// Times occupancy went above the slot count.
    pub over_capacity: u64,
}

/// Replays slot transitions and counts violations. Independent from the
/// runtime checks in [`SlotCache`]; transitions may be fed as they happen.
#[derive(Debug, Clone)]
pub struct SlotAuditor {
    slot_count: usize,
    state: HashMap<(usize, usize), SlotState>,
    occupied: HashMap<usize, usize>,
    audit: SlotAudit,
}

impl SlotAuditor {
    pub fn new(slot_count: usize) -> Self {
        SlotAuditor {
            slot_count,
            state: HashMap::new(),
            occupied: HashMap::new(),
            audit: SlotAudit::default(),
        }
    }

    /// Transitions of one rank must arrive in the order they happened.
    pub fn observe(&mut self, t: &SlotTransition) {
        self.audit.transitions += 1;
        let cur = self.state.entry((t.rank, t.slot)).or_insert(SlotState::Free);
        let legal = *cur == t.from
            && matches!(
                (t.from, t.to),
                (SlotState::Free, SlotState::Reserved)
                    | (SlotState::Reserved, SlotState::Filling)
                    | (SlotState::Filling, SlotState::Ready)
                    | (SlotState::Ready, SlotState::InUse)
                    | (SlotState::InUse, SlotState::Free)
            );
        if !legal {
            self.audit.illegal_transitions += 1;
        }
        let occ = self.occupied.entry(t.rank).or_insert(0);
        if *cur == SlotState::Free && t.to != SlotState::Free {
            *occ += 1;
        } else if *cur != SlotState::Free && t.to == SlotState::Free {
            *occ = occ.saturating_sub(1);
        }
        if t.slot >= self.slot_count || *occ > self.slot_count {
            self.audit.over_capacity += 1;
        }
        self.audit.max_occupied = self.audit.max_occupied.max(*occ);
        *cur = t.to;
    }

    pub fn audit(&self) -> &SlotAudit {
        &self.audit
    }
}

pub fn audit_slot_transitions(log: &[SlotTransition], slot_count: usize) -> SlotAudit {
    let mut a = SlotAuditor::new(slot_count);
    log.iter().for_each(|t| a.observe(t));
    a.audit
}

/// A rank's prefetch buffers.
#[derive(Debug, Clone)]
pub struct SlotCache {
    rank: usize,
    slots: Vec<CacheSlot>,
    occupied: usize,
    max_occupied: usize,
    transitions: u64,
    /// Seconds spent with k slots occupied, index k.
    occupancy_time: Vec<f64>,
    last_change: f64,
    log: Option<Vec<SlotTransition>>,
}

impl SlotCache {
    pub fn new(rank: usize, count: usize, keep_log: bool) -> Self {
        SlotCache {
            rank,
            slots: (0..count)
                .map(|i| CacheSlot {
                    slot_id: i,
                    state: SlotState::Free,
                    layer: None,
                    ready_at: None,
                })
                .collect(),
            occupied: 0,
            max_occupied: 0,
            transitions: 0,
            occupancy_time: vec![0.0; count + 1],
            last_change: 0.0,
            log: keep_log.then(Vec::new),
        }
    }

    pub fn slot(&self, id: usize) -> &CacheSlot {
        &self.slots[id]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn occupied(&self) -> usize {
        self.occupied
    }

    pub fn max_occupied(&self) -> usize {
        self.max_occupied
    }

    pub fn transitions(&self) -> u64 {
        self.transitions
    }

    pub fn occupancy_time(&self) -> &[f64] {
        &self.occupancy_time
    }

    pub fn take_log(&mut self) -> Vec<SlotTransition> {
        self.log.take().unwrap_or_default()
    }

    pub fn find_free(&self) -> Option<usize> {
        self.slots.iter().position(|s| s.state == SlotState::Free)
    }

    /// Closes the occupancy accounting at `now`.
    pub fn settle(&mut self, now: f64) {
        if now > self.last_change {
            self.occupancy_time[self.occupied] += now - self.last_change;
            self.last_change = now;
        }
    }

    /// Moves `slot` to `to`, which must be its single legal successor.
    pub fn transition(&mut self, now: f64, slot: usize, to: SlotState, layer: usize) -> Result<(), SimError> {
        let s = &self.slots[slot];
        if s.state.next() != to {
            return Err(SimError::Protocol(format!(
                "rank {} slot {slot}: illegal transition {:?} -> {to:?} (layer {layer})",
                self.rank, s.state
            )));
        }
        if s.state != SlotState::Free && s.layer != Some(layer) {
            return Err(SimError::Protocol(format!(
                "rank {} slot {slot} holds layer {:?}, not {layer}",
                self.rank, s.layer
            )));
        }
        let from = s.state;
        self.settle(now);
        let s = &mut self.slots[slot];
        s.state = to;
        match to {
            SlotState::Reserved => {
                s.layer = Some(layer);
                self.occupied += 1;
            }
            SlotState::Ready => s.ready_at = Some(now),
            SlotState::Free => {
                s.layer = None;
                s.ready_at = None;
                self.occupied -= 1;
            }
            _ => {}
        }
        self.max_occupied = self.max_occupied.max(self.occupied);
        self.transitions += 1;
        if let Some(log) = &mut self.log {
            log.push(SlotTransition {
                time: now,
                rank: self.rank,
                slot,
                layer,
                from,
                to,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Per-rank prefetch driver

/// A fetch that should start now: copy `layer` from `owner` into `slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FetchStart {
    pub slot: usize,
    pub layer: usize,
    pub owner: usize,
}

/// Outcome of asking for a layer's weights at compute time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquire {
    /// Slot was Ready and is now InUse.
    Ready(usize),
    /// Fetch still in progress; compute must wait.
    Pending(usize),
}

/// Prefetch state of one rank: plan cursor, slot cache and a single serial
/// copy stream (fetches run one at a time in plan order).
#[derive(Debug, Clone)]
pub struct WasRank {
    pub rank: usize,
    pub d: usize,
    plan: PrefetchPlan,
    cursor: usize,
    inflight: usize,
    cache: SlotCache,
    stream: VecDeque<usize>,
    copies_active: usize,
    /// Copies allowed on the wire at once (1 = one serial copy stream).
    copy_streams: usize,
    slot_of_layer: Vec<Option<usize>>,
}

impl WasRank {
    pub fn new(
        rank: usize,
        num_layers: usize,
        d: usize,
        slots: usize,
        lookahead: usize,
        shifted: bool,
        keep_log: bool,
    ) -> Self {
        WasRank {
            rank,
            d,
            plan: build_plan(rank, num_layers, d, lookahead, shifted),
            cursor: 0,
            inflight: 0,
            cache: SlotCache::new(rank, slots, keep_log),
            stream: VecDeque::new(),
            copies_active: 0,
            copy_streams: 1,
            slot_of_layer: vec![None; num_layers],
        }
    }

    /// Lets up to `n` copies run concurrently (default 1).
    pub fn with_copy_streams(mut self, n: usize) -> Self {
        self.copy_streams = n.max(1);
        self
    }

    pub fn plan(&self) -> &PrefetchPlan {
        &self.plan
    }

    pub fn cache(&self) -> &SlotCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut SlotCache {
        &mut self.cache
    }

    pub fn owns(&self, layer: usize) -> bool {
        owner_of(layer, self.d) == self.rank
    }

    /// Starts a new forward pass. All slots must have been released.
    pub fn begin_pass(&mut self) -> Result<(), SimError> {
        if self.inflight != 0 || self.cache.occupied() != 0 || self.copies_active != 0 {
            return Err(SimError::Protocol(format!(
                "rank {}: new pass with {} prefetches outstanding",
                self.rank, self.inflight
            )));
        }
        self.cursor = 0;
        Ok(())
    }

    /// Reserves slots for upcoming plan entries while the lookahead allows,
    /// then returns the next fetch to start if a copy stream is idle. Call
    /// repeatedly until it returns `None`.
    pub fn pump(&mut self, now: f64) -> Result<Option<FetchStart>, SimError> {
        while self.inflight < self.plan.lookahead && self.cursor < self.plan.layers.len() {
            let Some(slot) = self.cache.find_free() else { break };
            let layer = self.plan.layers[self.cursor];
            self.cache.transition(now, slot, SlotState::Reserved, layer)?;
            self.slot_of_layer[layer] = Some(slot);
            self.stream.push_back(slot);
            self.cursor += 1;
            self.inflight += 1;
        }
        if self.copies_active >= self.copy_streams {
            return Ok(None);
        }
        match self.stream.pop_front() {
            Some(slot) => {
                let layer = self.cache.slot(slot).layer.expect("reserved slot has a layer");
                self.cache.transition(now, slot, SlotState::Filling, layer)?;
                self.copies_active += 1;
                Ok(Some(FetchStart {
                    slot,
                    layer,
                    owner: owner_of(layer, self.d),
                }))
            }
            None => Ok(None),
        }
    }

    /// The copy into `slot` finished.
    pub fn fill_done(&mut self, now: f64, slot: usize) -> Result<usize, SimError> {
        let layer =
            self.cache.slot(slot).layer.ok_or_else(|| {
                SimError::Protocol(format!("rank {}: fill completed on empty slot {slot}", self.rank))
            })?;
        self.cache.transition(now, slot, SlotState::Ready, layer)?;
        self.copies_active -= 1;
        Ok(layer)
    }

    /// Compute wants `layer`'s weights.
    pub fn acquire(&mut self, now: f64, layer: usize) -> Result<Acquire, SimError> {
        let slot = self.slot_of_layer[layer].ok_or_else(|| {
            SimError::Protocol(format!(
                "rank {}: compute reached layer {layer} with no prefetch issued",
                self.rank
            ))
        })?;
        match self.cache.slot(slot).state {
            SlotState::Ready => {
                self.cache.transition(now, slot, SlotState::InUse, layer)?;
                Ok(Acquire::Ready(slot))
            }
            SlotState::Reserved | SlotState::Filling => Ok(Acquire::Pending(slot)),
            other => Err(SimError::Protocol(format!(
                "rank {}: compute observed slot {slot} in state {other:?} for layer {layer}",
                self.rank
            ))),
        }
    }

    /// Ready -> InUse for a compute that was waiting on this slot.
    pub fn start_use(&mut self, now: f64, slot: usize) -> Result<(), SimError> {
        let layer = self.cache.slot(slot).layer.unwrap_or(usize::MAX);
        self.cache.transition(now, slot, SlotState::InUse, layer)
    }

    /// Housekeeper: compute on `layer` finished, recycle its slot.
    pub fn release(&mut self, now: f64, layer: usize) -> Result<(), SimError> {
        let slot = self.slot_of_layer[layer].take().ok_or_else(|| {
            SimError::Protocol(format!("rank {}: release of layer {layer} without a slot", self.rank))
        })?;
        self.cache.transition(now, slot, SlotState::Free, layer)?;
        self.inflight -= 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn owners() {
        assert_eq!(owner_of(0, 4), 0);
        assert_eq!(owner_of(10, 4), 2);
        let mut counts = [0; 8];
        for l in 0..80 {
            counts[owner_of(l, 8)] += 1;
        }
        assert_eq!(counts, [10; 8]);
    }

    #[test]
    fn shift_examples() {
        assert_eq!(peak_shift_order(0, 0, 4), vec![1, 2, 3]);
        assert_eq!(peak_shift_order(2, 8, 4), vec![11, 8, 9]);
        assert_eq!(peak_shift_order(0, 6, 2), vec![7]);
        assert_eq!(peak_shift_order(1, 6, 2), vec![6]);
    }

    #[test]
    fn plan_example() {
        assert_eq!(build_prefetch_plan(1, 8, 4, 3).layers, vec![2, 3, 0, 6, 7, 4]);
        assert_eq!(build_prefetch_plan(3, 4, 4, 3).layers.len(), 3);
    }

    #[test]
    fn truncated_cycle() {
        // L = 10, d = 4: last cycle holds layers 8 and 9 only.
        assert_eq!(cycle_order(0, 8, 4, 10, true), vec![9]);
        assert_eq!(cycle_order(1, 8, 4, 10, true), vec![8]);
        // ranks 2 and 3 own nothing in this cycle and start from its first layer
        assert_eq!(cycle_order(2, 8, 4, 10, true), vec![8, 9]);
        assert_eq!(cycle_order(3, 8, 4, 10, true), vec![8, 9]);
    }

    #[test]
    fn unshifted_is_ascending() {
        assert_eq!(cycle_order(2, 0, 4, 8, false), vec![0, 1, 3]);
        assert_eq!(cycle_order(0, 4, 4, 8, false), vec![5, 6, 7]);
    }

    #[test]
    fn illegal_transition_rejected() {
        let mut c = SlotCache::new(0, 2, true);
        c.transition(0.0, 0, SlotState::Reserved, 3).unwrap();
        assert!(c.transition(0.0, 0, SlotState::Ready, 3).is_err());
        assert!(c.transition(0.0, 0, SlotState::Filling, 4).is_err());
        c.transition(1.0, 0, SlotState::Filling, 3).unwrap();
        assert_eq!(c.occupied(), 1);
    }

    #[test]
    fn audit_catches_skips() {
        let t = |slot, from, to| SlotTransition {
            time: 0.0,
            rank: 0,
            slot,
            layer: 1,
            from,
            to,
        };
        let log = vec![
            t(0, SlotState::Free, SlotState::Reserved),
            t(0, SlotState::Reserved, SlotState::Ready),
            t(1, SlotState::Free, SlotState::Reserved),
        ];
        let a = audit_slot_transitions(&log, 1);
        assert_eq!(a.illegal_transitions, 1);
        assert_eq!(a.max_occupied, 2);
        assert!(a.over_capacity > 0);
    }

    #[test]
    fn driver_walks_a_pass() {
        // d = 2, rank 0 fetches the odd layers of a 4-layer model with one slot
        let mut r = WasRank::new(0, 4, 2, 1, 1, true, true);
        r.begin_pass().unwrap();
        let f = r.pump(0.0).unwrap().unwrap();
        assert_eq!((f.layer, f.owner), (1, 1));
        assert_eq!(r.pump(0.0).unwrap(), None);
        assert_eq!(r.acquire(0.1, 1).unwrap(), Acquire::Pending(0));
        r.fill_done(0.2, 0).unwrap();
        r.start_use(0.2, 0).unwrap();
        r.release(0.3, 1).unwrap();
        let f = r.pump(0.3).unwrap().unwrap();
        assert_eq!(f.layer, 3);
        r.fill_done(0.4, 0).unwrap();
        assert_eq!(r.acquire(0.5, 3).unwrap(), Acquire::Ready(0));
        r.release(0.6, 3).unwrap();
        assert_eq!(r.pump(0.6).unwrap(), None);
        r.begin_pass().unwrap();
        let mut rank = r;
        let log = rank.cache_mut().take_log();
        let audit = audit_slot_transitions(&log, 1);
        assert_eq!(audit.illegal_transitions, 0);
        assert_eq!(audit.transitions, 10);
    }
}
