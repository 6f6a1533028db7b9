//! Compute-as-a-Service, the FSDP-style baseline and WaS/CaS mode switching.

use crate::catalog::{AblationFlags, PolicySpec};
use crate::timing::CostModel;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SidpMode {
    #[serde(rename = "was")]
    Was,
    #[serde(rename = "cas")]
    Cas,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActivationChunk {
    pub source_rank: usize,
    pub rows: u64,
    pub dummy: bool,
}

impl ActivationChunk {
    /// Whether this chunk is exchanged at all.
    pub fn moves(&self, flags: &AblationFlags) -> bool {
        !(self.dummy && flags.dummy_skip)
    }
}

/// Owner-side FFN time for the given chunk row counts. With fusion the chunks
/// are concatenated into one GEMM; gathering several chunks costs one concat
/// and one split kernel. Without fusion each chunk runs its own GEMM.
pub fn owner_compute_time(cm: &CostModel, rows: &[f64], fusion: bool) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    if fusion {
        let total: f64 = rows.iter().sum();
        let merge = if rows.len() > 1 {
            2.0 * cm.hw.kernel_launch_overhead
        } else {
            0.0
        };
        cm.layer_ffn_time(total) + merge
    } else {
        rows.iter().map(|&r| cm.layer_ffn_time(r)).sum()
    }
}

/// Result of one CaS layer evaluated in isolation (idle links, idle owner).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CasLayerOutcome {
    /// Time each rank may start its next layer, indexed like the input chunks.
    pub done_at: Vec<f64>,
    pub bytes_moved: f64,
    pub messages: usize,
    pub owner_compute_s: f64,
}

/// Evaluates one CaS layer given, for every rank, the instant its attention
/// finished and its chunk. `owner` indexes into `chunks`.
pub fn step_cas_layer(
    owner: usize,
    chunks: &[ActivationChunk],
    ready_at: &[f64],
    cm: &CostModel,
    flags: &AblationFlags,
    routing_overhead: f64,
) -> CasLayerOutcome {
    assert_eq!(chunks.len(), ready_at.len());
    let lat = cm.hw.p2p_latency;
    let mut done_at: Vec<f64> = ready_at.to_vec();
    let moving: Vec<usize> = (0..chunks.len()).filter(|&i| chunks[i].moves(flags)).collect();
    if moving.is_empty() {
        return CasLayerOutcome {
            done_at,
            bytes_moved: 0.0,
            messages: 0,
            owner_compute_s: 0.0,
        };
    }
    let mut bytes = 0.0;
    let mut messages = 0;
    // inbound
    let mut arrivals: Vec<(f64, usize)> = Vec::new();
    let mut channel_free = f64::NEG_INFINITY;
    let mut order = moving.clone();
    order.sort_by(|&a, &b| ready_at[a].total_cmp(&ready_at[b]).then(a.cmp(&b)));
    for &i in &order {
        let ready = ready_at[i] + routing_overhead;
        if i == owner {
            arrivals.push((ready, i));
            continue;
        }
        let rows = chunks[i].rows as f64;
        let xfer = lat + cm.p2p_time(rows);
        let start = if flags.async_p2p {
            ready
        } else {
            ready.max(channel_free)
        };
        channel_free = start + xfer;
        arrivals.push((start + xfer, i));
        bytes += cm.activation_bytes(rows);
        messages += 1;
    }
    arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let begin = arrivals.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
    let rows: Vec<f64> = arrivals.iter().map(|a| chunks[a.1].rows as f64).collect();
    let compute = owner_compute_time(cm, &rows, flags.gemm_fusion);
    let owner_done = begin + compute;
    // outbound
    let mut channel_free = owner_done;
    for &(_, i) in &arrivals {
        if i == owner {
            done_at[i] = owner_done;
            continue;
        }
        let rows = chunks[i].rows as f64;
        let xfer = lat + cm.p2p_time(rows);
        let start = if flags.async_p2p { owner_done } else { channel_free };
        channel_free = start + xfer;
        done_at[i] = start + xfer;
        bytes += cm.activation_bytes(rows);
        messages += 1;
    }
    CasLayerOutcome {
        done_at,
        bytes_moved: bytes,
        messages,
        owner_compute_s: compute,
    }
}

/// FSDP layer: all ranks meet at a barrier, run a ring all-gather of the
/// layer, then compute locally. Returns (compute start, per-rank barrier wait).
pub fn step_fsdp_layer(arrivals: &[f64], cm: &CostModel) -> (f64, Vec<f64>) {
    let d = arrivals.len() as u64;
    let last = arrivals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let waits = arrivals.iter().map(|&a| last - a).collect();
    (last + cm.fsdp_gather_time(d), waits)
}

// ---------------------------------------------------------------------------
// Mode switching

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModePolicy {
    pub b_threshold: u64,
    pub window_iters: u64,
    pub hysteresis_ratio: f64,
    pub min_dwell_iters: u64,
}

impl ModePolicy {
    /// Policy from scenario settings; `computed_threshold` is used unless the
    /// scenario overrides it.
    pub fn from_spec(spec: &PolicySpec, computed_threshold: u64) -> Self {
        ModePolicy {
            b_threshold: spec.b_threshold.unwrap_or(computed_threshold),
            window_iters: spec.window_iters,
            hysteresis_ratio: spec.hysteresis_ratio,
            min_dwell_iters: spec.min_dwell_iters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModeDirective {
    pub mode: SidpMode,
    pub effective_from_iter: u64,
}

/// Max over engines of the mean live batch in each engine's window.
pub fn window_statistic(recent: &[Vec<u64>]) -> f64 {
    recent
        .iter()
        .map(|w| {
            if w.is_empty() {
                0.0
            } else {
                w.iter().sum::<u64>() as f64 / w.len() as f64
            }
        })
        .fold(0.0, f64::max)
}

pub fn decide_mode(
    policy: &ModePolicy,
    recent: &[Vec<u64>],
    current: SidpMode,
    dwell: u64,
    next_iter: u64,
) -> Option<ModeDirective> {
    if dwell < policy.min_dwell_iters {
        return None;
    }
    let stat = window_statistic(recent);
    let th = policy.b_threshold as f64;
    let target = match current {
        SidpMode::Was if stat < th => SidpMode::Cas,
        SidpMode::Cas if stat > th * policy.hysteresis_ratio => SidpMode::Was,
        _ => return None,
    };
    Some(ModeDirective {
        mode: target,
        effective_from_iter: next_iter,
    })
}

/// Which mode each iteration index runs in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSchedule {
    /// (first iteration, mode), ascending.
    entries: Vec<(u64, SidpMode)>,
}

impl ModeSchedule {
    pub fn new(initial: SidpMode) -> Self {
        ModeSchedule {
            entries: vec![(0, initial)],
        }
    }

    pub fn apply(&mut self, directive: ModeDirective) {
        let last = self.entries.last().expect("schedule never empty");
        assert!(directive.effective_from_iter >= last.0, "directives must move forward");
        self.entries.push((directive.effective_from_iter, directive.mode));
    }

    pub fn mode_at(&self, iter: u64) -> SidpMode {
        self.entries
            .iter()
            .rev()
            .find(|(from, _)| *from <= iter)
            .map(|e| e.1)
            .unwrap_or(self.entries[0].1)
    }

    pub fn current(&self) -> SidpMode {
        self.entries.last().unwrap().1
    }

    pub fn last_switch_iter(&self) -> u64 {
        self.entries.last().unwrap().0
    }

    pub fn entries(&self) -> &[(u64, SidpMode)] {
        &self.entries
    }
}
