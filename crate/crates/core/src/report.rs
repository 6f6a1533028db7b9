//! Output documents of a simulated job.

use crate::capacity::MemoryBreakdown;
use crate::was_protocol::SlotAudit;
use serde::Serialize;
use std::collections::BTreeMap;

/// Bumped whenever a field changes meaning or is removed.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IterMode {
    /// Replicated or TP-sharded weights, no cross-replica traffic.
    Local,
    Was,
    Cas,
    Fsdp,
}

impl IterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IterMode::Local => "local",
            IterMode::Was => "was",
            IterMode::Cas => "cas",
            IterMode::Fsdp => "fsdp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Infeasible,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterRecord {
    pub engine: usize,
    pub iter: u64,
    pub mode: IterMode,
    pub start_s: f64,
    pub end_s: f64,
    /// Decoding sequences (each produced one token).
    pub decode_rows: u64,
    pub prefill_tokens: u64,
    pub dummy: bool,
    /// Time compute waited on weights (WaS) or on the layer barrier (FSDP).
    pub stall_s: f64,
}

impl IterRecord {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSpan {
    pub mode: IterMode,
    pub from_iter: u64,
    /// Inclusive.
    pub to_iter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobReport {
    pub format_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub status: RunStatus,
    pub message: Option<String>,
    pub weight_mode: String,
    pub dp: u64,
    pub tp: u64,
    pub pp: u64,
    pub capacity: MemoryBreakdown,
    pub b_threshold: Option<u64>,
    pub makespan_s: f64,
    pub total_tokens: u64,
    /// Sum of output lengths over requests that were not rejected.
    pub expected_tokens: u64,
    pub throughput_tok_s: f64,
    pub requests_total: u64,
    pub requests_completed: u64,
    pub requests_failed: u64,
    /// Sum of iteration times over the sum of ideal (single GPU / tp, no
    /// stalls, no sync) iteration times.
    pub scaling_efficiency: f64,
    pub per_rank_stall_s: Vec<f64>,
    /// Highest number of simultaneous weight fetches served by each owner.
    pub peak_readers_per_owner: Vec<usize>,
    /// Fraction of rank-time with k WaS slots occupied, index k.
    pub slot_occupancy: Vec<f64>,
    pub slot_audit: SlotAudit,
    pub mode_timeline: Vec<ModeSpan>,
    pub switch_count: u64,
    pub tokens_by_mode: BTreeMap<String, u64>,
    pub iterations_by_mode: BTreeMap<String, u64>,
    /// Iteration indices where engines disagreed on the mode.
    pub mode_conflicts: u64,
    pub flow_count: u64,
    pub flow_bytes: f64,
    /// Whole bytes handed to the fabric and delivered by it. Equal once a
    /// run finishes cleanly.
    pub flow_bytes_injected: u128,
    pub flow_bytes_delivered: u128,
    pub flow_conservation_max_rel_err: f64,
    pub peak_kv_used_tokens: u64,
    pub kv_violations: u64,
    pub events_processed: u64,
    pub iterations: Vec<IterRecord>,
}

impl JobReport {
    pub fn empty(scenario: &str, seed: u64, status: RunStatus, capacity: MemoryBreakdown) -> Self {
        JobReport {
            format_version: FORMAT_VERSION,
            scenario: scenario.to_string(),
            seed,
            status,
            message: None,
            weight_mode: String::new(),
            dp: 0,
            tp: 0,
            pp: 0,
            capacity,
            b_threshold: None,
            makespan_s: 0.0,
            total_tokens: 0,
            expected_tokens: 0,
            throughput_tok_s: 0.0,
            requests_total: 0,
            requests_completed: 0,
            requests_failed: 0,
            scaling_efficiency: 1.0,
            per_rank_stall_s: Vec::new(),
            peak_readers_per_owner: Vec::new(),
            slot_occupancy: Vec::new(),
            slot_audit: SlotAudit::default(),
            mode_timeline: Vec::new(),
            switch_count: 0,
            tokens_by_mode: BTreeMap::new(),
            iterations_by_mode: BTreeMap::new(),
            mode_conflicts: 0,
            flow_count: 0,
            flow_bytes: 0.0,
            flow_bytes_injected: 0,
            flow_bytes_delivered: 0,
            flow_conservation_max_rel_err: 0.0,
            peak_kv_used_tokens: 0,
            kv_violations: 0,
            events_processed: 0,
            iterations: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Mean duration of non-dummy iterations without prefill work.
    pub fn mean_decode_iteration_s(&self) -> f64 {
        let v: Vec<f64> = self
            .iterations
            .iter()
            .filter(|r| !r.dummy && r.prefill_tokens == 0 && r.decode_rows > 0)
            .map(IterRecord::duration)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn total_stall_s(&self) -> f64 {
        self.per_rank_stall_s.iter().sum()
    }

    /// Fraction of non-dummy iteration records that ran in `mode`.
    pub fn mode_share(&self, mode: IterMode) -> f64 {
        let live: Vec<&IterRecord> = self.iterations.iter().filter(|r| !r.dummy).collect();
        if live.is_empty() {
            return 0.0;
        }
        live.iter().filter(|r| r.mode == mode).count() as f64 / live.len() as f64
    }

    pub fn summary_line(&self) -> String {
        let modes: Vec<String> = self
            .iterations_by_mode
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        format!(
            "{}: status={:?} throughput={:.1} tok/s makespan={:.3} s tokens={} switches={} iterations[{}]",
            self.scenario,
            self.status,
            self.throughput_tok_s,
            self.makespan_s,
            self.total_tokens,
            self.switch_count,
            modes.join(" ")
        )
    }
}
