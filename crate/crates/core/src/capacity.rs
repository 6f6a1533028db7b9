//! Per-GPU memory ledger and KV-cache capacity for each weight layout.
//!
//! All byte quantities are integers. Divisions that split bytes across GPUs
//! round up, so a GPU never appears to hold less than its share.

use crate::catalog::{HardwareSpec, LayoutStrategy, ModelStats, Scenario, WeightMode};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CapacityError {
    #[error("cache slots only exist for the sidp weight mode (got {0})")]
    NotSidp(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryBreakdown {
    /// floor(M x mem_utilization)
    pub usable_bytes_per_gpu: u64,
    pub weight_bytes_per_gpu: u64,
    /// WaS slots for sidp, the all-gather double buffer for fsdp, 0 otherwise.
    pub cache_slot_bytes_per_gpu: u64,
    pub activation_reserve_bytes: u64,
    pub kv_budget_bytes_per_gpu: u64,
    pub kv_bytes_per_token_per_gpu: u64,
    pub kv_tokens_per_gpu: u64,
    /// Sum over DP replicas.
    pub kv_tokens_per_node: u64,
    pub feasible: bool,
}

fn div_ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Weight bytes resident on one GPU (excluding prefetch slots).
pub fn weight_footprint(stats: &ModelStats, layout: &LayoutStrategy) -> u64 {
    let shards = layout.tp * layout.pp;
    match layout.weight_mode {
        WeightMode::Replicated | WeightMode::TpShard => div_ceil(stats.weight_bytes_total, shards),
        WeightMode::Fsdp | WeightMode::Sidp => {
            let ffn_share = div_ceil(stats.ffn_bytes_total, layout.dp);
            div_ceil(stats.non_ffn_weight_bytes + ffn_share, shards)
        }
    }
}

/// Bytes of one full FFN layer held by a single GPU of a TP group.
pub fn ffn_layer_bytes_per_gpu(stats: &ModelStats, tp: u64) -> u64 {
    div_ceil(stats.ffn_bytes_per_layer, tp)
}

/// WaS prefetch slot bytes per GPU.
pub fn slot_bytes(stats: &ModelStats, layout: &LayoutStrategy) -> Result<u64, CapacityError> {
    if layout.weight_mode != WeightMode::Sidp {
        return Err(CapacityError::NotSidp(layout.weight_mode.as_str()));
    }
    Ok(layout.was_slot_count * single_slot_bytes(stats, layout))
}

pub fn single_slot_bytes(stats: &ModelStats, layout: &LayoutStrategy) -> u64 {
    let full = ffn_layer_bytes_per_gpu(stats, layout.tp);
    (full as f64 * layout.slot_granularity).ceil() as u64
}

/// CaS staging buffers for a chunk of `rows` activations per source engine.
/// Reported separately; not charged against the KV budget.
pub fn cas_staging_bytes(stats: &ModelStats, layout: &LayoutStrategy, rows: u64) -> u64 {
    layout.cas_slot_count * layout.dp * rows * stats.hidden_size * stats.dtype_bytes
}

fn cache_bytes(stats: &ModelStats, layout: &LayoutStrategy) -> u64 {
    match layout.weight_mode {
        WeightMode::Sidp => layout.was_slot_count * single_slot_bytes(stats, layout),
        // gather into one buffer while computing out of the other
        WeightMode::Fsdp => 2 * ffn_layer_bytes_per_gpu(stats, layout.tp),
        _ => 0,
    }
}

pub fn kv_capacity_for(stats: &ModelStats, hw: &HardwareSpec, layout: &LayoutStrategy) -> MemoryBreakdown {
    let usable = (hw.hbm_bytes as f64 * layout.mem_utilization).floor() as u64;
    let weights = weight_footprint(stats, layout);
    let slots = cache_bytes(stats, layout);
    let reserve = layout.activation_reserve_bytes;
    let committed = weights + slots + reserve;
    let budget = usable.saturating_sub(committed);
    let per_token = div_ceil(stats.kv_bytes_per_token, layout.tp * layout.pp);
    let per_gpu = budget / per_token;
    MemoryBreakdown {
        usable_bytes_per_gpu: usable,
        weight_bytes_per_gpu: weights,
        cache_slot_bytes_per_gpu: slots,
        activation_reserve_bytes: reserve,
        kv_budget_bytes_per_gpu: budget,
        kv_bytes_per_token_per_gpu: per_token,
        kv_tokens_per_gpu: per_gpu,
        kv_tokens_per_node: per_gpu * layout.dp,
        feasible: budget > 0,
    }
}

pub fn kv_capacity(scenario: &Scenario) -> MemoryBreakdown {
    kv_capacity_for(&scenario.stats(), &scenario.hardware, &scenario.layout)
}

/// Sequences of length `s` that fit in `kv_tokens`.
pub fn max_batch(kv_tokens: u64, s: u64) -> u64 {
    assert!(s >= 1, "sequence length must be >= 1");
    kv_tokens / s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{derive_model_stats, Catalog};

    fn stats(name: &str) -> ModelStats {
        derive_model_stats(&Catalog::builtin().model(name).unwrap()).unwrap()
    }

    #[test]
    fn llama_footprints() {
        let s = stats("llama-3.1-70b");
        let rep = weight_footprint(&s, &LayoutStrategy::new(8, 1, WeightMode::Replicated));
        assert!((rep as f64 / 141.2e9 - 1.0).abs() < 0.005, "{rep}");
        let sidp = weight_footprint(&s, &LayoutStrategy::new(8, 1, WeightMode::Sidp));
        assert!((sidp as f64 / 42.5e9 - 1.0).abs() < 0.005, "{sidp}");
        let one = weight_footprint(&s, &LayoutStrategy::new(1, 1, WeightMode::Replicated));
        assert_eq!(one, s.weight_bytes_total);
    }

    #[test]
    fn slot_sizes() {
        let s = stats("llama-3.1-70b");
        let b = slot_bytes(&s, &LayoutStrategy::new(8, 1, WeightMode::Sidp)).unwrap();
        assert!((b as f64 / 9.87e9 - 1.0).abs() < 0.005, "{b}");
        let b2 = slot_bytes(&s, &LayoutStrategy::new(2, 1, WeightMode::Sidp)).unwrap();
        assert_eq!(b2, s.ffn_bytes_per_layer);
        let q = stats("qwen3-32b");
        let bq = slot_bytes(&q, &LayoutStrategy::new(8, 1, WeightMode::Sidp)).unwrap();
        assert!((bq as f64 / 5.5e9 - 1.0).abs() < 0.01, "{bq}");
        assert!(slot_bytes(&s, &LayoutStrategy::new(8, 1, WeightMode::Replicated)).is_err());
    }

    #[test]
    fn llama_h20_feasibility() {
        let s = stats("llama-3.1-70b");
        let hw = Catalog::builtin().hardware("h20").unwrap();
        let rep = kv_capacity_for(&s, &hw, &LayoutStrategy::new(8, 1, WeightMode::Replicated));
        assert!(!rep.feasible);
        assert_eq!(rep.kv_tokens_per_node, 0);
        let sidp = kv_capacity_for(&s, &hw, &LayoutStrategy::new(8, 1, WeightMode::Sidp));
        assert!(sidp.feasible);
        let t = sidp.kv_tokens_per_node as f64;
        assert!((0.5e6..=2.0e6).contains(&t), "{t}");
    }

    #[test]
    fn batch_bounds() {
        assert_eq!(max_batch(1_000_000, 4096), 244);
        assert_eq!(max_batch(0, 17), 0);
        assert_eq!(max_batch(512 * 500, 512), 500);
    }
}
