//! Roofline cost model.
//!
//! A layer costs `max(launch, flops / compute_rate, bytes / hbm_bandwidth)`,
//! an iteration adds one framework overhead on top of the per-layer sum. All
//! per-GPU quantities are divided by the TP degree.

use crate::catalog::{HardwareSpec, LayoutStrategy, ModelStats};
use serde::Serialize;

/// Returned by [`CostModel::saturation_batch`] when compute never dominates.
pub const SATURATION_SENTINEL: u64 = 1 << 20;

/// Context length used for threshold computations.
pub const REFERENCE_CONTEXT: f64 = 1024.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterCost {
    pub total_s: f64,
    /// Sum over layers of the compute term.
    pub compute_s: f64,
    /// Sum over layers of the memory term.
    pub hbm_s: f64,
    pub overhead_s: f64,
    /// Cost of one layer (roofline max plus TP sync).
    pub layer_s: f64,
    pub layers: u64,
}

/// Time of one layer split into the attention part and the FFN part.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LayerWork {
    pub attn_s: f64,
    pub ffn_s: f64,
}

impl LayerWork {
    pub fn total(&self) -> f64 {
        self.attn_s + self.ffn_s
    }
    fn add(self, o: LayerWork) -> LayerWork {
        LayerWork {
            attn_s: self.attn_s + o.attn_s,
            ffn_s: self.ffn_s + o.ffn_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostModel {
    pub stats: ModelStats,
    pub hw: HardwareSpec,
    pub tp: u64,
    pub pp: u64,
    pub micro_batches: u64,
    /// Context length used for B_e and B_th.
    pub reference_ctx: f64,
}

struct Terms {
    attn_flops: f64,
    ffn_flops: f64,
    attn_bytes: f64,
    ffn_bytes: f64,
}

impl CostModel {
    pub fn new(stats: &ModelStats, hw: &HardwareSpec, layout: &LayoutStrategy) -> CostModel {
        CostModel {
            stats: stats.clone(),
            hw: hw.clone(),
            tp: layout.tp,
            pp: layout.pp,
            micro_batches: layout.micro_batches,
            reference_ctx: REFERENCE_CONTEXT,
        }
    }

    fn terms(&self, rows: f64, ctx: f64, tp: f64) -> Terms {
        let s = &self.stats;
        let kv_width = (s.num_kv_heads * s.head_dim) as f64;
        let score_flops = 2.0 * rows * ctx * kv_width * 2.0;
        let act_bytes = 2.0 * rows * (s.hidden_size * s.dtype_bytes) as f64;
        Terms {
            attn_flops: (2.0 * s.attn_params_per_layer as f64 * rows + score_flops) / tp,
            ffn_flops: 2.0 * s.ffn_params_per_layer as f64 * rows / tp,
            attn_bytes: (s.attn_bytes_per_layer() as f64 + rows * ctx * s.kv_bytes_per_token_per_layer() as f64) / tp
                + act_bytes,
            ffn_bytes: s.ffn_bytes_per_layer as f64 / tp,
        }
    }

    fn sync_s(&self) -> f64 {
        if self.tp > 1 {
            self.hw.tp_sync_overhead
        } else {
            0.0
        }
    }

    /// Layers executed by one pipeline stage.
    pub fn layers_per_stage(&self) -> u64 {
        self.stats.num_layers.div_ceil(self.pp)
    }

    /// FFN-only layer time for `rows` rows.
    pub fn layer_ffn_time(&self, rows: f64) -> f64 {
        if rows <= 0.0 {
            return 0.0;
        }
        let t = self.terms(rows, 0.0, self.tp as f64);
        self.hw
            .kernel_launch_overhead
            .max(t.ffn_flops / self.hw.compute_rate)
            .max(t.ffn_bytes / self.hw.hbm_bandwidth)
    }

    /// Roofline time of a whole layer (no TP sync).
    pub fn layer_roofline(&self, rows: f64, ctx: f64) -> f64 {
        if rows <= 0.0 {
            return 0.0;
        }
        let t = self.terms(rows, ctx, self.tp as f64);
        self.hw
            .kernel_launch_overhead
            .max((t.attn_flops + t.ffn_flops) / self.hw.compute_rate)
            .max((t.attn_bytes + t.ffn_bytes) / self.hw.hbm_bandwidth)
    }

    /// Splits the layer roofline between attention and FFN in proportion to
    /// each part's own bound, so the two phases always add up to the layer.
    /// TP sync is charged to the attention phase.
    pub fn layer_work(&self, rows: f64, ctx: f64) -> LayerWork {
        if rows <= 0.0 {
            return LayerWork::default();
        }
        let t = self.terms(rows, ctx, self.tp as f64);
        let r = self.hw.compute_rate;
        let m = self.hw.hbm_bandwidth;
        let a = (t.attn_flops / r).max(t.attn_bytes / m);
        let f = (t.ffn_flops / r).max(t.ffn_bytes / m);
        let layer = self.layer_roofline(rows, ctx);
        let attn = layer * a / (a + f);
        LayerWork {
            attn_s: attn + self.sync_s(),
            ffn_s: layer - attn,
        }
    }

    /// Work of one layer for a mixed iteration: `decode_rows` decoding
    /// sequences at mean context `decode_ctx` plus a prefill of `prompts`.
    pub fn mixed_layer_work(&self, decode_rows: f64, decode_ctx: f64, prompts: &[u64]) -> LayerWork {
        let mut w = self.layer_work(decode_rows, decode_ctx);
        if let Some((rows, ctx)) = prefill_shape(prompts) {
            let p = self.layer_work(rows, ctx);
            // one sync per layer, not per sub-batch
            let p = if decode_rows > 0.0 {
                LayerWork {
                    attn_s: p.attn_s - self.sync_s(),
                    ffn_s: p.ffn_s,
                }
            } else {
                p
            };
            w = w.add(p);
        }
        w
    }

    pub fn iter_decode_time(&self, b: f64, ctx: f64) -> IterCost {
        let layers = self.layers_per_stage();
        let t = self.terms(b, ctx, self.tp as f64);
        let compute = (t.attn_flops + t.ffn_flops) / self.hw.compute_rate;
        let hbm = (t.attn_bytes + t.ffn_bytes) / self.hw.hbm_bandwidth;
        let layer = if b > 0.0 {
            self.layer_roofline(b, ctx) + self.sync_s()
        } else {
            0.0
        };
        let overhead = self.hw.framework_overhead;
        IterCost {
            total_s: overhead + layers as f64 * layer,
            compute_s: layers as f64 * compute,
            hbm_s: layers as f64 * hbm,
            overhead_s: overhead,
            layer_s: layer,
            layers,
        }
    }

    /// Iteration time of a pipelined replica: per-stage time stretched by the
    /// bubble factor `1 + (pp - 1) / micro_batches`.
    pub fn pipeline_bubble(&self) -> f64 {
        1.0 + (self.pp - 1) as f64 / self.micro_batches as f64
    }

    /// Prefill cost of a set of prompts: the roofline evaluated at one row per
    /// prompt token, with the causal-average context.
    pub fn prefill_time(&self, prompts: &[u64]) -> f64 {
        match prefill_shape(prompts) {
            Some((rows, ctx)) => self.iter_decode_time(rows, ctx).total_s,
            None => 0.0,
        }
    }

    /// Per-layer cost of the same work on one GPU, divided by the TP degree.
    /// Used as the "ideal" reference for the measured scaling efficiency.
    pub fn ideal_layer_time(&self, rows: f64, ctx: f64) -> f64 {
        if rows <= 0.0 {
            return 0.0;
        }
        let t = self.terms(rows, ctx, 1.0);
        let one = self
            .hw
            .kernel_launch_overhead
            .max((t.attn_flops + t.ffn_flops) / self.hw.compute_rate)
            .max((t.attn_bytes + t.ffn_bytes) / self.hw.hbm_bandwidth);
        one / self.tp as f64
    }

    /// B_e: smallest batch whose summed compute term reaches the summed memory
    /// and fixed (launch + framework) terms at the reference context.
    pub fn saturation_batch(&self) -> u64 {
        let ctx = self.reference_ctx;
        let layers = self.layers_per_stage() as f64;
        let reached = |b: u64| {
            let t = self.terms(b as f64, ctx, self.tp as f64);
            let compute = layers * (t.attn_flops + t.ffn_flops) / self.hw.compute_rate;
            let memory = layers * (t.attn_bytes + t.ffn_bytes) / self.hw.hbm_bandwidth;
            let fixed = layers * self.hw.kernel_launch_overhead + self.hw.framework_overhead;
            compute >= memory + fixed
        };
        search_first(reached)
    }

    /// B_th: smallest batch whose decode iteration hides a full prefetch of
    /// every non-owned FFN layer.
    pub fn switch_threshold(&self, d: u64) -> u64 {
        assert!(d >= 2, "switch threshold needs d >= 2");
        let bytes = self.stats.ffn_bytes_total as f64 * (d - 1) as f64 / d as f64 / self.tp as f64;
        let fetch = fetch_time(bytes, self.hw.link_bandwidth, 1);
        let ctx = self.reference_ctx;
        search_first(|b| self.iter_decode_time(b as f64, ctx).total_s >= fetch)
    }

    /// One-direction activation transfer for `rows` rows.
    pub fn p2p_time(&self, rows: f64) -> f64 {
        rows * (self.stats.hidden_size * self.stats.dtype_bytes) as f64 / self.hw.link_bandwidth
    }

    /// Activation bytes shipped for `rows` rows.
    pub fn activation_bytes(&self, rows: f64) -> f64 {
        rows * (self.stats.hidden_size * self.stats.dtype_bytes) as f64
    }

    /// Ring all-gather of one FFN layer across `d` ranks.
    pub fn fsdp_gather_time(&self, d: u64) -> f64 {
        if d <= 1 {
            return 0.0;
        }
        let bytes = self.stats.ffn_bytes_per_layer as f64 / self.tp as f64;
        (d - 1) as f64 / d as f64 * bytes / self.hw.link_bandwidth
    }
}

/// Rows and causal-average context for prefilling `prompts` together.
pub fn prefill_shape(prompts: &[u64]) -> Option<(f64, f64)> {
    let rows: u64 = prompts.iter().sum();
    if rows == 0 {
        return None;
    }
    let sq: f64 = prompts.iter().map(|&p| (p as f64) * (p as f64)).sum();
    Some((rows as f64, sq / (2.0 * rows as f64)))
}

/// Seconds to move `bytes` when `readers` share a link equally.
pub fn fetch_time(bytes: f64, link_bw: f64, readers: u64) -> f64 {
    assert!(readers >= 1, "at least one reader");
    if bytes <= 0.0 {
        return 0.0;
    }
    bytes / (link_bw / readers as f64)
}

/// Smallest b in [1, SENTINEL] with `pred(b)`, assuming `pred` is monotone.
/// Doubling finds the bracket, a linear scan refines it.
fn search_first(pred: impl Fn(u64) -> bool) -> u64 {
    if pred(1) {
        return 1;
    }
    let mut hi = 2;
    while hi < SATURATION_SENTINEL && !pred(hi) {
        hi *= 2;
    }
    if hi >= SATURATION_SENTINEL && !pred(SATURATION_SENTINEL) {
        return SATURATION_SENTINEL;
    }
    let lo = hi / 2;
    (lo + 1..=hi).find(|&b| pred(b)).unwrap_or(hi)
}
