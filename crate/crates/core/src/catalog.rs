//! Model, hardware, workload and scenario descriptions.
//!
//! Scenarios are TOML documents with the sections `model`, `hardware`,
//! `layout`, `workload`, `policy` and `ablation`. The `model` and `hardware`
//! sections either name a bundled preset (`preset = "h20"`) or spell out every
//! field; preset fields can be overridden individually.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown {kind} `{name}`")]
    UnknownReference { kind: &'static str, name: String },
    #[error("missing field `{section}.{field}`")]
    Missing { section: &'static str, field: &'static str },
    #[error("invalid scenario: {0}")]
    Invariant(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invariant(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invariant(msg.into())
}

/// Parses a byte (or bytes-per-second) quantity. Suffixes are decimal:
/// `KB` = 1e3, `MB` = 1e6, `GB` = 1e9, `TB` = 1e12. A trailing `/s` is allowed.
pub fn parse_quantity(text: &str) -> Result<f64, String> {
    let t = text.trim();
    let t = t.strip_suffix("/s").unwrap_or(t).trim();
    let upper = t.to_ascii_uppercase();
    let (num, scale) = if let Some(n) = upper.strip_suffix("TB") {
        (n, 1e12)
    } else if let Some(n) = upper.strip_suffix("GB") {
        (n, 1e9)
    } else if let Some(n) = upper.strip_suffix("MB") {
        (n, 1e6)
    } else if let Some(n) = upper.strip_suffix("KB") {
        (n, 1e3)
    } else if let Some(n) = upper.strip_suffix('B') {
        (n, 1.0)
    } else {
        (upper.as_str(), 1.0)
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("cannot parse quantity `{text}`"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("quantity `{text}` must be a finite non-negative number"));
    }
    Ok(v * scale)
}

/// A number, or a string with a decimal unit suffix.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Quantity {
    Num(f64),
    Text(String),
}

impl Quantity {
    fn value(&self, field: &str) -> Result<f64, ConfigError> {
        match self {
            Quantity::Num(v) => Ok(*v),
            Quantity::Text(s) => parse_quantity(s).map_err(|e| invariant(format!("{field}: {e}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub hidden_size: u64,
    pub ffn_intermediate_size: u64,
    pub num_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    /// Allows `head_dim * num_heads != hidden_size` (e.g. Qwen3).
    pub explicit_head_dim: bool,
    pub vocab_size: u64,
    pub tied_embeddings: bool,
    pub dtype_bytes: u64,
    /// Size the vendor advertises, in billions of parameters. Informational.
    pub advertised_params_b: Option<f64>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("ffn_intermediate_size", self.ffn_intermediate_size),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("dtype_bytes", self.dtype_bytes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(invariant(format!("model {}: {name} must be > 0", self.name)));
            }
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(invariant(format!(
                "model {}: num_kv_heads ({}) must divide num_heads ({})",
                self.name, self.num_kv_heads, self.num_heads
            )));
        }
        if !self.explicit_head_dim && self.head_dim * self.num_heads != self.hidden_size {
            return Err(invariant(format!(
                "model {}: head_dim x num_heads = {} but hidden_size = {} (set explicit_head_dim = true to allow this)",
                self.name,
                self.head_dim * self.num_heads,
                self.hidden_size
            )));
        }
        Ok(())
    }
}

/// Parameter and byte counts derived from a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelStats {
    pub num_layers: u64,
    pub hidden_size: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub dtype_bytes: u64,
    pub total_params: u64,
    pub ffn_params: u64,
    pub attn_params: u64,
    pub embedding_params: u64,
    pub ffn_fraction: f64,
    pub ffn_params_per_layer: u64,
    pub attn_params_per_layer: u64,
    pub ffn_bytes_per_layer: u64,
    pub ffn_bytes_total: u64,
    pub non_ffn_weight_bytes: u64,
    pub weight_bytes_total: u64,
    /// K and V for every layer.
    pub kv_bytes_per_token: u64,
}

impl ModelStats {
    pub fn kv_bytes_per_token_per_layer(&self) -> u64 {
        self.kv_bytes_per_token / self.num_layers
    }
    pub fn attn_bytes_per_layer(&self) -> u64 {
        self.attn_params_per_layer * self.dtype_bytes
    }
}

pub fn derive_model_stats(spec: &ModelSpec) -> Result<ModelStats, ConfigError> {
    spec.validate()?;
    let l = spec.num_layers;
    let h = spec.hidden_size;
    let ffn_per_layer = 3 * h * spec.ffn_intermediate_size;
    let q_width = spec.num_heads * spec.head_dim;
    let kv_width = spec.num_kv_heads * spec.head_dim;
    // q and o projections are h x (heads*head_dim); k and v are h x (kv_heads*head_dim).
    let attn_per_layer = 2 * h * q_width + 2 * h * kv_width;
    let embedding = spec.vocab_size * h * if spec.tied_embeddings { 1 } else { 2 };
    let ffn_params = l * ffn_per_layer;
    let attn_params = l * attn_per_layer;
    let total = ffn_params + attn_params + embedding;
    let dt = spec.dtype_bytes;
    Ok(ModelStats {
        num_layers: l,
        hidden_size: h,
        num_kv_heads: spec.num_kv_heads,
        head_dim: spec.head_dim,
        dtype_bytes: dt,
        total_params: total,
        ffn_params,
        attn_params,
        embedding_params: embedding,
        ffn_fraction: ffn_params as f64 / total as f64,
        ffn_params_per_layer: ffn_per_layer,
        attn_params_per_layer: attn_per_layer,
        ffn_bytes_per_layer: ffn_per_layer * dt,
        ffn_bytes_total: ffn_params * dt,
        non_ffn_weight_bytes: (total - ffn_params) * dt,
        weight_bytes_total: total * dt,
        kv_bytes_per_token: 2 * spec.num_kv_heads * spec.head_dim * dt * l,
    })
}

// ---------------------------------------------------------------------------
// Hardware

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardwareSpec {
    pub name: String,
    pub gpus_per_node: u64,
    pub hbm_bytes: u64,
    /// Dense half-precision FLOP/s.
    pub compute_rate: f64,
    pub hbm_bandwidth: f64,
    /// Per-GPU unidirectional egress, bytes/s.
    pub link_bandwidth: f64,
    /// Seconds per layer.
    pub kernel_launch_overhead: f64,
    /// Seconds per iteration.
    pub framework_overhead: f64,
    /// Per-layer synchronization cost for TP groups (only charged when tp > 1).
    pub tp_sync_overhead: f64,
    /// Fixed latency of one point-to-point activation message.
    pub p2p_latency: f64,
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = &self.name;
        if self.gpus_per_node == 0 || self.hbm_bytes == 0 {
            return Err(invariant(format!(
                "hardware {n}: gpus_per_node and hbm_bytes must be > 0"
            )));
        }
        for (field, v) in [
            ("compute_rate", self.compute_rate),
            ("hbm_bandwidth", self.hbm_bandwidth),
            ("link_bandwidth", self.link_bandwidth),
        ] {
            if !(v > 0.0) {
                return Err(invariant(format!("hardware {n}: {field} must be positive")));
            }
        }
        for (field, v) in [
            ("kernel_launch_overhead", self.kernel_launch_overhead),
            ("framework_overhead", self.framework_overhead),
            ("tp_sync_overhead", self.tp_sync_overhead),
            ("p2p_latency", self.p2p_latency),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invariant(format!("hardware {n}: {field} must be finite and >= 0")));
            }
        }
        if self.link_bandwidth > self.hbm_bandwidth {
            return Err(invariant(format!(
                "hardware {n}: link_bandwidth must not exceed hbm_bandwidth"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layout

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Replicated,
    #[serde(alias = "tp_shard", alias = "tp")]
    TpShard,
    Fsdp,
    Sidp,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::Replicated => "replicated",
            WeightMode::TpShard => "tpshard",
            WeightMode::Fsdp => "fsdp",
            WeightMode::Sidp => "sidp",
        }
    }
    /// Whether FFN weights are sharded across DP replicas.
    pub fn shards_ffn(self) -> bool {
        matches!(self, WeightMode::Fsdp | WeightMode::Sidp)
    }
}

impl std::str::FromStr for WeightMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "replicated" => Ok(WeightMode::Replicated),
            "tpshard" | "tp_shard" | "tp" => Ok(WeightMode::TpShard),
            "fsdp" => Ok(WeightMode::Fsdp),
            "sidp" => Ok(WeightMode::Sidp),
            other => Err(format!("unknown weight mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutStrategy {
    pub dp: u64,
    pub tp: u64,
    pub pp: u64,
    pub weight_mode: WeightMode,
    pub mem_utilization: f64,
    pub activation_reserve_bytes: u64,
    pub cas_slot_count: u64,
    pub was_slot_count: u64,
    /// Fraction of a full FFN layer held by one slot (1.0 = whole layer).
    pub slot_granularity: f64,
    /// Prefetches in flight (issued but not yet consumed) per rank.
    pub lookahead: u64,
    pub peak_shifting: bool,
    /// Engines of a sharded-FFN group start each iteration together (the
    /// dummy-run rhythm of DP serving stacks). Drained engines that skip
    /// dummy runs leave the rhythm.
    pub lockstep_iterations: bool,
    /// Micro-batches used for the pipeline bubble factor when pp > 1.
    pub micro_batches: u64,
}

impl LayoutStrategy {
    pub fn new(dp: u64, tp: u64, weight_mode: WeightMode) -> Self {
        let d1 = dp.saturating_sub(1).max(1);
        LayoutStrategy {
            dp,
            tp,
            pp: 1,
            weight_mode,
            mem_utilization: DEFAULT_MEM_UTILIZATION,
            activation_reserve_bytes: DEFAULT_ACTIVATION_RESERVE,
            cas_slot_count: 2,
            was_slot_count: d1,
            slot_granularity: 1.0,
            lookahead: d1,
            peak_shifting: true,
            lockstep_iterations: true,
            micro_batches: 1,
        }
    }

    pub fn validate(&self, hw: &HardwareSpec) -> Result<(), ConfigError> {
        if self.dp == 0 || self.tp == 0 || self.pp == 0 {
            return Err(invariant("layout: dp, tp and pp must be >= 1"));
        }
        if self.dp * self.tp * self.pp > hw.gpus_per_node {
            return Err(invariant(format!(
                "layout: dp x tp x pp = {} exceeds {} GPUs per node",
                self.dp * self.tp * self.pp,
                hw.gpus_per_node
            )));
        }
        if self.weight_mode == WeightMode::Sidp && self.dp < 2 {
            return Err(invariant("layout: weight_mode = sidp requires dp >= 2"));
        }
        if !(self.mem_utilization > 0.0 && self.mem_utilization <= 1.0) {
            return Err(invariant("layout: mem_utilization must lie in (0, 1]"));
        }
        if !(self.slot_granularity > 0.0 && self.slot_granularity <= 1.0) {
            return Err(invariant("layout: slot_granularity must lie in (0, 1]"));
        }
        if self.weight_mode.shards_ffn() && self.pp > 1 {
            return Err(invariant(
                "layout: pp > 1 is only simulated for replicated/tpshard layouts",
            ));
        }
        if self.weight_mode == WeightMode::Sidp {
            if self.lookahead > self.was_slot_count {
                return Err(invariant("layout: lookahead must not exceed was_slot_count"));
            }
            // A lookahead shorter than one cycle can pin every slot on a layer that is
            // consumed after the one compute is waiting for.
            if self.lookahead < self.dp - 1 {
                return Err(invariant("layout: lookahead must be at least dp - 1"));
            }
        }
        if self.cas_slot_count == 0 {
            return Err(invariant("layout: cas_slot_count must be >= 1"));
        }
        if self.micro_batches == 0 {
            return Err(invariant("layout: micro_batches must be >= 1"));
        }
        Ok(())
    }

    pub fn gpus(&self) -> u64 {
        self.dp * self.tp * self.pp
    }
}

pub const DEFAULT_MEM_UTILIZATION: f64 = 0.9;
pub const DEFAULT_ACTIVATION_RESERVE: u64 = 10_000_000_000;

// ---------------------------------------------------------------------------
// Workload

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Constant {
        value: u64,
    },
    /// Request `i` gets `values[i % len]`.
    List {
        values: Vec<u64>,
    },
    Uniform {
        min: u64,
        max: u64,
    },
    /// Exactly `round(tail_fraction * n)` requests, chosen by the seed, get
    /// `base * tail_factor`; the rest get `base`.
    LongTail {
        base: u64,
        tail_factor: u64,
        tail_fraction: f64,
    },
}

impl LengthDist {
    fn validate(&self, what: &str) -> Result<(), ConfigError> {
        let bad = match self {
            LengthDist::Constant { value } => *value == 0,
            LengthDist::List { values } => values.is_empty() || values.contains(&0),
            LengthDist::Uniform { min, max } => *min == 0 || min > max,
            LengthDist::LongTail {
                base,
                tail_factor,
                tail_fraction,
            } => *base == 0 || *tail_factor == 0 || !(0.0..=1.0).contains(tail_fraction),
        };
        if bad {
            return Err(invariant(format!(
                "workload.{what}: lengths must be >= 1 and well formed"
            )));
        }
        Ok(())
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
        match self {
            LengthDist::Constant { value } => vec![*value; n],
            LengthDist::List { values } => (0..n).map(|i| values[i % values.len()]).collect(),
            LengthDist::Uniform { min, max } => (0..n).map(|_| rng.gen_range(*min..=*max)).collect(),
            LengthDist::LongTail {
                base,
                tail_factor,
                tail_fraction,
            } => {
                let tails = ((n as f64) * tail_fraction).round() as usize;
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(rng);
                let mut out = vec![*base; n];
                for &i in idx.iter().take(tails) {
                    out[i] = base * tail_factor;
                }
                out
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            LengthDist::Constant { value } => *value as f64,
            LengthDist::List { values } => values.iter().sum::<u64>() as f64 / values.len() as f64,
            LengthDist::Uniform { min, max } => (*min + *max) as f64 / 2.0,
            LengthDist::LongTail {
                base,
                tail_factor,
                tail_fraction,
            } => *base as f64 * (1.0 - tail_fraction + tail_fraction * *tail_factor as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub num_requests: u64,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
    pub seed: u64,
    /// Cap on concurrently admitted requests per engine (fixed-batch style).
    pub max_concurrent: Option<u64>,
}

/// One generated request: (prompt tokens, output tokens).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RequestShape {
    pub id: u64,
    pub prompt_len: u64,
    pub output_len: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.prompt_len.validate("prompt_len")?;
        self.output_len.validate("output_len")?;
        if self.max_concurrent == Some(0) {
            return Err(invariant("workload.max_concurrent must be >= 1"));
        }
        Ok(())
    }

    /// Deterministic request list for this workload's seed.
    pub fn generate(&self) -> Vec<RequestShape> {
        let n = self.num_requests as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let prompts = self.prompt_len.sample(n, &mut rng);
        let outputs = self.output_len.sample(n, &mut rng);
        (0..n)
            .map(|i| RequestShape {
                id: i as u64,
                prompt_len: prompts[i],
                output_len: outputs[i],
            })
            .collect()
    }

    pub fn mean_sequence_len(&self) -> f64 {
        self.prompt_len.mean() + self.output_len.mean()
    }
}

// ---------------------------------------------------------------------------
// Policy and ablation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelect {
    Auto,
    Was,
    Cas,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySpec {
    pub mode: ModeSelect,
    /// Overrides the computed switch threshold.
    pub b_threshold: Option<u64>,
    pub window_iters: u64,
    pub hysteresis_ratio: f64,
    pub min_dwell_iters: u64,
    /// Fixed CaS routing/wrapping cost per layer, seconds.
    pub routing_overhead: f64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            mode: ModeSelect::Auto,
            b_threshold: None,
            window_iters: 50,
            hysteresis_ratio: 1.5,
            min_dwell_iters: 100,
            routing_overhead: 3e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationFlags {
    pub async_p2p: bool,
    pub gemm_fusion: bool,
    pub dummy_skip: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            async_p2p: true,
            gemm_fusion: true,
            dummy_skip: true,
        }
    }
}

pub const DEFAULT_EVENT_LIMIT: u64 = 200_000_000;
pub const DEFAULT_QUEUE_LIMIT: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
    pub layout: LayoutStrategy,
    pub workload: WorkloadSpec,
    pub policy: PolicySpec,
    pub ablation: AblationFlags,
    /// Safety bound on processed events.
    pub event_limit: u64,
    /// Safety bound on pending events.
    pub queue_limit: u64,
}

impl Scenario {
    pub fn stats(&self) -> ModelStats {
        derive_model_stats(&self.model).expect("scenario model validated at load time")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.hardware.validate()?;
        self.layout.validate(&self.hardware)?;
        self.workload.validate()?;
        if !(self.policy.hysteresis_ratio > 1.0) {
            return Err(invariant("policy.hysteresis_ratio must be > 1"));
        }
        if self.policy.window_iters == 0 {
            return Err(invariant("policy.window_iters must be >= 1"));
        }
        if !(self.policy.routing_overhead >= 0.0) {
            return Err(invariant("policy.routing_overhead must be >= 0"));
        }
        Ok(())
    }

    /// Builds a scenario from bundled presets with default layout settings.
    pub fn from_presets(
        model: &str,
        hardware: &str,
        layout: LayoutStrategy,
        workload: WorkloadSpec,
    ) -> Result<Scenario, ConfigError> {
        let cat = Catalog::builtin();
        let sc = Scenario {
            name: format!(
                "{model}-{hardware}-{}-tp{}-dp{}",
                layout.weight_mode.as_str(),
                layout.tp,
                layout.dp
            ),
            model: cat.model(model)?,
            hardware: cat.hardware(hardware)?,
            layout,
            workload,
            policy: PolicySpec::default(),
            ablation: AblationFlags::default(),
            event_limit: DEFAULT_EVENT_LIMIT,
            queue_limit: DEFAULT_QUEUE_LIMIT,
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_toml_str(text: &str) -> Result<Scenario, ConfigError> {
        Self::from_toml_str_with(text, &Catalog::builtin())
    }

    pub fn from_toml_str_with(text: &str, catalog: &Catalog) -> Result<Scenario, ConfigError> {
        let raw: RawScenario = parse_toml(text)?;
        raw.resolve(catalog)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Scenario, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut sc = Self::from_toml_str(&text)?;
        if sc.name.is_empty() {
            sc.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(sc)
    }
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = match e.span() {
            Some(span) => line_col(text, span.start),
            None => (0, 0),
        };
        ConfigError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map(|p| offset - p).unwrap_or(offset + 1);
    (line, column)
}

// ---------------------------------------------------------------------------
// Raw (document) forms

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    event_limit: Option<u64>,
    #[serde(default)]
    queue_limit: Option<u64>,
    model: Option<RawModel>,
    hardware: Option<RawHardware>,
    layout: Option<RawLayout>,
    workload: Option<RawWorkload>,
    #[serde(default)]
    policy: Option<RawPolicy>,
    #[serde(default)]
    ablation: Option<RawAblation>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    preset: Option<String>,
    name: Option<String>,
    num_layers: Option<u64>,
    hidden_size: Option<u64>,
    ffn_intermediate_size: Option<u64>,
    num_heads: Option<u64>,
    num_kv_heads: Option<u64>,
    head_dim: Option<u64>,
    explicit_head_dim: Option<bool>,
    vocab_size: Option<u64>,
    tied_embeddings: Option<bool>,
    dtype_bytes: Option<u64>,
    advertised_params_b: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHardware {
    preset: Option<String>,
    name: Option<String>,
    gpus_per_node: Option<u64>,
    hbm_bytes: Option<Quantity>,
    compute_rate: Option<f64>,
    hbm_bandwidth: Option<Quantity>,
    link_bandwidth: Option<Quantity>,
    kernel_launch_overhead: Option<f64>,
    framework_overhead: Option<f64>,
    tp_sync_overhead: Option<f64>,
    p2p_latency: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    dp: Option<u64>,
    tp: Option<u64>,
    pp: Option<u64>,
    weight_mode: Option<WeightMode>,
    mem_utilization: Option<f64>,
    activation_reserve: Option<Quantity>,
    cas_slot_count: Option<u64>,
    was_slot_count: Option<u64>,
    slot_granularity: Option<f64>,
    lookahead: Option<u64>,
    peak_shifting: Option<bool>,
    lockstep_iterations: Option<bool>,
    micro_batches: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawDist {
    Constant(u64),
    List(Vec<u64>),
    Table(RawDistTable),
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawDistTable {
    Constant {
        value: u64,
    },
    Uniform {
        min: u64,
        max: u64,
    },
    LongTail {
        base: u64,
        #[serde(default = "default_tail_factor")]
        tail_factor: u64,
        #[serde(default = "default_tail_fraction")]
        tail_fraction: f64,
    },
}

fn default_tail_factor() -> u64 {
    8
}
fn default_tail_fraction() -> f64 {
    0.1
}

impl From<RawDist> for LengthDist {
    fn from(r: RawDist) -> Self {
        match r {
            RawDist::Constant(value) => LengthDist::Constant { value },
            RawDist::List(values) => LengthDist::List { values },
            RawDist::Table(RawDistTable::Constant { value }) => LengthDist::Constant { value },
            RawDist::Table(RawDistTable::Uniform { min, max }) => LengthDist::Uniform { min, max },
            RawDist::Table(RawDistTable::LongTail {
                base,
                tail_factor,
                tail_fraction,
            }) => LengthDist::LongTail {
                base,
                tail_factor,
                tail_fraction,
            },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    num_requests: Option<u64>,
    prompt_len: Option<RawDist>,
    output_len: Option<RawDist>,
    seed: Option<u64>,
    max_concurrent: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    mode: Option<ModeSelect>,
    b_threshold: Option<u64>,
    window_iters: Option<u64>,
    hysteresis_ratio: Option<f64>,
    min_dwell_iters: Option<u64>,
    routing_overhead: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAblation {
    async_p2p: Option<bool>,
    gemm_fusion: Option<bool>,
    dummy_skip: Option<bool>,
}

macro_rules! need {
    ($opt:expr, $section:literal, $field:literal) => {
        $opt.ok_or(ConfigError::Missing {
            section: $section,
            field: $field,
        })?
    };
}

impl RawModel {
    fn resolve(self, cat: &Catalog) -> Result<ModelSpec, ConfigError> {
        let base = match &self.preset {
            Some(p) => Some(cat.model(p)?),
            None => None,
        };
        let b = base.as_ref();
        let spec = ModelSpec {
            name: self
                .name
                .or_else(|| b.map(|m| m.name.clone()))
                .unwrap_or_else(|| "custom".to_string()),
            num_layers: need!(self.num_layers.or(b.map(|m| m.num_layers)), "model", "num_layers"),
            hidden_size: need!(self.hidden_size.or(b.map(|m| m.hidden_size)), "model", "hidden_size"),
            ffn_intermediate_size: need!(
                self.ffn_intermediate_size.or(b.map(|m| m.ffn_intermediate_size)),
                "model",
                "ffn_intermediate_size"
            ),
            num_heads: need!(self.num_heads.or(b.map(|m| m.num_heads)), "model", "num_heads"),
            num_kv_heads: need!(self.num_kv_heads.or(b.map(|m| m.num_kv_heads)), "model", "num_kv_heads"),
            head_dim: need!(self.head_dim.or(b.map(|m| m.head_dim)), "model", "head_dim"),
            explicit_head_dim: self
                .explicit_head_dim
                .or(b.map(|m| m.explicit_head_dim))
                .unwrap_or(false),
            vocab_size: need!(self.vocab_size.or(b.map(|m| m.vocab_size)), "model", "vocab_size"),
            tied_embeddings: self.tied_embeddings.or(b.map(|m| m.tied_embeddings)).unwrap_or(false),
            dtype_bytes: self.dtype_bytes.or(b.map(|m| m.dtype_bytes)).unwrap_or(2),
            advertised_params_b: self.advertised_params_b.or(b.and_then(|m| m.advertised_params_b)),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl RawHardware {
    fn resolve(self, cat: &Catalog) -> Result<HardwareSpec, ConfigError> {
        let base = match &self.preset {
            Some(p) => Some(cat.hardware(p)?),
            None => None,
        };
        let b = base.as_ref();
        let q = |v: Option<Quantity>, field: &str| -> Result<Option<f64>, ConfigError> {
            v.map(|q| q.value(field)).transpose()
        };
        let hbm = q(self.hbm_bytes, "hardware.hbm_bytes")?.or(b.map(|h| h.hbm_bytes as f64));
        let spec = HardwareSpec {
            name: self
                .name
                .or_else(|| b.map(|h| h.name.clone()))
                .unwrap_or_else(|| "custom".to_string()),
            gpus_per_node: self.gpus_per_node.or(b.map(|h| h.gpus_per_node)).unwrap_or(8),
            hbm_bytes: need!(hbm, "hardware", "hbm_bytes").round() as u64,
            compute_rate: need!(
                self.compute_rate.or(b.map(|h| h.compute_rate)),
                "hardware",
                "compute_rate"
            ),
            hbm_bandwidth: need!(
                q(self.hbm_bandwidth, "hardware.hbm_bandwidth")?.or(b.map(|h| h.hbm_bandwidth)),
                "hardware",
                "hbm_bandwidth"
            ),
            link_bandwidth: need!(
                q(self.link_bandwidth, "hardware.link_bandwidth")?.or(b.map(|h| h.link_bandwidth)),
                "hardware",
                "link_bandwidth"
            ),
            kernel_launch_overhead: self
                .kernel_launch_overhead
                .or(b.map(|h| h.kernel_launch_overhead))
                .unwrap_or(20e-6),
            framework_overhead: self
                .framework_overhead
                .or(b.map(|h| h.framework_overhead))
                .unwrap_or(30e-3),
            tp_sync_overhead: self.tp_sync_overhead.or(b.map(|h| h.tp_sync_overhead)).unwrap_or(10e-6),
            p2p_latency: self.p2p_latency.or(b.map(|h| h.p2p_latency)).unwrap_or(10e-6),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl RawScenario {
    fn resolve(self, cat: &Catalog) -> Result<Scenario, ConfigError> {
        let _ = self.description;
        let model = need!(self.model, "scenario", "model").resolve(cat)?;
        let hardware = need!(self.hardware, "scenario", "hardware").resolve(cat)?;

        let rl = need!(self.layout, "scenario", "layout");
        let dp = rl.dp.unwrap_or(1);
        let weight_mode = rl.weight_mode.unwrap_or(WeightMode::Replicated);
        let mut layout = LayoutStrategy::new(dp, rl.tp.unwrap_or(1), weight_mode);
        layout.pp = rl.pp.unwrap_or(1);
        if let Some(u) = rl.mem_utilization {
            layout.mem_utilization = u;
        }
        if let Some(r) = rl.activation_reserve {
            layout.activation_reserve_bytes = r.value("layout.activation_reserve")?.round() as u64;
        }
        if let Some(c) = rl.cas_slot_count {
            layout.cas_slot_count = c;
        }
        if let Some(c) = rl.was_slot_count {
            layout.was_slot_count = c;
        }
        layout.lookahead = rl
            .lookahead
            .unwrap_or(layout.was_slot_count.min(dp.saturating_sub(1).max(1)));
        if let Some(g) = rl.slot_granularity {
            layout.slot_granularity = g;
        }
        if let Some(p) = rl.peak_shifting {
            layout.peak_shifting = p;
        }
        if let Some(p) = rl.lockstep_iterations {
            layout.lockstep_iterations = p;
        }
        layout.micro_batches = rl.micro_batches.unwrap_or(layout.pp);

        let rw = need!(self.workload, "scenario", "workload");
        let workload = WorkloadSpec {
            num_requests: need!(rw.num_requests, "workload", "num_requests"),
            prompt_len: need!(rw.prompt_len, "workload", "prompt_len").into(),
            output_len: need!(rw.output_len, "workload", "output_len").into(),
            seed: rw.seed.unwrap_or(0),
            max_concurrent: rw.max_concurrent,
        };

        let mut policy = PolicySpec::default();
        if let Some(rp) = self.policy {
            if let Some(m) = rp.mode {
                policy.mode = m;
            }
            policy.b_threshold = rp.b_threshold;
            if let Some(v) = rp.window_iters {
                policy.window_iters = v;
            }
            if let Some(v) = rp.hysteresis_ratio {
                policy.hysteresis_ratio = v;
            }
            if let Some(v) = rp.min_dwell_iters {
                policy.min_dwell_iters = v;
            }
            if let Some(v) = rp.routing_overhead {
                policy.routing_overhead = v;
            }
        }
        let mut ablation = AblationFlags::default();
        if let Some(ra) = self.ablation {
            if let Some(v) = ra.async_p2p {
                ablation.async_p2p = v;
            }
            if let Some(v) = ra.gemm_fusion {
                ablation.gemm_fusion = v;
            }
            if let Some(v) = ra.dummy_skip {
                ablation.dummy_skip = v;
            }
        }
        let sc = Scenario {
            name: self.name.unwrap_or_default(),
            model,
            hardware,
            layout,
            workload,
            policy,
            ablation,
            event_limit: self.event_limit.unwrap_or(DEFAULT_EVENT_LIMIT),
            queue_limit: self.queue_limit.unwrap_or(DEFAULT_QUEUE_LIMIT),
        };
        sc.validate()?;
        Ok(sc)
    }
}

// ---------------------------------------------------------------------------
// Bundled catalog

const MODEL_FILES: [&str; 3] = [
    include_str!("../catalog/models/qwen3-32b.toml"),
    include_str!("../catalog/models/qwen2.5-72b.toml"),
    include_str!("../catalog/models/llama-3.1-70b.toml"),
];

const HARDWARE_FILES: [&str; 3] = [
    include_str!("../catalog/hardware/h20.toml"),
    include_str!("../catalog/hardware/h200.toml"),
    include_str!("../catalog/hardware/b200.toml"),
];

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    model: Option<RawModel>,
    hardware: Option<RawHardware>,
}

/// Named model and hardware presets.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    models: Vec<ModelSpec>,
    hardware: Vec<HardwareSpec>,
}

impl Catalog {
    pub fn builtin() -> Catalog {
        let mut cat = Catalog::default();
        for text in MODEL_FILES.iter().chain(HARDWARE_FILES.iter()) {
            cat.add_document(text).expect("bundled catalog entries are valid");
        }
        cat
    }

    /// Adds every `[model]` / `[hardware]` entry found in a catalog document.
    pub fn add_document(&mut self, text: &str) -> Result<(), ConfigError> {
        let file: CatalogFile = parse_toml(text)?;
        let empty = Catalog::default();
        if let Some(m) = file.model {
            let spec = m.resolve(&empty)?;
            self.models.retain(|x| x.name != spec.name);
            self.models.push(spec);
        }
        if let Some(h) = file.hardware {
            let spec = h.resolve(&empty)?;
            self.hardware.retain(|x| x.name != spec.name);
            self.hardware.push(spec);
        }
        Ok(())
    }

    pub fn model(&self, name: &str) -> Result<ModelSpec, ConfigError> {
        self.models
            .iter()
            .find(|m| m.name.eq_ignore_ascii_case(name))
            .cloned()
            .ok_or_else(|| ConfigError::UnknownReference {
                kind: "model",
                name: name.to_string(),
            })
    }

    pub fn hardware(&self, name: &str) -> Result<HardwareSpec, ConfigError> {
        self.hardware
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case(name))
            .cloned()
            .ok_or_else(|| ConfigError::UnknownReference {
                kind: "hardware",
                name: name.to_string(),
            })
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    pub fn hardware_list(&self) -> &[HardwareSpec] {
        &self.hardware
    }
}
