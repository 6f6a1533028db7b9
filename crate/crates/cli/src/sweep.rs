//! Sweep axes: each value rewrites one aspect of a base scenario.

use anyhow::{anyhow, bail, Result};
use sidp_core::catalog::{LengthDist, ModeSelect, Scenario, WeightMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    /// Per-engine cap on concurrently admitted requests.
    BatchCap,
    /// Number of data-parallel replicas.
    Dp,
    /// Tensor-parallel degree.
    Tp,
    /// Total sequence length; split evenly into prompt and output.
    SeqLen,
    /// replicated, tpshard, fsdp or sidp.
    WeightMode,
    /// fsdp, v1, v2, v3.
    AblationLadder,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::BatchCap => "batch_cap",
            Axis::Dp => "dp",
            Axis::Tp => "tp",
            Axis::SeqLen => "seq_len",
            Axis::WeightMode => "weight_mode",
            Axis::AblationLadder => "ablation_ladder",
        }
    }

    pub fn default_values(self) -> Option<Vec<String>> {
        match self {
            Axis::AblationLadder => Some(["fsdp", "v1", "v2", "v3"].map(String::from).to_vec()),
            Axis::WeightMode => Some(["replicated", "sidp"].map(String::from).to_vec()),
            _ => None,
        }
    }
}

fn number(value: &str) -> Result<u64> {
    value
        .trim()
        .parse::<u64>()
        .map_err(|_| anyhow!("expected a positive integer, got `{value}`"))
        .and_then(|v| if v == 0 { bail!("value must be >= 1") } else { Ok(v) })
}

/// Returns a copy of `base` with `axis` set to `value`, validated.
pub fn apply(base: &Scenario, axis: Axis, value: &str) -> Result<Scenario> {
    let mut sc = base.clone();
    match axis {
        Axis::BatchCap => sc.workload.max_concurrent = Some(number(value)?),
        Axis::Dp => {
            let dp = number(value)?;
            let old = sc.layout.dp.saturating_sub(1).max(1);
            let new = dp.saturating_sub(1).max(1);
            // Slot count and lookahead follow dp unless the base pinned them.
            if sc.layout.was_slot_count == old {
                sc.layout.was_slot_count = new;
            }
            if sc.layout.lookahead == old {
                sc.layout.lookahead = new;
            }
            sc.layout.dp = dp;
        }
        Axis::Tp => sc.layout.tp = number(value)?,
        Axis::SeqLen => {
            let s = number(value)?;
            if s < 2 {
                bail!("seq_len must be >= 2");
            }
            sc.workload.prompt_len = LengthDist::Constant { value: s / 2 };
            sc.workload.output_len = LengthDist::Constant { value: s - s / 2 };
        }
        Axis::WeightMode => {
            sc.layout.weight_mode = value.parse::<WeightMode>().map_err(|e| anyhow!(e))?;
        }
        Axis::AblationLadder => match value.trim().to_ascii_lowercase().as_str() {
            "fsdp" => sc.layout.weight_mode = WeightMode::Fsdp,
            rung @ ("v1" | "v2" | "v3") => {
                sc.layout.weight_mode = WeightMode::Sidp;
                sc.policy.mode = ModeSelect::Cas;
                sc.ablation.async_p2p = true;
                sc.ablation.gemm_fusion = rung != "v1";
                sc.ablation.dummy_skip = rung == "v3";
            }
            other => bail!("unknown ablation rung `{other}` (fsdp, v1, v2, v3)"),
        },
    }
    sc.name = format!("{}[{}={}]", base.name, axis.name(), value.trim());
    sc.validate()?;
    Ok(sc)
}
