#![allow(dead_code)]

use sidp_core::catalog::{Catalog, HardwareSpec, LayoutStrategy, ModelSpec, Scenario, WeightMode};
use sidp_core::engine::{run_job_with, RunOptions};
use sidp_core::report::JobReport;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn scenario_paths() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(scenario_dir())
        .expect("scenarios directory exists")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    v.sort();
    v
}

pub fn load(file: &str) -> Scenario {
    Scenario::from_file(scenario_dir().join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

/// First run of every bundled scenario (slot audit on), keyed by file name.
pub fn suite_reports() -> &'static BTreeMap<String, (Scenario, JobReport)> {
    static CELL: OnceLock<BTreeMap<String, (Scenario, JobReport)>> = OnceLock::new();
    CELL.get_or_init(|| {
        let opts = RunOptions {
            audit_slots: true,
            ..RunOptions::default()
        };
        scenario_paths()
            .into_iter()
            .map(|p| {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                let sc = Scenario::from_file(&p).unwrap_or_else(|e| panic!("{name}: {e}"));
                let report = run_job_with(&sc, &opts).report;
                (name, (sc, report))
            })
            .collect()
    })
}

pub fn report(file: &str) -> &'static JobReport {
    &suite_reports()
        .get(file)
        .unwrap_or_else(|| panic!("no bundled scenario {file}"))
        .1
}

pub fn models() -> Vec<ModelSpec> {
    Catalog::builtin().models().to_vec()
}

pub fn hardware() -> Vec<HardwareSpec> {
    Catalog::builtin().hardware_list().to_vec()
}

// ---------------------------------------------------------------------------
// Byte-ledger oracle for KV capacity.
//
// Written from the raw model description: every weight tensor is listed by
// shape, summed in bytes, split across GPUs, and the token count is found by
// searching for the largest n whose KV bytes still fit.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleCapacity {
    pub weight_bytes: u64,
    pub slot_bytes: u64,
    pub budget: u64,
    pub tokens_per_gpu: u64,
    pub tokens_per_node: u64,
    pub feasible: bool,
}

struct Tensor {
    rows: u64,
    cols: u64,
    ffn: bool,
}

fn tensors(m: &ModelSpec) -> Vec<Tensor> {
    let h = m.hidden_size;
    let q = m.num_heads * m.head_dim;
    let kv = m.num_kv_heads * m.head_dim;
    let i = m.ffn_intermediate_size;
    let mut out = Vec::new();
    for _ in 0..m.num_layers {
        out.push(Tensor {
            rows: h,
            cols: q,
            ffn: false,
        }); // wq
        out.push(Tensor {
            rows: h,
            cols: kv,
            ffn: false,
        }); // wk
        out.push(Tensor {
            rows: h,
            cols: kv,
            ffn: false,
        }); // wv
        out.push(Tensor {
            rows: q,
            cols: h,
            ffn: false,
        }); // wo
        out.push(Tensor {
            rows: h,
            cols: i,
            ffn: true,
        }); // gate
        out.push(Tensor {
            rows: h,
            cols: i,
            ffn: true,
        }); // up
        out.push(Tensor {
            rows: i,
            cols: h,
            ffn: true,
        }); // down
    }
    out.push(Tensor {
        rows: m.vocab_size,
        cols: h,
        ffn: false,
    });
    if !m.tied_embeddings {
        out.push(Tensor {
            rows: m.vocab_size,
            cols: h,
            ffn: false,
        });
    }
    out
}

fn ceil_div(a: u64, b: u64) -> u64 {
    let mut q = a / b;
    if q * b < a {
        q += 1;
    }
    q
}

pub fn oracle_capacity(m: &ModelSpec, hw: &HardwareSpec, layout: &LayoutStrategy) -> OracleCapacity {
    let dt = m.dtype_bytes;
    let mut ffn_bytes = 0u64;
    let mut other_bytes = 0u64;
    for t in tensors(m) {
        let b = t.rows * t.cols * dt;
        if t.ffn {
            ffn_bytes += b;
        } else {
            other_bytes += b;
        }
    }
    let split = layout.tp * layout.pp;
    let ffn_layer = ffn_bytes / m.num_layers;
    let ffn_layer_gpu = ceil_div(ffn_layer, layout.tp);
    let (weight_bytes, slot_bytes) = match layout.weight_mode {
        WeightMode::Replicated | WeightMode::TpShard => (ceil_div(ffn_bytes + other_bytes, split), 0),
        WeightMode::Sidp => {
            let share = ceil_div(ffn_bytes, layout.dp);
            let one_slot = (ffn_layer_gpu as f64 * layout.slot_granularity).ceil() as u64;
            (ceil_div(other_bytes + share, split), layout.was_slot_count * one_slot)
        }
        WeightMode::Fsdp => {
            let share = ceil_div(ffn_bytes, layout.dp);
            (ceil_div(other_bytes + share, split), 2 * ffn_layer_gpu)
        }
    };
    let usable = (hw.hbm_bytes as f64 * layout.mem_utilization).floor() as u64;
    let committed = weight_bytes + slot_bytes + layout.activation_reserve_bytes;
    let budget = usable.saturating_sub(committed);
    // K and V, per layer, per token
    let kv_token: u64 = (0..m.num_layers).map(|_| 2 * m.num_kv_heads * m.head_dim * dt).sum();
    let kv_token_gpu = ceil_div(kv_token, split);
    // largest n with n * kv_token_gpu <= budget: gallop, then bisect
    let fits = |n: u64| n.checked_mul(kv_token_gpu).is_some_and(|b| b <= budget);
    let mut hi = 1u64;
    while fits(hi) {
        hi *= 2;
    }
    let mut lo = 0u64;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    OracleCapacity {
        weight_bytes,
        slot_bytes,
        budget,
        tokens_per_gpu: lo,
        tokens_per_node: lo * layout.dp,
        feasible: budget > 0,
    }
}
