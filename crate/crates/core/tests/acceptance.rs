//! Acceptance criteria, one test each. Every test writes a single
//! `[PASS]`/`[FAIL]` line to stderr (bypassing output capture) and then
//! asserts, so a failing criterion also fails `cargo test`.

mod common;

use common::*;
use sidp_core::capacity::kv_capacity_for;
use sidp_core::cas_protocol::SidpMode;
use sidp_core::catalog::{derive_model_stats, Catalog, LayoutStrategy, LengthDist, Scenario, WeightMode, WorkloadSpec};
use sidp_core::engine::{probe_iteration, run_job_with, RunOptions};
use sidp_core::report::{IterMode, RunStatus};
use sidp_core::timing::CostModel;
use sidp_core::was_protocol::{build_prefetch_plan, owner_of};
use std::collections::BTreeSet;
use std::io::Write;

fn verdict(id: u32, title: &str, ok: bool, detail: String) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let line = format!("\n[{tag}] criterion {id:>2}: {title} -- {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {id} failed: {detail}");
}

fn tiny_workload() -> WorkloadSpec {
    WorkloadSpec {
        num_requests: 1,
        prompt_len: LengthDist::Constant { value: 1 },
        output_len: LengthDist::Constant { value: 1 },
        seed: 0,
        max_concurrent: None,
    }
}

fn node_tokens(model: &str, hw: &str, dp: u64, tp: u64, mode: WeightMode) -> (u64, bool) {
    let cat = Catalog::builtin();
    let m = cat.model(model).unwrap();
    let h = cat.hardware(hw).unwrap();
    let cap = kv_capacity_for(&derive_model_stats(&m).unwrap(), &h, &LayoutStrategy::new(dp, tp, mode));
    (cap.kv_tokens_per_node, cap.feasible)
}

#[test]
fn criterion_01_capacity_oracle() {
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for m in models() {
        let stats = derive_model_stats(&m).unwrap();
        for hw in hardware() {
            for tp in [1u64, 2, 4] {
                let dp = 8 / tp;
                for mode in [WeightMode::Replicated, WeightMode::Sidp] {
                    let layout = LayoutStrategy::new(dp, tp, mode);
                    let got = kv_capacity_for(&stats, &hw, &layout);
                    let want = oracle_capacity(&m, &hw, &layout);
                    checked += 1;
                    if got.kv_tokens_per_gpu != want.tokens_per_gpu
                        || got.kv_tokens_per_node != want.tokens_per_node
                        || got.feasible != want.feasible
                        || got.weight_bytes_per_gpu != want.weight_bytes
                        || got.cache_slot_bytes_per_gpu != want.slot_bytes
                        || got.kv_budget_bytes_per_gpu != want.budget
                    {
                        mismatches.push(format!("{}/{}/tp{tp}/{}", m.name, hw.name, mode.as_str()));
                    }
                }
            }
        }
    }
    verdict(
        1,
        "capacity matches byte-ledger oracle exactly",
        checked == 54 && mismatches.is_empty(),
        format!("{checked} layouts checked, mismatches: {mismatches:?}"),
    );
}

#[test]
fn criterion_02_fig5_feasibility() {
    let mut ok = true;
    let mut parts = Vec::new();
    for model in ["llama-3.1-70b", "qwen2.5-72b"] {
        let (_, rep_ok) = node_tokens(model, "h20", 8, 1, WeightMode::Replicated);
        let (tok, sidp_ok) = node_tokens(model, "h20", 8, 1, WeightMode::Sidp);
        let within = (0.5e6..=2.0e6).contains(&(tok as f64));
        ok &= !rep_ok && sidp_ok && within;
        parts.push(format!(
            "{model}: replicated feasible={rep_ok}, sidp feasible={sidp_ok} tokens={tok}"
        ));
    }
    verdict(
        2,
        "tp1/dp8 replicated infeasible, sidp ~1M tokens",
        ok,
        parts.join("; "),
    );
}

#[test]
fn criterion_03_fig5_ratio() {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in models() {
        let (rep, _) = node_tokens(&m.name, "h20", 4, 2, WeightMode::Replicated);
        let (sidp, _) = node_tokens(&m.name, "h20", 4, 2, WeightMode::Sidp);
        let r = sidp as f64 / rep as f64;
        ok &= (1.4..=2.0).contains(&r);
        parts.push(format!("{} {r:.3}", m.name));
    }
    // grid maximum over points where the replicated layout fits at all
    let mut max_r: f64 = 0.0;
    let mut argmax = String::new();
    for m in models() {
        for hw in hardware() {
            for tp in [1u64, 2, 4] {
                let (rep, rep_ok) = node_tokens(&m.name, &hw.name, 8 / tp, tp, WeightMode::Replicated);
                let (sidp, _) = node_tokens(&m.name, &hw.name, 8 / tp, tp, WeightMode::Sidp);
                if rep_ok && rep > 0 && sidp as f64 / rep as f64 > max_r {
                    max_r = sidp as f64 / rep as f64;
                    argmax = format!("{}/{}/tp{tp}", m.name, hw.name);
                }
            }
        }
    }
    ok &= (1.5..=2.2).contains(&max_r);
    verdict(
        3,
        "sidp/replicated KV ratio at tp2/dp4 in [1.4,2.0]; grid max in [1.5,2.2]",
        ok,
        format!("tp2/dp4 ratios: {}; grid max {max_r:.3} at {argmax}", parts.join(", ")),
    );
}

#[test]
fn criterion_04_timing_shape() {
    let mut ok = true;
    let mut notes = Vec::new();
    for m in models() {
        for hw in hardware() {
            for tp in [1u64, 2] {
                let layout = LayoutStrategy::new(1, tp, WeightMode::Replicated);
                let cm = CostModel::new(&derive_model_stats(&m).unwrap(), &hw, &layout);
                let be = cm.saturation_batch();
                let t = |b: u64| cm.iter_decode_time(b as f64, 1024.0).total_s;
                let mut prev = 0.0;
                for b in 1..=4096u64 {
                    let tb = t(b);
                    if tb < prev {
                        ok = false;
                        notes.push(format!("{}/{}/tp{tp}: T not monotone at B={b}", m.name, hw.name));
                        break;
                    }
                    prev = tb;
                }
                let mut b = 1;
                while b <= be / 2 {
                    if t(2 * b) >= 2.0 * t(b) {
                        ok = false;
                        notes.push(format!("{}/{}/tp{tp}: T(2B) >= 2T(B) at B={b}", m.name, hw.name));
                    }
                    b *= 2;
                }
                let mut prev_tp = 0.0;
                for b in 1..=be {
                    let thr = b as f64 / t(b);
                    if thr + 1e-9 < prev_tp {
                        ok = false;
                        notes.push(format!("{}/{}/tp{tp}: B/T(B) drops at B={b}", m.name, hw.name));
                        break;
                    }
                    prev_tp = thr;
                }
            }
        }
    }
    let cat = Catalog::builtin();
    let q = derive_model_stats(&cat.model("qwen3-32b").unwrap()).unwrap();
    let be = CostModel::new(
        &q,
        &cat.hardware("h20").unwrap(),
        &LayoutStrategy::new(1, 2, WeightMode::Replicated),
    )
    .saturation_batch();
    ok &= (128..=512).contains(&be);
    notes.push(format!("B_e(qwen3-32b/h20/tp2) = {be}"));
    verdict(
        4,
        "T(B) monotone, sub-linear below B_e, B_e in [128,512]",
        ok,
        notes.join("; "),
    );
}

#[test]
fn criterion_05_peak_shift_permutation() {
    let mut violations = 0u64;
    let mut truncated_collisions = 0u64;
    let mut cases = 0u64;
    for d in 2..=8usize {
        for l in d..=128usize {
            cases += 1;
            let plans: Vec<Vec<usize>> = (0..d).map(|r| build_prefetch_plan(r, l, d, d - 1).layers).collect();
            // completeness: every non-owned layer exactly once, no owned layer
            for (r, p) in plans.iter().enumerate() {
                let mut want: Vec<usize> = (0..l).filter(|&x| owner_of(x, d) != r).collect();
                let mut got = p.clone();
                got.sort();
                want.sort();
                if got != want {
                    violations += 1;
                }
            }
            // step-wise distinctness inside each cycle
            for c in (0..l).step_by(d) {
                let full = c + d <= l;
                let per_rank: Vec<Vec<usize>> = plans
                    .iter()
                    .map(|p| p.iter().copied().filter(|&x| x >= c && x < c + d).collect())
                    .collect();
                let steps = per_rank.iter().map(Vec::len).max().unwrap_or(0);
                for k in 0..steps {
                    let fetched: Vec<usize> = per_rank.iter().filter_map(|v| v.get(k).copied()).collect();
                    let distinct: BTreeSet<usize> = fetched.iter().copied().collect();
                    if distinct.len() != fetched.len() {
                        if full {
                            violations += 1;
                        } else {
                            truncated_collisions += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(
        5,
        "peak-shift steps pairwise distinct, plans complete",
        violations == 0,
        format!(
            "{cases} (d, L) cases, {violations} violations on full cycles; \
             {truncated_collisions} collisions inside truncated final cycles (fewer layers than ranks, unavoidable)"
        ),
    );
}

#[test]
fn criterion_06_slot_state_machine() {
    let mut illegal = 0;
    let mut over = 0;
    let mut transitions = 0;
    let mut audited = 0;
    for (name, (sc, r)) in suite_reports() {
        if sc.layout.weight_mode != WeightMode::Sidp {
            continue;
        }
        audited += 1;
        illegal += r.slot_audit.illegal_transitions;
        over += r.slot_audit.over_capacity;
        transitions += r.slot_audit.transitions;
        assert!(r.slot_audit.max_occupied <= sc.layout.was_slot_count as usize, "{name}");
    }
    verdict(
        6,
        "slot trace validator: no illegal transitions, never above slot count",
        illegal == 0 && over == 0 && audited > 0,
        format!("{audited} sidp scenarios, {transitions} transitions, {illegal} illegal, {over} over capacity"),
    );
}

fn fig6_scenarios() -> (Scenario, Scenario) {
    let rep = Scenario::from_presets(
        "llama-3.1-70b",
        "h20",
        LayoutStrategy::new(1, 2, WeightMode::Replicated),
        tiny_workload(),
    )
    .unwrap();
    let sidp = Scenario::from_presets(
        "llama-3.1-70b",
        "h20",
        LayoutStrategy::new(2, 2, WeightMode::Sidp),
        tiny_workload(),
    )
    .unwrap();
    (rep, sidp)
}

#[test]
fn criterion_07_overlap() {
    let (rep, sidp) = fig6_scenarios();
    let mut ok = true;
    let mut parts = Vec::new();
    for b in [256u64, 512] {
        let r = probe_iteration(&rep, None, b, 1024, 8);
        let w = probe_iteration(&sidp, Some(SidpMode::Was), b, 1024, 8);
        let ratio = w.mean_iter_s / r.mean_iter_s;
        ok &= w.stall_per_iter_s <= 1e-12 && ratio <= 1.05;
        parts.push(format!(
            "B={b}: stall {:.2e} s, WaS/replicated {ratio:.4}",
            w.stall_per_iter_s
        ));
    }
    let w1 = probe_iteration(&sidp, Some(SidpMode::Was), 1, 1024, 8);
    ok &= w1.stall_per_iter_s > 0.0;
    parts.push(format!("B=1 stall {:.4} s", w1.stall_per_iter_s));
    verdict(7, "WaS hides prefetch at B>=256, stalls at B=1", ok, parts.join("; "));
}

#[test]
fn criterion_08_peak_shifting_throughput() {
    let mut ok = true;
    let mut parts = Vec::new();
    for (dp, need) in [(4u64, 2.0), (8, 2.5)] {
        let on = report(&format!("fig7_qwen3_h20_dp{dp}_shift_on.toml"));
        let off = report(&format!("fig7_qwen3_h20_dp{dp}_shift_off.toml"));
        let ratio = on.throughput_tok_s / off.throughput_tok_s;
        let peak_on = on.peak_readers_per_owner.iter().copied().max().unwrap_or(0);
        let peak_off = off.peak_readers_per_owner.iter().copied().max().unwrap_or(0);
        ok &= ratio >= need && peak_off == dp as usize - 1 && peak_on <= 2;
        parts.push(format!(
            "dp={dp}: on/off {ratio:.2} (need >= {need}), peak readers off {peak_off} on {peak_on}"
        ));
    }
    verdict(8, "peak shifting throughput gain and reader drop", ok, parts.join("; "));
}

#[test]
fn criterion_09_mode_crossover() {
    let (_, sidp) = fig6_scenarios();
    let mut ok = true;
    let mut parts = Vec::new();
    for b in [1u64, 2, 4, 8] {
        let w = probe_iteration(&sidp, Some(SidpMode::Was), b, 1024, 8).mean_iter_s;
        let c = probe_iteration(&sidp, Some(SidpMode::Cas), b, 1024, 8).mean_iter_s;
        ok &= c < w;
        parts.push(format!("B={b} cas {c:.4} was {w:.4}"));
    }
    for b in [128u64, 256, 512] {
        let w = probe_iteration(&sidp, Some(SidpMode::Was), b, 1024, 8).mean_iter_s;
        let c = probe_iteration(&sidp, Some(SidpMode::Cas), b, 1024, 8).mean_iter_s;
        ok &= w <= c;
        parts.push(format!("B={b} was {w:.4} cas {c:.4}"));
    }
    let w = probe_iteration(&sidp, Some(SidpMode::Was), 1, 1024, 8).mean_iter_s;
    let c = probe_iteration(&sidp, Some(SidpMode::Cas), 1, 1024, 8).mean_iter_s;
    let a = probe_iteration(&sidp, None, 1, 1024, 8).mean_iter_s;
    let best = w.min(c);
    let slack = 0.01 * best + sidp.policy.routing_overhead * sidp.stats().num_layers as f64;
    ok &= (a - best).abs() <= slack;
    parts.push(format!("auto B=1 {a:.4} vs min {best:.4}"));
    verdict(
        9,
        "CaS wins B<=8, WaS wins B>=128, auto tracks the minimum",
        ok,
        parts.join("; "),
    );
}

#[test]
fn criterion_10_ablation_ladder() {
    let names = [
        "fig11_fsdp.toml",
        "fig11_cas_v1.toml",
        "fig11_cas_v2.toml",
        "fig11_cas_v3.toml",
    ];
    let spans: Vec<f64> = names.iter().map(|n| report(n).makespan_s).collect();
    let strictly = spans.windows(2).all(|w| w[0] > w[1]);
    let gain = spans[0] / spans[3];
    verdict(
        10,
        "FSDP > V1 > V2 > V3 on the B=1 tail, FSDP/V3 >= 2",
        strictly && gain >= 2.0 && names.iter().all(|n| report(n).status == RunStatus::Ok),
        format!(
            "makespans fsdp {:.2} s, v1 {:.2} s, v2 {:.2} s, v3 {:.2} s; fsdp/v3 {gain:.2}",
            spans[0], spans[1], spans[2], spans[3]
        ),
    );
}

#[test]
fn criterion_11_end_to_end() {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in ["qwen3-32b", "qwen2.5-72b", "llama-3.1-70b"] {
        // DP+TP baseline: replicated layouts with dp >= 2
        let base = ["tp1dp8", "tp2dp4", "tp4dp2"]
            .iter()
            .map(|l| report(&format!("e2e_s4k_{m}_replicated_{l}.toml")))
            .filter(|r| r.status == RunStatus::Ok)
            .map(|r| r.throughput_tok_s)
            .fold(0.0, f64::max);
        let tp_only = report(&format!("e2e_s4k_{m}_replicated_tp8dp1.toml")).throughput_tok_s;
        let sidp_best = ["tp1dp8", "tp2dp4", "tp4dp2"]
            .iter()
            .map(|l| report(&format!("e2e_s4k_{m}_sidp_{l}_auto.toml")).throughput_tok_s)
            .fold(0.0, f64::max);
        let auto = report(&format!("e2e_s4k_{m}_sidp_tp1dp8_auto.toml"));
        let was = report(&format!("e2e_s4k_{m}_sidp_tp1dp8_was.toml"));
        let was_best = ["tp1dp8", "tp2dp4", "tp4dp2"]
            .iter()
            .map(|l| report(&format!("e2e_s4k_{m}_sidp_{l}_was.toml")).throughput_tok_s)
            .fold(0.0, f64::max);
        let gain = sidp_best / base;
        let switch_helps = auto.makespan_s < was.makespan_s;
        let was_gain = was_best / base;
        ok &= gain >= 1.2 && switch_helps && was_gain >= 1.05;
        parts.push(format!(
            "{m}: sidp/dp+tp {gain:.2}, was-only/dp+tp {was_gain:.2}, auto {:.0} s vs was-only {:.0} s (pure tp {:.0} tok/s)",
            auto.makespan_s, was.makespan_s, tp_only
        ));
    }
    verdict(
        11,
        "S=4K: sidp >= 1.2x best DP+TP, switching beats WaS-only, WaS-only >= 1.05x",
        ok,
        parts.join("; "),
    );
}

#[test]
fn criterion_12_tail_histogram() {
    let r = report("fig12_llama70b_h20_dp8_s4k.toml");
    let live: Vec<_> = r.iterations.iter().filter(|i| !i.dummy).collect();
    let was_share = live.iter().filter(|i| i.mode == IterMode::Was).count() as f64 / live.len().max(1) as f64;
    let was_to_cas = r
        .mode_timeline
        .windows(2)
        .filter(|w| w[0].mode == IterMode::Was && w[1].mode == IterMode::Cas)
        .count();
    let others = r.switch_count as usize - was_to_cas;
    verdict(
        12,
        "S=4K dp=8 job: >= 80% WaS iterations, exactly one WaS->CaS switch",
        was_share >= 0.8 && was_to_cas == 1 && others == 0,
        format!(
            "WaS share {:.3}, WaS->CaS switches {was_to_cas}, other switches {others}, B_th {:?}",
            was_share, r.b_threshold
        ),
    );
}

#[test]
fn criterion_13_determinism_and_conservation() {
    let opts = RunOptions {
        audit_slots: true,
        ..RunOptions::default()
    };
    let mut differing = Vec::new();
    let mut leaks = Vec::new();
    let mut token_gaps = Vec::new();
    let mut worst_err: f64 = 0.0;
    for (name, (sc, first)) in suite_reports() {
        let second = run_job_with(sc, &opts).report;
        if first.to_json() != second.to_json() {
            differing.push(name.clone());
        }
        if first.flow_bytes_injected != first.flow_bytes_delivered {
            leaks.push(name.clone());
        }
        worst_err = worst_err.max(first.flow_conservation_max_rel_err);
        if first.status == RunStatus::Ok && first.total_tokens != first.expected_tokens {
            token_gaps.push(format!("{name}: {} of {}", first.total_tokens, first.expected_tokens));
        }
        if first.status == RunStatus::Ok {
            let requested: u64 = sc.workload.generate().iter().map(|r| r.output_len).sum();
            if first.requests_failed == 0 && first.total_tokens != requested {
                token_gaps.push(format!("{name}: {} of {requested} requested", first.total_tokens));
            }
        }
    }
    let n = suite_reports().len();
    verdict(
        13,
        "identical reports per seed, byte ledger balanced, all output tokens generated",
        differing.is_empty() && leaks.is_empty() && token_gaps.is_empty() && worst_err <= 1e-6,
        // Exact conservation is the integer ledger; the float figure only
        // bounds round-off in the fluid integrator.
        format!(
            "{n} scenarios; differing {differing:?}; unbalanced {leaks:?}; token gaps {token_gaps:?}; \
             worst per-flow integration error {worst_err:.1e}"
        ),
    );
}
