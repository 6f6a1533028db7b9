//! Continuous-batching engines and the simulated job.
//!
//! Each DP replica is one engine (its TP group acts as a single executor).
//! An iteration pays the framework overhead, then walks the layers; every
//! layer is an attention phase followed by an FFN phase. Replicated layouts
//! collapse the whole iteration into a single event.

use crate::capacity::{kv_capacity, MemoryBreakdown};
use crate::cas_protocol::{decide_mode, owner_compute_time, ModePolicy, ModeSchedule, SidpMode};
use crate::catalog::{ModeSelect, RequestShape, Scenario, WeightMode, WorkloadSpec};
use crate::report::{IterMode, IterRecord, JobReport, ModeSpan, RunStatus, FORMAT_VERSION};
use crate::simcore::{run_until_idle, EventQueue, Fabric, FlowId, FlowTimer, GpuResource, SimError, World};
use crate::timing::{CostModel, LayerWork};
use crate::was_protocol::{owner_of, Acquire, SlotAuditor, SlotTransition, WasRank};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RequestState {
    Waiting,
    Prefilling,
    Decoding,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Request {
    pub id: u64,
    pub prompt_len: u64,
    pub output_len: u64,
    pub generated: u64,
    pub state: RequestState,
}

impl Request {
    pub fn new(shape: RequestShape) -> Self {
        Request {
            id: shape.id,
            prompt_len: shape.prompt_len,
            output_len: shape.output_len,
            generated: 0,
            state: RequestState::Waiting,
        }
    }

    /// KV tokens reserved for the whole life of the request.
    pub fn reservation(&self) -> u64 {
        self.prompt_len + self.output_len
    }

    pub fn context(&self) -> u64 {
        self.prompt_len + self.generated
    }
}

/// Round-robin assignment by request index.
pub fn shard_workload(requests: &[RequestShape], engines: usize) -> Vec<VecDeque<Request>> {
    assert!(engines >= 1);
    let mut out = vec![VecDeque::new(); engines];
    for (i, r) in requests.iter().enumerate() {
        out[i % engines].push_back(Request::new(*r));
    }
    out
}

/// Convenience: generate and shard a workload.
pub fn shard_spec(workload: &WorkloadSpec, engines: usize) -> Vec<VecDeque<Request>> {
    shard_workload(&workload.generate(), engines)
}

#[derive(Debug, Clone, Serialize)]
pub struct EngineState {
    pub rank: usize,
    /// GPU indices of this replica's TP group.
    pub gpus: Vec<u64>,
    pub waiting: VecDeque<Request>,
    pub active: Vec<Request>,
    pub failed: Vec<Request>,
    pub kv_used_tokens: u64,
    pub kv_capacity_tokens: u64,
    pub max_concurrent: Option<u64>,
    pub iteration: u64,
    pub is_dummy_this_iter: bool,
}

impl EngineState {
    pub fn new(
        rank: usize,
        tp: u64,
        queue: VecDeque<Request>,
        kv_capacity_tokens: u64,
        max_concurrent: Option<u64>,
    ) -> Self {
        EngineState {
            rank,
            gpus: (rank as u64 * tp..(rank as u64 + 1) * tp).collect(),
            waiting: queue,
            active: Vec::new(),
            failed: Vec::new(),
            kv_used_tokens: 0,
            kv_capacity_tokens,
            max_concurrent,
            iteration: 0,
            is_dummy_this_iter: false,
        }
    }

    pub fn has_work(&self) -> bool {
        !self.waiting.is_empty() || !self.active.is_empty()
    }

    /// Live batch: sequences currently holding KV in this engine.
    pub fn live_batch(&self) -> u64 {
        self.active.len() as u64
    }
}

/// What [`admit`] did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Admission {
    /// Indices into `engine.active` of the newly admitted requests.
    pub admitted: Vec<usize>,
    /// Ids of requests rejected because they can never fit.
    pub failed: Vec<u64>,
}

/// FCFS admission with full prompt + output reservation.
pub fn admit(engine: &mut EngineState) -> Admission {
    let mut out = Admission::default();
    while let Some(front) = engine.waiting.front() {
        let need = front.reservation();
        if need > engine.kv_capacity_tokens {
            let mut r = engine.waiting.pop_front().unwrap();
            r.state = RequestState::Failed;
            out.failed.push(r.id);
            engine.failed.push(r);
            continue;
        }
        let cap_ok = engine.max_concurrent.is_none_or(|m| (engine.active.len() as u64) < m);
        if !cap_ok || engine.kv_used_tokens + need > engine.kv_capacity_tokens {
            break;
        }
        let mut r = engine.waiting.pop_front().unwrap();
        r.state = RequestState::Prefilling;
        engine.kv_used_tokens += need;
        out.admitted.push(engine.active.len());
        engine.active.push(r);
    }
    out
}

// ---------------------------------------------------------------------------
// Run options

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Collect a line-per-event trace.
    pub trace: bool,
    /// Return every slot transition in [`JobOutput::slot_log`].
    pub keep_slot_log: bool,
    /// Replay slot transitions through the independent validator while the
    /// run progresses; results land in `JobReport::slot_audit`.
    pub audit_slots: bool,
    /// Ignore KV capacity (used by fixed-batch timing probes).
    pub unlimited_kv: bool,
    /// Force the starting SiDP mode instead of the policy default.
    pub initial_mode: Option<SidpMode>,
    /// Disable link sharing: every flow runs at full link speed.
    pub uncontended_links: bool,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct JobOutput {
    pub report: JobReport,
    /// JSON lines, present when tracing was requested.
    pub trace: Option<Vec<String>>,
    pub slot_log: Vec<SlotTransition>,
}

pub fn run_job(scenario: &Scenario) -> JobReport {
    run_job_with(scenario, &RunOptions::default()).report
}

pub fn run_job_with(scenario: &Scenario, opts: &RunOptions) -> JobOutput {
    let capacity = kv_capacity(scenario);
    let seed = scenario.workload.seed;
    if !capacity.feasible && !opts.unlimited_kv {
        let mut report = JobReport::empty(&scenario.name, seed, RunStatus::Infeasible, capacity);
        fill_layout(&mut report, scenario);
        report.message = Some("model weights and reserves exceed usable memory; no KV budget".into());
        return JobOutput {
            report,
            trace: None,
            slot_log: Vec::new(),
        };
    }
    let mut world = SimWorld::new(scenario, capacity, opts);
    let mut queue = EventQueue::new(scenario.queue_limit);
    for e in 0..world.engines.len() {
        queue.schedule(0.0, Ev::IterStart(e));
    }
    let result = run_until_idle(&mut world, &mut queue, scenario.event_limit);
    world.finish(result)
}

fn fill_layout(report: &mut JobReport, sc: &Scenario) {
    report.weight_mode = sc.layout.weight_mode.as_str().to_string();
    report.dp = sc.layout.dp;
    report.tp = sc.layout.tp;
    report.pp = sc.layout.pp;
}

/// Mean decode-iteration time for a fixed batch per engine.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub batch: u64,
    pub mean_iter_s: f64,
    pub stall_per_iter_s: f64,
    pub peak_readers: usize,
    pub mode: String,
}

/// Runs `batch` sequences per engine with prompt `ctx` through `iters`
/// decode steps, ignoring KV limits, and reports the decode iteration time.
/// `mode` forces WaS or CaS for SiDP layouts; `None` lets `auto` pick by
/// comparing `batch` with the switch threshold.
pub fn probe_iteration(scenario: &Scenario, mode: Option<SidpMode>, batch: u64, ctx: u64, iters: u64) -> ProbeResult {
    let mut sc = scenario.clone();
    let dp = sc.layout.dp;
    sc.workload = WorkloadSpec {
        num_requests: batch * dp,
        prompt_len: crate::catalog::LengthDist::Constant { value: ctx },
        output_len: crate::catalog::LengthDist::Constant { value: iters },
        seed: scenario.workload.seed,
        max_concurrent: Some(batch),
    };
    let mut opts = RunOptions {
        unlimited_kv: true,
        ..RunOptions::default()
    };
    let mut label = "local".to_string();
    if sc.layout.weight_mode == WeightMode::Sidp {
        let chosen = mode.unwrap_or_else(|| {
            let th = sidp_threshold(&sc);
            if batch < th {
                SidpMode::Cas
            } else {
                SidpMode::Was
            }
        });
        sc.policy.mode = match chosen {
            SidpMode::Was => ModeSelect::Was,
            SidpMode::Cas => ModeSelect::Cas,
        };
        opts.initial_mode = Some(chosen);
        label = format!("{chosen:?}").to_lowercase();
    } else if sc.layout.weight_mode == WeightMode::Fsdp {
        label = "fsdp".into();
    }
    let report = run_job_with(&sc, &opts).report;
    let decode: Vec<&IterRecord> = report
        .iterations
        .iter()
        .filter(|r| !r.dummy && r.prefill_tokens == 0 && r.decode_rows > 0)
        .collect();
    let n = decode.len().max(1) as f64;
    ProbeResult {
        batch,
        mean_iter_s: decode.iter().map(|r| r.duration()).sum::<f64>() / n,
        stall_per_iter_s: decode.iter().map(|r| r.stall_s).sum::<f64>() / n,
        peak_readers: report.peak_readers_per_owner.iter().copied().max().unwrap_or(0),
        mode: label,
    }
}

/// Switch threshold in effect for a SiDP scenario.
pub fn sidp_threshold(sc: &Scenario) -> u64 {
    if let Some(b) = sc.policy.b_threshold {
        return b;
    }
    let cm = CostModel::new(&sc.stats(), &sc.hardware, &sc.layout);
    cm.switch_threshold(sc.layout.dp.max(2))
}

// ---------------------------------------------------------------------------
// Simulation world

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    IterStart(usize),
    /// Local mode: whole iteration done.
    IterEnd(usize),
    AttnDone(usize),
    FfnDone(usize),
    Flow {
        flow: FlowId,
        version: u32,
    },
    /// Message latency elapsed; put its bytes on the wire.
    MsgWire(usize),
    /// CaS owner finished the FFN of (iteration, layer).
    ServeDone(u64, usize),
}

#[derive(Debug, Clone, Copy)]
enum Purpose {
    Prefetch { engine: usize, slot: usize },
    Msg(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MsgKind {
    Chunk,
    Output,
}

#[derive(Debug, Clone)]
struct Msg {
    kind: MsgKind,
    from: usize,
    to: usize,
    iter: u64,
    layer: usize,
    rows: f64,
}

/// Serializes messages on one side when async P2P is off.
#[derive(Debug, Clone, Default)]
struct Channel {
    busy: bool,
    queue: VecDeque<usize>,
}

#[derive(Debug, Clone, Default)]
struct CasPoint {
    /// (source engine, rows, arrival time)
    chunks: Vec<(usize, f64, f64)>,
    owner_ready: Option<f64>,
    owner_rows: f64,
    served: bool,
}

#[derive(Debug, Clone, Default)]
struct Barrier {
    arrivals: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
struct IterWork {
    mode: IterMode,
    start: f64,
    dummy: bool,
    decode_rows: u64,
    prefill_tokens: u64,
    /// Rows shipped in CaS (decode + prefill tokens, 1 for a dummy).
    rows: f64,
    work: LayerWork,
    layer: usize,
    stall: f64,
    /// Slot the FFN is waiting on (WaS).
    waiting_slot: Option<(usize, f64)>,
    ideal_s: f64,
}

struct Eng {
    state: EngineState,
    cur: Option<IterWork>,
    was: Option<WasRank>,
    /// Engine finished its shard and no longer iterates (dummy skip or local).
    stopped_from: Option<u64>,
    window: VecDeque<u64>,
    stall_total: f64,
    /// Finished its last iteration at this time and waits for the group.
    parked_at: Option<f64>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    t: f64,
    kind: &'a str,
    rank: usize,
    detail: String,
}

struct SimWorld<'a> {
    sc: &'a Scenario,
    cm: CostModel,
    capacity: MemoryBreakdown,
    d: usize,
    layers: usize,
    engines: Vec<Eng>,
    gpus: Vec<GpuResource>,
    fabric: Fabric,
    purposes: Vec<Purpose>,
    msgs: Vec<Msg>,
    in_channels: Vec<Channel>,
    out_channels: Vec<Channel>,
    cas_points: HashMap<(u64, usize), CasPoint>,
    barriers: HashMap<(u64, usize), Barrier>,
    schedule: ModeSchedule,
    policy: Option<ModePolicy>,
    last_boundary: u64,
    prefetch_active: Vec<usize>,
    prefetch_peak: Vec<usize>,
    records: Vec<IterRecord>,
    tokens: u64,
    tokens_by_mode: BTreeMap<String, u64>,
    remaining: usize,
    finished: bool,
    makespan: f64,
    events: u64,
    ideal_sum: f64,
    actual_sum: f64,
    peak_kv: u64,
    kv_violations: u64,
    expected_tokens: u64,
    requests_total: u64,
    trace: Option<Vec<String>>,
    b_threshold: Option<u64>,
    lockstep: bool,
    auditor: Option<SlotAuditor>,
    kept_log: Option<Vec<SlotTransition>>,
}

impl<'a> SimWorld<'a> {
    fn new(sc: &'a Scenario, capacity: MemoryBreakdown, opts: &RunOptions) -> Self {
        let stats = sc.stats();
        let cm = CostModel::new(&stats, &sc.hardware, &sc.layout);
        let d = sc.layout.dp as usize;
        let layers = stats.num_layers as usize;
        let requests = sc.workload.generate();
        let shards = shard_workload(&requests, d);
        let kv_cap = if opts.unlimited_kv {
            u64::MAX / 4
        } else {
            capacity.kv_tokens_per_gpu
        };
        let sidp = sc.layout.weight_mode == WeightMode::Sidp;
        let engines: Vec<Eng> = shards
            .into_iter()
            .enumerate()
            .map(|(rank, q)| Eng {
                state: EngineState::new(rank, sc.layout.tp, q, kv_cap, sc.workload.max_concurrent),
                cur: None,
                was: sidp.then(|| {
                    WasRank::new(
                        rank,
                        layers,
                        d,
                        sc.layout.was_slot_count as usize,
                        sc.layout.lookahead as usize,
                        sc.layout.peak_shifting,
                        opts.keep_slot_log || opts.audit_slots,
                    )
                }),
                stopped_from: None,
                window: VecDeque::new(),
                stall_total: 0.0,
                parked_at: None,
            })
            .collect();
        let initial = opts.initial_mode.unwrap_or(match sc.policy.mode {
            ModeSelect::Cas => SidpMode::Cas,
            _ => SidpMode::Was,
        });
        let (policy, b_threshold) = if sidp {
            let th = sidp_threshold(sc);
            let p = (sc.policy.mode == ModeSelect::Auto && opts.initial_mode.is_none())
                .then(|| ModePolicy::from_spec(&sc.policy, th));
            (p, Some(th))
        } else {
            (None, None)
        };
        let mut fabric = Fabric::new(d, sc.hardware.link_bandwidth);
        fabric.set_contended(!opts.uncontended_links);
        let expected_tokens = requests
            .iter()
            .filter(|r| opts.unlimited_kv || r.prompt_len + r.output_len <= kv_cap)
            .map(|r| r.output_len)
            .sum();
        SimWorld {
            sc,
            cm,
            capacity,
            d,
            layers,
            gpus: (0..d).map(GpuResource::new).collect(),
            engines,
            fabric,
            purposes: Vec::new(),
            msgs: Vec::new(),
            in_channels: vec![Channel::default(); d],
            out_channels: vec![Channel::default(); d],
            cas_points: HashMap::new(),
            barriers: HashMap::new(),
            schedule: ModeSchedule::new(initial),
            policy,
            last_boundary: 0,
            prefetch_active: vec![0; d],
            prefetch_peak: vec![0; d],
            records: Vec::new(),
            tokens: 0,
            tokens_by_mode: BTreeMap::new(),
            remaining: requests.len(),
            finished: requests.is_empty(),
            makespan: 0.0,
            events: 0,
            ideal_sum: 0.0,
            actual_sum: 0.0,
            peak_kv: 0,
            kv_violations: 0,
            expected_tokens,
            requests_total: requests.len() as u64,
            trace: opts.trace.then(Vec::new),
            b_threshold,
            lockstep: sc.layout.lockstep_iterations && sc.layout.weight_mode.shards_ffn(),
            auditor: (opts.audit_slots && sidp).then(|| SlotAuditor::new(sc.layout.was_slot_count as usize)),
            kept_log: opts.keep_slot_log.then(Vec::new),
        }
    }

    fn log(&mut self, t: f64, kind: &str, rank: usize, detail: impl FnOnce() -> String) {
        if let Some(tr) = &mut self.trace {
            let line = TraceLine {
                t,
                kind,
                rank,
                detail: detail(),
            };
            tr.push(serde_json::to_string(&line).expect("trace line serializes"));
        }
    }

    /// Moves the rank's buffered slot transitions to the auditor / kept log.
    fn drain_slot_log(&mut self, e: usize) {
        let Some(was) = self.engines[e].was.as_mut() else {
            return;
        };
        let log = was.cache_mut().take_log();
        if let Some(a) = self.auditor.as_mut() {
            log.iter().for_each(|t| a.observe(t));
        }
        if let Some(k) = self.kept_log.as_mut() {
            k.extend(log);
        }
    }

    fn mode_for(&self, iter: u64) -> IterMode {
        match self.sc.layout.weight_mode {
            WeightMode::Replicated | WeightMode::TpShard => IterMode::Local,
            WeightMode::Fsdp => IterMode::Fsdp,
            WeightMode::Sidp => match self.schedule.mode_at(iter) {
                SidpMode::Was => IterMode::Was,
                SidpMode::Cas => IterMode::Cas,
            },
        }
    }

    fn schedule_flow_timers(&self, q: &mut EventQueue<Ev>, timers: Vec<FlowTimer>) {
        for t in timers {
            q.schedule(
                t.at,
                Ev::Flow {
                    flow: t.flow,
                    version: t.version,
                },
            );
        }
    }

    fn start_flow(
        &mut self,
        q: &mut EventQueue<Ev>,
        now: f64,
        owner: usize,
        reader: usize,
        bytes: f64,
        purpose: Purpose,
    ) {
        let (id, timers) = self
            .fabric
            .start_flow(now, owner, reader, bytes, self.purposes.len() as u64);
        debug_assert_eq!(id, self.purposes.len());
        self.purposes.push(purpose);
        self.schedule_flow_timers(q, timers);
    }

    // --- iteration lifecycle -------------------------------------------

    fn iter_start(&mut self, e: usize, now: f64, q: &mut EventQueue<Ev>) -> Result<(), SimError> {
        let iter = self.engines[e].state.iteration;
        let mode = self.mode_for(iter);
        let adm = admit(&mut self.engines[e].state);
        for id in &adm.failed {
            self.remaining -= 1;
            self.log(now, "request_failed", e, || format!("request {id} exceeds KV capacity"));
        }
        if self.remaining == 0 && !self.finished {
            self.finished = true;
            self.makespan = now;
            return Ok(());
        }
        let eng = &self.engines[e];
        let decode: Vec<&Request> = eng
            .state
            .active
            .iter()
            .filter(|r| r.state == RequestState::Decoding)
            .collect();
        let prompts: Vec<u64> = adm.admitted.iter().map(|&i| eng.state.active[i].prompt_len).collect();
        let decode_rows = decode.len() as u64;
        let mean_ctx = if decode.is_empty() {
            0.0
        } else {
            decode.iter().map(|r| r.context() as f64).sum::<f64>() / decode.len() as f64
        };
        let prefill_tokens: u64 = prompts.iter().sum();
        let idle = decode_rows == 0 && prefill_tokens == 0;
        if idle && eng.state.has_work() {
            return Err(SimError::Protocol(format!(
                "engine {e} has queued requests but admitted none"
            )));
        }
        let dummy = idle;
        if dummy {
            let stop = match self.sc.layout.weight_mode {
                WeightMode::Replicated | WeightMode::TpShard => true,
                WeightMode::Sidp => self.sc.ablation.dummy_skip,
                WeightMode::Fsdp => false,
            };
            if stop {
                self.engines[e].stopped_from = Some(iter);
                self.engines[e].window.clear();
                self.log(now, "engine_drained", e, || format!("iteration {iter}"));
                // owners waiting on this engine's chunks can proceed without it
                let pending: Vec<(u64, usize)> = self
                    .cas_points
                    .iter()
                    .filter(|(k, p)| !p.served && k.0 >= iter)
                    .map(|(k, _)| *k)
                    .collect();
                let mut pending = pending;
                pending.sort();
                for (i, l) in pending {
                    self.try_serve(i, l, now, q)?;
                }
                self.release_group(now, q);
                return Ok(());
            }
        }
        self.engines[e].state.is_dummy_this_iter = dummy;
        let work = if dummy {
            self.cm.layer_work(1.0, 1.0)
        } else {
            self.cm.mixed_layer_work(decode_rows as f64, mean_ctx, &prompts)
        };
        let rows = if dummy {
            1.0
        } else {
            (decode_rows + prefill_tokens) as f64
        };
        let n_layers = self.cm.layers_per_stage() as f64;
        let ideal_layer = if dummy {
            self.cm.ideal_layer_time(1.0, 1.0)
        } else {
            self.cm.ideal_layer_time(decode_rows as f64, mean_ctx)
                + crate::timing::prefill_shape(&prompts)
                    .map(|(r, c)| self.cm.ideal_layer_time(r, c))
                    .unwrap_or(0.0)
        };
        let ideal_s = self.sc.hardware.framework_overhead + n_layers * ideal_layer;
        self.engines[e].cur = Some(IterWork {
            mode,
            start: now,
            dummy,
            decode_rows,
            prefill_tokens,
            rows,
            work,
            layer: 0,
            stall: 0.0,
            waiting_slot: None,
            ideal_s,
        });
        self.log(now, "iter_start", e, || {
            format!(
                "iter {iter} mode {} rows {decode_rows} prefill {prefill_tokens} dummy {dummy}",
                mode.as_str()
            )
        });
        let overhead = self.sc.hardware.framework_overhead;
        match mode {
            IterMode::Local => {
                let t = overhead + n_layers * work.total() * self.cm.pipeline_bubble();
                q.schedule(now + t, Ev::IterEnd(e));
            }
            IterMode::Was => {
                let was = self.engines[e].was.as_mut().expect("sidp engine has WaS state");
                was.begin_pass()?;
                self.pump_prefetch(e, now, q)?;
                self.begin_layer_at(e, now + overhead, q);
            }
            IterMode::Cas | IterMode::Fsdp => self.begin_layer_at(e, now + overhead, q),
        }
        Ok(())
    }

    /// Starts the current layer's attention (or FSDP barrier) at `at`.
    fn begin_layer_at(&mut self, e: usize, at: f64, q: &mut EventQueue<Ev>) {
        let cur = self.engines[e].cur.as_ref().expect("iteration in progress");
        let mode = cur.mode;
        if mode == IterMode::Fsdp {
            let iter = self.engines[e].state.iteration;
            let layer = cur.layer;
            self.fsdp_arrive(e, iter, layer, at, q);
            return;
        }
        let mut attn = cur.work.attn_s;
        if mode == IterMode::Cas {
            attn += self.sc.policy.routing_overhead;
        }
        let (_, end) = self.gpus[e].reserve(at, attn);
        q.schedule(end, Ev::AttnDone(e));
    }

    fn attn_done(&mut self, e: usize, now: f64, q: &mut EventQueue<Ev>) -> Result<(), SimError> {
        let iter = self.engines[e].state.iteration;
        let cur = self.engines[e].cur.as_ref().expect("iteration in progress");
        let layer = cur.layer;
        match cur.mode {
            IterMode::Was => {
                let ffn = cur.work.ffn_s;
                let was = self.engines[e].was.as_mut().unwrap();
                if was.owns(layer) {
                    let (_, end) = self.gpus[e].reserve(now, ffn);
                    q.schedule(end, Ev::FfnDone(e));
                } else {
                    match was.acquire(now, layer)? {
                        Acquire::Ready(_) => {
                            let (_, end) = self.gpus[e].reserve(now, ffn);
                            q.schedule(end, Ev::FfnDone(e));
                        }
                        Acquire::Pending(slot) => {
                            self.engines[e].cur.as_mut().unwrap().waiting_slot = Some((slot, now));
                        }
                    }
                }
            }
            IterMode::Cas => {
                let rows = cur.rows;
                let owner = owner_of(layer, self.d);
                if owner == e {
                    let p = self.cas_points.entry((iter, layer)).or_default();
                    p.owner_ready = Some(now);
                    p.owner_rows = rows;
                    self.try_serve(iter, layer, now, q)?;
                } else {
                    self.send_msg(
                        Msg {
                            kind: MsgKind::Chunk,
                            from: e,
                            to: owner,
                            iter,
                            layer,
                            rows,
                        },
                        now,
                        q,
                    );
                }
            }
            IterMode::Local | IterMode::Fsdp => {
                return Err(SimError::Protocol(format!("attention event in {:?} mode", cur.mode)));
            }
        }
        Ok(())
    }

    fn ffn_done(&mut self, e: usize, now: f64, q: &mut EventQueue<Ev>) -> Result<(), SimError> {
        let cur = self.engines[e].cur.as_ref().expect("iteration in progress");
        let layer = cur.layer;
        if cur.mode == IterMode::Was {
            let was = self.engines[e].was.as_mut().unwrap();
            if !was.owns(layer) {
                was.release(now, layer)?;
                self.pump_prefetch(e, now, q)?;
            }
        }
        self.layer_done(e, now, q)
    }

    fn layer_done(&mut self, e: usize, now: f64, q: &mut EventQueue<Ev>) -> Result<(), SimError> {
        let layers = self.layers;
        let cur = self.engines[e].cur.as_mut().expect("iteration in progress");
        cur.layer += 1;
        if cur.layer < layers {
            self.begin_layer_at(e, now, q);
            Ok(())
        } else {
            self.iter_finish(e, now, q)
        }
    }

    fn iter_finish(&mut self, e: usize, now: f64, q: &mut EventQueue<Ev>) -> Result<(), SimError> {
        let cur = self.engines[e].cur.take().expect("iteration in progress");
        let eng = &mut self.engines[e];
        let iter = eng.state.iteration;
        let mut produced = 0;
        let mut finished_reqs = 0;
        if !cur.dummy {
            for r in eng.state.active.iter_mut() {
                match r.state {
                    RequestState::Decoding => {
                        r.generated += 1;
                        produced += 1;
                        if r.generated >= r.output_len {
                            r.state = RequestState::Done;
                        }
                    }
                    RequestState::Prefilling => r.state = RequestState::Decoding,
                    _ => {}
                }
            }
            let mut freed = 0;
            eng.state.active.retain(|r| {
                if r.state == RequestState::Done {
                    freed += r.reservation();
                    finished_reqs += 1;
                    false
                } else {
                    true
                }
            });
            eng.state.kv_used_tokens -= freed;
        }
        if eng.state.kv_used_tokens > eng.state.kv_capacity_tokens {
            self.kv_violations += 1;
        }
        self.peak_kv = self.peak_kv.max(eng.state.kv_used_tokens);
        eng.stall_total += cur.stall;
        let live = eng.state.live_batch() + finished_reqs as u64;
        eng.window.push_back(if cur.dummy { 0 } else { live });
        let window_len = self.sc.policy.window_iters as usize;
        while eng.window.len() > window_len {
            eng.window.pop_front();
        }
        eng.state.iteration += 1;
        self.drain_slot_log(e);
        self.tokens += produced;
        *self.tokens_by_mode.entry(cur.mode.as_str().to_string()).or_default() += produced;
        self.remaining -= finished_reqs;
        self.actual_sum += now - cur.start;
        self.ideal_sum += cur.ideal_s;
        self.records.push(IterRecord {
            engine: e,
            iter,
            mode: cur.mode,
            start_s: cur.start,
            end_s: now,
            decode_rows: cur.decode_rows,
            prefill_tokens: cur.prefill_tokens,
            dummy: cur.dummy,
            stall_s: cur.stall,
        });
        self.log(now, "iter_end", e, || format!("iter {iter} tokens {produced}"));
        if self.remaining == 0 {
            self.finished = true;
            self.makespan = now;
            return Ok(());
        }
        self.maybe_switch(iter + 1);
        if self.lockstep {
            self.engines[e].parked_at = Some(now);
            self.release_group(now, q);
        } else {
            q.schedule(now, Ev::IterStart(e));
        }
        Ok(())
    }

    /// Starts the next group iteration once every live engine has parked.
    fn release_group(&mut self, now: f64, q: &mut EventQueue<Ev>) {
        if !self.lockstep {
            return;
        }
        let live = || self.engines.iter().filter(|e| e.stopped_from.is_none());
        if live().any(|e| e.parked_at.is_none()) || live().next().is_none() {
            return;
        }
        for e in 0..self.engines.len() {
            if self.engines[e].parked_at.take().is_some() {
                q.schedule(now, Ev::IterStart(e));
            }
        }
    }

    fn maybe_switch(&mut self, completed: u64) {
        let Some(policy) = &self.policy else { return };
        let boundary = completed / policy.window_iters;
        if boundary <= self.last_boundary {
            return;
        }
        self.last_boundary = boundary;
        let windows: Vec<Vec<u64>> = self
            .engines
            .iter()
            .map(|e| e.window.iter().copied().collect())
            .collect();
        // first iteration index no engine has started yet
        let next_iter = self
            .engines
            .iter()
            .filter(|e| e.stopped_from.is_none())
            .map(|e| e.state.iteration + u64::from(e.cur.is_some()))
            .max()
            .unwrap_or(completed)
            .max(self.schedule.last_switch_iter());
        let dwell = completed.saturating_sub(self.schedule.last_switch_iter());
        if let Some(dir) = decide_mode(policy, &windows, self.schedule.current(), dwell, next_iter) {
            self.schedule.apply(dir);
            self.log(0.0, "mode_directive", 0, || {
                format!("{:?} from iteration {}", dir.mode, dir.effective_from_iter)
            });
        }
    }

    // --- WaS ------------------------------------------------------------

    fn pump_prefetch(&mut self, e: usize, now: f64, q: &mut EventQueue<Ev>) -> Result<(), SimError> {
        let bytes = crate::capacity::single_slot_bytes(&self.cm.stats, &self.sc.layout) as f64;
        while let Some(f) = self.engines[e].was.as_mut().unwrap().pump(now)? {
            self.prefetch_active[f.owner] += 1;
            self.prefetch_peak[f.owner] = self.prefetch_peak[f.owner].max(self.prefetch_active[f.owner]);
            self.log(now, "fetch_start", e, || {
                format!("layer {} from owner {}", f.layer, f.owner)
            });
            self.start_flow(
                q,
                now,
                f.owner,
                e,
                bytes,
                Purpose::Prefetch {
                    engine: e,
                    slot: f.slot,
                },
            );
        }
        Ok(())
    }

    fn prefetch_done(
        &mut self,
        e: usize,
        slot: usize,
        owner: usize,
        now: f64,
        q: &mut EventQueue<Ev>,
    ) -> Result<(), SimError> {
        self.prefetch_active[owner] -= 1;
        let was = self.engines[e].was.as_mut().unwrap();
        let layer = was.fill_done(now, slot)?;
        self.log(now, "fetch_done", e, || format!("layer {layer}"));
        self.pump_prefetch(e, now, q)?;
        let Some(cur) = self.engines[e].cur.as_mut() else {
            return Ok(());
        };
        if let Some((wslot, since)) = cur.waiting_slot {
            if wslot == slot {
                cur.waiting_slot = None;
                cur.stall += now - since;
                let ffn = cur.work.ffn_s;
                self.engines[e].was.as_mut().unwrap().start_use(now, slot)?;
                let (_, end) = self.gpus[e].reserve(now, ffn);
                q.schedule(end, Ev::FfnDone(e));
            }
        }
        Ok(())
    }

    // --- CaS ------------------------------------------------------------

    fn send_msg(&mut self, msg: Msg, now: f64, q: &mut EventQueue<Ev>) {
        let id = self.msgs.len();
        let async_p2p = self.sc.ablation.async_p2p;
        let chan_owner = match msg.kind {
            MsgKind::Chunk => msg.to,
            MsgKind::Output => msg.from,
        };
        let kind = msg.kind;
        self.msgs.push(msg);
        if async_p2p {
            q.schedule(now + self.sc.hardware.p2p_latency, Ev::MsgWire(id));
        } else {
            let ch = match kind {
                MsgKind::Chunk => &mut self.in_channels[chan_owner],
                MsgKind::Output => &mut self.out_channels[chan_owner],
            };
            if ch.busy {
                ch.queue.push_back(id);
            } else {
                ch.busy = true;
                q.schedule(now + self.sc.hardware.p2p_latency, Ev::MsgWire(id));
            }
        }
    }

    fn msg_wire(&mut self, id: usize, now: f64, q: &mut EventQueue<Ev>) {
        let m = &self.msgs[id];
        let bytes = self.cm.activation_bytes(m.rows);
        // the sender's egress carries the bytes
        let (owner, reader) = (m.from, m.to);
        self.start_flow(q, now, owner, reader, bytes, Purpose::Msg(id));
    }

    fn msg_delivered(&mut self, id: usize, now: f64, q: &mut EventQueue<Ev>) -> Result<(), SimError> {
        let m = self.msgs[id].clone();
        if !self.sc.ablation.async_p2p {
            let ch_owner = match m.kind {
                MsgKind::Chunk => m.to,
                MsgKind::Output => m.from,
            };
            let lat = self.sc.hardware.p2p_latency;
            let ch = match m.kind {
                MsgKind::Chunk => &mut self.in_channels[ch_owner],
                MsgKind::Output => &mut self.out_channels[ch_owner],
            };
            match ch.queue.pop_front() {
                Some(next) => {
                    q.schedule(now + lat, Ev::MsgWire(next));
                }
                None => ch.busy = false,
            }
        }
        match m.kind {
            MsgKind::Chunk => {
                if owner_of(m.layer, self.d) != m.to {
                    return Err(SimError::Protocol(format!(
                        "engine {} received a chunk for layer {} it does not own",
                        m.to, m.layer
                    )));
                }
                self.cas_points
                    .entry((m.iter, m.layer))
                    .or_default()
                    .chunks
                    .push((m.from, m.rows, now));
                self.try_serve(m.iter, m.layer, now, q)
            }
            MsgKind::Output => {
                let e = m.to;
                let ok = self.engines[e]
                    .cur
                    .as_ref()
                    .is_some_and(|c| c.layer == m.layer && self.engines[e].state.iteration == m.iter);
                if !ok {
                    return Err(SimError::Protocol(format!(
                        "engine {e} got output for iteration {} layer {} out of order",
                        m.iter, m.layer
                    )));
                }
                self.layer_done(e, now, q)
            }
        }
    }

    /// Whether engine `e` takes part in CaS iteration `iter`: Some(true) it
    /// sends a chunk, Some(false) it is skipped, None not known yet.
    fn participates(&self, e: usize, iter: u64) -> Option<bool> {
        let eng = &self.engines[e];
        if let Some(from) = eng.stopped_from {
            if iter >= from {
                return Some(false);
            }
        }
        if eng.state.iteration > iter || (eng.state.iteration == iter && eng.cur.is_some()) {
            return Some(true);
        }
        None
    }

    fn try_serve(&mut self, iter: u64, layer: usize, now: f64, q: &mut EventQueue<Ev>) -> Result<(), SimError> {
        let owner = owner_of(layer, self.d);
        let Some(point) = self.cas_points.get(&(iter, layer)) else {
            return Ok(());
        };
        if point.served {
            return Ok(());
        }
        for e in 0..self.d {
            let part = self.participates(e, iter);
            if e == owner {
                match part {
                    Some(true) if point.owner_ready.is_none() => return Ok(()),
                    None => return Ok(()),
                    _ => {}
                }
            } else {
                match part {
                    None => return Ok(()),
                    Some(true) if !point.chunks.iter().any(|c| c.0 == e) => return Ok(()),
                    _ => {}
                }
            }
        }
        let mut arrivals: Vec<(f64, f64)> = point.chunks.iter().map(|c| (c.2, c.1)).collect();
        if let Some(t) = point.owner_ready {
            arrivals.push((t, point.owner_rows));
        }
        arrivals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let rows: Vec<f64> = arrivals.iter().map(|a| a.1).collect();
        let compute = owner_compute_time(&self.cm, &rows, self.sc.ablation.gemm_fusion);
        self.cas_points.get_mut(&(iter, layer)).unwrap().served = true;
        let (_, end) = self.gpus[owner].reserve(now, compute);
        self.log(now, "cas_serve", owner, || {
            format!(
                "iter {iter} layer {layer} chunks {} rows {}",
                rows.len(),
                rows.iter().sum::<f64>()
            )
        });
        q.schedule(end, Ev::ServeDone(iter, layer));
        Ok(())
    }

    fn serve_done(&mut self, iter: u64, layer: usize, now: f64, q: &mut EventQueue<Ev>) -> Result<(), SimError> {
        let owner = owner_of(layer, self.d);
        let point = self.cas_points.remove(&(iter, layer)).expect("served point exists");
        for (src, rows, _) in &point.chunks {
            self.send_msg(
                Msg {
                    kind: MsgKind::Output,
                    from: owner,
                    to: *src,
                    iter,
                    layer,
                    rows: *rows,
                },
                now,
                q,
            );
        }
        if point.owner_ready.is_some() {
            self.layer_done(owner, now, q)?;
        }
        Ok(())
    }

    // --- FSDP -----------------------------------------------------------

    fn fsdp_arrive(&mut self, e: usize, iter: u64, layer: usize, at: f64, q: &mut EventQueue<Ev>) {
        let b = self.barriers.entry((iter, layer)).or_default();
        b.arrivals.push((e, at));
        if b.arrivals.len() < self.d {
            return;
        }
        let b = self.barriers.remove(&(iter, layer)).unwrap();
        let last = b.arrivals.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
        let go = last + self.cm.fsdp_gather_time(self.d as u64);
        for (eng, arrived) in b.arrivals {
            let cur = self.engines[eng].cur.as_mut().unwrap();
            cur.stall += last - arrived;
            let (_, end) = self.gpus[eng].reserve(go, cur.work.total());
            q.schedule(end, Ev::FfnDone(eng));
        }
    }

    // --- wrap-up --------------------------------------------------------

    fn finish(mut self, result: Result<f64, SimError>) -> JobOutput {
        let mut report = JobReport::empty(
            &self.sc.name,
            self.sc.workload.seed,
            RunStatus::Ok,
            self.capacity.clone(),
        );
        fill_layout(&mut report, self.sc);
        report.format_version = FORMAT_VERSION;
        report.b_threshold = self.b_threshold;
        report.events_processed = self.events;
        if let Err(err) = &result {
            report.status = RunStatus::Aborted;
            report.message = Some(err.to_string());
        } else if !self.finished {
            report.status = RunStatus::Aborted;
            report.message = Some("event queue drained before all requests finished".into());
        }
        let end = if self.finished {
            self.makespan
        } else {
            result.clone().unwrap_or(0.0)
        };
        report.makespan_s = self.makespan;
        report.total_tokens = self.tokens;
        report.expected_tokens = self.expected_tokens;
        report.throughput_tok_s = if self.makespan > 0.0 {
            self.tokens as f64 / self.makespan
        } else {
            0.0
        };
        report.requests_total = self.requests_total;
        let failed: u64 = self.engines.iter().map(|e| e.state.failed.len() as u64).sum();
        report.requests_failed = failed;
        report.requests_completed = self.requests_total - failed - self.remaining as u64;
        report.scaling_efficiency = if self.ideal_sum > 0.0 {
            self.actual_sum / self.ideal_sum
        } else {
            1.0
        };
        report.per_rank_stall_s = self.engines.iter().map(|e| e.stall_total).collect();
        report.peak_readers_per_owner = self.prefetch_peak.clone();
        // slot occupancy and audit
        let mut occ: Vec<f64> = Vec::new();
        for e in 0..self.engines.len() {
            self.drain_slot_log(e);
        }
        let mut max_occupied = 0;
        let mut transitions = 0;
        for eng in self.engines.iter_mut() {
            if let Some(was) = eng.was.as_mut() {
                let cache = was.cache_mut();
                cache.settle(end);
                max_occupied = max_occupied.max(cache.max_occupied());
                transitions += cache.transitions();
                let t = cache.occupancy_time();
                if occ.len() < t.len() {
                    occ.resize(t.len(), 0.0);
                }
                for (k, v) in t.iter().enumerate() {
                    occ[k] += v;
                }
            }
        }
        let total: f64 = occ.iter().sum();
        if total > 0.0 {
            occ.iter_mut().for_each(|v| *v /= total);
        }
        report.slot_occupancy = occ;
        match &self.auditor {
            Some(a) => report.slot_audit = a.audit().clone(),
            None => {
                report.slot_audit.transitions = transitions;
                report.slot_audit.max_occupied = max_occupied;
            }
        }
        let mut slot_log = self.kept_log.take().unwrap_or_default();
        slot_log.sort_by(|a, b| a.time.total_cmp(&b.time));
        // modes
        let mut by_iter: BTreeMap<u64, IterMode> = BTreeMap::new();
        let mut conflicts = 0;
        for r in &self.records {
            *report
                .iterations_by_mode
                .entry(r.mode.as_str().to_string())
                .or_default() += 1;
            match by_iter.get(&r.iter) {
                Some(m) if *m != r.mode => conflicts += 1,
                Some(_) => {}
                None => {
                    by_iter.insert(r.iter, r.mode);
                }
            }
        }
        report.mode_conflicts = conflicts;
        let mut spans: Vec<ModeSpan> = Vec::new();
        for (&i, &m) in &by_iter {
            match spans.last_mut() {
                Some(s) if s.mode == m && s.to_iter + 1 == i => s.to_iter = i,
                _ => spans.push(ModeSpan {
                    mode: m,
                    from_iter: i,
                    to_iter: i,
                }),
            }
        }
        report.switch_count = spans.windows(2).filter(|w| w[0].mode != w[1].mode).count() as u64;
        report.mode_timeline = spans;
        report.tokens_by_mode = self.tokens_by_mode.clone();
        report.flow_count = self.fabric.flows().iter().filter(|f| f.finished_at.is_some()).count() as u64;
        report.flow_bytes = self.fabric.bytes_moved();
        (report.flow_bytes_injected, report.flow_bytes_delivered) = self.fabric.byte_ledger();
        report.flow_conservation_max_rel_err = self.fabric.max_conservation_error();
        report.peak_kv_used_tokens = self.peak_kv;
        report.kv_violations = self.kv_violations;
        report.iterations = std::mem::take(&mut self.records);
        JobOutput {
            report,
            trace: self.trace.take(),
            slot_log,
        }
    }
}

impl World for SimWorld<'_> {
    type Event = Ev;

    fn handle(&mut self, now: f64, ev: Ev, q: &mut EventQueue<Ev>) -> Result<(), SimError> {
        self.events += 1;
        if self.finished {
            // drain the wire so the byte ledger closes; nothing is dispatched
            if let Ev::Flow { flow, version } = ev {
                if let Some((_, timers)) = self.fabric.complete(now, flow, version) {
                    self.schedule_flow_timers(q, timers);
                }
            }
            return Ok(());
        }
        match ev {
            Ev::IterStart(e) => self.iter_start(e, now, q),
            Ev::IterEnd(e) => self.iter_finish(e, now, q),
            Ev::AttnDone(e) => self.attn_done(e, now, q),
            Ev::FfnDone(e) => self.ffn_done(e, now, q),
            Ev::Flow { flow, version } => {
                let Some((f, timers)) = self.fabric.complete(now, flow, version) else {
                    return Ok(());
                };
                self.schedule_flow_timers(q, timers);
                match self.purposes[flow] {
                    Purpose::Prefetch { engine, slot } => self.prefetch_done(engine, slot, f.owner_rank, now, q),
                    Purpose::Msg(id) => self.msg_delivered(id, now, q),
                }
            }
            Ev::MsgWire(id) => {
                self.msg_wire(id, now, q);
                Ok(())
            }
            Ev::ServeDone(iter, layer) => self.serve_done(iter, layer, now, q),
        }
    }
}
