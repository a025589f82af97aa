//! Discrete-event simulation of the multiresource job system.
//!
//! Job sizes are explicit: sampled `Exp(μᵢ)` at arrival for Poisson input or
//! taken from a trace. Preemption keeps the remaining size. Exponential
//! clocks that do not belong to a job (Poisson arrivals, empty-slot
//! potential completions, modulating-process timers) are redrawn at every
//! event, which is exact by memorylessness; job completions and trace
//! arrivals sit on a time-ordered heap with an insertion-sequence tie-break.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::analysis::relative_completions;
use crate::error::{invalid, Result};
use crate::model::{enumerate_maximal_schedules, fits, Schedule, Workload, DEFAULT_ENUMERATION_CAP};
use crate::par::{self, Execution};
use crate::policy::{Mode, ModulatingProcess, StateKind, Trigger};

/// Default instability guard on the total number of jobs in system.
pub const DEFAULT_GUARD: usize = 1_000_000;

/// One arrival replayed from a trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceArrival {
    pub time: f64,
    pub job_type: usize,
    pub duration: f64,
}

#[derive(Clone, Debug, Default)]
pub enum ArrivalSource {
    /// Poisson arrivals at the workload's rates, `Exp(μᵢ)` sizes.
    #[default]
    Poisson,
    /// Arrivals replayed in time order.
    Trace(Arc<[TraceArrival]>),
}

impl Serialize for ArrivalSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ArrivalSource::Poisson => s.serialize_str("poisson"),
            ArrivalSource::Trace(a) => s.serialize_str(&format!("trace ({} arrivals)", a.len())),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
    pub replications: usize,
    pub guard: usize,
    /// Base RNG stream; replication `r` uses stream `stream + r`.
    pub stream: u64,
    pub arrivals: ArrivalSource,
    /// Keep a per-event log for the first replication.
    pub log_events: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl SimConfig {
    pub fn new(horizon: f64, warmup: f64, seed: u64, replications: usize) -> Self {
        Self {
            horizon,
            warmup,
            seed,
            replications,
            guard: DEFAULT_GUARD,
            stream: 0,
            arrivals: ArrivalSource::Poisson,
            log_events: false,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(invalid("horizon must be positive"));
        }
        if !(self.warmup >= 0.0) || self.warmup >= self.horizon {
            return Err(invalid("warmup must be non-negative and below the horizon"));
        }
        if self.replications == 0 {
            return Err(invalid("need at least one replication"));
        }
        if self.guard == 0 {
            return Err(invalid("instability guard must be positive"));
        }
        Ok(())
    }

    fn rng(&self, r: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream.wrapping_add(r as u64));
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: &'static str,
    pub job_type: Option<usize>,
    pub state: Option<usize>,
}

/// Raw measurements of one replication.
#[derive(Clone, Debug, Serialize)]
pub struct ReplicationStats {
    pub queue_length: Vec<f64>,
    pub response_time: Vec<Option<f64>>,
    pub overall_response_time: Option<f64>,
    pub completions: Vec<u64>,
    pub throughput: f64,
    pub unused: Vec<u64>,
    /// Potential completions of policy slots (job completions in slots
    /// plus unused service).
    pub potential: Vec<u64>,
    pub switching_fraction: f64,
    pub preemptions: u64,
    /// Event instants at which occupied resources exceeded capacity.
    pub capacity_violations: u64,
    pub unstable: bool,
    pub end_time: f64,
    pub unused_delta_mean: Option<f64>,
    #[serde(skip)]
    pub events: Vec<EventRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    /// 95% Student-t half-width; absent with fewer than two samples.
    pub half_width: Option<f64>,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self { mean, half_width: None };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("valid degrees of freedom")
            .inverse_cdf(0.975);
        Self {
            mean,
            half_width: Some(t * (var / n as f64).sqrt()),
        }
    }

    pub fn hw(&self) -> f64 {
        self.half_width.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimReport {
    pub policy: String,
    pub replications: usize,
    pub queue_length: Vec<Estimate>,
    pub total_queue_length: Estimate,
    pub response_time: Vec<Option<Estimate>>,
    pub mean_response_time: Option<Estimate>,
    pub throughput: Estimate,
    pub unused_fraction: Vec<f64>,
    pub switching_fraction: f64,
    pub completions: Vec<u64>,
    pub preemptions: u64,
    pub capacity_violations: u64,
    pub unstable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unused_delta: Option<Estimate>,
    #[serde(skip)]
    pub runs: Vec<ReplicationStats>,
}

impl SimReport {
    fn from_runs(policy: String, runs: Vec<ReplicationStats>) -> Self {
        let k = runs[0].queue_length.len();
        let col = |f: &dyn Fn(&ReplicationStats) -> f64| -> Vec<f64> { runs.iter().map(f).collect() };
        let queue_length = (0..k)
            .map(|i| Estimate::from_samples(&col(&|r| r.queue_length[i])))
            .collect();
        let total_queue_length = Estimate::from_samples(&col(&|r| r.queue_length.iter().sum()));
        let opt = |xs: Vec<Option<f64>>| -> Option<Estimate> {
            let v: Option<Vec<f64>> = xs.into_iter().collect();
            v.map(|v| Estimate::from_samples(&v))
        };
        let response_time = (0..k)
            .map(|i| opt(runs.iter().map(|r| r.response_time[i]).collect()))
            .collect();
        let mean_response_time = opt(runs.iter().map(|r| r.overall_response_time).collect());
        let unused_delta = opt(runs.iter().map(|r| r.unused_delta_mean).collect());
        let sum_u = |f: &dyn Fn(&ReplicationStats) -> &Vec<u64>| -> Vec<u64> {
            (0..k).map(|i| runs.iter().map(|r| f(r)[i]).sum()).collect()
        };
        let unused = sum_u(&|r| &r.unused);
        let potential = sum_u(&|r| &r.potential);
        Self {
            policy,
            replications: runs.len(),
            queue_length,
            total_queue_length,
            response_time,
            mean_response_time,
            throughput: Estimate::from_samples(&col(&|r| r.throughput)),
            unused_fraction: unused
                .iter()
                .zip(&potential)
                .map(|(&u, &p)| if p == 0 { 0.0 } else { u as f64 / p as f64 })
                .collect(),
            switching_fraction: col(&|r| r.switching_fraction).iter().sum::<f64>() / runs.len() as f64,
            completions: sum_u(&|r| &r.completions),
            preemptions: runs.iter().map(|r| r.preemptions).sum(),
            capacity_violations: runs.iter().map(|r| r.capacity_violations).sum(),
            unstable: runs.iter().any(|r| r.unstable),
            unused_delta,
            runs,
        }
    }

    /// Mean over types of the unused-service fraction weighted by potential
    /// completions.
    pub fn overall_unused_fraction(&self) -> f64 {
        let (u, p) = self.runs.iter().fold((0u64, 0u64), |(u, p), r| {
            (u + r.unused.iter().sum::<u64>(), p + r.potential.iter().sum::<u64>())
        });
        if p == 0 {
            0.0
        } else {
            u as f64 / p as f64
        }
    }
}

type JobId = usize;

#[derive(Clone, Debug)]
struct Job {
    ty: usize,
    seq: u64,
    arrival: f64,
    remaining: f64,
    started: f64,
    version: u32,
}

#[derive(Clone, Copy, Debug)]
struct HeapEntry {
    time: f64,
    order: u64,
    job: JobId,
    version: u32,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // Reversed for a min-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.order.cmp(&self.order))
    }
}

struct Acc {
    warmup: f64,
    area: Vec<f64>,
    switching_time: f64,
    resp_sum: Vec<f64>,
    resp_n: Vec<u64>,
    completions: Vec<u64>,
    unused: Vec<u64>,
    potential: Vec<u64>,
    preemptions: u64,
    violations: u64,
    delta_sum: f64,
    delta_n: u64,
}

impl Acc {
    fn new(k: usize, warmup: f64) -> Self {
        Self {
            warmup,
            area: vec![0.0; k],
            switching_time: 0.0,
            resp_sum: vec![0.0; k],
            resp_n: vec![0; k],
            completions: vec![0; k],
            unused: vec![0; k],
            potential: vec![0; k],
            preemptions: 0,
            violations: 0,
            delta_sum: 0.0,
            delta_n: 0,
        }
    }
}

/// State shared by all policies: jobs, per-type FCFS queues, the completion
/// heap, arrivals, and statistics.
struct Core<'a> {
    w: &'a Workload,
    cap: Vec<f64>,
    rng: ChaCha8Rng,
    now: f64,
    horizon: f64,
    guard: usize,
    jobs: Vec<Job>,
    free: Vec<JobId>,
    queues: Vec<BTreeMap<u64, JobId>>,
    heap: BinaryHeap<HeapEntry>,
    heap_order: u64,
    next_seq: u64,
    in_system: Vec<usize>,
    total_in_system: usize,
    poisson: bool,
    trace: Option<Arc<[TraceArrival]>>,
    trace_next: usize,
    switching: bool,
    acc: Acc,
    log: Option<Vec<EventRecord>>,
}

impl<'a> Core<'a> {
    fn new(w: &'a Workload, cfg: &SimConfig, r: usize) -> Self {
        let k = w.num_types();
        let (poisson, trace) = match &cfg.arrivals {
            ArrivalSource::Poisson => (true, None),
            ArrivalSource::Trace(t) => (false, Some(t.clone())),
        };
        Self {
            w,
            cap: w.capacity().as_slice().to_vec(),
            rng: cfg.rng(r),
            now: 0.0,
            horizon: cfg.horizon,
            guard: cfg.guard,
            jobs: Vec::new(),
            free: Vec::new(),
            queues: vec![BTreeMap::new(); k],
            heap: BinaryHeap::new(),
            heap_order: 0,
            next_seq: 0,
            in_system: vec![0; k],
            total_in_system: 0,
            poisson,
            trace,
            trace_next: 0,
            switching: false,
            acc: Acc::new(k, cfg.warmup),
            log: (cfg.log_events && r == 0).then(Vec::new),
        }
    }

    fn k(&self) -> usize {
        self.in_system.len()
    }

    fn exp(&mut self, rate: f64) -> f64 {
        let e: f64 = self.rng.sample(Exp1);
        e / rate
    }

    fn log(&mut self, kind: &'static str, job_type: Option<usize>, state: Option<usize>) {
        if let Some(log) = &mut self.log {
            log.push(EventRecord {
                time: self.now,
                kind,
                job_type,
                state,
            });
        }
    }

    fn measuring(&self) -> bool {
        self.now >= self.acc.warmup
    }

    fn advance(&mut self, t: f64) {
        if t > self.acc.warmup {
            let from = self.now.max(self.acc.warmup);
            let dt = t - from;
            for (a, &n) in self.acc.area.iter_mut().zip(&self.in_system) {
                *a += n as f64 * dt;
            }
            if self.switching {
                self.acc.switching_time += dt;
            }
        }
        self.now = t;
    }

    fn arrival_rate(&self) -> f64 {
        if self.poisson {
            self.w.total_arrival_rate()
        } else {
            0.0
        }
    }

    fn next_trace_time(&self) -> f64 {
        self.trace
            .as_ref()
            .and_then(|t| t.get(self.trace_next))
            .map_or(f64::INFINITY, |a| a.time)
    }

    /// Earliest valid heap entry.
    fn next_completion(&mut self) -> Option<HeapEntry> {
        while let Some(top) = self.heap.peek() {
            let job = &self.jobs[top.job];
            if job.version == top.version {
                return Some(*top);
            }
            self.heap.pop();
        }
        None
    }

    /// Creates a job and queues it.
    fn arrive(&mut self, ty: usize, size: f64) {
        let job = Job {
            ty,
            seq: self.next_seq,
            arrival: self.now,
            remaining: size,
            started: f64::NAN,
            version: 0,
        };
        let id = match self.free.pop() {
            Some(id) => {
                let v = self.jobs[id].version.wrapping_add(1);
                self.jobs[id] = Job { version: v, ..job };
                id
            }
            None => {
                self.jobs.push(job);
                self.jobs.len() - 1
            }
        };
        self.queues[ty].insert(self.next_seq, id);
        self.next_seq += 1;
        self.in_system[ty] += 1;
        self.total_in_system += 1;
        self.log("arrival", Some(ty), None);
    }

    fn poisson_arrival(&mut self) {
        let lam = self.w.total_arrival_rate();
        let mut x = self.rng.gen::<f64>() * lam;
        let types = self.w.types();
        let mut ty = types.len() - 1;
        for (i, t) in types.iter().enumerate() {
            if x < t.arrival_rate {
                ty = i;
                break;
            }
            x -= t.arrival_rate;
        }
        let size = self.exp(types[ty].service_rate);
        self.arrive(ty, size);
    }

    fn trace_arrival(&mut self) {
        let a = self.trace.as_ref().expect("trace")[self.trace_next].clone();
        self.trace_next += 1;
        self.arrive(a.job_type, a.duration);
    }

    fn start(&mut self, id: JobId) {
        let job = &mut self.jobs[id];
        job.started = self.now;
        job.version = job.version.wrapping_add(1);
        let entry = HeapEntry {
            time: self.now + job.remaining,
            order: self.heap_order,
            job: id,
            version: job.version,
        };
        let ty = job.ty;
        self.heap_order += 1;
        self.heap.push(entry);
        self.log("start", Some(ty), None);
    }

    fn preempt(&mut self, id: JobId) {
        let now = self.now;
        let job = &mut self.jobs[id];
        job.remaining = (job.remaining - (now - job.started)).max(0.0);
        job.version = job.version.wrapping_add(1);
        let (ty, seq) = (job.ty, job.seq);
        self.queues[ty].insert(seq, id);
        if self.measuring() {
            self.acc.preemptions += 1;
        }
        self.log("preempt", Some(ty), None);
    }

    fn pop_queue(&mut self, ty: usize) -> Option<JobId> {
        self.queues[ty].pop_first().map(|(_, id)| id)
    }

    /// Records a completion; the caller removes the job from its running set.
    fn finish(&mut self, id: JobId) {
        let job = &self.jobs[id];
        let ty = job.ty;
        let resp = self.now - job.arrival;
        self.in_system[ty] -= 1;
        self.total_in_system -= 1;
        if self.measuring() {
            self.acc.completions[ty] += 1;
            self.acc.resp_sum[ty] += resp;
            self.acc.resp_n[ty] += 1;
        }
        self.jobs[id].version = self.jobs[id].version.wrapping_add(1);
        self.free.push(id);
        self.log("completion", Some(ty), None);
    }

    fn footprint(&self, counts: &[usize]) -> Vec<f64> {
        let mut used = vec![0.0; self.cap.len()];
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                for (u, d) in used.iter_mut().zip(self.w.demand(i)) {
                    *u += c as f64 * d;
                }
            }
        }
        used
    }

    fn check_capacity(&mut self, used: &[f64]) {
        if !fits(used, &self.cap) {
            self.acc.violations += 1;
        }
    }

    /// Head of the lowest-sequence queue whose type fits in `leftover`.
    fn first_fit_head(&self, used: &[f64]) -> Option<usize> {
        let mut best: Option<(u64, usize)> = None;
        for (i, q) in self.queues.iter().enumerate() {
            if let Some((&seq, _)) = q.first_key_value() {
                if best.is_some_and(|(b, _)| b < seq) {
                    continue;
                }
                let after: Vec<f64> = used.iter().zip(self.w.demand(i)).map(|(u, d)| u + d).collect();
                if fits(&after, &self.cap) {
                    best = Some((seq, i));
                }
            }
        }
        best.map(|(_, i)| i)
    }

    fn into_stats(self, unstable: bool) -> ReplicationStats {
        let span = (self.now - self.acc.warmup).max(0.0);
        let k = self.k();
        let queue_length = (0..k)
            .map(|i| {
                if span > 0.0 {
                    self.acc.area[i] / span
                } else {
                    self.in_system[i] as f64
                }
            })
            .collect();
        let response_time = (0..k)
            .map(|i| (self.acc.resp_n[i] > 0).then(|| self.acc.resp_sum[i] / self.acc.resp_n[i] as f64))
            .collect();
        let n: u64 = self.acc.resp_n.iter().sum();
        let overall = (n > 0).then(|| self.acc.resp_sum.iter().sum::<f64>() / n as f64);
        let done: u64 = self.acc.completions.iter().sum();
        ReplicationStats {
            queue_length,
            response_time,
            overall_response_time: overall,
            throughput: if span > 0.0 { done as f64 / span } else { 0.0 },
            completions: self.acc.completions,
            unused: self.acc.unused,
            potential: self.acc.potential,
            switching_fraction: if span > 0.0 {
                self.acc.switching_time / span
            } else {
                0.0
            },
            preemptions: self.acc.preemptions,
            capacity_violations: self.acc.violations,
            unstable,
            end_time: self.now,
            unused_delta_mean: (self.acc.delta_n > 0).then(|| self.acc.delta_sum / self.acc.delta_n as f64),
            events: self.log.unwrap_or_default(),
        }
    }
}

/// Scheduling behaviour plugged into the event loop.
trait Policy {
    /// Total rate of policy-owned exponential clocks.
    fn clock_rate(&self, core: &Core) -> f64;
    /// Fires one of the policy clocks; `x` is uniform on `[0, clock_rate)`.
    fn fire_clock(&mut self, core: &mut Core, x: f64);
    fn on_arrival(&mut self, core: &mut Core);
    fn on_completion(&mut self, core: &mut Core, id: JobId);
}

fn run_replication<P: Policy>(core: &mut Core, policy: &mut P) -> bool {
    loop {
        let clock = policy.clock_rate(core);
        let gill = core.arrival_rate() + clock;
        let t_gill = if gill > 0.0 {
            core.now + core.exp(gill)
        } else {
            f64::INFINITY
        };
        let next = core.next_completion();
        let t_heap = next.map_or(f64::INFINITY, |e| e.time);
        let t_trace = core.next_trace_time();
        let t = t_gill.min(t_heap).min(t_trace);
        if t > core.horizon {
            core.advance(core.horizon);
            return false;
        }
        core.advance(t);
        if t == t_heap {
            let e = core.heap.pop().expect("entry");
            core.jobs[e.job].remaining = 0.0;
            policy.on_completion(core, e.job);
        } else if t == t_trace {
            core.trace_arrival();
            policy.on_arrival(core);
        } else {
            let x = core.rng.gen::<f64>() * gill;
            let lam = core.arrival_rate();
            if x < lam {
                core.poisson_arrival();
                policy.on_arrival(core);
            } else {
                policy.fire_clock(core, (x - lam).min(clock * (1.0 - f64::EPSILON)));
                continue;
            }
        }
        if core.total_in_system > core.guard {
            return true;
        }
    }
}

struct MsrPolicy<'m> {
    mp: &'m ModulatingProcess,
    state: usize,
    slots: Vec<Vec<Option<JobId>>>,
    backfill: Option<Vec<Vec<JobId>>>,
    pending: Option<usize>,
    preemptive: bool,
    timers: Vec<Vec<(usize, f64)>>,
    timer_rate: Vec<f64>,
    coupled: Vec<Vec<Option<usize>>>,
}

impl<'m> MsrPolicy<'m> {
    fn new(mp: &'m ModulatingProcess, backfill: bool, k: usize) -> Self {
        let n = mp.num_states();
        let mut timers = vec![Vec::new(); n];
        let mut coupled = vec![vec![None; k]; n];
        for t in mp.transitions() {
            match t.trigger {
                Trigger::Timer => timers[t.from].push((t.to, t.rate)),
                Trigger::Completion { job_type } => coupled[t.from][job_type] = Some(t.to),
            }
        }
        let timer_rate = timers.iter().map(|v| v.iter().map(|x| x.1).sum()).collect();
        let start = mp.working_states().next().map(|(i, _)| i).unwrap_or(0);
        let slots = mp.states()[start]
            .schedule
            .counts()
            .iter()
            .map(|&c| vec![None; c as usize])
            .collect();
        Self {
            mp,
            state: start,
            slots,
            backfill: backfill.then(|| vec![Vec::new(); k]),
            pending: None,
            preemptive: mp.mode == Mode::Pmsr,
            timers,
            timer_rate,
            coupled,
        }
    }

    fn setup(&self) -> Vec<usize> {
        self.mp.states()[self.state]
            .setup_counts
            .iter()
            .map(|&c| c as usize)
            .collect()
    }

    /// Running jobs per type (slots plus backfill) plus setup holdings.
    fn holding_counts(&self, setup: &[usize]) -> Vec<usize> {
        let mut c: Vec<usize> = self
            .slots
            .iter()
            .map(|s| s.iter().filter(|x| x.is_some()).count())
            .collect();
        if let Some(bf) = &self.backfill {
            for (ci, b) in c.iter_mut().zip(bf) {
                *ci += b.len();
            }
        }
        for (ci, s) in c.iter_mut().zip(setup) {
            *ci += s;
        }
        c
    }

    fn used(&self, core: &Core) -> Vec<f64> {
        core.footprint(&self.holding_counts(&self.setup()))
    }

    fn preempt_latest_backfill(&mut self, core: &mut Core) -> bool {
        let Some(bf) = &mut self.backfill else { return false };
        let mut best: Option<(usize, usize)> = None;
        for (i, list) in bf.iter().enumerate() {
            for (p, &id) in list.iter().enumerate() {
                let better = best.map_or(true, |(bi, bp)| {
                    let (a, b) = (&core.jobs[id], &core.jobs[bf[bi][bp]]);
                    a.started > b.started || (a.started == b.started && a.seq > b.seq)
                });
                if better {
                    best = Some((i, p));
                }
            }
        }
        match best {
            Some((i, p)) => {
                let id = bf[i].remove(p);
                core.preempt(id);
                true
            }
            None => false,
        }
    }

    fn dispatch(&mut self, core: &mut Core) {
        let k = self.slots.len();
        for i in 0..k {
            for p in 0..self.slots[i].len() {
                if self.slots[i][p].is_some() {
                    continue;
                }
                if let Some(bf) = &mut self.backfill {
                    if !bf[i].is_empty() {
                        let (pos, _) = bf[i]
                            .iter()
                            .enumerate()
                            .min_by_key(|(_, &id)| core.jobs[id].seq)
                            .expect("non-empty");
                        self.slots[i][p] = Some(bf[i].remove(pos));
                        continue;
                    }
                }
                if core.queues[i].is_empty() {
                    break;
                }
                loop {
                    let mut used = self.used(core);
                    for (u, d) in used.iter_mut().zip(core.w.demand(i)) {
                        *u += d;
                    }
                    if fits(&used, &core.cap) {
                        let id = core.pop_queue(i).expect("queued job");
                        self.slots[i][p] = Some(id);
                        core.start(id);
                        break;
                    }
                    if !(self.preemptive && self.preempt_latest_backfill(core)) {
                        break;
                    }
                }
            }
        }
        if self.backfill.is_some() && self.pending.is_none() {
            loop {
                let used = self.used(core);
                let Some(i) = core.first_fit_head(&used) else { break };
                let id = core.pop_queue(i).expect("queued job");
                core.start(id);
                self.backfill.as_mut().expect("backfill")[i].push(id);
            }
        }
        let used = self.used(core);
        core.check_capacity(&used);
    }

    fn transition(&mut self, core: &mut Core, target: usize) {
        if self.backfill.is_some() && !self.preemptive {
            let sched = self.mp.states()[target].schedule.counts();
            let setup: Vec<usize> = self.mp.states()[target]
                .setup_counts
                .iter()
                .map(|&c| c as usize)
                .collect();
            let mut counts = setup;
            for i in 0..self.slots.len() {
                let occ = self.slots[i].iter().filter(|x| x.is_some()).count();
                counts[i] += occ.min(sched[i] as usize) + self.backfill.as_ref().expect("backfill")[i].len();
            }
            if !fits(&core.footprint(&counts), &core.cap) {
                self.pending = Some(target);
                return;
            }
        }
        self.pending = None;
        self.state = target;
        let st = &self.mp.states()[target];
        core.switching = st.kind == StateKind::Switching;
        if self.preemptive {
            while self.preempt_latest_backfill(core) {}
        }
        for i in 0..self.slots.len() {
            let want = st.schedule.0[i] as usize;
            while self.slots[i].len() > want {
                if let Some(p) = self.slots[i].iter().rposition(Option::is_none) {
                    self.slots[i].remove(p);
                    continue;
                }
                let p = (0..self.slots[i].len())
                    .max_by(|&a, &b| {
                        let (ja, jb) = (
                            &core.jobs[self.slots[i][a].expect("occupied")],
                            &core.jobs[self.slots[i][b].expect("occupied")],
                        );
                        ja.started.total_cmp(&jb.started).then(ja.seq.cmp(&jb.seq))
                    })
                    .expect("non-empty");
                let id = self.slots[i].remove(p).expect("occupied");
                core.preempt(id);
            }
            self.slots[i].resize(want, None);
        }
        core.log("transition", None, Some(target));
        self.dispatch(core);
    }
}

impl Policy for MsrPolicy<'_> {
    fn clock_rate(&self, core: &Core) -> f64 {
        let empty: f64 = self
            .slots
            .iter()
            .zip(core.w.types())
            .map(|(s, t)| t.service_rate * s.iter().filter(|x| x.is_none()).count() as f64)
            .sum();
        let timer = if self.pending.is_some() {
            0.0
        } else {
            self.timer_rate[self.state]
        };
        empty + timer
    }

    fn fire_clock(&mut self, core: &mut Core, mut x: f64) {
        for i in 0..self.slots.len() {
            let empty = self.slots[i].iter().filter(|s| s.is_none()).count();
            let r = core.w.types()[i].service_rate * empty as f64;
            if x < r {
                if core.measuring() {
                    core.acc.unused[i] += 1;
                    core.acc.potential[i] += 1;
                }
                core.log("unused", Some(i), Some(self.state));
                if let Some(target) = self.coupled[self.state][i] {
                    let p = self.slots[i].iter().rposition(Option::is_none).expect("empty slot");
                    self.slots[i].remove(p);
                    self.transition(core, target);
                }
                return;
            }
            x -= r;
        }
        let timers = &self.timers[self.state];
        let mut target = timers.last().expect("timer").0;
        for &(to, rate) in timers {
            if x < rate {
                target = to;
                break;
            }
            x -= rate;
        }
        self.transition(core, target);
    }

    fn on_arrival(&mut self, core: &mut Core) {
        self.dispatch(core);
    }

    fn on_completion(&mut self, core: &mut Core, id: JobId) {
        let ty = core.jobs[id].ty;
        core.finish(id);
        if let Some(p) = self.slots[ty].iter().position(|s| *s == Some(id)) {
            if core.measuring() {
                core.acc.potential[ty] += 1;
            }
            if let Some(target) = self.coupled[self.state][ty] {
                self.slots[ty].remove(p);
                self.transition(core, target);
                return;
            }
            self.slots[ty][p] = None;
        } else if let Some(bf) = &mut self.backfill {
            let p = bf[ty].iter().position(|&j| j == id).expect("running job");
            bf[ty].remove(p);
            if let Some(target) = self.pending {
                self.transition(core, target);
                return;
            }
        }
        self.dispatch(core);
    }
}

struct MaxWeightPolicy {
    schedules: Vec<Schedule>,
    running: Vec<Vec<JobId>>,
}

impl MaxWeightPolicy {
    fn dispatch(&mut self, core: &mut Core) {
        let n = &core.in_system;
        let mut best = 0;
        let mut best_val = 0u64;
        for (j, s) in self.schedules.iter().enumerate() {
            let v: u64 = s.0.iter().zip(n).map(|(&u, &q)| u as u64 * q as u64).sum();
            if v > best_val {
                best = j;
                best_val = v;
            }
        }
        let target: Vec<usize> = self.schedules[best]
            .0
            .iter()
            .zip(n)
            .map(|(&u, &q)| (u as usize).min(q))
            .collect();
        for (i, &want) in target.iter().enumerate() {
            while self.running[i].len() > want {
                let p = (0..self.running[i].len())
                    .max_by(|&a, &b| {
                        let (ja, jb) = (&core.jobs[self.running[i][a]], &core.jobs[self.running[i][b]]);
                        ja.started.total_cmp(&jb.started).then(ja.seq.cmp(&jb.seq))
                    })
                    .expect("running job");
                let id = self.running[i].remove(p);
                core.preempt(id);
            }
        }
        for (i, &want) in target.iter().enumerate() {
            while self.running[i].len() < want {
                let id = core.pop_queue(i).expect("queued job");
                core.start(id);
                self.running[i].push(id);
            }
        }
        let counts: Vec<usize> = self.running.iter().map(Vec::len).collect();
        let used = core.footprint(&counts);
        core.check_capacity(&used);
    }
}

impl Policy for MaxWeightPolicy {
    fn clock_rate(&self, _: &Core) -> f64 {
        0.0
    }
    fn fire_clock(&mut self, _: &mut Core, _: f64) {}
    fn on_arrival(&mut self, core: &mut Core) {
        self.dispatch(core);
    }
    fn on_completion(&mut self, core: &mut Core, id: JobId) {
        let ty = core.jobs[id].ty;
        core.finish(id);
        let p = self.running[ty].iter().position(|&j| j == id).expect("running job");
        self.running[ty].remove(p);
        self.dispatch(core);
    }
}

struct FirstFitPolicy {
    running: Vec<Vec<JobId>>,
}

impl FirstFitPolicy {
    fn dispatch(&mut self, core: &mut Core) {
        loop {
            let counts: Vec<usize> = self.running.iter().map(Vec::len).collect();
            let used = core.footprint(&counts);
            let Some(i) = core.first_fit_head(&used) else {
                core.check_capacity(&used);
                return;
            };
            let id = core.pop_queue(i).expect("queued job");
            core.start(id);
            self.running[i].push(id);
        }
    }
}

impl Policy for FirstFitPolicy {
    fn clock_rate(&self, _: &Core) -> f64 {
        0.0
    }
    fn fire_clock(&mut self, _: &mut Core, _: f64) {}
    fn on_arrival(&mut self, core: &mut Core) {
        self.dispatch(core);
    }
    fn on_completion(&mut self, core: &mut Core, id: JobId) {
        let ty = core.jobs[id].ty;
        core.finish(id);
        let p = self.running[ty].iter().position(|&j| j == id).expect("running job");
        self.running[ty].remove(p);
        self.dispatch(core);
    }
}

fn check_inputs(w: &Workload, cfg: &SimConfig) -> Result<()> {
    cfg.validate()?;
    if let ArrivalSource::Trace(t) = &cfg.arrivals {
        if t.iter().any(|a| a.job_type >= w.num_types()) {
            return Err(invalid("trace refers to a job type outside the workload"));
        }
        if t.windows(2).any(|p| p[1].time < p[0].time) {
            return Err(invalid("trace arrivals must be sorted by time"));
        }
        if t.iter().any(|a| !(a.duration > 0.0) || !(a.time >= 0.0)) {
            return Err(invalid("trace arrivals need non-negative times and positive durations"));
        }
    }
    Ok(())
}

fn replicate<F>(cfg: &SimConfig, run: F) -> Vec<ReplicationStats>
where
    F: Fn(usize) -> ReplicationStats + Sync + Send,
{
    let reps: Vec<usize> = (0..cfg.replications).collect();
    par::map(cfg.execution, &reps, |&r| run(r))
}

/// Simulates an MSR policy, optionally with backfilling of leftover capacity.
pub fn simulate_msr(w: &Workload, mp: &ModulatingProcess, cfg: &SimConfig, backfill: bool) -> Result<SimReport> {
    check_inputs(w, cfg)?;
    mp.check_against(w)?;
    let runs = replicate(cfg, |r| {
        let mut core = Core::new(w, cfg, r);
        let mut policy = MsrPolicy::new(mp, backfill, w.num_types());
        core.switching = mp.states()[policy.state].kind == StateKind::Switching;
        let unstable = run_replication(&mut core, &mut policy);
        core.into_stats(unstable)
    });
    let name = format!("{}{}", mp.mode, if backfill { "+backfill" } else { "" });
    Ok(SimReport::from_runs(name, runs))
}

/// Preemptive MaxWeight over maximal schedules, weights = jobs in system.
pub fn simulate_maxweight(w: &Workload, cfg: &SimConfig) -> Result<SimReport> {
    check_inputs(w, cfg)?;
    let schedules = enumerate_maximal_schedules(w, DEFAULT_ENUMERATION_CAP)?;
    let runs = replicate(cfg, |r| {
        let mut core = Core::new(w, cfg, r);
        let mut policy = MaxWeightPolicy {
            schedules: schedules.clone(),
            running: vec![Vec::new(); w.num_types()],
        };
        let unstable = run_replication(&mut core, &mut policy);
        core.into_stats(unstable)
    });
    Ok(SimReport::from_runs("maxweight".into(), runs))
}

/// Non-preemptive First-Fit over the FCFS queue.
pub fn simulate_firstfit(w: &Workload, cfg: &SimConfig) -> Result<SimReport> {
    check_inputs(w, cfg)?;
    let runs = replicate(cfg, |r| {
        let mut core = Core::new(w, cfg, r);
        let mut policy = FirstFitPolicy {
            running: vec![Vec::new(); w.num_types()],
        };
        let unstable = run_replication(&mut core, &mut policy);
        core.into_stats(unstable)
    });
    Ok(SimReport::from_runs("firstfit".into(), runs))
}

/// Single-queue system whose type-`i` completion rate in state `s` is
/// `μᵢ·uᵢ(s)`, driven by the same modulating process. Also averages
/// `Δ(state)` over unused-service instants.
pub fn simulate_msr1(mp: &ModulatingProcess, i: usize, lambda: f64, mu: f64, cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    if i >= mp.num_types() {
        return Err(invalid(format!("type {i} out of range")));
    }
    if !(lambda >= 0.0) || !(mu > 0.0) {
        return Err(invalid("need lambda >= 0 and mu > 0"));
    }
    if !matches!(cfg.arrivals, ArrivalSource::Poisson) {
        return Err(invalid("MSR-1 simulation supports Poisson arrivals only"));
    }
    let delta = relative_completions(mp, i, mu).ok();
    let n = mp.num_states();
    let mut timers = vec![Vec::new(); n];
    let mut coupled = vec![None; n];
    for t in mp.transitions() {
        match t.trigger {
            Trigger::Completion { job_type } if job_type == i => coupled[t.from] = Some(t.to),
            _ => timers[t.from].push((t.to, t.rate)),
        }
    }
    let serve: Vec<f64> = mp.serving(i).iter().map(|u| mu * u).collect();
    let start = mp.working_states().next().map(|(s, _)| s).unwrap_or(0);
    let runs = replicate(cfg, |r| {
        let mut rng = cfg.rng(r);
        let mut now = 0.0f64;
        let mut state = start;
        let mut queue: VecDeque<f64> = VecDeque::new();
        let mut area = 0.0;
        let mut sw = 0.0;
        let (mut resp_sum, mut resp_n, mut unused, mut potential) = (0.0, 0u64, 0u64, 0u64);
        let (mut dsum, mut dn) = (0.0, 0u64);
        let mut unstable = false;
        loop {
            let timer: f64 = timers[state].iter().map(|x: &(usize, f64)| x.1).sum();
            let total = lambda + serve[state] + timer;
            let t = if total > 0.0 {
                let e: f64 = rng.sample(Exp1);
                now + e / total
            } else {
                f64::INFINITY
            };
            let end = t.min(cfg.horizon);
            if end > cfg.warmup {
                let dt = end - now.max(cfg.warmup);
                area += queue.len() as f64 * dt;
                if mp.states()[state].kind == StateKind::Switching {
                    sw += dt;
                }
            }
            if t > cfg.horizon {
                now = cfg.horizon;
                break;
            }
            now = t;
            let measuring = now >= cfg.warmup;
            let mut x = rng.gen::<f64>() * total;
            if x < lambda {
                queue.push_back(now);
                if queue.len() > cfg.guard {
                    unstable = true;
                    break;
                }
                continue;
            }
            x -= lambda;
            if x < serve[state] {
                match queue.pop_front() {
                    Some(arr) => {
                        if measuring {
                            resp_sum += now - arr;
                            resp_n += 1;
                            potential += 1;
                        }
                    }
                    None => {
                        if measuring {
                            unused += 1;
                            potential += 1;
                            if let Some(d) = &delta {
                                dsum += d[state];
                                dn += 1;
                            }
                        }
                    }
                }
                if let Some(to) = coupled[state] {
                    state = to;
                }
                continue;
            }
            x -= serve[state];
            let mut target = timers[state].last().expect("timer").0;
            for &(to, rate) in &timers[state] {
                if x < rate {
                    target = to;
                    break;
                }
                x -= rate;
            }
            state = target;
        }
        let span = (now - cfg.warmup).max(0.0);
        ReplicationStats {
            queue_length: vec![if span > 0.0 { area / span } else { queue.len() as f64 }],
            response_time: vec![(resp_n > 0).then(|| resp_sum / resp_n as f64)],
            overall_response_time: (resp_n > 0).then(|| resp_sum / resp_n as f64),
            completions: vec![resp_n],
            throughput: if span > 0.0 { resp_n as f64 / span } else { 0.0 },
            unused: vec![unused],
            potential: vec![potential],
            switching_fraction: if span > 0.0 { sw / span } else { 0.0 },
            preemptions: 0,
            capacity_violations: 0,
            unstable,
            end_time: now,
            unused_delta_mean: (dn > 0).then(|| dsum / dn as f64),
            events: Vec::new(),
        }
    });
    Ok(SimReport::from_runs(format!("{}-1", mp.mode), runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::analyze_type;
    use crate::model::fixtures::{example_workload, single};
    use crate::model::{JobType, ResourceVector};
    use crate::numerics::Matrix;
    use crate::policy::{build, PolicySpec};

    fn constant(k: u32) -> ModulatingProcess {
        ModulatingProcess::from_generator(vec![Schedule(vec![k])], &Matrix::zeros(1, 1)).unwrap()
    }

    fn cfg(horizon: f64, reps: usize, seed: u64) -> SimConfig {
        SimConfig::new(horizon, horizon * 0.05, seed, reps)
    }

    fn within(e: &Estimate, target: f64, k: f64) -> bool {
        (e.mean - target).abs() <= k * e.hw()
    }

    fn example_spec(mode: Mode, alpha: f64) -> PolicySpec {
        PolicySpec::new(
            mode,
            vec![Schedule(vec![0, 0, 2]), Schedule(vec![1, 4, 0])],
            vec![0.5, 0.5],
            alpha,
        )
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(10.0, 10.0, 1, 1).validate().is_err());
        assert!(SimConfig::new(10.0, 1.0, 1, 0).validate().is_err());
        assert!(SimConfig::new(10.0, 1.0, 1, 1).validate().is_ok());
    }

    #[test]
    fn estimate_t_interval() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0]);
        assert_eq!(e.mean, 2.0);
        // t_{0.975, 2} = 4.302653
        assert!((e.half_width.unwrap() - 4.302653 / 3f64.sqrt()).abs() < 1e-5);
        assert!(Estimate::from_samples(&[1.0]).half_width.is_none());
    }

    #[test]
    fn mm1_constant_schedule() {
        let w = single(1.0, 1.0, 0.5, 1.0);
        let r = simulate_msr(&w, &constant(1), &cfg(20_000.0, 5, 3), false).unwrap();
        assert!(within(&r.queue_length[0], 1.0, 3.0), "{:?}", r.queue_length);
        assert!(within(r.mean_response_time.as_ref().unwrap(), 2.0, 3.0));
        assert_eq!(r.capacity_violations, 0);
    }

    #[test]
    fn msr1_mm1() {
        let r = simulate_msr1(&constant(1), 0, 0.5, 1.0, &cfg(20_000.0, 5, 4)).unwrap();
        assert!(within(&r.queue_length[0], 1.0, 3.0), "{:?}", r.queue_length);
    }

    #[test]
    fn firstfit_single_type_is_mmk() {
        // M/M/3 at rho = 0.7: E[N] from the birth-death chain.
        let (lam, mu, k) = (2.1, 1.0, 3u32);
        let w = single(1.0, k as f64, lam, mu);
        let mut p = vec![1.0f64];
        for n in 1..2000u32 {
            let v = p[p.len() - 1] * lam / (mu * n.min(k) as f64);
            p.push(v);
        }
        let z: f64 = p.iter().sum();
        let exact: f64 = p.iter().enumerate().map(|(n, x)| n as f64 * x).sum::<f64>() / z;
        let r = simulate_firstfit(&w, &cfg(20_000.0, 5, 5)).unwrap();
        assert!(
            within(&r.queue_length[0], exact, 3.0),
            "{:?} vs {exact}",
            r.queue_length
        );
        let r = simulate_maxweight(&w, &cfg(20_000.0, 5, 5)).unwrap();
        assert!(
            within(&r.queue_length[0], exact, 3.0),
            "{:?} vs {exact}",
            r.queue_length
        );
    }

    #[test]
    fn determinism_and_parallel_equivalence() {
        let w = example_workload(0.8);
        let mp = build(&example_spec(Mode::Nmsr, 0.02), &w).unwrap();
        let mut c = cfg(2_000.0, 3, 11);
        let a = simulate_msr(&w, &mp, &c, true).unwrap();
        c.execution = Execution::Sequential;
        let b = simulate_msr(&w, &mp, &c, true).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        c.seed = 12;
        let d = simulate_msr(&w, &mp, &c, true).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&d).unwrap());
    }

    #[test]
    fn nmsr_never_preempts_and_stays_feasible() {
        let w = example_workload(0.9);
        for backfill in [false, true] {
            let mp = build(&example_spec(Mode::Nmsr, 0.01), &w).unwrap();
            let r = simulate_msr(&w, &mp, &cfg(5_000.0, 2, 8), backfill).unwrap();
            assert_eq!(r.preemptions, 0);
            assert_eq!(r.capacity_violations, 0);
            assert!(r.switching_fraction > 0.0);
        }
        for mode in [Mode::Pmsr, Mode::Smsr] {
            let mut spec = example_spec(mode, 0.5);
            spec.gamma = Some(5.0);
            let mp = build(&spec, &w).unwrap();
            for backfill in [false, true] {
                let r = simulate_msr(&w, &mp, &cfg(5_000.0, 2, 8), backfill).unwrap();
                assert_eq!(r.capacity_violations, 0, "{mode} {backfill}");
            }
        }
    }

    #[test]
    fn potential_completion_rate_matches_schedule() {
        // Potential completions accrue at μᵢ·E[uᵢ] regardless of occupancy.
        let w = example_workload(0.5);
        let mp = build(&example_spec(Mode::Pmsr, 2.0), &w).unwrap();
        let c = SimConfig::new(40_000.0, 0.0, 21, 1);
        let r = simulate_msr(&w, &mp, &c, false).unwrap();
        let run = &r.runs[0];
        for (i, expect) in [0.5, 2.0, 1.0].iter().enumerate() {
            let rate = run.potential[i] as f64 / 40_000.0;
            let sd = (expect / 40_000.0f64).sqrt() * 10.0;
            assert!((rate - expect).abs() < 4.0 * sd, "type {i}: {rate}");
        }
    }

    #[test]
    fn instability_guard_trips() {
        let w = single(1.0, 1.0, 2.0, 1.0);
        let mut c = cfg(10_000.0, 1, 1);
        c.guard = 500;
        let r = simulate_firstfit(&w, &c).unwrap();
        assert!(r.unstable);
        assert!(r.runs[0].end_time < 10_000.0);
    }

    #[test]
    fn maxweight_symmetric_tie_is_lexicographic() {
        let w = Workload::new(
            ResourceVector::new(vec![2.0]).unwrap(),
            vec![
                JobType::new("a", vec![2.0], 1.0, 1.0).unwrap(),
                JobType::new("b", vec![2.0], 1.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        let mut c = SimConfig::new(50.0, 0.0, 2, 1);
        c.log_events = true;
        let r = simulate_maxweight(&w, &c).unwrap();
        assert!(!r.runs[0].events.is_empty());
        // Maximal schedules are (0,1) < (1,0); with one job of each type the
        // lexicographically first one serves type b.
        let mut p = MaxWeightPolicy {
            schedules: enumerate_maximal_schedules(&w, 100).unwrap(),
            running: vec![Vec::new(); 2],
        };
        let mut core = Core::new(&w, &c, 0);
        core.arrive(0, 1.0);
        core.arrive(1, 1.0);
        p.dispatch(&mut core);
        assert_eq!((p.running[0].len(), p.running[1].len()), (0, 1));
    }

    #[test]
    fn trace_replay_is_deterministic_in_arrivals() {
        let w = single(1.0, 1.0, 1.0, 1.0);
        let arrivals: Vec<TraceArrival> = (0..10)
            .map(|j| TraceArrival {
                time: j as f64 * 2.0,
                job_type: 0,
                duration: 1.0,
            })
            .collect();
        let mut c = SimConfig::new(100.0, 0.0, 1, 1);
        c.arrivals = ArrivalSource::Trace(arrivals.into());
        let r = simulate_firstfit(&w, &c).unwrap();
        assert_eq!(r.completions, vec![10]);
        assert!((r.mean_response_time.unwrap().mean - 1.0).abs() < 1e-12);
        assert!((r.queue_length[0].mean - 0.1).abs() < 1e-12);
    }

    #[test]
    fn msr1_matches_unused_service_identity() {
        // E[Q] = (ρ + E[Δ(ν)])/(1 − ρ) − E_U[Δ] for the MSR-1 system.
        let g = Matrix::from_rows(vec![vec![-0.3, 0.3], vec![0.7, -0.7]]).unwrap();
        let mp = ModulatingProcess::from_generator(vec![Schedule(vec![3]), Schedule(vec![0])], &g).unwrap();
        let (lam, mu) = (1.4, 1.0);
        let w = single(1.0, 3.0, lam, mu);
        let t = analyze_type(&mp, &w, 0).unwrap();
        let primary = (t.rho + t.e_delta_nu) / (1.0 - t.rho);
        let r = simulate_msr1(&mp, 0, lam, mu, &cfg(100_000.0, 8, 31)).unwrap();
        let eu = r.unused_delta.unwrap();
        let predicted = primary - eu.mean;
        let q = &r.queue_length[0];
        let tol = 3.0 * (q.hw().powi(2) + eu.hw().powi(2)).sqrt();
        assert!((q.mean - predicted).abs() <= tol, "{} vs {predicted} ± {tol}", q.mean);
    }
}
