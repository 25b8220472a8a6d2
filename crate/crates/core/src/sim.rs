//! Seeded discrete-event simulator for dynamic flexible job shops.
//!
//! Jobs arrive over time via a Poisson process; each operation may run on any
//! of several eligible machines with machine-dependent processing times and
//! transport delays between machines (plus entry/exit points). Two decision
//! points drive the schedule: *routing* (when an operation becomes ready,
//! which eligible machine receives it) and *sequencing* (when a machine is
//! idle, which queued operation starts next). Both are priority rules
//! evaluated over a [`FeatureVector`]; lower value wins, ties break on the
//! lowest (job, operation, machine) index.
//!
//! Instances are fully determined by their generation seed, and a simulation
//! run is a pure function of (instance, rules), so results replay bit for bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ExprTree, FeatureVector, Heuristic};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("failed to parse scenario config: {0}")]
    Parse(String),
}

/// Scheduling objective; all three are minimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Maximum flowtime `max(c_i - r_i)`.
    Fmax,
    /// Mean flowtime.
    Fmean,
    /// Mean tardiness `mean(max(0, c_i - d_i))`.
    Tmean,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Fmax => "Fmax",
            Objective::Fmean => "Fmean",
            Objective::Tmean => "Tmean",
        }
    }

    pub fn from_name(s: &str) -> Option<Objective> {
        match s {
            "Fmax" => Some(Objective::Fmax),
            "Fmean" => Some(Objective::Fmean),
            "Tmean" => Some(Objective::Tmean),
            _ => None,
        }
    }
}

/// One scheduling task: an objective under a shop configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub objective: Objective,
    pub util_level: f64,
    pub mach_num: usize,
}

impl TaskSpec {
    pub fn new(objective: Objective, util_level: f64, mach_num: usize) -> TaskSpec {
        TaskSpec {
            objective,
            util_level,
            mach_num,
        }
    }

    /// Task naming convention, e.g. `<Fmean-0.85-8>`.
    pub fn id(&self) -> String {
        format!("<{}-{}-{}>", self.objective.name(), self.util_level, self.mach_num)
    }
}

/// The three stock scenarios: one objective each, over utilization levels
/// 0.75/0.85/0.95 paired with 6/8/10 machines.
pub fn stock_scenario(index: usize) -> Option<Vec<TaskSpec>> {
    let objective = match index {
        1 => Objective::Fmax,
        2 => Objective::Fmean,
        3 => Objective::Tmean,
        _ => return None,
    };
    Some(
        [(0.75, 6), (0.85, 8), (0.95, 10)]
            .iter()
            .map(|&(u, m)| TaskSpec::new(objective, u, m))
            .collect(),
    )
}

/// Generation parameters for one simulated shop instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub task: TaskSpec,
    pub num_jobs: usize,
    /// Inclusive range of operations per job.
    pub ops_per_job: (usize, usize),
    pub workload_range: (f64, f64),
    pub speed_range: (f64, f64),
    /// Inclusive integer range of transport times.
    pub transport_range: (u32, u32),
    pub due_date_factor: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> ScenarioConfig {
        ScenarioConfig {
            task: TaskSpec::new(Objective::Fmean, 0.85, 8),
            num_jobs: 124,
            ops_per_job: (2, 10),
            workload_range: (100.0, 1000.0),
            speed_range: (10.0, 15.0),
            transport_range: (7, 100),
            due_date_factor: 1.5,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn for_task(task: TaskSpec) -> ScenarioConfig {
        ScenarioConfig {
            task,
            ..ScenarioConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig, SimError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| SimError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let text = toml::to_string_pretty(self).map_err(|e| SimError::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Poisson arrival rate that realizes the task's utilization level:
/// `lambda = u * M / (E[ops per job] * E[processing time per op])`, where the
/// expected processing time is `E[workload] * E[1/speed]` and
/// `E[1/speed] = ln(hi/lo) / (hi - lo)` for uniform speeds.
pub fn arrival_rate(cfg: &ScenarioConfig) -> Result<f64, SimError> {
    if cfg.task.util_level <= 0.0 {
        return Err(SimError::InvalidConfig(format!(
            "utilization level must be positive, got {}",
            cfg.task.util_level
        )));
    }
    let mean_ops = (cfg.ops_per_job.0 + cfg.ops_per_job.1) as f64 / 2.0;
    let mean_workload = (cfg.workload_range.0 + cfg.workload_range.1) / 2.0;
    let (lo, hi) = cfg.speed_range;
    let mean_inv_speed = (hi / lo).ln() / (hi - lo);
    Ok(cfg.task.util_level * cfg.task.mach_num as f64 / (mean_ops * mean_workload * mean_inv_speed))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Machine {
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Operation {
    pub workload: f64,
    /// Nonempty, sorted machine indices.
    pub eligible: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Job {
    pub release: f64,
    pub due_date: f64,
    /// Stored for completeness; no objective consumes it.
    pub weight: f64,
    pub ops: Vec<Operation>,
}

/// A concrete shop instance. `transport` is a symmetric
/// `(mach_num + 2) x (mach_num + 2)` matrix with zero diagonal; the two extra
/// indices are the entry and exit points.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Instance {
    pub task: TaskSpec,
    pub machines: Vec<Machine>,
    pub transport: Vec<Vec<f64>>,
    pub jobs: Vec<Job>,
}

impl Instance {
    pub fn entry(&self) -> usize {
        self.machines.len()
    }

    pub fn exit(&self) -> usize {
        self.machines.len() + 1
    }

    /// Processing time of `(job, op)` on `machine`.
    pub fn processing_time(&self, job: usize, op: usize, machine: usize) -> f64 {
        self.jobs[job].ops[op].workload / self.machines[machine].speed
    }

    /// Median processing time over the operation's eligible machines.
    pub fn median_processing_time(&self, job: usize, op: usize) -> f64 {
        let o = &self.jobs[job].ops[op];
        let mut pts: Vec<f64> = o
            .eligible
            .iter()
            .map(|&m| o.workload / self.machines[m].speed)
            .collect();
        pts.sort_by(f64::total_cmp);
        let n = pts.len();
        if n % 2 == 1 {
            pts[n / 2]
        } else {
            (pts[n / 2 - 1] + pts[n / 2]) / 2.0
        }
    }
}

/// Deterministically generates an instance from a scenario config and a seed.
///
/// Draw order is fixed: machine speeds, transport matrix (upper triangle),
/// then per job its inter-arrival gap, operation count, and per operation the
/// eligible set followed by the workload.
pub fn generate_instance(cfg: &ScenarioConfig, seed: u64) -> Result<Instance, SimError> {
    let lambda = arrival_rate(cfg)?;
    if cfg.num_jobs == 0 {
        return Err(SimError::InvalidConfig("num_jobs must be at least 1".into()));
    }
    if cfg.ops_per_job.0 > cfg.ops_per_job.1 || cfg.ops_per_job.0 == 0 {
        return Err(SimError::InvalidConfig("bad ops_per_job range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.task.mach_num;

    let machines: Vec<Machine> = (0..m)
        .map(|_| Machine {
            speed: rng.random_range(cfg.speed_range.0..cfg.speed_range.1),
        })
        .collect();

    let side = m + 2;
    let mut transport = vec![vec![0.0; side]; side];
    for i in 0..side {
        for j in i + 1..side {
            let t = rng.random_range(cfg.transport_range.0..=cfg.transport_range.1) as f64;
            transport[i][j] = t;
            transport[j][i] = t;
        }
    }

    let mut jobs = Vec::with_capacity(cfg.num_jobs);
    let mut clock = 0.0;
    for _ in 0..cfg.num_jobs {
        let u: f64 = rng.random();
        clock += -(1.0 - u).ln() / lambda;
        let release = clock;

        let op_count = rng.random_range(cfg.ops_per_job.0..=cfg.ops_per_job.1);
        let mut ops = Vec::with_capacity(op_count);
        for _ in 0..op_count {
            let k = rng.random_range(1..=m);
            let mut eligible = rand::seq::index::sample(&mut rng, m, k).into_vec();
            eligible.sort_unstable();
            let workload = rng.random_range(cfg.workload_range.0..cfg.workload_range.1);
            ops.push(Operation { workload, eligible });
        }

        jobs.push(Job {
            release,
            due_date: 0.0,
            weight: 1.0,
            ops,
        });
    }

    let mut inst = Instance {
        task: cfg.task.clone(),
        machines,
        transport,
        jobs,
    };
    for j in 0..inst.jobs.len() {
        let total: f64 = (0..inst.jobs[j].ops.len())
            .map(|o| inst.median_processing_time(j, o))
            .sum();
        inst.jobs[j].due_date = inst.jobs[j].release + cfg.due_date_factor * total;
    }
    Ok(inst)
}

/// Sequencing rule: a priority tree or a handcrafted selector.
#[derive(Clone, Copy, Debug)]
pub enum SeqRule<'a> {
    Tree(&'a ExprTree),
    /// Shortest processing time: minimize `PT`.
    Spt,
    /// Longest processing time: maximize `PT`.
    Lpt,
    /// Earliest due date: minimize the job's due date.
    Edd,
    /// First in, first out: minimize the queue-join time.
    Fifo,
}

/// Routing rule: a priority tree or a handcrafted selector.
#[derive(Clone, Copy, Debug)]
pub enum RouteRule<'a> {
    Tree(&'a ExprTree),
    /// Fewest operations in queue.
    Niq,
    /// Least work in queue.
    Wiq,
}

impl std::fmt::Display for SeqRule<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeqRule::Tree(_) => write!(f, "tree"),
            SeqRule::Spt => write!(f, "SPT"),
            SeqRule::Lpt => write!(f, "LPT"),
            SeqRule::Edd => write!(f, "EDD"),
            SeqRule::Fifo => write!(f, "FIFO"),
        }
    }
}

impl std::fmt::Display for RouteRule<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RouteRule::Tree(_) => write!(f, "tree"),
            RouteRule::Niq => write!(f, "NIQ"),
            RouteRule::Wiq => write!(f, "WIQ"),
        }
    }
}

/// An operation waiting in a machine queue. `ready` is the queue-join time
/// (routing decision time plus transport).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueuedOp {
    pub job: usize,
    pub op: usize,
    pub ready: f64,
}

/// Dispatch-relevant view of one machine.
#[derive(Clone, Copy, Debug)]
pub struct MachineSnapshot<'a> {
    pub queue: &'a [QueuedOp],
    /// Time the machine last became idle; `None` while it is busy.
    pub idle_since: Option<f64>,
}

/// Per-instance precomputation: median eligible processing time of every
/// operation and the per-operation suffix sums (work remaining).
pub struct InstanceStats {
    medians: Vec<Vec<f64>>,
    work_remaining: Vec<Vec<f64>>,
}

impl InstanceStats {
    pub fn new(inst: &Instance) -> InstanceStats {
        let medians: Vec<Vec<f64>> = (0..inst.jobs.len())
            .map(|j| {
                (0..inst.jobs[j].ops.len())
                    .map(|o| inst.median_processing_time(j, o))
                    .collect()
            })
            .collect();
        let work_remaining = medians
            .iter()
            .map(|ms: &Vec<f64>| {
                let mut suffix = vec![0.0; ms.len()];
                let mut acc = 0.0;
                for (i, &v) in ms.iter().enumerate().rev() {
                    acc += v;
                    suffix[i] = acc;
                }
                suffix
            })
            .collect();
        InstanceStats {
            medians,
            work_remaining,
        }
    }

    pub fn median(&self, job: usize, op: usize) -> f64 {
        self.medians[job][op]
    }

    pub fn work_remaining(&self, job: usize, op: usize) -> f64 {
        self.work_remaining[job][op]
    }
}

/// Samples the shop state into the ten rule terminals for one candidate
/// `(job, op, machine)` at time `now`.
///
/// `op_ready` is the candidate's queue-join time when it is already queued
/// (sequencing); at routing decisions the operation becomes ready at `now`
/// and its waiting time is zero.
pub fn compute_features(
    inst: &Instance,
    stats: &InstanceStats,
    snap: &MachineSnapshot,
    job: usize,
    op: usize,
    machine: usize,
    now: f64,
    op_ready: Option<f64>,
) -> FeatureVector {
    let j = &inst.jobs[job];
    let wiq: f64 = snap
        .queue
        .iter()
        .map(|q| inst.processing_time(q.job, q.op, machine))
        .sum();
    let wkr = stats.work_remaining(job, op);
    FeatureVector {
        niq: snap.queue.len() as f64,
        wiq,
        mwt: snap.idle_since.map_or(0.0, |t| now - t),
        pt: inst.processing_time(job, op, machine),
        npt: if op + 1 < j.ops.len() {
            stats.median(job, op + 1)
        } else {
            0.0
        },
        owt: op_ready.map_or(0.0, |r| now - r),
        wkr,
        nor: (j.ops.len() - op) as f64,
        slack: j.due_date - now - wkr,
        tis: now - j.release,
    }
}

/// Picks the candidate with the smallest `(priority, tie_key)` pair. Priority
/// comparison is strict; equal priorities fall back to the tie key, so adding
/// a duplicate candidate never changes the chosen original's priority value.
pub fn select_min<T: Ord + Copy>(candidates: impl IntoIterator<Item = (f64, T)>) -> Option<(f64, T)> {
    let mut best: Option<(f64, T)> = None;
    for (value, key) in candidates {
        let better = match best {
            None => true,
            Some((bv, bk)) => match value.total_cmp(&bv) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => key < bk,
            },
        };
        if better {
            best = Some((value, key));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JobOutcome {
    pub release: f64,
    pub due_date: f64,
    pub completion: f64,
}

impl JobOutcome {
    pub fn flowtime(&self) -> f64 {
        self.completion - self.release
    }

    pub fn tardiness(&self) -> f64 {
        (self.completion - self.due_date).max(0.0)
    }
}

/// One executed operation, for audit and replay.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpRecord {
    pub job: usize,
    pub op: usize,
    pub machine: usize,
    /// Time of the routing decision.
    pub routed_at: f64,
    /// Queue-join time (routing decision plus transport).
    pub queue_join: f64,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimResult {
    pub jobs: Vec<JobOutcome>,
    pub objective_kind: Objective,
    pub objective_value: f64,
    pub ops: Vec<OpRecord>,
}

/// Objective aggregation over completed jobs.
pub fn objective(jobs: &[JobOutcome], kind: Objective) -> f64 {
    match kind {
        Objective::Fmax => jobs.iter().map(JobOutcome::flowtime).fold(f64::MIN, f64::max),
        Objective::Fmean => jobs.iter().map(JobOutcome::flowtime).sum::<f64>() / jobs.len() as f64,
        Objective::Tmean => jobs.iter().map(JobOutcome::tardiness).sum::<f64>() / jobs.len() as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Event {
    /// Routing decision for `(job, op)`; `from` indexes the transport matrix.
    Route { job: usize, op: usize, from: usize },
    /// `(job, op)` joins `machine`'s queue.
    Arrive { job: usize, op: usize, machine: usize },
    /// `machine` finishes `(job, op)`.
    Complete { job: usize, op: usize, machine: usize },
}

struct EventEntry {
    time: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for EventEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for EventEntry {}
impl PartialOrd for EventEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for EventEntry {
    // Reversed so the BinaryHeap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct MachineState {
    queue: Vec<QueuedOp>,
    idle_since: Option<f64>,
    busy: bool,
}

/// Runs the heuristic pair on an instance.
pub fn run_simulation(inst: &Instance, h: &Heuristic) -> SimResult {
    run_simulation_with(inst, SeqRule::Tree(&h.sequencing), RouteRule::Tree(&h.routing))
}

/// Event-driven non-delay execution with explicit sequencing/routing rules.
pub fn run_simulation_with(inst: &Instance, seq_rule: SeqRule, route_rule: RouteRule) -> SimResult {
    let stats = InstanceStats::new(inst);
    let mut machines: Vec<MachineState> = (0..inst.machines.len())
        .map(|_| MachineState {
            queue: Vec::new(),
            idle_since: Some(0.0),
            busy: false,
        })
        .collect();
    let mut completions: Vec<Option<f64>> = vec![None; inst.jobs.len()];
    let mut ops_log: Vec<OpRecord> = Vec::new();
    let mut routed_at: Vec<Vec<f64>> = inst.jobs.iter().map(|j| vec![0.0; j.ops.len()]).collect();

    let mut heap: BinaryHeap<EventEntry> = BinaryHeap::new();
    let mut seq_counter = 0u64;

    for (j, job) in inst.jobs.iter().enumerate() {
        heap.push(EventEntry {
            time: job.release,
            seq: seq_counter,
            event: Event::Route {
                job: j,
                op: 0,
                from: inst.entry(),
            },
        });
        seq_counter += 1;
    }

    while let Some(EventEntry { time: now, event, .. }) = heap.pop() {
        match event {
            Event::Route { job, op, from } => {
                routed_at[job][op] = now;
                let eligible = &inst.jobs[job].ops[op].eligible;
                let chosen = select_min(eligible.iter().map(|&m| {
                    let snap = MachineSnapshot {
                        queue: &machines[m].queue,
                        idle_since: machines[m].idle_since,
                    };
                    let value = match route_rule {
                        RouteRule::Tree(t) => {
                            t.evaluate(&compute_features(inst, &stats, &snap, job, op, m, now, None))
                        }
                        RouteRule::Niq => snap.queue.len() as f64,
                        RouteRule::Wiq => snap
                            .queue
                            .iter()
                            .map(|q| inst.processing_time(q.job, q.op, m))
                            .sum(),
                    };
                    (value, m)
                }))
                .expect("eligible set is nonempty")
                .1;
                let delay = inst.transport[from][chosen];
                heap.push(EventEntry {
                    time: now + delay,
                    seq: seq_counter,
                    event: Event::Arrive {
                        job,
                        op,
                        machine: chosen,
                    },
                });
                seq_counter += 1;
            }
            Event::Arrive { job, op, machine } => {
                machines[machine].queue.push(QueuedOp {
                    job,
                    op,
                    ready: now,
                });
                try_dispatch(
                    inst, &stats, &mut machines, machine, now, seq_rule, &mut heap, &mut seq_counter,
                    &routed_at, &mut ops_log,
                );
            }
            Event::Complete { job, op, machine } => {
                machines[machine].busy = false;
                machines[machine].idle_since = Some(now);
                if op + 1 < inst.jobs[job].ops.len() {
                    heap.push(EventEntry {
                        time: now,
                        seq: seq_counter,
                        event: Event::Route {
                            job,
                            op: op + 1,
                            from: machine,
                        },
                    });
                    seq_counter += 1;
                } else {
                    completions[job] = Some(now + inst.transport[machine][inst.exit()]);
                }
                try_dispatch(
                    inst, &stats, &mut machines, machine, now, seq_rule, &mut heap, &mut seq_counter,
                    &routed_at, &mut ops_log,
                );
            }
        }
    }

    let jobs: Vec<JobOutcome> = inst
        .jobs
        .iter()
        .zip(&completions)
        .map(|(j, c)| JobOutcome {
            release: j.release,
            due_date: j.due_date,
            completion: c.expect("all jobs complete in a terminating simulation"),
        })
        .collect();
    ops_log.sort_by(|a, b| (a.job, a.op).cmp(&(b.job, b.op)));
    let objective_value = objective(&jobs, inst.task.objective);
    SimResult {
        jobs,
        objective_kind: inst.task.objective,
        objective_value,
        ops: ops_log,
    }
}

#[allow(clippy::too_many_arguments)]
fn try_dispatch(
    inst: &Instance,
    stats: &InstanceStats,
    machines: &mut [MachineState],
    m: usize,
    now: f64,
    seq_rule: SeqRule,
    heap: &mut BinaryHeap<EventEntry>,
    seq_counter: &mut u64,
    routed_at: &[Vec<f64>],
    ops_log: &mut Vec<OpRecord>,
) {
    if machines[m].busy || machines[m].queue.is_empty() {
        return;
    }
    let snap = MachineSnapshot {
        queue: &machines[m].queue,
        idle_since: machines[m].idle_since,
    };
    let chosen_key = select_min(machines[m].queue.iter().map(|q| {
        let value = match seq_rule {
            SeqRule::Tree(t) => t.evaluate(&compute_features(
                inst,
                stats,
                &snap,
                q.job,
                q.op,
                m,
                now,
                Some(q.ready),
            )),
            SeqRule::Spt => inst.processing_time(q.job, q.op, m),
            SeqRule::Lpt => -inst.processing_time(q.job, q.op, m),
            SeqRule::Edd => inst.jobs[q.job].due_date,
            SeqRule::Fifo => q.ready,
        };
        (value, (q.job, q.op))
    }))
    .expect("queue is nonempty")
    .1;

    let idx = machines[m]
        .queue
        .iter()
        .position(|q| (q.job, q.op) == chosen_key)
        .expect("chosen op is in the queue");
    let q = machines[m].queue.swap_remove(idx);
    machines[m].busy = true;
    machines[m].idle_since = None;
    let pt = inst.processing_time(q.job, q.op, m);
    ops_log.push(OpRecord {
        job: q.job,
        op: q.op,
        machine: m,
        routed_at: routed_at[q.job][q.op],
        queue_join: q.ready,
        start: now,
        end: now + pt,
    });
    heap.push(EventEntry {
        time: now + pt,
        seq: *seq_counter,
        event: Event::Complete {
            job: q.job,
            op: q.op,
            machine: m,
        },
    });
    *seq_counter += 1;
}

/// Post-hoc constraint audit. Returns human-readable violations; an empty
/// vector means the schedule satisfies machine capacity, precedence (with
/// transport), non-preemption, eligibility, and single assignment, and that
/// recorded completions are consistent.
pub fn audit(inst: &Instance, result: &SimResult) -> Vec<String> {
    const EPS: f64 = 1e-6;
    let mut violations = Vec::new();

    let mut seen = std::collections::HashSet::new();
    for r in &result.ops {
        if !seen.insert((r.job, r.op)) {
            violations.push(format!("job {} op {} executed more than once", r.job, r.op));
        }
        if !inst.jobs[r.job].ops[r.op].eligible.contains(&r.machine) {
            violations.push(format!(
                "job {} op {} ran on ineligible machine {}",
                r.job, r.op, r.machine
            ));
        }
        let pt = inst.processing_time(r.job, r.op, r.machine);
        if (r.end - r.start - pt).abs() > EPS {
            violations.push(format!(
                "job {} op {} duration {} differs from processing time {}",
                r.job,
                r.op,
                r.end - r.start,
                pt
            ));
        }
        if r.start + EPS < r.queue_join {
            violations.push(format!("job {} op {} started before joining its queue", r.job, r.op));
        }
    }

    for (j, job) in inst.jobs.iter().enumerate() {
        let records: Vec<&OpRecord> = result.ops.iter().filter(|r| r.job == j).collect();
        if records.len() != job.ops.len() {
            violations.push(format!(
                "job {j} executed {} of {} operations",
                records.len(),
                job.ops.len()
            ));
            continue;
        }
        // `result.ops` is sorted by (job, op), so records are in op order.
        for (o, r) in records.iter().enumerate() {
            let earliest = if o == 0 {
                job.release + inst.transport[inst.entry()][r.machine]
            } else {
                records[o - 1].end + inst.transport[records[o - 1].machine][r.machine]
            };
            if r.start + EPS < earliest {
                violations.push(format!(
                    "job {j} op {o} started at {} before earliest feasible {}",
                    r.start, earliest
                ));
            }
        }
        let last = records.last().unwrap();
        let expected = last.end + inst.transport[last.machine][inst.exit()];
        if (result.jobs[j].completion - expected).abs() > EPS {
            violations.push(format!(
                "job {j} completion {} inconsistent with last op end {}",
                result.jobs[j].completion, expected
            ));
        }
        if result.jobs[j].completion + EPS < job.release {
            violations.push(format!("job {j} completed before its release"));
        }
    }

    for m in 0..inst.machines.len() {
        let mut records: Vec<&OpRecord> = result.ops.iter().filter(|r| r.machine == m).collect();
        records.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in records.windows(2) {
            if w[1].start + EPS < w[0].end {
                violations.push(format!(
                    "machine {m} overlap: ({}, {}) and ({}, {})",
                    w[0].start, w[0].end, w[1].start, w[1].end
                ));
            }
        }
    }

    violations
}

/// Writes the per-job result table plus a trailing summary row.
pub fn write_result_csv<W: Write>(result: &SimResult, mut out: W) -> std::io::Result<()> {
    writeln!(out, "job_id,release,due,completion,flowtime,tardiness")?;
    for (j, job) in result.jobs.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            j,
            job.release,
            job.due_date,
            job.completion,
            job.flowtime(),
            job.tardiness()
        )?;
    }
    writeln!(
        out,
        "summary,{},{}",
        result.objective_kind.name(),
        result.objective_value
    )?;
    Ok(())
}
