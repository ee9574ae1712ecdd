//! Activation schedules: generation of event orders on a finite environment,
//! their text format, meaningful times, and deterministic replay.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{Adversary, AdversaryPolicy};
use crate::dispersal::{metrics, InvariantMonitor, Outcome, RunMeta, RunResult, SimError, World, WorldOptions};
use crate::env::EnvironmentGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Async,
    Sync,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Async => "async",
            Mode::Sync => "sync",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "async" => Ok(Mode::Async),
            "sync" => Ok(Mode::Sync),
            other => Err(format!("unknown mode '{other}' (expected async or sync)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Activation,
    ActivationWithDeletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub robot_index: u32,
    pub kind: EventKind,
}

impl EventRecord {
    pub fn act(time: f64, robot_index: u32) -> Self {
        EventRecord { time, robot_index, kind: EventKind::Activation }
    }

    pub fn del(time: f64, robot_index: u32) -> Self {
        EventRecord { time, robot_index, kind: EventKind::ActivationWithDeletion }
    }

    pub fn is_deletion(&self) -> bool {
        self.kind == EventKind::ActivationWithDeletion
    }
}

/// A logged schedule: records ordered by (time, robot index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventOrder {
    pub records: Vec<EventRecord>,
    /// Every robot's activations are complete up to this time.
    pub horizon: f64,
    pub max_index: u32,
    pub mode: Mode,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("robot index {needed} needed at t = {t} but the run is truncated at K = {max_index}")]
    TruncationExceeded { max_index: u32, needed: u32, t: f64 },
    #[error("horizon {horizon} reached before dispersal completed")]
    HorizonReached { horizon: f64, partial: Box<(EventOrder, RunResult)> },
    #[error("environment '{0}' is not finite")]
    NotFinite(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invariant violated at t = {t}: {detail}")]
    Invariant { t: f64, detail: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl EventOrder {
    /// Writes the `.events` text form: `#` metadata lines, then
    /// `time<TAB>robot_index<TAB>act|del` with 17 significant digits.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# mode {}", self.mode)?;
        writeln!(w, "# horizon {:.16e}", self.horizon)?;
        writeln!(w, "# max_index {}", self.max_index)?;
        for r in &self.records {
            let kind = if r.is_deletion() { "del" } else { "act" };
            writeln!(w, "{:.16e}\t{}\t{}", r.time, r.robot_index, kind)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<EventOrder, EngineError> {
        let mut order = EventOrder { records: Vec::new(), horizon: 0.0, max_index: 0, mode: Mode::Async };
        let mut saw_horizon = false;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            let err = |msg: String| EngineError::Parse { line: line_no, msg };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let mut parts = meta.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("mode"), Some(v)) => order.mode = v.parse().map_err(err)?,
                    (Some("horizon"), Some(v)) => {
                        order.horizon = v.parse().map_err(|e| err(format!("bad horizon: {e}")))?;
                        saw_horizon = true;
                    }
                    (Some("max_index"), Some(v)) => {
                        order.max_index = v.parse().map_err(|e| err(format!("bad max_index: {e}")))?;
                    }
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            let time: f64 = fields[0].parse().map_err(|e| err(format!("bad time: {e}")))?;
            let robot_index: u32 = fields[1].parse().map_err(|e| err(format!("bad robot index: {e}")))?;
            if robot_index == 0 || time.is_nan() || time < 0.0 {
                return Err(err("robot indices start at 1 and times are nonnegative".into()));
            }
            let kind = match fields[2] {
                "act" => EventKind::Activation,
                "del" => EventKind::ActivationWithDeletion,
                other => return Err(err(format!("unknown event kind '{other}'"))),
            };
            if let Some(prev) = order.records.last() {
                if (prev.time, prev.robot_index) >= (time, robot_index) {
                    return Err(err("records are not strictly ordered by (time, index)".into()));
                }
            }
            order.max_index = order.max_index.max(robot_index);
            order.records.push(EventRecord { time, robot_index, kind });
        }
        if !saw_horizon {
            order.horizon = order.records.last().map_or(0.0, |r| r.time);
        }
        Ok(order)
    }

    pub fn parse(text: &str) -> Result<EventOrder, EngineError> {
        EventOrder::read_from(text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeaningfulTimes {
    pub times: Vec<f64>,
}

/// Meaningful record positions: the m-th is the first record after the
/// previous one whose robot index is at most m + 1.
pub fn meaningful_positions(records: &[EventRecord]) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.robot_index as usize <= out.len() + 1 {
            out.push(i);
        }
    }
    out
}

pub fn meaningful_times(order: &EventOrder) -> MeaningfulTimes {
    MeaningfulTimes {
        times: meaningful_positions(&order.records).into_iter().map(|i| order.records[i].time).collect(),
    }
}

/// Activation clock of one robot: exponential mean-1 gaps drawn from the
/// robot's own stream, so a schedule does not depend on what else is drawn.
#[derive(Debug, Clone)]
pub struct RobotClock {
    rng: ChaCha8Rng,
}

impl RobotClock {
    pub fn new(seed: u64, index: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        RobotClock { rng }
    }

    /// The next activation strictly after `t`.
    pub fn next_after(&mut self, t: f64) -> f64 {
        let gap: f64 = Exp1.sample(&mut self.rng);
        let next = t + gap;
        if next > t {
            next
        } else {
            t.next_up()
        }
    }
}

/// Default horizon for a finite run: 20·n/(1 − c).
pub fn default_horizon(n: usize, c: f64) -> f64 {
    20.0 * n as f64 / (1.0 - c)
}

/// Default truncation K = 3n + ⌈c·H/4⌉ + 8 per source stream.
pub fn default_max_index(n: usize, c: f64, horizon: f64, sources: usize) -> u32 {
    let per_stream = 3 * n as u64 + (c * horizon / 4.0).ceil() as u64 + 8;
    (per_stream * sources.max(1) as u64).min(u32::MAX as u64) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopAt {
    /// Stop once every vertex is slow (nothing can change afterwards).
    #[default]
    AllSlow,
    /// Keep generating until the horizon.
    Horizon,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env: Arc<EnvironmentGraph>,
    pub policy: AdversaryPolicy,
    pub seed: u64,
    pub mode: Mode,
    pub horizon: Option<f64>,
    pub max_index: Option<u32>,
    pub world: WorldOptions,
    pub log_events: bool,
    pub check_invariants: bool,
    pub stop: StopAt,
}

impl RunConfig {
    pub fn new(env: Arc<EnvironmentGraph>, policy: AdversaryPolicy, seed: u64) -> Self {
        let mode = if policy.rate_divisor == 2 { Mode::Sync } else { Mode::Async };
        RunConfig {
            env,
            policy,
            seed,
            mode,
            horizon: None,
            max_index: None,
            world: WorldOptions::default(),
            log_events: true,
            check_invariants: false,
            stop: StopAt::AllSlow,
        }
    }
}

/// Incremental generative run on a finite environment.
pub struct Generator {
    world: World,
    adversary: Adversary,
    meta: RunMeta,
    seed: u64,
    mode: Mode,
    horizon: f64,
    max_index: u32,
    stop: StopAt,
    heap: BinaryHeap<Reverse<(u64, u32)>>,
    clocks: Vec<RobotClock>,
    /// Per source stream: materialized robots.
    materialized: Vec<u32>,
    log: Vec<EventRecord>,
    log_events: bool,
    monitor: Option<InvariantMonitor>,
    step: u64,
    now: f64,
    conflicts: u64,
    done: bool,
}

impl Generator {
    pub fn new(cfg: RunConfig) -> Result<Self, EngineError> {
        let n = cfg.env.vertex_count().ok_or_else(|| EngineError::NotFinite(cfg.env.name().to_string()))?;
        let c = cfg.policy.c;
        let horizon = cfg.horizon.unwrap_or_else(|| default_horizon(n, c));
        let streams = cfg.env.sources().len();
        let max_index = cfg.max_index.unwrap_or_else(|| default_max_index(n, c, horizon, streams));
        let world = World::new(
            Arc::clone(&cfg.env),
            WorldOptions { max_index: Some(max_index), ..cfg.world.clone() },
        );
        let meta = RunMeta { seed: cfg.seed, c, mode: cfg.mode, adversary: cfg.policy.label() };
        let mut gen = Generator {
            world,
            adversary: Adversary::new(cfg.policy, cfg.seed),
            meta,
            seed: cfg.seed,
            mode: cfg.mode,
            horizon,
            max_index,
            stop: cfg.stop,
            heap: BinaryHeap::new(),
            clocks: Vec::new(),
            materialized: vec![0; streams],
            log: Vec::new(),
            log_events: cfg.log_events,
            monitor: cfg.check_invariants.then(InvariantMonitor::new),
            step: 0,
            now: 0.0,
            conflicts: 0,
            done: false,
        };
        for s in 0..streams {
            gen.materialize(s, 0.0)?;
        }
        Ok(gen)
    }

    fn materialize(&mut self, stream: usize, t: f64) -> Result<(), EngineError> {
        let k = self.materialized[stream] + 1;
        let index = self.world.global_index(stream, k);
        if index > self.max_index {
            return Err(EngineError::TruncationExceeded { max_index: self.max_index, needed: index, t });
        }
        self.materialized[stream] = k;
        if self.mode == Mode::Async {
            let slot = index as usize - 1;
            while self.clocks.len() <= slot {
                let i = self.clocks.len() as u32 + 1;
                self.clocks.push(RobotClock::new(self.seed, i));
            }
            let first = self.clocks[slot].next_after(t);
            self.heap.push(Reverse((first.to_bits(), index)));
        }
        Ok(())
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn log(&self) -> &[EventRecord] {
        &self.log
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn max_index(&self) -> u32 {
        self.max_index
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn conflicts(&self) -> u64 {
        self.conflicts
    }

    /// Time of the next activation, if it is within the horizon.
    pub fn peek_time(&self) -> Option<f64> {
        let t = match self.mode {
            Mode::Async => f64::from_bits(self.heap.peek()?.0 .0),
            Mode::Sync => (self.step + 1) as f64,
        };
        (t <= self.horizon).then_some(t)
    }

    /// Whether generation has stopped (all slow under [`StopAt::AllSlow`], or horizon).
    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Processes the next event (asynchronous) or step (synchronous).
    /// Returns how many records it produced, or `None` once done.
    pub fn advance(&mut self) -> Result<Option<usize>, EngineError> {
        if self.done {
            return Ok(None);
        }
        if self.stop == StopAt::AllSlow && self.world.all_slow() {
            self.done = true;
            return Ok(None);
        }
        let Some(t) = self.peek_time() else {
            self.done = true;
            return Ok(None);
        };
        self.now = t;
        let produced = match self.mode {
            Mode::Async => self.advance_async(t)?,
            Mode::Sync => self.advance_sync(t)?,
        };
        if let Some(monitor) = &mut self.monitor {
            let budget = self.adversary.policy().budget_at(t);
            monitor.observe(&self.world, budget).map_err(|detail| EngineError::Invariant { t, detail })?;
        }
        Ok(Some(produced))
    }

    fn advance_async(&mut self, t: f64) -> Result<usize, EngineError> {
        let Reverse((_, index)) = self.heap.pop().expect("peeked");
        let adversary = &mut self.adversary;
        let outcome = self.world.activate(t, index, false, &mut |q| adversary.decide_crash(q))?;
        let record = if outcome.is_crash() { EventRecord::del(t, index) } else { EventRecord::act(t, index) };
        if self.log_events {
            self.log.push(record);
        }
        if matches!(outcome, Outcome::Entered { .. } | Outcome::Crashed { entry: true }) {
            let stream = (index as usize - 1) % self.materialized.len();
            self.materialize(stream, t)?;
        }
        let next = self.clocks[index as usize - 1].next_after(t);
        self.heap.push(Reverse((next.to_bits(), index)));
        Ok(1)
    }

    fn advance_sync(&mut self, t: f64) -> Result<usize, EngineError> {
        self.step += 1;
        let streams = self.materialized.len() as u32;
        let count = self.materialized.iter().copied().max().unwrap_or(0);
        let mut active = Vec::new();
        for k in 1..=count {
            for s in 0..streams {
                if self.materialized[s as usize] >= k {
                    active.push(self.world.global_index(s as usize, k));
                }
            }
        }
        let adversary = &mut self.adversary;
        let outcomes = self.world.sync_step(t, &active, &[], &mut |q| adversary.decide_crash(q))?;
        let mut records: Vec<EventRecord> = Vec::with_capacity(outcomes.len());
        let mut grow = Vec::new();
        for &(index, outcome) in &outcomes {
            if outcome == Outcome::Conflict {
                self.conflicts += 1;
            }
            records.push(if outcome.is_crash() { EventRecord::del(t, index) } else { EventRecord::act(t, index) });
            if matches!(outcome, Outcome::Entered { .. } | Outcome::Crashed { entry: true }) {
                grow.push((index as usize - 1) % self.materialized.len());
            }
        }
        for stream in grow {
            self.materialize(stream, t)?;
        }
        records.sort_by_key(|r| r.robot_index);
        let produced = records.len();
        if self.log_events {
            self.log.extend(records);
        }
        Ok(produced)
    }

    pub fn result(&self) -> RunResult {
        metrics(&self.world, &self.meta, self.now, self.conflicts)
    }

    pub fn event_order(&self) -> EventOrder {
        EventOrder { records: self.log.clone(), horizon: self.now, max_index: self.max_index, mode: self.mode }
    }

    pub fn into_parts(self) -> (EventOrder, RunResult) {
        let result = self.result();
        let order = EventOrder { records: self.log, horizon: self.now, max_index: self.max_index, mode: self.mode };
        (order, result)
    }
}

/// Runs Algorithm 1 on a finite environment until every vertex is slow (or
/// until the horizon under [`StopAt::Horizon`]).
pub fn generate_run(cfg: RunConfig) -> Result<(EventOrder, RunResult), EngineError> {
    let check = cfg.check_invariants;
    let stop = cfg.stop;
    let mut gen = Generator::new(cfg)?;
    while gen.advance()?.is_some() {}
    if check {
        gen.world()
            .check_invariants(true)
            .map_err(|detail| EngineError::Invariant { t: gen.now(), detail })?;
    }
    let horizon = gen.horizon();
    let (order, result) = gen.into_parts();
    if stop == StopAt::AllSlow && result.slow_makespan.is_none() {
        return Err(EngineError::HorizonReached { horizon, partial: Box::new((order, result)) });
    }
    Ok((order, result))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeletionRule {
    /// A logged deletion removes the robot's copy whatever it is doing.
    AsLogged,
    /// A logged deletion is a plain activation.
    IgnoreDeletions,
}

/// Applies logged records to one environment.
pub struct Replayer {
    world: World,
    rule: DeletionRule,
    conflicts: u64,
}

impl Replayer {
    pub fn new(env: Arc<EnvironmentGraph>, opts: WorldOptions, rule: DeletionRule) -> Self {
        Replayer { world: World::new(env, opts), rule, conflicts: 0 }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn apply(&mut self, record: &EventRecord) -> Result<Outcome, SimError> {
        let delete = record.is_deletion() && self.rule == DeletionRule::AsLogged;
        self.world.activate(record.time, record.robot_index, delete, &mut |_| false)
    }

    /// Applies all records of one synchronous step.
    pub fn apply_step(&mut self, records: &[EventRecord]) -> Result<(), SimError> {
        let Some(first) = records.first() else { return Ok(()) };
        let active: Vec<u32> = records.iter().map(|r| r.robot_index).collect();
        let deletions: Vec<u32> = if self.rule == DeletionRule::AsLogged {
            records.iter().filter(|r| r.is_deletion()).map(|r| r.robot_index).collect()
        } else {
            Vec::new()
        };
        let outcomes = self.world.sync_step(first.time, &active, &deletions, &mut |_| false)?;
        self.conflicts += outcomes.iter().filter(|(_, o)| *o == Outcome::Conflict).count() as u64;
        Ok(())
    }

    /// Applies a whole order, grouping synchronous records by step.
    pub fn apply_all(&mut self, order: &EventOrder) -> Result<(), SimError> {
        match order.mode {
            Mode::Async => {
                for r in &order.records {
                    self.apply(r)?;
                }
            }
            Mode::Sync => {
                for step in order.records.chunk_by(|a, b| a.time == b.time) {
                    self.apply_step(step)?;
                }
            }
        }
        Ok(())
    }

    pub fn result(&self, meta: &RunMeta, end_time: f64) -> RunResult {
        metrics(&self.world, meta, end_time, self.conflicts)
    }
}

/// Replays `order` on `env`. No randomness is consumed.
pub fn replay(
    order: &EventOrder,
    env: Arc<EnvironmentGraph>,
    rule: DeletionRule,
    opts: WorldOptions,
) -> Result<RunResult, EngineError> {
    let mut rp = Replayer::new(env, WorldOptions { max_index: Some(order.max_index), ..opts }, rule);
    rp.apply_all(order)?;
    if let Some(t) = rp.world().truncated_at() {
        if rp.world().env().is_finite() && rp.world().slow_makespan().is_none_or(|s| s > t) {
            return Err(EngineError::TruncationExceeded { max_index: order.max_index, needed: order.max_index + 1, t });
        }
    }
    let meta = RunMeta { seed: 0, c: 0.0, mode: order.mode, adversary: "replay".into() };
    Ok(rp.result(&meta, order.horizon))
}

/// Activation schedule of robots `1..=k`, all clocks started at 0, up to
/// `t_max`. Shares clock streams with [`Generator`] for the same seed.
pub fn synthetic_event_order(k: u32, t_max: f64, seed: u64) -> EventOrder {
    let mut clocks: Vec<RobotClock> = (1..=k).map(|i| RobotClock::new(seed, i)).collect();
    let mut heap = BinaryHeap::with_capacity(k as usize);
    for (i, clock) in clocks.iter_mut().enumerate() {
        heap.push(Reverse((clock.next_after(0.0).to_bits(), i as u32 + 1)));
    }
    let mut records = Vec::new();
    while let Some(&Reverse((bits, index))) = heap.peek() {
        let t = f64::from_bits(bits);
        if t > t_max {
            break;
        }
        heap.pop();
        records.push(EventRecord::act(t, index));
        let next = clocks[index as usize - 1].next_after(t);
        heap.push(Reverse((next.to_bits(), index)));
    }
    EventOrder { records, horizon: t_max, max_index: k, mode: Mode::Async }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::PolicyKind;
    use crate::env::{path_graph, VertexId};

    fn config(env: EnvironmentGraph, c: f64, seed: u64, mode: Mode) -> RunConfig {
        let kind = if c > 0.0 { PolicyKind::Random { p: 1.0 } } else { PolicyKind::None };
        let policy = AdversaryPolicy::new(kind, c, mode).unwrap();
        let mut cfg = RunConfig::new(Arc::new(env), policy, seed);
        cfg.check_invariants = true;
        cfg
    }

    fn order(records: &[(f64, u32)]) -> EventOrder {
        EventOrder {
            records: records.iter().map(|&(t, i)| EventRecord::act(t, i)).collect(),
            horizon: 2.0,
            max_index: 3,
            mode: Mode::Async,
        }
    }

    #[test]
    fn meaningful_times_example() {
        let s = order(&[(0.3, 2), (0.5, 1), (0.7, 2), (0.9, 3), (1.1, 1)]);
        assert_eq!(meaningful_times(&s).times, vec![0.5, 0.7, 0.9, 1.1]);
        assert_eq!(meaningful_times(&order(&[(0.2, 1)])).times, vec![0.2]);
    }

    #[test]
    fn single_vertex_makespans() {
        let (_, sync) = generate_run(config(path_graph(1).unwrap(), 0.0, 3, Mode::Sync)).unwrap();
        assert_eq!(sync.makespan, Some(1.0));
        let (s, run) = generate_run(config(path_graph(1).unwrap(), 0.0, 3, Mode::Async)).unwrap();
        let first = s.records.iter().find(|r| r.robot_index == 1).unwrap().time;
        assert_eq!(run.makespan, Some(first));
    }

    #[test]
    fn two_event_deletion_trace() {
        let s = EventOrder {
            records: vec![EventRecord::act(0.5, 1), EventRecord::del(0.9, 1)],
            horizon: 1.0,
            max_index: 2,
            mode: Mode::Async,
        };
        let env = Arc::new(path_graph(2).unwrap());
        let mut rp = Replayer::new(Arc::clone(&env), WorldOptions::default(), DeletionRule::AsLogged);
        rp.apply(&s.records[0]).unwrap();
        assert_eq!(rp.world().occupancy(VertexId(1)).1, Some(1));
        assert_eq!(rp.apply(&s.records[1]).unwrap(), Outcome::Deleted);
        assert_eq!(rp.world().settled_count(), 0);
        let mut keep = Replayer::new(env, WorldOptions::default(), DeletionRule::IgnoreDeletions);
        keep.apply_all(&s).unwrap();
        assert_eq!(keep.world().settled_count(), 1);
    }

    #[test]
    fn events_text_round_trip() {
        let (s, _) = generate_run(config(path_graph(6).unwrap(), 0.5, 11, Mode::Async)).unwrap();
        assert!(s.records.iter().any(|r| r.is_deletion()));
        let parsed = EventOrder::parse(&s.to_text()).unwrap();
        assert_eq!(parsed, s);
    }

    #[test]
    fn replay_reproduces_generation() {
        for mode in [Mode::Async, Mode::Sync] {
            let cfg = config(crate::env::open_grid(4, 3).unwrap(), 0.25, 5, mode);
            let env = Arc::clone(&cfg.env);
            let (s, run) = generate_run(cfg).unwrap();
            let again = replay(&s, env, DeletionRule::AsLogged, WorldOptions::default()).unwrap();
            assert_eq!(again.makespan, run.makespan);
            assert_eq!(again.slow_makespan, run.slow_makespan);
            assert_eq!(again.tree_edges, run.tree_edges);
            assert_eq!(again.crashed, run.crashed);
            assert_eq!(again.entered, run.entered);
        }
    }

    #[test]
    fn unordered_input_is_rejected() {
        let text = "1.0\t2\tact\n1.0\t1\tact\n";
        assert!(matches!(EventOrder::parse(text), Err(EngineError::Parse { line: 2, .. })));
        assert!(matches!(EventOrder::parse("0.5\t1\tjump\n"), Err(EngineError::Parse { .. })));
    }

    #[test]
    fn truncation_guard_fires() {
        let mut cfg = config(path_graph(5).unwrap(), 0.0, 1, Mode::Async);
        cfg.max_index = Some(4);
        assert!(matches!(generate_run(cfg), Err(EngineError::TruncationExceeded { needed: 5, .. })));
    }

    #[test]
    fn horizon_reports_partial_run() {
        let mut cfg = config(path_graph(30).unwrap(), 0.0, 1, Mode::Async);
        cfg.horizon = Some(10.0);
        match generate_run(cfg) {
            Err(EngineError::HorizonReached { partial, .. }) => {
                assert!(partial.1.partial);
                assert!(partial.0.records.iter().all(|r| r.time <= 10.0));
            }
            other => panic!("expected a horizon error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_order_is_sorted_and_complete() {
        let s = synthetic_event_order(5, 30.0, 2);
        assert!(s.records.windows(2).all(|w| (w[0].time, w[0].robot_index) < (w[1].time, w[1].robot_index)));
        for i in 1..=5 {
            let count = s.records.iter().filter(|r| r.robot_index == i).count();
            assert!(count > 5 && count < 80, "robot {i} has {count} activations");
        }
    }
}
