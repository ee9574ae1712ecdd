//! The dispersal state machine: robot lifecycle, entrance at sources, the
//! local movement rule, the settled-robot tree and slow-vertex bookkeeping.
//!
//! A [`World`] holds one environment's configuration. The same type runs the
//! generative simulation on the base graph and every replay environment; the
//! caller decides where crashes come from.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::CrashQuery;
use crate::engine::Mode;
use crate::env::{EnvironmentGraph, Variant, VertexId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RobotState {
    Outside,
    Mobile(VertexId),
    Settled(VertexId),
    /// Deleted by an adversarial event (or by a replayed deletion).
    Crashed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Robot {
    pub state: RobotState,
    /// Number of successful moves; entering the source counts as one.
    pub depth: u32,
}

const OUTSIDE: Robot = Robot { state: RobotState::Outside, depth: 0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    MoveTo(VertexId),
    MoveAndSettle(VertexId),
    StayPut,
}

/// What a mobile robot senses about one neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborView {
    pub vertex: VertexId,
    /// Settled plus mobile robots (crashed robots are gone).
    pub robots: u8,
    /// Whether the neighbor's settled robot marks the sensing robot's vertex.
    pub marks_here: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TieBreak {
    /// Lowest vertex id among eligible neighbors.
    #[default]
    LowestId,
    /// Pseudo-random choice keyed on (salt, robot, time); replays reproduce it.
    Hashed { salt: u64 },
}

/// When a vertex whose mobile robot is stuck becomes slow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlowRule {
    /// Only at a blocked activation of the vertex's mobile robot, and only if
    /// every child is slow at that moment.
    #[default]
    OnActivation,
    /// Also as soon as the last child turns slow, if the mobile robot that is
    /// still on the vertex was blocked earlier.
    Propagate,
}

/// Algorithm 1: follow a mark away from `v` if possible, else settle on an
/// empty neighbor, else stay.
///
/// `views` must list the neighbors of `v` in ascending id order. `key` feeds
/// the hashed tie-break and is ignored otherwise.
pub fn decide(views: &[NeighborView], tie: TieBreak, key: u64) -> Action {
    let child = |w: &NeighborView| w.robots == 1 && w.marks_here;
    let empty = |w: &NeighborView| w.robots == 0;
    match tie {
        TieBreak::LowestId => {
            if let Some(w) = views.iter().find(|w| child(w)) {
                return Action::MoveTo(w.vertex);
            }
            if let Some(w) = views.iter().find(|w| empty(w)) {
                return Action::MoveAndSettle(w.vertex);
            }
            Action::StayPut
        }
        TieBreak::Hashed { salt } => {
            let pick = |pred: &dyn Fn(&NeighborView) -> bool| {
                let count = views.iter().filter(|w| pred(w)).count();
                (count > 0).then(|| {
                    let k = (mix(salt ^ key) % count as u64) as usize;
                    views.iter().filter(|w| pred(w)).nth(k).unwrap().vertex
                })
            };
            if let Some(u) = pick(&child) {
                return Action::MoveTo(u);
            }
            if let Some(u) = pick(&empty) {
                return Action::MoveAndSettle(u);
            }
            Action::StayPut
        }
    }
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Settled, crashed, or not-yet-relevant robot: nothing happens.
    Idle,
    /// Outside robot that is not the lowest-index outside robot of its stream.
    Waiting,
    EntryBlocked,
    Entered { root: bool },
    Moved { to: VertexId, settled: bool },
    Blocked,
    /// Adversarial crash during an attempted move (or entrance).
    Crashed { entry: bool },
    /// Removed by a replayed deletion.
    Deleted,
    /// Synchronous mode: the target was claimed earlier in the same step.
    Conflict,
}

impl Outcome {
    pub fn is_crash(self) -> bool {
        matches!(self, Outcome::Crashed { .. })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("capacity violated at {vertex}: {detail}")]
    CapacityViolation { vertex: VertexId, detail: &'static str },
    #[error("robot A_{robot} left slow vertex {vertex}")]
    SlowRobotMoved { robot: u32, vertex: VertexId },
    #[error("robot A_{0} does not exist in this environment")]
    UnknownRobot(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Settler {
    /// `None` for the never-activated dummies of the prefilled variants.
    robot: Option<u32>,
    marks: Option<VertexId>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    settled: Option<Settler>,
    mobile: Option<u32>,
    blocked_since: Option<f64>,
    slow_at: Option<f64>,
}

impl Cell {
    fn robots(&self) -> u8 {
        self.settled.is_some() as u8 + self.mobile.is_some() as u8
    }
}

/// Vertex storage indexed by position; vertices outside the stored range
/// still have their initial (dummy) occupancy.
#[derive(Debug, Clone)]
struct Cells {
    offset: i64,
    data: Vec<Cell>,
}

impl Cells {
    fn initial(env: &EnvironmentGraph, v: VertexId) -> Cell {
        let occ = env.initial_occupancy(v);
        Cell {
            settled: occ.dummy_marks.map(|m| Settler { robot: None, marks: Some(m) }),
            ..Cell::default()
        }
    }

    fn get(&self, env: &EnvironmentGraph, v: VertexId) -> Cell {
        let i = v.0 - self.offset;
        if i >= 0 && (i as usize) < self.data.len() {
            self.data[i as usize]
        } else {
            Cells::initial(env, v)
        }
    }

    fn get_mut(&mut self, env: &EnvironmentGraph, v: VertexId) -> &mut Cell {
        assert!(v.0 >= self.offset, "vertex {v} below the materialized range");
        let i = (v.0 - self.offset) as usize;
        while self.data.len() <= i {
            let w = VertexId(self.offset + self.data.len() as i64);
            self.data.push(Cells::initial(env, w));
        }
        &mut self.data[i]
    }
}

/// Settled robots and their marks: an edge `(u, v)` means the settled robot
/// at `v` marks `u`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub nodes: Vec<VertexId>,
    pub edges: Vec<(VertexId, VertexId)>,
}

impl TreeSnapshot {
    /// Every node reaches a root by following marks, and every root is a source.
    pub fn is_forest_rooted_at(&self, sources: &[VertexId]) -> bool {
        use std::collections::HashMap;
        let parent: HashMap<VertexId, VertexId> = self.edges.iter().map(|&(u, v)| (v, u)).collect();
        if parent.len() != self.edges.len() {
            return false;
        }
        let node_set: std::collections::HashSet<VertexId> = self.nodes.iter().copied().collect();
        for &v in &self.nodes {
            let mut cur = v;
            let mut steps = 0;
            while let Some(&p) = parent.get(&cur) {
                if !node_set.contains(&p) {
                    return false;
                }
                cur = p;
                steps += 1;
                if steps > self.nodes.len() {
                    return false;
                }
            }
            if !sources.contains(&cur) {
                return false;
            }
        }
        true
    }

    pub fn root_count(&self) -> usize {
        self.nodes.len() - self.edges.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CopyState {
    Outside,
    Mobile,
    Settled,
    Crashed,
}

/// One robot's copy in one environment, as the coupling checks see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyView {
    pub state: CopyState,
    pub slow: bool,
    pub depth: u32,
    /// Path position, when the environment is a path variant.
    pub position: Option<i64>,
}

#[derive(Debug, Clone)]
#[derive(Default)]
pub struct WorldOptions {
    pub slow_rule: SlowRule,
    pub tie_break: TieBreak,
    /// Robot truncation: indices above this never exist.
    pub max_index: Option<u32>,
}

/// Configuration of one environment plus its running metrics.
#[derive(Debug, Clone)]
pub struct World {
    env: Arc<EnvironmentGraph>,
    opts: WorldOptions,
    cells: Cells,
    robots: Vec<Robot>,
    streams: u32,
    /// Per source: 1-based stream position of the lowest-index outside robot.
    next_entrant: Vec<u32>,
    n: Option<usize>,
    entered: u64,
    crashed: u64,
    crashed_outside: u64,
    settled: usize,
    mobiles: usize,
    slow_vertices: usize,
    crossings: u64,
    mobile_depths: BTreeMap<u32, u32>,
    makespan: Option<f64>,
    slow_makespan: Option<f64>,
    truncated_at: Option<f64>,
    dirty: Vec<u32>,
    views: Vec<NeighborView>,
}

impl World {
    pub fn new(env: Arc<EnvironmentGraph>, opts: WorldOptions) -> Self {
        let n = env.vertex_count();
        let streams = env.sources().len().max(1) as u32;
        let mut world = World {
            cells: Cells { offset: 1, data: Vec::new() },
            robots: Vec::new(),
            streams,
            next_entrant: vec![1; streams as usize],
            n,
            entered: 0,
            crashed: 0,
            crashed_outside: 0,
            settled: 0,
            mobiles: 0,
            slow_vertices: 0,
            crossings: 0,
            mobile_depths: BTreeMap::new(),
            makespan: None,
            slow_makespan: None,
            truncated_at: None,
            dirty: Vec::new(),
            views: Vec::new(),
            env,
            opts,
        };
        if let Some(n) = n {
            world.cells.data = vec![Cell::default(); n];
        }
        if world.env.variant() == Variant::TasepB {
            let k = world.opts.max_index.expect("the TASEP environment needs a particle count") as i64;
            world.cells.offset = 1 - k;
            for i in 1..=k {
                let v = VertexId(1 - i);
                let cell = world.cells.get_mut(&world.env, v);
                cell.mobile = Some(i as u32);
                world.robots.push(Robot { state: RobotState::Mobile(v), depth: 0 });
                world.mobiles += 1;
            }
            world.mobile_depths.insert(0, k as u32);
        }
        world
    }

    pub fn env(&self) -> &Arc<EnvironmentGraph> {
        &self.env
    }

    pub fn robot(&self, index: u32) -> Robot {
        self.robots.get(index as usize - 1).copied().unwrap_or(OUTSIDE)
    }

    fn robot_mut(&mut self, index: u32) -> &mut Robot {
        let i = index as usize - 1;
        if self.robots.len() <= i {
            self.robots.resize(i + 1, OUTSIDE);
        }
        &mut self.robots[i]
    }

    /// Robots materialized so far (every higher index is outside with depth 0).
    pub fn robot_count(&self) -> usize {
        self.robots.len()
    }

    pub fn entered(&self) -> u64 {
        self.entered
    }

    pub fn crashed(&self) -> u64 {
        self.crashed
    }

    /// Robots deleted while still outside the environment.
    pub fn crashed_outside(&self) -> u64 {
        self.crashed_outside
    }

    /// Indexed settled robots (dummies excluded).
    pub fn settled_count(&self) -> usize {
        self.settled
    }

    pub fn mobile_count(&self) -> usize {
        self.mobiles
    }

    /// Indexed robots inside the environment.
    pub fn robots_inside(&self) -> usize {
        self.settled + self.mobiles
    }

    pub fn slow_vertex_count(&self) -> usize {
        self.slow_vertices
    }

    /// Robots that crossed the `(v_0, v_1)` edge (TASEP environment).
    pub fn crossings(&self) -> u64 {
        self.crossings
    }

    pub fn makespan(&self) -> Option<f64> {
        self.makespan
    }

    pub fn slow_makespan(&self) -> Option<f64> {
        self.slow_makespan
    }

    pub fn all_slow(&self) -> bool {
        self.slow_makespan.is_some()
    }

    /// First time the lowest-index outside robot of some stream exceeded the truncation.
    pub fn truncated_at(&self) -> Option<f64> {
        self.truncated_at
    }

    pub fn deepest_mobile(&self) -> u32 {
        self.mobile_depths.keys().next_back().copied().unwrap_or(0)
    }

    /// Robots whose state or slowness changed during the last event or step.
    pub fn dirty(&self) -> &[u32] {
        &self.dirty
    }

    fn stream_of(&self, index: u32) -> (usize, u32) {
        let s = (index - 1) % self.streams;
        (s as usize, (index - 1) / self.streams + 1)
    }

    pub fn global_index(&self, stream: usize, k: u32) -> u32 {
        (k - 1) * self.streams + stream as u32 + 1
    }

    /// Global index of the lowest-index outside robot of `stream`.
    pub fn entrant(&self, stream: usize) -> u32 {
        self.global_index(stream, self.next_entrant[stream])
    }

    pub fn is_entrant(&self, index: u32) -> bool {
        if self.env.sources().is_empty() {
            return false;
        }
        let (s, k) = self.stream_of(index);
        self.next_entrant[s] == k && self.robot(index).state == RobotState::Outside
    }

    pub fn is_slow_vertex(&self, v: VertexId) -> bool {
        self.cells.get(&self.env, v).slow_at.is_some()
    }

    pub fn slow_at(&self, v: VertexId) -> Option<f64> {
        self.cells.get(&self.env, v).slow_at
    }

    pub fn is_slow(&self, index: u32) -> bool {
        match self.robot(index).state {
            RobotState::Mobile(v) | RobotState::Settled(v) => self.is_slow_vertex(v),
            _ => false,
        }
    }

    pub fn copy_view(&self, index: u32) -> CopyView {
        let r = self.robot(index);
        let (state, position) = match r.state {
            RobotState::Outside => (CopyState::Outside, None),
            RobotState::Mobile(v) => (CopyState::Mobile, Some(v.0)),
            RobotState::Settled(v) => (CopyState::Settled, Some(v.0)),
            RobotState::Crashed => (CopyState::Crashed, None),
        };
        CopyView { state, slow: self.is_slow(index), depth: r.depth, position }
    }

    /// Occupancy of `v`: (settled robot present, its index or `None` for a
    /// dummy, the vertex it marks, mobile robot index).
    pub fn occupancy(&self, v: VertexId) -> (bool, Option<u32>, Option<VertexId>, Option<u32>) {
        let c = self.cells.get(&self.env, v);
        (c.settled.is_some(), c.settled.and_then(|s| s.robot), c.settled.and_then(|s| s.marks), c.mobile)
    }

    fn advance_entrant(&mut self, stream: usize, t: f64) {
        loop {
            let k = self.next_entrant[stream];
            let g = self.global_index(stream, k);
            if self.robot(g).state != RobotState::Outside {
                self.next_entrant[stream] = k + 1;
                continue;
            }
            if let Some(max) = self.opts.max_index {
                if g > max && self.truncated_at.is_none() {
                    self.truncated_at = Some(t);
                }
            }
            break;
        }
    }

    fn add_mobile_depth(&mut self, depth: u32) {
        *self.mobile_depths.entry(depth).or_insert(0) += 1;
    }

    fn remove_mobile_depth(&mut self, depth: u32) {
        if let Some(count) = self.mobile_depths.get_mut(&depth) {
            *count -= 1;
            if *count == 0 {
                self.mobile_depths.remove(&depth);
            }
        }
    }

    fn build_views(&mut self, v: VertexId) {
        self.views.clear();
        for u in self.env.neighbors(v) {
            let c = self.cells.get(&self.env, u);
            self.views.push(NeighborView {
                vertex: u,
                robots: c.robots(),
                marks_here: c.settled.is_some_and(|s| s.marks == Some(v)),
            });
        }
    }

    fn decide_at(&mut self, index: u32, v: VertexId, t: f64) -> Action {
        self.build_views(v);
        let key = ((index as u64) << 32) ^ t.to_bits();
        decide(&self.views, self.opts.tie_break, key)
    }

    /// Processes one asynchronous activation of robot `index` at time `t`.
    ///
    /// `force_delete` applies a logged deletion regardless of what the robot
    /// is doing; otherwise `crash` is consulted at every attempted move.
    pub fn activate(
        &mut self,
        t: f64,
        index: u32,
        force_delete: bool,
        crash: &mut dyn FnMut(&CrashQuery) -> bool,
    ) -> Result<Outcome, SimError> {
        self.dirty.clear();
        if self.env.variant() == Variant::TasepB && index as usize > self.robots.len() {
            return Ok(Outcome::Idle);
        }
        if force_delete {
            return Ok(self.delete(index, t));
        }
        match self.robot(index).state {
            RobotState::Settled(_) | RobotState::Crashed => Ok(Outcome::Idle),
            RobotState::Outside => self.try_enter(index, t, crash),
            RobotState::Mobile(v) => {
                let action = self.decide_at(index, v, t);
                self.apply_action(index, v, action, t, crash)
            }
        }
    }

    /// Entrance attempt of an outside robot.
    pub fn try_enter(
        &mut self,
        index: u32,
        t: f64,
        crash: &mut dyn FnMut(&CrashQuery) -> bool,
    ) -> Result<Outcome, SimError> {
        if !self.is_entrant(index) {
            return Ok(Outcome::Waiting);
        }
        let (stream, _) = self.stream_of(index);
        let s = self.env.sources()[stream];
        let cell = self.cells.get(&self.env, s);
        if cell.mobile.is_some() {
            return Ok(Outcome::EntryBlocked);
        }
        self.dirty.push(index);
        let q = CrashQuery { t, robot: index, depth: 0, is_entry: true, deepest_mobile: self.deepest_mobile() };
        if crash(&q) {
            self.robot_mut(index).state = RobotState::Crashed;
            self.crashed += 1;
            self.crashed_outside += 1;
            self.advance_entrant(stream, t);
            return Ok(Outcome::Crashed { entry: true });
        }
        self.entered += 1;
        let root = cell.settled.is_none();
        if root {
            self.cells.get_mut(&self.env, s).settled = Some(Settler { robot: Some(index), marks: None });
            *self.robot_mut(index) = Robot { state: RobotState::Settled(s), depth: 1 };
            self.on_settled(t);
        } else {
            self.cells.get_mut(&self.env, s).mobile = Some(index);
            *self.robot_mut(index) = Robot { state: RobotState::Mobile(s), depth: 1 };
            self.mobiles += 1;
            self.add_mobile_depth(1);
        }
        self.advance_entrant(stream, t);
        Ok(Outcome::Entered { root })
    }

    /// Carries out `action` for the mobile robot `index` at `v`.
    pub fn apply_action(
        &mut self,
        index: u32,
        v: VertexId,
        action: Action,
        t: f64,
        crash: &mut dyn FnMut(&CrashQuery) -> bool,
    ) -> Result<Outcome, SimError> {
        self.dirty.push(index);
        let target = match action {
            Action::StayPut => {
                self.on_blocked(v, t);
                return Ok(Outcome::Blocked);
            }
            Action::MoveTo(u) | Action::MoveAndSettle(u) => u,
        };
        let depth = self.robot(index).depth;
        let q = CrashQuery { t, robot: index, depth, is_entry: false, deepest_mobile: self.deepest_mobile() };
        if crash(&q) {
            self.vacate(index, v)?;
            self.robot_mut(index).state = RobotState::Crashed;
            self.crashed += 1;
            return Ok(Outcome::Crashed { entry: false });
        }
        let dest = self.cells.get(&self.env, target);
        match action {
            Action::MoveTo(_) if dest.mobile.is_some() => {
                return Err(SimError::CapacityViolation { vertex: target, detail: "second mobile robot" });
            }
            Action::MoveAndSettle(_) if dest.robots() > 0 => {
                return Err(SimError::CapacityViolation { vertex: target, detail: "settling on an occupied vertex" });
            }
            _ => {}
        }
        self.vacate(index, v)?;
        let settled = matches!(action, Action::MoveAndSettle(_));
        if settled {
            self.cells.get_mut(&self.env, target).settled = Some(Settler { robot: Some(index), marks: Some(v) });
            *self.robot_mut(index) = Robot { state: RobotState::Settled(target), depth: depth + 1 };
            self.on_settled(t);
        } else {
            self.cells.get_mut(&self.env, target).mobile = Some(index);
            *self.robot_mut(index) = Robot { state: RobotState::Mobile(target), depth: depth + 1 };
            self.mobiles += 1;
            self.add_mobile_depth(depth + 1);
        }
        if self.env.variant() == Variant::TasepB && v.0 == 0 && target.0 == 1 {
            self.crossings += 1;
        }
        Ok(Outcome::Moved { to: target, settled })
    }

    /// Takes the mobile robot `index` off `v`.
    fn vacate(&mut self, index: u32, v: VertexId) -> Result<(), SimError> {
        let depth = self.robot(index).depth;
        let env = Arc::clone(&self.env);
        let cell = self.cells.get_mut(&env, v);
        if cell.slow_at.is_some() {
            return Err(SimError::SlowRobotMoved { robot: index, vertex: v });
        }
        cell.mobile = None;
        cell.blocked_since = None;
        self.mobiles -= 1;
        self.remove_mobile_depth(depth);
        Ok(())
    }

    fn delete(&mut self, index: u32, t: f64) -> Outcome {
        let robot = self.robot(index);
        match robot.state {
            RobotState::Crashed => return Outcome::Idle,
            RobotState::Outside => {
                self.crashed_outside += 1;
                self.robot_mut(index).state = RobotState::Crashed;
                if !self.env.sources().is_empty() {
                    let (stream, k) = self.stream_of(index);
                    if self.next_entrant[stream] == k {
                        self.advance_entrant(stream, t);
                    }
                }
            }
            RobotState::Mobile(v) => {
                let env = Arc::clone(&self.env);
                let cell = self.cells.get_mut(&env, v);
                cell.mobile = None;
                cell.blocked_since = None;
                self.mobiles -= 1;
                self.remove_mobile_depth(robot.depth);
                self.robot_mut(index).state = RobotState::Crashed;
            }
            RobotState::Settled(v) => {
                let env = Arc::clone(&self.env);
                self.cells.get_mut(&env, v).settled = None;
                self.settled -= 1;
                self.robot_mut(index).state = RobotState::Crashed;
            }
        }
        self.crashed += 1;
        self.dirty.push(index);
        Outcome::Deleted
    }

    fn on_settled(&mut self, t: f64) {
        self.settled += 1;
        if self.makespan.is_none() && Some(self.settled) == self.n {
            self.makespan = Some(t);
        }
    }

    /// A mobile robot at `v` was activated and found nowhere to go.
    pub fn on_blocked(&mut self, v: VertexId, t: f64) {
        if self.n.is_none() {
            return;
        }
        let env = Arc::clone(&self.env);
        let cell = self.cells.get_mut(&env, v);
        cell.blocked_since.get_or_insert(t);
        self.update_slow(v, t);
    }

    /// Marks `v` slow if its mobile robot is stuck and all its children are
    /// slow; under [`SlowRule::Propagate`] re-examines the parent as well.
    pub fn update_slow(&mut self, v: VertexId, t: f64) {
        let env = Arc::clone(&self.env);
        let mut cur = Some(v);
        while let Some(x) = cur.take() {
            let cell = self.cells.get(&env, x);
            let (Some(settler), Some(mobile)) = (cell.settled, cell.mobile) else { break };
            if cell.slow_at.is_some() || cell.blocked_since.is_none() {
                break;
            }
            let ready = env.neighbors(x).all(|u| {
                let c = self.cells.get(&env, u);
                match c.settled {
                    None => false,
                    Some(s) => s.marks != Some(x) || c.slow_at.is_some(),
                }
            });
            if !ready {
                break;
            }
            self.cells.get_mut(&env, x).slow_at = Some(t);
            self.slow_vertices += 1;
            if let Some(r) = settler.robot {
                self.dirty.push(r);
            }
            self.dirty.push(mobile);
            if self.slow_makespan.is_none() && Some(self.slow_vertices) == self.n {
                self.slow_makespan = Some(t);
            }
            if self.opts.slow_rule == SlowRule::Propagate {
                cur = settler.marks;
            }
        }
    }

    /// One synchronous step: every robot in `active` activates at once.
    ///
    /// Intentions are computed from the configuration at the start of the
    /// step; they are then carried out deepest robot first, entrances last.
    /// Robots listed in `deletions` are removed at their turn.
    pub fn sync_step(
        &mut self,
        t: f64,
        active: &[u32],
        deletions: &[u32],
        crash: &mut dyn FnMut(&CrashQuery) -> bool,
    ) -> Result<Vec<(u32, Outcome)>, SimError> {
        #[derive(Clone, Copy)]
        enum Intent {
            Idle,
            Enter,
            EntryBlocked,
            Act(VertexId, Action),
        }
        let mut plan: Vec<(u32, Intent)> = Vec::with_capacity(active.len());
        for &index in active {
            let intent = match self.robot(index).state {
                RobotState::Outside if self.is_entrant(index) => {
                    let (stream, _) = self.stream_of(index);
                    let s = self.env.sources()[stream];
                    if self.cells.get(&self.env, s).mobile.is_some() {
                        Intent::EntryBlocked
                    } else {
                        Intent::Enter
                    }
                }
                RobotState::Mobile(v) => Intent::Act(v, self.decide_at(index, v, t)),
                _ => Intent::Idle,
            };
            plan.push((index, intent));
        }
        let rank = |(index, intent): &(u32, Intent), robots: &World| -> (u8, std::cmp::Reverse<u32>, u32) {
            match intent {
                Intent::Act(..) => (0, std::cmp::Reverse(robots.robot(*index).depth), *index),
                Intent::Enter | Intent::EntryBlocked => (1, std::cmp::Reverse(0), *index),
                Intent::Idle => (2, std::cmp::Reverse(0), *index),
            }
        };
        plan.sort_by_key(|p| rank(p, self));

        let mut outcomes = Vec::with_capacity(plan.len());
        let mut touched = Vec::new();
        for (index, intent) in plan {
            if deletions.contains(&index) {
                let out = self.delete(index, t);
                touched.extend_from_slice(&self.dirty);
                outcomes.push((index, out));
                continue;
            }
            self.dirty.clear();
            let out = match intent {
                Intent::Idle => {
                    if self.robot(index).state == RobotState::Outside {
                        Outcome::Waiting
                    } else {
                        Outcome::Idle
                    }
                }
                Intent::EntryBlocked => Outcome::EntryBlocked,
                Intent::Enter => {
                    let (stream, _) = self.stream_of(index);
                    let s = self.env.sources()[stream];
                    if self.cells.get(&self.env, s).mobile.is_some() {
                        Outcome::EntryBlocked
                    } else {
                        self.try_enter(index, t, crash)?
                    }
                }
                Intent::Act(v, action) => {
                    let free = match action {
                        Action::StayPut => true,
                        Action::MoveTo(u) => self.cells.get(&self.env, u).mobile.is_none(),
                        Action::MoveAndSettle(u) => self.cells.get(&self.env, u).robots() == 0,
                    };
                    if free {
                        self.apply_action(index, v, action, t, crash)?
                    } else {
                        self.dirty.push(index);
                        Outcome::Conflict
                    }
                }
            };
            touched.extend_from_slice(&self.dirty);
            outcomes.push((index, out));
        }
        self.dirty = touched;
        Ok(outcomes)
    }

    /// The current tree (forest) of settled robots.
    pub fn tree(&self) -> TreeSnapshot {
        let mut tree = TreeSnapshot::default();
        let Some(n) = self.n else { return tree };
        for i in 1..=n as i64 {
            let v = VertexId(i);
            if let Some(s) = self.cells.get(&self.env, v).settled {
                tree.nodes.push(v);
                if let Some(m) = s.marks {
                    tree.edges.push((m, v));
                }
            }
        }
        tree
    }

    /// Full structural check of a finite environment's configuration.
    ///
    /// `strict` adds the properties that hold on the generating environment
    /// only: every mobile robot stands on a settled robot and the settled
    /// robots form a forest rooted at sources.
    pub fn check_invariants(&self, strict: bool) -> Result<(), String> {
        let Some(n) = self.n else { return Ok(()) };
        let mut mobiles = 0;
        let mut settled = 0;
        let mut slow = 0;
        for i in 1..=n as i64 {
            let v = VertexId(i);
            let c = self.cells.get(&self.env, v);
            if let Some(m) = c.mobile {
                mobiles += 1;
                if self.robot(m).state != RobotState::Mobile(v) {
                    return Err(format!("cell {v} lists mobile A_{m} which is {:?}", self.robot(m).state));
                }
                if strict && c.settled.is_none() {
                    return Err(format!("mobile A_{m} at {v} without a settled robot"));
                }
            }
            if let Some(s) = c.settled {
                settled += 1;
                if let Some(r) = s.robot {
                    if self.robot(r).state != RobotState::Settled(v) {
                        return Err(format!("cell {v} lists settled A_{r} which is {:?}", self.robot(r).state));
                    }
                }
            }
            if c.slow_at.is_some() {
                slow += 1;
                if c.settled.is_none() || c.mobile.is_none() {
                    return Err(format!("slow vertex {v} is missing a robot"));
                }
            }
        }
        if mobiles != self.mobiles || settled != self.settled || slow != self.slow_vertices {
            return Err(format!(
                "counters out of sync: mobile {mobiles}/{}, settled {settled}/{}, slow {slow}/{}",
                self.mobiles, self.settled, self.slow_vertices
            ));
        }
        for (i, r) in self.robots.iter().enumerate() {
            let at = match r.state {
                RobotState::Mobile(v) => Some((v, false)),
                RobotState::Settled(v) => Some((v, true)),
                _ => None,
            };
            if let Some((v, is_settled)) = at {
                let c = self.cells.get(&self.env, v);
                let listed = if is_settled { c.settled.and_then(|s| s.robot) } else { c.mobile };
                if listed != Some(i as u32 + 1) {
                    return Err(format!("A_{} believes it is at {v} but the cell disagrees", i + 1));
                }
            }
        }
        if strict {
            let tree = self.tree();
            if !tree.is_forest_rooted_at(self.env.sources()) {
                return Err("settled robots do not form a forest rooted at sources".into());
            }
            if self.env.sources().len() == 1 && tree.root_count() > 1 {
                return Err("single-source tree has several roots".into());
            }
        }
        Ok(())
    }
}

/// Summary of one run or replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub env: String,
    pub n: Option<usize>,
    pub c: f64,
    pub mode: Mode,
    pub adversary: String,
    pub makespan: Option<f64>,
    pub slow_makespan: Option<f64>,
    pub entered: u64,
    pub crashed: u64,
    /// Crashes per robot that entered, the percentage reported in experiment tables.
    pub crash_fraction: f64,
    /// Crashes over all entrance attempts that were resolved, `crashed / (entered + crashed)`.
    pub crash_share: f64,
    pub tree_edges: Vec<[i64; 2]>,
    /// Time of the last processed event.
    pub end_time: f64,
    /// The horizon was reached before every vertex became slow.
    pub partial: bool,
    /// Synchronous steps in which a planned move found its target taken.
    pub conflicts: u64,
    pub truncated_at: Option<f64>,
}

/// Identification of a run, copied into its [`RunResult`].
#[derive(Debug, Clone)]
pub struct RunMeta {
    pub seed: u64,
    pub c: f64,
    pub mode: Mode,
    pub adversary: String,
}

pub fn metrics(world: &World, meta: &RunMeta, end_time: f64, conflicts: u64) -> RunResult {
    let attempts = world.entered() + world.crashed();
    RunResult {
        seed: meta.seed,
        env: world.env().name().to_string(),
        n: world.env().vertex_count(),
        c: meta.c,
        mode: meta.mode,
        adversary: meta.adversary.clone(),
        makespan: world.makespan(),
        slow_makespan: world.slow_makespan(),
        entered: world.entered(),
        crashed: world.crashed(),
        crash_fraction: if world.entered() == 0 { 0.0 } else { world.crashed() as f64 / world.entered() as f64 },
        crash_share: if attempts == 0 { 0.0 } else { world.crashed() as f64 / attempts as f64 },
        tree_edges: world.tree().edges.iter().map(|&(u, v)| [u.0, v.0]).collect(),
        end_time,
        partial: world.slow_makespan().is_none(),
        conflicts,
        truncated_at: world.truncated_at(),
    }
}

/// Event-by-event checker for the properties of a generative run: settled
/// robots and slow robots never change, depths grow by at most one per
/// activation, mobile robots stand on settled ones, every new settler marks
/// an occupied neighbor (or is a root at a source), and crashes stay within
/// the budget.
#[derive(Debug, Default, Clone)]
pub struct InvariantMonitor {
    robots: Vec<Robot>,
    slow: Vec<bool>,
    settled: usize,
    slow_vertices: usize,
}

impl InvariantMonitor {
    pub fn new() -> Self {
        InvariantMonitor::default()
    }

    pub fn observe(&mut self, world: &World, budget: u64) -> Result<(), String> {
        for &r in world.dirty() {
            let i = r as usize - 1;
            if self.robots.len() <= i {
                self.robots.resize(i + 1, OUTSIDE);
                self.slow.resize(i + 1, false);
            }
            let prev = self.robots[i];
            let cur = world.robot(r);
            if let RobotState::Settled(_) = prev.state {
                if cur.state != prev.state {
                    return Err(format!("settled A_{r} changed from {:?} to {:?}", prev.state, cur.state));
                }
            }
            if self.slow[i] && (cur.state != prev.state || !world.is_slow(r)) {
                return Err(format!("slow A_{r} changed from {:?} to {:?}", prev.state, cur.state));
            }
            if cur.state != RobotState::Crashed && (cur.depth < prev.depth || cur.depth > prev.depth + 1) {
                return Err(format!("depth of A_{r} jumped from {} to {}", prev.depth, cur.depth));
            }
            match cur.state {
                RobotState::Mobile(v) if !world.occupancy(v).0 => {
                    return Err(format!("mobile A_{r} at {v} without a settled robot"));
                }
                RobotState::Settled(v) if !matches!(prev.state, RobotState::Settled(_)) => {
                    match world.occupancy(v).2 {
                        None if !world.env().sources().contains(&v) => {
                            return Err(format!("A_{r} settled as a root at non-source {v}"));
                        }
                        Some(m) if !world.occupancy(m).0 || !world.env().neighbors(v).any(|u| u == m) => {
                            return Err(format!("A_{r} at {v} marks {m}, which is not a settled neighbor"));
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
            self.robots[i] = cur;
            self.slow[i] = world.is_slow(r);
        }
        if world.settled_count() < self.settled {
            return Err("settled robot count decreased".into());
        }
        if world.slow_vertex_count() < self.slow_vertices {
            return Err("slow vertex count decreased".into());
        }
        self.settled = world.settled_count();
        self.slow_vertices = world.slow_vertex_count();
        if world.crashed() > budget {
            return Err(format!("{} crashes exceed the budget {budget}", world.crashed()));
        }
        Ok(())
    }
}
