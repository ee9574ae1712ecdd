//! Coupled replays of one event order on the base graph G and the slower
//! comparison environments P(n), P(∞), P*(∞) and B, with checks of the
//! inequalities that relate them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adversary::AdversaryPolicy;
use crate::dispersal::{CopyState, CopyView, SlowRule, TieBreak, World, WorldOptions};
use crate::engine::{DeletionRule, EngineError, EventRecord, Generator, Mode, Replayer, RunConfig, StopAt};
use crate::env::{infinite_path, path_graph, EnvironmentGraph, InfiniteVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvTag {
    G,
    Pn,
    Pinf,
    Pstar,
    B,
}

impl EnvTag {
    pub const ALL: [EnvTag; 5] = [EnvTag::G, EnvTag::Pn, EnvTag::Pinf, EnvTag::Pstar, EnvTag::B];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Aggregate counts of every environment after a meaningful event.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counters {
    /// Indexed robots inside each environment (dummies excluded).
    pub robots: [usize; 5],
    pub mobiles: [usize; 5],
    pub slow_vertices_g: usize,
    pub slow_vertices_pn: usize,
    pub b_crossings: u64,
    pub pstar_entered: u64,
    pub pstar_deleted_outside: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Change {
    pub env: EnvTag,
    pub robot: u32,
    pub view: CopyView,
}

/// Configuration right after the record at `t` (which stays in force until
/// the next meaningful time), stored as the changes since the previous
/// snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub counters: Counters,
    pub changes: Vec<Change>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub env: String,
    pub n: usize,
    pub c: f64,
    pub seed: u64,
    pub max_index: u32,
    /// Initial configuration (B's pre-placed robots).
    pub initial: Vec<Change>,
    pub snapshots: Vec<Snapshot>,
    pub slow_makespan_g: Option<f64>,
    pub slow_makespan_pn: Option<f64>,
    pub horizon_hit: bool,
    /// Deletions that hit a settled or slow robot of P(n): (time, robot).
    pub protected_deletions: Vec<(f64, u32)>,
    /// Records outside the meaningful times that changed some configuration.
    pub silent_changes: Vec<(f64, u32)>,
    pub records: usize,
}

#[derive(Debug, Clone)]
pub struct CoupleConfig {
    pub env: Arc<EnvironmentGraph>,
    pub policy: AdversaryPolicy,
    pub seed: u64,
    pub horizon: Option<f64>,
    pub max_index: Option<u32>,
    pub slow_rule: SlowRule,
    pub tie_break: TieBreak,
}

impl CoupleConfig {
    pub fn new(env: Arc<EnvironmentGraph>, policy: AdversaryPolicy, seed: u64) -> Self {
        CoupleConfig {
            env,
            policy,
            seed,
            horizon: None,
            max_index: None,
            slow_rule: SlowRule::default(),
            tie_break: TieBreak::default(),
        }
    }
}

struct Tracker {
    views: Vec<Vec<CopyView>>,
    pending: Vec<Change>,
}

const UNSEEN: CopyView = CopyView { state: CopyState::Outside, slow: false, depth: 0, position: None };

impl Tracker {
    /// Records the views of `robots` in `world` that differ from the last
    /// recorded ones; returns whether anything changed.
    fn note(&mut self, env: EnvTag, world: &World, robots: &[u32]) -> bool {
        let views = &mut self.views[env.slot()];
        let mut changed = false;
        for &r in robots {
            let i = r as usize - 1;
            if views.len() <= i {
                views.resize(i + 1, UNSEEN);
            }
            let view = world.copy_view(r);
            if views[i] != view {
                views[i] = view;
                self.pending.push(Change { env, robot: r, view });
                changed = true;
            }
        }
        changed
    }
}

/// Generates an event order on a single-source finite environment and
/// replays it, event by event, on the four comparison environments.
pub fn couple(cfg: CoupleConfig) -> Result<CouplingReport, EngineError> {
    let n = cfg.env.vertex_count().ok_or_else(|| EngineError::NotFinite(cfg.env.name().to_string()))?;
    assert_eq!(cfg.env.sources().len(), 1, "coupling needs a single source");
    let mut run = RunConfig::new(Arc::clone(&cfg.env), cfg.policy.clone(), cfg.seed);
    run.mode = Mode::Async;
    run.horizon = cfg.horizon;
    run.max_index = cfg.max_index;
    run.stop = StopAt::Horizon;
    run.world.slow_rule = cfg.slow_rule;
    run.world.tie_break = cfg.tie_break;
    let mut gen = Generator::new(run)?;
    let k = gen.max_index();
    let opts = WorldOptions { slow_rule: cfg.slow_rule, tie_break: cfg.tie_break, max_index: Some(k) };
    let pn_env = Arc::new(path_graph(n).expect("n >= 1"));
    let mut pn = Replayer::new(pn_env, opts.clone(), DeletionRule::AsLogged);
    let mut pinf = Replayer::new(Arc::new(infinite_path(InfiniteVariant::Plain)), opts.clone(), DeletionRule::AsLogged);
    let mut pstar =
        Replayer::new(Arc::new(infinite_path(InfiniteVariant::Prefilled)), opts.clone(), DeletionRule::AsLogged);
    let mut b = Replayer::new(Arc::new(infinite_path(InfiniteVariant::TasepB)), opts, DeletionRule::IgnoreDeletions);

    let mut tracker = Tracker { views: vec![Vec::new(); 5], pending: Vec::new() };
    let all_b: Vec<u32> = (1..=k).collect();
    tracker.note(EnvTag::B, b.world(), &all_b);
    let initial = std::mem::take(&mut tracker.pending);

    let mut report = CouplingReport {
        env: cfg.env.name().to_string(),
        n,
        c: cfg.policy.c,
        seed: cfg.seed,
        max_index: k,
        initial,
        snapshots: Vec::new(),
        slow_makespan_g: None,
        slow_makespan_pn: None,
        horizon_hit: false,
        protected_deletions: Vec::new(),
        silent_changes: Vec::new(),
        records: 0,
    };
    let mut meaningful = 0usize;
    loop {
        if gen.world().all_slow() && pn.world().all_slow() {
            break;
        }
        if gen.advance()?.is_none() {
            report.horizon_hit = true;
            break;
        }
        let record: EventRecord = *gen.log().last().expect("one record per event");
        report.records += 1;
        if record.is_deletion() {
            let view = pn.world().copy_view(record.robot_index);
            if view.state == CopyState::Settled || view.slow {
                report.protected_deletions.push((record.time, record.robot_index));
            }
        }
        pn.apply(&record)?;
        pinf.apply(&record)?;
        pstar.apply(&record)?;
        b.apply(&record)?;
        let mut changed = tracker.note(EnvTag::G, gen.world(), gen.world().dirty());
        changed |= tracker.note(EnvTag::Pn, pn.world(), pn.world().dirty());
        changed |= tracker.note(EnvTag::Pinf, pinf.world(), pinf.world().dirty());
        changed |= tracker.note(EnvTag::Pstar, pstar.world(), pstar.world().dirty());
        changed |= tracker.note(EnvTag::B, b.world(), b.world().dirty());
        let is_meaningful = record.robot_index as usize <= meaningful + 1;
        if !is_meaningful {
            if changed {
                report.silent_changes.push((record.time, record.robot_index));
            }
            continue;
        }
        meaningful += 1;
        let worlds = [gen.world(), pn.world(), pinf.world(), pstar.world(), b.world()];
        let counters = Counters {
            robots: worlds.map(World::robots_inside),
            mobiles: worlds.map(World::mobile_count),
            slow_vertices_g: gen.world().slow_vertex_count(),
            slow_vertices_pn: pn.world().slow_vertex_count(),
            b_crossings: b.world().crossings(),
            pstar_entered: pstar.world().entered(),
            pstar_deleted_outside: pstar.world().crashed_outside(),
        };
        report.snapshots.push(Snapshot { t: record.time, counters, changes: std::mem::take(&mut tracker.pending) });
    }
    report.slow_makespan_g = gen.world().slow_makespan();
    report.slow_makespan_pn = pn.world().slow_makespan();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    /// The horizon was reached before the quantity was defined.
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub status: Status,
    pub first_violation: Option<String>,
}

impl Verdict {
    fn from_violation(check: &str, violation: Option<String>) -> Verdict {
        Verdict {
            check: check.to_string(),
            status: if violation.is_some() { Status::Fail } else { Status::Pass },
            first_violation: violation,
        }
    }
}

/// Walks the snapshots, rebuilding every environment's per-robot views, and
/// returns the first message `f` produces.
fn walk(
    report: &CouplingReport,
    mut f: impl FnMut(&Snapshot, &[Vec<CopyView>; 5]) -> Option<String>,
) -> Option<String> {
    let mut views: [Vec<CopyView>; 5] = Default::default();
    let apply = |views: &mut [Vec<CopyView>; 5], ch: &Change| {
        let v = &mut views[ch.env.slot()];
        let i = ch.robot as usize - 1;
        if v.len() <= i {
            v.resize(i + 1, UNSEEN);
        }
        v[i] = ch.view;
    };
    for ch in &report.initial {
        apply(&mut views, ch);
    }
    for snap in &report.snapshots {
        for ch in &snap.changes {
            apply(&mut views, ch);
        }
        if let Some(msg) = f(snap, &views) {
            return Some(format!("t = {}: {msg}", snap.t));
        }
    }
    None
}

fn view(views: &[Vec<CopyView>; 5], env: EnvTag, robot: usize) -> CopyView {
    views[env.slot()].get(robot).copied().unwrap_or(UNSEEN)
}

fn robots_seen(views: &[Vec<CopyView>; 5]) -> usize {
    views.iter().map(Vec::len).max().unwrap_or(0)
}

/// Statements (a) and (b) relating each robot's copies in G and P(n).
pub fn check_statements_ab(report: &CouplingReport) -> Verdict {
    let violation = walk(report, |_, views| {
        for i in 0..robots_seen(views) {
            let g = view(views, EnvTag::G, i);
            let p = view(views, EnvTag::Pn, i);
            if g.state == CopyState::Crashed || p.state == CopyState::Crashed {
                continue;
            }
            let g_done = g.slow || g.state == CopyState::Settled;
            let p_done = p.slow || p.state == CopyState::Settled;
            if !g_done && g.depth < p.depth {
                return Some(format!("(a) fails for A_{}: depth {} in G < {} in P(n)", i + 1, g.depth, p.depth));
            }
            if p_done && !g_done {
                return Some(format!("(b) fails for A_{}: done in P(n) but not in G", i + 1));
            }
            if p_done && g.depth > p.depth {
                return Some(format!("(b) fails for A_{}: depth {} in G > {} in P(n)", i + 1, g.depth, p.depth));
            }
        }
        None
    });
    Verdict::from_violation("statements-ab", violation)
}

/// The slow makespan of G is at most that of P(n); once P(n) holds two slow
/// robots on every vertex, so does G.
pub fn check_prop_slow_makespan(report: &CouplingReport) -> Verdict {
    let name = "prop-slow-makespan";
    let n = report.n;
    let violation = walk(report, |snap, _| {
        (snap.counters.slow_vertices_pn == n && snap.counters.slow_vertices_g != n).then(|| {
            format!("P(n) is all slow but G has only {} slow vertices", snap.counters.slow_vertices_g)
        })
    });
    if violation.is_some() {
        return Verdict::from_violation(name, violation);
    }
    match (report.slow_makespan_g, report.slow_makespan_pn) {
        (Some(g), Some(p)) if g > p => {
            Verdict::from_violation(name, Some(format!("slow makespan {g} in G exceeds {p} in P(n)")))
        }
        (Some(_), Some(_)) => Verdict::from_violation(name, None),
        (None, Some(p)) => Verdict::from_violation(name, Some(format!("P(n) all slow at {p} but G never was"))),
        _ => Verdict { check: name.into(), status: Status::Indeterminate, first_violation: None },
    }
}

/// P(n) and P(∞) hold the same number of robots before P(n) is all slow.
pub fn check_pn_pinf(report: &CouplingReport) -> Verdict {
    let until = report.slow_makespan_pn.unwrap_or(f64::INFINITY);
    let violation = walk(report, |snap, _| {
        let (p, q) = (snap.counters.robots[EnvTag::Pn.slot()], snap.counters.robots[EnvTag::Pinf.slot()]);
        (snap.t < until && p != q).then(|| format!("{p} robots in P(n) but {q} in P(inf)"))
    });
    Verdict::from_violation("pn-pinf-counts", violation)
}

/// Mobile robots in P*(∞) never outnumber the robots in P(∞).
pub fn check_pinf_pstar(report: &CouplingReport) -> Verdict {
    let violation = walk(report, |snap, _| {
        let (m, total) = (snap.counters.mobiles[EnvTag::Pstar.slot()], snap.counters.robots[EnvTag::Pinf.slot()]);
        (m > total).then(|| format!("{m} mobile robots in P*(inf) but {total} robots in P(inf)"))
    });
    Verdict::from_violation("pinf-pstar-counts", violation)
}

/// Crossings of B's (v_0, v_1) edge are bounded by P*(∞)'s entries plus
/// deletions before entry, and each B robot's position is at most its depth
/// in P*(∞).
pub fn check_b_pstar(report: &CouplingReport) -> Verdict {
    let violation = walk(report, |snap, views| {
        let c = &snap.counters;
        if c.b_crossings > c.pstar_entered + c.pstar_deleted_outside {
            return Some(format!(
                "{} crossings in B but {} entries and {} early deletions in P*(inf)",
                c.b_crossings, c.pstar_entered, c.pstar_deleted_outside
            ));
        }
        for i in 0..robots_seen(views) {
            let s = view(views, EnvTag::Pstar, i);
            let b = view(views, EnvTag::B, i);
            if s.state == CopyState::Crashed {
                continue;
            }
            let pos = b.position.unwrap_or(b.depth as i64 - i as i64);
            if pos > s.depth as i64 {
                return Some(format!("A_{} is at position {pos} in B beyond depth {} in P*(inf)", i + 1, s.depth));
            }
        }
        None
    });
    Verdict::from_violation("b-pstar", violation)
}

/// Settled and slow robots of P(n) are never deleted.
pub fn check_pn_protected(report: &CouplingReport) -> Verdict {
    let violation = report
        .protected_deletions
        .first()
        .map(|(t, r)| format!("t = {t}: deletion of settled or slow A_{r} in P(n)"));
    Verdict::from_violation("pn-protected", violation)
}

/// No record outside the meaningful times changes any configuration.
pub fn check_meaningful_only(report: &CouplingReport) -> Verdict {
    let violation = report
        .silent_changes
        .first()
        .map(|(t, r)| format!("t = {t}: A_{r} changed a configuration at a non-meaningful time"));
    Verdict::from_violation("meaningful-times", violation)
}

pub fn check_all(report: &CouplingReport) -> Vec<Verdict> {
    vec![
        check_statements_ab(report),
        check_prop_slow_makespan(report),
        check_pn_pinf(report),
        check_pinf_pstar(report),
        check_b_pstar(report),
        check_pn_protected(report),
        check_meaningful_only(report),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub env: String,
    pub n: usize,
    pub c: f64,
    pub seed: u64,
    pub records: usize,
    pub meaningful_times: usize,
    pub slow_makespan_g: Option<f64>,
    pub slow_makespan_pn: Option<f64>,
    pub horizon_hit: bool,
    pub verdicts: Vec<Verdict>,
}

impl CouplingReport {
    pub fn summary(&self) -> CouplingSummary {
        CouplingSummary {
            env: self.env.clone(),
            n: self.n,
            c: self.c,
            seed: self.seed,
            records: self.records,
            meaningful_times: self.snapshots.len(),
            slow_makespan_g: self.slow_makespan_g,
            slow_makespan_pn: self.slow_makespan_pn,
            horizon_hit: self.horizon_hit,
            verdicts: check_all(self),
        }
    }
}

impl CouplingSummary {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.status != Status::Fail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::PolicyKind;
    use crate::env::parse_graph_file;

    fn couple_on(env: EnvironmentGraph, c: f64, seed: u64) -> CouplingReport {
        let kind = if c > 0.0 { PolicyKind::Random { p: 1.0 } } else { PolicyKind::None };
        let policy = AdversaryPolicy::new(kind, c, Mode::Async).unwrap();
        couple(CoupleConfig::new(Arc::new(env), policy, seed)).unwrap()
    }

    #[test]
    fn self_coupling_on_a_path() {
        let report = couple_on(path_graph(5).unwrap(), 0.0, 4);
        assert_eq!(report.slow_makespan_g, report.slow_makespan_pn);
        let mismatch = walk(&report, |_, views| {
            (views[EnvTag::G.slot()] != views[EnvTag::Pn.slot()]).then(|| "G and P(n) differ".to_string())
        });
        assert_eq!(mismatch, None);
        assert!(report.summary().all_pass());
    }

    #[test]
    fn first_snapshot_is_first_activation_of_a1() {
        let report = couple_on(path_graph(3).unwrap(), 0.0, 8);
        let first = &report.snapshots[0];
        let a1: Vec<_> = first.changes.iter().filter(|c| c.robot == 1).map(|c| c.env).collect();
        // A_1 enters G, P(n), P(inf), P*(inf) and crosses into v_1 in B.
        assert_eq!(a1, EnvTag::ALL.to_vec());
        assert_eq!(first.counters.b_crossings, 1);
        assert_eq!(first.counters.pstar_entered, 1);
    }

    #[test]
    fn random_graph_with_crashes_passes() {
        let text = r#"{"n": 10, "sources": [1], "edges": [[1,2],[2,3],[3,4],[2,5],[5,6],[6,7],[1,8],[8,9],[9,10],[10,4]]}"#;
        for seed in 0..4 {
            let report = couple_on(parse_graph_file(text).unwrap(), 0.25, seed);
            let summary = report.summary();
            assert!(summary.all_pass(), "{:?}", summary.verdicts);
        }
    }

    #[test]
    fn star_is_no_slower_than_path() {
        let text = r#"{"n": 5, "sources": [1], "edges": [[1,2],[1,3],[1,4],[1,5]]}"#;
        let mut strict = 0;
        for seed in 0..10 {
            let r = couple_on(parse_graph_file(text).unwrap(), 0.0, seed);
            let (g, p) = (r.slow_makespan_g.unwrap(), r.slow_makespan_pn.unwrap());
            assert!(g <= p);
            strict += (g < p) as usize;
        }
        assert!(strict >= 5);
    }
}
