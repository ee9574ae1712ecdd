//! Budgeted crash adversaries.
//!
//! Every policy is capped by the same time-proportional budget: no more than
//! `⌊c·t/d⌋` crashes may have happened up to and including time `t`, with
//! `d = 4` for asynchronous runs and `d = 2` for synchronous ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Mode;

/// Maximum number of crashes allowed up to time `t`.
pub fn budget(c: f64, t: f64, rate_divisor: u32) -> u64 {
    if c <= 0.0 || t <= 0.0 {
        return 0;
    }
    (c * t / rate_divisor as f64).floor() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub t_min: f64,
    pub t_max: f64,
    pub robot_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicyKind {
    None,
    /// Crash with probability `p` whenever the budget allows.
    Random { p: f64 },
    /// Crash the deepest mobile robot whenever the budget allows.
    Eager,
    Scripted { entries: Vec<ScriptEntry> },
}

#[derive(Debug, Error, PartialEq)]
pub enum AdversaryError {
    #[error("crash density c = {0} is outside [0, 1)")]
    BadDensity(f64),
    #[error("random policy probability {0} is outside [0, 1]")]
    BadProbability(f64),
    #[error("script entry {index} demands crash #{index} by t = {t_max} but the budget there is {budget}")]
    ScriptBudgetViolation { index: usize, t_max: f64, budget: u64 },
    #[error("malformed script: {0}")]
    Script(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryPolicy {
    pub kind: PolicyKind,
    pub c: f64,
    pub rate_divisor: u32,
}

impl AdversaryPolicy {
    pub fn new(kind: PolicyKind, c: f64, mode: Mode) -> Result<Self, AdversaryError> {
        if !(0.0..1.0).contains(&c) {
            return Err(AdversaryError::BadDensity(c));
        }
        let rate_divisor = match mode {
            Mode::Async => 4,
            Mode::Sync => 2,
        };
        match &kind {
            PolicyKind::Random { p } if !(0.0..=1.0).contains(p) => {
                return Err(AdversaryError::BadProbability(*p));
            }
            PolicyKind::Scripted { entries } => {
                let mut by_deadline: Vec<&ScriptEntry> = entries.iter().collect();
                by_deadline.sort_by(|a, b| a.t_max.total_cmp(&b.t_max));
                for (k, entry) in by_deadline.iter().enumerate() {
                    let available = budget(c, entry.t_max, rate_divisor);
                    if available < (k + 1) as u64 {
                        return Err(AdversaryError::ScriptBudgetViolation {
                            index: k + 1,
                            t_max: entry.t_max,
                            budget: available,
                        });
                    }
                }
            }
            _ => {}
        }
        Ok(AdversaryPolicy { kind, c, rate_divisor })
    }

    pub fn none(mode: Mode) -> Self {
        AdversaryPolicy::new(PolicyKind::None, 0.0, mode).expect("c = 0 is valid")
    }

    /// Parses a script file: a JSON list of `{t_min, t_max, robot_index}`.
    pub fn scripted_from_json(text: &str, c: f64, mode: Mode) -> Result<Self, AdversaryError> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(text).map_err(|e| AdversaryError::Script(e.to_string()))?;
        AdversaryPolicy::new(PolicyKind::Scripted { entries }, c, mode)
    }

    pub fn budget_at(&self, t: f64) -> u64 {
        budget(self.c, t, self.rate_divisor)
    }

    pub fn label(&self) -> String {
        match &self.kind {
            PolicyKind::None => "none".into(),
            PolicyKind::Random { p } if *p == 1.0 => "random".into(),
            PolicyKind::Random { p } => format!("random:{p}"),
            PolicyKind::Eager => "eager".into(),
            PolicyKind::Scripted { .. } => "scripted".into(),
        }
    }
}

/// A movement attempt the adversary may turn into a crash.
#[derive(Debug, Clone, Copy)]
pub struct CrashQuery {
    pub t: f64,
    pub robot: u32,
    /// Depth before the move; 0 for an entrance attempt.
    pub depth: u32,
    pub is_entry: bool,
    /// Largest depth among mobile robots currently in the environment (0 if none).
    pub deepest_mobile: u32,
}

/// Per-run adversary state.
#[derive(Debug, Clone)]
pub struct Adversary {
    policy: AdversaryPolicy,
    rng: ChaCha8Rng,
    crashes: u64,
    used: Vec<bool>,
}

impl Adversary {
    pub fn new(policy: AdversaryPolicy, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Robot clocks use streams 1.. of the same seed.
        rng.set_stream(u64::MAX);
        let used = match &policy.kind {
            PolicyKind::Scripted { entries } => vec![false; entries.len()],
            _ => Vec::new(),
        };
        Adversary { policy, rng, crashes: 0, used }
    }

    pub fn policy(&self) -> &AdversaryPolicy {
        &self.policy
    }

    pub fn crashes(&self) -> u64 {
        self.crashes
    }

    /// Decides whether the attempted move in `q` crashes, and counts it if so.
    pub fn decide_crash(&mut self, q: &CrashQuery) -> bool {
        if self.crashes + 1 > self.policy.budget_at(q.t) {
            return false;
        }
        let crash = match &self.policy.kind {
            PolicyKind::None => false,
            PolicyKind::Random { p } => *p >= 1.0 || (*p > 0.0 && self.rng.random::<f64>() < *p),
            PolicyKind::Eager => q.depth >= q.deepest_mobile,
            PolicyKind::Scripted { entries } => {
                let hit = entries.iter().enumerate().position(|(k, e)| {
                    !self.used[k] && e.robot_index == q.robot && e.t_min <= q.t && q.t <= e.t_max
                });
                match hit {
                    Some(k) => {
                        self.used[k] = true;
                        true
                    }
                    None => false,
                }
            }
        };
        if crash {
            self.crashes += 1;
        }
        crash
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query(t: f64) -> CrashQuery {
        CrashQuery { t, robot: 1, depth: 3, is_entry: false, deepest_mobile: 3 }
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(budget(0.0, 1e9, 4), 0);
        assert_eq!(budget(0.25, 100.0, 4), 6);
        assert_eq!(budget(0.8, 613.0, 4), 122);
        assert_eq!(budget(0.5, 10.0, 2), 2);
        assert_eq!(budget(0.5, 0.0, 2), 0);
    }

    #[test]
    fn none_never_crashes() {
        let mut adv = Adversary::new(AdversaryPolicy::none(Mode::Async), 1);
        assert!((0..1000).all(|i| !adv.decide_crash(&query(i as f64))));
    }

    #[test]
    fn saturating_random_tracks_budget() {
        let policy = AdversaryPolicy::new(PolicyKind::Random { p: 1.0 }, 0.5, Mode::Async).unwrap();
        let mut adv = Adversary::new(policy, 9);
        let mut t = 0.0;
        while t < 200.0 {
            adv.decide_crash(&query(t));
            assert!(adv.crashes() <= budget(0.5, t, 4));
            t += 0.37;
        }
        // Attempts arrive much faster than the budget grows, so it is saturated.
        assert!(adv.crashes() + 1 >= budget(0.5, 200.0, 4));
    }

    #[test]
    fn eager_prefers_deepest() {
        let policy = AdversaryPolicy::new(PolicyKind::Eager, 0.75, Mode::Async).unwrap();
        let mut adv = Adversary::new(policy, 0);
        let shallow = CrashQuery { t: 100.0, robot: 2, depth: 1, is_entry: false, deepest_mobile: 4 };
        assert!(!adv.decide_crash(&shallow));
        let deep = CrashQuery { depth: 4, ..shallow };
        assert!(adv.decide_crash(&deep));
    }

    #[test]
    fn scripted_policy() {
        let text = r#"[{"t_min": 10.0, "t_max": 20.0, "robot_index": 3}]"#;
        let policy = AdversaryPolicy::scripted_from_json(text, 0.5, Mode::Async).unwrap();
        let mut adv = Adversary::new(policy, 0);
        assert!(!adv.decide_crash(&CrashQuery { robot: 3, ..query(5.0) }));
        assert!(!adv.decide_crash(&CrashQuery { robot: 2, ..query(12.0) }));
        assert!(adv.decide_crash(&CrashQuery { robot: 3, ..query(12.0) }));
        // Each entry fires once.
        assert!(!adv.decide_crash(&CrashQuery { robot: 3, ..query(13.0) }));
    }

    #[test]
    fn script_beyond_budget_is_rejected() {
        // Budget at t = 7 with c = 0.5 is ⌊0.875⌋ = 0.
        let text = r#"[{"t_min": 0.0, "t_max": 7.0, "robot_index": 1}]"#;
        assert!(matches!(
            AdversaryPolicy::scripted_from_json(text, 0.5, Mode::Async),
            Err(AdversaryError::ScriptBudgetViolation { index: 1, .. })
        ));
        assert_eq!(
            AdversaryPolicy::new(PolicyKind::None, 1.0, Mode::Async).unwrap_err(),
            AdversaryError::BadDensity(1.0)
        );
    }
}
