//! Independent reference implementations used by several test targets.

#![allow(dead_code)]

/// Outcome of the direct synchronous simulation of a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathSyncRun {
    pub makespan: u64,
    /// Steps in which two robots targeted the same vertex.
    pub collisions: u64,
}

/// Simulates the dispersal rules step by step on the path `1..=n` with the
/// source at position `s`, without crashes. All robots decide on the
/// configuration at the start of the step and move simultaneously. A mobile
/// robot prefers the right neighbor, first following a child mark and then
/// settling on an empty vertex.
pub fn path_sync_oracle(n: usize, s: usize) -> PathSyncRun {
    assert!(n >= 1 && (1..=n).contains(&s));
    // Index 0 and n + 1 are walls.
    let mut settled = vec![false; n + 2];
    let mut mark = vec![0usize; n + 2];
    let mut mobile = vec![false; n + 2];
    let mut collisions = 0;
    let mut step = 0;
    while settled[1..=n].iter().any(|x| !x) {
        step += 1;
        let mut moves = Vec::new();
        let mut settles = Vec::new();
        for v in 1..=n {
            if !mobile[v] {
                continue;
            }
            let mut candidates = Vec::new();
            if v < n {
                candidates.push(v + 1);
            }
            if v > 1 {
                candidates.push(v - 1);
            }
            if let Some(&w) = candidates.iter().find(|&&w| settled[w] && !mobile[w] && mark[w] == v) {
                moves.push((v, w));
            } else if let Some(&w) = candidates.iter().find(|&&w| !settled[w] && !mobile[w]) {
                settles.push((v, w));
            }
        }
        let entering = !mobile[s];
        let mut targets: Vec<usize> = moves.iter().chain(&settles).map(|&(_, w)| w).collect();
        targets.sort_unstable();
        if targets.windows(2).any(|p| p[0] == p[1]) {
            collisions += 1;
        }
        for &(v, w) in &moves {
            mobile[v] = false;
            mobile[w] = true;
        }
        for &(v, w) in &settles {
            mobile[v] = false;
            settled[w] = true;
            mark[w] = v;
        }
        if entering {
            if settled[s] {
                mobile[s] = true;
            } else {
                settled[s] = true;
            }
        }
    }
    PathSyncRun { makespan: step, collisions }
}
