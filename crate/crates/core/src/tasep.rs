//! TASEP with step initial condition: particle `i` starts at `v_{1-i}` and
//! hops right at its activations unless the target is occupied.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RobotClock;

#[derive(Debug, Error, PartialEq)]
pub enum TasepError {
    #[error("particle {k} crossed at t = {t} before t_max; rerun with more particles")]
    TruncationExceeded { k: u32, t: f64 },
    #[error("need at least {needed} trajectories and a grid spanning {decades} decades, got {got} and {span:.3}")]
    InsufficientSamples { needed: usize, got: usize, decades: f64, span: f64 },
    #[error("zero spread at t = {0}; the fit is undefined")]
    Degenerate(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TasepTrajectory {
    /// The k-th entry is the time particle k crossed `(v_0, v_1)`.
    pub crossing_times: Vec<f64>,
    pub t_max: f64,
    pub k: u32,
}

pub fn default_particles(t_max: f64) -> u32 {
    (t_max / 2.0).ceil() as u32 + 50
}

/// Runs the exclusion process up to `t_max` with `k` particles.
///
/// Jump `j` of particle `i` happens at the first activation of `i` after its
/// jump `j - 1` and no earlier than jump `j` of particle `i - 1`; equal times
/// resolve in favor of the lower index, as in a replay of the same schedule.
/// Particle `i` crosses on its jump `i`. Particles behind the first one that
/// has not crossed by `t_max` cannot matter and are not simulated.
pub fn run_tasep(t_max: f64, k: u32, seed: u64) -> Result<TasepTrajectory, TasepError> {
    let mut crossing_times = Vec::new();
    // Jump times of the previous particle (index j - 1 holds jump j).
    let mut ahead: Vec<f64> = Vec::new();
    let mut own: Vec<f64> = Vec::new();
    for i in 1..=k {
        let mut clock = RobotClock::new(seed, i);
        own.clear();
        let mut t = 0.0;
        loop {
            let j = own.len();
            let gate = if i == 1 {
                0.0
            } else {
                match ahead.get(j) {
                    Some(&g) => g,
                    None => break,
                }
            };
            loop {
                t = clock.next_after(t);
                if t > t_max || t >= gate {
                    break;
                }
            }
            if t > t_max {
                break;
            }
            own.push(t);
        }
        match own.get(i as usize - 1) {
            Some(&crossed) => {
                if i == k {
                    return Err(TasepError::TruncationExceeded { k, t: crossed });
                }
                crossing_times.push(crossed);
            }
            None => break,
        }
        std::mem::swap(&mut ahead, &mut own);
    }
    Ok(TasepTrajectory { crossing_times, t_max, k })
}

impl TasepTrajectory {
    /// `B_t`: crossings up to and including `t`.
    pub fn crossings_by(&self, t: f64) -> usize {
        self.crossing_times.partition_point(|&x| x <= t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for t in &self.crossing_times {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }
}

/// `B_t / t`, with 0 at `t = 0`.
pub fn throughput(traj: &TasepTrajectory, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    traj.crossings_by(t) as f64 / t
}

pub const MIN_TRAJECTORIES: usize = 30;
pub const MIN_DECADES: f64 = 1.0;

/// Least-squares slope of `log std(B_t − t/4)` against `log t` across trajectories.
pub fn fluctuation_exponent(trajs: &[TasepTrajectory], t_grid: &[f64]) -> Result<f64, TasepError> {
    let span = match (t_grid.iter().cloned().reduce(f64::min), t_grid.iter().cloned().reduce(f64::max)) {
        (Some(lo), Some(hi)) if lo > 0.0 => (hi / lo).log10(),
        _ => 0.0,
    };
    if trajs.len() < MIN_TRAJECTORIES || span < MIN_DECADES || t_grid.len() < 2 {
        return Err(TasepError::InsufficientSamples {
            needed: MIN_TRAJECTORIES,
            got: trajs.len(),
            decades: MIN_DECADES,
            span,
        });
    }
    let m = trajs.len() as f64;
    let mut xs = Vec::with_capacity(t_grid.len());
    let mut ys = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let dev: Vec<f64> = trajs.iter().map(|tr| tr.crossings_by(t) as f64 - t / 4.0).collect();
        let mean = dev.iter().sum::<f64>() / m;
        let var = dev.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0);
        if var <= 0.0 {
            return Err(TasepError::Degenerate(t));
        }
        xs.push(t.ln());
        ys.push(0.5 * var.ln());
    }
    Ok(least_squares_slope(&xs, &ys))
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Log-spaced times from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..points).map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_at_time_zero() {
        let tr = run_tasep(50.0, 60, 1).unwrap();
        assert_eq!(tr.crossings_by(0.0), 0);
        assert_eq!(throughput(&tr, 0.0), 0.0);
    }

    #[test]
    fn single_particle_crosses_at_first_activation() {
        let tr = run_tasep(0.5, 2, 3);
        let first = RobotClock::new(3, 1).next_after(0.0);
        match tr {
            Ok(tr) if first > 0.5 => assert!(tr.crossing_times.is_empty()),
            Ok(tr) => assert_eq!(tr.crossing_times, vec![first]),
            Err(e) => panic!("{e}"),
        }
        // With one particle its first activation always crosses.
        let err = run_tasep(1e6, 1, 3).unwrap_err();
        assert_eq!(err, TasepError::TruncationExceeded { k: 1, t: first });
    }

    #[test]
    fn crossings_are_increasing() {
        let tr = run_tasep(400.0, 250, 9).unwrap();
        assert!(tr.crossing_times.windows(2).all(|w| w[0] < w[1]));
        assert!(tr.crossing_times.iter().all(|&t| t <= 400.0));
    }

    #[test]
    fn truncation_guard() {
        assert!(matches!(run_tasep(400.0, 20, 9), Err(TasepError::TruncationExceeded { k: 20, .. })));
    }

    #[test]
    fn fit_rejects_bad_input() {
        let tr = run_tasep(100.0, 100, 1).unwrap();
        let few = vec![tr.clone(); 5];
        assert!(matches!(
            fluctuation_exponent(&few, &[10.0, 100.0]),
            Err(TasepError::InsufficientSamples { .. })
        ));
        // Identical trajectories have zero spread.
        let same = vec![tr; 30];
        assert!(matches!(fluctuation_exponent(&same, &[10.0, 100.0]), Err(TasepError::Degenerate(_))));
    }

    #[test]
    fn slope_is_invariant_under_time_rescaling() {
        let xs = [1.0f64, 2.0, 3.0, 4.0];
        let ys = [0.5, 0.9, 1.2, 1.9];
        let shifted: Vec<f64> = xs.iter().map(|x| x + 2f64.ln()).collect();
        assert!((least_squares_slope(&xs, &ys) - least_squares_slope(&shifted, &ys)).abs() < 1e-12);
    }
}
