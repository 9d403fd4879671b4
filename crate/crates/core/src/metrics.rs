//! Monte-Carlo MSD trajectories, steady-state estimation and CSV output.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::theory::to_db;

/// Two halves of the steady-state window differing by more than this
/// (in dB) flag a non-stationary estimate.
pub const STATIONARITY_TOL_DB: f64 = 1.0;
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Per-iteration mean over runs of `(1/K)Σ_k‖w_{k,i} − w*‖²`, with its
/// standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdTrajectory {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub runs: usize,
}

impl MsdTrajectory {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean_db(&self) -> Vec<f64> {
        self.mean.iter().map(|&m| to_db(m)).collect()
    }

    /// Standard errors mapped to dB by the delta method.
    pub fn stderr_db(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.stderr)
            .map(|(&m, &s)| stderr_to_db(m, s))
            .collect()
    }
}

fn stderr_to_db(mean: f64, stderr: f64) -> f64 {
    if mean > 0.0 {
        10.0 / std::f64::consts::LN_10 * stderr / mean
    } else {
        0.0
    }
}

/// Streaming elementwise mean/variance over equally long series (Welford).
/// Feeding series in a fixed order gives bit-reproducible results.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: usize,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, series: &[f64]) -> Result<(), MetricsError> {
        if self.count == 0 {
            self.mean = vec![0.0; series.len()];
            self.m2 = vec![0.0; series.len()];
        } else if series.len() != self.mean.len() {
            return Err(MetricsError::InvalidInput(format!(
                "series length {} differs from {}",
                series.len(),
                self.mean.len()
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, q), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(series) {
            let d = x - *m;
            *m += d / n;
            *q += d * (x - *m);
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<MsdTrajectory, MetricsError> {
        if self.count == 0 {
            return Err(MetricsError::InvalidInput("no runs to aggregate".into()));
        }
        let n = self.count as f64;
        let stderr = if self.count > 1 {
            self.m2.iter().map(|q| (q / (n - 1.0) / n).sqrt()).collect()
        } else {
            vec![0.0; self.mean.len()]
        };
        Ok(MsdTrajectory {
            mean: self.mean,
            stderr,
            runs: self.count,
        })
    }
}

/// Elementwise mean and standard error over runs.
pub fn aggregate(runs: &[Vec<f64>]) -> Result<MsdTrajectory, MetricsError> {
    let mut acc = Accumulator::new();
    for r in runs {
        acc.add(r)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyState {
    pub mean: f64,
    /// Average of the per-iteration standard errors over the window; a
    /// conservative figure because neighbouring iterations are correlated.
    pub stderr: f64,
    pub mean_db: f64,
    pub stderr_db: f64,
    /// Number of trailing iterations averaged.
    pub window: usize,
    /// `|dB(first half) − dB(second half)|` over the window.
    pub halves_diff_db: f64,
    pub nonstationary: bool,
}

/// Mean of the trailing `window_fraction` of the trajectory.
pub fn steady_state(
    traj: &MsdTrajectory,
    window_fraction: f64,
) -> Result<SteadyState, MetricsError> {
    if !(window_fraction > 0.0 && window_fraction <= 0.5) {
        return Err(MetricsError::InvalidInput(format!(
            "window fraction must lie in (0, 0.5], got {window_fraction}"
        )));
    }
    let n = traj.len();
    let window = ((n as f64) * window_fraction).floor() as usize;
    if window == 0 {
        return Err(MetricsError::InvalidInput(format!(
            "a {window_fraction} window of {n} iterations is empty"
        )));
    }
    let tail = &traj.mean[n - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    let stderr = traj.stderr[n - window..].iter().sum::<f64>() / window as f64;
    let halves_diff_db = if window >= 2 {
        let (a, b) = tail.split_at(window / 2);
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        (to_db(ma) - to_db(mb)).abs()
    } else {
        0.0
    };
    Ok(SteadyState {
        mean,
        stderr,
        mean_db: to_db(mean),
        stderr_db: stderr_to_db(mean, stderr),
        window,
        halves_diff_db,
        nonstationary: !(halves_diff_db <= STATIONARITY_TOL_DB),
    })
}

/// CSV with columns `iteration,<name>_msd_db,<name>_stderr_db,...`.
/// A trajectory shorter than the longest one leaves its cells empty.
pub fn trajectories_to_csv(series: &[(&str, &MsdTrajectory)]) -> String {
    let mut out = String::from("iteration");
    for (name, _) in series {
        let _ = write!(out, ",{name}_msd_db,{name}_stderr_db");
    }
    out.push('\n');
    let db: Vec<(Vec<f64>, Vec<f64>)> = series
        .iter()
        .map(|(_, t)| (t.mean_db(), t.stderr_db()))
        .collect();
    let rows = series.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
    for i in 0..rows {
        let _ = write!(out, "{i}");
        for (m, s) in &db {
            if i < m.len() {
                let _ = write!(out, ",{:.6},{:.6}", m[i], s[i]);
            } else {
                out.push_str(",,");
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_is_identity() {
        let t = aggregate(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(t.mean, vec![1.0, 2.0, 3.0]);
        assert_eq!(t.stderr, vec![0.0; 3]);
        assert_eq!(t.runs, 1);
    }

    #[test]
    fn two_constant_runs_average() {
        let t = aggregate(&[vec![2.0; 4], vec![4.0; 4]]).unwrap();
        assert_eq!(t.mean, vec![3.0; 4]);
        // sample sd √2, stderr 1
        assert!(t.stderr.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ragged_and_empty_inputs_rejected() {
        assert!(aggregate(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let a = vec![1.0, 5.0, 2.5];
        let b = vec![0.5, 4.0, 7.0];
        let c = vec![3.0, 1.0, 1.5];
        let x = aggregate(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = aggregate(&[c, a, b]).unwrap();
        for i in 0..3 {
            assert!((x.mean[i] - y.mean[i]).abs() < 1e-14);
            assert!((x.stderr[i] - y.stderr[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_trajectory_steady_state() {
        let t = aggregate(&[vec![0.25; 100]]).unwrap();
        let s = steady_state(&t, 0.1).unwrap();
        assert_eq!(s.mean, 0.25);
        assert_eq!(s.stderr, 0.0);
        assert_eq!(s.window, 10);
        assert!(!s.nonstationary);
        assert!((s.mean_db - to_db(0.25)).abs() < 1e-12);
    }

    #[test]
    fn decaying_trajectory_is_flagged() {
        let series: Vec<f64> = (0..1000).map(|i| 1000.0 - i as f64).collect();
        let t = aggregate(&[series]).unwrap();
        let s = steady_state(&t, 0.2).unwrap();
        assert!(s.nonstationary);
    }

    #[test]
    fn window_validation() {
        let t = aggregate(&[vec![1.0; 5]]).unwrap();
        assert!(steady_state(&t, 0.1).is_err());
        assert!(steady_state(&t, 0.0).is_err());
        assert!(steady_state(&t, 0.6).is_err());
    }

    #[test]
    fn csv_layout() {
        let a = aggregate(&[vec![1.0, 10.0], vec![1.0, 10.0]]).unwrap();
        let b = aggregate(&[vec![100.0]]).unwrap();
        let csv = trajectories_to_csv(&[("diffusion", &a), ("exact_diffusion", &b)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "iteration,diffusion_msd_db,diffusion_stderr_db,exact_diffusion_msd_db,exact_diffusion_stderr_db"
        );
        assert_eq!(lines[1], "0,0.000000,0.000000,20.000000,0.000000");
        assert_eq!(lines[2], "1,10.000000,0.000000,,");
    }
}
