//! Convergence monitoring.
//!
//! Records the Euclidean norm of every aggregated update and judges whether
//! the run is in a contraction regime: the windowed moving average of the
//! norms must be non-increasing and every recent successive-norm ratio must
//! stay below one. Raw norms wobble; the moving average is what trends.
//! A small fixed-point iteration demo exercises the same criterion on a map
//! whose contraction factor is known exactly.

use crate::error::{Error, Result};
use serde::Serialize;

/// Append-only history of `||delta theta||` per round.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTrace {
    window: usize,
    norms: Vec<f64>,
    moving_avgs: Vec<f64>,
    q_hats: Vec<Option<f64>>,
}

impl ConvergenceTrace {
    /// `window` is the moving-average width used for the recorded series.
    pub fn new(window: usize) -> Self {
        ConvergenceTrace {
            window: window.max(1),
            norms: Vec::new(),
            moving_avgs: Vec::new(),
            q_hats: Vec::new(),
        }
    }

    /// Records one aggregated update vector.
    pub fn record(&mut self, delta: &[f64]) {
        let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        self.record_norm(norm);
    }

    /// Records a precomputed norm.
    pub fn record_norm(&mut self, norm: f64) {
        assert!(norm >= 0.0 && norm.is_finite(), "norms are nonnegative");
        let q = match self.norms.last() {
            Some(&prev) if prev > 0.0 => Some(norm / prev),
            _ => None,
        };
        self.norms.push(norm);
        let start = self.norms.len().saturating_sub(self.window);
        let tail = &self.norms[start..];
        self.moving_avgs
            .push(tail.iter().sum::<f64>() / tail.len() as f64);
        self.q_hats.push(q);
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn moving_avgs(&self) -> &[f64] {
        &self.moving_avgs
    }

    pub fn q_hats(&self) -> &[Option<f64>] {
        &self.q_hats
    }

    /// CSV body: `round,delta_norm,moving_avg,q_hat` (q_hat blank where
    /// undefined). Rounds are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,delta_norm,moving_avg,q_hat\n");
        for (i, ((norm, avg), q)) in self
            .norms
            .iter()
            .zip(self.moving_avgs.iter())
            .zip(self.q_hats.iter())
            .enumerate()
        {
            match q {
                Some(q) => out.push_str(&format!("{},{norm},{avg},{q}\n", i + 1)),
                None => out.push_str(&format!("{},{norm},{avg},\n", i + 1)),
            }
        }
        out
    }
}

/// Outcome of the contraction test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdict {
    pub contracting: bool,
    /// Largest successive-norm ratio in the inspected window; absent when
    /// no ratio was defined there.
    pub q_max: Option<f64>,
}

/// Judges the trailing `window` rounds: contracting iff the `window`-wide
/// moving average is non-increasing there and every defined ratio stays
/// below one. Returns `None` when there is not enough history
/// (`trace.len() < window` or `window < 2`).
pub fn contraction_verdict(trace: &ConvergenceTrace, window: usize) -> Option<Verdict> {
    if window < 2 || trace.len() < window {
        return None;
    }
    let norms = trace.norms();
    let n = norms.len();
    // Moving averages recomputed at the verdict's window, not the trace's.
    let ma = |t: usize| -> f64 {
        let start = (t + 1).saturating_sub(window);
        let tail = &norms[start..=t];
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let mut non_increasing = true;
    for t in n - window + 1..n {
        if ma(t) > ma(t - 1) {
            non_increasing = false;
            break;
        }
    }
    let mut q_max: Option<f64> = None;
    for t in n - window..n {
        if t >= 1 && norms[t - 1] > 0.0 {
            let q = norms[t] / norms[t - 1];
            q_max = Some(q_max.map_or(q, |m: f64| m.max(q)));
        }
    }
    let ratios_ok = q_max.is_none_or(|q| q < 1.0);
    Some(Verdict {
        contracting: non_increasing && ratios_ok,
        q_max,
    })
}

/// Trajectory of the affine fixed-point iteration `x -> a*x + b`.
#[derive(Debug, Clone)]
pub struct BanachDemo {
    /// `x_0 ..= x_n`.
    pub iterates: Vec<f64>,
    /// Analytic fixed point `b / (1 - a)`.
    pub fixed_point: f64,
    /// Final iterate.
    pub estimate: f64,
    /// Successive-difference ratios `|x_{n+1}-x_n| / |x_n-x_{n-1}|`.
    pub ratios: Vec<f64>,
}

/// Iterates the contraction `x -> a*x + b` from `x0`. Requires `|a| < 1`.
pub fn banach_demo(a: f64, b: f64, x0: f64, iterations: usize) -> Result<BanachDemo> {
    if !a.is_finite() || a.abs() >= 1.0 {
        return Err(Error::Input(format!(
            "map factor must satisfy |a| < 1, got {a}"
        )));
    }
    if !b.is_finite() || !x0.is_finite() {
        return Err(Error::Input("map offset and start must be finite".into()));
    }
    let mut iterates = Vec::with_capacity(iterations + 1);
    iterates.push(x0);
    let mut x = x0;
    for _ in 0..iterations {
        x = a * x + b;
        iterates.push(x);
    }
    let mut ratios = Vec::new();
    for w in iterates.windows(3) {
        let prev = (w[1] - w[0]).abs();
        let next = (w[2] - w[1]).abs();
        if prev > 0.0 {
            ratios.push(next / prev);
        }
    }
    Ok(BanachDemo {
        fixed_point: b / (1.0 - a),
        estimate: x,
        iterates,
        ratios,
    })
}
