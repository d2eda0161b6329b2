//! Trace CSV, summary JSON and sweep CSV layouts.
//!
//! `trace.csv` has exactly these columns, in this order:
//!
//! | column | meaning |
//! |---|---|
//! | `t` | round, 1-based |
//! | `eta` | step size of the round |
//! | `eps_budget` | allowed sub-optimality per local solve |
//! | `eps_max` | largest certified sub-optimality among the round's solves |
//! | `grad_sq` | `||grad R(w_{t-1})||^2`, empty for nonsmooth losses |
//! | `moreau_sq` | Moreau stationarity squared at `w_{t-1}`, empty unless recorded |
//! | `step_norm` | `||w_t - w_{t-1}||` |
//! | `step_identity_excess` | `max_m ||w_m - w_{t-1} + eta d_m|| - 2 L eps_m eta` |
//! | `step_bound_ratio` | `max_m ||w_m - w_{t-1}|| / (G eta)` |
//! | `aggregation_error` | distance of `w_t` to an independently summed mean |
//! | `concentration_excess` | `||grad R(w_{t-1}) - d_bar||^2 - L^2 (G + 2 L eps)^2 eta^2` |
//! | `inner_iters` | largest inner iteration count of the round |
//! | `devices` | sampled device ids separated by `;` |
//!
//! Missing values are empty fields. Reals use the shortest representation
//! that round-trips.

use std::fmt::Write;

use fedprox_core::engine::residual;
use fedprox_core::{LossConstants, TraceLog};
use serde::Serialize;

use fedprox_core::diagnostics::LgdReport;

pub const TRACE_COLUMNS: [&str; 13] = [
    "t",
    "eta",
    "eps_budget",
    "eps_max",
    "grad_sq",
    "moreau_sq",
    "step_norm",
    residual::STEP_IDENTITY,
    residual::STEP_BOUND,
    residual::AGGREGATION,
    residual::CONCENTRATION,
    "inner_iters",
    "devices",
];

/// Shortest round-trip form; exponent notation for very small or large magnitudes.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn trace_csv(trace: &TraceLog) -> String {
    let mut out = TRACE_COLUMNS.join(",");
    out.push('\n');
    for r in &trace.records {
        let res = |k: &str| opt(r.invariant_residuals.get(k).copied());
        let devices: Vec<String> = r.sampled_devices.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            num(r.eta),
            num(r.eps_budget),
            num(r.eps_certified_max),
            opt(r.global_grad_sq),
            opt(r.moreau_grad_sq),
            num(r.step_norm),
            res(residual::STEP_IDENTITY),
            res(residual::STEP_BOUND),
            res(residual::AGGREGATION),
            res(residual::CONCENTRATION),
            r.inner_iterations_max,
            devices.join(";"),
        );
    }
    out
}

#[derive(Debug, Serialize)]
pub struct RunSummaryJson<'a> {
    pub algorithm: String,
    pub rounds: usize,
    pub devices_per_round: usize,
    pub minibatch: usize,
    pub seed: u64,
    pub eta: f64,
    pub eps_budget: f64,
    pub constants: LossConstants,
    pub avg_grad_sq: Option<f64>,
    pub avg_moreau_sq: Option<f64>,
    pub t_star: usize,
    pub output_w: &'a [f64],
    pub final_w: &'a [f64],
    pub lgd: Option<LgdReport>,
    pub wall_time_secs: f64,
}

/// Least-squares slope of `ln y` against `ln x` over points with both
/// coordinates positive; `None` with fewer than two such points.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [256.0, 1024.0, 4096.0].iter().map(|&t: &f64| (t, 3.0 * t.powf(-2.0 / 3.0))).collect();
        assert!((log_log_slope(&pts).unwrap() + 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&pts[..1]), None);
        assert_eq!(log_log_slope(&[(1.0, 1.0), (1.0, 2.0)]), None);
    }
}
