//! Solvers for the local proximal subproblem
//!
//! ```text
//! Q(w; w0) = R_batch(w) + ||w - w0||^2 / (2 eta)
//! ```
//!
//! Each solver returns an [`OracleReport`] whose `epsilon_certified` is a
//! proven upper bound on `Q(solution) - min Q`.
//!
//! For smooth losses the certificate is
//! `max(||grad Q||^2 / (2 lambda), ||grad Q|| / (2 L))`. The first term bounds
//! the objective gap through strong convexity; the second is also a valid
//! (larger-or-equal) gap bound whenever it dominates, and including it
//! guarantees `||grad Q(solution)|| <= 2 L eps`, which is what makes the
//! inexact step identity `||w - w0 + eta d|| <= 2 L eps eta` hold for every
//! certified call.

use serde::{Deserialize, Serialize};

use crate::linalg::SymMatrix;
use crate::numerics::{dot_slices, ParamVector, RngStream};
use crate::problems::{profile_derivative, profile_value, EmpiricalRisk, LossConstants, LossKind, LossModel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProxMethod {
    ClosedForm,
    GradientDescent,
    Subgradient,
    /// Box-constrained dual coordinate ascent (Absolute loss only), certified
    /// by the duality gap.
    DualCoordinate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub solution: ParamVector,
    pub epsilon_certified: f64,
    pub iterations: usize,
    pub method: ProxMethod,
}

#[derive(Clone, Debug)]
pub struct ProxSubproblem<'a> {
    pub risk: EmpiricalRisk<'a>,
    pub loss: LossModel,
    pub constants: LossConstants,
    pub center: ParamVector,
    pub eta: f64,
}

impl<'a> ProxSubproblem<'a> {
    pub fn new(
        risk: EmpiricalRisk<'a>,
        loss: LossModel,
        constants: LossConstants,
        center: ParamVector,
        eta: f64,
    ) -> Result<Self> {
        let sp = Self {
            risk,
            loss,
            constants,
            center,
            eta,
        };
        sp.validate()?;
        Ok(sp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.risk.dim() != self.center.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.center.dim(),
                found: self.risk.dim(),
            });
        }
        let nu = self.constants.nu;
        if nu > 0.0 && self.eta * nu >= 1.0 {
            return Err(Error::Config(format!(
                "eta = {} must be below 1/nu = {}",
                self.eta,
                1.0 / nu
            )));
        }
        Ok(())
    }

    /// Strong-convexity modulus `1/eta - nu` of `Q` (`nu = 0` for convex kinds).
    pub fn modulus(&self) -> f64 {
        self.constants.prox_modulus(self.eta)
    }

    pub fn value(&self, w: &ParamVector) -> f64 {
        self.risk.value(&self.loss, w) + w.dist(&self.center).powi(2) / (2.0 * self.eta)
    }

    /// (Sub)gradient of `Q` at `w`.
    pub fn subgradient(&self, w: &ParamVector) -> ParamVector {
        let mut g = self.risk.grad(&self.loss, w);
        g.axpy(1.0 / self.eta, w);
        g.axpy(-1.0 / self.eta, &self.center);
        g
    }

    pub fn smooth_certificate(&self, grad_norm: f64) -> f64 {
        smooth_certificate(grad_norm, self.modulus(), self.constants.l.unwrap_or(0.0))
    }
}

/// `max(g^2 / (2 lambda), g / (2 L))`, the second term only when `L > 0`.
pub fn smooth_certificate(grad_norm: f64, lambda: f64, l: f64) -> f64 {
    let gap = grad_norm * grad_norm / (2.0 * lambda);
    if l > 0.0 {
        gap.max(grad_norm / (2.0 * l))
    } else {
        gap
    }
}

/// Solves `(sum_i c_i a_i a_i^T + I/eta) w = sum_i c_i y_i a_i + w0/eta` by
/// Cholesky elimination.
pub fn prox_quadratic_exact(sp: &ProxSubproblem) -> Result<OracleReport> {
    if sp.loss.kind != LossKind::Quadratic {
        return Err(Error::Config(format!(
            "closed-form prox needs Quadratic loss, got {:?}",
            sp.loss.kind
        )));
    }
    sp.validate()?;
    let p = sp.center.dim();
    let mut h = SymMatrix::scaled_identity(p, 1.0 / sp.eta);
    let mut rhs: Vec<f64> = sp.center.iter().map(|c| c / sp.eta).collect();
    for (z, c) in sp.risk.weighted() {
        let a = z.feature.as_slice();
        h.rank_one_update(c, a);
        for (r, ai) in rhs.iter_mut().zip(a) {
            *r += c * z.label * ai;
        }
    }
    let x = h
        .cholesky_solve(&rhs)
        .ok_or_else(|| Error::NonFinite("quadratic prox system".into()))?;
    let solution = ParamVector::new(x)?;
    let residual = sp.subgradient(&solution).norm();
    Ok(OracleReport {
        epsilon_certified: sp.smooth_certificate(residual),
        solution,
        iterations: 1,
        method: ProxMethod::ClosedForm,
    })
}

pub const DEFAULT_GD_CAP: usize = 1_000_000;

/// Gradient descent on `Q` from the center with step `1/(L + 1/eta)`, stopping
/// once the smooth certificate is at most `eps_target`.
pub fn prox_smooth_gd(sp: &ProxSubproblem, eps_target: f64, max_iters: usize) -> Result<OracleReport> {
    gd_solve(sp, eps_target, max_iters, |_, _| {})
}

fn gd_solve(
    sp: &ProxSubproblem,
    eps_target: f64,
    max_iters: usize,
    mut observe: impl FnMut(&ParamVector, f64),
) -> Result<OracleReport> {
    let l = sp.constants.l.ok_or_else(|| {
        Error::Config(format!("gradient descent prox needs a smooth loss, got {:?}", sp.loss.kind))
    })?;
    if !(eps_target > 0.0) {
        return Err(Error::Config("eps_target must be positive".into()));
    }
    sp.validate()?;
    let step = 1.0 / (l + 1.0 / sp.eta);
    let mut w = sp.center.clone();
    let mut iterations = 0;
    loop {
        let g = sp.subgradient(&w);
        let cert = sp.smooth_certificate(g.norm());
        observe(&w, cert);
        if cert <= eps_target {
            return Ok(OracleReport {
                solution: w,
                epsilon_certified: cert,
                iterations,
                method: ProxMethod::GradientDescent,
            });
        }
        if iterations >= max_iters {
            return Err(Error::SolverCap {
                iterations,
                best_certificate: cert,
            });
        }
        let before = w.clone();
        w.axpy(-step, &g);
        if w == before {
            // Stalled at the floating-point floor.
            return Err(Error::SolverCap {
                iterations,
                best_certificate: cert,
            });
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("gradient descent iterate".into()));
        }
        iterations += 1;
    }
}

pub const DEFAULT_SUBGRAD_STEPS: usize = 100_000;

/// `k` steps of subgradient descent with `gamma_k = 2 / (lambda (k + 1))` and
/// `k`-weighted averaging. Certificate: `2 G_hat^2 / (lambda (k + 1))` with
/// `G_hat` the largest subgradient norm of `Q` met along the way.
pub fn prox_nonsmooth_subgrad(sp: &ProxSubproblem, k: usize) -> Result<OracleReport> {
    if k < 1 {
        return Err(Error::Config("subgradient budget must be >= 1".into()));
    }
    sp.validate()?;
    let lambda = sp.modulus();
    let p = sp.center.dim();
    let inv_eta = 1.0 / sp.eta;
    let examples: Vec<(&[f64], f64, f64)> = sp
        .risk
        .weighted()
        .map(|(z, c)| (z.feature.as_slice(), z.label, c))
        .collect();

    let mut w = sp.center.as_slice().to_vec();
    let mut avg = vec![0.0; p];
    let mut g = vec![0.0; p];
    let mut g_hat: f64 = 0.0;
    let mut weight_sum = 0.0;
    for step in 1..=k {
        for (gi, (wi, ci)) in g.iter_mut().zip(w.iter().zip(sp.center.iter())) {
            *gi = (wi - ci) * inv_eta;
        }
        for &(a, y, c) in &examples {
            let d = profile_derivative(sp.loss.kind, dot_slices(a, &w), y);
            if d != 0.0 {
                for (gi, ai) in g.iter_mut().zip(a) {
                    *gi += c * d * ai;
                }
            }
        }
        g_hat = g_hat.max(dot_slices(&g, &g).sqrt());
        let kf = step as f64;
        weight_sum += kf;
        for (ai, wi) in avg.iter_mut().zip(&w) {
            *ai += kf * wi;
        }
        let gamma = 2.0 / (lambda * (kf + 1.0));
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= gamma * gi;
        }
    }
    for a in &mut avg {
        *a /= weight_sum;
    }
    Ok(OracleReport {
        solution: ParamVector::new(avg)?,
        epsilon_certified: 2.0 * g_hat * g_hat / (lambda * (k as f64 + 1.0)),
        iterations: k,
        method: ProxMethod::Subgradient,
    })
}

pub const DEFAULT_DUAL_GAP: f64 = 1e-13;
pub const DEFAULT_DUAL_SWEEPS: usize = 200_000;

/// Exact-to-tolerance prox for `sum_i c_i |<a_i,w> - y_i|`.
///
/// The dual variable `u in [-1,1]^n` gives `w(u) = w0 - eta sum_i c_i u_i a_i`;
/// cyclic coordinate ascent maximizes the dual exactly per coordinate. The
/// duality gap `sum_i c_i (|r_i| - u_i r_i)` with `r_i = <a_i, w(u)> - y_i` is
/// a sum of nonnegative terms and certifies the primal objective gap.
pub fn prox_absolute_dual(sp: &ProxSubproblem, gap_tol: f64, max_sweeps: usize) -> Result<OracleReport> {
    if sp.loss.kind != LossKind::Absolute {
        return Err(Error::Config(format!(
            "dual coordinate prox needs Absolute loss, got {:?}",
            sp.loss.kind
        )));
    }
    sp.validate()?;
    let eta = sp.eta;
    let p = sp.center.dim();
    let items: Vec<(&[f64], f64, f64, f64)> = sp
        .risk
        .weighted()
        .map(|(z, c)| {
            let a = z.feature.as_slice();
            (a, z.label, c, dot_slices(a, a))
        })
        .collect();
    let center = sp.center.as_slice();
    let mut u = vec![0.0; items.len()];
    let mut v = vec![0.0; p];
    let mut w = center.to_vec();
    let mut sweeps = 0;
    loop {
        let gap: f64 = items
            .iter()
            .zip(&u)
            .map(|(&(a, y, c, _), &ui)| {
                let r = dot_slices(a, &w) - y;
                c * (r.abs() - ui * r)
            })
            .sum();
        if gap <= gap_tol {
            return Ok(OracleReport {
                solution: ParamVector::new(w)?,
                epsilon_certified: gap.max(0.0),
                iterations: sweeps,
                method: ProxMethod::DualCoordinate,
            });
        }
        if sweeps >= max_sweeps {
            return Err(Error::SolverCap {
                iterations: sweeps,
                best_certificate: gap,
            });
        }
        for (i, &(a, y, c, a_sq)) in items.iter().enumerate() {
            let new_u = if a_sq > 0.0 {
                let r = dot_slices(a, &w) - y;
                ((r + eta * c * u[i] * a_sq) / (eta * c * a_sq)).clamp(-1.0, 1.0)
            } else if y > 0.0 {
                -1.0
            } else {
                1.0
            };
            let delta = new_u - u[i];
            if delta != 0.0 {
                u[i] = new_u;
                for j in 0..p {
                    v[j] += c * delta * a[j];
                    w[j] = center[j] - eta * v[j];
                }
            }
        }
        sweeps += 1;
    }
}

/// Epoch-wise minibatch SGD from `w0`; no certificate.
pub fn local_sgd_epochs(
    batch: &[crate::Example],
    loss: &LossModel,
    w0: &ParamVector,
    epochs: usize,
    lr: f64,
    minibatch: usize,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    if epochs < 1 {
        return Err(Error::Config("local SGD needs epochs >= 1".into()));
    }
    if minibatch < 1 {
        return Err(Error::Config("local SGD needs minibatch >= 1".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut w = w0.clone();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }
        for chunk in order.chunks(minibatch) {
            let mut g = ParamVector::zeros(w.dim());
            for &i in chunk {
                let z = &batch[i];
                let d = profile_derivative(loss.kind, z.margin(&w), z.label);
                g.axpy_slice(d, z.feature.as_slice());
            }
            w.axpy(-lr / chunk.len() as f64, &g);
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("local SGD iterate".into()));
        }
    }
    Ok(w)
}

/// How the engine resolves a local solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerSolverConfig {
    #[serde(default = "default_cap")]
    pub max_iters: usize,
    /// Steps for the subgradient oracle.
    #[serde(default = "default_subgrad")]
    pub subgrad_steps: usize,
    /// Tolerance used for "exact" smooth solves.
    #[serde(default = "default_exact_eps")]
    pub exact_eps: f64,
    /// Route exact Absolute-loss solves through the dual solver instead of
    /// `subgrad_steps` subgradient steps.
    #[serde(default)]
    pub absolute_dual: bool,
    #[serde(default = "default_gap")]
    pub dual_gap_tol: f64,
}

fn default_cap() -> usize {
    DEFAULT_GD_CAP
}
fn default_subgrad() -> usize {
    DEFAULT_SUBGRAD_STEPS
}
fn default_exact_eps() -> f64 {
    1e-13
}
fn default_gap() -> f64 {
    DEFAULT_DUAL_GAP
}

impl Default for InnerSolverConfig {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_GD_CAP,
            subgrad_steps: DEFAULT_SUBGRAD_STEPS,
            exact_eps: default_exact_eps(),
            absolute_dual: false,
            dual_gap_tol: DEFAULT_DUAL_GAP,
        }
    }
}

/// Dispatches to the appropriate oracle. `eps_target = None` asks for the
/// tightest available solve.
pub fn solve(sp: &ProxSubproblem, eps_target: Option<f64>, cfg: &InnerSolverConfig) -> Result<OracleReport> {
    match sp.loss.kind {
        LossKind::Quadratic => prox_quadratic_exact(sp),
        LossKind::Logistic | LossKind::SigmoidSquared => {
            let target = eps_target.map_or(cfg.exact_eps, |e| e.max(f64::MIN_POSITIVE));
            prox_smooth_gd(sp, target, cfg.max_iters)
        }
        LossKind::Absolute if cfg.absolute_dual => prox_absolute_dual(sp, cfg.dual_gap_tol, DEFAULT_DUAL_SWEEPS),
        LossKind::Absolute | LossKind::PhaseRetrieval => prox_nonsmooth_subgrad(sp, cfg.subgrad_steps),
    }
}

/// Evaluates `Q` from raw parts; handy for oracles in tests.
pub fn q_value(kind: LossKind, risk: &EmpiricalRisk, center: &ParamVector, eta: f64, w: &ParamVector) -> f64 {
    risk.weighted()
        .map(|(z, c)| c * profile_value(kind, z.margin(w), z.label))
        .sum::<f64>()
        + w.dist(center).powi(2) / (2.0 * eta)
}
