//! Stationarity and heterogeneity measurements.

use serde::{Deserialize, Serialize};

use crate::datagen::FederatedInstance;
use crate::numerics::{ParamVector, RngStream};
use crate::problems::{EmpiricalRisk, Example, LossConstants, LossKind};
use crate::prox::{self, InnerSolverConfig, OracleReport, ProxSubproblem};
use crate::{Error, Result};

/// `grad R_m(w)` for every device.
pub fn device_grads(inst: &FederatedInstance, w: &ParamVector) -> Result<Vec<ParamVector>> {
    if !inst.loss.kind.is_smooth() {
        return Err(Error::UseMoreauGrad(inst.loss.kind));
    }
    inst.devices
        .iter()
        .map(|d| Ok(EmpiricalRisk::uniform(&d.examples)?.grad(&inst.loss, w)))
        .collect()
}

/// `(1/M) sum_m grad R_m(w)`.
pub fn global_grad(inst: &FederatedInstance, w: &ParamVector) -> Result<ParamVector> {
    Ok(ParamVector::mean(device_grads(inst, w)?.iter()))
}

pub fn global_grad_sq(inst: &FederatedInstance, w: &ParamVector) -> Result<f64> {
    Ok(global_grad(inst, w)?.norm_sq())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoreauConfig {
    pub rho: f64,
    /// Subgradient budget for the pooled prox (nonsmooth kinds).
    #[serde(default = "default_k")]
    pub inner_k: usize,
    /// Certificate target for the pooled prox (smooth kinds).
    #[serde(default = "default_eps")]
    pub inner_eps: f64,
    /// Absolute loss: solve the pooled prox by dual coordinate ascent.
    #[serde(default = "yes")]
    pub absolute_dual: bool,
}

fn default_k() -> usize {
    prox::DEFAULT_SUBGRAD_STEPS
}

fn default_eps() -> f64 {
    1e-12
}

fn yes() -> bool {
    true
}

impl MoreauConfig {
    pub fn new(rho: f64) -> Self {
        Self {
            rho,
            inner_k: default_k(),
            inner_eps: default_eps(),
            absolute_dual: true,
        }
    }

    pub fn validate(&self, c: &LossConstants) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("moreau rho = {} must be positive", self.rho)));
        }
        if c.nu > 0.0 && self.rho >= 1.0 / (2.0 * c.nu) {
            return Err(Error::Config(format!(
                "moreau rho = {} must be below 1/(2 nu) = {}",
                self.rho,
                1.0 / (2.0 * c.nu)
            )));
        }
        if let Some(l) = c.l {
            if self.rho * l >= 1.0 {
                return Err(Error::Config(format!("moreau rho = {} must be below 1/L = {}", self.rho, 1.0 / l)));
            }
        }
        Ok(())
    }
}

/// `prox_{rho R}(w)` over the pooled data, solved with the tight inner solver.
pub fn pooled_prox(inst: &FederatedInstance, w: &ParamVector, cfg: &MoreauConfig) -> Result<(OracleReport, f64)> {
    cfg.validate(&inst.constants)?;
    let slices = inst.device_slices();
    let sp = ProxSubproblem::new(
        EmpiricalRisk::mixture(&slices)?,
        inst.loss,
        inst.constants,
        w.clone(),
        cfg.rho,
    )?;
    let inner = InnerSolverConfig {
        subgrad_steps: cfg.inner_k,
        exact_eps: cfg.inner_eps,
        absolute_dual: cfg.absolute_dual,
        ..InnerSolverConfig::default()
    };
    let report = prox::solve(&sp, None, &inner)?;
    let value = sp.value(&report.solution);
    Ok((report, value))
}

/// `||grad R_rho(w)|| = ||w - prox_{rho R}(w)|| / rho`.
pub fn moreau_grad(inst: &FederatedInstance, w: &ParamVector, cfg: &MoreauConfig) -> Result<f64> {
    let (report, _) = pooled_prox(inst, w, cfg)?;
    Ok(w.dist(&report.solution) / cfg.rho)
}

/// The envelope value `min_u R(u) + ||u - w||^2 / (2 rho)`, accurate to the
/// inner certificate.
pub fn moreau_envelope(inst: &FederatedInstance, w: &ParamVector, cfg: &MoreauConfig) -> Result<f64> {
    Ok(pooled_prox(inst, w, cfg)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgdReport {
    /// Smallest `B^2` with `H = 0`; absent when every probe is stationary.
    pub b_sq_min_h0: Option<f64>,
    /// Smallest `H^2` with `B = 1`.
    pub h_sq_min_b1: f64,
    pub probe_count: usize,
}

/// Extremal corners of the feasible `(B^2, H^2)` region for
/// `(1/M) sum_m ||grad R_m||^2 <= B^2 ||grad R||^2 + H^2` over the probes.
pub fn lgd_fit(inst: &FederatedInstance, probes: &[ParamVector]) -> Result<LgdReport> {
    if probes.len() < 2 {
        return Err(Error::Config("lgd_fit needs at least 2 probes".into()));
    }
    let mut b_sq: Option<f64> = None;
    let mut h_sq: f64 = 0.0;
    for w in probes {
        let grads = device_grads(inst, w)?;
        let x = ParamVector::mean(grads.iter()).norm_sq();
        let y = grads.iter().map(ParamVector::norm_sq).sum::<f64>() / grads.len() as f64;
        if x > 1e-14 {
            let r = y / x;
            b_sq = Some(b_sq.map_or(r, |b| b.max(r)));
        }
        h_sq = h_sq.max(y - x);
    }
    Ok(LgdReport {
        b_sq_min_h0: b_sq,
        h_sq_min_b1: h_sq,
        probe_count: probes.len(),
    })
}

/// `extra` points uniform in the domain ball, appended to `iterates`.
pub fn default_probes(inst: &FederatedInstance, iterates: &[ParamVector], extra: usize, rng: &mut RngStream) -> Vec<ParamVector> {
    let p = inst.dim;
    let r = inst.loss.domain_radius;
    let mut out = iterates.to_vec();
    for _ in 0..extra {
        let g: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let radius = r * rng.uniform().powf(1.0 / p as f64);
        out.push(ParamVector::new(g.iter().map(|x| x * radius / n).collect()).expect("finite probe"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub d_per_device: Vec<ParamVector>,
    /// Mean over the sampled devices.
    pub d_t: ParamVector,
    /// Mean over all `M` devices; present when `all_directions` was supplied.
    pub d_bar_t: Option<ParamVector>,
    /// `mean_m [(w_m - w_prev) / eta + d_m]`
    pub delta_t: ParamVector,
}

/// `d_m` is the gradient of device `m`'s batch risk at its local solution.
pub fn direction_stats(
    inst: &FederatedInstance,
    w_prev: &ParamVector,
    eta: f64,
    solutions: &[ParamVector],
    batches: &[&[Example]],
    all_directions: Option<&[ParamVector]>,
) -> Result<DirectionStats> {
    if solutions.is_empty() || solutions.len() != batches.len() {
        return Err(Error::Config("need one batch per local solution".into()));
    }
    if !inst.loss.kind.is_smooth() {
        return Err(Error::UseMoreauGrad(inst.loss.kind));
    }
    let d_per_device: Vec<ParamVector> = solutions
        .iter()
        .zip(batches)
        .map(|(w, b)| Ok(EmpiricalRisk::uniform(b)?.grad(&inst.loss, w)))
        .collect::<Result<_>>()?;
    let deltas: Vec<ParamVector> = solutions
        .iter()
        .zip(&d_per_device)
        .map(|(w, d)| {
            let mut v = w.sub(w_prev).scaled(1.0 / eta);
            v.axpy(1.0, d);
            v
        })
        .collect();
    Ok(DirectionStats {
        d_t: ParamVector::mean(d_per_device.iter()),
        d_bar_t: all_directions.map(|a| ParamVector::mean(a.iter())),
        delta_t: ParamVector::mean(deltas.iter()),
        d_per_device,
    })
}

/// Monte Carlo over device resampling at a frozen state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingCheck {
    /// Largest `|mean(d_t)_j - d_bar_j| / SE_j` over coordinates.
    pub max_z: f64,
    /// Estimate of `E ||d_t - d_bar||^2` and its standard error.
    pub mse: f64,
    pub mse_se: f64,
    /// `G^2 / I`
    pub bound: f64,
    pub mean_ok: bool,
    pub variance_ok: bool,
}

/// Resamples `I` of the `M` directions `trials` times without replacement
/// and compares `d_t` with the all-device mean.
pub fn sampling_check(directions: &[ParamVector], g: f64, i: usize, trials: usize, rng: &mut RngStream) -> Result<SamplingCheck> {
    let m = directions.len();
    if trials < 2 {
        return Err(Error::Config("sampling_check needs >= 2 trials".into()));
    }
    let d_bar = ParamVector::mean(directions.iter());
    let p = d_bar.dim();
    let mut sum = vec![0.0; p];
    let mut sum_sq = vec![0.0; p];
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let idx = crate::engine::sample_devices(rng, m, i)?;
        let d_t = ParamVector::mean(idx.iter().map(|&k| &directions[k]));
        for j in 0..p {
            sum[j] += d_t[j];
            sum_sq[j] += d_t[j] * d_t[j];
        }
        errs.push(d_t.sub(&d_bar).norm_sq());
    }
    let n = trials as f64;
    let mut max_z: f64 = 0.0;
    let mut mean_ok = true;
    for j in 0..p {
        let mean = sum[j] / n;
        let var = ((sum_sq[j] / n - mean * mean) * n / (n - 1.0)).max(0.0);
        let se = (var / n).sqrt();
        let dev = (mean - d_bar[j]).abs();
        let slack = 1e-12 * (1.0 + d_bar[j].abs());
        if dev > 4.0 * se + slack {
            mean_ok = false;
        }
        if se > 0.0 {
            max_z = max_z.max(dev / se);
        }
    }
    let mse = errs.iter().sum::<f64>() / n;
    let mse_var = errs.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (n - 1.0);
    let mse_se = (mse_var / n).sqrt();
    let bound = g * g / i as f64;
    let rel = if mse > 0.0 { mse_se / mse } else { 0.0 };
    Ok(SamplingCheck {
        max_z,
        mse,
        mse_se,
        bound,
        mean_ok,
        variance_ok: mse <= bound * (1.0 + 3.0 * rel),
    })
}

/// Pooled data for a scalar `|w|` instance, handy for checks.
pub fn absolute_value_instance() -> FederatedInstance {
    let z = Example::new(vec![1.0], 0.0).expect("finite");
    FederatedInstance::from_devices(vec![vec![z]], crate::problems::LossModel::new(LossKind::Absolute))
        .expect("valid instance")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_instance, HeterogeneityConfig};
    use crate::numerics::derive_stream;
    use crate::problems::LossModel;

    fn pv(x: &[f64]) -> ParamVector {
        ParamVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn nonsmooth_grad_is_refused() {
        let inst = absolute_value_instance();
        assert!(matches!(global_grad_sq(&inst, &pv(&[1.0])), Err(Error::UseMoreauGrad(_))));
    }

    #[test]
    fn cancelling_devices() {
        let a = Example::new(vec![1.0], 1.0).unwrap();
        let b = Example::new(vec![1.0], -1.0).unwrap();
        let inst = FederatedInstance::from_devices(vec![vec![a], vec![b]], LossModel::new(LossKind::Quadratic)).unwrap();
        // device gradients at 0 are -1 and +1
        assert_eq!(global_grad_sq(&inst, &pv(&[0.0])).unwrap(), 0.0);
        let lgd = lgd_fit(&inst, &[pv(&[0.0]), pv(&[0.0])]).unwrap();
        assert_eq!(lgd.b_sq_min_h0, None);
        assert!((lgd.h_sq_min_b1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pooled_least_squares_is_stationary() {
        let mut cfg = HeterogeneityConfig::new(3, 3, 15);
        cfg.shift = 1.0;
        let inst = generate_instance(&cfg, LossModel::new(LossKind::Quadratic), 2).unwrap();
        // The pooled minimizer is the prox fixed point: iterate the exact prox.
        let mc = MoreauConfig::new(0.5 / inst.constants.l.unwrap());
        let mut w = pv(&[0.0, 0.0, 0.0]);
        for _ in 0..2000 {
            w = pooled_prox(&inst, &w, &mc).unwrap().0.solution;
        }
        assert!(global_grad_sq(&inst, &w).unwrap() <= 1e-20);
        assert!(moreau_grad(&inst, &w, &mc).unwrap() <= 1e-6);
    }

    #[test]
    fn global_grad_matches_finite_difference() {
        let mut cfg = HeterogeneityConfig::new(4, 3, 10);
        cfg.shift = 1.0;
        let inst = generate_instance(&cfg, LossModel::new(LossKind::Logistic), 8).unwrap();
        let w = pv(&[0.3, -0.2, 0.5]);
        let g = global_grad(&inst, &w).unwrap();
        let slices = inst.device_slices();
        let risk = EmpiricalRisk::mixture(&slices).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut a = w.clone();
            a[j] += h;
            let mut b = w.clone();
            b[j] -= h;
            let fd = (risk.value(&inst.loss, &a) - risk.value(&inst.loss, &b)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3), "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn soft_threshold_moreau_values() {
        let inst = absolute_value_instance();
        let mc = MoreauConfig::new(1.0);
        assert!((moreau_grad(&inst, &pv(&[3.0]), &mc).unwrap() - 1.0).abs() < 1e-12);
        assert!((moreau_grad(&inst, &pv(&[0.5]), &mc).unwrap() - 0.5).abs() < 1e-12);
        let mut sub = mc;
        sub.absolute_dual = false;
        assert!((moreau_grad(&inst, &pv(&[3.0]), &sub).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn moreau_identity_matches_envelope_difference() {
        let inst = absolute_value_instance();
        let mc = MoreauConfig::new(1.0);
        let h = 1e-5;
        for w in [3.0, 0.5, 0.0, -0.7] {
            let id = moreau_grad(&inst, &pv(&[w]), &mc).unwrap();
            let fd = (moreau_envelope(&inst, &pv(&[w + h]), &mc).unwrap()
                - moreau_envelope(&inst, &pv(&[w - h]), &mc).unwrap())
                / (2.0 * h);
            assert!((id - fd.abs()).abs() < 1e-4, "{w}: {id} vs {fd}");
        }
    }

    #[test]
    fn smooth_moreau_agrees_with_gradient() {
        let mut cfg = HeterogeneityConfig::new(3, 4, 20);
        cfg.shift = 1.0;
        cfg.feature_norm = Some(1.0);
        let inst = generate_instance(&cfg, LossModel::new(LossKind::SigmoidSquared), 6).unwrap();
        let l = inst.constants.l.unwrap();
        let w = pv(&[0.5, -1.0, 0.2, 0.3]);
        let g2 = global_grad_sq(&inst, &w).unwrap();
        for rho in [1e-3, 1e-4] {
            let mut mc = MoreauConfig::new(rho);
            mc.inner_eps = 1e-10;
            let m2 = moreau_grad(&inst, &w, &mc).unwrap().powi(2);
            assert!((m2 / g2 - 1.0).abs() <= 3.0 * l * rho, "rho {rho}: {m2} vs {g2}");
        }
    }

    #[test]
    fn homogeneous_lgd_is_one_zero() {
        let mut cfg = HeterogeneityConfig::new(5, 3, 20);
        cfg.shared_data = true;
        let inst = generate_instance(&cfg, LossModel::new(LossKind::Logistic), 1).unwrap();
        let probes = default_probes(&inst, &[], 10, &mut derive_stream(1, &[6]));
        let r = lgd_fit(&inst, &probes).unwrap();
        assert!((r.b_sq_min_h0.unwrap() - 1.0).abs() < 1e-6);
        assert!(r.h_sq_min_b1 <= 1e-8);
        assert_eq!(r.probe_count, 10);
    }

    #[test]
    fn dissimilarity_grows_with_shift() {
        let mut last = -1.0;
        for shift in [0.0, 1.0, 2.0] {
            let mut cfg = HeterogeneityConfig::new(6, 3, 40);
            cfg.shift = shift;
            let inst = generate_instance(&cfg, LossModel::new(LossKind::Quadratic), 4).unwrap();
            let probes = default_probes(&inst, &[], 10, &mut derive_stream(4, &[6]));
            let h = lgd_fit(&inst, &probes).unwrap().h_sq_min_b1;
            assert!(h >= last, "shift {shift}: {h} < {last}");
            last = h;
        }
    }

    #[test]
    fn direction_stats_reductions() {
        let mut cfg = HeterogeneityConfig::new(3, 2, 8);
        cfg.shift = 1.0;
        let inst = generate_instance(&cfg, LossModel::new(LossKind::Quadratic), 3).unwrap();
        let w = pv(&[0.1, 0.2]);
        let eta = 0.05;
        let mut sols = Vec::new();
        for d in &inst.devices {
            let sp = ProxSubproblem::new(
                EmpiricalRisk::uniform(&d.examples).unwrap(),
                inst.loss,
                inst.constants,
                w.clone(),
                eta,
            )
            .unwrap();
            sols.push(prox::prox_quadratic_exact(&sp).unwrap());
        }
        let batches = inst.device_slices();
        let solutions: Vec<ParamVector> = sols.iter().map(|r| r.solution.clone()).collect();
        let full = direction_stats(&inst, &w, eta, &solutions, &batches, None).unwrap();
        let all = full.d_per_device.clone();
        let full = direction_stats(&inst, &w, eta, &solutions, &batches, Some(&all)).unwrap();
        assert_eq!(full.d_bar_t.as_ref().unwrap(), &full.d_t);
        let l = inst.constants.l.unwrap();
        let eps = sols.iter().map(|r| r.epsilon_certified).fold(0.0, f64::max);
        assert!(full.delta_t.norm() <= 2.0 * l * eps + 1e-9);
        let one = direction_stats(&inst, &w, eta, &solutions[1..2], &batches[1..2], None).unwrap();
        assert_eq!(one.d_t, full.d_per_device[1]);
    }

    #[test]
    fn sampling_statistics() {
        let mut rng = derive_stream(10, &[0]);
        let dirs: Vec<ParamVector> = (0..8).map(|_| pv(&[rng.normal(), rng.normal()])).collect();
        let g = dirs.iter().map(ParamVector::norm).fold(0.0, f64::max);
        let c = sampling_check(&dirs, g, 3, 10_000, &mut rng).unwrap();
        assert!(c.mean_ok && c.variance_ok, "{c:?}");
        // Without replacement: E||d_t - d_bar||^2 = (M - I) / (I (M - 1)) * mean ||d_m - d_bar||^2.
        let d_bar = ParamVector::mean(dirs.iter());
        let spread = dirs.iter().map(|d| d.sub(&d_bar).norm_sq()).sum::<f64>() / 8.0;
        let exact = 5.0 / (3.0 * 7.0) * spread;
        assert!((c.mse - exact).abs() <= 4.0 * c.mse_se, "{} vs {exact}", c.mse);
        let full = sampling_check(&dirs, g, 8, 100, &mut rng).unwrap();
        assert!(full.mse < 1e-25 && full.mean_ok);
    }
}
