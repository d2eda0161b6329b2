//! The federated driver.
//!
//! Each round `t = 1..=T` starts from `w_{t-1}`, samples `I` devices uniformly
//! without replacement, solves one local subproblem per sampled device in
//! parallel and sets `w_t` to the unweighted mean of the local solutions.
//! Diagnostics recorded for round `t` are evaluated at `w_{t-1}`, so the
//! trace averages cover `w_0, ..., w_{T-1}`.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{DeviceDataset, FederatedInstance, PopulationSpec};
use crate::diagnostics::{self, MoreauConfig};
use crate::numerics::{derive_stream, purpose, ParamVector, RngStream};
use crate::problems::{EmpiricalRisk, Example, LossKind};
use crate::prox::{self, InnerSolverConfig, ProxSubproblem};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    FedProx,
    FedMSPP,
    FedAvg,
    /// One prox step on the pooled risk `(1/M) sum_m R_m` per round.
    CentralPPA,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    /// `(1/3L) min(T^-1/3, sqrt(I/T))`
    SmoothFedProx,
    /// `(1/8L) min(T^-1/3, sqrt(bI/T))`
    SmoothFedMSPP,
    /// `rho / sqrt(T)`
    NonsmoothRho(f64),
    Manual(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum EpsPolicy {
    #[default]
    TheoremBudget,
    Fixed(f64),
    Exact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    #[default]
    Empirical,
    Population,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgConfig {
    pub epochs: usize,
    pub lr: f64,
    pub minibatch: usize,
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.01,
            minibatch: 10,
        }
    }
}

/// What gets measured each round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordConfig {
    /// `||grad R(w_{t-1})||^2` (smooth kinds only).
    #[serde(default = "yes")]
    pub grad: bool,
    /// Moreau-envelope stationarity at `w_{t-1}`.
    #[serde(default)]
    pub moreau: bool,
    /// Solve the unsampled devices too and record the gap between
    /// `grad R(w_{t-1})` and the all-device mean direction (FedProx, smooth).
    #[serde(default)]
    pub concentration: bool,
}

fn yes() -> bool {
    true
}

impl Default for RecordConfig {
    fn default() -> Self {
        Self {
            grad: true,
            moreau: false,
            concentration: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// `T`
    pub rounds: usize,
    /// `I`
    pub devices_per_round: usize,
    /// `b` (FedMSPP only)
    #[serde(default = "one")]
    pub minibatch: usize,
    pub schedule: Schedule,
    #[serde(default)]
    pub eps_policy: EpsPolicy,
    #[serde(default)]
    pub sampling_mode: SamplingMode,
    #[serde(default)]
    pub seed: u64,
    /// Settings for the recorded Moreau stationarity; by default `rho` is
    /// the schedule's and the inner solver is the tightest available.
    #[serde(default)]
    pub moreau: Option<MoreauConfig>,
    #[serde(default)]
    pub fedavg: FedAvgConfig,
    #[serde(default)]
    pub inner: InnerSolverConfig,
    /// Starting point; the origin when absent.
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
    /// FedMSPP: use each device's whole dataset instead of a sampled minibatch.
    #[serde(default)]
    pub full_batch: bool,
    #[serde(default)]
    pub record: RecordConfig,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, rounds: usize, devices_per_round: usize, schedule: Schedule) -> Self {
        Self {
            algorithm,
            rounds,
            devices_per_round,
            minibatch: 1,
            schedule,
            eps_policy: EpsPolicy::TheoremBudget,
            sampling_mode: SamplingMode::Empirical,
            seed: 0,
            moreau: None,
            fedavg: FedAvgConfig::default(),
            inner: InnerSolverConfig::default(),
            w0: None,
            full_batch: false,
            record: RecordConfig::default(),
        }
    }

    /// The Moreau settings a run records with, if any can be resolved.
    pub fn moreau_config(&self) -> Option<MoreauConfig> {
        self.moreau.or(match self.schedule {
            Schedule::NonsmoothRho(r) => Some(MoreauConfig::new(r)),
            _ => None,
        })
    }

    /// Checks the config against an instance and returns the resolved `eta`.
    pub fn validate(&self, inst: &FederatedInstance) -> Result<f64> {
        let m = inst.num_devices();
        if self.rounds < 1 {
            return Err(Error::Config("run.rounds must be >= 1".into()));
        }
        if self.devices_per_round < 1 || self.devices_per_round > m {
            return Err(Error::Config(format!(
                "run.devices_per_round = {} must lie in [1, M = {m}]",
                self.devices_per_round
            )));
        }
        if self.minibatch < 1 {
            return Err(Error::Config("run.minibatch must be >= 1".into()));
        }
        if self.sampling_mode == SamplingMode::Population {
            if self.algorithm != Algorithm::FedMSPP {
                return Err(Error::Config("run.sampling_mode = Population requires FedMSPP".into()));
            }
            if inst.population.is_none() {
                return Err(Error::Config("run.sampling_mode = Population needs an instance population".into()));
            }
        }
        if let EpsPolicy::Fixed(e) = self.eps_policy {
            if !(e > 0.0) {
                return Err(Error::Config(format!("run.eps_policy Fixed({e}) must be positive")));
            }
        }
        if let Some(w0) = &self.w0 {
            if w0.len() != inst.dim {
                return Err(Error::Config(format!(
                    "run.w0 has dimension {}, instance has {}",
                    w0.len(),
                    inst.dim
                )));
            }
        }
        if self.algorithm == Algorithm::FedAvg
            && (self.fedavg.epochs < 1 || self.fedavg.minibatch < 1 || !(self.fedavg.lr >= 0.0))
        {
            return Err(Error::Config("run.fedavg needs epochs >= 1, minibatch >= 1, lr >= 0".into()));
        }
        let c = &inst.constants;
        let eta = schedule_eta(
            self.schedule,
            c.l,
            c.nu,
            self.rounds,
            self.devices_per_round,
            self.minibatch,
        )?;
        let smooth_schedule = matches!(self.schedule, Schedule::SmoothFedProx | Schedule::SmoothFedMSPP);
        let limit = if smooth_schedule { c.curvature() } else { c.nu };
        if self.algorithm != Algorithm::FedAvg && limit > 0.0 && eta * limit >= 1.0 {
            return Err(Error::Config(format!(
                "run.schedule gives eta = {eta}, which must be below 1/{} = {}",
                if smooth_schedule { "L" } else { "nu" },
                1.0 / limit
            )));
        }
        if self.record.moreau {
            self.moreau_config()
                .ok_or_else(|| Error::Config("run.record.moreau needs run.moreau or a NonsmoothRho schedule".into()))?
                .validate(&inst.constants)?;
        }
        Ok(eta)
    }
}

/// The constant per-round step size prescribed by `schedule`.
pub fn schedule_eta(schedule: Schedule, l: Option<f64>, nu: f64, t: usize, i: usize, b: usize) -> Result<f64> {
    let t = t as f64;
    let need_l = || {
        l.filter(|l| *l > 0.0)
            .ok_or_else(|| Error::Config("smooth schedule needs a smooth loss with L > 0".into()))
    };
    let eta = match schedule {
        Schedule::SmoothFedProx => (1.0 / (3.0 * need_l()?)) * t.powf(-1.0 / 3.0).min((i as f64 / t).sqrt()),
        Schedule::SmoothFedMSPP => {
            (1.0 / (8.0 * need_l()?)) * t.powf(-1.0 / 3.0).min(((b * i) as f64 / t).sqrt())
        }
        Schedule::NonsmoothRho(rho) => {
            if !(rho > 0.0) {
                return Err(Error::Config(format!("rho = {rho} must be positive")));
            }
            if nu > 0.0 && rho >= 1.0 / (2.0 * nu) {
                return Err(Error::Config(format!(
                    "rho = {rho} must be below 1/(2 nu) = {}",
                    1.0 / (2.0 * nu)
                )));
            }
            rho / t.sqrt()
        }
        Schedule::Manual(eta) => eta,
    };
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("step size {eta} must be positive and finite")));
    }
    Ok(eta)
}

/// The per-round sub-optimality ceiling allowed by the smooth theorems.
/// Nonsmooth kinds (`l = None`) and FedAvg get 0.
pub fn epsilon_budget(algorithm: Algorithm, g: f64, l: Option<f64>, eta: f64, i: usize, b: usize) -> f64 {
    let Some(l) = l else { return 0.0 };
    let (i, b) = (i as f64, b as f64);
    match algorithm {
        Algorithm::FedProx | Algorithm::CentralPPA => (g / (2.0 * l * i.sqrt())).min(g * eta / i),
        Algorithm::FedMSPP => (g / (2.0 * l))
            .min(g * g * eta / (8.0 * b * b))
            .min(g * eta / (2.0 * b * i)),
        Algorithm::FedAvg => 0.0,
    }
}

/// Uniform `I`-subset of `0..M` (partial Fisher-Yates), sorted ascending.
pub fn sample_devices(rng: &mut RngStream, m: usize, i: usize) -> Result<Vec<usize>> {
    if i < 1 || i > m {
        return Err(Error::Config(format!("cannot sample {i} of {m} devices")));
    }
    let mut pool: Vec<usize> = (0..m).collect();
    for k in 0..i {
        let j = k + rng.below(m - k);
        pool.swap(k, j);
    }
    pool.truncate(i);
    pool.sort_unstable();
    Ok(pool)
}

pub enum BatchSource<'a> {
    Empirical(&'a DeviceDataset),
    Population(&'a PopulationSpec, usize),
}

/// `b` i.i.d. draws: with replacement from the device data, or fresh from the
/// device's population.
pub fn sample_minibatch(rng: &mut RngStream, source: BatchSource, b: usize) -> Result<Vec<Example>> {
    if b < 1 {
        return Err(Error::Config("minibatch size must be >= 1".into()));
    }
    match source {
        BatchSource::Empirical(d) => {
            if d.is_empty() {
                return Err(Error::EmptyBatch);
            }
            Ok((0..b).map(|_| d.examples[rng.below(d.len())].clone()).collect())
        }
        BatchSource::Population(spec, m) => Ok((0..b).map(|_| spec.sample(rng, m)).collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub sampled_devices: Vec<usize>,
    pub eta: f64,
    pub eps_budget: f64,
    pub eps_certified_max: f64,
    pub global_grad_sq: Option<f64>,
    pub moreau_grad_sq: Option<f64>,
    pub step_norm: f64,
    pub inner_iterations_max: usize,
    pub invariant_residuals: BTreeMap<String, f64>,
}

/// Residual names in [`RoundRecord::invariant_residuals`].
pub mod residual {
    /// `max_m ||w_m - w_{t-1} + eta d_m|| - 2 L eps_m eta` (smooth kinds).
    pub const STEP_IDENTITY: &str = "step_identity_excess";
    /// `max_m ||w_m - w_{t-1}|| / (G eta)`.
    pub const STEP_BOUND: &str = "step_bound_ratio";
    /// `||w_t - mean_m w_m||` against an independently summed mean.
    pub const AGGREGATION: &str = "aggregation_error";
    /// `||grad R(w_{t-1}) - d_bar||^2 - L^2 (G + 2 L eps)^2 eta^2`.
    pub const CONCENTRATION: &str = "concentration_excess";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub avg_grad_sq: Option<f64>,
    pub avg_moreau_sq: Option<f64>,
    pub t_star: usize,
    pub eta: f64,
    pub final_w: ParamVector,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLog {
    pub records: Vec<RoundRecord>,
    /// `w_0, ..., w_T`
    pub iterates: Vec<ParamVector>,
    pub summary: RunSummary,
}

impl TraceLog {
    /// The output model `w_{t*}`.
    pub fn output(&self) -> &ParamVector {
        &self.iterates[self.summary.t_star]
    }

    pub fn max_residual(&self, name: &str) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.invariant_residuals.get(name).copied())
            .reduce(f64::max)
    }
}

struct LocalOutcome {
    solution: ParamVector,
    eps: f64,
    iterations: usize,
    /// Batch gradient at the solution (smooth kinds).
    direction: Option<ParamVector>,
}

struct Plan<'a> {
    inst: &'a FederatedInstance,
    cfg: &'a RunConfig,
    eta: f64,
    target: Option<f64>,
}

impl<'a> Plan<'a> {
    fn new(inst: &'a FederatedInstance, cfg: &'a RunConfig) -> Result<(Self, f64)> {
        let eta = cfg.validate(inst)?;
        let c = &inst.constants;
        let budget = epsilon_budget(cfg.algorithm, c.g, c.l, eta, cfg.devices_per_round, cfg.minibatch);
        let (target, eps_budget) = match cfg.eps_policy {
            EpsPolicy::TheoremBudget if inst.loss.kind.is_smooth() => (Some(budget), budget),
            EpsPolicy::TheoremBudget | EpsPolicy::Exact => (None, 0.0),
            EpsPolicy::Fixed(e) => (Some(e), e),
        };
        Ok((Self { inst, cfg, eta, target }, eps_budget))
    }

    fn local(&self, w: &ParamVector, t: usize, m: usize) -> Result<LocalOutcome> {
        let inst = self.inst;
        let cfg = self.cfg;
        let device = &inst.devices[m];
        if cfg.algorithm == Algorithm::FedAvg {
            let mut rng = derive_stream(cfg.seed, &[purpose::LOCAL_SGD, t as u64, m as u64]);
            let f = &cfg.fedavg;
            let solution = prox::local_sgd_epochs(&device.examples, &inst.loss, w, f.epochs, f.lr, f.minibatch, &mut rng)?;
            return Ok(LocalOutcome {
                solution,
                eps: 0.0,
                iterations: f.epochs,
                direction: None,
            });
        }
        let drawn;
        let batch: &[Example] = if cfg.algorithm == Algorithm::FedMSPP && !cfg.full_batch {
            let mut rng = derive_stream(cfg.seed, &[purpose::MINIBATCH, t as u64, m as u64]);
            let source = match cfg.sampling_mode {
                SamplingMode::Empirical => BatchSource::Empirical(device),
                SamplingMode::Population => BatchSource::Population(
                    inst.population.as_ref().expect("validated population"),
                    m,
                ),
            };
            drawn = sample_minibatch(&mut rng, source, cfg.minibatch)?;
            &drawn
        } else {
            &device.examples
        };
        self.solve(EmpiricalRisk::uniform(batch)?, w)
    }

    fn solve(&self, risk: EmpiricalRisk, w: &ParamVector) -> Result<LocalOutcome> {
        let inst = self.inst;
        let sp = ProxSubproblem::new(risk, inst.loss, inst.constants, w.clone(), self.eta)?;
        let report = prox::solve(&sp, self.target, &self.cfg.inner)?;
        let direction = inst
            .loss
            .kind
            .is_smooth()
            .then(|| sp.risk.grad(&sp.loss, &report.solution));
        Ok(LocalOutcome {
            solution: report.solution,
            eps: report.epsilon_certified,
            iterations: report.iterations,
            direction,
        })
    }
}

fn kahan_mean(vs: &[&ParamVector]) -> ParamVector {
    let p = vs[0].dim();
    let mut out = vec![0.0; p];
    for (j, o) in out.iter_mut().enumerate() {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for v in vs.iter().rev() {
            let y = v[j] - comp;
            let s = sum + y;
            comp = (s - sum) - y;
            sum = s;
        }
        *o = sum / vs.len() as f64;
    }
    ParamVector::new(out).expect("mean of finite vectors")
}

fn leaves_domain(kind: LossKind) -> bool {
    matches!(kind, LossKind::Quadratic | LossKind::PhaseRetrieval)
}

/// Executes `cfg.rounds` rounds of the configured algorithm.
pub fn run(inst: &FederatedInstance, cfg: &RunConfig) -> Result<TraceLog> {
    let start = Instant::now();
    let (plan, eps_budget) = Plan::new(inst, cfg)?;
    let eta = plan.eta;
    let c = inst.constants;
    let m_total = inst.num_devices();
    let i = cfg.devices_per_round;
    let smooth = inst.loss.kind.is_smooth();
    let moreau = cfg
        .record
        .moreau
        .then(|| cfg.moreau_config().expect("validated moreau settings"));
    let all_devices: Vec<usize> = (0..m_total).collect();

    let mut w = match &cfg.w0 {
        Some(v) => ParamVector::new(v.clone())?,
        None => ParamVector::zeros(inst.dim),
    };
    let mut iterates = vec![w.clone()];
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 1..=cfg.rounds {
        let global_grad = if smooth && (cfg.record.grad || cfg.record.concentration) {
            Some(diagnostics::global_grad(inst, &w)?)
        } else {
            None
        };
        let global_grad_sq = global_grad.as_ref().filter(|_| cfg.record.grad).map(|g| g.norm_sq());
        let moreau_grad_sq = match &moreau {
            Some(mc) => Some(diagnostics::moreau_grad(inst, &w, mc)?.powi(2)),
            None => None,
        };

        let (sampled, locals) = if cfg.algorithm == Algorithm::CentralPPA {
            let out = plan.solve(EmpiricalRisk::mixture(&inst.device_slices())?, &w)?;
            (all_devices.clone(), vec![out])
        } else {
            let mut rng = derive_stream(cfg.seed, &[purpose::DEVICES, t as u64]);
            let sampled = sample_devices(&mut rng, m_total, i)?;
            let locals = sampled
                .par_iter()
                .map(|&m| plan.local(&w, t, m))
                .collect::<Result<Vec<_>>>()?;
            (sampled, locals)
        };

        let solutions: Vec<&ParamVector> = locals.iter().map(|o| &o.solution).collect();
        let next = ParamVector::mean(solutions.iter().copied());
        let mut residuals = BTreeMap::new();
        residuals.insert(residual::AGGREGATION.to_string(), next.dist(&kahan_mean(&solutions)));
        if cfg.algorithm != Algorithm::FedAvg {
            if c.g > 0.0 {
                let ratio = solutions.iter().map(|s| s.dist(&w)).fold(0.0, f64::max) / (c.g * eta);
                residuals.insert(residual::STEP_BOUND.to_string(), ratio);
            }
            if let Some(l) = c.l {
                let excess = locals
                    .iter()
                    .map(|o| {
                        let mut r = o.solution.sub(&w);
                        r.axpy(eta, o.direction.as_ref().expect("smooth direction"));
                        r.norm() - 2.0 * l * o.eps * eta
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                residuals.insert(residual::STEP_IDENTITY.to_string(), excess);
            }
        }
        if cfg.record.concentration && cfg.algorithm == Algorithm::FedProx {
            if let (Some(l), Some(grad)) = (c.l, &global_grad) {
                let everyone = all_devices
                    .par_iter()
                    .map(|&m| match sampled.binary_search(&m) {
                        Ok(k) => Ok((locals[k].direction.clone().expect("smooth"), locals[k].eps)),
                        Err(_) => plan.local(&w, t, m).map(|o| (o.direction.expect("smooth"), o.eps)),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let d_bar = ParamVector::mean(everyone.iter().map(|(d, _)| d));
                let eps = everyone.iter().map(|(_, e)| *e).fold(0.0, f64::max);
                let bound = (l * (c.g + 2.0 * l * eps) * eta).powi(2);
                residuals.insert(residual::CONCENTRATION.to_string(), grad.sub(&d_bar).norm_sq() - bound);
            }
        }

        if leaves_domain(inst.loss.kind) && next.norm() > inst.loss.domain_radius {
            return Err(Error::LeftDomain {
                round: t,
                norm: next.norm(),
                radius: inst.loss.domain_radius,
            });
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("round {t} aggregate")));
        }
        records.push(RoundRecord {
            t,
            sampled_devices: sampled,
            eta,
            eps_budget,
            eps_certified_max: locals.iter().map(|o| o.eps).fold(0.0, f64::max),
            global_grad_sq,
            moreau_grad_sq,
            step_norm: next.dist(&w),
            inner_iterations_max: locals.iter().map(|o| o.iterations).max().unwrap_or(0),
            invariant_residuals: residuals,
        });
        w = next;
        iterates.push(w.clone());
    }

    let mean_of = |f: fn(&RoundRecord) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = records.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let t_star = derive_stream(cfg.seed, &[purpose::T_STAR]).below(cfg.rounds);
    let summary = RunSummary {
        avg_grad_sq: mean_of(|r| r.global_grad_sq),
        avg_moreau_sq: mean_of(|r| r.moreau_grad_sq),
        t_star,
        eta,
        final_w: w,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TraceLog {
        records,
        iterates,
        summary,
    })
}

/// Solves every device's local subproblem at `w` exactly as round `t` of
/// `cfg` would and returns `(d_m, eps_m)` per device, where `d_m` is the batch
/// gradient at the local solution. Smooth kinds only.
pub fn device_directions(
    inst: &FederatedInstance,
    cfg: &RunConfig,
    w: &ParamVector,
    t: usize,
) -> Result<Vec<(ParamVector, f64)>> {
    if !inst.loss.kind.is_smooth() {
        return Err(Error::UseMoreauGrad(inst.loss.kind));
    }
    if cfg.algorithm == Algorithm::FedAvg || cfg.algorithm == Algorithm::CentralPPA {
        return Err(Error::Config("device directions need FedProx or FedMSPP".into()));
    }
    let (plan, _) = Plan::new(inst, cfg)?;
    (0..inst.num_devices())
        .into_par_iter()
        .map(|m| {
            let o = plan.local(w, t, m)?;
            Ok((o.direction.expect("smooth direction"), o.eps))
        })
        .collect()
}
