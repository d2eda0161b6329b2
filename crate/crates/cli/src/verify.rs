//! The `verify` suite: named property checks over the configured instance and
//! a few small built-in fixtures.
//!
//! Checks whose preconditions the configured instance does not meet (say, a
//! smooth-only property on an Absolute-loss config) fall back to a built-in
//! Logistic instance, so every check runs on every config.

use std::time::Instant;

use fedprox_core::datagen::{generate_instance, HeterogeneityConfig};
use fedprox_core::diagnostics::{
    self, absolute_value_instance, default_probes, global_grad, lgd_fit, sampling_check, MoreauConfig,
};
use fedprox_core::engine::{self, residual};
use fedprox_core::numerics::purpose;
use fedprox_core::problems::{certify_constants, loss_subgrad, loss_value, EmpiricalRisk};
use fedprox_core::prox::{self, prox_quadratic_exact, prox_smooth_gd, InnerSolverConfig};
use fedprox_core::stability::{efron_stein_check, grad_generalization_check, measure_argument_stability};
use fedprox_core::{
    derive_stream, Algorithm, EpsPolicy, Example, FederatedInstance, LossConstants, LossKind, LossModel,
    ParamVector, ProxSubproblem, RngStream, RunConfig, Schedule,
};

use crate::config::LoadedConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

type Outcome = fedprox_core::Result<(bool, String)>;

fn check(name: &str, f: impl FnOnce() -> Outcome) -> Check {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok((pass, detail)) => (pass, format!("{detail} [{:.2}s]", start.elapsed().as_secs_f64())),
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name: name.to_string(),
        pass,
        detail,
    }
}

/// Runs every check in a fixed order.
pub fn run_all(cfg: &LoadedConfig, inst: &FederatedInstance) -> Vec<Check> {
    let seed = cfg.file.seed;
    let v = &cfg.file.verify;
    let rng = |k: u64| derive_stream(seed, &[purpose::VERIFY, k]);
    let mut constants = inst.constants;
    constants.g *= v.lipschitz_scale;
    let data: Vec<Example> = inst.devices.iter().flat_map(|d| d.examples.iter().cloned()).collect();
    let fallback = logistic_fixture(seed);
    let smooth_inst = if inst.loss.kind.is_smooth() { inst } else { &fallback };
    let mut run = cfg.file.run.clone();
    run.rounds = v.rounds;

    let mut out = vec![
        check("problems.gradient_bound", || gradient_bound(&inst.loss, &constants, &data, v.pairs, &mut rng(1))),
        check("problems.lipschitz", || lipschitz_value(&inst.loss, &constants, &data, v.pairs, &mut rng(2))),
        check("problems.smoothness", || smoothness(smooth_inst, v.pairs, &mut rng(3))),
        check("problems.weak_convexity", || weak_convexity(&inst.loss, &inst.constants, &data, v.pairs, &mut rng(4))),
        check("problems.finite_difference", || finite_difference(smooth_inst, &mut rng(5))),
        check("prox.certificate_soundness", || certificate_soundness(smooth_inst, &mut rng(6))),
        check("prox.three_point", || three_point(inst, v.subgrad_steps, &mut rng(7))),
        check("prox.step_identity", || step_identity(inst, v.subgrad_steps, &mut rng(8))),
        check("engine.aggregation", || aggregation(inst, &run)),
        check("engine.eps_compliance", || eps_compliance(inst, &run)),
        check("engine.determinism", || determinism(inst, &run)),
        check("engine.homogeneous_reduction", || homogeneous_reduction(seed)),
        check("engine.step_bound", || step_bound(seed, v.rounds, v.subgrad_steps)),
        check("diagnostics.sampling_statistics", || sampling_statistics(cfg, inst, &fallback, &rng(14))),
        check("diagnostics.concentration", || concentration(cfg, inst, &fallback)),
        check("diagnostics.moreau_fd", moreau_fd),
        check("diagnostics.moreau_smooth_consistency", || moreau_smooth_consistency(smooth_inst, &mut rng(17))),
        check("diagnostics.lgd_homogeneous", || lgd_homogeneous(smooth_inst.loss, seed)),
        check("diagnostics.lgd_monotone_shift", || lgd_monotone_shift(smooth_inst.loss, seed)),
    ];
    let s = &cfg.file.stability;
    if s.enabled {
        out.push(check("stability.argument", || argument_stability(cfg, seed)));
        out.push(check("stability.efron_stein", || {
            let (pop, loss, eta) = quadratic_population(seed, s.samples_n)?;
            let r = efron_stein_check(&pop, 0, &loss, s.samples_n, eta, 0.0, s.samples, &rng(21))?;
            Ok((
                r.pass,
                format!("E||h - Eh||^2 = {:.3e} (se {:.1e}) vs beta^2 N = {:.3e}", r.lhs, r.lhs_se, r.rhs),
            ))
        }));
        out.push(check("stability.grad_generalization", || {
            let (pop, loss, eta) = quadratic_population(seed, s.samples_n)?;
            let r = grad_generalization_check(&pop, 0, &loss, s.samples_n, eta, 0.0, s.samples, &rng(22))?;
            Ok((
                r.bias_pass && r.var_pass,
                format!(
                    "bias {:.3e} (se {:.1e}) <= {:.3e}; var {:.3e} (se {:.1e}) <= {:.3e}",
                    r.bias, r.bias_se, r.bias_bound, r.var, r.var_se, r.var_bound
                ),
            ))
        }));
    }
    out
}

fn logistic_fixture(seed: u64) -> FederatedInstance {
    let mut cfg = HeterogeneityConfig::new(10, 5, 40);
    cfg.shift = 1.0;
    cfg.imbalance_exponent = 0.5;
    cfg.feature_norm = Some(1.0);
    generate_instance(&cfg, LossModel::new(LossKind::Logistic), seed).expect("valid fixture")
}

fn in_ball(rng: &mut RngStream, p: usize, radius: f64) -> ParamVector {
    let g: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.uniform().powf(1.0 / p as f64);
    ParamVector::new(g.iter().map(|x| x * r / n).collect()).expect("finite")
}

/// Points `s * radius * a / ||a||` for `s` on a grid in `[-1, 1]`: the
/// margin sweep where per-example gradients peak.
fn margin_grid(z: &Example, radius: f64) -> Vec<ParamVector> {
    let n = z.feature.norm();
    if n == 0.0 {
        return vec![ParamVector::zeros(z.feature.dim())];
    }
    (0..=40)
        .map(|k| z.feature.scaled((k as f64 / 20.0 - 1.0) * radius / n))
        .collect()
}

fn gradient_bound(loss: &LossModel, c: &LossConstants, data: &[Example], pairs: usize, rng: &mut RngStream) -> Outcome {
    let p = data[0].feature.dim();
    let mut worst: f64 = 0.0;
    for z in data {
        for w in margin_grid(z, loss.domain_radius) {
            worst = worst.max(loss_subgrad(loss, &w, z).norm());
        }
    }
    for _ in 0..pairs {
        let z = &data[rng.below(data.len())];
        let w = in_ball(rng, p, loss.domain_radius);
        worst = worst.max(loss_subgrad(loss, &w, z).norm());
    }
    Ok((
        worst <= c.g * (1.0 + 1e-9),
        format!("max ||grad f(w; z)|| over the ball = {worst:.6e} vs G = {:.6e}", c.g),
    ))
}

fn lipschitz_value(loss: &LossModel, c: &LossConstants, data: &[Example], pairs: usize, rng: &mut RngStream) -> Outcome {
    let p = data[0].feature.dim();
    let mut worst: f64 = 0.0;
    let mut slope = |z: &Example, w: &ParamVector, u: &ParamVector| {
        let d = w.dist(u);
        if d > 0.0 {
            worst = worst.max((loss_value(loss, w, z) - loss_value(loss, u, z)).abs() / d);
        }
    };
    for z in data {
        let grid = margin_grid(z, loss.domain_radius);
        for pair in grid.windows(2) {
            slope(z, &pair[0], &pair[1]);
        }
    }
    for _ in 0..pairs {
        let z = &data[rng.below(data.len())];
        let (w, u) = (in_ball(rng, p, loss.domain_radius), in_ball(rng, p, loss.domain_radius));
        slope(z, &w, &u);
    }
    Ok((
        worst <= c.g * (1.0 + 1e-9),
        format!("max |f(w) - f(u)| / ||w - u|| = {worst:.6e} vs G = {:.6e}", c.g),
    ))
}

fn smoothness(inst: &FederatedInstance, pairs: usize, rng: &mut RngStream) -> Outcome {
    let l = inst.constants.l.expect("smooth fixture");
    let data: Vec<&Example> = inst.devices.iter().flat_map(|d| &d.examples).collect();
    let r = inst.loss.domain_radius;
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let z = data[rng.below(data.len())];
        let w = in_ball(rng, inst.dim, r);
        // Half the pairs are close together, where curvature dominates.
        let u = if rng.uniform() < 0.5 {
            in_ball(rng, inst.dim, r)
        } else {
            w.add(&in_ball(rng, inst.dim, 1e-3))
        };
        let d = w.dist(&u);
        if d > 0.0 {
            let gd = loss_subgrad(&inst.loss, &w, z).dist(&loss_subgrad(&inst.loss, &u, z));
            worst = worst.max(gd / d);
        }
    }
    Ok((
        worst <= l * (1.0 + 1e-9),
        format!("{:?}: max ||grad f(w) - grad f(u)|| / ||w - u|| = {worst:.6e} vs L = {l:.6e}", inst.loss.kind),
    ))
}

fn weak_convexity(loss: &LossModel, c: &LossConstants, data: &[Example], pairs: usize, rng: &mut RngStream) -> Outcome {
    let p = data[0].feature.dim();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let z = &data[rng.below(data.len())];
        let (w, u) = (in_ball(rng, p, loss.domain_radius), in_ball(rng, p, loss.domain_radius));
        let g = loss_subgrad(loss, &w, z);
        let lower = loss_value(loss, &w, z) + g.dot(&u.sub(&w)) - 0.5 * c.nu * w.dist(&u).powi(2);
        let scale = 1.0 + loss_value(loss, &u, z).abs();
        worst = worst.max((lower - loss_value(loss, &u, z)) / scale);
    }
    Ok((
        worst <= 1e-12,
        format!(
            "max relative violation of f(u) >= f(w) + <g, u - w> - nu/2 ||u - w||^2 is {worst:.2e} (nu = {:.4e})",
            c.nu
        ),
    ))
}

fn finite_difference(inst: &FederatedInstance, rng: &mut RngStream) -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let risk = |w: &ParamVector| -> fedprox_core::Result<f64> {
        Ok(EmpiricalRisk::mixture(&inst.device_slices())?.value(&inst.loss, w))
    };
    for _ in 0..10 {
        let w = in_ball(rng, inst.dim, inst.loss.domain_radius / 2.0);
        let g = global_grad(inst, &w)?;
        for j in 0..inst.dim {
            let e = ParamVector::basis(inst.dim, j).scaled(h);
            let fd = (risk(&w.add(&e))? - risk(&w.sub(&e))?) / (2.0 * h);
            worst = worst.max((fd - g[j]).abs() / (1.0 + g[j].abs()));
        }
    }
    Ok((
        worst <= 1e-5,
        format!("{:?}: max relative |analytic - central difference| = {worst:.2e}", inst.loss.kind),
    ))
}

fn certificate_soundness(inst: &FederatedInstance, rng: &mut RngStream) -> Outcome {
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    let quad = LossModel::new(LossKind::Quadratic);
    for k in 0..100 {
        let n = 5 + rng.below(11);
        let data: Vec<Example> = (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                Example::new(a, 2.0 * rng.normal()).expect("finite")
            })
            .collect();
        let c = certify_constants(&quad, &data, quad.domain_radius);
        let eta = (0.1 + 0.8 * rng.uniform()) / c.l.expect("smooth");
        let center = in_ball(rng, 3, 2.0);
        let sp = ProxSubproblem::new(EmpiricalRisk::uniform(&data)?, quad, c, center, eta)?;
        let target = 10f64.powi(-2 - (k % 4) * 2);
        let exact = prox_quadratic_exact(&sp)?;
        let approx = prox_smooth_gd(&sp, target, prox::DEFAULT_GD_CAP)?;
        let gap = sp.value(&approx.solution) - sp.value(&exact.solution);
        let excess = gap - approx.epsilon_certified - 1e-12 * (1.0 + sp.value(&exact.solution).abs());
        worst = worst.max(excess);
        if excess > 0.0 || approx.epsilon_certified > target {
            violations += 1;
        }
    }
    // The configured loss against a tight solve of the same subproblem.
    let l = inst.constants.l.expect("smooth fixture");
    let eta = 0.5 / l;
    let mut own = 0;
    for d in inst.devices.iter().take(5) {
        let center = in_ball(rng, inst.dim, 1.0);
        let sp = ProxSubproblem::new(EmpiricalRisk::uniform(&d.examples)?, inst.loss, inst.constants, center, eta)?;
        let tight = prox::solve(&sp, None, &InnerSolverConfig::default())?;
        let approx = prox::solve(&sp, Some(1e-4), &InnerSolverConfig::default())?;
        let gap = sp.value(&approx.solution) - sp.value(&tight.solution);
        let excess = gap - approx.epsilon_certified - 1e-12 * (1.0 + sp.value(&tight.solution).abs());
        worst = worst.max(excess);
        own += 1;
        if excess > 0.0 {
            violations += 1;
        }
    }
    Ok((
        violations == 0,
        format!(
            "{violations} violations of Q(w) - Q* <= eps_certified over 100 Quadratic and {own} {:?} subproblems (worst excess {worst:.2e})",
            inst.loss.kind
        ),
    ))
}

/// `eta` that keeps `Q` strongly convex with some room.
fn local_eta(c: &LossConstants) -> f64 {
    match c.curvature() {
        k if k > 0.0 => 0.5 / k,
        _ => 0.1,
    }
}

fn solver(subgrad_steps: usize) -> InnerSolverConfig {
    InnerSolverConfig {
        subgrad_steps,
        absolute_dual: true,
        ..InnerSolverConfig::default()
    }
}

fn three_point(inst: &FederatedInstance, subgrad_steps: usize, rng: &mut RngStream) -> Outcome {
    let eta = local_eta(&inst.constants);
    let inner = solver(subgrad_steps);
    let mut worst = f64::NEG_INFINITY;
    let mut tests = 0;
    for d in inst.devices.iter().take(5) {
        let center = in_ball(rng, inst.dim, inst.loss.domain_radius / 4.0);
        let sp = ProxSubproblem::new(EmpiricalRisk::uniform(&d.examples)?, inst.loss, inst.constants, center, eta)?;
        let o = prox::solve(&sp, None, &inner)?;
        let (lambda, eps) = (sp.modulus(), o.epsilon_certified);
        let q = sp.value(&o.solution);
        let slack = (2.0 * eps / lambda).sqrt();
        for _ in 0..20 {
            let u = o.solution.add(&in_ball(rng, inst.dim, 1.0));
            let r = (u.dist(&o.solution) - slack).max(0.0);
            let lower = 0.5 * lambda * r * r - eps;
            worst = worst.max(lower - (sp.value(&u) - q) - 1e-10 * (1.0 + q.abs()));
            tests += 1;
        }
    }
    Ok((
        worst <= 0.0,
        format!("{tests} probes of Q(u) - Q(w) >= lambda/2 (||u - w|| - sqrt(2 eps/lambda))_+^2 - eps, worst excess {worst:.2e}"),
    ))
}

fn step_identity(inst: &FederatedInstance, subgrad_steps: usize, rng: &mut RngStream) -> Outcome {
    let c = inst.constants;
    let eta = local_eta(&c);
    let inner = solver(subgrad_steps);
    let mut worst = f64::NEG_INFINITY;
    let mut solves = 0;
    for d in inst.devices.iter().take(5) {
        for target in [1e-2, 1e-4, 1e-6] {
            let center = in_ball(rng, inst.dim, inst.loss.domain_radius / 4.0);
            let risk = EmpiricalRisk::uniform(&d.examples)?;
            let sp = ProxSubproblem::new(risk.clone(), inst.loss, c, center.clone(), eta)?;
            let o = prox::solve(&sp, Some(target), &inner)?;
            let excess = match c.l {
                Some(l) => {
                    let mut r = o.solution.sub(&center);
                    r.axpy(eta, &risk.grad(&inst.loss, &o.solution));
                    r.norm() - 2.0 * l * o.epsilon_certified * eta - 1e-12
                }
                None => o.solution.dist(&center) / (c.g * eta) - (1.0 + 1e-3),
            };
            worst = worst.max(excess);
            solves += 1;
        }
    }
    let form = if c.l.is_some() {
        "||w - w0 + eta d|| <= 2 L eps eta"
    } else {
        "||w - w0|| <= (1 + 1e-3) G eta"
    };
    Ok((worst <= 0.0, format!("{solves} solves, {form}, worst excess {worst:.2e}")))
}

fn aggregation(inst: &FederatedInstance, run: &RunConfig) -> Outcome {
    let trace = engine::run(inst, run)?;
    let scale = trace.iterates.iter().map(ParamVector::norm).fold(1.0, f64::max);
    let worst = trace.max_residual(residual::AGGREGATION).unwrap_or(0.0);
    Ok((
        worst <= 1e-12 * scale,
        format!("{} rounds, max ||w_t - compensated mean|| = {worst:.2e}", trace.records.len()),
    ))
}

fn eps_compliance(inst: &FederatedInstance, run: &RunConfig) -> Outcome {
    let trace = engine::run(inst, run)?;
    let mut violations = 0;
    let mut budget_checked = 0;
    for r in &trace.records {
        if r.eps_budget > 0.0 {
            budget_checked += 1;
            if r.eps_certified_max > r.eps_budget * (1.0 + 1e-12) {
                violations += 1;
            }
        }
        if r.invariant_residuals.get(residual::STEP_IDENTITY).is_some_and(|&e| e > 1e-9) {
            violations += 1;
        }
    }
    Ok((
        violations == 0,
        format!(
            "{violations} violations over {} rounds ({budget_checked} with a positive eps budget; step identity slack 1e-9)",
            trace.records.len()
        ),
    ))
}

fn determinism(inst: &FederatedInstance, run: &RunConfig) -> Outcome {
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).max(2);
    let in_pool = |n: usize| -> fedprox_core::Result<String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| fedprox_core::Error::Config(e.to_string()))?;
        let trace = pool.install(|| engine::run(inst, run))?;
        Ok(serde_json::to_string(&(&trace.records, &trace.iterates, trace.summary.t_star)).expect("serializable"))
    };
    let one = in_pool(1)?;
    let many = in_pool(threads)?;
    Ok((one == many, format!("trace on 1 thread vs {threads} threads identical: {}", one == many)))
}

fn homogeneous_reduction(seed: u64) -> Outcome {
    let mut cfg = HeterogeneityConfig::new(4, 5, 30);
    cfg.shared_data = true;
    let inst = generate_instance(&cfg, LossModel::new(LossKind::Quadratic), seed)?;
    let mut fed = RunConfig::new(Algorithm::FedProx, 50, 4, Schedule::SmoothFedProx);
    fed.eps_policy = EpsPolicy::Exact;
    fed.record.grad = false;
    fed.seed = seed;
    let mut central = fed.clone();
    central.algorithm = Algorithm::CentralPPA;
    let a = engine::run(&inst, &fed)?;
    let b = engine::run(&inst, &central)?;
    let worst = a.iterates.iter().zip(&b.iterates).map(|(x, y)| x.dist(y)).fold(0.0, f64::max);
    Ok((worst <= 1e-10, format!("max_t ||w_FedProx - w_CentralPPA|| = {worst:.2e} over 50 rounds")))
}

fn step_bound(seed: u64, rounds: usize, subgrad_steps: usize) -> Outcome {
    let mut cfg = HeterogeneityConfig::new(4, 3, 10);
    cfg.shift = 1.0;
    let inst = generate_instance(&cfg, LossModel::new(LossKind::Absolute), seed)?;
    let mut rc = RunConfig::new(Algorithm::FedProx, rounds, 2, Schedule::NonsmoothRho(0.1));
    rc.eps_policy = EpsPolicy::Exact;
    rc.inner.subgrad_steps = subgrad_steps;
    rc.seed = seed;
    let trace = engine::run(&inst, &rc)?;
    let worst = trace.max_residual(residual::STEP_BOUND).unwrap_or(0.0);
    Ok((
        worst <= 1.0 + 1e-3,
        format!("Absolute loss, K = {subgrad_steps}: max ||w_m - w_prev|| / (G eta) = {worst:.6}"),
    ))
}

/// The config's run when it is smooth FedProx or FedMSPP over the empirical
/// data, otherwise a FedProx run on the Logistic fixture.
fn federated_run<'a>(
    cfg: &LoadedConfig,
    inst: &'a FederatedInstance,
    fallback: &'a FederatedInstance,
    fedprox_only: bool,
) -> (&'a FederatedInstance, RunConfig) {
    let run = &cfg.file.run;
    let algorithm_ok = match run.algorithm {
        Algorithm::FedProx => true,
        Algorithm::FedMSPP => !fedprox_only && run.sampling_mode == fedprox_core::SamplingMode::Empirical,
        _ => false,
    };
    if inst.loss.kind.is_smooth() && algorithm_ok {
        let mut r = run.clone();
        r.rounds = cfg.file.verify.rounds.min(r.rounds).max(1);
        (inst, r)
    } else {
        let mut r = RunConfig::new(Algorithm::FedProx, cfg.file.verify.rounds.min(40), 3, Schedule::SmoothFedProx);
        r.seed = cfg.file.seed;
        (fallback, r)
    }
}

fn sampling_statistics(cfg: &LoadedConfig, inst: &FederatedInstance, fallback: &FederatedInstance, rng: &RngStream) -> Outcome {
    let (inst, mut run) = federated_run(cfg, inst, fallback, false);
    run.record.grad = false;
    let trace = engine::run(inst, &run)?;
    let states = 5.min(run.rounds);
    let mut failures = 0;
    let mut worst_z: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for k in 0..states {
        let t = 1 + k * run.rounds / states;
        let dirs: Vec<ParamVector> = engine::device_directions(inst, &run, &trace.iterates[t - 1], t)?
            .into_iter()
            .map(|(d, _)| d)
            .collect();
        let c = sampling_check(&dirs, inst.constants.g, run.devices_per_round, 10_000, &mut rng.child(&[k as u64]))?;
        worst_z = worst_z.max(c.max_z);
        worst_ratio = worst_ratio.max(c.mse / c.bound);
        if !(c.mean_ok && c.variance_ok) {
            failures += 1;
        }
    }
    Ok((
        failures == 0,
        format!("{failures} failures at {states} states x 10^4 resamples; max |z| {worst_z:.2}, max E||d - dbar||^2 / (G^2/I) = {worst_ratio:.3}"),
    ))
}

fn concentration(cfg: &LoadedConfig, inst: &FederatedInstance, fallback: &FederatedInstance) -> Outcome {
    let (inst, mut run) = federated_run(cfg, inst, fallback, true);
    run.record.concentration = true;
    let trace = engine::run(inst, &run)?;
    let worst = trace.max_residual(residual::CONCENTRATION).unwrap_or(f64::NEG_INFINITY);
    Ok((
        worst <= 1e-9,
        format!(
            "{} rounds, max ||grad R - dbar||^2 - L^2 (G + 2 L eps)^2 eta^2 = {worst:.3e}",
            trace.records.len()
        ),
    ))
}

fn moreau_fd() -> Outcome {
    let inst = absolute_value_instance();
    let mc = MoreauConfig::new(1.0);
    let h = 1e-5;
    let p = |x: f64| ParamVector::new(vec![x]).expect("finite");
    let mut worst: f64 = 0.0;
    for w in [3.0, 0.5, 0.0] {
        let id = diagnostics::moreau_grad(&inst, &p(w), &mc)?;
        let fd = (diagnostics::moreau_envelope(&inst, &p(w + h), &mc)?
            - diagnostics::moreau_envelope(&inst, &p(w - h), &mc)?)
            / (2.0 * h);
        worst = worst.max((id - fd.abs()).abs());
    }
    Ok((worst <= 1e-4, format!("|w| fixture: max |identity - finite difference| = {worst:.2e} at w in {{3, 0.5, 0}}")))
}

fn moreau_smooth_consistency(inst: &FederatedInstance, rng: &mut RngStream) -> Outcome {
    let c = inst.constants;
    let l = c.l.expect("smooth fixture");
    let mut worst = f64::NEG_INFINITY;
    for rho in [1e-3 / l.max(1.0), 1e-4 / l.max(1.0)] {
        let mut mc = MoreauConfig::new(rho);
        mc.inner_eps = 1e-10;
        let lambda = 1.0 / rho - c.nu;
        let tol = l * rho * c.g + (2.0 * mc.inner_eps / lambda).sqrt() / rho;
        for _ in 0..5 {
            let w = in_ball(rng, inst.dim, inst.loss.domain_radius / 2.0);
            let env = diagnostics::moreau_grad(inst, &w, &mc)?;
            let grad = global_grad(inst, &w)?.norm();
            worst = worst.max((env - grad).abs() - tol);
        }
    }
    Ok((
        worst <= 0.0,
        format!("|| ||grad R_rho|| - ||grad R|| | <= L rho G + inner error at 10 points, worst excess {worst:.2e}"),
    ))
}

fn lgd_homogeneous(loss: LossModel, seed: u64) -> Outcome {
    let mut cfg = HeterogeneityConfig::new(8, 5, 50);
    cfg.shared_data = true;
    let inst = generate_instance(&cfg, loss, seed)?;
    let probes = default_probes(&inst, &[], 10, &mut derive_stream(seed, &[purpose::PROBES]));
    let r = lgd_fit(&inst, &probes)?;
    let b_sq = r.b_sq_min_h0.unwrap_or(f64::NAN);
    Ok((
        (b_sq - 1.0).abs() <= 1e-6 && r.h_sq_min_b1 <= 1e-8,
        format!("shared data: (B^2, H^2) = ({b_sq:.9}, {:.1e})", r.h_sq_min_b1),
    ))
}

fn lgd_monotone_shift(loss: LossModel, seed: u64) -> Outcome {
    let mut hs = Vec::new();
    for shift in [0.0, 1.0, 2.0] {
        let mut cfg = HeterogeneityConfig::new(8, 5, 400);
        cfg.shift = shift;
        let inst = generate_instance(&cfg, loss, seed)?;
        let probes = default_probes(&inst, &[], 10, &mut derive_stream(seed, &[purpose::PROBES]));
        hs.push(lgd_fit(&inst, &probes)?.h_sq_min_b1);
    }
    Ok((
        hs.windows(2).all(|w| w[1] >= w[0]),
        format!("H^2 at shift 0, 1, 2: {:.3e}, {:.3e}, {:.3e}", hs[0], hs[1], hs[2]),
    ))
}

fn argument_stability(cfg: &LoadedConfig, seed: u64) -> Outcome {
    let s = &cfg.file.stability;
    let mut gen = HeterogeneityConfig::new(1, 5, 4 * s.n + 40);
    gen.feature_norm = Some(1.0);
    gen.truth_scale = 2.0;
    let loss = LossModel::new(LossKind::Logistic);
    let all = generate_instance(&gen, loss, seed)?.devices[0].examples.clone();
    let pool = &all[2 * s.n..];
    let l = certify_constants(&loss, &all, loss.domain_radius).l.expect("smooth");
    let eta = s.eta_fraction / l;
    let rng = derive_stream(seed, &[purpose::STABILITY]);
    let small = measure_argument_stability(&all[..s.n], pool, &loss, eta, s.solver_eps, s.trials, &rng)?;
    let large = measure_argument_stability(&all[..2 * s.n], pool, &loss, eta, s.solver_eps, s.trials, &rng)?;
    let ratio = large.observed_max / small.observed_max;
    Ok((
        small.violations == 0 && large.violations == 0 && (0.3..=0.8).contains(&ratio),
        format!(
            "Logistic, {} trials: max displacement {:.3e} (N = {}, bound {:.3e}) -> {:.3e} (N = {}), ratio {ratio:.3} in [0.3, 0.8], violations {}+{}",
            s.trials,
            small.observed_max,
            s.n,
            small.bound,
            large.observed_max,
            2 * s.n,
            small.violations,
            large.violations
        ),
    ))
}

fn quadratic_population(seed: u64, n: usize) -> fedprox_core::Result<(fedprox_core::PopulationSpec, LossModel, f64)> {
    let loss = LossModel::new(LossKind::Quadratic);
    let inst = generate_instance(&HeterogeneityConfig::new(1, 3, n), loss, seed)?;
    let l = inst.constants.l.expect("smooth");
    let pop = inst.population.expect("generated instances carry their population");
    Ok((pop, loss, 0.1 / (4.0 * l)))
}
