//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::process::Command;
use std::time::{Duration, Instant};

use fedprox_core::datagen::{generate_instance, HeterogeneityConfig};
use fedprox_core::diagnostics::{self, default_probes, lgd_fit, sampling_check, MoreauConfig};
use fedprox_core::engine::{self, residual, run};
use fedprox_core::problems::{certify_constants, Example};
use fedprox_core::stability::{efron_stein_check, grad_generalization_check, measure_argument_stability};
use fedprox_core::{
    derive_stream, Algorithm, EpsPolicy, FederatedInstance, LossKind, LossModel, ParamVector, RunConfig, Schedule,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(limit_secs: u64, elapsed: Duration) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn homogeneous_quadratic() -> FederatedInstance {
    let mut cfg = HeterogeneityConfig::new(8, 10, 100);
    cfg.shared_data = true;
    generate_instance(&cfg, LossModel::new(LossKind::Quadratic), 1).unwrap()
}

fn c01_homogeneous_reduction() -> Outcome {
    let start = Instant::now();
    let inst = homogeneous_quadratic();
    let mut fed = RunConfig::new(Algorithm::FedProx, 100, 8, Schedule::SmoothFedProx);
    fed.eps_policy = EpsPolicy::Exact;
    fed.record.grad = false;
    let mut central = fed.clone();
    central.algorithm = Algorithm::CentralPPA;
    let a = run(&inst, &fed).unwrap();
    let b = run(&inst, &central).unwrap();
    let max_diff = a
        .iterates
        .iter()
        .zip(&b.iterates)
        .map(|(x, y)| x.dist(y))
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(
        max_diff <= 1e-10 && within(5, elapsed),
        format!("max_t ||w_fedprox - w_central|| = {max_diff:.2e} (<= 1e-10), {:.2}s (< 5s)", elapsed.as_secs_f64()),
    )
}

fn smooth_instance(seed: u64) -> FederatedInstance {
    let mut cfg = HeterogeneityConfig::new(10, 5, 40);
    cfg.shift = 1.0;
    cfg.imbalance_exponent = 0.5;
    cfg.feature_norm = Some(1.0);
    generate_instance(&cfg, LossModel::new(LossKind::Logistic), seed).unwrap()
}

fn c02_step_identity() -> Outcome {
    let inst = smooth_instance(2);
    let mut fedprox = RunConfig::new(Algorithm::FedProx, 500, 4, Schedule::SmoothFedProx);
    fedprox.seed = 2;
    let mut mspp = RunConfig::new(Algorithm::FedMSPP, 500, 4, Schedule::SmoothFedMSPP);
    mspp.minibatch = 4;
    mspp.seed = 2;
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut calls = 0;
    for cfg in [&fedprox, &mspp] {
        let trace = run(&inst, cfg).unwrap();
        for r in &trace.records {
            let excess = r.invariant_residuals[residual::STEP_IDENTITY];
            worst = worst.max(excess);
            calls += 1;
            if excess > 1e-9 {
                violations += 1;
            }
            if r.eps_certified_max > r.eps_budget {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations over {calls} rounds (FedProx + FedMSPP), worst excess {worst:.2e}"),
    )
}

fn c03_step_bound() -> Outcome {
    let start = Instant::now();
    let mut cfg = HeterogeneityConfig::new(4, 3, 10);
    cfg.shift = 1.0;
    let inst = generate_instance(&cfg, LossModel::new(LossKind::Absolute), 3).unwrap();
    let mut rc = RunConfig::new(Algorithm::FedProx, 500, 2, Schedule::NonsmoothRho(0.1));
    rc.eps_policy = EpsPolicy::Exact;
    rc.inner.subgrad_steps = 100_000;
    rc.seed = 3;
    let trace = run(&inst, &rc).unwrap();
    let worst = trace.max_residual(residual::STEP_BOUND).unwrap();
    let round_worst = trace
        .records
        .iter()
        .map(|r| r.step_norm / (inst.constants.g * r.eta))
        .fold(0.0, f64::max);
    outcome(
        worst <= 1.0 + 1e-3 && round_worst <= 1.0 + 1e-3,
        format!(
            "max ||w_m - w_prev|| / (G eta) = {worst:.6}, max ||w_t - w_prev|| / (G eta) = {round_worst:.6} (<= 1.001), {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn c04_sampling_statistics() -> Outcome {
    let inst = smooth_instance(4);
    let mut rc = RunConfig::new(Algorithm::FedProx, 40, 3, Schedule::SmoothFedProx);
    rc.seed = 4;
    let trace = run(&inst, &rc).unwrap();
    let mut failures = 0;
    let mut worst_z: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for k in 0..20 {
        let t = 2 * k + 1;
        let w = &trace.iterates[t - 1];
        let dirs: Vec<ParamVector> = engine::device_directions(&inst, &rc, w, t)
            .unwrap()
            .into_iter()
            .map(|(d, _)| d)
            .collect();
        let mut rng = derive_stream(4, &[100, k as u64]);
        let c = sampling_check(&dirs, inst.constants.g, rc.devices_per_round, 10_000, &mut rng).unwrap();
        worst_z = worst_z.max(c.max_z);
        worst_ratio = worst_ratio.max(c.mse / c.bound);
        if !(c.mean_ok && c.variance_ok) {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{failures} failures at 20 states; max |z| of mean = {worst_z:.2} (< 4), max E||d-dbar||^2 / (G^2/I) = {worst_ratio:.3}"),
    )
}

fn logistic_draw(n: usize) -> (Vec<Example>, LossModel) {
    let mut cfg = HeterogeneityConfig::new(1, 5, n);
    cfg.feature_norm = Some(1.0);
    cfg.truth_scale = 2.0;
    let loss = LossModel::new(LossKind::Logistic);
    (generate_instance(&cfg, loss, 5).unwrap().devices[0].examples.clone(), loss)
}

fn c05_argument_stability() -> Outcome {
    let start = Instant::now();
    let (all, loss) = logistic_draw(140);
    let pool = &all[80..];
    let l = certify_constants(&loss, &all, loss.domain_radius).l.unwrap();
    let eta = 0.5 / l;
    let rng = derive_stream(5, &[1]);
    let small = measure_argument_stability(&all[..20], pool, &loss, eta, 1e-10, 200, &rng).unwrap();
    let large = measure_argument_stability(&all[..40], pool, &loss, eta, 1e-10, 200, &rng).unwrap();
    let ratio = large.observed_max / small.observed_max;
    let elapsed = start.elapsed();
    outcome(
        small.violations == 0 && large.violations == 0 && (0.3..=0.8).contains(&ratio) && within(30, elapsed),
        format!(
            "violations {}+{}, observed max {:.3e} (N=20, bound {:.3e}) -> {:.3e} (N=40), ratio {ratio:.3} in [0.3,0.8], {:.1}s",
            small.violations,
            large.violations,
            small.observed_max,
            small.bound,
            large.observed_max,
            elapsed.as_secs_f64()
        ),
    )
}

fn c06_efron_stein_and_generalization() -> Outcome {
    let cfg = HeterogeneityConfig::new(1, 3, 10);
    let loss = LossModel::new(LossKind::Quadratic);
    let inst = generate_instance(&cfg, loss, 6).unwrap();
    let pop = inst.population.as_ref().unwrap();
    let l = inst.constants.l.unwrap();
    // eta well below 1/L of any realistic draw; the probes re-certify L on their samples.
    let eta = 0.1 / (4.0 * l);
    let rng = derive_stream(6, &[0]);
    let es = efron_stein_check(pop, 0, &loss, 10, eta, 0.0, 500, &rng.child(&[0])).unwrap();
    let gg = grad_generalization_check(pop, 0, &loss, 10, eta, 0.0, 500, &rng.child(&[1])).unwrap();
    outcome(
        es.pass && gg.bias_pass && gg.var_pass,
        format!(
            "Efron-Stein {:.3e} (se {:.1e}) <= {:.3e}; bias {:.3e} (se {:.1e}) <= {:.3e}; var {:.3e} (se {:.1e}) <= {:.3e}",
            es.lhs, es.lhs_se, es.rhs, gg.bias, gg.bias_se, gg.bias_bound, gg.var, gg.var_se, gg.var_bound
        ),
    )
}

fn rate_instance() -> FederatedInstance {
    let mut cfg = HeterogeneityConfig::new(16, 20, 200);
    cfg.feature_norm = Some(1.0);
    cfg.feature_decay = 2.0;
    cfg.truth_scale = 3.0;
    cfg.shift = 1.0;
    cfg.noise_std = 0.05;
    generate_instance(&cfg, LossModel::new(LossKind::SigmoidSquared), 7).unwrap()
}

fn c07_smooth_rate() -> Outcome {
    let start = Instant::now();
    let inst = rate_instance();
    let mut avgs = Vec::new();
    for t in [256, 1024, 4096] {
        let mut rc = RunConfig::new(Algorithm::FedProx, t, 16, Schedule::SmoothFedProx);
        rc.seed = 7;
        avgs.push(run(&inst, &rc).unwrap().summary.avg_grad_sq.unwrap());
    }
    let ratio = avgs[2] / avgs[0];
    let limit = 1.5 * 16f64.powf(-2.0 / 3.0);
    let elapsed = start.elapsed();
    outcome(
        ratio <= limit && within(180, elapsed),
        format!(
            "avg ||grad||^2 at T=256,1024,4096: {:.3e}, {:.3e}, {:.3e}; ratio {ratio:.3} <= {limit:.3}, {:.1}s",
            avgs[0],
            avgs[1],
            avgs[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn c08_minibatch_speedup() -> Outcome {
    let start = Instant::now();
    let inst = rate_instance();
    let mut avgs = Vec::new();
    for (b, i) in [(1, 1), (2, 2), (4, 4)] {
        let mut rc = RunConfig::new(Algorithm::FedMSPP, 4096, i, Schedule::SmoothFedMSPP);
        rc.minibatch = b;
        rc.seed = 8;
        avgs.push(run(&inst, &rc).unwrap().summary.avg_grad_sq.unwrap());
    }
    let monotone = avgs.windows(2).all(|w| w[1] <= w[0]);
    let ratio = avgs[2] / avgs[0];
    let elapsed = start.elapsed();
    outcome(
        monotone && ratio <= 0.6 && within(300, elapsed),
        format!(
            "avg ||grad||^2 at bI=1,4,16: {:.3e}, {:.3e}, {:.3e}; monotone {monotone}, ratio {ratio:.3} <= 0.6, {:.1}s",
            avgs[0],
            avgs[1],
            avgs[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn c09_nonsmooth_stationarity() -> Outcome {
    let start = Instant::now();
    let mut cfg = HeterogeneityConfig::new(8, 5, 20);
    cfg.feature_norm = Some(1.0);
    cfg.truth_scale = 0.5;
    cfg.shift = 0.3;
    let inst = generate_instance(&cfg, LossModel::new(LossKind::Absolute), 9).unwrap();
    let mut avgs = Vec::new();
    for t in [100, 400, 1600] {
        let mut rc = RunConfig::new(Algorithm::FedProx, t, 8, Schedule::NonsmoothRho(0.1));
        rc.eps_policy = EpsPolicy::Exact;
        rc.inner.absolute_dual = true;
        rc.record.moreau = true;
        rc.seed = 9;
        avgs.push(run(&inst, &rc).unwrap().summary.avg_moreau_sq.unwrap());
    }
    let monotone = avgs.windows(2).all(|w| w[1] < w[0]);
    let ratio = avgs[2] / avgs[0];
    let elapsed = start.elapsed();
    outcome(
        monotone && ratio <= 0.5 && within(180, elapsed),
        format!(
            "avg ||grad R_rho||^2 at T=100,400,1600: {:.3e}, {:.3e}, {:.3e}; ratio {ratio:.3} <= 0.5, {:.1}s",
            avgs[0],
            avgs[1],
            avgs[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn c10_moreau_cross_check() -> Outcome {
    let inst = diagnostics::absolute_value_instance();
    let mc = MoreauConfig::new(1.0);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for w in [3.0, 0.5, 0.0] {
        let p = |x: f64| ParamVector::new(vec![x]).unwrap();
        let id = diagnostics::moreau_grad(&inst, &p(w), &mc).unwrap();
        let fd = (diagnostics::moreau_envelope(&inst, &p(w + h), &mc).unwrap()
            - diagnostics::moreau_envelope(&inst, &p(w - h), &mc).unwrap())
            / (2.0 * h);
        worst = worst.max((id - fd.abs()).abs());
    }
    outcome(worst <= 1e-4, format!("max |identity - finite difference| = {worst:.2e} (<= 1e-4) at w in {{3, 0.5, 0}}"))
}

fn c11_lgd() -> Outcome {
    let mut cfg = HeterogeneityConfig::new(8, 5, 50);
    cfg.shared_data = true;
    let loss = LossModel::new(LossKind::Logistic);
    let homo = generate_instance(&cfg, loss, 11).unwrap();
    let probes = default_probes(&homo, &[], 10, &mut derive_stream(11, &[6]));
    let h = lgd_fit(&homo, &probes).unwrap();
    let b_sq = h.b_sq_min_h0.unwrap_or(f64::NAN);
    let homo_ok = (b_sq - 1.0).abs() <= 1e-6 && h.h_sq_min_b1 <= 1e-8;
    let mut hs = Vec::new();
    for shift in [0.0, 1.0, 2.0] {
        let mut cfg = HeterogeneityConfig::new(8, 5, 50);
        cfg.shift = shift;
        let inst = generate_instance(&cfg, loss, 11).unwrap();
        let probes = default_probes(&inst, &[], 10, &mut derive_stream(11, &[6]));
        hs.push(lgd_fit(&inst, &probes).unwrap().h_sq_min_b1);
    }
    let monotone = hs.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        homo_ok && monotone,
        format!(
            "homogeneous (B^2, H^2) = ({b_sq:.9}, {:.1e}); H^2 at shift 0,1,2 = {:.3e}, {:.3e}, {:.3e}",
            h.h_sq_min_b1, hs[0], hs[1], hs[2]
        ),
    )
}

fn c12_verify_suite() -> Outcome {
    let start = Instant::now();
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/default.json");
    let out = Command::new(env!("CARGO_BIN_EXE_fedprox"))
        .args(["verify", fixture])
        .output()
        .expect("spawn fedprox");
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let checks = stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count();
    let failed: Vec<&str> = stdout.lines().filter(|l| l.starts_with("FAIL")).collect();
    outcome(
        out.status.code() == Some(0) && within(300, elapsed),
        format!(
            "exit {:?}, {checks} checks, {} failed {:?}, {:.1}s (< 300s)",
            out.status.code(),
            failed.len(),
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn main() {
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("homogeneous reduction", c01_homogeneous_reduction),
        ("inexact step identity", c02_step_identity),
        ("nonsmooth step bound", c03_step_bound),
        ("device sampling statistics", c04_sampling_statistics),
        ("argument stability", c05_argument_stability),
        ("Efron-Stein and gradient generalization", c06_efron_stein_and_generalization),
        ("smooth rate scaling", c07_smooth_rate),
        ("minibatch speedup", c08_minibatch_speedup),
        ("nonsmooth stationarity", c09_nonsmooth_stationarity),
        ("Moreau cross-check", c10_moreau_cross_check),
        ("LGD diagnostics", c11_lgd),
        ("verify suite", c12_verify_suite),
    ];
    let mut failed = Vec::new();
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let o = f();
        println!("criterion {id:2} {:4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
