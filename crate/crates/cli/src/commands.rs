//! `run`, `sweep` and `verify`.

use std::fs;
use std::path::Path;

use fedprox_core::diagnostics::{default_probes, lgd_fit};
use fedprox_core::engine::{self, epsilon_budget};
use fedprox_core::numerics::purpose;
use fedprox_core::{derive_stream, Algorithm, FederatedInstance, RunConfig, TraceLog};
use serde::Serialize;

use crate::config::LoadedConfig;
use crate::output::{log_log_slope, trace_csv, RunSummaryJson};
use crate::svg::{line_chart, Series};
use crate::verify;
use crate::CliError;

fn run_and_summarize(
    cfg: &LoadedConfig,
    inst: &FederatedInstance,
    run: &RunConfig,
) -> Result<(TraceLog, String), CliError> {
    let trace = engine::run(inst, run)?;
    let lgd = if cfg.file.diagnostics.lgd && inst.loss.kind.is_smooth() {
        let mut rng = derive_stream(cfg.file.seed, &[purpose::PROBES]);
        let probes = default_probes(inst, &trace.iterates, cfg.file.diagnostics.lgd_random_probes, &mut rng);
        Some(lgd_fit(inst, &probes)?)
    } else {
        None
    };
    let c = inst.constants;
    let summary = RunSummaryJson {
        algorithm: format!("{:?}", run.algorithm),
        rounds: run.rounds,
        devices_per_round: run.devices_per_round,
        minibatch: run.minibatch,
        seed: run.seed,
        eta: trace.summary.eta,
        eps_budget: trace.records.first().map_or(0.0, |r| r.eps_budget),
        constants: c,
        avg_grad_sq: trace.summary.avg_grad_sq,
        avg_moreau_sq: trace.summary.avg_moreau_sq,
        t_star: trace.summary.t_star,
        output_w: trace.output().as_slice(),
        final_w: trace.summary.final_w.as_slice(),
        lgd,
        wall_time_secs: trace.summary.wall_time_secs,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    Ok((trace, json))
}

pub fn cmd_run(config: &Path, out_dir: &Path, seed: Option<u64>, svg: bool) -> Result<(), CliError> {
    let cfg = LoadedConfig::load(config, seed)?;
    let inst = cfg.instance()?;
    let (trace, summary) = run_and_summarize(&cfg, &inst, &cfg.file.run)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("trace.csv"), trace_csv(&trace))?;
    fs::write(out_dir.join("summary.json"), summary + "\n")?;
    if svg {
        let (name, pick): (&str, fn(&fedprox_core::RoundRecord) -> Option<f64>) = if inst.loss.kind.is_smooth() {
            ("||grad R||^2", |r| r.global_grad_sq)
        } else {
            ("||grad R_rho||^2", |r| r.moreau_grad_sq)
        };
        let series = Series {
            name: name.into(),
            points: trace
                .records
                .iter()
                .filter_map(|r| pick(r).map(|v| (r.t as f64, v)))
                .collect(),
        };
        let chart = line_chart(&format!("{:?}", cfg.file.run.algorithm), "round", name, &[series], true);
        fs::write(out_dir.join("trace.svg"), chart)?;
    }
    let metric = match (trace.summary.avg_grad_sq, trace.summary.avg_moreau_sq) {
        (Some(g), _) => format!(", avg ||grad R||^2 = {g:e}"),
        (None, Some(m)) => format!(", avg ||grad R_rho||^2 = {m:e}"),
        _ => String::new(),
    };
    println!("{} rounds written to {}{metric}", trace.records.len(), out_dir.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
pub enum Axis {
    #[value(name = "T")]
    #[serde(rename = "T")]
    T,
    #[value(name = "I")]
    #[serde(rename = "I")]
    I,
    #[value(name = "b")]
    #[serde(rename = "b")]
    B,
    #[value(name = "bI")]
    #[serde(rename = "bI")]
    BI,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::T => "T",
            Axis::I => "I",
            Axis::B => "b",
            Axis::BI => "bI",
        }
    }
}

/// Splits a `bI` value into `(b, I)`: `I` is the largest divisor of the value
/// that is at most both `M` and its square root.
pub fn split_bi(value: usize, m: usize) -> (usize, usize) {
    let i = (1..=value)
        .filter(|d| value % d == 0 && *d <= m && d * d <= value)
        .max()
        .unwrap_or(1);
    (value / i, i)
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    axis: Axis,
    metric: &'static str,
    values: Vec<usize>,
    minibatch: Vec<usize>,
    devices_per_round: Vec<usize>,
    eta: Vec<f64>,
    eps_budget: Vec<f64>,
    results: Vec<f64>,
    slope: Option<f64>,
}

pub fn cmd_sweep(config: &Path, axis: Axis, values: &[usize], out_dir: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = LoadedConfig::load(config, seed)?;
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    if matches!(axis, Axis::B | Axis::BI) && cfg.file.run.algorithm != Algorithm::FedMSPP {
        return Err(CliError::Config("sweep axis b requires FedMSPP (run.algorithm)".into()));
    }
    let inst = cfg.instance()?;
    let smooth = inst.loss.kind.is_smooth();
    let metric = if smooth { "avg_grad_sq" } else { "avg_moreau_sq" };
    let mut summary = SweepSummary {
        axis,
        metric,
        values: values.to_vec(),
        minibatch: vec![],
        devices_per_round: vec![],
        eta: vec![],
        eps_budget: vec![],
        results: vec![],
        slope: None,
    };
    let mut csv = format!("value,minibatch,devices_per_round,eta,{metric}\n");
    for &v in values {
        let mut run = cfg.file.run.clone();
        match axis {
            Axis::T => run.rounds = v,
            Axis::I => run.devices_per_round = v,
            Axis::B => run.minibatch = v,
            Axis::BI => (run.minibatch, run.devices_per_round) = split_bi(v, inst.num_devices()),
        }
        if !smooth {
            run.record.moreau = true;
        }
        let trace = engine::run(&inst, &run)?;
        let value = if smooth {
            trace.summary.avg_grad_sq
        } else {
            trace.summary.avg_moreau_sq
        }
        .expect("metric recorded");
        let c = inst.constants;
        summary.minibatch.push(run.minibatch);
        summary.devices_per_round.push(run.devices_per_round);
        summary.eta.push(trace.summary.eta);
        summary
            .eps_budget
            .push(epsilon_budget(run.algorithm, c.g, c.l, trace.summary.eta, run.devices_per_round, run.minibatch));
        summary.results.push(value);
        csv.push_str(&format!(
            "{v},{},{},{:?},{value:?}\n",
            run.minibatch, run.devices_per_round, trace.summary.eta
        ));
        println!("{} = {v}: {metric} = {value:e}", axis.name());
    }
    let pts: Vec<(f64, f64)> = values.iter().zip(&summary.results).map(|(&v, &r)| (v as f64, r)).collect();
    summary.slope = log_log_slope(&pts);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("sweep.csv"), csv)?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    if let Some(s) = summary.slope {
        println!("log-log slope: {s:.4}");
    }
    Ok(())
}

pub fn cmd_verify(config: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = LoadedConfig::load(config, seed)?;
    let inst = cfg.instance()?;
    let checks = verify::run_all(&cfg, &inst);
    let mut failed = Vec::new();
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.pass {
            failed.push(c.name.clone());
        }
    }
    println!("{} of {} checks passed", checks.len() - failed.len(), checks.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(failed.join(", ")))
    }
}
