//! The JSON configuration file.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "instance": { "loss": "Logistic", "generator": { "num_devices": 8, "dim": 5, "base_n": 40 } },
//!   "run": { "algorithm": "FedProx", "rounds": 200, "devices_per_round": 4, "schedule": "SmoothFedProx" },
//!   "diagnostics": { "lgd": true },
//!   "stability": { "trials": 200 },
//!   "verify": {}
//! }
//! ```
//!
//! The top-level `seed` drives both instance generation and the run; any
//! `run.seed` is overwritten by it.

use std::path::{Path, PathBuf};

use fedprox_core::datagen::generate_instance;
use fedprox_core::diagnostics::MoreauConfig;
use fedprox_core::{FederatedInstance, HeterogeneityConfig, LossKind, LossModel, RunConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub seed: u64,
    pub instance: InstanceSection,
    pub run: RunConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSection {
    pub loss: LossKind,
    #[serde(default = "default_radius")]
    pub domain_radius: f64,
    /// Synthetic generator; exclusive with `file`.
    #[serde(default)]
    pub generator: Option<HeterogeneityConfig>,
    /// Instance JSON written by `FederatedInstance::to_json`, relative to the
    /// config file.
    #[serde(default)]
    pub file: Option<PathBuf>,
}

fn default_radius() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Moreau settings; setting them switches on `run.record.moreau`.
    #[serde(default)]
    pub moreau: Option<MoreauConfig>,
    /// Fit the LGD corners over the run's iterates plus random probes.
    #[serde(default)]
    pub lgd: bool,
    #[serde(default = "ten")]
    pub lgd_random_probes: usize,
}

fn ten() -> usize {
    10
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            moreau: None,
            lgd: false,
            lgd_random_probes: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Neighboring-pair trials for the argument-stability probe.
    #[serde(default = "trials")]
    pub trials: usize,
    /// Dataset size for the argument-stability probe.
    #[serde(default = "n_stab")]
    pub n: usize,
    /// `eta = eta_fraction / L`
    #[serde(default = "half")]
    pub eta_fraction: f64,
    #[serde(default = "solver_eps")]
    pub solver_eps: f64,
    /// Sample sets for the Efron-Stein and generalization probes.
    #[serde(default = "samples")]
    pub samples: usize,
    #[serde(default = "n_es")]
    pub samples_n: usize,
}

fn yes() -> bool {
    true
}
fn trials() -> usize {
    200
}
fn n_stab() -> usize {
    20
}
fn half() -> f64 {
    0.5
}
fn solver_eps() -> f64 {
    1e-10
}
fn samples() -> usize {
    500
}
fn n_es() -> usize {
    10
}

impl Default for StabilitySection {
    fn default() -> Self {
        Self {
            enabled: true,
            trials: trials(),
            n: n_stab(),
            eta_fraction: half(),
            solver_eps: solver_eps(),
            samples: samples(),
            samples_n: n_es(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Multiplies the certified `G` seen by the loss-constant checks.
    /// Anything below 1 is a deliberate fault those checks must catch.
    #[serde(default = "one_f")]
    pub lipschitz_scale: f64,
    /// Random pairs per loss-constant check.
    #[serde(default = "pairs")]
    pub pairs: usize,
    /// Rounds for the run-based checks.
    #[serde(default = "verify_rounds")]
    pub rounds: usize,
    /// Subgradient steps for the nonsmooth step-bound check.
    #[serde(default = "subgrad_k")]
    pub subgrad_steps: usize,
}

fn one_f() -> f64 {
    1.0
}
fn pairs() -> usize {
    1000
}
fn verify_rounds() -> usize {
    100
}
fn subgrad_k() -> usize {
    100_000
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            lipschitz_scale: 1.0,
            pairs: pairs(),
            rounds: verify_rounds(),
            subgrad_steps: subgrad_k(),
        }
    }
}

/// A parsed config plus the directory relative paths resolve against.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut file: ConfigFile =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed_override {
            file.seed = s;
        }
        file.run.seed = file.seed;
        if let Some(m) = file.diagnostics.moreau {
            if file.run.moreau.is_some() {
                return Err(CliError::Config("set diagnostics.moreau or run.moreau, not both".into()));
            }
            file.run.moreau = Some(m);
            file.run.record.moreau = true;
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { file, base_dir };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<(), CliError> {
        let inst = &self.file.instance;
        match (&inst.generator, &inst.file) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("instance: set exactly one of generator and file".into()))
            }
            (None, None) => return Err(CliError::Config("instance: one of generator or file is required".into())),
            (Some(g), None) => g.validate().map_err(CliError::from)?,
            (None, Some(_)) => {}
        }
        if !(inst.domain_radius > 0.0) {
            return Err(CliError::Config("instance.domain_radius must be positive".into()));
        }
        let v = &self.file.verify;
        if !(v.lipschitz_scale > 0.0) {
            return Err(CliError::Config("verify.lipschitz_scale must be positive".into()));
        }
        if v.pairs < 1 || v.rounds < 1 || v.subgrad_steps < 1 {
            return Err(CliError::Config("verify.pairs, verify.rounds and verify.subgrad_steps must be >= 1".into()));
        }
        let s = &self.file.stability;
        if s.n < 2 || s.samples < 2 || s.samples_n < 1 || !(s.eta_fraction > 0.0 && s.eta_fraction < 1.0) {
            return Err(CliError::Config(
                "stability: need n >= 2, samples >= 2, samples_n >= 1 and eta_fraction in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossModel {
        LossModel::with_radius(self.file.instance.loss, self.file.instance.domain_radius)
    }

    /// Builds the instance and checks the run config against it.
    pub fn instance(&self) -> Result<FederatedInstance, CliError> {
        let loss = self.loss();
        let inst = match (&self.file.instance.generator, &self.file.instance.file) {
            (Some(g), _) => generate_instance(g, loss, self.file.seed)?,
            (None, Some(f)) => {
                let path = self.base_dir.join(f);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Config(format!("instance.file {}: {e}", path.display())))?;
                let mut inst = FederatedInstance::from_json(&text)?;
                inst.loss = loss;
                inst.recertify();
                inst
            }
            (None, None) => unreachable!("validated"),
        };
        self.file.run.validate(&inst)?;
        Ok(inst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "seed": 3,
        "instance": { "loss": "Logistic", "generator": { "num_devices": 4, "dim": 3, "base_n": 10 } },
        "run": { "algorithm": "FedProx", "rounds": 5, "devices_per_round": 2, "schedule": "SmoothFedProx", "seed": 99 }
    }"#;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn top_level_seed_wins_and_override_wins_over_both() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.json", BASE);
        assert_eq!(LoadedConfig::load(&p, None).unwrap().file.run.seed, 3);
        let c = LoadedConfig::load(&p, Some(11)).unwrap();
        assert_eq!((c.file.seed, c.file.run.seed), (11, 11));
    }

    #[test]
    fn instance_file_matches_the_generated_instance() {
        let dir = tempfile::tempdir().unwrap();
        let gen = LoadedConfig::load(&write(dir.path(), "g.json", BASE), None).unwrap();
        let inst = gen.instance().unwrap();
        write(dir.path(), "inst.json", &inst.to_json());
        let mut v: serde_json::Value = serde_json::from_str(BASE).unwrap();
        v["instance"] = serde_json::json!({ "loss": "Logistic", "file": "inst.json" });
        let from_file = LoadedConfig::load(&write(dir.path(), "f.json", &v.to_string()), None).unwrap();
        assert_eq!(from_file.instance().unwrap(), inst);
    }

    #[test]
    fn generator_and_file_are_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(BASE).unwrap();
        v["instance"]["file"] = "x.json".into();
        let err = LoadedConfig::load(&write(dir.path(), "c.json", &v.to_string()), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        v["instance"].as_object_mut().unwrap().remove("file");
        v["instance"].as_object_mut().unwrap().remove("generator");
        assert!(LoadedConfig::load(&write(dir.path(), "d.json", &v.to_string()), None).is_err());
    }

    #[test]
    fn diagnostics_moreau_switches_on_recording() {
        let dir = tempfile::tempdir().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(BASE).unwrap();
        v["diagnostics"] = serde_json::json!({ "moreau": { "rho": 0.5 } });
        let c = LoadedConfig::load(&write(dir.path(), "c.json", &v.to_string()), None).unwrap();
        assert!(c.file.run.record.moreau);
        assert_eq!(c.file.run.moreau.unwrap().rho, 0.5);
        v["run"]["moreau"] = serde_json::json!({ "rho": 0.5 });
        assert!(LoadedConfig::load(&write(dir.path(), "d.json", &v.to_string()), None).is_err());
    }
}
