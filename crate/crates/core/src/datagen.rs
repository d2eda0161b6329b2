//! Synthetic heterogeneous federated instances.
//!
//! Device `m` owns a ground-truth parameter `w*_m = w_base + shift * u_m` with
//! `u_m` a uniformly random unit direction, so `shift` is a continuous
//! dissimilarity dial and `shift = 0` gives identical label-generating models.
//! Features are Gaussian with diagonal covariance `diag(j^-decay)`, optionally
//! rescaled onto a sphere of fixed radius.

use serde::{Deserialize, Serialize};

use crate::numerics::{purpose, ParamVector, RngStream};
use crate::problems::{certify_constants, sigmoid, Example, LossConstants, LossKind, LossModel};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneityConfig {
    /// Number of devices `M`.
    pub num_devices: usize,
    /// Dimension `p`.
    pub dim: usize,
    /// Size of the first device; device `m` (1-based) gets `floor(base_n / m^exponent)`, at least 1.
    pub base_n: usize,
    #[serde(default)]
    pub imbalance_exponent: f64,
    /// Scale of `||w*_m - w_base||`.
    #[serde(default)]
    pub shift: f64,
    /// Covariance diagonal is `j^-feature_decay` for `j = 1..=p`.
    #[serde(default)]
    pub feature_decay: f64,
    /// If set, every feature vector is rescaled to this Euclidean norm.
    #[serde(default)]
    pub feature_norm: Option<f64>,
    /// Scale of the shared ground truth `w_base`.
    #[serde(default = "one")]
    pub truth_scale: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// All devices hold a copy of device 0's data (the homogeneous case).
    #[serde(default)]
    pub shared_data: bool,
}

fn one() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.1
}

impl HeterogeneityConfig {
    pub fn new(num_devices: usize, dim: usize, base_n: usize) -> Self {
        Self {
            num_devices,
            dim,
            base_n,
            imbalance_exponent: 0.0,
            shift: 0.0,
            feature_decay: 0.0,
            feature_norm: None,
            truth_scale: 1.0,
            noise_std: default_noise(),
            shared_data: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("instance.{field}: {why}")));
        if self.num_devices < 1 {
            return bad("num_devices", "must be >= 1");
        }
        if self.dim < 1 {
            return bad("dim", "must be >= 1");
        }
        if self.base_n < 1 {
            return bad("base_n", "must be >= 1");
        }
        if !(self.imbalance_exponent >= 0.0) {
            return bad("imbalance_exponent", "must be >= 0");
        }
        if !(self.shift >= 0.0) {
            return bad("shift", "must be >= 0");
        }
        if !self.feature_decay.is_finite() {
            return bad("feature_decay", "must be finite");
        }
        if let Some(r) = self.feature_norm {
            if !(r > 0.0) {
                return bad("feature_norm", "must be > 0");
            }
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std", "must be >= 0");
        }
        if !(self.truth_scale >= 0.0) {
            return bad("truth_scale", "must be >= 0");
        }
        Ok(())
    }

    /// `N_m = max(1, floor(base_n / m^exponent))` for `m = 1..=M`.
    pub fn device_sizes(&self) -> Vec<usize> {
        (1..=self.num_devices)
            .map(|m| {
                if self.shared_data {
                    return self.base_n;
                }
                let n = (self.base_n as f64 / (m as f64).powf(self.imbalance_exponent)).floor();
                (n as usize).max(1)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceDataset {
    pub device_id: usize,
    pub examples: Vec<Example>,
}

impl DeviceDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Per-device data distributions, sampleable without limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub truths: Vec<ParamVector>,
    pub covariance_diag: Vec<f64>,
    pub noise_std: f64,
    pub feature_norm: Option<f64>,
    /// Label model the truths feed.
    pub label_kind: LossKind,
}

impl PopulationSpec {
    pub fn dim(&self) -> usize {
        self.covariance_diag.len()
    }

    pub fn num_devices(&self) -> usize {
        self.truths.len()
    }

    pub fn sample_feature(&self, rng: &mut RngStream) -> ParamVector {
        let mut a: Vec<f64> = self
            .covariance_diag
            .iter()
            .map(|v| v.sqrt() * rng.normal())
            .collect();
        if let Some(r) = self.feature_norm {
            let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                for x in &mut a {
                    *x *= r / n;
                }
            } else {
                a[0] = r;
            }
        }
        ParamVector::new(a).expect("finite gaussian draw")
    }

    pub fn sample_label(&self, rng: &mut RngStream, truth: &ParamVector, a: &ParamVector) -> f64 {
        let s = a.dot(truth);
        let noise = self.noise_std * rng.normal();
        match self.label_kind {
            LossKind::Quadratic | LossKind::Absolute => s + noise,
            LossKind::Logistic => {
                if rng.uniform() < sigmoid(s) {
                    1.0
                } else {
                    -1.0
                }
            }
            LossKind::SigmoidSquared => (sigmoid(s) + noise).clamp(0.0, 1.0),
            LossKind::PhaseRetrieval => (s * s + noise).max(0.0),
        }
    }

    /// One fresh example from device `m`'s distribution.
    pub fn sample(&self, rng: &mut RngStream, m: usize) -> Example {
        let a = self.sample_feature(rng);
        let y = self.sample_label(rng, &self.truths[m], &a);
        Example { feature: a, label: y }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederatedInstance {
    pub dim: usize,
    pub devices: Vec<DeviceDataset>,
    pub loss: LossModel,
    pub constants: LossConstants,
    #[serde(default)]
    pub population: Option<PopulationSpec>,
}

impl FederatedInstance {
    /// Builds an instance from explicit device data and certifies constants
    /// over the union of all examples.
    pub fn from_devices(devices: Vec<Vec<Example>>, loss: LossModel) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::Config("instance needs at least one device".into()));
        }
        let dim = devices
            .iter()
            .flatten()
            .next()
            .ok_or(Error::EmptyBatch)?
            .feature
            .dim();
        for (m, d) in devices.iter().enumerate() {
            if d.is_empty() {
                return Err(Error::Config(format!("device {m} has no examples")));
            }
            if let Some(z) = d.iter().find(|z| z.feature.dim() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: z.feature.dim(),
                });
            }
        }
        let devices: Vec<DeviceDataset> = devices
            .into_iter()
            .enumerate()
            .map(|(device_id, examples)| DeviceDataset { device_id, examples })
            .collect();
        let mut inst = Self {
            dim,
            devices,
            loss,
            constants: LossConstants { g: 0.0, l: None, nu: 0.0 },
            population: None,
        };
        inst.recertify();
        Ok(inst)
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn recertify(&mut self) {
        let all: Vec<Example> = self.devices.iter().flat_map(|d| d.examples.iter().cloned()).collect();
        self.constants = certify_constants(&self.loss, &all, self.loss.domain_radius);
    }

    pub fn device_slices(&self) -> Vec<&[Example]> {
        self.devices.iter().map(|d| d.examples.as_slice()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let inst: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if inst.devices.iter().flat_map(|d| &d.examples).any(|z| z.feature.dim() != inst.dim) {
            return Err(Error::Config("feature dimension differs from instance dim".into()));
        }
        Ok(inst)
    }
}

/// Deterministic in `(cfg, loss, seed)`.
pub fn generate_instance(cfg: &HeterogeneityConfig, loss: LossModel, seed: u64) -> Result<FederatedInstance> {
    cfg.validate()?;
    let p = cfg.dim;
    let covariance_diag: Vec<f64> = (1..=p).map(|j| (j as f64).powf(-cfg.feature_decay)).collect();
    let max_sd = covariance_diag.iter().fold(0.0f64, |a, v| a.max(v.sqrt()));

    let mut truth_rng = RngStream::new(seed, &[purpose::DATA, 0]);
    let base: Vec<f64> = covariance_diag
        .iter()
        .map(|v| cfg.truth_scale * truth_rng.normal() * v.sqrt() / max_sd)
        .collect();
    let base = ParamVector::new(base)?;
    let truths: Vec<ParamVector> = (0..cfg.num_devices)
        .map(|_| {
            let u: Vec<f64> = (0..p).map(|_| truth_rng.normal()).collect();
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let mut w = base.clone();
            if cfg.shift > 0.0 {
                let dir = ParamVector::new(u.iter().map(|x| x / n).collect()).expect("finite");
                w.axpy(cfg.shift, &dir);
            }
            w
        })
        .collect();

    let population = PopulationSpec {
        truths,
        covariance_diag,
        noise_std: cfg.noise_std,
        feature_norm: cfg.feature_norm,
        label_kind: loss.kind,
    };

    let sizes = cfg.device_sizes();
    let mut devices: Vec<Vec<Example>> = Vec::with_capacity(cfg.num_devices);
    for (m, &n) in sizes.iter().enumerate() {
        if cfg.shared_data && m > 0 {
            devices.push(devices[0].clone());
            continue;
        }
        let mut rng = RngStream::new(seed, &[purpose::DATA, 1, m as u64]);
        devices.push((0..n).map(|_| population.sample(&mut rng, m)).collect());
    }
    let mut inst = FederatedInstance::from_devices(devices, loss)?;
    inst.population = Some(population);
    Ok(inst)
}

/// Copy of `inst` with example `i` of device `m` replaced by `z`; constants
/// are re-certified on the new data.
pub fn neighboring_instance(inst: &FederatedInstance, m: usize, i: usize, z: Example) -> Result<FederatedInstance> {
    let device = inst.devices.get(m).ok_or_else(|| Error::Config(format!("no device {m}")))?;
    if i >= device.len() {
        return Err(Error::IndexOutOfRange {
            device: m,
            index: i,
            len: device.len(),
        });
    }
    if z.feature.dim() != inst.dim {
        return Err(Error::DimensionMismatch {
            expected: inst.dim,
            found: z.feature.dim(),
        });
    }
    let mut out = inst.clone();
    out.devices[m].examples[i] = z;
    out.recertify();
    Ok(out)
}

/// `E[(<a,w> - y) a] = Sigma (w - w*_m)` for the Gaussian linear-label population.
pub fn population_gradient(spec: &PopulationSpec, loss: &LossModel, w: &ParamVector, m: usize) -> Result<ParamVector> {
    if loss.kind != LossKind::Quadratic || spec.label_kind != LossKind::Quadratic {
        return Err(Error::PopulationGradientUnavailable(format!(
            "closed form exists only for Quadratic, got {:?}",
            loss.kind
        )));
    }
    if spec.feature_norm.is_some() {
        return Err(Error::PopulationGradientUnavailable(
            "normalized features have no closed-form second moment".into(),
        ));
    }
    let truth = spec
        .truths
        .get(m)
        .ok_or_else(|| Error::Config(format!("no device {m} in population")))?;
    let diff = w.sub(truth);
    let g: Vec<f64> = diff.iter().zip(&spec.covariance_diag).map(|(d, s)| d * s).collect();
    ParamVector::new(g)
}
