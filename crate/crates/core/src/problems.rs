//! Loss families and their certified regularity constants.
//!
//! Every loss here is a function of the margin `s = <a, w>` and the label `y`,
//! so values and (sub)gradients are computed from a scalar profile and its
//! derivative, and the gradient is that derivative times the feature.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot_slices, ParamVector};
use crate::{Error, Result};

/// One data point `z = (a, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub feature: ParamVector,
    pub label: f64,
}

impl Example {
    pub fn new(feature: Vec<f64>, label: f64) -> Result<Self> {
        if !label.is_finite() {
            return Err(Error::NonFinite("example label".into()));
        }
        Ok(Self {
            feature: ParamVector::new(feature)?,
            label,
        })
    }

    pub fn margin(&self, w: &ParamVector) -> f64 {
        dot_slices(self.feature.as_slice(), w.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    /// `0.5 * (<a,w> - y)^2`
    Quadratic,
    /// `log(1 + exp(-y <a,w>))`, labels in {-1, +1}
    Logistic,
    /// `(sigmoid(<a,w>) - y)^2`
    SigmoidSquared,
    /// `|<a,w> - y|`
    Absolute,
    /// `|<a,w>^2 - y|`
    PhaseRetrieval,
}

impl LossKind {
    pub fn is_smooth(self) -> bool {
        matches!(self, Self::Quadratic | Self::Logistic | Self::SigmoidSquared)
    }

    pub fn is_convex(self) -> bool {
        matches!(self, Self::Quadratic | Self::Logistic | Self::Absolute)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub kind: LossKind,
    /// Radius of the ball `||w|| <= radius` on which constants are certified.
    #[serde(default = "default_radius")]
    pub domain_radius: f64,
}

fn default_radius() -> f64 {
    10.0
}

impl LossModel {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            domain_radius: default_radius(),
        }
    }

    pub fn with_radius(kind: LossKind, domain_radius: f64) -> Self {
        Self { kind, domain_radius }
    }
}

/// Lipschitz constant `g`, smoothness `l` (absent for nonsmooth kinds) and
/// weak-convexity modulus `nu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    pub g: f64,
    pub l: Option<f64>,
    pub nu: f64,
}

impl LossConstants {
    /// Curvature that the proximal term has to dominate: `L` for smooth
    /// losses, `nu` for weakly convex ones.
    pub fn curvature(&self) -> f64 {
        self.l.unwrap_or(self.nu)
    }

    /// Strong-convexity modulus of `R + ||w - c||^2 / (2 eta)`.
    pub fn prox_modulus(&self, eta: f64) -> f64 {
        1.0 / eta - self.nu
    }
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss as a function of the margin.
pub fn profile_value(kind: LossKind, s: f64, y: f64) -> f64 {
    match kind {
        LossKind::Quadratic => 0.5 * (s - y) * (s - y),
        LossKind::Logistic => softplus(-y * s),
        LossKind::SigmoidSquared => {
            let r = sigmoid(s) - y;
            r * r
        }
        LossKind::Absolute => (s - y).abs(),
        LossKind::PhaseRetrieval => (s * s - y).abs(),
    }
}

/// Derivative (or the fixed subgradient selection) of the profile in `s`.
///
/// Kinks: `Absolute` at zero residual returns 0; `PhaseRetrieval` at
/// `s^2 = y` takes the `+1` branch of the sign.
pub fn profile_derivative(kind: LossKind, s: f64, y: f64) -> f64 {
    match kind {
        LossKind::Quadratic => s - y,
        LossKind::Logistic => -y * sigmoid(-y * s),
        LossKind::SigmoidSquared => {
            let q = sigmoid(s);
            2.0 * (q - y) * q * (1.0 - q)
        }
        LossKind::Absolute => {
            let r = s - y;
            if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        LossKind::PhaseRetrieval => {
            let sign = if s * s - y < 0.0 { -1.0 } else { 1.0 };
            2.0 * sign * s
        }
    }
}

pub fn loss_value(model: &LossModel, w: &ParamVector, z: &Example) -> f64 {
    profile_value(model.kind, z.margin(w), z.label)
}

pub fn loss_subgrad(model: &LossModel, w: &ParamVector, z: &Example) -> ParamVector {
    z.feature.scaled(profile_derivative(model.kind, z.margin(w), z.label))
}

/// A finite mixture of example lists. Part `j` carries total weight
/// `weights[j]`, spread evenly over its examples; weights sum to one.
///
/// A device minibatch is a single part; the global empirical risk
/// `(1/M) sum_m R_m` is one part per device with weight `1/M`.
#[derive(Clone, Debug)]
pub struct EmpiricalRisk<'a> {
    parts: Vec<(&'a [Example], f64)>,
}

impl<'a> EmpiricalRisk<'a> {
    pub fn uniform(batch: &'a [Example]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { parts: vec![(batch, 1.0)] })
    }

    /// Equal weight per part, as in `(1/M) sum_m R_m`.
    pub fn mixture(parts: &[&'a [Example]]) -> Result<Self> {
        if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::EmptyBatch);
        }
        let w = 1.0 / parts.len() as f64;
        Ok(Self {
            parts: parts.iter().map(|p| (*p, w)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.parts[0].0[0].feature.dim()
    }

    /// Iterates `(example, weight)` pairs; weights sum to one.
    pub fn weighted(&self) -> impl Iterator<Item = (&'a Example, f64)> + '_ {
        self.parts.iter().flat_map(|(examples, w)| {
            let each = w / examples.len() as f64;
            examples.iter().map(move |z| (z, each))
        })
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(|(e, _)| e.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, model: &LossModel, w: &ParamVector) -> f64 {
        self.weighted()
            .map(|(z, c)| c * profile_value(model.kind, z.margin(w), z.label))
            .sum()
    }

    pub fn value_and_grad(&self, model: &LossModel, w: &ParamVector) -> (f64, ParamVector) {
        let mut grad = ParamVector::zeros(w.dim());
        let mut value = 0.0;
        for (z, c) in self.weighted() {
            let s = z.margin(w);
            value += c * profile_value(model.kind, s, z.label);
            let d = profile_derivative(model.kind, s, z.label);
            if d != 0.0 {
                grad.axpy_slice(c * d, z.feature.as_slice());
            }
        }
        (value, grad)
    }

    pub fn grad(&self, model: &LossModel, w: &ParamVector) -> ParamVector {
        self.value_and_grad(model, w).1
    }
}

/// Mean loss and mean (sub)gradient over a batch.
pub fn batch_risk_and_grad(
    model: &LossModel,
    batch: &[Example],
    w: &ParamVector,
) -> Result<(f64, ParamVector)> {
    let risk = EmpiricalRisk::uniform(batch)?;
    if risk.dim() != w.dim() {
        return Err(Error::DimensionMismatch {
            expected: w.dim(),
            found: risk.dim(),
        });
    }
    Ok(risk.value_and_grad(model, w))
}

/// `sup_s |d^2/ds^2 (sigmoid(s) - y)^2|` over labels in `[0, 1]`.
///
/// With `y = 0` the second derivative is `2 q^2 (1 - q)(2 - 3q)` for
/// `q = sigmoid(s)`; its maximum sits at `q = (15 - sqrt(33)) / 24` and dominates
/// the most negative value (attained at `q = (15 + sqrt(33)) / 24`). The
/// `y = 1` case is the mirror image and interior labels interpolate linearly.
pub fn sigmoid_squared_curvature_unit_labels() -> f64 {
    let q = (15.0 - 33f64.sqrt()) / 24.0;
    2.0 * q * q * (1.0 - q) * (2.0 - 3.0 * q)
}

/// `sup_s |d/ds (sigmoid(s) - y)^2|` over labels in `[0, 1]`: the maximum of
/// `2 q^2 (1 - q)` at `q = 2/3`, i.e. `8/27`.
pub const SIGMOID_SQUARED_SLOPE_UNIT_LABELS: f64 = 8.0 / 27.0;

/// Analytic constants for `model.kind` over `data`, valid on `||w|| <= radius`.
///
/// With `A = max ||a||` and `Y = max |y|`:
///
/// | kind           | G                     | L                      | nu      |
/// |----------------|-----------------------|------------------------|---------|
/// | Quadratic      | `A (radius A + Y)`    | `A^2`                  | 0       |
/// | Logistic       | `A`                   | `A^2 / 4`              | 0       |
/// | SigmoidSquared | `8/27 A` (labels in [0,1]) | `c* A^2`, `c* ~ 0.15408` | `L` |
/// | Absolute       | `A`                   | -                      | 0       |
/// | PhaseRetrieval | `2 A^2 radius`        | -                      | `2 A^2` |
///
/// For SigmoidSquared with labels outside `[0, 1]` the cruder bounds
/// `G = A (1 + Y) / 2` and `L = A^2 (1/8 + (1 + Y) / (3 sqrt 3))` are used.
pub fn certify_constants(model: &LossModel, data: &[Example], radius: f64) -> LossConstants {
    let a = data.iter().map(|z| z.feature.norm()).fold(0.0, f64::max);
    let y = data.iter().map(|z| z.label.abs()).fold(0.0, f64::max);
    match model.kind {
        LossKind::Quadratic => LossConstants {
            g: a * (radius * a + y),
            l: Some(a * a),
            nu: 0.0,
        },
        LossKind::Logistic => LossConstants {
            g: a,
            l: Some(a * a / 4.0),
            nu: 0.0,
        },
        LossKind::SigmoidSquared => {
            let unit = data.iter().all(|z| (0.0..=1.0).contains(&z.label));
            let (g, l) = if unit {
                (
                    SIGMOID_SQUARED_SLOPE_UNIT_LABELS * a,
                    sigmoid_squared_curvature_unit_labels() * a * a,
                )
            } else {
                (
                    a * (1.0 + y) / 2.0,
                    a * a * (0.125 + (1.0 + y) / (3.0 * 3f64.sqrt())),
                )
            };
            LossConstants { g, l: Some(l), nu: l }
        }
        LossKind::Absolute => LossConstants { g: a, l: None, nu: 0.0 },
        LossKind::PhaseRetrieval => LossConstants {
            g: 2.0 * a * a * radius,
            l: None,
            nu: 2.0 * a * a,
        },
    }
}
