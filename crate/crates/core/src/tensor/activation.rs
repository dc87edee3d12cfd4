use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Elementwise nonlinearities available to the encoders and the fusion layer.
///
/// GELU uses the exact normal CDF (via `erf`). GoLU is the Gompertz gate
/// `x * exp(-exp(-x))`. `Identity` only exists so the fusion layer can be run
/// without a nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationKind {
    Swish,
    Mish,
    Gelu,
    Golu,
    Sigmoid,
    HSwish,
    Identity,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl ActivationKind {
    pub const ALL: [ActivationKind; 7] = [
        ActivationKind::Swish,
        ActivationKind::Mish,
        ActivationKind::Gelu,
        ActivationKind::Golu,
        ActivationKind::Sigmoid,
        ActivationKind::HSwish,
        ActivationKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Swish => "swish",
            ActivationKind::Mish => "mish",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Golu => "golu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::HSwish => "hswish",
            ActivationKind::Identity => "identity",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Swish => x * sigmoid(x),
            ActivationKind::Mish => x * softplus(x).tanh(),
            ActivationKind::Gelu => 0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2)),
            ActivationKind::Golu => {
                let gate = (-(-x).exp()).exp();
                if gate == 0.0 {
                    0.0
                } else {
                    x * gate
                }
            }
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::HSwish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
            ActivationKind::Identity => x,
        }
    }

    /// Derivative with respect to the input.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            ActivationKind::Mish => {
                let t = softplus(x).tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
            ActivationKind::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
                let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
                cdf + x * pdf
            }
            ActivationKind::Golu => {
                let e = (-x).exp();
                let gate = (-e).exp();
                if gate == 0.0 {
                    0.0
                } else {
                    gate * (1.0 + x * e)
                }
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::HSwish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            ActivationKind::Identity => 1.0,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "swish" | "silu" => Ok(ActivationKind::Swish),
            "mish" => Ok(ActivationKind::Mish),
            "gelu" => Ok(ActivationKind::Gelu),
            "golu" => Ok(ActivationKind::Golu),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "hswish" | "hardswish" | "h-swish" => Ok(ActivationKind::HSwish),
            "identity" | "none" => Ok(ActivationKind::Identity),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}
