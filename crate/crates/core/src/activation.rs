//! Pointwise activation functions and their derivatives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Swish,
    Hswish,
    LeakyRelu,
    Identity,
}

pub const LEAKY_SLOPE: f32 = 0.01;

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl ActivationKind {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Swish => x * sigmoid(x),
            ActivationKind::Hswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
            ActivationKind::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            ActivationKind::Identity => x,
        }
    }

    pub fn derivative(self, x: f32) -> f32 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            ActivationKind::Hswish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            ActivationKind::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            ActivationKind::Identity => 1.0,
        }
    }

    /// Lower bound of the function's range, if it has one.
    pub fn lower_bound(self) -> Option<f32> {
        match self {
            ActivationKind::Relu => Some(0.0),
            // x·σ(x) is minimized at x ≈ -1.2785
            ActivationKind::Swish => Some(-0.278_464_5),
            ActivationKind::Hswish => Some(-0.375),
            ActivationKind::LeakyRelu | ActivationKind::Identity => None,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ActivationKind::Relu => 0,
            ActivationKind::Swish => 1,
            ActivationKind::Hswish => 2,
            ActivationKind::LeakyRelu => 3,
            ActivationKind::Identity => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ActivationKind::Relu,
            1 => ActivationKind::Swish,
            2 => ActivationKind::Hswish,
            3 => ActivationKind::LeakyRelu,
            4 => ActivationKind::Identity,
            _ => return None,
        })
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Swish => "swish",
            ActivationKind::Hswish => "hswish",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Identity => "identity",
        };
        f.write_str(name)
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "swish" => Ok(ActivationKind::Swish),
            "hswish" | "h-swish" => Ok(ActivationKind::Hswish),
            "leaky_relu" | "leaky-relu" => Ok(ActivationKind::LeakyRelu),
            "identity" => Ok(ActivationKind::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}
