//! Elementwise operations that may appear inside a searched FFN.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// GeLU scale.
pub const C1: f64 = 0.5;
/// sqrt(2 / pi), the GeLU tanh-approximation slope.
pub const C2: f64 = std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2;
/// GeLU cubic coefficient.
pub const C3: f64 = 0.044715;
/// Leaky ReLU negative slope.
pub const C4: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveOp {
    Add,
    Mul,
    Max,
    Gelu,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu,
    Elu,
    Swish,
}

impl PrimitiveOp {
    pub const ALL: [PrimitiveOp; 10] = [
        PrimitiveOp::Add,
        PrimitiveOp::Mul,
        PrimitiveOp::Max,
        PrimitiveOp::Gelu,
        PrimitiveOp::Sigmoid,
        PrimitiveOp::Tanh,
        PrimitiveOp::Relu,
        PrimitiveOp::LeakyRelu,
        PrimitiveOp::Elu,
        PrimitiveOp::Swish,
    ];

    pub const BINARY: [PrimitiveOp; 3] = [PrimitiveOp::Add, PrimitiveOp::Mul, PrimitiveOp::Max];

    pub const UNARY: [PrimitiveOp; 7] = [
        PrimitiveOp::Gelu,
        PrimitiveOp::Sigmoid,
        PrimitiveOp::Tanh,
        PrimitiveOp::Relu,
        PrimitiveOp::LeakyRelu,
        PrimitiveOp::Elu,
        PrimitiveOp::Swish,
    ];

    pub fn arity(self) -> usize {
        match self {
            PrimitiveOp::Add | PrimitiveOp::Mul | PrimitiveOp::Max => 2,
            _ => 1,
        }
    }

    /// Position in [`PrimitiveOp::ALL`]; used as a histogram bin.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveOp::Add => "add",
            PrimitiveOp::Mul => "mul",
            PrimitiveOp::Max => "max",
            PrimitiveOp::Gelu => "gelu",
            PrimitiveOp::Sigmoid => "sigmoid",
            PrimitiveOp::Tanh => "tanh",
            PrimitiveOp::Relu => "relu",
            PrimitiveOp::LeakyRelu => "leakyrelu",
            PrimitiveOp::Elu => "elu",
            PrimitiveOp::Swish => "swish",
        }
    }

    /// Forward value of a unary operation.
    pub fn unary(self, x: f64) -> f64 {
        match self {
            PrimitiveOp::Gelu => C1 * x * (1.0 + (C2 * (x + C3 * x * x * x)).tanh()),
            PrimitiveOp::Sigmoid => sigmoid(x),
            PrimitiveOp::Tanh => x.tanh(),
            PrimitiveOp::Relu => x.max(0.0),
            PrimitiveOp::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    C4 * x
                }
            }
            PrimitiveOp::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            PrimitiveOp::Swish => x * sigmoid(x),
            PrimitiveOp::Add | PrimitiveOp::Mul | PrimitiveOp::Max => {
                unreachable!("{} is binary", self.name())
            }
        }
    }

    /// Derivative of a unary operation at `x`.
    pub fn unary_grad(self, x: f64) -> f64 {
        match self {
            PrimitiveOp::Gelu => {
                let th = (C2 * (x + C3 * x * x * x)).tanh();
                C1 * (1.0 + th) + C1 * x * (1.0 - th * th) * C2 * (1.0 + 3.0 * C3 * x * x)
            }
            PrimitiveOp::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            PrimitiveOp::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            PrimitiveOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            PrimitiveOp::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    C4
                }
            }
            // right derivative at 0
            PrimitiveOp::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            PrimitiveOp::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            PrimitiveOp::Add | PrimitiveOp::Mul | PrimitiveOp::Max => {
                unreachable!("{} is binary", self.name())
            }
        }
    }

    pub fn binary(self, x: f64, y: f64) -> f64 {
        match self {
            PrimitiveOp::Add => x + y,
            PrimitiveOp::Mul => x * y,
            PrimitiveOp::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
            _ => unreachable!("{} is unary", self.name()),
        }
    }

    /// Partial derivatives `(d/dx, d/dy)`. Max ties split the gradient evenly.
    pub fn binary_grad(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            PrimitiveOp::Add => (1.0, 1.0),
            PrimitiveOp::Mul => (y, x),
            PrimitiveOp::Max => {
                if x > y {
                    (1.0, 0.0)
                } else if x < y {
                    (0.0, 1.0)
                } else {
                    (0.5, 0.5)
                }
            }
            _ => unreachable!("{} is unary", self.name()),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for PrimitiveOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PrimitiveOp::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown primitive `{s}`")))
    }
}
