use crate::error::{ensure, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

/// Pointwise nonlinearity of an activation layer.
///
/// `Dropout` multiplies by an inverted-dropout mask in train mode and is the
/// identity in eval mode; it is listed here because the probes treat it as
/// "a ReLU that blocks at random".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu { alpha: f64 },
    Elu { alpha: f64 },
    /// `x·sigmoid(x)`.
    Swish,
    /// Tanh approximation.
    Gelu,
    Dropout { p: f64 },
    Identity,
}

impl ActivationKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::LeakyRelu { alpha } => {
                ensure!((0.0..1.0).contains(&alpha), Config, "leaky_relu alpha {alpha} not in [0, 1)")
            }
            ActivationKind::Elu { alpha } => {
                ensure!(alpha > 0.0 && alpha.is_finite(), Config, "elu alpha {alpha} must be > 0")
            }
            ActivationKind::Dropout { p } => {
                ensure!(p > 0.0 && p < 1.0, Config, "dropout p {p} not in (0, 1)")
            }
            _ => {}
        }
        Ok(())
    }

    /// True for the kinds whose input-output map is piecewise linear.
    pub fn is_piecewise_linear(&self) -> bool {
        matches!(
            self,
            ActivationKind::Relu | ActivationKind::LeakyRelu { .. } | ActivationKind::Identity
        )
    }

    pub fn name(&self) -> String {
        match *self {
            ActivationKind::Relu => "relu".into(),
            ActivationKind::LeakyRelu { alpha } => format!("leaky_relu({alpha})"),
            ActivationKind::Elu { alpha } => format!("elu({alpha})"),
            ActivationKind::Swish => "swish".into(),
            ActivationKind::Gelu => "gelu".into(),
            ActivationKind::Dropout { p } => format!("dropout({p})"),
            ActivationKind::Identity => "identity".into(),
        }
    }

    /// Deterministic part of the map. Dropout is the identity here.
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            ActivationKind::Elu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
            ActivationKind::Swish => x * sigmoid(x),
            ActivationKind::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            ActivationKind::Dropout { .. } | ActivationKind::Identity => x,
        }
    }

    /// Derivative of [`apply`](Self::apply). ReLU-type kinks take the left
    /// derivative, so `relu'(0) = 0`.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { alpha } => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            ActivationKind::Elu { alpha } => {
                if x > 0.0 {
                    1.0
                } else {
                    alpha * x.exp()
                }
            }
            ActivationKind::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            ActivationKind::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            ActivationKind::Dropout { .. } | ActivationKind::Identity => 1.0,
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
