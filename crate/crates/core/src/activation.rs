use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Elementwise activation φ together with its derivative φ′.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Relu,
        ActivationKind::Tanh,
        ActivationKind::Sigmoid,
        ActivationKind::Linear,
    ];

    #[inline]
    pub fn apply(self, u: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if u > 0.0 {
                    u
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => u.tanh(),
            ActivationKind::Sigmoid => sigmoid(u),
            ActivationKind::Linear => u,
        }
    }

    /// φ′(u). The ReLU derivative at exactly zero is 0.
    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = u.tanh();
                1.0 - t * t
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(u);
                s * (1.0 - s)
            }
            ActivationKind::Linear => 1.0,
        }
    }

    /// Whether φ is continuously differentiable everywhere.
    pub fn is_smooth(self) -> bool {
        !matches!(self, ActivationKind::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Linear => "linear",
        }
    }
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "tanh" => Ok(ActivationKind::Tanh),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "linear" | "identity" => Ok(ActivationKind::Linear),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, Domain};

    #[test]
    fn derivative_matches_central_difference() {
        let points = normal_vec(3, Domain::Probe, 0, 0, 100);
        let h = 1e-6;
        for act in ActivationKind::ALL {
            for &p in &points {
                let u = 3.0 * p;
                if act == ActivationKind::Relu && u.abs() < 1e-3 {
                    continue;
                }
                let fd = (act.apply(u + h) - act.apply(u - h)) / (2.0 * h);
                assert!(
                    (fd - act.derivative(u)).abs() < 1e-6,
                    "{act} at {u}: fd {fd} vs {}",
                    act.derivative(u)
                );
            }
        }
    }

    #[test]
    fn relu_kink_convention() {
        assert_eq!(ActivationKind::Relu.derivative(0.0), 0.0);
        assert_eq!(ActivationKind::Relu.apply(-0.0), 0.0);
    }

    #[test]
    fn parse_round_trip() {
        for act in ActivationKind::ALL {
            assert_eq!(act.name().parse::<ActivationKind>().unwrap(), act);
        }
        assert!("softplus".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn sigmoid_is_stable_in_tails() {
        let s = ActivationKind::Sigmoid;
        assert_eq!(s.apply(-800.0), 0.0);
        assert_eq!(s.apply(800.0), 1.0);
        assert!(s.derivative(-800.0).is_finite());
    }
}
