//! The eight candidate node activations and their derivatives.
//!
//! At kinks (`relu`, `leaky_relu`, `elu`, `celu` at zero) the derivative is
//! the right-derivative.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::numkernel::Matrix;

const LEAKY_SLOPE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
    Elu,
    Celu { alpha: f64 },
    Gelu,
    LeakyRelu,
    Silu,
}

impl ActivationKind {
    pub const COUNT: usize = 8;

    /// All kinds in encoding order, with `celu` at α = 1.
    pub const ALL: [ActivationKind; 8] = [
        ActivationKind::Relu,
        ActivationKind::Tanh,
        ActivationKind::Sigmoid,
        ActivationKind::Elu,
        ActivationKind::Celu { alpha: 1.0 },
        ActivationKind::Gelu,
        ActivationKind::LeakyRelu,
        ActivationKind::Silu,
    ];

    /// Stable integer code, `0..8`.
    pub fn index(self) -> usize {
        match self {
            ActivationKind::Relu => 0,
            ActivationKind::Tanh => 1,
            ActivationKind::Sigmoid => 2,
            ActivationKind::Elu => 3,
            ActivationKind::Celu { .. } => 4,
            ActivationKind::Gelu => 5,
            ActivationKind::LeakyRelu => 6,
            ActivationKind::Silu => 7,
        }
    }

    /// Inverse of [`index`](Self::index); `celu` takes the supplied α.
    pub fn from_index(index: usize, celu_alpha: f64) -> Option<Self> {
        match index {
            4 => Some(ActivationKind::Celu { alpha: celu_alpha }),
            i if i < Self::COUNT => Some(Self::ALL[i]),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Elu => "elu",
            ActivationKind::Celu { .. } => "celu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Silu => "silu",
        }
    }

    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            ActivationKind::Celu { alpha } => {
                x.max(0.0) + (alpha * (x / alpha).exp_m1()).min(0.0)
            }
            ActivationKind::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            ActivationKind::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            ActivationKind::Silu => x * sigmoid(x),
        }
    }

    pub fn derivative_scalar(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            ActivationKind::Celu { alpha } => {
                if x >= 0.0 {
                    1.0
                } else {
                    (x / alpha).exp()
                }
            }
            ActivationKind::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            ActivationKind::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            ActivationKind::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }

    pub fn apply(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply_scalar(v))
    }

    pub fn derivative(self, x: &Matrix) -> Matrix {
        x.map(|v| self.derivative_scalar(v))
    }
}

/// Logistic function evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
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
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown activation `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::SeededRng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn encoding_is_stable() {
        let names: Vec<_> = ActivationKind::ALL.iter().map(|k| k.name()).collect();
        assert_eq!(
            names,
            ["relu", "tanh", "sigmoid", "elu", "celu", "gelu", "leaky_relu", "silu"]
        );
        for (i, k) in ActivationKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(ActivationKind::from_index(i, 1.0), Some(*k));
            assert_eq!(k.name().parse::<ActivationKind>().unwrap(), *k);
        }
        assert!("relu6".parse::<ActivationKind>().is_err());
        assert_eq!(ActivationKind::from_index(8, 1.0), None);
    }

    #[test]
    fn reference_values() {
        use ActivationKind::*;
        assert_eq!(LeakyRelu.apply_scalar(-1.0), -0.01);
        assert_eq!(Sigmoid.apply_scalar(0.0), 0.5);
        assert_eq!(Tanh.apply_scalar(0.0), 0.0);
        assert_eq!(Gelu.apply_scalar(0.0), 0.0);
        assert_eq!(Silu.apply_scalar(0.0), 0.0);
        // e^-1 - 1 and e^-2 - 1 to 17 significant digits.
        assert!(close(Elu.apply_scalar(-1.0), -0.632_120_558_828_557_7, 1e-15));
        assert!(close(
            (Celu { alpha: 1.0 }).apply_scalar(-2.0),
            -0.864_664_716_763_387_3,
            1e-15
        ));
        // x·Φ(x) at ±1, Φ(1) = 0.841344746068542948...
        assert!(close(Gelu.apply_scalar(1.0), 0.841_344_746_068_542_9, 1e-14));
        assert!(close(Gelu.apply_scalar(-1.0), -0.158_655_253_931_457_05, 1e-14));
    }

    #[test]
    fn kink_conventions() {
        use ActivationKind::*;
        assert_eq!(Tanh.derivative_scalar(0.0), 1.0);
        assert_eq!(Relu.derivative_scalar(0.0), 1.0);
        assert_eq!(LeakyRelu.derivative_scalar(0.0), 1.0);
        assert_eq!(Elu.derivative_scalar(0.0), 1.0);
        assert_eq!((Celu { alpha: 2.0 }).derivative_scalar(0.0), 1.0);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = SeededRng::new(17);
        let h = 1e-5;
        for kind in ActivationKind::ALL.iter().copied().chain([ActivationKind::Celu { alpha: 0.7 }]) {
            for _ in 0..200 {
                let mut x = rng.uniform_range(-6.0, 6.0);
                if x.abs() < 1e-3 {
                    x += 0.01;
                }
                let fd = (kind.apply_scalar(x + h) - kind.apply_scalar(x - h)) / (2.0 * h);
                let an = kind.derivative_scalar(x);
                let err = (fd - an).abs() / an.abs().max(1e-3);
                assert!(err < 1e-6, "{kind} at {x}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn identities() {
        for i in -200..=200 {
            let x = f64::from(i) / 20.0;
            if x >= 0.0 {
                assert_eq!(ActivationKind::Relu.apply_scalar(x), ActivationKind::LeakyRelu.apply_scalar(x));
            }
            assert!(close(
                ActivationKind::Elu.apply_scalar(x),
                (ActivationKind::Celu { alpha: 1.0 }).apply_scalar(x),
                1e-15
            ));
            assert!(close(ActivationKind::Silu.apply_scalar(x), x * sigmoid(x), 1e-15));
        }
    }

    #[test]
    fn monotone_on_grid() {
        let grid: Vec<f64> = (-500..=500).map(|i| f64::from(i) / 10.0).collect();
        for kind in [ActivationKind::Sigmoid, ActivationKind::Tanh] {
            for w in grid.windows(2) {
                assert!(kind.apply_scalar(w[0]) <= kind.apply_scalar(w[1]));
            }
        }
        for w in grid.windows(2).filter(|w| w[0] >= 0.0) {
            assert!(ActivationKind::Silu.apply_scalar(w[0]) <= ActivationKind::Silu.apply_scalar(w[1]));
        }
    }

    #[test]
    fn finite_within_saturation_range() {
        for kind in ActivationKind::ALL {
            for i in -500..=500 {
                let x = f64::from(i) / 10.0;
                assert!(kind.apply_scalar(x).is_finite());
                assert!(kind.derivative_scalar(x).is_finite());
            }
        }
    }
}
