use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inverse-square-root schedule with linear warmup:
/// `model_dim^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, model_dim: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidArgument("noam schedule steps start at 1".into()));
    }
    if warmup == 0 || model_dim == 0 {
        return Err(Error::InvalidArgument(
            "noam schedule needs positive warmup and model_dim".into(),
        ));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    Noam { model_dim: usize, warmup: u64, factor: f64 },
}

impl LrSchedule {
    /// Learning rate for a 1-based step.
    pub fn lr(&self, step: u64) -> Result<f64> {
        match *self {
            LrSchedule::Constant { lr } => Ok(lr),
            LrSchedule::Noam {
                model_dim,
                warmup,
                factor,
            } => Ok(factor * noam_lr(step, model_dim, warmup)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_warmup() {
        let lr = noam_lr(4000, 512, 4000).unwrap();
        let expected = 512f64.powf(-0.5) * 4000f64.powf(-0.5);
        assert!((lr - expected).abs() < 1e-15);
    }

    #[test]
    fn warmup_branch_value() {
        let lr = noam_lr(100, 512, 10_000).unwrap();
        assert!((lr / 4.419_417_382_415_922e-6 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        let w = 10_000;
        let peak = noam_lr(w, 512, w).unwrap();
        assert!(noam_lr(w - 1, 512, w).unwrap() < peak);
        assert!(noam_lr(4 * w, 512, w).unwrap() < peak);
    }

    #[test]
    fn step_zero_is_an_error() {
        assert!(noam_lr(0, 512, 10).is_err());
    }
}
