use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use super::tape::Gradients;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimConfig {
    pub fn adam(clip_norm: Option<f64>) -> Self {
        Self {
            clip_norm,
            ..Self::default()
        }
    }
}

/// Diagnostics returned by one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Optimizer state: per-parameter moment buffers and step counters.
///
/// Parameters absent from a gradient map are skipped entirely, so supernet
/// matrices not addressed by a child keep both their values and their moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    param_steps: Vec<u64>,
}

impl Optimizer {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, _, v)| Matrix::zeros(v.rows(), v.cols()))
            .collect();
        Self {
            config,
            step: 0,
            second: zeros.clone(),
            first: zeros,
            param_steps: vec![0; store.len()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clips `grads` to the configured global norm, then applies one update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<StepStats> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        if self.first.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
            if g.shape() != store.value(id).shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` is {:?}, parameter is {:?}",
                    store.name(id),
                    g.shape(),
                    store.value(id).shape()
                )));
            }
        }
        let grad_norm = grads.global_norm();
        let clip_scale = match self.config.clip_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        for (id, g) in grads.iter() {
            self.update_one(store, id, g, clip_scale, lr);
        }
        Ok(StepStats {
            grad_norm,
            clip_scale,
        })
    }

    fn update_one(&mut self, store: &mut ParamStore, id: ParamId, g: &Matrix, clip: f64, lr: f64) {
        let i = id.index();
        let param = store.value_mut(id);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, gv) in param.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * clip * gv;
                }
            }
            OptimizerKind::Adam => {
                self.param_steps[i] += 1;
                let t = self.param_steps[i] as i32;
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let m = self.first[i].data_mut();
                let v = self.second[i].data_mut();
                for (((p, gv), mv), vv) in param
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    let gc = gv * clip;
                    *mv = b1 * *mv + (1.0 - b1) * gc;
                    *vv = b2 * *vv + (1.0 - b2) * gc * gc;
                    let mhat = *mv / c1;
                    let vhat = *vv / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }

    /// Moment buffers as stores named after `params`, for checkpointing.
    pub fn export(&self, params: &ParamStore) -> Result<(ParamStore, ParamStore, OptimCounters)> {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (id, name, _) in params.iter() {
            m.insert(name, self.first[id.index()].clone())?;
            v.insert(name, self.second[id.index()].clone())?;
        }
        Ok((
            m,
            v,
            OptimCounters {
                step: self.step,
                param_steps: self.param_steps.clone(),
            },
        ))
    }

    pub fn import(
        config: OptimConfig,
        params: &ParamStore,
        first: &ParamStore,
        second: &ParamStore,
        counters: &OptimCounters,
    ) -> Result<Self> {
        let mut opt = Self::new(config, params);
        if counters.param_steps.len() != params.len() {
            return Err(Error::Shape("optimizer counter count mismatch".into()));
        }
        for (id, name, value) in params.iter() {
            for (src, dst) in [(first, &mut opt.first), (second, &mut opt.second)] {
                let m = src
                    .get(name)
                    .ok_or_else(|| Error::MissingParam(format!("optimizer moment `{name}`")))?;
                if m.shape() != value.shape() {
                    return Err(Error::Shape(format!("optimizer moment `{name}` shape")));
                }
                dst[id.index()] = m.clone();
            }
        }
        opt.step = counters.step;
        opt.param_steps = counters.param_steps.clone();
        Ok(opt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimCounters {
    pub step: u64,
    pub param_steps: Vec<u64>,
}
