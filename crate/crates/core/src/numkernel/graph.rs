//! The operation vocabulary shared by the recording [`Tape`](super::Tape) and
//! the gradient-free [`Eager`] evaluator, so every model is written once and
//! runs identically in training and in decoding.

use std::collections::HashMap;
use std::rc::Rc;

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use crate::activations::ActivationKind;

pub trait Graph {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Matrix;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Var;
    fn constant(&mut self, m: Matrix) -> Self::Var;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    /// `a · bᵀ`.
    fn matmul_nt(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    /// Hadamard product.
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    /// Adds a `1 x n` row to every row of `a`.
    fn add_row(&mut self, a: &Self::Var, row: &Self::Var) -> Self::Var;
    fn scale(&mut self, a: &Self::Var, s: f64) -> Self::Var;
    fn activation(&mut self, kind: ActivationKind, a: &Self::Var) -> Self::Var;
    /// Row `ids[i]` of `table` becomes row `i` of the result.
    fn gather_rows(&mut self, table: &Self::Var, ids: &[usize]) -> Self::Var;
    fn add_n(&mut self, xs: &[Self::Var]) -> Self::Var;
    fn concat_cols(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn sum(&mut self, a: &Self::Var) -> Self::Var;
    fn mean(&mut self, a: &Self::Var) -> Self::Var;

    /// Fused, label-smoothed softmax cross-entropy:
    /// `Σ_r weights[r] · CE_r / normalizer`, where row `r` of `logits` is scored
    /// against `targets[r]` with `(1-ε)` on the target and `ε/(V-1)` elsewhere.
    fn softmax_xent(
        &mut self,
        logits: &Self::Var,
        targets: &[usize],
        weights: &[f64],
        smoothing: f64,
        normalizer: f64,
    ) -> Self::Var;

    /// Sum over rows of the softmax entropy of each row.
    fn entropy(&mut self, logits: &Self::Var) -> Self::Var;

    fn mean_n(&mut self, xs: &[Self::Var]) -> Self::Var {
        let total = self.add_n(xs);
        if xs.len() == 1 {
            total
        } else {
            self.scale(&total, 1.0 / xs.len() as f64)
        }
    }
}

pub(crate) fn add_row_value(a: &Matrix, row: &Matrix) -> Matrix {
    assert_eq!(row.rows(), 1, "add_row expects a 1 x n row");
    assert_eq!(a.cols(), row.cols(), "add_row width mismatch");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    out
}

pub(crate) fn gather_value(table: &Matrix, ids: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(ids.len(), table.cols());
    for (i, &id) in ids.iter().enumerate() {
        assert!(id < table.rows(), "gather index {id} out of {} rows", table.rows());
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    out
}

pub(crate) fn concat_value(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows(), "concat_cols row mismatch");
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

pub(crate) fn add_n_value(xs: &[&Matrix]) -> Matrix {
    assert!(!xs.is_empty(), "add_n of nothing");
    let mut out = xs[0].clone();
    for x in &xs[1..] {
        out.add_assign(x);
    }
    out
}

/// Smoothed target distribution value for one vocabulary entry.
#[inline]
pub(crate) fn smoothed_target(k: usize, target: usize, vocab: usize, smoothing: f64) -> f64 {
    if vocab <= 1 {
        return 1.0;
    }
    if k == target {
        1.0 - smoothing
    } else {
        smoothing / (vocab - 1) as f64
    }
}

pub(crate) fn xent_value(
    logits: &Matrix,
    targets: &[usize],
    weights: &[f64],
    smoothing: f64,
    normalizer: f64,
) -> f64 {
    assert_eq!(logits.rows(), targets.len(), "one target per logits row");
    assert_eq!(targets.len(), weights.len(), "one weight per target");
    assert!(normalizer > 0.0, "cross-entropy normalizer must be positive");
    let logp = logits.log_softmax_rows();
    let vocab = logits.cols();
    let mut total = 0.0;
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        assert!(t < vocab, "target {t} out of vocabulary {vocab}");
        let row = logp.row(r);
        let ce: f64 = if smoothing == 0.0 {
            -row[t]
        } else {
            -row
                .iter()
                .enumerate()
                .map(|(k, lp)| smoothed_target(k, t, vocab, smoothing) * lp)
                .sum::<f64>()
        };
        total += w * ce;
    }
    total / normalizer
}

pub(crate) fn entropy_value(logits: &Matrix) -> f64 {
    let logp = logits.log_softmax_rows();
    logp.data().iter().map(|lp| -lp.exp() * lp).sum()
}

/// Gradient-free evaluator: every op computes its value immediately.
#[derive(Default)]
pub struct Eager {
    cache: HashMap<(usize, ParamId), Rc<Matrix>>,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Graph for Eager {
    type Var = Rc<Matrix>;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Matrix {
        v
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Var {
        let key = (store as *const ParamStore as usize, id);
        self.cache
            .entry(key)
            .or_insert_with(|| Rc::new(store.value(id).clone()))
            .clone()
    }

    fn constant(&mut self, m: Matrix) -> Self::Var {
        Rc::new(m)
    }

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Rc::new(a.matmul(b))
    }

    fn matmul_nt(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Rc::new(a.matmul_nt(b))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Rc::new(a.zip_map(b, |x, y| x + y))
    }

    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Rc::new(a.zip_map(b, |x, y| x - y))
    }

    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Rc::new(a.zip_map(b, |x, y| x * y))
    }

    fn add_row(&mut self, a: &Self::Var, row: &Self::Var) -> Self::Var {
        Rc::new(add_row_value(a, row))
    }

    fn scale(&mut self, a: &Self::Var, s: f64) -> Self::Var {
        Rc::new(a.scaled(s))
    }

    fn activation(&mut self, kind: ActivationKind, a: &Self::Var) -> Self::Var {
        Rc::new(kind.apply(a))
    }

    fn gather_rows(&mut self, table: &Self::Var, ids: &[usize]) -> Self::Var {
        Rc::new(gather_value(table, ids))
    }

    fn add_n(&mut self, xs: &[Self::Var]) -> Self::Var {
        if xs.len() == 1 {
            return xs[0].clone();
        }
        let refs: Vec<&Matrix> = xs.iter().map(|x| x.as_ref()).collect();
        Rc::new(add_n_value(&refs))
    }

    fn concat_cols(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var {
        Rc::new(concat_value(a, b))
    }

    fn sum(&mut self, a: &Self::Var) -> Self::Var {
        Rc::new(Matrix::scalar(a.sum()))
    }

    fn mean(&mut self, a: &Self::Var) -> Self::Var {
        Rc::new(Matrix::scalar(a.sum() / a.len() as f64))
    }

    fn softmax_xent(
        &mut self,
        logits: &Self::Var,
        targets: &[usize],
        weights: &[f64],
        smoothing: f64,
        normalizer: f64,
    ) -> Self::Var {
        Rc::new(Matrix::scalar(xent_value(
            logits, targets, weights, smoothing, normalizer,
        )))
    }

    fn entropy(&mut self, logits: &Self::Var) -> Self::Var {
        Rc::new(Matrix::scalar(entropy_value(logits)))
    }
}
