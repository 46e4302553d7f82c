//! Reverse-mode differentiation over a linear tape of matrix primitives.

use std::collections::{BTreeMap, HashMap};

use super::graph::{
    add_n_value, add_row_value, concat_value, entropy_value, gather_value, smoothed_target,
    xent_value, Graph,
};
use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use crate::activations::ActivationKind;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Activation(usize, ActivationKind),
    Gather(usize, Vec<usize>),
    AddN(Vec<usize>),
    ConcatCols(usize, usize),
    Sum(usize),
    Mean(usize),
    SoftmaxXent {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        smoothing: f64,
        normalizer: f64,
    },
    Entropy(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Activation(a, _)
            | Op::Gather(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Entropy(a) => vec![*a],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::AddN(xs) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Records every primitive in execution order. Nodes can only reference
/// earlier nodes, so the recording is always topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    store: Option<usize>,
}

/// Parameter gradients produced by [`Tape::backward`], ordered by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    /// Gradient for `id`, or zeros shaped like the parameter when it was
    /// unreachable from the loss.
    pub fn get_or_zeros(&self, store: &ParamStore, id: ParamId) -> Matrix {
        self.grads.get(&id).cloned().unwrap_or_else(|| {
            let v = store.value(id);
            Matrix::zeros(v.rows(), v.cols())
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Matrix)> {
        self.grads.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(Matrix::frobenius_norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale_assign(s);
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (id, g) in &other.grads {
            let scaled = g.scaled(s);
            match self.grads.get_mut(id) {
                Some(acc) => acc.add_assign(&scaled),
                None => {
                    self.grads.insert(*id, scaled);
                }
            }
        }
    }

    fn accumulate(&mut self, id: ParamId, g: Matrix) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(id, g);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: usize) -> &Matrix {
        &self.nodes[v].value
    }

    /// Accumulates `∂loss/∂θ` for every parameter reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.val(loss.0);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Matrix::scalar(1.0));
        let mut grads = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.op.inputs().iter().any(|&j| j >= i) {
                return Err(Error::Cycle(i));
            }
            let mut send = |j: usize, d: Matrix| match &mut adj[j] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    send(*a, g.matmul_nt(self.val(*b)));
                    send(*b, self.val(*a).matmul_tn(&g));
                }
                Op::MatMulNt(a, b) => {
                    send(*a, g.matmul(self.val(*b)));
                    send(*b, g.matmul_tn(self.val(*a)));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.scaled(-1.0));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(self.val(*b), |x, y| x * y));
                    send(*b, g.zip_map(self.val(*a), |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    send(*row, dr);
                    send(*a, g);
                }
                Op::Scale(a, s) => send(*a, g.scaled(*s)),
                Op::Activation(a, kind) => {
                    let d = kind.derivative(self.val(*a));
                    send(*a, g.zip_map(&d, |x, y| x * y));
                }
                Op::Gather(table, ids) => {
                    let t = self.val(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    send(*table, dt);
                }
                Op::AddN(xs) => {
                    for &x in xs {
                        send(x, g.clone());
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.val(*a).cols();
                    let mut da = Matrix::zeros(g.rows(), ac);
                    let mut db = Matrix::zeros(g.rows(), g.cols() - ac);
                    for r in 0..g.rows() {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Sum(a) => {
                    let v = self.val(*a);
                    send(*a, Matrix::filled(v.rows(), v.cols(), g.item()));
                }
                Op::Mean(a) => {
                    let v = self.val(*a);
                    send(*a, Matrix::filled(v.rows(), v.cols(), g.item() / v.len() as f64));
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    weights,
                    smoothing,
                    normalizer,
                } => {
                    let probs = self.val(*logits).softmax_rows();
                    let vocab = probs.cols();
                    let mut d = Matrix::zeros(probs.rows(), vocab);
                    let up = g.item() / normalizer;
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = up * w;
                        let prow = probs.row(r);
                        for (k, dv) in d.row_mut(r).iter_mut().enumerate() {
                            let q = if *smoothing == 0.0 {
                                if k == t {
                                    1.0
                                } else {
                                    0.0
                                }
                            } else {
                                smoothed_target(k, t, vocab, *smoothing)
                            };
                            *dv = scale * (prow[k] - q);
                        }
                    }
                    send(*logits, d);
                }
                Op::Entropy(a) => {
                    let logp = self.val(*a).log_softmax_rows();
                    let mut d = Matrix::zeros(logp.rows(), logp.cols());
                    for r in 0..logp.rows() {
                        let row = logp.row(r);
                        let h: f64 = row.iter().map(|lp| -lp.exp() * lp).sum();
                        for (dv, lp) in d.row_mut(r).iter_mut().zip(row) {
                            *dv = -g.item() * lp.exp() * (lp + h);
                        }
                    }
                    send(*a, d);
                }
            }
        }
        Ok(grads)
    }
}

impl Graph for Tape {
    type Var = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Matrix {
        self.val(v.0)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = store as *const ParamStore as usize;
        match self.store {
            None => self.store = Some(key),
            Some(k) => assert_eq!(k, key, "a tape records parameters from a single store"),
        }
        if let Some(&n) = self.params.get(&id) {
            return Var(n);
        }
        let v = self.push(Op::Param(id), store.value(id).clone());
        self.params.insert(id, v.0);
        v
    }

    fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Constant, m)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(a.0).matmul(self.val(b.0));
        self.push(Op::MatMul(a.0, b.0), v)
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(a.0).matmul_nt(self.val(b.0));
        self.push(Op::MatMulNt(a.0, b.0), v)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(a.0).zip_map(self.val(b.0), |x, y| x + y);
        self.push(Op::Add(a.0, b.0), v)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(a.0).zip_map(self.val(b.0), |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), v)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(a.0).zip_map(self.val(b.0), |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), v)
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Var {
        let v = add_row_value(self.val(a.0), self.val(row.0));
        self.push(Op::AddRow(a.0, row.0), v)
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let v = self.val(a.0).scaled(s);
        self.push(Op::Scale(a.0, s), v)
    }

    fn activation(&mut self, kind: ActivationKind, a: &Var) -> Var {
        let v = kind.apply(self.val(a.0));
        self.push(Op::Activation(a.0, kind), v)
    }

    fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> Var {
        let v = gather_value(self.val(table.0), ids);
        self.push(Op::Gather(table.0, ids.to_vec()), v)
    }

    fn add_n(&mut self, xs: &[Var]) -> Var {
        if xs.len() == 1 {
            return xs[0];
        }
        let refs: Vec<&Matrix> = xs.iter().map(|x| self.val(x.0)).collect();
        let v = add_n_value(&refs);
        self.push(Op::AddN(xs.iter().map(|x| x.0).collect()), v)
    }

    fn concat_cols(&mut self, a: &Var, b: &Var) -> Var {
        let v = concat_value(self.val(a.0), self.val(b.0));
        self.push(Op::ConcatCols(a.0, b.0), v)
    }

    fn sum(&mut self, a: &Var) -> Var {
        let v = Matrix::scalar(self.val(a.0).sum());
        self.push(Op::Sum(a.0), v)
    }

    fn mean(&mut self, a: &Var) -> Var {
        let m = self.val(a.0);
        let v = Matrix::scalar(m.sum() / m.len() as f64);
        self.push(Op::Mean(a.0), v)
    }

    fn softmax_xent(
        &mut self,
        logits: &Var,
        targets: &[usize],
        weights: &[f64],
        smoothing: f64,
        normalizer: f64,
    ) -> Var {
        let v = xent_value(self.val(logits.0), targets, weights, smoothing, normalizer);
        self.push(
            Op::SoftmaxXent {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing,
                normalizer,
            },
            Matrix::scalar(v),
        )
    }

    fn entropy(&mut self, logits: &Var) -> Var {
        let v = entropy_value(self.val(logits.0));
        self.push(Op::Entropy(logits.0), Matrix::scalar(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Matrix::row_vector(vec![1.0, 2.0, 3.0])).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let loss = tape.sum(&xv);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::zeros(2, 1));
        assert!(matches!(
            tape.backward(c),
            Err(Error::NonScalarLoss { rows: 2, cols: 1 })
        ));
    }

    #[test]
    fn unreachable_params_have_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Matrix::filled(2, 2, 1.0)).unwrap();
        let b = store.insert("b", Matrix::filled(2, 2, 1.0)).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let _bv = tape.param(&store, b);
        let loss = tape.sum(&av);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get_or_zeros(&store, b), Matrix::zeros(2, 2));
    }

    #[test]
    fn reused_param_accumulates() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Matrix::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, a);
        let y = tape.param(&store, a);
        let p = tape.mul(&x, &y);
        let loss = tape.sum(&p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 6.0);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_vocab() {
        for smoothing in [0.0, 0.1] {
            let mut tape = Tape::new();
            let logits = tape.constant(Matrix::zeros(3, 7));
            let loss = tape.softmax_xent(&logits, &[0, 3, 6], &[1.0; 3], smoothing, 3.0);
            assert!((tape.value(&loss).item() - 7f64.ln()).abs() < 1e-12);
        }
    }
}
