//! The shared weight bank and the captioning network that runs one genotype
//! against it.
//!
//! The bank holds every candidate connection matrix for up to `n_max` nodes.
//! A [`CaptionNet`] binds the subset addressed by its genotype, so the same
//! code runs a child inside the supernet and a standalone model built from
//! [`CaptionNet::extract`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::datapipe::Batch;
use crate::error::{Error, Result};
use crate::evalgen::{Captioner, StepModel};
use crate::genotype::{CellGenotype, MacroConfig, NodeSemantics};
use crate::numkernel::checkpoint::{load_store, save_store};
use crate::numkernel::{Eager, Graph, Matrix, ParamStore, SeededRng, Tape, Var};

pub const W_X: &str = "cell.w_x";
pub const EMBED: &str = "embed";
pub const PROJ: &str = "proj";
pub const PROJ_ADAPTER: &str = "proj_adapter";
pub const FEAT_PROJ: &str = "feat_proj";

/// `cell.w_h.<i>.<j>`; node 1's recurrent matrix is `cell.w_h.1.0`.
pub fn conn_name(i: usize, j: usize) -> String {
    format!("cell.w_h.{i}.{j}")
}

pub fn gate_name(base: &str) -> String {
    format!("{base}.gate")
}

/// Shapes of everything in a bank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankLayout {
    pub n_max: usize,
    pub embed: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub feature_dim: usize,
    pub tie_embeddings: bool,
    pub semantics: NodeSemantics,
}

impl BankLayout {
    pub fn new(m: &MacroConfig, semantics: NodeSemantics, vocab: usize, feature_dim: usize) -> Self {
        Self {
            n_max: m.n_blocks,
            embed: m.embed_size,
            hidden: m.hidden_size,
            vocab,
            feature_dim,
            tie_embeddings: m.tie_embeddings,
            semantics,
        }
    }

    fn gated(&self) -> bool {
        self.semantics == NodeSemantics::Gated
    }

    fn with_gate(&self, name: String, rows: usize, cols: usize, out: &mut Vec<(String, usize, usize)>) {
        if self.gated() {
            out.push((name.clone(), rows, cols));
            out.push((gate_name(&name), rows, cols));
        } else {
            out.push((name, rows, cols));
        }
    }

    /// Cell matrices addressed by `genotype`, in registration order.
    pub fn cell_entries(&self, genotype: &CellGenotype) -> Vec<(String, usize, usize)> {
        let (e, h) = (self.embed, self.hidden);
        let mut out = Vec::new();
        self.with_gate(W_X.into(), e, h, &mut out);
        self.with_gate(conn_name(1, 0), h, h, &mut out);
        for i in 2..=genotype.n_blocks() {
            let j = genotype.node(i).prev.expect("validated genotype");
            self.with_gate(conn_name(i, j), h, h, &mut out);
        }
        out
    }

    /// Embedding, output and feature matrices.
    pub fn io_entries(&self) -> Vec<(String, usize, usize)> {
        let mut out = vec![(EMBED.to_string(), self.vocab, self.embed)];
        if !self.tie_embeddings {
            out.push((PROJ.into(), self.hidden, self.vocab));
        } else if self.hidden != self.embed {
            out.push((PROJ_ADAPTER.into(), self.hidden, self.embed));
        }
        out.push((FEAT_PROJ.into(), self.feature_dim, self.embed));
        out
    }

    /// Every bank matrix: all `n_max (n_max - 1) / 2` connections plus node 1
    /// and the I/O matrices.
    pub fn all_entries(&self) -> Vec<(String, usize, usize)> {
        let (e, h) = (self.embed, self.hidden);
        let mut out = Vec::new();
        self.with_gate(W_X.into(), e, h, &mut out);
        self.with_gate(conn_name(1, 0), h, h, &mut out);
        for i in 2..=self.n_max {
            for j in 1..i {
                self.with_gate(conn_name(i, j), h, h, &mut out);
            }
        }
        out.extend(self.io_entries());
        out
    }

    fn init(&self, entries: &[(String, usize, usize)], rng: &mut SeededRng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, r, c) in entries {
            store.insert_uniform(name.clone(), *r, *c, rng)?;
        }
        Ok(store)
    }
}

/// The supernet weights ω together with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedParamBank {
    pub layout: BankLayout,
    pub store: ParamStore,
}

impl SharedParamBank {
    /// Allocates every matrix uniformly in `[-0.04, 0.04]`.
    pub fn init(layout: BankLayout, rng: &mut SeededRng) -> Result<Self> {
        if layout.n_max == 0 {
            return Err(Error::InvalidArgument("n_max must be at least 1".into()));
        }
        let store = layout.init(&layout.all_entries(), rng)?;
        Ok(Self { layout, store })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        save_store(&self.store, dir, stem)
    }

    pub fn load(layout: BankLayout, dir: &Path, stem: &str) -> Result<Self> {
        let store = load_store(dir, stem)?;
        for (name, r, c) in layout.all_entries() {
            let m = store.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if m.shape() != (r, c) {
                return Err(Error::Shape(format!("{name}: expected {r}x{c}, found {:?}", m.shape())));
            }
        }
        Ok(Self { layout, store })
    }

    pub fn child(&self, genotype: CellGenotype) -> Result<CaptionNet> {
        if genotype.n_blocks() > self.layout.n_max {
            return Err(Error::InvalidArgument(format!(
                "genotype has {} nodes but the bank holds {}",
                genotype.n_blocks(),
                self.layout.n_max
            )));
        }
        Ok(CaptionNet {
            layout: self.layout.clone(),
            genotype,
        })
    }
}

/// Bank signature: `(embed, hidden, tie_embeddings)`.
pub type BankKey = (usize, usize, bool);

impl BankLayout {
    pub fn key(&self) -> BankKey {
        (self.embed, self.hidden, self.tie_embeddings)
    }
}

/// One bank per signature, created on first use. Tying changes which output
/// matrices exist, so it is part of the signature.
#[derive(Clone, Debug, Default)]
pub struct BankSet {
    pub banks: BTreeMap<BankKey, SharedParamBank>,
}

impl BankSet {
    pub fn get_or_init(&mut self, layout: &BankLayout, rng: &mut SeededRng) -> Result<&mut SharedParamBank> {
        let key = layout.key();
        if !self.banks.contains_key(&key) {
            self.banks.insert(key, SharedParamBank::init(layout.clone(), rng)?);
        }
        Ok(self.banks.get_mut(&key).expect("inserted above"))
    }

    pub fn stem(key: BankKey) -> String {
        let tied = if key.2 { "_tied" } else { "" };
        format!("bank_e{}_h{}{tied}", key.0, key.1)
    }
}

/// Bound cell and I/O parameters for one genotype.
pub struct NetParams<V> {
    w_x: V,
    w_h1: V,
    conns: Vec<Option<V>>,
    gates: Option<(V, V, Vec<Option<V>>)>,
    embed: V,
    proj: Option<V>,
    adapter: Option<V>,
    feat_proj: V,
}

/// A captioning network driven by one cell genotype. Parameters live in a
/// separate store: the bank for a supernet child, or an extracted copy.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionNet {
    pub layout: BankLayout,
    pub genotype: CellGenotype,
}

/// Teacher-forced forward pass.
pub struct ForwardOutput<V> {
    pub loss: V,
    /// Logits per predicted position `t = 1..L`.
    pub logits: Vec<V>,
    pub final_h: V,
}

impl CaptionNet {
    pub fn new(layout: BankLayout, genotype: CellGenotype) -> Result<Self> {
        if genotype.n_blocks() > layout.n_max {
            return Err(Error::InvalidArgument(format!(
                "genotype has {} nodes, layout allows {}",
                genotype.n_blocks(),
                layout.n_max
            )));
        }
        Ok(Self { layout, genotype })
    }

    /// Names of exactly the matrices this network reads.
    pub fn touched_names(&self) -> Vec<String> {
        self.layout
            .cell_entries(&self.genotype)
            .into_iter()
            .chain(self.layout.io_entries())
            .map(|(n, _, _)| n)
            .collect()
    }

    /// Copies the touched matrices out of `bank`.
    pub fn extract(&self, bank: &ParamStore) -> Result<ParamStore> {
        let names = self.touched_names();
        bank.subset(names.iter().map(String::as_str))
    }

    /// Scalar count of the touched matrices.
    pub fn param_count(&self) -> usize {
        self.layout
            .cell_entries(&self.genotype)
            .into_iter()
            .chain(self.layout.io_entries())
            .map(|(_, r, c)| r * c)
            .sum()
    }

    /// Fresh initialisation of only the touched matrices, uniform in
    /// `±sqrt(3 / rows)` so every product starts with unit-scale variance.
    pub fn init_standalone(&self, rng: &mut SeededRng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, r, c) in self.layout.cell_entries(&self.genotype).into_iter().chain(self.layout.io_entries()) {
            store.insert_uniform_range(name, r, c, (3.0 / r as f64).sqrt(), rng)?;
        }
        Ok(store)
    }

    pub fn bind<G: Graph>(&self, g: &mut G, store: &ParamStore) -> Result<NetParams<G::Var>> {
        let mut get = |name: &str| -> Result<G::Var> {
            let id = store.require(name)?;
            Ok(g.param(store, id))
        };
        let n = self.genotype.n_blocks();
        let conn_names: Vec<Option<String>> = (1..=n)
            .map(|i| self.genotype.node(i).prev.map(|j| conn_name(i, j)))
            .collect();
        let w_x = get(W_X)?;
        let w_h1 = get(&conn_name(1, 0))?;
        let conns = conn_names
            .iter()
            .map(|c| c.as_deref().map(&mut get).transpose())
            .collect::<Result<Vec<_>>>()?;
        let gates = if self.layout.semantics == NodeSemantics::Gated {
            let gx = get(&gate_name(W_X))?;
            let gh = get(&gate_name(&conn_name(1, 0)))?;
            let gc = conn_names
                .iter()
                .map(|c| c.as_ref().map(|c| get(&gate_name(c))).transpose())
                .collect::<Result<Vec<_>>>()?;
            Some((gx, gh, gc))
        } else {
            None
        };
        let embed = get(EMBED)?;
        let proj = if self.layout.tie_embeddings { None } else { Some(get(PROJ)?) };
        let adapter = if self.layout.tie_embeddings && self.layout.hidden != self.layout.embed {
            Some(get(PROJ_ADAPTER)?)
        } else {
            None
        };
        let feat_proj = get(FEAT_PROJ)?;
        Ok(NetParams {
            w_x,
            w_h1,
            conns,
            gates,
            embed,
            proj,
            adapter,
            feat_proj,
        })
    }

    fn check_shape<G: Graph>(g: &G, v: &G::Var, cols: usize, what: &str) -> Result<()> {
        let c = g.value(v).cols();
        if c != cols {
            return Err(Error::Shape(format!("{what} has {c} columns, expected {cols}")));
        }
        Ok(())
    }

    /// One recurrent step: node outputs in order, then the mean of the leaves.
    pub fn cell_step<G: Graph>(&self, g: &mut G, p: &NetParams<G::Var>, x: &G::Var, h_prev: &G::Var) -> Result<G::Var> {
        Self::check_shape(g, x, self.layout.embed, "cell input")?;
        Self::check_shape(g, h_prev, self.layout.hidden, "hidden state")?;
        if g.value(x).rows() != g.value(h_prev).rows() {
            return Err(Error::Shape("input and hidden state batch sizes differ".into()));
        }
        let n = self.genotype.n_blocks();
        let mut outs: Vec<G::Var> = Vec::with_capacity(n);
        for i in 1..=n {
            let act = self.genotype.node(i).act;
            let (pre, base) = if i == 1 {
                let a = g.matmul(x, &p.w_x);
                let b = g.matmul(h_prev, &p.w_h1);
                (g.add(&a, &b), h_prev.clone())
            } else {
                let j = self.genotype.node(i).prev.expect("validated genotype");
                let w = p.conns[i - 1].as_ref().expect("bound connection");
                (g.matmul(&outs[j - 1], w), outs[j - 1].clone())
            };
            let f = g.activation(act, &pre);
            let h = match &p.gates {
                None => f,
                Some((gx, gh, gc)) => {
                    let gate_pre = if i == 1 {
                        let a = g.matmul(x, gx);
                        let b = g.matmul(h_prev, gh);
                        g.add(&a, &b)
                    } else {
                        g.matmul(&base, gc[i - 1].as_ref().expect("bound gate"))
                    };
                    let c = g.activation(ActivationKind::Sigmoid, &gate_pre);
                    let diff = g.sub(&f, &base);
                    let step = g.mul(&c, &diff);
                    g.add(&base, &step)
                }
            };
            outs.push(h);
        }
        let leaves: Vec<G::Var> = self.genotype.leaf_set().into_iter().map(|i| outs[i - 1].clone()).collect();
        Ok(g.mean_n(&leaves))
    }

    pub fn output_logits<G: Graph>(&self, g: &mut G, p: &NetParams<G::Var>, h: &G::Var) -> G::Var {
        match (&p.proj, &p.adapter) {
            (Some(w), _) => g.matmul(h, w),
            (None, Some(a)) => {
                let z = g.matmul(h, a);
                g.matmul_nt(&z, &p.embed)
            }
            (None, None) => g.matmul_nt(h, &p.embed),
        }
    }

    /// Projected feature consumed from a zero (or given) state.
    pub fn start_state<G: Graph>(
        &self,
        g: &mut G,
        p: &NetParams<G::Var>,
        features: &Matrix,
        h0: Option<&Matrix>,
    ) -> Result<G::Var> {
        if features.cols() != self.layout.feature_dim {
            return Err(Error::Shape(format!(
                "feature width {} but the model expects {}",
                features.cols(),
                self.layout.feature_dim
            )));
        }
        let f = g.constant(features.clone());
        let x0 = g.matmul(&f, &p.feat_proj);
        let h = match h0 {
            Some(h) => {
                let rows = features.rows();
                let mut m = Matrix::zeros(rows, self.layout.hidden);
                for r in 0..rows {
                    m.row_mut(r).copy_from_slice(h.row(r.min(h.rows() - 1)));
                }
                g.constant(m)
            }
            None => g.constant(Matrix::zeros(features.rows(), self.layout.hidden)),
        };
        self.cell_step(g, p, &x0, &h)
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.layout.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.layout.vocab
            )));
        }
        Ok(())
    }

    /// Teacher-forced label-smoothed cross-entropy over the batch.
    /// `row_weights` scales each caption's contribution; the sum is divided
    /// by `normalizer`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        store: &ParamStore,
        batch: &Batch,
        row_weights: Option<&[f64]>,
        smoothing: f64,
        normalizer: f64,
        h0: Option<&Matrix>,
    ) -> Result<ForwardOutput<G::Var>> {
        if batch.size() == 0 || batch.seq_len() < 2 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for row in &batch.ids {
            self.check_tokens(row)?;
        }
        if let Some(w) = row_weights {
            if w.len() != batch.size() {
                return Err(Error::Shape(format!("{} row weights for {} rows", w.len(), batch.size())));
            }
        }
        let p = self.bind(g, store)?;
        let mut h = self.start_state(g, &p, &batch.features, h0)?;
        let mut losses = Vec::with_capacity(batch.seq_len() - 1);
        let mut logits_out = Vec::with_capacity(batch.seq_len() - 1);
        for t in 0..batch.seq_len() - 1 {
            let x = g.gather_rows(&p.embed, &batch.column(t));
            h = self.cell_step(g, &p, &x, &h)?;
            let logits = self.output_logits(g, &p, &h);
            let mut weights = batch.mask_column(t + 1);
            if let Some(rw) = row_weights {
                for (w, r) in weights.iter_mut().zip(rw) {
                    *w *= r;
                }
            }
            if weights.iter().any(|&w| w != 0.0) {
                losses.push(g.softmax_xent(&logits, &batch.column(t + 1), &weights, smoothing, normalizer));
            }
            logits_out.push(logits);
        }
        let loss = if losses.is_empty() {
            g.constant(Matrix::scalar(0.0))
        } else {
            g.add_n(&losses)
        };
        Ok(ForwardOutput {
            loss,
            logits: logits_out,
            final_h: h,
        })
    }

    /// Mean per-token loss and token accuracy (argmax vs target) over a batch.
    pub fn token_stats(&self, store: &ParamStore, batch: &Batch, smoothing: f64) -> Result<(f64, usize, usize)> {
        let mut g = Eager::new();
        let targets = batch.target_count();
        let out = self.forward(&mut g, store, batch, None, smoothing, targets.max(1.0), None)?;
        let (mut correct, mut total) = (0usize, 0usize);
        for (t, logits) in out.logits.iter().enumerate() {
            let pred = logits.argmax_rows();
            for (r, p) in pred.into_iter().enumerate() {
                if batch.mask[r][t + 1] != 0.0 {
                    total += 1;
                    correct += usize::from(p == batch.ids[r][t + 1]);
                }
            }
        }
        Ok((out.loss.item(), correct, total))
    }

    pub fn decoder<'a>(&'a self, store: &'a ParamStore) -> NetDecoder<'a> {
        NetDecoder {
            net: self,
            store,
            graph: RefCell::new(Eager::new()),
        }
    }
}

/// Incremental decoding view of a network over a fixed store.
pub struct NetDecoder<'a> {
    pub net: &'a CaptionNet,
    pub store: &'a ParamStore,
    graph: RefCell<Eager>,
}

impl StepModel for NetDecoder<'_> {
    type State = Matrix;

    fn vocab_size(&self) -> usize {
        self.net.layout.vocab
    }

    fn start(&self, features: &Matrix) -> Result<Matrix> {
        let mut g = self.graph.borrow_mut();
        let p = self.net.bind(&mut *g, self.store)?;
        let h = self.net.start_state(&mut *g, &p, features, None)?;
        Ok(h.as_ref().clone())
    }

    fn step(&self, state: &Matrix, tokens: &[usize]) -> Result<(Matrix, Matrix)> {
        self.net.check_tokens(tokens)?;
        let mut g = self.graph.borrow_mut();
        let p = self.net.bind(&mut *g, self.store)?;
        let h = g.constant(state.clone());
        let x = g.gather_rows(&p.embed, tokens);
        let h = self.net.cell_step(&mut *g, &p, &x, &h)?;
        let logits = self.net.output_logits(&mut *g, &p, &h);
        Ok((logits.log_softmax_rows(), h.as_ref().clone()))
    }

    fn select(&self, state: &Matrix, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), state.cols());
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(k).copy_from_slice(state.row(r));
        }
        out
    }
}

/// A network with its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StandaloneModel {
    pub net: CaptionNet,
    pub store: ParamStore,
}

impl StandaloneModel {
    pub fn fresh(net: CaptionNet, rng: &mut SeededRng) -> Result<Self> {
        let store = net.init_standalone(rng)?;
        Ok(Self { net, store })
    }

    /// Inherits the touched weights of `bank`.
    pub fn from_bank(net: CaptionNet, bank: &ParamStore) -> Result<Self> {
        let store = net.extract(bank)?;
        Ok(Self { net, store })
    }
}

impl Captioner for StandaloneModel {
    type Decoder<'a> = NetDecoder<'a>;

    fn decoder(&self) -> NetDecoder<'_> {
        self.net.decoder(&self.store)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn sequence_loss(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        row_weights: &[f64],
        smoothing: f64,
        normalizer: f64,
    ) -> Result<Var> {
        Ok(self
            .net
            .forward(tape, &self.store, batch, Some(row_weights), smoothing, normalizer, None)?
            .loss)
    }
}
