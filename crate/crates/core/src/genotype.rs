//! The search space: recurrent-cell genotypes, macro options, parameter
//! accounting and the LSTM reference cell.
//!
//! A cell has `N` nodes numbered from 1. Node 1 reads the step input and the
//! previous cell output; every node `i ≥ 2` reads exactly one earlier node
//! `prev(i) < i`. Nodes that no other node reads are leaves, and the cell
//! output is the mean of the leaves.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::numkernel::{Graph, ParamStore, SeededRng};

pub const N_BLOCKS_OPTIONS: [usize; 4] = [6, 8, 10, 12];
pub const EMBED_OPTIONS: [usize; 4] = [200, 512, 1000, 2048];
pub const HIDDEN_OPTIONS: [usize; 4] = [200, 512, 1000, 2048];
pub const LABEL_SMOOTHING_OPTIONS: [f64; 2] = [0.0, 0.1];
pub const CONTROLLER_HIDDEN_OPTIONS: [usize; 4] = [100, 200, 512, 1024];

/// Bytes per parameter in reported model sizes (float32 storage).
pub const REPORTED_BYTES_PER_PARAM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeDecision {
    /// 1-based predecessor; `None` only for node 1.
    pub prev: Option<usize>,
    pub act: ActivationKind,
}

/// One invariant broken by a candidate node list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoNodes,
    FirstNodeHasPrev { prev: i64 },
    MissingPrev { node: usize },
    PrevNotBefore { node: usize, prev: i64 },
    PrevOutOfRange { node: usize, prev: i64, n_blocks: usize },
    BlockCountMismatch { declared: usize, actual: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoNodes => write!(f, "genotype has no nodes"),
            Violation::FirstNodeHasPrev { prev } => {
                write!(f, "node 1: takes no prev (got {prev})")
            }
            Violation::MissingPrev { node } => write!(f, "node {node}: missing prev"),
            Violation::PrevNotBefore { node, prev } => {
                write!(f, "node {node}: prev must be < node index (got {prev})")
            }
            Violation::PrevOutOfRange {
                node,
                prev,
                n_blocks,
            } => write!(f, "node {node}: prev {prev} outside 1..={n_blocks}"),
            Violation::BlockCountMismatch { declared, actual } => {
                write!(f, "n_blocks is {declared} but {actual} nodes are listed")
            }
        }
    }
}

/// Checks raw `(prev, act)` pairs. `prev` is signed so malformed input can
/// be reported rather than rejected at deserialization.
pub fn validate_raw(prevs: &[Option<i64>]) -> Vec<Violation> {
    let n = prevs.len();
    let mut out = Vec::new();
    if n == 0 {
        out.push(Violation::NoNodes);
        return out;
    }
    if let Some(p) = prevs[0] {
        out.push(Violation::FirstNodeHasPrev { prev: p });
    }
    for (k, prev) in prevs.iter().enumerate().skip(1) {
        let node = k + 1;
        match *prev {
            None => out.push(Violation::MissingPrev { node }),
            Some(p) if p < 1 || p as usize > n => out.push(Violation::PrevOutOfRange {
                node,
                prev: p,
                n_blocks: n,
            }),
            Some(p) if p as usize >= node => out.push(Violation::PrevNotBefore { node, prev: p }),
            Some(_) => {}
        }
    }
    out
}

pub fn validate(nodes: &[NodeDecision]) -> Vec<Violation> {
    let prevs: Vec<Option<i64>> = nodes.iter().map(|n| n.prev.map(|p| p as i64)).collect();
    validate_raw(&prevs)
}

/// A well-formed cell: construction validates every invariant. Serializes as
/// its compact string form.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGenotype {
    nodes: Vec<NodeDecision>,
}

impl CellGenotype {
    pub fn new(nodes: Vec<NodeDecision>) -> Result<Self> {
        let violations = validate(&nodes);
        if violations.is_empty() {
            Ok(Self { nodes })
        } else {
            Err(Error::InvalidGenotype(violations))
        }
    }

    /// Builds a cell from node-1 activation plus `(prev, act)` for nodes 2.. .
    pub fn from_parts(first: ActivationKind, rest: &[(usize, ActivationKind)]) -> Result<Self> {
        let mut nodes = vec![NodeDecision {
            prev: None,
            act: first,
        }];
        nodes.extend(rest.iter().map(|&(prev, act)| NodeDecision {
            prev: Some(prev),
            act,
        }));
        Self::new(nodes)
    }

    /// A chain `1 → 2 → … → n` using one activation throughout.
    pub fn chain(n_blocks: usize, act: ActivationKind) -> Result<Self> {
        let rest: Vec<_> = (2..=n_blocks).map(|i| (i - 1, act)).collect();
        Self::from_parts(act, &rest)
    }

    pub fn n_blocks(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeDecision] {
        &self.nodes
    }

    /// Node `i` (1-based).
    pub fn node(&self, i: usize) -> &NodeDecision {
        &self.nodes[i - 1]
    }

    /// Nodes never referenced as another node's `prev`, ascending.
    pub fn leaf_set(&self) -> BTreeSet<usize> {
        let referenced: BTreeSet<usize> = self.nodes.iter().filter_map(|n| n.prev).collect();
        (1..=self.n_blocks())
            .filter(|i| !referenced.contains(i))
            .collect()
    }

    /// Nodes in an order where every node follows its `prev` (Kahn's algorithm).
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.n_blocks();
        let mut indegree = vec![0usize; n + 1];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for (k, node) in self.nodes.iter().enumerate() {
            if let Some(p) = node.prev {
                indegree[k + 1] += 1;
                children[p].push(k + 1);
            }
        }
        let mut ready: Vec<usize> = (1..=n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Uniform over valid genotypes: `prev(i)` uniform on `1..i`, activations
    /// uniform over the eight kinds.
    pub fn random(rng: &mut SeededRng, n_blocks: usize, celu_alpha: f64) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::InvalidArgument("n_blocks must be at least 1".into()));
        }
        let act = |rng: &mut SeededRng| {
            ActivationKind::from_index(rng.below(ActivationKind::COUNT), celu_alpha)
                .expect("index below COUNT")
        };
        let mut nodes = vec![NodeDecision {
            prev: None,
            act: act(rng),
        }];
        for i in 2..=n_blocks {
            let prev = 1 + rng.below(i - 1);
            nodes.push(NodeDecision {
                prev: Some(prev),
                act: act(rng),
            });
        }
        Self::new(nodes)
    }
}

/// Compact form `act1,prev2:act2,prev3:act3,...`, used in search logs.
impl fmt::Display for CellGenotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, node) in self.nodes.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            match node.prev {
                Some(p) => write!(f, "{p}:{}", node.act)?,
                None => write!(f, "{}", node.act)?,
            }
        }
        Ok(())
    }
}

impl Serialize for CellGenotype {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellGenotype {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for CellGenotype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        for part in s.split(',') {
            let (prev, act) = match part.split_once(':') {
                Some((p, a)) => (
                    Some(p.trim().parse::<usize>().map_err(|_| {
                        Error::Parse(format!("bad prev `{p}` in genotype `{s}`"))
                    })?),
                    a,
                ),
                None => (None, part),
            };
            nodes.push(NodeDecision {
                prev,
                act: act.trim().parse()?,
            });
        }
        Self::new(nodes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeSemantics {
    /// Node `i` computes `act(h_prev · W)` exactly.
    #[default]
    Plain,
    /// Adds a sigmoid highway gate with its own matrix per node:
    /// `c = σ(h_prev · W^c)`, `h = c ⊙ act(h_prev · W) + (1 - c) ⊙ h_prev`.
    Gated,
}

impl NodeSemantics {
    /// Matrices per connection.
    pub fn multiplier(self) -> usize {
        match self {
            NodeSemantics::Plain => 1,
            NodeSemantics::Gated => 2,
        }
    }
}

fn default_celu_alpha() -> f64 {
    1.0
}

fn is_default_alpha(a: &f64) -> bool {
    *a == 1.0
}

/// Macro hyperparameters of the captioning model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroConfig {
    pub n_blocks: usize,
    pub embed_size: usize,
    pub hidden_size: usize,
    pub label_smoothing: f64,
    pub init_hidden_each_epoch: bool,
    pub tie_embeddings: bool,
    pub controller_hidden: usize,
    /// Lifts the option-set restriction so desk-scale runs can use tiny dims.
    #[serde(default)]
    pub unrestricted_dims: bool,
    #[serde(default = "default_celu_alpha", skip_serializing_if = "is_default_alpha")]
    pub celu_alpha: f64,
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            n_blocks: 6,
            embed_size: 512,
            hidden_size: 512,
            label_smoothing: 0.0,
            init_hidden_each_epoch: true,
            tie_embeddings: false,
            controller_hidden: 100,
            unrestricted_dims: false,
            celu_alpha: 1.0,
        }
    }
}

impl MacroConfig {
    /// Small dimensions for laptop-scale experiments.
    pub fn desk(n_blocks: usize, hidden: usize) -> Self {
        Self {
            n_blocks,
            embed_size: hidden,
            hidden_size: hidden,
            controller_hidden: 32,
            unrestricted_dims: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.unrestricted_dims {
            for (name, v) in [
                ("n_blocks", self.n_blocks),
                ("embed_size", self.embed_size),
                ("hidden_size", self.hidden_size),
                ("controller_hidden", self.controller_hidden),
            ] {
                if v == 0 {
                    problems.push(format!("{name} must be positive"));
                }
            }
            if !(0.0..1.0).contains(&self.label_smoothing) {
                problems.push(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
            }
        } else {
            let checks: [(&str, usize, &[usize]); 4] = [
                ("n_blocks", self.n_blocks, &N_BLOCKS_OPTIONS),
                ("embed_size", self.embed_size, &EMBED_OPTIONS),
                ("hidden_size", self.hidden_size, &HIDDEN_OPTIONS),
                ("controller_hidden", self.controller_hidden, &CONTROLLER_HIDDEN_OPTIONS),
            ];
            for (name, v, opts) in checks {
                if !opts.contains(&v) {
                    problems.push(format!("{name} {v} not in {opts:?}"));
                }
            }
            if !LABEL_SMOOTHING_OPTIONS.contains(&self.label_smoothing) {
                problems.push(format!(
                    "label_smoothing {} not in {LABEL_SMOOTHING_OPTIONS:?}",
                    self.label_smoothing
                ));
            }
        }
        if !(self.celu_alpha > 0.0) {
            problems.push("celu_alpha must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

/// Parameter count with its reported byte size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub params: usize,
    pub bytes: usize,
}

impl ParamCount {
    pub fn new(params: usize) -> Self {
        Self {
            params,
            bytes: params * REPORTED_BYTES_PER_PARAM,
        }
    }
}

/// Cell parameters (biases excluded): node 1 owns an input and a recurrent
/// matrix, every further node one `hidden x hidden` matrix; gated semantics
/// doubles every matrix.
pub fn param_count(n_blocks: usize, embed: usize, hidden: usize, sem: NodeSemantics) -> ParamCount {
    let plain = embed * hidden + hidden * hidden + n_blocks.saturating_sub(1) * hidden * hidden;
    ParamCount::new(plain * sem.multiplier())
}

pub fn genotype_param_count(g: &CellGenotype, m: &MacroConfig, sem: NodeSemantics) -> ParamCount {
    param_count(g.n_blocks(), m.embed_size, m.hidden_size, sem)
}

/// Embedding table, output side (projection, or the adapter when tied with
/// `hidden ≠ embed`) and feature projection, reported apart from the cell.
pub fn io_param_count(m: &MacroConfig, vocab: usize, feature_dim: usize) -> usize {
    let embed = vocab * m.embed_size;
    let out = if m.tie_embeddings {
        if m.hidden_size == m.embed_size {
            0
        } else {
            m.hidden_size * m.embed_size
        }
    } else {
        m.hidden_size * vocab
    };
    embed + out + feature_dim * m.embed_size
}

/// Millions with one decimal, e.g. `2.1M`.
pub fn format_millions(count: usize) -> String {
    format!("{:.1}M", count as f64 / 1e6)
}

/// Standard LSTM (gates i, f, g, o; no peepholes).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
    pub bias: bool,
    pub prefix: String,
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

pub struct LstmParams<V> {
    w_x: Vec<V>,
    w_h: Vec<V>,
    b: Option<Vec<V>>,
}

impl LstmCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize, bias: bool) -> Self {
        Self {
            input,
            hidden,
            bias,
            prefix: prefix.into(),
        }
    }

    /// The reference cell at the macro dims, sized without biases.
    pub fn reference(m: &MacroConfig) -> Self {
        Self::new("lstm", m.embed_size, m.hidden_size, false)
    }

    /// `4 · (input·hidden + hidden²)`; biases are never counted.
    pub fn param_count(&self) -> ParamCount {
        ParamCount::new(4 * (self.input * self.hidden + self.hidden * self.hidden))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        for gate in GATES {
            store.insert_uniform(format!("{}.w_x.{gate}", self.prefix), self.input, self.hidden, rng)?;
            store.insert_uniform(format!("{}.w_h.{gate}", self.prefix), self.hidden, self.hidden, rng)?;
            if self.bias {
                store.insert(
                    format!("{}.b.{gate}", self.prefix),
                    crate::numkernel::Matrix::zeros(1, self.hidden),
                )?;
            }
        }
        Ok(())
    }

    pub fn bind<G: Graph>(&self, g: &mut G, store: &ParamStore) -> Result<LstmParams<G::Var>> {
        let mut get = |kind: &str, gate: &str| -> Result<G::Var> {
            let id = store.require(&format!("{}.{kind}.{gate}", self.prefix))?;
            Ok(g.param(store, id))
        };
        let w_x = GATES.iter().map(|gt| get("w_x", gt)).collect::<Result<Vec<_>>>()?;
        let w_h = GATES.iter().map(|gt| get("w_h", gt)).collect::<Result<Vec<_>>>()?;
        let b = if self.bias {
            Some(GATES.iter().map(|gt| get("b", gt)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(LstmParams { w_x, w_h, b })
    }

    /// One step; returns `(h, c)`.
    pub fn step<G: Graph>(
        &self,
        g: &mut G,
        p: &LstmParams<G::Var>,
        x: &G::Var,
        h: &G::Var,
        c: &G::Var,
    ) -> (G::Var, G::Var) {
        let mut pre = Vec::with_capacity(4);
        for k in 0..4 {
            let xw = g.matmul(x, &p.w_x[k]);
            let hw = g.matmul(h, &p.w_h[k]);
            let mut z = g.add(&xw, &hw);
            if let Some(b) = &p.b {
                z = g.add_row(&z, &b[k]);
            }
            pre.push(z);
        }
        let i = g.activation(ActivationKind::Sigmoid, &pre[0]);
        let f = g.activation(ActivationKind::Sigmoid, &pre[1]);
        let cand = g.activation(ActivationKind::Tanh, &pre[2]);
        let o = g.activation(ActivationKind::Sigmoid, &pre[3]);
        let fc = g.mul(&f, c);
        let ig = g.mul(&i, &cand);
        let c_new = g.add(&fc, &ig);
        let tc = g.activation(ActivationKind::Tanh, &c_new);
        let h_new = g.mul(&o, &tc);
        (h_new, c_new)
    }
}

#[derive(Serialize, Deserialize)]
struct RawNode {
    #[serde(default)]
    prev: Option<i64>,
    act: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawGenotypeFile {
    n_blocks: usize,
    nodes: Vec<RawNode>,
    #[serde(rename = "macro")]
    macro_config: MacroConfig,
    semantics: NodeSemantics,
}

/// A genotype together with the macro settings and node semantics it runs under.
#[derive(Clone, Debug, PartialEq)]
pub struct GenotypeSpec {
    pub genotype: CellGenotype,
    pub macro_config: MacroConfig,
    pub semantics: NodeSemantics,
}

impl GenotypeSpec {
    pub fn to_json(&self) -> Result<String> {
        let nodes = self
            .genotype
            .nodes()
            .iter()
            .map(|n| RawNode {
                prev: n.prev.map(|p| p as i64),
                act: n.act.name().to_string(),
                alpha: match n.act {
                    ActivationKind::Celu { alpha } if alpha != 1.0 => Some(alpha),
                    _ => None,
                },
            })
            .collect();
        let raw = RawGenotypeFile {
            n_blocks: self.genotype.n_blocks(),
            nodes,
            macro_config: self.macro_config.clone(),
            semantics: self.semantics,
        };
        Ok(serde_json::to_string_pretty(&raw)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawGenotypeFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("genotype JSON: {e}")))?;
        let mut violations = validate_raw(&raw.nodes.iter().map(|n| n.prev).collect::<Vec<_>>());
        if raw.n_blocks != raw.nodes.len() {
            violations.push(Violation::BlockCountMismatch {
                declared: raw.n_blocks,
                actual: raw.nodes.len(),
            });
        }
        if !violations.is_empty() {
            return Err(Error::InvalidGenotype(violations));
        }
        let mut nodes = Vec::with_capacity(raw.nodes.len());
        for (k, n) in raw.nodes.iter().enumerate() {
            let mut act: ActivationKind = n
                .act
                .parse()
                .map_err(|_| Error::Parse(format!("node {}: unknown activation `{}`", k + 1, n.act)))?;
            if let (ActivationKind::Celu { .. }, Some(alpha)) = (act, n.alpha) {
                act = ActivationKind::Celu { alpha };
            }
            nodes.push(NodeDecision {
                prev: n.prev.map(|p| p as usize),
                act,
            });
        }
        raw.macro_config.validate()?;
        Ok(Self {
            genotype: CellGenotype::new(nodes)?,
            macro_config: raw.macro_config,
            semantics: raw.semantics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{Eager, Matrix, Tape};
    use ActivationKind::*;

    #[test]
    fn chain_validates() {
        let g = CellGenotype::from_parts(Tanh, &[(1, Relu), (2, Sigmoid)]).unwrap();
        assert_eq!(g.n_blocks(), 3);
        assert_eq!(g.leaf_set().into_iter().collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn self_loop_and_range_violations() {
        let mut nodes = CellGenotype::chain(6, Tanh).unwrap().nodes().to_vec();
        nodes[2].prev = Some(3);
        let v = validate(&nodes);
        assert_eq!(v, vec![Violation::PrevNotBefore { node: 3, prev: 3 }]);
        assert!(v[0].to_string().contains("prev must be < node index"));

        let mut nodes = CellGenotype::chain(6, Tanh).unwrap().nodes().to_vec();
        nodes[4].prev = Some(7);
        assert_eq!(
            validate(&nodes),
            vec![Violation::PrevOutOfRange {
                node: 5,
                prev: 7,
                n_blocks: 6
            }]
        );
    }

    #[test]
    fn leaf_sets() {
        let chain = CellGenotype::chain(4, Relu).unwrap();
        assert_eq!(chain.leaf_set(), BTreeSet::from([4]));
        let star = CellGenotype::from_parts(Relu, &[(1, Tanh), (1, Tanh), (1, Tanh)]).unwrap();
        assert_eq!(star.leaf_set(), BTreeSet::from([2, 3, 4]));
        let walk = CellGenotype::from_parts(Tanh, &[(1, Relu), (2, Relu)]).unwrap();
        assert_eq!(walk.leaf_set(), BTreeSet::from([3]));
        let single = CellGenotype::chain(1, Tanh).unwrap();
        assert_eq!(single.leaf_set(), BTreeSet::from([1]));
    }

    #[test]
    fn table_counts() {
        let lstm = LstmCell::new("lstm", 512, 512, false);
        assert_eq!(lstm.param_count().params, 2_097_152);
        assert_eq!(param_count(6, 512, 512, NodeSemantics::Gated).params, 3_670_016);
        assert_eq!(param_count(6, 512, 512, NodeSemantics::Plain).params, 1_835_008);
        assert_eq!(format_millions(2_097_152), "2.1M");
        assert_eq!(format_millions(lstm.param_count().bytes), "8.4M");
        assert_eq!(format_millions(3_670_016), "3.7M");
        assert_eq!(format_millions(1_835_008), "1.8M");
    }

    #[test]
    fn param_count_is_additive() {
        for sem in [NodeSemantics::Plain, NodeSemantics::Gated] {
            for n in 1..12 {
                let d = param_count(n + 1, 40, 30, sem).params - param_count(n, 40, 30, sem).params;
                assert_eq!(d, sem.multiplier() * 30 * 30);
            }
        }
    }

    #[test]
    fn random_single_node() {
        let mut rng = SeededRng::new(0);
        let g = CellGenotype::random(&mut rng, 1, 1.0).unwrap();
        assert_eq!(g.n_blocks(), 1);
        assert_eq!(g.node(1).prev, None);
        assert!(CellGenotype::random(&mut rng, 0, 1.0).is_err());
    }

    #[test]
    fn random_prev_is_uniform() {
        // χ² with 1 dof; 10.83 is the 0.1% critical value.
        let mut rng = SeededRng::new(99);
        let mut counts = [0usize; 2];
        let draws = 10_000;
        for _ in 0..draws {
            let g = CellGenotype::random(&mut rng, 3, 1.0).unwrap();
            counts[g.node(3).prev.unwrap() - 1] += 1;
        }
        let e = draws as f64 / 2.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 10.83, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn compact_form_round_trips() {
        let mut rng = SeededRng::new(5);
        for _ in 0..50 {
            let g = CellGenotype::random(&mut rng, 7, 1.0).unwrap();
            assert_eq!(g.to_string().parse::<CellGenotype>().unwrap(), g);
        }
    }

    fn spec(g: CellGenotype) -> GenotypeSpec {
        GenotypeSpec {
            genotype: g,
            macro_config: MacroConfig::default(),
            semantics: NodeSemantics::Gated,
        }
    }

    #[test]
    fn json_schema_fields() {
        let s = spec(CellGenotype::from_parts(Tanh, &[(1, LeakyRelu)]).unwrap());
        let v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(v["n_blocks"], 2);
        assert_eq!(v["nodes"][0]["prev"], serde_json::Value::Null);
        assert_eq!(v["nodes"][1]["prev"], 1);
        assert_eq!(v["nodes"][1]["act"], "leaky_relu");
        assert_eq!(v["semantics"], "gated");
        assert_eq!(v["macro"]["hidden_size"], 512);
    }

    #[test]
    fn json_rejects_unknown_activation() {
        let s = spec(CellGenotype::chain(2, Relu).unwrap());
        let text = s.to_json().unwrap().replace("\"relu\"", "\"relu6\"");
        let err = GenotypeSpec::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("relu6"), "{err}");
    }

    #[test]
    fn json_missing_prev_names_node() {
        let s = spec(CellGenotype::chain(5, Relu).unwrap());
        let mut v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        v["nodes"][3].as_object_mut().unwrap().remove("prev");
        let err = GenotypeSpec::from_json(&v.to_string()).unwrap_err();
        match &err {
            Error::InvalidGenotype(vs) => assert_eq!(vs, &vec![Violation::MissingPrev { node: 4 }]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("node 4"));
    }

    #[test]
    fn macro_option_sets() {
        let mut m = MacroConfig::default();
        assert!(m.validate().is_ok());
        m.hidden_size = 32;
        assert!(m.validate().is_err());
        m.unrestricted_dims = true;
        assert!(m.validate().is_ok());
    }

    #[test]
    fn lstm_zero_weights_zero_state() {
        let cell = LstmCell::new("l", 3, 4, true);
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(1);
        cell.init(&mut store, &mut rng).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Eager::new();
        let p = cell.bind(&mut g, &store).unwrap();
        let x = g.constant(Matrix::filled(2, 3, 0.5));
        let h = g.constant(Matrix::zeros(2, 4));
        let c = g.constant(Matrix::zeros(2, 4));
        let (h1, _) = cell.step(&mut g, &p, &x, &h, &c);
        assert_eq!(*h1, Matrix::zeros(2, 4));
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let cell = LstmCell::new("l", 3, 4, true);
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(2);
        cell.init(&mut store, &mut rng).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            for v in store.value_mut(id).data_mut() {
                *v = rng.uniform_range(-0.8, 0.8);
            }
        }
        let x = Matrix::from_vec(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let h0 = Matrix::from_vec(2, 4, (0..8).map(|_| rng.normal() * 0.5).collect()).unwrap();
        let c0 = Matrix::from_vec(2, 4, (0..8).map(|_| rng.normal() * 0.5).collect()).unwrap();
        let loss_of = |store: &ParamStore| -> f64 {
            let mut g = Eager::new();
            let p = cell.bind(&mut g, store).unwrap();
            let (x, h, c) = (g.constant(x.clone()), g.constant(h0.clone()), g.constant(c0.clone()));
            let (h1, c1) = cell.step(&mut g, &p, &x, &h, &c);
            let s = g.add(&h1, &c1);
            let sq = g.mul(&s, &s);
            g.sum(&sq).item()
        };
        let mut tape = Tape::new();
        let p = cell.bind(&mut tape, &store).unwrap();
        let (xv, hv, cv) = (tape.constant(x.clone()), tape.constant(h0.clone()), tape.constant(c0.clone()));
        let (h1, c1) = cell.step(&mut tape, &p, &xv, &hv, &cv);
        let s = tape.add(&h1, &c1);
        let sq = tape.mul(&s, &s);
        let loss = tape.sum(&sq);
        let grads = tape.backward(loss).unwrap();
        let eps = 1e-5;
        for &id in &ids {
            let analytic = grads.get_or_zeros(&store, id);
            for k in 0..analytic.len() {
                let mut plus = store.clone();
                plus.value_mut(id).data_mut()[k] += eps;
                let mut minus = store.clone();
                minus.value_mut(id).data_mut()[k] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let an = analytic.data()[k];
                let err = (fd - an).abs() / an.abs().max(1e-6).max(fd.abs());
                assert!(err < 1e-4 || (fd - an).abs() < 1e-9, "{}[{k}] fd {fd} an {an}", store.name(id));
            }
        }
    }
}
