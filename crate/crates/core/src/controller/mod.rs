//! The policy LSTM that samples cell genotypes decision by decision.
//!
//! Node 1 gets an activation only; every later node gets a predecessor and
//! then an activation. Each decision feeds the embedding of its choice into
//! the next LSTM step. Optional macro decisions come first.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::genotype::{CellGenotype, LstmCell, MacroConfig, NodeDecision};
use crate::numkernel::checkpoint::{load_optimizer, load_store, save_optimizer, save_store};
use crate::numkernel::{argmax, Eager, Graph, Matrix, OptimConfig, Optimizer, ParamStore, SeededRng, Tape};

/// Logit transform applied before the softmax: `z / T`, then optionally
/// `C · tanh(·)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub temperature: f64,
    pub tanh_constant: Option<f64>,
}

impl Policy {
    pub const SEARCH: Policy = Policy {
        temperature: 5.0,
        tanh_constant: Some(2.5),
    };
    pub const PLAIN: Policy = Policy {
        temperature: 1.0,
        tanh_constant: None,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub policy: Policy,
    pub entropy_weight: f64,
    pub lr: f64,
    pub clip_norm: f64,
    pub traces_per_update: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            policy: Policy::SEARCH,
            entropy_weight: 1e-4,
            lr: 3.5e-4,
            clip_norm: 0.25,
            traces_per_update: 10,
        }
    }
}

/// Option lists for the macro heads. Lists with a single entry still get a
/// (trivial) head so the decision sequence has a fixed shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroSpace {
    pub embed_size: Vec<usize>,
    pub hidden_size: Vec<usize>,
    pub label_smoothing: Vec<f64>,
    pub init_hidden_each_epoch: Vec<bool>,
    pub tie_embeddings: Vec<bool>,
}

impl Default for MacroSpace {
    fn default() -> Self {
        use crate::genotype::{EMBED_OPTIONS, HIDDEN_OPTIONS, LABEL_SMOOTHING_OPTIONS};
        Self {
            embed_size: EMBED_OPTIONS.to_vec(),
            hidden_size: HIDDEN_OPTIONS.to_vec(),
            label_smoothing: LABEL_SMOOTHING_OPTIONS.to_vec(),
            init_hidden_each_epoch: vec![true, false],
            tie_embeddings: vec![false, true],
        }
    }
}

impl MacroSpace {
    pub const KEYS: [&'static str; 5] = [
        "embed_size",
        "hidden_size",
        "label_smoothing",
        "init_hidden_each_epoch",
        "tie_embeddings",
    ];

    pub fn arities(&self) -> [usize; 5] {
        [
            self.embed_size.len(),
            self.hidden_size.len(),
            self.label_smoothing.len(),
            self.init_hidden_each_epoch.len(),
            self.tie_embeddings.len(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (k, a) in Self::KEYS.iter().zip(self.arities()) {
            if a == 0 {
                return Err(Error::InvalidArgument(format!("macro option list `{k}` is empty")));
            }
        }
        Ok(())
    }

    pub fn apply(&self, base: &MacroConfig, choices: &[usize]) -> MacroConfig {
        MacroConfig {
            embed_size: self.embed_size[choices[0]],
            hidden_size: self.hidden_size[choices[1]],
            label_smoothing: self.label_smoothing[choices[2]],
            init_hidden_each_epoch: self.init_hidden_each_epoch[choices[3]],
            tie_embeddings: self.tie_embeddings[choices[4]],
            ..base.clone()
        }
    }
}

/// One sampled architecture with its log-probability and entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub genotype: CellGenotype,
    /// Indices into the macro option lists, when macro heads are on.
    pub macro_choices: Vec<usize>,
    /// Every decision in sampling order; predecessors are stored zero-based.
    pub choices: Vec<usize>,
    pub log_prob_sum: f64,
    pub entropy_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinforceStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_advantage: f64,
    pub mean_entropy: f64,
    pub updated: bool,
}

#[derive(Clone, Debug)]
struct Decision {
    head: String,
    emb: String,
    arity: usize,
}

const START: &str = "ctrl.start";
const EMB_ACT: &str = "ctrl.emb.act";
const EMB_PREV: &str = "ctrl.emb.prev";
const HEAD_ACT: &str = "ctrl.head.act";
const LSTM_PREFIX: &str = "ctrl.lstm";

fn prev_head(i: usize) -> String {
    format!("ctrl.head.prev.{i}")
}

fn bias(name: &str) -> String {
    format!("{name}.b")
}

#[derive(Clone, Debug)]
pub struct Controller {
    pub config: ControllerConfig,
    pub n_blocks: usize,
    pub celu_alpha: f64,
    pub macro_space: Option<MacroSpace>,
    pub store: ParamStore,
    optimizer: Optimizer,
}

impl Controller {
    pub fn new(
        config: ControllerConfig,
        n_blocks: usize,
        macro_space: Option<MacroSpace>,
        celu_alpha: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::InvalidArgument("n_blocks must be at least 1".into()));
        }
        if let Some(m) = &macro_space {
            m.validate()?;
        }
        let h = config.hidden;
        let mut store = ParamStore::new();
        LstmCell::new(LSTM_PREFIX, h, h, true).init(&mut store, rng)?;
        store.insert_uniform(START, 1, h, rng)?;
        store.insert_uniform(EMB_ACT, ActivationKind::COUNT, h, rng)?;
        store.insert_uniform(EMB_PREV, n_blocks.saturating_sub(1).max(1), h, rng)?;
        let mut heads: Vec<(String, usize)> = vec![(HEAD_ACT.into(), ActivationKind::COUNT)];
        heads.extend((2..=n_blocks).map(|i| (prev_head(i), i - 1)));
        if let Some(m) = &macro_space {
            for (k, a) in MacroSpace::KEYS.iter().zip(m.arities()) {
                heads.push((format!("ctrl.head.macro.{k}"), a));
                store.insert_uniform(format!("ctrl.emb.macro.{k}"), a, h, rng)?;
            }
        }
        for (name, arity) in heads {
            store.insert_uniform(name.clone(), h, arity, rng)?;
            store.insert(bias(&name), Matrix::zeros(1, arity))?;
        }
        let optimizer = Optimizer::new(OptimConfig::adam(Some(config.clip_norm)), &store);
        Ok(Self {
            config,
            n_blocks,
            celu_alpha,
            macro_space,
            store,
            optimizer,
        })
    }

    /// Sets every weight to zero (uniform policy); used by tests and probes.
    pub fn zero_weights(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.value_mut(id).scale_assign(0.0);
        }
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    fn schedule(&self) -> Vec<Decision> {
        let mut out = Vec::new();
        if let Some(m) = &self.macro_space {
            for (k, a) in MacroSpace::KEYS.iter().zip(m.arities()) {
                out.push(Decision {
                    head: format!("ctrl.head.macro.{k}"),
                    emb: format!("ctrl.emb.macro.{k}"),
                    arity: a,
                });
            }
        }
        let act = Decision {
            head: HEAD_ACT.into(),
            emb: EMB_ACT.into(),
            arity: ActivationKind::COUNT,
        };
        out.push(act.clone());
        for i in 2..=self.n_blocks {
            out.push(Decision {
                head: prev_head(i),
                emb: EMB_PREV.into(),
                arity: i - 1,
            });
            out.push(act.clone());
        }
        out
    }

    pub fn decision_count(&self) -> usize {
        self.schedule().len()
    }

    /// Runs the decision LSTM for `rows` parallel traces. `choose(step, z)`
    /// picks one index per row from the transformed logits `z`.
    fn rollout<G: Graph>(
        &self,
        g: &mut G,
        rows: usize,
        policy: Policy,
        mut choose: impl FnMut(usize, &Matrix) -> Result<Vec<usize>>,
    ) -> Result<Vec<(G::Var, Vec<usize>)>> {
        let lstm = LstmCell::new(LSTM_PREFIX, self.config.hidden, self.config.hidden, true);
        let lp = lstm.bind(g, &self.store)?;
        let start = g.param(&self.store, self.store.require(START)?);
        let mut x = g.gather_rows(&start, &vec![0; rows]);
        let mut h = g.constant(Matrix::zeros(rows, self.config.hidden));
        let mut c = g.constant(Matrix::zeros(rows, self.config.hidden));
        let mut out = Vec::new();
        for (step, d) in self.schedule().into_iter().enumerate() {
            let (hn, cn) = lstm.step(g, &lp, &x, &h, &c);
            h = hn;
            c = cn;
            let w = g.param(&self.store, self.store.require(&d.head)?);
            let b = g.param(&self.store, self.store.require(&bias(&d.head))?);
            let z = g.matmul(&h, &w);
            let mut z = g.add_row(&z, &b);
            if policy.temperature != 1.0 {
                z = g.scale(&z, 1.0 / policy.temperature);
            }
            if let Some(cst) = policy.tanh_constant {
                let t = g.activation(ActivationKind::Tanh, &z);
                z = g.scale(&t, cst);
            }
            let picks = choose(step, g.value(&z))?;
            if let Some(&bad) = picks.iter().find(|&&p| p >= d.arity) {
                return Err(Error::InvalidArgument(format!(
                    "decision {step}: choice {bad} out of range for arity {}",
                    d.arity
                )));
            }
            let emb = g.param(&self.store, self.store.require(&d.emb)?);
            x = g.gather_rows(&emb, &picks);
            out.push((z, picks));
        }
        Ok(out)
    }

    fn trace_from(&self, choices: Vec<usize>, log_prob_sum: f64, entropy_sum: f64) -> Result<SampleTrace> {
        let n_macro = self.macro_space.as_ref().map_or(0, |_| MacroSpace::KEYS.len());
        let node_choices = &choices[n_macro..];
        let act = |k: usize| ActivationKind::from_index(k, self.celu_alpha).expect("arity-checked");
        let mut nodes = vec![NodeDecision {
            prev: None,
            act: act(node_choices[0]),
        }];
        for pair in node_choices[1..].chunks(2) {
            nodes.push(NodeDecision {
                prev: Some(pair[0] + 1),
                act: act(pair[1]),
            });
        }
        Ok(SampleTrace {
            genotype: CellGenotype::new(nodes)?,
            macro_choices: choices[..n_macro].to_vec(),
            choices,
            log_prob_sum,
            entropy_sum,
        })
    }

    /// Draws `count` traces under `policy`. With `greedy`, every decision is
    /// the argmax instead (the zero-temperature limit).
    pub fn sample_many(&self, rng: &mut SeededRng, count: usize, policy: Policy, greedy: bool) -> Result<Vec<SampleTrace>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let mut g = Eager::new();
        let steps = self.rollout(&mut g, count, policy, |_, z| {
            let p = z.softmax_rows();
            Ok((0..z.rows())
                .map(|r| if greedy { argmax(z.row(r)) } else { rng.categorical(p.row(r)) })
                .collect())
        })?;
        self.collect_traces(&steps, count)
    }

    fn collect_traces(&self, steps: &[(std::rc::Rc<Matrix>, Vec<usize>)], count: usize) -> Result<Vec<SampleTrace>> {
        let mut choices = vec![Vec::with_capacity(steps.len()); count];
        let mut logp = vec![0.0; count];
        let mut ent = vec![0.0; count];
        for (z, picks) in steps {
            let ls = z.log_softmax_rows();
            for r in 0..count {
                choices[r].push(picks[r]);
                logp[r] += ls.get(r, picks[r]);
                ent[r] -= ls.row(r).iter().map(|l| l.exp() * l).sum::<f64>();
            }
        }
        choices
            .into_iter()
            .zip(logp.into_iter().zip(ent))
            .map(|(c, (l, e))| self.trace_from(c, l, e))
            .collect()
    }

    pub fn sample(&self, rng: &mut SeededRng, policy: Policy) -> Result<SampleTrace> {
        Ok(self.sample_many(rng, 1, policy, false)?.remove(0))
    }

    /// Decision indices that would produce `genotype` (and macro choices).
    pub fn encode(&self, genotype: &CellGenotype, macro_choices: &[usize]) -> Result<Vec<usize>> {
        let n_macro = self.macro_space.as_ref().map_or(0, |_| MacroSpace::KEYS.len());
        if genotype.n_blocks() != self.n_blocks || macro_choices.len() != n_macro {
            return Err(Error::InvalidArgument(format!(
                "controller expects {} nodes and {n_macro} macro choices, got {} and {}",
                self.n_blocks,
                genotype.n_blocks(),
                macro_choices.len()
            )));
        }
        let mut out = macro_choices.to_vec();
        for (k, n) in genotype.nodes().iter().enumerate() {
            if k > 0 {
                out.push(n.prev.expect("validated genotype") - 1);
            }
            out.push(n.act.index());
        }
        Ok(out)
    }

    /// Teacher-forced log-probability of a decision sequence under `policy`.
    pub fn log_prob(&self, genotype: &CellGenotype, macro_choices: &[usize], policy: Policy) -> Result<f64> {
        let choices = self.encode(genotype, macro_choices)?;
        let mut g = Eager::new();
        let steps = self.rollout(&mut g, 1, policy, |s, _| Ok(vec![choices[s]]))?;
        Ok(self.collect_traces(&steps, 1)?[0].log_prob_sum)
    }

    /// Per-decision probability vectors along a teacher-forced sequence.
    pub fn decision_probs(&self, choices: &[usize], policy: Policy) -> Result<Vec<Vec<f64>>> {
        let mut g = Eager::new();
        let steps = self.rollout(&mut g, 1, policy, |s, _| Ok(vec![choices[s]]))?;
        Ok(steps.iter().map(|(z, _)| z.softmax_rows().row(0).to_vec()).collect())
    }

    /// Indices of the activation decisions within a choice sequence.
    pub fn activation_steps(&self) -> Vec<usize> {
        let n_macro = self.macro_space.as_ref().map_or(0, |_| MacroSpace::KEYS.len());
        (0..self.n_blocks).map(|k| n_macro + if k == 0 { 0 } else { 2 * k }).collect()
    }

    /// Probability of activation `act_index` at every activation head, along
    /// the argmax decision path.
    pub fn activation_probabilities(&self, act_index: usize, policy: Policy) -> Result<Vec<f64>> {
        let mut g = Eager::new();
        let steps = self.rollout(&mut g, 1, policy, |_, z| Ok(vec![argmax(z.row(0))]))?;
        Ok(self
            .activation_steps()
            .into_iter()
            .map(|s| steps[s].0.softmax_rows().get(0, act_index))
            .collect())
    }

    /// One Adam step ascending `Σ (r − b) log p + w · H` averaged over traces.
    pub fn reinforce_update(&mut self, traces: &[SampleTrace], rewards: &[f64], baseline: f64) -> Result<ReinforceStats> {
        if traces.len() != rewards.len() {
            return Err(Error::InvalidArgument(format!(
                "{} traces but {} rewards",
                traces.len(),
                rewards.len()
            )));
        }
        if let Some(r) = rewards.iter().chain(std::iter::once(&baseline)).find(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite reward {r}")));
        }
        let n = traces.len();
        if n == 0 {
            return Ok(ReinforceStats {
                loss: 0.0,
                grad_norm: 0.0,
                mean_advantage: 0.0,
                mean_entropy: 0.0,
                updated: false,
            });
        }
        let adv: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
        let mean_advantage = adv.iter().sum::<f64>() / n as f64;
        let mean_entropy = traces.iter().map(|t| t.entropy_sum).sum::<f64>() / n as f64;
        let w = self.config.entropy_weight;
        if adv.iter().all(|&a| a == 0.0) && w == 0.0 {
            return Ok(ReinforceStats {
                loss: 0.0,
                grad_norm: 0.0,
                mean_advantage,
                mean_entropy,
                updated: false,
            });
        }
        let mut tape = Tape::new();
        let policy = self.config.policy;
        let steps = self.rollout(&mut tape, n, policy, |s, _| Ok(traces.iter().map(|t| t.choices[s]).collect()))?;
        let mut terms = Vec::with_capacity(steps.len() * 2);
        for (z, picks) in &steps {
            // xent = −log p, so weighting by the advantage gives −(r − b) log p.
            terms.push(tape.softmax_xent(z, picks, &adv, 0.0, n as f64));
            if w != 0.0 {
                let h = tape.entropy(z);
                terms.push(tape.scale(&h, -w / n as f64));
            }
        }
        let loss = tape.add_n(&terms);
        let loss_value = tape.value(&loss).item();
        let grads = tape.backward(loss)?;
        let stats = self.optimizer.step(&mut self.store, &grads, self.config.lr)?;
        Ok(ReinforceStats {
            loss: loss_value,
            grad_norm: stats.grad_norm,
            mean_advantage,
            mean_entropy,
            updated: true,
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        save_store(&self.store, dir, stem)?;
        save_optimizer(&self.optimizer, &self.store, dir, &format!("{stem}.adam"))
    }

    /// Restores weights and optimizer state into a controller of the same shape.
    pub fn load(&mut self, dir: &Path, stem: &str) -> Result<()> {
        let store = load_store(dir, stem)?;
        for (_, name, m) in self.store.iter() {
            let other = store.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if other.shape() != m.shape() {
                return Err(Error::Shape(format!("controller parameter `{name}` shape differs")));
            }
        }
        let store = self.store.subset(self.store.iter().map(|(_, n, _)| n).collect::<Vec<_>>())
            .and_then(|mut s| {
                for id in s.ids().collect::<Vec<_>>() {
                    let name = s.name(id).to_string();
                    *s.value_mut(id) = store.get(&name).expect("checked above").clone();
                }
                Ok(s)
            })?;
        self.optimizer = load_optimizer(
            OptimConfig::adam(Some(self.config.clip_norm)),
            &store,
            dir,
            &format!("{stem}.adam"),
        )?;
        self.store = store;
        Ok(())
    }
}
