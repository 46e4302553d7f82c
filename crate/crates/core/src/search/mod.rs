//! The interleaved search loop and the derive step.
//!
//! Each epoch first trains the shared banks (ω), one sampled child per
//! training batch, then trains the controller (θ) with REINFORCE on rewards
//! measured on a validation subsample. Every event goes to a JSON-lines log
//! and the full state is checkpointed after each epoch.

mod checkpoint;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{latest_checkpoint, replay_baselines, run_search_in, SearchRun, LOG_FILE};

use crate::controller::{Controller, ControllerConfig, MacroSpace, SampleTrace};
use crate::datapipe::{batch_iter, reference_examples, EvalItem, PreparedData};
use crate::error::{Error, Result};
use crate::evalgen::{BeamConfig, CiderVariant, MetricReport, DEFAULT_MAX_LEN};
use crate::genotype::{CellGenotype, GenotypeSpec, MacroConfig, NodeSemantics};
use crate::numkernel::{Graph, OptimConfig, Optimizer, ParamStore, SeededRng, Tape};
use crate::supernet::{BankKey, BankLayout, BankSet, CaptionNet, SharedParamBank};
use crate::train::{decode_items, token_stats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    MetricCider,
    MetricBleu4,
    NegLoss,
}

impl RewardMode {
    pub fn reward(self, metrics: &MetricReport, loss: f64) -> f64 {
        match self {
            RewardMode::MetricCider => metrics.cider,
            RewardMode::MetricBleu4 => metrics.bleu4,
            RewardMode::NegLoss => (-loss).exp(),
        }
    }
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Parse(format!("unknown reward mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Base macro settings; `n_blocks` sets the search depth.
    #[serde(rename = "macro")]
    pub macro_config: MacroConfig,
    pub semantics: NodeSemantics,
    /// Samples macro settings from `macro_space` alongside the cell.
    pub search_macro: bool,
    pub macro_space: MacroSpace,
    pub controller: ControllerConfig,
    pub epochs: usize,
    /// ω updates per epoch; `None` makes one pass over the training set.
    pub omega_steps: Option<usize>,
    pub batch_size: usize,
    pub omega_lr: f64,
    pub omega_clip: Option<f64>,
    /// Controller updates per epoch, each on `controller.traces_per_update` traces.
    pub theta_updates: usize,
    pub reward_mode: RewardMode,
    pub reward_subsample: usize,
    pub baseline_decay: f64,
    pub derive_samples: usize,
    /// ω steps a child takes from its inherited weights before it is scored.
    pub child_eval_steps: usize,
    pub cider_variant: CiderVariant,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            macro_config: MacroConfig::desk(6, 32),
            semantics: NodeSemantics::Plain,
            search_macro: false,
            macro_space: MacroSpace::default(),
            controller: ControllerConfig::default(),
            epochs: 3,
            omega_steps: None,
            batch_size: 16,
            omega_lr: 2e-3,
            omega_clip: Some(5.0),
            theta_updates: 20,
            reward_mode: RewardMode::MetricCider,
            reward_subsample: 64,
            baseline_decay: 0.95,
            derive_samples: 16,
            child_eval_steps: 0,
            cider_variant: CiderVariant::CiderD,
            max_len: DEFAULT_MAX_LEN,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.reward_subsample == 0 || self.derive_samples == 0 {
            return bad("epochs, batch_size, reward_subsample and derive_samples must be positive");
        }
        if self.omega_steps == Some(0) {
            return bad("omega_steps must be positive");
        }
        if self.controller.traces_per_update == 0 && self.theta_updates > 0 {
            return bad("controller.traces_per_update must be positive");
        }
        if !(self.baseline_decay > 0.0 && self.baseline_decay < 1.0) {
            return bad("baseline_decay must lie in (0, 1)");
        }
        if !(self.omega_lr > 0.0) {
            return bad("omega_lr must be positive");
        }
        self.macro_config.validate()?;
        if self.search_macro {
            self.macro_space.validate()?;
        }
        Ok(())
    }

    /// Macro settings for a trace.
    pub fn macro_for(&self, trace: &SampleTrace) -> MacroConfig {
        if self.search_macro && !trace.macro_choices.is_empty() {
            self.macro_space.apply(&self.macro_config, &trace.macro_choices)
        } else {
            self.macro_config.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Omega,
    Theta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PhaseStart,
    PhaseEnd,
    /// One ω update on a sampled child.
    Train,
    /// One scored controller sample.
    Reward,
    /// One controller update.
    Update,
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchEvent {
    pub epoch: usize,
    pub phase: Phase,
    pub kind: EventKind,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genotype: Option<CellGenotype>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub macro_choices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub baseline: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_checksum: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_checksum: Option<u64>,
}

impl SearchEvent {
    fn new(epoch: usize, phase: Phase, kind: EventKind, step: usize, baseline: f64) -> Self {
        Self {
            epoch,
            phase,
            kind,
            step,
            genotype: None,
            macro_choices: Vec::new(),
            reward: None,
            loss: None,
            baseline,
            omega_checksum: None,
            theta_checksum: None,
        }
    }
}

/// Scores and diagnostics of one evaluated child.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub index: usize,
    pub genotype: CellGenotype,
    #[serde(rename = "macro")]
    pub macro_config: MacroConfig,
    pub reward_mode: RewardMode,
    pub reward: f64,
    pub metrics: MetricReport,
    /// Validation cross-entropy per token.
    pub loss: f64,
    pub params: usize,
    /// Greedy decodes (interior ids), one per evaluated item.
    pub decodes: Vec<Vec<usize>>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl CandidateReport {
    pub fn reward_under(&self, mode: RewardMode) -> f64 {
        mode.reward(&self.metrics, self.loss)
    }
}

/// Scores `net` (weights in `store`) on `items` with greedy decodes.
pub fn evaluate_child(
    net: &CaptionNet,
    store: &ParamStore,
    items: &[EvalItem],
    mode: RewardMode,
    variant: CiderVariant,
    max_len: usize,
) -> Result<CandidateReport> {
    if items.is_empty() {
        return Err(Error::Data("child evaluation needs at least one validation item".into()));
    }
    let start = Instant::now();
    let beam = BeamConfig {
        beam: 1,
        max_len,
        length_normalize: true,
    };
    let decodes: Vec<Vec<usize>> = decode_items(net, store, items, &beam)?.into_iter().map(|d| d.ids).collect();
    let refs: Vec<Vec<Vec<usize>>> = items.iter().map(|i| i.refs.clone()).collect();
    let metrics = MetricReport::compute(&decodes, &refs, variant)?;
    let loss = token_stats(net, store, &reference_examples(items))?.loss;
    let reward = mode.reward(&metrics, loss);
    if !reward.is_finite() {
        return Err(Error::Divergence(format!("child `{}` produced reward {reward}", net.genotype)));
    }
    Ok(CandidateReport {
        index: 0,
        genotype: net.genotype.clone(),
        macro_config: MacroConfig::default(),
        reward_mode: mode,
        reward,
        metrics,
        loss,
        params: net.param_count(),
        decodes,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Index of the best report under `mode`: highest reward, then fewer
/// parameters, then earlier sample index.
pub fn select_best(reports: &[CandidateReport], mode: RewardMode) -> Option<usize> {
    (0..reports.len()).min_by(|&a, &b| {
        let (ra, rb) = (&reports[a], &reports[b]);
        rb.reward_under(mode)
            .total_cmp(&ra.reward_under(mode))
            .then(ra.params.cmp(&rb.params))
            .then(ra.index.cmp(&rb.index))
    })
}

/// Controller, banks and bookkeeping carried between epochs.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub controller: Controller,
    pub banks: BankSet,
    pub bank_optimizers: BTreeMap<BankKey, Optimizer>,
    pub baseline: f64,
    pub epochs_done: usize,
    pub vocab: usize,
    pub feature_dim: usize,
}

fn bank_rng(seed: u64, key: BankKey) -> SeededRng {
    SeededRng::derive(seed, &[0xba4c, key.0 as u64, key.1 as u64, u64::from(key.2)])
}

impl SearchState {
    pub fn new(cfg: &SearchConfig, vocab: usize, feature_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let macro_space = cfg.search_macro.then(|| cfg.macro_space.clone());
        let controller = Controller::new(
            cfg.controller.clone(),
            cfg.macro_config.n_blocks,
            macro_space,
            cfg.macro_config.celu_alpha,
            &mut SeededRng::derive(cfg.seed, &[0xc7a1]),
        )?;
        let mut state = Self {
            controller,
            banks: BankSet::default(),
            bank_optimizers: BTreeMap::new(),
            baseline: 0.0,
            epochs_done: 0,
            vocab,
            feature_dim,
        };
        state.ensure_bank(cfg, &state.layout(cfg, &cfg.macro_config))?;
        Ok(state)
    }

    pub fn layout(&self, cfg: &SearchConfig, m: &MacroConfig) -> BankLayout {
        BankLayout::new(m, cfg.semantics, self.vocab, self.feature_dim)
    }

    fn ensure_bank(&mut self, cfg: &SearchConfig, layout: &BankLayout) -> Result<BankKey> {
        let key = layout.key();
        self.banks.get_or_init(layout, &mut bank_rng(cfg.seed, key))?;
        if !self.bank_optimizers.contains_key(&key) {
            let opt = Optimizer::new(OptimConfig::adam(cfg.omega_clip), &self.banks.banks[&key].store);
            self.bank_optimizers.insert(key, opt);
        }
        Ok(key)
    }

    /// Combined checksum of every bank, in signature order.
    pub fn omega_checksum(&self) -> u64 {
        self.banks
            .banks
            .values()
            .fold(0xcbf29ce484222325u64, |h, b| (h ^ b.store.checksum()).wrapping_mul(0x100000001b3))
    }

    pub fn theta_checksum(&self) -> u64 {
        self.controller.store.checksum()
    }

    /// Child network for a trace, with the bank it reads.
    pub fn child(&self, cfg: &SearchConfig, trace: &SampleTrace) -> Result<(CaptionNet, &SharedParamBank)> {
        let m = cfg.macro_for(trace);
        let layout = self.layout(cfg, &m);
        let bank = self
            .banks
            .banks
            .get(&layout.key())
            .ok_or_else(|| Error::MissingParam(BankSet::stem(layout.key())))?;
        Ok((bank.child(trace.genotype.clone())?, bank))
    }

    fn score(
        &self,
        cfg: &SearchConfig,
        trace: &SampleTrace,
        items: &[EvalItem],
        data: &PreparedData,
        tune_seed: u64,
    ) -> Result<CandidateReport> {
        let (net, bank) = self.child(cfg, trace)?;
        let mut report = if cfg.child_eval_steps == 0 {
            evaluate_child(&net, &bank.store, items, cfg.reward_mode, cfg.cider_variant, cfg.max_len)?
        } else {
            let mut store = net.extract(&bank.store)?;
            let mut opt = Optimizer::new(OptimConfig::adam(cfg.omega_clip), &store);
            let smoothing = cfg.macro_for(trace).label_smoothing;
            let batches = batch_iter(&data.train, cfg.batch_size, tune_seed, 0);
            for batch in batches.iter().cycle().take(cfg.child_eval_steps) {
                let mut tape = Tape::new();
                let out = net.forward(&mut tape, &store, batch, None, smoothing, batch.target_count().max(1.0), None)?;
                let grads = tape.backward(out.loss)?;
                opt.step(&mut store, &grads, cfg.omega_lr)?;
            }
            evaluate_child(&net, &store, items, cfg.reward_mode, cfg.cider_variant, cfg.max_len)?
        };
        report.macro_config = cfg.macro_for(trace);
        Ok(report)
    }

    /// Phase 1: one ω step per training batch, each on a freshly sampled child.
    fn omega_phase(&mut self, cfg: &SearchConfig, data: &PreparedData, epoch: usize, log: &mut dyn FnMut(SearchEvent) -> Result<()>) -> Result<()> {
        let mut start = SearchEvent::new(epoch, Phase::Omega, EventKind::PhaseStart, 0, self.baseline);
        start.theta_checksum = Some(self.theta_checksum());
        start.omega_checksum = Some(self.omega_checksum());
        log(start)?;
        let batches = batch_iter(&data.train, cfg.batch_size, cfg.seed, epoch as u64);
        let steps = cfg.omega_steps.unwrap_or(batches.len());
        let mut rng = SeededRng::derive(cfg.seed, &[0x0e6a, epoch as u64]);
        let policy = self.controller.config.policy;
        for (step, batch) in batches.iter().cycle().take(steps).enumerate() {
            let trace = self.controller.sample(&mut rng, policy)?;
            let m = cfg.macro_for(&trace);
            let key = self.ensure_bank(cfg, &self.layout(cfg, &m))?;
            let bank = self.banks.banks.get_mut(&key).expect("ensured");
            let net = bank.child(trace.genotype.clone())?;
            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &bank.store, batch, None, m.label_smoothing, batch.target_count().max(1.0), None)?;
            let loss = tape.value(&out.loss).item();
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "ω loss {loss} at epoch {epoch} step {step} for `{}`",
                    trace.genotype
                )));
            }
            let grads = tape.backward(out.loss)?;
            let opt = self.bank_optimizers.get_mut(&key).expect("ensured");
            opt.step(&mut bank.store, &grads, cfg.omega_lr)?;
            let mut ev = SearchEvent::new(epoch, Phase::Omega, EventKind::Train, step, self.baseline);
            ev.genotype = Some(trace.genotype);
            ev.macro_choices = trace.macro_choices;
            ev.loss = Some(loss);
            log(ev)?;
        }
        let mut end = SearchEvent::new(epoch, Phase::Omega, EventKind::PhaseEnd, steps, self.baseline);
        end.theta_checksum = Some(self.theta_checksum());
        end.omega_checksum = Some(self.omega_checksum());
        log(end)
    }

    /// Phase 2: REINFORCE on rewards from a validation subsample.
    fn theta_phase(&mut self, cfg: &SearchConfig, data: &PreparedData, epoch: usize, log: &mut dyn FnMut(SearchEvent) -> Result<()>) -> Result<()> {
        let mut start = SearchEvent::new(epoch, Phase::Theta, EventKind::PhaseStart, 0, self.baseline);
        start.theta_checksum = Some(self.theta_checksum());
        start.omega_checksum = Some(self.omega_checksum());
        log(start)?;
        let mut order: Vec<usize> = (0..data.val.len()).collect();
        SeededRng::derive(cfg.seed, &[0x7e7a, epoch as u64]).shuffle(&mut order);
        order.truncate(cfg.reward_subsample);
        order.sort_unstable();
        let items: Vec<EvalItem> = order.iter().map(|&i| data.val[i].clone()).collect();
        let mut rng = SeededRng::derive(cfg.seed, &[0x7e7a, epoch as u64, 1]);
        let n = self.controller.config.traces_per_update;
        let policy = self.controller.config.policy;
        for update in 0..cfg.theta_updates {
            let traces = self.controller.sample_many(&mut rng, n, policy, false)?;
            // Children whose macro signature has no bank yet get one now, so
            // scoring below only reads.
            for t in &traces {
                self.ensure_bank(cfg, &self.layout(cfg, &cfg.macro_for(t)))?;
            }
            let state = &*self;
            let reports: Vec<CandidateReport> = traces
                .par_iter()
                .enumerate()
                .map(|(k, t)| {
                    let tune = SeededRng::derive(cfg.seed, &[0xc41d, epoch as u64, update as u64, k as u64]).next_u64();
                    state.score(cfg, t, &items, data, tune)
                })
                .collect::<Result<_>>()?;
            let rewards: Vec<f64> = reports.iter().map(|r| r.reward).collect();
            for (t, r) in traces.iter().zip(&rewards) {
                let mut ev = SearchEvent::new(epoch, Phase::Theta, EventKind::Reward, update, self.baseline);
                ev.genotype = Some(t.genotype.clone());
                ev.macro_choices = t.macro_choices.clone();
                ev.reward = Some(*r);
                log(ev)?;
            }
            let stats = self.controller.reinforce_update(&traces, &rewards, self.baseline)?;
            let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
            self.baseline = cfg.baseline_decay * self.baseline + (1.0 - cfg.baseline_decay) * mean;
            let mut ev = SearchEvent::new(epoch, Phase::Theta, EventKind::Update, update, self.baseline);
            ev.loss = Some(stats.loss);
            ev.reward = Some(mean);
            log(ev)?;
        }
        let mut end = SearchEvent::new(epoch, Phase::Theta, EventKind::PhaseEnd, cfg.theta_updates, self.baseline);
        end.theta_checksum = Some(self.theta_checksum());
        end.omega_checksum = Some(self.omega_checksum());
        log(end)
    }

    /// Runs one full epoch (both phases).
    pub fn run_epoch(&mut self, cfg: &SearchConfig, data: &PreparedData, log: &mut dyn FnMut(SearchEvent) -> Result<()>) -> Result<()> {
        let epoch = self.epochs_done;
        self.omega_phase(cfg, data, epoch, log)?;
        self.theta_phase(cfg, data, epoch, log)?;
        self.epochs_done += 1;
        Ok(())
    }

    /// Samples `cfg.derive_samples` children and scores each on all of `items`.
    pub fn derive_candidates(&self, cfg: &SearchConfig, items: &[EvalItem], data: &PreparedData) -> Result<Vec<CandidateReport>> {
        let mut rng = SeededRng::derive(cfg.seed, &[0xde71]);
        let traces = self
            .controller
            .sample_many(&mut rng, cfg.derive_samples, self.controller.config.policy, false)?;
        for t in &traces {
            let key = self.layout(cfg, &cfg.macro_for(t)).key();
            if !self.banks.banks.contains_key(&key) {
                return Err(Error::MissingParam(format!("{} (signature never trained)", BankSet::stem(key))));
            }
        }
        traces
            .par_iter()
            .enumerate()
            .map(|(k, t)| {
                let tune = SeededRng::derive(cfg.seed, &[0xde71, k as u64]).next_u64();
                let mut r = self.score(cfg, t, items, data, tune)?;
                r.index = k;
                Ok(r)
            })
            .collect()
    }
}

/// Result of the derive step.
#[derive(Clone, Debug, PartialEq)]
pub struct Derived {
    pub best: usize,
    pub candidates: Vec<CandidateReport>,
    pub spec: GenotypeSpec,
}

/// Samples and scores candidates on the full validation set and picks the best.
pub fn derive(state: &SearchState, cfg: &SearchConfig, data: &PreparedData) -> Result<Derived> {
    let candidates = state.derive_candidates(cfg, &data.val, data)?;
    let best = select_best(&candidates, cfg.reward_mode).expect("derive_samples is positive");
    let c = &candidates[best];
    let spec = GenotypeSpec {
        genotype: c.genotype.clone(),
        macro_config: c.macro_config.clone(),
        semantics: cfg.semantics,
    };
    Ok(Derived { best, candidates, spec })
}

/// Candidate table sorted by reward (best first, same order as
/// [`select_best`]).
pub fn candidates_csv(candidates: &[CandidateReport], mode: RewardMode) -> String {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&candidates[a], &candidates[b]);
        rb.reward_under(mode)
            .total_cmp(&ra.reward_under(mode))
            .then(ra.params.cmp(&rb.params))
            .then(ra.index.cmp(&rb.index))
    });
    let mut out = format!("rank,index,genotype,reward,loss,params,{}\n", MetricReport::csv_header());
    for (rank, &i) in order.iter().enumerate() {
        let c = &candidates[i];
        out.push_str(&format!(
            "{},{},\"{}\",{},{},{},{}\n",
            rank + 1,
            c.index,
            c.genotype,
            c.reward_under(mode),
            c.loss,
            c.params,
            c.metrics.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        ));
    }
    out
}

#[cfg(test)]
mod tests;
