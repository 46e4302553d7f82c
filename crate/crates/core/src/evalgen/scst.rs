//! Self-critical sequence training: REINFORCE on sampled captions with the
//! model's own greedy decode as the baseline.

use serde::{Deserialize, Serialize};

use super::decode::{greedy_decode_batch, sample_decode_batch, StepModel, DEFAULT_MAX_LEN};
use super::metrics::{CiderScorer, CiderVariant};
use crate::datapipe::{Batch, EncodedExample, EvalItem};
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, OptimConfig, Optimizer, ParamStore, SeededRng, Tape, Var};

/// A trainable captioner: a decoder view for generation plus a
/// teacher-forced loss for gradients.
pub trait Captioner {
    type Decoder<'a>: StepModel
    where
        Self: 'a;

    fn decoder(&self) -> Self::Decoder<'_>;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// `Σ_r row_weights[r] · Σ_t mask·CE(r, t) / normalizer` under teacher forcing.
    fn sequence_loss(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        row_weights: &[f64],
        smoothing: f64,
        normalizer: f64,
    ) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScstConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub cider_variant: CiderVariant,
    pub clip_norm: Option<f64>,
}

impl Default for ScstConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 1,
            batch_size: 16,
            max_len: DEFAULT_MAX_LEN,
            seed: 0,
            cider_variant: CiderVariant::CiderD,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScstStep {
    pub epoch: usize,
    pub step: usize,
    pub sample_reward: f64,
    pub greedy_reward: f64,
    pub updated: bool,
}

/// Reward of a decode (interior ids) for item `index`.
pub type RewardFn<'r> = dyn Fn(usize, &[usize]) -> f64 + 'r;

/// CIDEr scorer with idf frozen from the references of `items`.
pub fn cider_scorer(items: &[EvalItem], variant: CiderVariant) -> Result<CiderScorer<'_, usize>> {
    let scorer = CiderScorer::new(items.iter().map(|i| i.refs.as_slice()), variant);
    if scorer.is_degenerate() {
        return Err(Error::DegenerateReward(format!(
            "CIDEr needs at least 2 images with references to have nonzero idf, got {}; enlarge the corpus",
            items.len()
        )));
    }
    Ok(scorer)
}

pub fn features_of(items: &[&EvalItem]) -> Matrix {
    let dim = items.first().map_or(0, |i| i.feature.len());
    let mut m = Matrix::zeros(items.len(), dim);
    for (r, item) in items.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&item.feature);
    }
    m
}

/// Fine-tunes `model` on `items` with self-critical REINFORCE.
pub fn scst_finetune<C: Captioner>(
    model: &mut C,
    items: &[EvalItem],
    reward: &RewardFn,
    cfg: &ScstConfig,
) -> Result<Vec<ScstStep>> {
    if items.is_empty() {
        return Err(Error::Data("self-critical training needs at least one item".into()));
    }
    let mut opt = Optimizer::new(OptimConfig::adam(cfg.clip_norm), model.params());
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        SeededRng::derive(cfg.seed, &[0x5c57, epoch as u64, 0]).shuffle(&mut order);
        let mut rng = SeededRng::derive(cfg.seed, &[0x5c57, epoch as u64, 1]);
        for (step, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch_items: Vec<&EvalItem> = chunk.iter().map(|&i| &items[i]).collect();
            let feats = features_of(&batch_items);
            let (samples, greedy, bos, eos) = {
                let dec = model.decoder();
                let s = sample_decode_batch(&dec, &feats, cfg.max_len, &mut rng)?;
                let g = greedy_decode_batch(&dec, &feats, cfg.max_len)?;
                (s, g, dec.bos(), dec.eos())
            };
            let rs: Vec<f64> = chunk.iter().zip(&samples).map(|(&i, d)| reward(i, &d.ids)).collect();
            let rg: Vec<f64> = chunk.iter().zip(&greedy).map(|(&i, d)| reward(i, &d.ids)).collect();
            if let Some(bad) = rs.iter().chain(&rg).find(|r| !r.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite reward {bad}")));
            }
            let adv: Vec<f64> = rs.iter().zip(&rg).map(|(s, g)| s - g).collect();
            let n = chunk.len() as f64;
            let updated = adv.iter().any(|&a| a != 0.0);
            if updated {
                let examples: Vec<EncodedExample> = batch_items
                    .iter()
                    .zip(&samples)
                    .map(|(item, d)| EncodedExample {
                        image_id: item.image_id.clone(),
                        ids: d.framed(bos, eos),
                        feature: item.feature.clone(),
                    })
                    .collect();
                let refs: Vec<&EncodedExample> = examples.iter().collect();
                let batch = Batch::from_examples(&refs);
                let mut tape = Tape::new();
                let loss = model.sequence_loss(&mut tape, &batch, &adv, 0.0, n)?;
                let grads = tape.backward(loss)?;
                opt.step(model.params_mut(), &grads, cfg.lr)?;
            }
            log.push(ScstStep {
                epoch,
                step,
                sample_reward: rs.iter().sum::<f64>() / n,
                greedy_reward: rg.iter().sum::<f64>() / n,
                updated,
            });
        }
    }
    Ok(log)
}
