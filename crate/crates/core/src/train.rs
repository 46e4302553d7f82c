//! Cross-entropy training and evaluation of a standalone captioner.

use serde::{Deserialize, Serialize};

use crate::datapipe::{batch_iter, Batch, EncodedExample, EvalItem};
use crate::error::{Error, Result};
use crate::evalgen::{beam_decode, features_of, greedy_decode_batch, BeamConfig, CiderVariant, Decoded, MetricReport};
use crate::numkernel::{Graph, LrSchedule, Matrix, OptimConfig, Optimizer, ParamStore, Tape};
use crate::supernet::{CaptionNet, StandaloneModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many updates even mid-epoch.
    pub max_steps: Option<usize>,
    pub schedule: LrSchedule,
    pub clip_norm: Option<f64>,
    pub label_smoothing: f64,
    /// When false, each batch starts from the previous batch's final state.
    pub init_hidden_each_epoch: bool,
    /// Validation interval in steps; 0 validates once per epoch.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            max_steps: None,
            schedule: LrSchedule::Noam {
                model_dim: 32,
                warmup: 200,
                factor: 1.0,
            },
            clip_norm: Some(5.0),
            label_smoothing: 0.0,
            init_hidden_each_epoch: true,
            eval_every: 0,
            seed: 0,
        }
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPoint {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Token-level loss (no smoothing) and argmax accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

const EVAL_CHUNK: usize = 64;

pub fn token_stats(net: &CaptionNet, store: &ParamStore, examples: &[EncodedExample]) -> Result<TokenStats> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let (mut loss, mut correct, mut total) = (0.0, 0, 0);
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&EncodedExample> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs);
        let (l, c, t) = net.token_stats(store, &batch, 0.0)?;
        loss += l * t as f64;
        correct += c;
        total += t;
    }
    let denom = total.max(1) as f64;
    Ok(TokenStats {
        loss: loss / denom,
        accuracy: correct as f64 / denom,
        tokens: total,
    })
}

/// Trains `model` with label-smoothed cross-entropy and Adam.
pub fn train_xent(
    model: &mut StandaloneModel,
    train: &[EncodedExample],
    val: Option<&[EncodedExample]>,
    cfg: &TrainConfig,
) -> Result<Vec<TrainPoint>> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut opt = Optimizer::new(OptimConfig::adam(cfg.clip_norm), &model.store);
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut carried: Option<Matrix> = None;
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    'outer: for epoch in 0..cfg.epochs {
        for batch in batch_iter(train, cfg.batch_size, cfg.seed, epoch as u64) {
            if step >= limit {
                break 'outer;
            }
            step += 1;
            let lr = cfg.schedule.lr(step as u64)?;
            let mut tape = Tape::new();
            let h0 = if cfg.init_hidden_each_epoch { None } else { carried.as_ref() };
            let out = model.net.forward(
                &mut tape,
                &model.store,
                &batch,
                None,
                cfg.label_smoothing,
                batch.target_count().max(1.0),
                h0,
            )?;
            let loss = tape.value(&out.loss).item();
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("training loss {loss} at step {step}")));
            }
            if !cfg.init_hidden_each_epoch {
                carried = Some(tape.value(&out.final_h).clone());
            }
            let grads = tape.backward(out.loss)?;
            let stats = opt.step(&mut model.store, &grads, lr)?;
            let due = cfg.eval_every != 0 && step % cfg.eval_every == 0;
            let mut point = TrainPoint {
                step,
                epoch,
                lr,
                loss,
                grad_norm: stats.grad_norm,
                val_loss: None,
                val_accuracy: None,
            };
            if due {
                if let Some(v) = val {
                    let s = token_stats(&model.net, &model.store, v)?;
                    point.val_loss = Some(s.loss);
                    point.val_accuracy = Some(s.accuracy);
                }
            }
            log.push(point);
        }
        if cfg.eval_every == 0 {
            if let (Some(v), Some(last)) = (val, log.last_mut()) {
                let s = token_stats(&model.net, &model.store, v)?;
                last.val_loss = Some(s.loss);
                last.val_accuracy = Some(s.accuracy);
            }
        }
    }
    Ok(log)
}

/// Decodes every item: greedy when `beam` is 1, beam search otherwise.
pub fn decode_items(net: &CaptionNet, store: &ParamStore, items: &[EvalItem], beam: &BeamConfig) -> Result<Vec<Decoded>> {
    let dec = net.decoder(store);
    if beam.beam <= 1 {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_CHUNK) {
            let refs: Vec<&EvalItem> = chunk.iter().collect();
            out.extend(greedy_decode_batch(&dec, &features_of(&refs), beam.max_len)?);
        }
        Ok(out)
    } else {
        items.iter().map(|i| beam_decode(&dec, &i.feature, beam)).collect()
    }
}

/// Decodes `items` and scores the decodes against their references.
pub fn evaluate_items(
    net: &CaptionNet,
    store: &ParamStore,
    items: &[EvalItem],
    beam: &BeamConfig,
    variant: CiderVariant,
) -> Result<(MetricReport, Vec<Decoded>)> {
    let decoded = decode_items(net, store, items, beam)?;
    let cands: Vec<Vec<usize>> = decoded.iter().map(|d| d.ids.clone()).collect();
    let refs: Vec<Vec<Vec<usize>>> = items.iter().map(|i| i.refs.clone()).collect();
    Ok((MetricReport::compute(&cands, &refs, variant)?, decoded))
}
