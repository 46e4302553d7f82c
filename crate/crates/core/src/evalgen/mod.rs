//! Caption metrics, decoding and self-critical fine-tuning.

mod decode;
mod metrics;
mod scst;

pub use decode::{
    beam_decode, beam_search, greedy_decode, greedy_decode_batch, sample_decode_batch, BeamConfig,
    BeamHypothesis, Decoded, StepModel, DEFAULT_MAX_LEN,
};
pub use metrics::{
    bleu, cider, rouge_l, rouge_l_pair, CiderScorer, CiderVariant, MetricReport, CIDER_SIGMA, ROUGE_BETA,
};
pub use scst::{cider_scorer, features_of, scst_finetune, Captioner, RewardFn, ScstConfig, ScstStep};
