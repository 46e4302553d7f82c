//! Caption preprocessing, vocabulary, the synthetic scene task, caption JSON
//! ingestion and batching.

mod batch;
mod karpathy;
mod synth;
mod text;
pub mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use batch::{batch_iter, Batch};
pub use karpathy::{attach_features, export_karpathy_json, ingest_karpathy_json, parse_karpathy_json};
pub use synth::{synth_generate, Scene, SyntheticSceneSpec};
pub use text::preprocess_caption;
pub use vocab::{EncodedCaption, Vocabulary, BOS, EOS, MAX_CAPTION_TOKENS, PAD, UNK};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawCaptionRecord {
    pub image_id: String,
    pub split: Split,
    pub captions: Vec<String>,
    pub feature: Option<Vec<f64>>,
}

/// 80/10/10 split from the first eight bytes of `sha256(image_id)`.
pub fn split_for_id(image_id: &str) -> Split {
    let digest = Sha256::digest(image_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    match u64::from_be_bytes(head) % 100 {
        0..=79 => Split::Train,
        80..=89 => Split::Val,
        _ => Split::Test,
    }
}

/// One training caption: `BOS … EOS` ids plus its image feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub image_id: String,
    pub ids: Vec<usize>,
    pub feature: Vec<f64>,
}

impl EncodedExample {
    /// Interior length (tokens between BOS and EOS).
    pub fn length(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }
}

/// One image for evaluation with all of its references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub image_id: String,
    pub feature: Vec<f64>,
    /// Interior ids of every reference (UNK-mapped, truncated).
    pub refs: Vec<Vec<usize>>,
}

impl EvalItem {
    /// Every reference as a framed `BOS … EOS` example.
    pub fn examples(&self) -> impl Iterator<Item = EncodedExample> + '_ {
        self.refs.iter().map(|r| {
            let mut ids = Vec::with_capacity(r.len() + 2);
            ids.push(BOS);
            ids.extend_from_slice(r);
            ids.push(EOS);
            EncodedExample {
                image_id: self.image_id.clone(),
                ids,
                feature: self.feature.clone(),
            }
        })
    }
}

pub fn reference_examples(items: &[EvalItem]) -> Vec<EncodedExample> {
    items.iter().flat_map(EvalItem::examples).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    pub captions: usize,
    pub empty_captions: usize,
    pub truncated: usize,
    pub vocab_size: usize,
    pub per_split: BTreeMap<String, usize>,
}

/// Encoded train examples plus grouped val/test items.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub train: Vec<EncodedExample>,
    pub train_items: Vec<EvalItem>,
    pub val: Vec<EvalItem>,
    pub test: Vec<EvalItem>,
    pub feature_dim: usize,
    pub stats: CorpusStats,
}

impl PreparedData {
    pub fn items(&self, split: Split) -> &[EvalItem] {
        match split {
            Split::Train => &self.train_items,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Tokenizes every record, builds the vocabulary from training captions and
/// encodes all splits. Every record must carry a feature of one common width.
pub fn prepare(records: &[RawCaptionRecord], min_count: usize) -> Result<PreparedData> {
    let mut stats = CorpusStats {
        records: records.len(),
        ..CorpusStats::default()
    };
    let mut feature_dim = None;
    let mut tokenized: Vec<(&RawCaptionRecord, Vec<Vec<String>>)> = Vec::with_capacity(records.len());
    for r in records {
        if r.captions.is_empty() {
            return Err(Error::Data(format!("image {}: no captions", r.image_id)));
        }
        let f = r.feature.as_ref().ok_or_else(|| {
            Error::Data(format!("image {}: no feature vector (missing sidecar entry)", r.image_id))
        })?;
        match feature_dim {
            None => feature_dim = Some(f.len()),
            Some(d) if d != f.len() => {
                return Err(Error::Data(format!(
                    "image {}: feature width {} differs from {d}",
                    r.image_id,
                    f.len()
                )))
            }
            _ => {}
        }
        *stats.per_split.entry(r.split.name().to_string()).or_default() += 1;
        let mut caps = Vec::with_capacity(r.captions.len());
        for c in &r.captions {
            stats.captions += 1;
            let toks = preprocess_caption(c);
            if toks.is_empty() {
                stats.empty_captions += 1;
                continue;
            }
            if toks.len() > MAX_CAPTION_TOKENS {
                stats.truncated += 1;
            }
            caps.push(toks);
        }
        tokenized.push((r, caps));
    }
    let vocab = Vocabulary::build(
        tokenized
            .iter()
            .filter(|(r, _)| r.split == Split::Train)
            .flat_map(|(_, caps)| caps.iter().map(Vec::as_slice)),
        min_count,
    )?;
    stats.vocab_size = vocab.len();

    let mut train = Vec::new();
    let (mut train_items, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (r, caps) in &tokenized {
        if caps.is_empty() {
            continue;
        }
        let feature = r.feature.clone().unwrap_or_default();
        let encoded: Vec<EncodedCaption> = caps.iter().map(|c| vocab.encode(c, MAX_CAPTION_TOKENS)).collect();
        if r.split == Split::Train {
            train.extend(encoded.iter().map(|e| EncodedExample {
                image_id: r.image_id.clone(),
                ids: e.ids.clone(),
                feature: feature.clone(),
            }));
        }
        let item = EvalItem {
            image_id: r.image_id.clone(),
            feature,
            refs: encoded.into_iter().map(|e| e.ids[1..e.ids.len() - 1].to_vec()).collect(),
        };
        match r.split {
            Split::Train => train_items.push(item),
            Split::Val => val.push(item),
            Split::Test => test.push(item),
        }
    }
    if train.is_empty() {
        return Err(Error::Data("no training captions after preprocessing".into()));
    }
    Ok(PreparedData {
        vocab,
        train,
        train_items,
        val,
        test,
        feature_dim: feature_dim.unwrap_or(0),
        stats,
    })
}
