//! Karpathy-split caption JSON (`images[].sentences[].raw`, `images[].split`)
//! with an optional feature sidecar in the checkpoint blob+manifest format,
//! one `1 x F` entry per image id.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RawCaptionRecord, Split};
use crate::error::{Error, Result};
use crate::numkernel::checkpoint::{load_store, save_store};
use crate::numkernel::{Matrix, ParamStore};

#[derive(Deserialize)]
struct KarpathyFile {
    images: Vec<KarpathyImage>,
}

#[derive(Deserialize)]
struct KarpathyImage {
    #[serde(default)]
    split: Option<String>,
    sentences: Vec<KarpathySentence>,
    #[serde(default)]
    image_id: Option<serde_json::Value>,
    #[serde(default)]
    cocoid: Option<serde_json::Value>,
    #[serde(default)]
    imgid: Option<serde_json::Value>,
    #[serde(default)]
    filename: Option<String>,
}

#[derive(Deserialize)]
struct KarpathySentence {
    raw: String,
}

#[derive(Serialize)]
struct ExportFile<'a> {
    images: Vec<ExportImage<'a>>,
}

#[derive(Serialize)]
struct ExportImage<'a> {
    image_id: &'a str,
    split: Split,
    sentences: Vec<ExportSentence<'a>>,
}

#[derive(Serialize)]
struct ExportSentence<'a> {
    raw: &'a str,
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let preceding: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    preceding + column.saturating_sub(1)
}

/// Parses caption JSON text. `restval` images count as training data.
pub fn parse_karpathy_json(text: &str) -> Result<Vec<RawCaptionRecord>> {
    let file: KarpathyFile = serde_json::from_str(text).map_err(|e| {
        Error::Data(format!(
            "malformed caption JSON at byte {}: {e}",
            byte_offset(text, e.line(), e.column())
        ))
    })?;
    let mut out = Vec::with_capacity(file.images.len());
    for (k, img) in file.images.into_iter().enumerate() {
        let image_id = img
            .image_id
            .as_ref()
            .or(img.cocoid.as_ref())
            .or(img.imgid.as_ref())
            .map(id_string)
            .or(img.filename)
            .unwrap_or_else(|| k.to_string());
        let split = match img.split.as_deref() {
            Some("train") | Some("restval") => Split::Train,
            Some("val") => Split::Val,
            Some("test") => Split::Test,
            Some(other) => {
                return Err(Error::Data(format!("image {image_id}: unknown split `{other}`")))
            }
            None => return Err(Error::Data(format!("image {image_id}: missing split field"))),
        };
        if img.sentences.is_empty() {
            return Err(Error::Data(format!("image {image_id}: no sentences")));
        }
        out.push(RawCaptionRecord {
            image_id,
            split,
            captions: img.sentences.into_iter().map(|s| s.raw).collect(),
            feature: None,
        });
    }
    Ok(out)
}

/// Reads caption JSON and, when a sidecar is given, attaches features by id.
/// Records without a sidecar entry stay feature-less.
pub fn ingest_karpathy_json(
    path: &Path,
    features: Option<(&Path, &str)>,
) -> Result<Vec<RawCaptionRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut records = parse_karpathy_json(&text)?;
    if let Some((dir, stem)) = features {
        let store = load_store(dir, stem)?;
        attach_features(&mut records, &store);
    }
    Ok(records)
}

pub fn attach_features(records: &mut [RawCaptionRecord], store: &ParamStore) {
    for r in records {
        if let Some(m) = store.get(&r.image_id) {
            r.feature = Some(m.data().to_vec());
        }
    }
}

/// Writes records in the same schema plus a feature sidecar `<stem>.bin/.json`.
pub fn export_karpathy_json(
    records: &[RawCaptionRecord],
    json_path: &Path,
    feature_dir: &Path,
    feature_stem: &str,
) -> Result<()> {
    let file = ExportFile {
        images: records
            .iter()
            .map(|r| ExportImage {
                image_id: &r.image_id,
                split: r.split,
                sentences: r.captions.iter().map(|c| ExportSentence { raw: c }).collect(),
            })
            .collect(),
    };
    if let Some(parent) = json_path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(json_path, serde_json::to_string_pretty(&file)? + "\n")?;
    let mut store = ParamStore::new();
    for r in records {
        if let Some(f) = &r.feature {
            store.insert(r.image_id.clone(), Matrix::row_vector(f.clone()))?;
        }
    }
    save_store(&store, feature_dir, feature_stem)
}
