//! On-disk form of a prepared dataset: vocabulary, encoded splits, split
//! listing and corpus statistics.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use autornn::datapipe::{
    ingest_karpathy_json, prepare, synth_generate, CorpusStats, EncodedExample, EvalItem, PreparedData,
    RawCaptionRecord, Vocabulary,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{data_path, RunConfig, Task};
use crate::CliError;

pub const VOCAB_FILE: &str = "vocab.json";
pub const STATS_FILE: &str = "stats.json";
pub const SPLITS_FILE: &str = "splits.tsv";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TRAIN_ITEMS_FILE: &str = "train_items.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

#[derive(Serialize, Deserialize)]
struct StatsFile {
    feature_dim: usize,
    min_count: usize,
    #[serde(flatten)]
    stats: CorpusStats,
}

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.work_dir.join("data")
}

/// Raw records for the configured task.
pub fn load_records(cfg: &RunConfig) -> Result<Vec<RawCaptionRecord>, CliError> {
    match cfg.task {
        Task::Synthetic => Ok(synth_generate(&cfg.data.synthetic, cfg.data.images, cfg.seed)?),
        Task::KarpathyJson => {
            cfg.input_paths()?;
            let json = data_path(cfg.data.karpathy_json.as_deref().expect("checked by input_paths"));
            let features = cfg.data.features.as_deref().map(data_path);
            let sidecar = features.as_deref().map(|d| (d, cfg.data.feature_stem.as_str()));
            Ok(ingest_karpathy_json(&json, sidecar)?)
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(autornn::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = fs::File::open(path).map_err(|e| missing(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let row = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), k + 1)))?;
        out.push(row);
    }
    Ok(out)
}

fn missing(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e} (run `autornn preprocess` first?)", path.display()))
}

/// Writes every file of a prepared dataset and returns their paths.
pub fn save_prepared(data: &PreparedData, records: &[RawCaptionRecord], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = [VOCAB_FILE, STATS_FILE, SPLITS_FILE, TRAIN_FILE, TRAIN_ITEMS_FILE, VAL_FILE, TEST_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    fs::write(&paths[0], data.vocab.to_json()?)?;
    let stats = StatsFile {
        feature_dim: data.feature_dim,
        min_count: data.vocab.min_count(),
        stats: data.stats.clone(),
    };
    fs::write(
        &paths[1],
        serde_json::to_string_pretty(&stats).map_err(autornn::Error::from)? + "\n",
    )?;
    let mut splits = String::from("image_id\tsplit\n");
    for r in records {
        splits.push_str(&format!("{}\t{}\n", r.image_id, r.split.name()));
    }
    fs::write(&paths[2], splits)?;
    write_jsonl(&paths[3], &data.train)?;
    write_jsonl(&paths[4], &data.train_items)?;
    write_jsonl(&paths[5], &data.val)?;
    write_jsonl(&paths[6], &data.test)?;
    Ok(paths)
}

pub fn load_prepared(dir: &Path) -> Result<PreparedData, CliError> {
    let stats_path = dir.join(STATS_FILE);
    let text = fs::read_to_string(&stats_path).map_err(|e| missing(&stats_path, e))?;
    let stats: StatsFile =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", stats_path.display())))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| missing(&vocab_path, e))?;
    let vocab = Vocabulary::from_json(&vocab_text, stats.min_count)?;
    let train: Vec<EncodedExample> = read_jsonl(&dir.join(TRAIN_FILE))?;
    let train_items: Vec<EvalItem> = read_jsonl(&dir.join(TRAIN_ITEMS_FILE))?;
    let val: Vec<EvalItem> = read_jsonl(&dir.join(VAL_FILE))?;
    let test: Vec<EvalItem> = read_jsonl(&dir.join(TEST_FILE))?;
    Ok(PreparedData {
        vocab,
        train,
        train_items,
        val,
        test,
        feature_dim: stats.feature_dim,
        stats: stats.stats,
    })
}

/// Reads raw data and prepares it, without touching the disk.
pub fn prepare_from_config(cfg: &RunConfig) -> Result<(PreparedData, Vec<RawCaptionRecord>), CliError> {
    let records = load_records(cfg)?;
    let data = prepare(&records, cfg.data.min_count)?;
    Ok((data, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepared_data_round_trips() {
        let mut cfg = RunConfig::toy();
        cfg.data.images = 60;
        let (data, records) = prepare_from_config(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_prepared(&data, &records, dir.path()).unwrap();
        assert_eq!(load_prepared(dir.path()).unwrap(), data);
    }

    #[test]
    fn missing_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_prepared(dir.path()), Err(CliError::Data(_))));
    }
}
