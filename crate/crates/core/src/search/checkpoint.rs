use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EventKind, SearchConfig, SearchEvent, SearchState};
use crate::datapipe::PreparedData;
use crate::error::{Error, Result};
use crate::numkernel::checkpoint::{load_optimizer, save_optimizer};
use crate::numkernel::OptimConfig;
use crate::supernet::{BankLayout, BankSet, SharedParamBank};

pub const LOG_FILE: &str = "search_log.jsonl";
const STATE_FILE: &str = "state.json";
const CONTROLLER_STEM: &str = "controller";

#[derive(Serialize, Deserialize)]
struct StateFile {
    epochs_done: usize,
    baseline: f64,
    log_lines: usize,
    vocab: usize,
    feature_dim: usize,
    layouts: Vec<BankLayout>,
    config: SearchConfig,
}

fn epoch_dir(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:03}"))
}

/// The most recent complete epoch checkpoint under `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let root = dir.join("checkpoints");
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(root).ok()?.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.parse::<usize>().ok()) else {
            continue;
        };
        if entry.path().join(STATE_FILE).is_file() && best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    best.map(|(_, p)| p)
}

/// Everything but the epoch count must match for a resume.
fn same_run(a: &SearchConfig, b: &SearchConfig) -> bool {
    SearchConfig { epochs: 0, ..a.clone() } == SearchConfig { epochs: 0, ..b.clone() }
}

impl SearchState {
    pub fn save(&self, cfg: &SearchConfig, dir: &Path, log_lines: usize) -> Result<()> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        self.controller.save(&tmp, CONTROLLER_STEM)?;
        let mut layouts = Vec::new();
        for (key, bank) in &self.banks.banks {
            let stem = BankSet::stem(*key);
            bank.save(&tmp, &stem)?;
            save_optimizer(&self.bank_optimizers[key], &bank.store, &tmp, &format!("{stem}.adam"))?;
            layouts.push(bank.layout.clone());
        }
        let state = StateFile {
            epochs_done: self.epochs_done,
            baseline: self.baseline,
            log_lines,
            vocab: self.vocab,
            feature_dim: self.feature_dim,
            layouts,
            config: cfg.clone(),
        };
        fs::write(tmp.join(STATE_FILE), serde_json::to_string_pretty(&state)? + "\n")?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    /// Restores a checkpoint written by [`SearchState::save`]. Returns the
    /// state and the number of log lines it covers.
    pub fn load(cfg: &SearchConfig, dir: &Path) -> Result<(Self, usize)> {
        let text = fs::read_to_string(dir.join(STATE_FILE))
            .map_err(|e| Error::Data(format!("checkpoint {}: {e}", dir.display())))?;
        let file: StateFile = serde_json::from_str(&text)?;
        if !same_run(&file.config, cfg) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {} was written under a different search configuration",
                dir.display()
            )));
        }
        let mut state = SearchState::new(cfg, file.vocab, file.feature_dim)?;
        state.controller.load(dir, CONTROLLER_STEM)?;
        state.banks.banks.clear();
        state.bank_optimizers.clear();
        for layout in file.layouts {
            let key = layout.key();
            let stem = BankSet::stem(key);
            let bank = SharedParamBank::load(layout, dir, &stem)?;
            let opt = load_optimizer(OptimConfig::adam(cfg.omega_clip), &bank.store, dir, &format!("{stem}.adam"))?;
            state.banks.banks.insert(key, bank);
            state.bank_optimizers.insert(key, opt);
        }
        state.baseline = file.baseline;
        state.epochs_done = file.epochs_done;
        Ok((state, file.log_lines))
    }
}

/// Final state plus the complete event log.
#[derive(Debug)]
pub struct SearchRun {
    pub state: SearchState,
    pub events: Vec<SearchEvent>,
}

/// Runs the search to `cfg.epochs`. With `dir`, events stream to
/// `dir/search_log.jsonl` and each epoch is checkpointed under
/// `dir/checkpoints`; `resume` continues from the latest checkpoint there.
pub fn run_search_in(cfg: &SearchConfig, data: &PreparedData, dir: Option<&Path>, resume: bool) -> Result<SearchRun> {
    cfg.validate()?;
    let mut events: Vec<SearchEvent> = Vec::new();
    let mut state = None;
    let mut last_good = None;
    if let (Some(d), true) = (dir, resume) {
        if let Some(ck) = latest_checkpoint(d) {
            let (s, lines) = SearchState::load(cfg, &ck)?;
            let text = fs::read_to_string(d.join(LOG_FILE))?;
            for line in text.lines().take(lines) {
                events.push(serde_json::from_str(line)?);
            }
            if events.len() != lines {
                return Err(Error::Data(format!("search log shorter than checkpoint {}", ck.display())));
            }
            state = Some(s);
            last_good = Some(ck);
        }
    }
    let mut state = match state {
        Some(s) => s,
        None => SearchState::new(cfg, data.vocab.len(), data.feature_dim)?,
    };
    let mut writer = match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            let mut f = fs::File::create(d.join(LOG_FILE))?;
            for ev in &events {
                writeln!(f, "{}", serde_json::to_string(ev)?)?;
            }
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done;
        let mut sink = |ev: SearchEvent| -> Result<()> {
            if let Some(w) = writer.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&ev)?)?;
            }
            events.push(ev);
            Ok(())
        };
        if let Err(e) = state.run_epoch(cfg, data, &mut sink) {
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            return Err(match (e, &last_good) {
                (Error::Divergence(msg), Some(ck)) => {
                    Error::Divergence(format!("{msg}; last good checkpoint: {}", ck.display()))
                }
                (Error::Divergence(msg), None) => Error::Divergence(format!("{msg}; no checkpoint written yet")),
                (e, _) => e,
            });
        }
        log::info!(
            "search epoch {} done: baseline {:.4}, {} events",
            epoch + 1,
            state.baseline,
            events.len()
        );
        if let (Some(d), Some(w)) = (dir, writer.as_mut()) {
            w.flush()?;
            let ck = epoch_dir(d, epoch + 1);
            state.save(cfg, &ck, events.len())?;
            last_good = Some(ck);
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    Ok(SearchRun { state, events })
}

/// Recomputes the baseline after every controller update from the logged
/// per-sample rewards.
pub fn replay_baselines(events: &[SearchEvent], decay: f64) -> Vec<f64> {
    let mut b = 0.0;
    let mut pending = Vec::new();
    let mut out = Vec::new();
    for e in events {
        match e.kind {
            EventKind::Reward => pending.push(e.reward.unwrap_or(f64::NAN)),
            EventKind::Update => {
                let mean = pending.iter().sum::<f64>() / pending.len() as f64;
                b = decay * b + (1.0 - decay) * mean;
                out.push(b);
                pending.clear();
            }
            _ => {}
        }
    }
    out
}
