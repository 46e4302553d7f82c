//! Run configuration: JSON file, named profiles and dot-path overrides.

use std::path::{Path, PathBuf};

use autornn::controller::ControllerConfig;
use autornn::datapipe::SyntheticSceneSpec;
use autornn::evalgen::{BeamConfig, CiderVariant, ScstConfig, DEFAULT_MAX_LEN};
use autornn::genotype::{MacroConfig, NodeSemantics};
use autornn::numkernel::LrSchedule;
use autornn::search::SearchConfig;
use autornn::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable that relative data paths are resolved against.
pub const DATA_ROOT_ENV: &str = "AUTORNN_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Synthetic,
    KarpathyJson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Desk scale on the synthetic task.
    Toy,
    /// Batch 50, warmup 10000, 100 epochs, 512-wide gated cells on real data.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticSceneSpec,
    /// Number of synthetic images to generate.
    pub images: usize,
    /// Caption JSON in the Karpathy split schema.
    pub karpathy_json: Option<PathBuf>,
    /// Directory holding the feature sidecar `<feature_stem>.bin/.json`.
    pub features: Option<PathBuf>,
    pub feature_stem: String,
    pub min_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScstStage {
    pub enabled: bool,
    #[serde(flatten)]
    pub config: ScstConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_normalize: bool,
    pub cider_variant: CiderVariant,
}

impl EvalConfig {
    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam: self.beam,
            max_len: self.max_len,
            length_normalize: self.length_normalize,
        }
    }
}

/// Everything a pipeline run depends on. The top-level `seed` is copied into
/// every stage, so stage-level `seed` keys are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub work_dir: PathBuf,
    pub data: DataConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub scst: ScstStage,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self::toy(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn toy() -> Self {
        Self {
            task: Task::Synthetic,
            seed: 0,
            work_dir: PathBuf::from("runs/toy"),
            data: DataConfig {
                synthetic: SyntheticSceneSpec::default(),
                images: 600,
                karpathy_json: None,
                features: None,
                feature_stem: "features".into(),
                min_count: 1,
            },
            search: SearchConfig {
                epochs: 30,
                omega_lr: 1e-2,
                ..SearchConfig::default()
            },
            train: TrainConfig {
                epochs: 60,
                ..TrainConfig::default()
            },
            scst: ScstStage {
                enabled: false,
                config: ScstConfig::default(),
            },
            eval: EvalConfig {
                beam: 3,
                max_len: DEFAULT_MAX_LEN,
                length_normalize: true,
                cider_variant: CiderVariant::CiderD,
            },
        }
    }

    pub fn paper() -> Self {
        let mut c = Self::toy();
        c.task = Task::KarpathyJson;
        c.work_dir = PathBuf::from("runs/paper");
        c.data.karpathy_json = Some(PathBuf::from("dataset_coco.json"));
        c.data.features = Some(PathBuf::from("features"));
        c.data.min_count = 5;
        c.search.macro_config = MacroConfig::default();
        c.search.semantics = NodeSemantics::Gated;
        c.search.controller = ControllerConfig::default();
        c.search.batch_size = 50;
        c.train = TrainConfig {
            epochs: 100,
            batch_size: 50,
            schedule: LrSchedule::Noam {
                model_dim: 512,
                warmup: 10_000,
                factor: 1.0,
            },
            ..TrainConfig::default()
        };
        c.scst = ScstStage {
            enabled: true,
            config: ScstConfig {
                batch_size: 50,
                ..ScstConfig::default()
            },
        };
        c
    }

    /// Builds a configuration from a profile, an optional JSON file merged on
    /// top of it, and `key.path=value` overrides, in that order.
    pub fn resolve(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::profile(profile)).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            if patch.get("seed").is_none() {
                return Err(CliError::Usage(format!("config {} must set `seed`", path.display())));
            }
            merge(&mut value, patch);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        cfg.search.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.scst.config.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: &str| Err(CliError::Usage(m.into()));
        if self.train.batch_size == 0 || self.search.batch_size == 0 || self.scst.config.batch_size == 0 {
            return usage("batch sizes must be at least 1");
        }
        if self.eval.beam == 0 {
            return usage("eval.beam must be at least 1");
        }
        if self.data.images == 0 && self.task == Task::Synthetic {
            return usage("data.images must be at least 1");
        }
        self.search.validate().map_err(CliError::from)?;
        Ok(())
    }

    /// Checks that every input path exists, resolving relative ones against
    /// the data root.
    pub fn input_paths(&self) -> Result<Vec<PathBuf>, CliError> {
        if self.task == Task::Synthetic {
            return Ok(Vec::new());
        }
        let json = self
            .data
            .karpathy_json
            .as_ref()
            .ok_or_else(|| CliError::Usage("task karpathy_json needs data.karpathy_json".into()))?;
        let mut out = vec![data_path(json)];
        if let Some(dir) = &self.data.features {
            let dir = data_path(dir);
            out.push(dir.join(format!("{}.bin", self.data.feature_stem)));
            out.push(dir.join(format!("{}.json", self.data.feature_stem)));
        }
        for p in &out {
            if !p.is_file() {
                return Err(CliError::Data(format!("input {} does not exist", p.display())));
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// SHA-256 of the canonical JSON form, leaving out `work_dir` so the
    /// same configuration hashes alike wherever it runs.
    pub fn hash(&self) -> String {
        let located = Self {
            work_dir: PathBuf::new(),
            ..self.clone()
        };
        hex(&Sha256::digest(located.to_json().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolves `p` against `$AUTORNN_DATA_ROOT` when relative.
pub fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is read as JSON when it parses,
/// otherwise as a string. The key path must already exist.
pub fn apply_override(value: &mut Value, text: &str) -> Result<(), CliError> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{text}` is not key=value")))?;
    let mut slot = &mut *value;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(key))
            .ok_or_else(|| CliError::Usage(format!("unknown configuration key `{path}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_round_trip() {
        for p in [Profile::Toy, Profile::Paper] {
            let c = RunConfig::profile(p);
            let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn paper_profile_keeps_the_published_schedule() {
        let c = RunConfig::paper();
        assert_eq!(c.train.batch_size, 50);
        assert_eq!(c.train.epochs, 100);
        assert!(matches!(c.train.schedule, LrSchedule::Noam { warmup: 10_000, .. }));
        assert_eq!(c.scst.config.lr, 1e-5);
    }

    #[test]
    fn overrides_follow_dot_paths() {
        let c = RunConfig::resolve(
            Profile::Toy,
            None,
            &[
                "search.epochs=5".into(),
                "train.schedule.warmup=7".into(),
                "work_dir=/tmp/x".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.search.epochs, 5);
        assert!(matches!(c.train.schedule, LrSchedule::Noam { warmup: 7, .. }));
        assert_eq!(c.work_dir, PathBuf::from("/tmp/x"));
        assert_eq!((c.search.seed, c.train.seed), (9, 9));
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        for o in ["search.epoch=5", "nonsense", "train.batch_size=0", "search.epochs=\"x\""] {
            let err = RunConfig::resolve(Profile::Toy, None, &[o.into()]).unwrap_err();
            assert!(matches!(err, CliError::Usage(_)), "{o}: {err:?}");
        }
    }

    #[test]
    fn config_files_must_set_a_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"search": {"epochs": 1}}"#).unwrap();
        assert!(RunConfig::resolve(Profile::Toy, Some(&path), &[]).is_err());
        std::fs::write(&path, r#"{"seed": 4, "search": {"epochs": 1}}"#).unwrap();
        let c = RunConfig::resolve(Profile::Toy, Some(&path), &[]).unwrap();
        assert_eq!((c.seed, c.search.epochs, c.search.batch_size), (4, 1, 16));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.work_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
