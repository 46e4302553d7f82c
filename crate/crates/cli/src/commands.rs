//! Subcommand implementations. Each reads the configuration and files under
//! the work directory and writes its artifacts there.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use autornn::datapipe::{reference_examples, CorpusStats, EvalItem, PreparedData, Split};
use autornn::evalgen::{cider_scorer, CiderVariant, MetricReport, ScstStep};
use autornn::genotype::{format_millions, param_count, GenotypeSpec, LstmCell, MacroConfig, NodeSemantics, ParamCount};
use autornn::numkernel::checkpoint::{load_store, save_store};
use autornn::numkernel::SeededRng;
use autornn::search::{candidates_csv, derive, latest_checkpoint, run_search_in, Derived, SearchRun, SearchState};
use autornn::supernet::{BankLayout, CaptionNet, StandaloneModel};
use autornn::train::{evaluate_items, train_xent, TrainPoint};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{data_dir, load_prepared, prepare_from_config, save_prepared};
use crate::manifest::RunManifest;
use crate::report;
use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const GENOTYPE_FILE: &str = "genotype.json";
pub const LAYOUT_FILE: &str = "layout.json";
pub const PARAMS_STEM: &str = "params";

pub fn search_dir(cfg: &RunConfig) -> PathBuf {
    cfg.work_dir.join("search")
}

pub fn derive_dir(cfg: &RunConfig) -> PathBuf {
    cfg.work_dir.join("derive")
}

pub fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.work_dir.join("train")
}

pub fn eval_dir(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.work_dir.join("eval").join(split.name())
}

fn json<T: Serialize>(value: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value).map_err(autornn::Error::from)? + "\n")
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(path.to_path_buf())
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn prepared(cfg: &RunConfig) -> Result<PreparedData, CliError> {
    load_prepared(&data_dir(cfg))
}

pub fn preprocess(cfg: &RunConfig) -> Result<CorpusStats, CliError> {
    let start = Instant::now();
    let inputs = cfg.input_paths()?;
    let (data, records) = prepare_from_config(cfg)?;
    if data.train.is_empty() {
        return Err(CliError::Data("the corpus has no training captions".into()));
    }
    let mut outputs = save_prepared(&data, &records, &data_dir(cfg))?;
    outputs.push(write(&cfg.work_dir.join(CONFIG_FILE), cfg.to_json())?);
    RunManifest::record(cfg, "preprocess", &outputs, &inputs, start.elapsed().as_secs_f64())?;
    let s = &data.stats;
    println!(
        "{} images, {} captions ({} empty, {} truncated to the length cap), vocabulary {} words",
        s.records, s.captions, s.empty_captions, s.truncated, s.vocab_size
    );
    for (split, n) in &s.per_split {
        println!("  {split}: {n} images");
    }
    Ok(data.stats)
}

pub fn search(cfg: &RunConfig, resume: bool) -> Result<SearchRun, CliError> {
    let start = Instant::now();
    let data = prepared(cfg)?;
    let dir = search_dir(cfg);
    let run = run_search_in(&cfg.search, &data, Some(&dir), resume)?;
    run.state.save(&cfg.search, &dir.join("final"), run.events.len())?;
    RunManifest::record(cfg, "search", &[dir], &[], start.elapsed().as_secs_f64())?;
    println!(
        "search finished after {} epochs, {} log records, reward baseline {:.4}",
        run.state.epochs_done,
        run.events.len(),
        run.state.baseline
    );
    Ok(run)
}

/// The final search state, or the newest epoch checkpoint.
pub fn search_checkpoint(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = search_dir(cfg);
    let fin = dir.join("final");
    if fin.join("state.json").is_file() {
        return Ok(fin);
    }
    latest_checkpoint(&dir)
        .ok_or_else(|| CliError::Data(format!("no search checkpoints under {} (run `autornn search`)", dir.display())))
}

pub fn derive_cmd(cfg: &RunConfig, k: Option<usize>) -> Result<Derived, CliError> {
    let start = Instant::now();
    let data = prepared(cfg)?;
    let (state, _) = SearchState::load(&cfg.search, &search_checkpoint(cfg)?)?;
    let mut scfg = cfg.search.clone();
    if let Some(k) = k {
        if k == 0 {
            return Err(CliError::Usage("--k must be at least 1".into()));
        }
        scfg.derive_samples = k;
    }
    let d = derive(&state, &scfg, &data)?;
    let dir = derive_dir(cfg);
    let mut lines = String::new();
    for c in &d.candidates {
        lines.push_str(&serde_json::to_string(c).map_err(autornn::Error::from)?);
        lines.push('\n');
    }
    let outputs = vec![
        write(&dir.join(GENOTYPE_FILE), d.spec.to_json()?)?,
        write(&dir.join("candidates.csv"), candidates_csv(&d.candidates, scfg.reward_mode))?,
        write(&dir.join("candidates.jsonl"), lines)?,
    ];
    RunManifest::record(cfg, "derive", &outputs, &[], start.elapsed().as_secs_f64())?;
    let best = &d.candidates[d.best];
    println!(
        "derived `{}` from {} candidates: reward {:.4}, CIDEr-D {:.4}, {} parameters",
        best.genotype,
        d.candidates.len(),
        best.reward,
        best.metrics.cider,
        best.params
    );
    Ok(d)
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub genotype: Option<PathBuf>,
    /// Start from the searched bank weights instead of a fresh init.
    pub from_bank: bool,
    /// Overrides `scst.enabled`.
    pub scst: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScstSummary {
    pub steps: usize,
    pub updates: usize,
    pub val_cider_before: f64,
    pub val_cider_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub genotype: String,
    pub params: usize,
    pub init: String,
    pub steps: usize,
    pub final_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub scst: Option<ScstSummary>,
}

pub fn load_spec(path: &Path) -> Result<GenotypeSpec, CliError> {
    Ok(GenotypeSpec::from_json(&read(path)?)?)
}

pub fn save_model(model: &StandaloneModel, spec: &GenotypeSpec, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    save_store(&model.store, dir, PARAMS_STEM)?;
    write(&dir.join(LAYOUT_FILE), json(&model.net.layout)?)?;
    write(&dir.join(GENOTYPE_FILE), spec.to_json()?)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<StandaloneModel, CliError> {
    let spec = load_spec(&dir.join(GENOTYPE_FILE))?;
    let layout: BankLayout = serde_json::from_str(&read(&dir.join(LAYOUT_FILE))?)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.join(LAYOUT_FILE).display())))?;
    let store = load_store(dir, PARAMS_STEM)?;
    let net = CaptionNet::new(layout, spec.genotype)?;
    for name in net.touched_names() {
        if store.get(&name).is_none() {
            return Err(CliError::Data(format!("model {} lacks parameter `{name}`", dir.display())));
        }
    }
    Ok(StandaloneModel { net, store })
}

/// A freshly initialised model for `spec`; every genotype gets the same init stream.
pub fn fresh_model(cfg: &RunConfig, data: &PreparedData, spec: &GenotypeSpec) -> Result<StandaloneModel, CliError> {
    let layout = BankLayout::new(&spec.macro_config, spec.semantics, data.vocab.len(), data.feature_dim);
    let net = CaptionNet::new(layout, spec.genotype.clone())?;
    Ok(StandaloneModel::fresh(net, &mut SeededRng::derive(cfg.seed, &[0x7a1e]))?)
}

/// Cross-entropy training under `cfg.train`, with the genotype's smoothing and
/// hidden-state settings.
pub fn fit(
    cfg: &RunConfig,
    data: &PreparedData,
    spec: &GenotypeSpec,
    model: &mut StandaloneModel,
) -> Result<Vec<TrainPoint>, CliError> {
    let mut tcfg = cfg.train.clone();
    tcfg.label_smoothing = spec.macro_config.label_smoothing;
    tcfg.init_hidden_each_epoch = spec.macro_config.init_hidden_each_epoch;
    let val = reference_examples(&data.val);
    Ok(train_xent(model, &data.train, Some(&val), &tcfg)?)
}

/// CIDEr of `model` on `items` under the evaluation beam settings.
pub fn cider_on(model: &StandaloneModel, items: &[EvalItem], cfg: &RunConfig) -> Result<f64, CliError> {
    let (m, _) = evaluate_items(&model.net, &model.store, items, &cfg.eval.beam_config(), cfg.eval.cider_variant)?;
    Ok(m.cider)
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let start = Instant::now();
    let data = prepared(cfg)?;
    let gpath = args.genotype.clone().unwrap_or_else(|| derive_dir(cfg).join(GENOTYPE_FILE));
    let spec = load_spec(&gpath)?;
    let m = &spec.macro_config;
    let mut model = if args.from_bank {
        let (state, _) = SearchState::load(&cfg.search, &search_checkpoint(cfg)?)?;
        let key = state.layout(&cfg.search, m).key();
        let bank = state
            .banks
            .banks
            .get(&key)
            .ok_or_else(|| CliError::Data(format!("the search never trained a bank for {key:?}")))?;
        let net = bank.child(spec.genotype.clone())?;
        StandaloneModel::from_bank(net, &bank.store)?
    } else {
        fresh_model(cfg, &data, &spec)?
    };
    let points = fit(cfg, &data, &spec, &mut model)?;
    let dir = train_dir(cfg);
    let curves = report::train_curves_csv(&points);
    let mut outputs = vec![
        write(&dir.join("curves.csv"), &curves)?,
        write(&dir.join("curves.svg"), report::train_curves_svg(&curves)?)?,
    ];
    let last_eval = points.iter().rev().find(|p| p.val_loss.is_some());
    let mut summary = TrainSummary {
        genotype: spec.genotype.to_string(),
        params: model.store.scalar_count(),
        init: if args.from_bank { "bank" } else { "fresh" }.into(),
        steps: points.len(),
        final_loss: points.last().map_or(f64::NAN, |p: &TrainPoint| p.loss),
        val_loss: last_eval.and_then(|p| p.val_loss),
        val_accuracy: last_eval.and_then(|p| p.val_accuracy),
        scst: None,
    };
    if args.scst.unwrap_or(cfg.scst.enabled) {
        let before = cider_on(&model, &data.val, cfg)?;
        let items = &data.train_items;
        let scorer = cider_scorer(items, cfg.scst.config.cider_variant)?;
        let reward = |i: usize, ids: &[usize]| scorer.score(ids, &items[i].refs);
        let steps = autornn::evalgen::scst_finetune(&mut model, items, &reward, &cfg.scst.config)?;
        let after = cider_on(&model, &data.val, cfg)?;
        let csv = report::scst_csv(&steps);
        outputs.push(write(&dir.join("scst.csv"), &csv)?);
        outputs.push(write(&dir.join("scst.svg"), report::scst_svg(&csv)?)?);
        summary.scst = Some(ScstSummary {
            steps: steps.len(),
            updates: steps.iter().filter(|s: &&ScstStep| s.updated).count(),
            val_cider_before: before,
            val_cider_after: after,
        });
    }
    save_model(&model, &spec, &dir.join("model"))?;
    outputs.push(dir.join("model"));
    outputs.push(write(&dir.join("summary.json"), json(&summary)?)?);
    RunManifest::record(cfg, "train", &outputs, &[gpath], start.elapsed().as_secs_f64())?;
    println!(
        "trained `{}` ({} parameters) for {} steps: loss {:.4}, val accuracy {}",
        summary.genotype,
        summary.params,
        summary.steps,
        summary.final_loss,
        summary.val_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    if let Some(s) = &summary.scst {
        println!(
            "self-critical stage: {} steps, val CIDEr {:.4} -> {:.4}",
            s.steps, s.val_cider_before, s.val_cider_after
        );
    }
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub model: Option<PathBuf>,
    pub split: Split,
    pub beam: Option<usize>,
}

/// One line of the per-image decode dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRow {
    pub image_id: String,
    pub caption: String,
    pub ids: Vec<usize>,
    pub logprob: f64,
    pub refs: Vec<Vec<usize>>,
}

pub fn evaluate(cfg: &RunConfig, args: &EvalArgs) -> Result<MetricReport, CliError> {
    let start = Instant::now();
    let data = prepared(cfg)?;
    let mdir = args.model.clone().unwrap_or_else(|| train_dir(cfg).join("model"));
    let model = load_model(&mdir)?;
    let items = data.items(args.split);
    if items.is_empty() {
        return Err(CliError::Data(format!("split `{}` has no images", args.split.name())));
    }
    let mut beam = cfg.eval.beam_config();
    if let Some(b) = args.beam {
        if b == 0 {
            return Err(CliError::Usage("--beam must be at least 1".into()));
        }
        beam.beam = b;
    }
    let (metrics, decoded) = evaluate_items(&model.net, &model.store, items, &beam, cfg.eval.cider_variant)?;
    let mut dump = String::new();
    for (item, d) in items.iter().zip(&decoded) {
        let row = DecodeRow {
            image_id: item.image_id.clone(),
            caption: data.vocab.decode(&d.ids).join(" "),
            ids: d.ids.clone(),
            logprob: d.logprob,
            refs: item.refs.clone(),
        };
        dump.push_str(&serde_json::to_string(&row).map_err(autornn::Error::from)?);
        dump.push('\n');
    }
    let dir = eval_dir(cfg, args.split);
    let outputs = vec![
        write(&dir.join("metrics.json"), metrics.to_percent_json()?)?,
        write(
            &dir.join("metrics.csv"),
            format!("{}\n{}\n", MetricReport::csv_header(), metrics.to_percent_csv_row()),
        )?,
        write(&dir.join("decodes.jsonl"), dump)?,
    ];
    RunManifest::record(
        cfg,
        &format!("evaluate_{}", args.split.name()),
        &outputs,
        &[],
        start.elapsed().as_secs_f64(),
    )?;
    println!("{} split, beam {}, {} images (percent):", args.split.name(), beam.beam, items.len());
    for (name, v) in MetricReport::NAMES.iter().zip(metrics.percent()) {
        println!("  {name:<8} {v:.1}");
    }
    Ok(metrics)
}

/// Recomputes the metrics of a decode dump.
pub fn rescore_dump(path: &Path, variant: CiderVariant) -> Result<MetricReport, CliError> {
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (k, line) in read(path)?.lines().enumerate() {
        let row: DecodeRow = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), k + 1)))?;
        cands.push(row.ids);
        refs.push(row.refs);
    }
    Ok(MetricReport::compute(&cands, &refs, variant)?)
}

/// Published sizes: model, blocks (0 for the LSTM), hidden, params and
/// size in millions.
pub const REPORTED_SIZES: [(&str, usize, usize, f64, f64); 8] = [
    ("LSTM", 0, 512, 2.0, 8.0),
    ("AutoRNN-6", 6, 512, 3.5, 14.0),
    ("AutoRNN-8", 8, 512, 4.5, 18.0),
    ("AutoRNN-10", 10, 512, 5.5, 22.0),
    ("LSTM", 0, 1024, 8.0, 32.0),
    ("AutoRNN-6", 6, 1024, 14.0, 56.0),
    ("AutoRNN-8", 8, 1024, 18.0, 72.0),
    ("AutoRNN-10", 10, 1024, 22.0, 88.0),
];

/// One row of the size table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeRow {
    pub model: String,
    pub hidden: usize,
    pub count: ParamCount,
    /// Published params and size in millions, when this configuration has them.
    pub reported: Option<(f64, f64)>,
}

impl SizeRow {
    pub fn line(&self) -> String {
        let mut s = format!(
            "{} {}: {} params, {} size ({} params, {} bytes)",
            self.model,
            self.hidden,
            format_millions(self.count.params),
            format_millions(self.count.bytes),
            self.count.params,
            self.count.bytes
        );
        if let Some((p, b)) = self.reported {
            s.push_str(&format!(
                "; reported {p:.1}M/{b:.1}M, off by {:+.1}%/{:+.1}%",
                100.0 * (self.count.params as f64 / (p * 1e6) - 1.0),
                100.0 * (self.count.bytes as f64 / (b * 1e6) - 1.0)
            ));
        }
        s
    }
}

fn reported(n_blocks: usize, hidden: usize, embed: usize, sem: NodeSemantics) -> Option<(f64, f64)> {
    if embed != hidden || (n_blocks > 0 && sem != NodeSemantics::Gated) {
        return None;
    }
    REPORTED_SIZES
        .iter()
        .find(|r| r.1 == n_blocks && r.2 == hidden)
        .map(|r| (r.3, r.4))
}

pub fn size_rows(n_blocks: usize, embed: usize, hidden: usize, sem: NodeSemantics) -> Vec<SizeRow> {
    let name = match sem {
        NodeSemantics::Gated => format!("AutoRNN-{n_blocks}"),
        NodeSemantics::Plain => format!("AutoRNN-{n_blocks} plain"),
    };
    let lstm = LstmCell::reference(&MacroConfig {
        embed_size: embed,
        hidden_size: hidden,
        ..MacroConfig::default()
    });
    vec![
        SizeRow {
            model: name,
            hidden,
            count: param_count(n_blocks, embed, hidden, sem),
            reported: reported(n_blocks, hidden, embed, sem),
        },
        SizeRow {
            model: "LSTM".into(),
            hidden,
            count: lstm.param_count(),
            reported: reported(0, hidden, embed, NodeSemantics::Gated),
        },
    ]
}

/// Every published configuration, computed.
pub fn reported_size_rows() -> Vec<SizeRow> {
    REPORTED_SIZES
        .iter()
        .map(|&(_, n, h, _, _)| {
            let rows = size_rows(n.max(1), h, h, NodeSemantics::Gated);
            if n == 0 {
                rows[1].clone()
            } else {
                rows[0].clone()
            }
        })
        .collect()
}
