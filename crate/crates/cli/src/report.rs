//! CSV logs, the figures drawn from them and the run summary.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use autornn::evalgen::{MetricReport, ScstStep};
use autornn::search::{EventKind, SearchEvent, LOG_FILE};
use autornn::train::TrainPoint;

use crate::commands::{derive_dir, eval_dir, search_dir, train_dir, TrainSummary};
use crate::config::RunConfig;
use crate::plot::{line_chart, Series};
use crate::CliError;

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

pub fn train_curves_csv(points: &[TrainPoint]) -> String {
    let mut s = String::from("step,epoch,lr,loss,grad_norm,val_loss,val_accuracy\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            p.step,
            p.epoch,
            p.lr,
            p.loss,
            p.grad_norm,
            opt(p.val_loss),
            opt(p.val_accuracy)
        );
    }
    s
}

pub fn scst_csv(steps: &[ScstStep]) -> String {
    let mut s = String::from("step,epoch,sample_reward,greedy_reward,updated\n");
    for p in steps {
        let _ = writeln!(s, "{},{},{},{},{}", p.step, p.epoch, p.sample_reward, p.greedy_reward, p.updated);
    }
    s
}

/// Header names and rows; empty cells read as NaN.
fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::Data("empty CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| match c {
                "" => Ok(f64::NAN),
                "true" => Ok(1.0),
                "false" => Ok(0.0),
                _ => c.parse::<f64>(),
            })
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| CliError::Data(format!("CSV line {}: {e}", k + 2)))?;
        if row.len() != header.len() {
            return Err(CliError::Data(format!("CSV line {} has {} cells", k + 2, row.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn column<'a>(header: &[String], rows: &'a [Vec<f64>], x: &str, y: &str) -> Result<Vec<(f64, f64)>, CliError> {
    let find = |n: &str| {
        header
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| CliError::Data(format!("CSV lacks column `{n}`")))
    };
    let (xi, yi) = (find(x)?, find(y)?);
    Ok(rows.iter().map(|r| (r[xi], r[yi])).filter(|p| p.1.is_finite()).collect())
}

pub fn train_curves_svg(csv: &str) -> Result<String, CliError> {
    let (h, rows) = parse_csv(csv)?;
    Ok(line_chart(
        "Cross-entropy training",
        "step",
        "loss per token",
        &[
            Series {
                name: "train",
                points: column(&h, &rows, "step", "loss")?,
            },
            Series {
                name: "validation",
                points: column(&h, &rows, "step", "val_loss")?,
            },
        ],
    ))
}

pub fn scst_svg(csv: &str) -> Result<String, CliError> {
    let (h, rows) = parse_csv(csv)?;
    Ok(line_chart(
        "Self-critical training",
        "step",
        "CIDEr-D",
        &[
            Series {
                name: "sampled",
                points: column(&h, &rows, "step", "sample_reward")?,
            },
            Series {
                name: "greedy",
                points: column(&h, &rows, "step", "greedy_reward")?,
            },
        ],
    ))
}

/// Mean sampled reward and baseline per controller update, numbered across epochs.
pub fn search_reward_csv(events: &[SearchEvent]) -> String {
    let mut s = String::from("update,epoch,mean_reward,baseline\n");
    let mut pending: Vec<f64> = Vec::new();
    let mut n = 0;
    for e in events {
        match e.kind {
            EventKind::Reward => pending.extend(e.reward),
            EventKind::Update => {
                let mean = if pending.is_empty() {
                    f64::NAN
                } else {
                    pending.iter().sum::<f64>() / pending.len() as f64
                };
                let mean = if mean.is_finite() { format!("{mean}") } else { String::new() };
                let _ = writeln!(s, "{n},{},{mean},{}", e.epoch, e.baseline);
                pending.clear();
                n += 1;
            }
            _ => {}
        }
    }
    s
}

pub fn search_reward_svg(csv: &str) -> Result<String, CliError> {
    let (h, rows) = parse_csv(csv)?;
    Ok(line_chart(
        "Controller reward",
        "update",
        "reward",
        &[
            Series {
                name: "mean sampled",
                points: column(&h, &rows, "update", "mean_reward")?,
            },
            Series {
                name: "baseline",
                points: column(&h, &rows, "update", "baseline")?,
            },
        ],
    ))
}

pub fn read_search_log(path: &Path) -> Result<Vec<SearchEvent>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), k + 1)))
        })
        .collect()
}

fn read_metrics(path: &Path) -> Option<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).ok()?;
    let map: std::collections::BTreeMap<String, f64> = serde_json::from_str(&text).ok()?;
    Some(MetricReport::NAMES.iter().filter_map(|n| Some((n.to_string(), *map.get(*n)?))).collect())
}

/// Regenerates every figure from the logs on disk and writes
/// `report/summary.md`. Stages that have not run are skipped.
pub fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let out = cfg.work_dir.join("report");
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    let mut md = String::from("# Run summary\n\n");
    let _ = writeln!(md, "Configuration hash `{}`, seed {}.\n", cfg.hash(), cfg.seed);

    let log = search_dir(cfg).join(LOG_FILE);
    if log.is_file() {
        let events = read_search_log(&log)?;
        let csv = search_reward_csv(&events);
        fs::write(out.join("search_reward.csv"), &csv)?;
        fs::write(out.join("search_reward.svg"), search_reward_svg(&csv)?)?;
        written.push(out.join("search_reward.csv"));
        written.push(out.join("search_reward.svg"));
        let updates = csv.lines().count() - 1;
        let _ = writeln!(
            md,
            "## Search\n\n{} log records, {} controller updates. ![reward](search_reward.svg)\n",
            events.len(),
            updates
        );
    }

    let genotype = derive_dir(cfg).join(crate::commands::GENOTYPE_FILE);
    if genotype.is_file() {
        let spec = crate::commands::load_spec(&genotype)?;
        let _ = writeln!(
            md,
            "## Derived cell\n\n`{}` with {} blocks, embed {}, hidden {}.\n",
            spec.genotype,
            spec.genotype.n_blocks(),
            spec.macro_config.embed_size,
            spec.macro_config.hidden_size
        );
    }

    let tdir = train_dir(cfg);
    if let Ok(csv) = fs::read_to_string(tdir.join("curves.csv")) {
        fs::write(out.join("train_curves.svg"), train_curves_svg(&csv)?)?;
        written.push(out.join("train_curves.svg"));
        md.push_str("## Training\n\n![curves](train_curves.svg)\n\n");
        if let Ok(text) = fs::read_to_string(tdir.join("summary.json")) {
            let s: TrainSummary = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", tdir.join("summary.json").display())))?;
            let _ = writeln!(
                md,
                "{} parameters, {} steps, final loss {:.4}.\n",
                s.params, s.steps, s.final_loss
            );
            if let Some(sc) = s.scst {
                let _ = writeln!(
                    md,
                    "Self-critical stage: validation CIDEr-D {:.4} before, {:.4} after.\n",
                    sc.val_cider_before, sc.val_cider_after
                );
            }
        }
    }
    if let Ok(csv) = fs::read_to_string(tdir.join("scst.csv")) {
        fs::write(out.join("scst.svg"), scst_svg(&csv)?)?;
        written.push(out.join("scst.svg"));
        md.push_str("![self-critical](scst.svg)\n\n");
    }

    let mut table = String::new();
    for split in [autornn::datapipe::Split::Val, autornn::datapipe::Split::Test] {
        if let Some(m) = read_metrics(&eval_dir(cfg, split).join("metrics.json")) {
            if table.is_empty() {
                let names: Vec<&str> = m.iter().map(|(n, _)| n.as_str()).collect();
                let _ = writeln!(table, "| split | {} |", names.join(" | "));
                let _ = writeln!(table, "|---|{}", "---|".repeat(names.len()));
            }
            let vals: Vec<String> = m.iter().map(|(_, v)| format!("{v:.1}")).collect();
            let _ = writeln!(table, "| {} | {} |", split.name(), vals.join(" | "));
        }
    }
    if !table.is_empty() {
        let _ = writeln!(md, "## Evaluation (percent)\n\n{table}");
    }
    fs::write(out.join("summary.md"), &md)?;
    written.push(out.join("summary.md"));
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_round_trip_through_csv() {
        let pts = vec![
            TrainPoint {
                step: 1,
                epoch: 0,
                lr: 0.1,
                loss: 2.0,
                grad_norm: 1.0,
                val_loss: None,
                val_accuracy: None,
            },
            TrainPoint {
                step: 2,
                epoch: 0,
                lr: 0.1,
                loss: 1.5,
                grad_norm: 1.0,
                val_loss: Some(1.7),
                val_accuracy: Some(0.4),
            },
        ];
        let csv = train_curves_csv(&pts);
        assert_eq!(csv.lines().count(), 3);
        let (h, rows) = parse_csv(&csv).unwrap();
        assert_eq!(column(&h, &rows, "step", "val_loss").unwrap(), vec![(2.0, 1.7)]);
        assert!(train_curves_svg(&csv).unwrap().contains("<polyline"));
    }

    #[test]
    fn ragged_csv_is_rejected() {
        assert!(parse_csv("a,b\n1\n").is_err());
        assert!(parse_csv("a\nx\n").is_err());
    }
}
