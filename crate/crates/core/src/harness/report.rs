//! Run artifacts: manifest, per-sample JSONL, CSV tables and adversarial PNGs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::Method;
use crate::error::{Error, Result};
use crate::image::save_image;

use super::config::ExperimentConfig;
use super::experiment::{transfer_matrices, ModelSummary, SampleRecord};

/// `%g`-style formatting with 6 significant digits.
pub fn format_g(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        trim_zeros(&format!("{v:.*}", (5 - exp) as usize)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt_g(v: Option<f64>) -> String {
    v.map(format_g).unwrap_or_default()
}

/// Aggregate over one grid point and crafting model.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub point: usize,
    pub method: Method,
    pub crafted_on: String,
    pub alpha: f64,
    pub epsilon: f64,
    pub levels: usize,
    pub kernel_size: usize,
    /// Initially-correct samples the rates are computed over.
    pub samples: usize,
    pub success_rate: f64,
    /// Mean misclassification rate on the other models (transfer studies only).
    pub transfer_rate: Option<f64>,
    pub mean_ssim: f64,
    pub mean_naturalness: Option<f64>,
}

/// Groups records by grid point and crafting model, in point order. Rates and
/// means cover initially-correct samples only; groups without any are skipped.
pub fn summarize(records: &[SampleRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, usize, &str), Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        let rank = r.predictions.iter().position(|p| p.model == r.crafted_on).unwrap_or(0);
        groups.entry((r.point, rank, r.crafted_on.as_str())).or_default().push(r);
    }
    groups
        .into_values()
        .filter_map(|group| {
            let correct: Vec<&SampleRecord> = group.iter().copied().filter(|r| r.initially_correct()).collect();
            let first = *correct.first()?;
            let n = correct.len() as f64;
            let transfer_rate = (!first.predictions.is_empty()).then(|| {
                let mut fooled = 0usize;
                let mut total = 0usize;
                for r in &correct {
                    for p in r.predictions.iter().filter(|p| p.model != r.crafted_on) {
                        fooled += (p.prediction != r.label) as usize;
                        total += 1;
                    }
                }
                if total == 0 {
                    0.0
                } else {
                    fooled as f64 / total as f64
                }
            });
            let mean_naturalness = correct
                .iter()
                .map(|r| r.naturalness)
                .sum::<Option<f64>>()
                .map(|s| s / n);
            Some(SummaryRow {
                experiment: first.experiment.clone(),
                point: first.point,
                method: first.method,
                crafted_on: first.crafted_on.clone(),
                alpha: first.alpha,
                epsilon: first.epsilon,
                levels: first.levels,
                kernel_size: first.kernel_size,
                samples: correct.len(),
                success_rate: correct.iter().filter(|r| r.success).count() as f64 / n,
                transfer_rate,
                mean_ssim: correct.iter().map(|r| r.ssim).sum::<f64>() / n,
                mean_naturalness,
            })
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const SUMMARY_HEADER: [&str; 12] = [
    "experiment",
    "method",
    "crafted_on",
    "alpha",
    "epsilon",
    "levels",
    "kernel_size",
    "samples",
    "success_rate",
    "transfer_rate",
    "mean_ssim",
    "mean_naturalness",
];

fn summary_fields(r: &SummaryRow) -> Vec<String> {
    vec![
        r.experiment.clone(),
        r.method.to_string(),
        r.crafted_on.clone(),
        format_g(r.alpha),
        format_g(r.epsilon),
        r.levels.to_string(),
        r.kernel_size.to_string(),
        r.samples.to_string(),
        format_g(r.success_rate),
        opt_g(r.transfer_rate),
        format_g(r.mean_ssim),
        opt_g(r.mean_naturalness),
    ]
}

const CURVE_HEADER: [&str; 9] = [
    "method",
    "alpha",
    "epsilon",
    "levels",
    "kernel_size",
    "samples",
    "success_rate",
    "mean_ssim",
    "mean_naturalness",
];

const MATRIX_HEADER: [&str; 7] = ["method", "L", "K", "crafted_from", "attacked", "success_rate", "samples"];

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub files: Vec<String>,
}

pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_manifest_json(dir: &Path, command: &str, cfg: &ExperimentConfig, files: Vec<String>) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        version: version_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// File-name-safe form of a sample id.
fn image_stem(id: &str) -> String {
    let id = id.strip_suffix(".png").unwrap_or(id);
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes every artifact of one run into `dir`:
/// `manifest.json`, `results.jsonl` (sorted by sample id, then grid point and
/// crafting model), `summary.csv`, `curves.csv` for sweeps,
/// `transfer_matrix.csv` for transfer studies, `ablation.csv` for ablations,
/// and `images/{id}_{method}.png` for records that kept their image.
pub fn emit_report(records: &[SampleRecord], cfg: &ExperimentConfig, command: &str, dir: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no results to report"));
    }
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut files = vec!["results.jsonl".to_string(), "summary.csv".to_string()];

    let mut sorted: Vec<&SampleRecord> = records.iter().collect();
    let rank = |r: &SampleRecord| r.predictions.iter().position(|p| p.model == r.crafted_on).unwrap_or(0);
    sorted.sort_by(|a, b| {
        (a.id.as_str(), &a.experiment, a.point, rank(a)).cmp(&(b.id.as_str(), &b.experiment, b.point, rank(b)))
    });
    let mut jsonl = String::new();
    for r in &sorted {
        jsonl += &serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        jsonl.push('\n');
    }
    let path = dir.join("results.jsonl");
    fs::write(&path, jsonl).map_err(|e| Error::io(&path, e))?;

    let summary = summarize(records);
    write_rows(&dir.join("summary.csv"), &SUMMARY_HEADER, summary.iter().map(summary_fields))?;

    if records.iter().any(|r| r.experiment == "sweep") {
        let rows = summary.iter().filter(|r| r.experiment == "sweep").map(|r| {
            vec![
                r.method.to_string(),
                format_g(r.alpha),
                format_g(r.epsilon),
                r.levels.to_string(),
                r.kernel_size.to_string(),
                r.samples.to_string(),
                format_g(r.success_rate),
                format_g(r.mean_ssim),
                opt_g(r.mean_naturalness),
            ]
        });
        write_rows(&dir.join("curves.csv"), &CURVE_HEADER, rows)?;
        files.push("curves.csv".into());
    }

    for (experiment, file) in [("transfer", "transfer_matrix.csv"), ("ablation", "ablation.csv")] {
        let subset: Vec<SampleRecord> = records.iter().filter(|r| r.experiment == experiment).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let mut rows = Vec::new();
        for m in transfer_matrices(&subset)? {
            for (i, from) in m.models.iter().enumerate() {
                for (j, to) in m.models.iter().enumerate() {
                    rows.push(vec![
                        m.method.to_string(),
                        m.levels.to_string(),
                        m.kernel_size.to_string(),
                        from.clone(),
                        to.clone(),
                        format_g(m.rates[i][j]),
                        m.samples.to_string(),
                    ]);
                }
            }
        }
        write_rows(&dir.join(file), &MATRIX_HEADER, rows)?;
        files.push(file.into());
    }

    let mut written = BTreeSet::new();
    for r in &sorted {
        let Some(img) = &r.adversarial else { continue };
        let name = format!("{}_{}.png", image_stem(&r.id), r.method);
        if written.insert(name.clone()) {
            let images = dir.join("images");
            create_dir(&images)?;
            save_image(img, images.join(&name))?;
            files.push(format!("images/{name}"));
        }
    }

    write_manifest_json(dir, command, cfg, files)
}

/// Reads `results.jsonl` back (adversarial images are not stored in it).
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Writes `models.csv` and `manifest.json` for a training run.
pub fn emit_training_report(summaries: &[ModelSummary], cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let rows = summaries.iter().map(|s| {
        vec![
            s.name.clone(),
            s.arch.clone(),
            s.trained.to_string(),
            format_g(s.train_accuracy),
            format_g(s.test_accuracy),
        ]
    });
    let path = dir.join("models.csv");
    write_rows(&path, &["name", "arch", "trained", "train_accuracy", "test_accuracy"], rows)?;
    write_manifest_json(dir, "train", cfg, vec!["models.csv".into()])?;
    Ok(path)
}
