//! Dataset and model preparation, whitebox sweeps, transfer matrices and ablations.

use std::collections::BTreeSet;
use std::fs;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack_batch, AttackConfig, AttackResult, Method};
use crate::error::{Error, Result};
use crate::image::{load_manifest, Image, LabeledSample};
use crate::metrics::{brisque_features, naturalness_score, ssim, CorpusModel, BRISQUE_MIN_SIZE};
use crate::nn::{accuracy, load_model_as, save_model, train, Classifier};

use super::config::ExperimentConfig;
use super::synth::generate_synthetic_dataset;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub num_classes: usize,
}

impl Dataset {
    /// The first `limit` test samples (all of them when `limit` is 0).
    pub fn attack_set(&self, limit: usize) -> &[LabeledSample] {
        if limit == 0 {
            &self.test
        } else {
            &self.test[..limit.min(self.test.len())]
        }
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let (train, test) = match (&d.train_manifest, &d.test_manifest) {
        (Some(tr), Some(te)) => (load_manifest(tr, d.num_classes)?, load_manifest(te, d.num_classes)?),
        _ => generate_synthetic_dataset(&d.synthetic, cfg.seed)?,
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("dataset needs both training and test samples".into()));
    }
    let shape = train[0].image.shape();
    if let Some(s) = train.iter().chain(&test).find(|s| s.image.shape() != shape) {
        return Err(Error::dim(format!("sample {} has shape {:?}, expected {shape:?}", s.id, s.image.shape())));
    }
    Ok(Dataset {
        train,
        test,
        num_classes: d.num_classes(),
    })
}

#[derive(Debug, Clone)]
pub struct NamedModel {
    pub name: String,
    pub model: Classifier,
}

/// Per-model accuracies reported by [`prepare_models`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub arch: String,
    pub trained: bool,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Loads every configured model whose file exists and trains (then saves) the
/// rest. Model `i` is initialized and shuffled with seed `seed + train.seed + i`.
pub fn prepare_models(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Vec<NamedModel>, Vec<ModelSummary>)> {
    let input = data.train[0].image.shape();
    let mut models = Vec::new();
    let mut summaries = Vec::new();
    for (i, spec) in cfg.models.iter().enumerate() {
        let path = cfg.model_path(i);
        let (model, trained) = if path.exists() {
            let m = load_model_as(&path, spec.arch)?;
            if m.input_shape() != input || m.num_classes() != data.num_classes {
                return Err(Error::Config(format!(
                    "model {} expects {:?} with {} classes, dataset has {:?} with {}",
                    spec.name,
                    m.input_shape(),
                    m.num_classes(),
                    input,
                    data.num_classes
                )));
            }
            (m, false)
        } else {
            let seed = cfg.seed.wrapping_add(cfg.train.seed).wrapping_add(i as u64);
            let init = Classifier::new(spec.arch, input, data.num_classes, seed)?;
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            let m = train(&init, &data.train, &tc)?;
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            save_model(&m, &path)?;
            (m, true)
        };
        summaries.push(ModelSummary {
            name: spec.name.clone(),
            arch: spec.arch.to_string(),
            trained,
            train_accuracy: accuracy(&model, &data.train)?,
            test_accuracy: accuracy(&model, &data.test)?,
        });
        models.push(NamedModel {
            name: spec.name.clone(),
            model,
        });
    }
    Ok((models, summaries))
}

/// Naturalness reference: the configured corpus file, or a fit on the first
/// `corpus.fit_count` training images. `None` when images are too small for
/// the natural-scene features.
pub fn prepare_corpus(cfg: &ExperimentConfig, data: &Dataset) -> Result<Option<CorpusModel>> {
    if let Some(path) = &cfg.corpus.path {
        return CorpusModel::load(path).map(Some);
    }
    let (h, w, _) = data.train[0].image.shape();
    if h.min(w) < BRISQUE_MIN_SIZE {
        return Ok(None);
    }
    let n = cfg.corpus.fit_count.min(data.train.len());
    let images: Vec<Image> = data.train[..n].iter().map(|s| s.image.clone()).collect();
    CorpusModel::fit_images(&images).map(Some)
}

/// Prediction of one model on an adversarial image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPrediction {
    pub model: String,
    pub prediction: usize,
}

/// One attacked sample at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub experiment: String,
    /// Grid point index, in configuration order.
    pub point: usize,
    pub id: String,
    pub method: Method,
    pub crafted_on: String,
    pub alpha: f64,
    pub epsilon: f64,
    /// Pyramid levels (0 when the method has no pyramid).
    pub levels: usize,
    /// CBEF kernel size (0 for other methods).
    pub kernel_size: usize,
    pub label: usize,
    pub initial_prediction: usize,
    pub final_prediction: usize,
    pub success: bool,
    pub iterations: usize,
    pub ssim: f64,
    pub naturalness: Option<f64>,
    /// Predictions of every model on the adversarial image (transfer studies only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<ModelPrediction>,
    #[serde(skip)]
    pub adversarial: Option<Image>,
}

impl SampleRecord {
    pub fn initially_correct(&self) -> bool {
        self.initial_prediction == self.label
    }
}

/// Sample ids whose adversarial images are kept for the report.
fn kept_ids(cfg: &ExperimentConfig, samples: &[LabeledSample]) -> BTreeSet<String> {
    let all: BTreeSet<&String> = samples.iter().map(|s| &s.id).collect();
    all.into_iter().take(cfg.saved_images).cloned().collect()
}

struct Point<'a> {
    experiment: &'a str,
    index: usize,
    crafted_on: &'a NamedModel,
    attack: &'a AttackConfig,
}

/// Attacks `samples` on one model and scores every result.
fn attack_point(
    point: &Point<'_>,
    samples: &[LabeledSample],
    corpus: Option<&CorpusModel>,
    keep: &BTreeSet<String>,
) -> Result<Vec<(SampleRecord, Image)>> {
    let results = run_attack_batch(&point.crafted_on.model, samples, point.attack)?;
    samples
        .par_iter()
        .zip(results)
        .map(|(s, r)| {
            let adv = r.adversarial.clone().expect("attacks return their image");
            let rec = record(point, s, &r, &adv, corpus, keep)?;
            Ok((rec, adv))
        })
        .collect()
}

fn record(
    point: &Point<'_>,
    sample: &LabeledSample,
    r: &AttackResult,
    adv: &Image,
    corpus: Option<&CorpusModel>,
    keep: &BTreeSet<String>,
) -> Result<SampleRecord> {
    let a = point.attack;
    let naturalness = match corpus {
        Some(c) => Some(naturalness_score(&brisque_features(adv)?, c)?),
        None => None,
    };
    Ok(SampleRecord {
        experiment: point.experiment.to_string(),
        point: point.index,
        id: sample.id.clone(),
        method: a.method,
        crafted_on: point.crafted_on.name.clone(),
        alpha: a.alpha,
        epsilon: if a.method.is_fusion() { 0.0 } else { a.epsilon },
        levels: if a.method.is_fusion() { a.levels } else { 0 },
        kernel_size: if a.method == Method::Cbef { a.kernel_size } else { 0 },
        label: r.label,
        initial_prediction: r.initial_prediction,
        final_prediction: r.final_prediction,
        success: r.success,
        iterations: r.iterations,
        ssim: ssim(&sample.image, adv)?,
        naturalness,
        predictions: Vec::new(),
        adversarial: keep.contains(&sample.id).then(|| adv.clone()),
    })
}

fn first_model(models: &[NamedModel]) -> Result<&NamedModel> {
    models.first().ok_or_else(|| Error::Config("no model available".into()))
}

/// Whitebox attack with the base attack settings on the first model.
pub fn run_whitebox(
    cfg: &ExperimentConfig,
    models: &[NamedModel],
    samples: &[LabeledSample],
    corpus: Option<&CorpusModel>,
) -> Result<Vec<SampleRecord>> {
    let model = first_model(models)?;
    let point = Point {
        experiment: "attack",
        index: 0,
        crafted_on: model,
        attack: &cfg.attack,
    };
    let keep = kept_ids(cfg, samples);
    Ok(attack_point(&point, samples, corpus, &keep)?.into_iter().map(|(r, _)| r).collect())
}

/// Sweep grid in configuration order: methods, then levels and kernel sizes
/// where the method uses them, then step sizes (or epsilons).
pub fn sweep_grid(cfg: &ExperimentConfig) -> Vec<AttackConfig> {
    let s = &cfg.sweep;
    let mut grid = Vec::new();
    for &method in &s.methods {
        let levels: &[usize] = if method.is_fusion() { &s.levels } else { &s.levels[..1] };
        let kernels: &[usize] = if method == Method::Cbef { &s.kernel_sizes } else { &s.kernel_sizes[..1] };
        let values = if method.is_additive() { &s.epsilons } else { &s.alphas };
        for &l in levels {
            for &k in kernels {
                for &v in values {
                    grid.push(cfg.attack_for(method, v, l, k));
                }
            }
        }
    }
    grid
}

/// Whitebox success, SSIM and naturalness on the first model at every sweep
/// grid point. Only samples the model initially classifies correctly are attacked.
pub fn run_whitebox_sweep(
    cfg: &ExperimentConfig,
    models: &[NamedModel],
    samples: &[LabeledSample],
    corpus: Option<&CorpusModel>,
) -> Result<Vec<SampleRecord>> {
    let model = first_model(models)?;
    let correct = correct_on(&[model.clone()], samples)?;
    if correct.is_empty() {
        return Err(Error::invalid("the model classifies no attack sample correctly"));
    }
    let keep = kept_ids(cfg, &correct);
    let mut records = Vec::new();
    for (index, attack) in sweep_grid(cfg).iter().enumerate() {
        let point = Point {
            experiment: "sweep",
            index,
            crafted_on: model,
            attack,
        };
        records.extend(attack_point(&point, &correct, corpus, &keep)?.into_iter().map(|(r, _)| r));
    }
    Ok(records)
}

/// Samples every model classifies correctly, in input order.
pub fn correct_on(models: &[NamedModel], samples: &[LabeledSample]) -> Result<Vec<LabeledSample>> {
    let keep: Vec<bool> = samples
        .par_iter()
        .map(|s| {
            for m in models {
                if m.model.predict(&s.image)? != s.label {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect::<Result<_>>()?;
    Ok(samples.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s.clone()).collect())
}

/// Success-rate matrix: `rates[i][j]` is the fraction of examples crafted on
/// model `i` that model `j` misclassifies. The diagonal is whitebox success.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub method: Method,
    pub levels: usize,
    pub kernel_size: usize,
    pub models: Vec<String>,
    pub samples: usize,
    pub rates: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn whitebox(&self) -> Vec<f64> {
        (0..self.models.len()).map(|i| self.rates[i][i]).collect()
    }

    /// Mean of the off-diagonal entries.
    pub fn transfer_mean(&self) -> f64 {
        let n = self.models.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.rates[i][j];
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }
}

/// Evaluates crafted images on every model. `crafted[i][k]` is the image
/// crafted on model `i` from `samples[k]`.
pub fn evaluate_transfer(models: &[NamedModel], samples: &[LabeledSample], crafted: &[Vec<Image>]) -> Result<Vec<Vec<f64>>> {
    if crafted.len() != models.len() || crafted.iter().any(|c| c.len() != samples.len()) {
        return Err(Error::dim("one crafted image per model and sample is required"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    crafted
        .iter()
        .map(|images| {
            models
                .iter()
                .map(|m| {
                    let fooled = samples
                        .par_iter()
                        .zip(images)
                        .map(|(s, img)| Ok((m.model.predict(img)? != s.label) as usize))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(fooled.iter().sum::<usize>() as f64 / samples.len() as f64)
                })
                .collect()
        })
        .collect()
}

fn check_transfer_models(models: &[NamedModel]) -> Result<()> {
    if models.len() < 2 {
        return Err(Error::Config("transfer studies need at least two models".into()));
    }
    Ok(())
}

/// Crafts on every model with `attack` and records every model's prediction.
fn transfer_point(
    experiment: &str,
    index: usize,
    attack: &AttackConfig,
    models: &[NamedModel],
    common: &[LabeledSample],
    keep: &BTreeSet<String>,
) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    for source in models {
        let point = Point {
            experiment,
            index,
            crafted_on: source,
            attack,
        };
        for (mut rec, adv) in attack_point(&point, common, None, keep)? {
            rec.predictions = models
                .iter()
                .map(|m| {
                    Ok(ModelPrediction {
                        model: m.name.clone(),
                        prediction: m.model.predict(&adv)?,
                    })
                })
                .collect::<Result<_>>()?;
            records.push(rec);
        }
    }
    Ok(records)
}

fn common_samples(models: &[NamedModel], samples: &[LabeledSample]) -> Result<Vec<LabeledSample>> {
    let common = correct_on(models, samples)?;
    if common.is_empty() {
        return Err(Error::invalid("no attack sample is classified correctly by every model"));
    }
    Ok(common)
}

/// Transfer study: every configured transfer method, crafted on every model,
/// evaluated on every model, over samples all models initially classify correctly.
pub fn run_transfer_matrix(cfg: &ExperimentConfig, models: &[NamedModel], samples: &[LabeledSample]) -> Result<Vec<SampleRecord>> {
    check_transfer_models(models)?;
    let common = common_samples(models, samples)?;
    let keep = kept_ids(cfg, &common);
    let t = &cfg.transfer;
    let mut records = Vec::new();
    for (index, &method) in t.methods.iter().enumerate() {
        let attack = cfg.transfer_attack(method, t.levels, t.kernel_size);
        records.extend(transfer_point("transfer", index, &attack, models, &common, &keep)?);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    /// Pyramid level count.
    L,
    /// CBEF kernel size.
    K,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "l" | "levels" => Ok(AblationAxis::L),
            "K" | "k" | "kernel" => Ok(AblationAxis::K),
            _ => Err(Error::invalid(format!("unknown ablation axis `{s}` (expected L or K)"))),
        }
    }
}

/// Transfer study repeated over the pyramid-level or kernel-size grid; the
/// other axis stays at its transfer setting.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    models: &[NamedModel],
    samples: &[LabeledSample],
    axis: AblationAxis,
) -> Result<Vec<SampleRecord>> {
    check_transfer_models(models)?;
    let a = &cfg.ablation;
    let (methods, grid) = match axis {
        AblationAxis::L => (&a.level_methods, &a.levels),
        AblationAxis::K => (&a.kernel_methods, &a.kernel_sizes),
    };
    if methods.is_empty() || grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let common = common_samples(models, samples)?;
    let keep = kept_ids(cfg, &common);
    let t = &cfg.transfer;
    let mut records = Vec::new();
    let mut index = 0;
    for &value in grid {
        for &method in methods {
            let (l, k) = match axis {
                AblationAxis::L => (value, t.kernel_size),
                AblationAxis::K => (t.levels, value),
            };
            let attack = cfg.transfer_attack(method, l, k);
            records.extend(transfer_point("ablation", index, &attack, models, &common, &keep)?);
            index += 1;
        }
    }
    Ok(records)
}

/// Rebuilds transfer matrices from records carrying per-model predictions, one
/// per grid point in point order.
pub fn transfer_matrices(records: &[SampleRecord]) -> Result<Vec<TransferMatrix>> {
    let mut points: Vec<usize> = records.iter().filter(|r| !r.predictions.is_empty()).map(|r| r.point).collect();
    points.sort_unstable();
    points.dedup();
    let mut out = Vec::new();
    for p in points {
        let group: Vec<&SampleRecord> = records.iter().filter(|r| r.point == p && !r.predictions.is_empty()).collect();
        let first = group[0];
        let models: Vec<String> = first.predictions.iter().map(|m| m.model.clone()).collect();
        let n = models.len();
        let mut fooled = vec![vec![0usize; n]; n];
        let mut counts = vec![0usize; n];
        for r in &group {
            if r.predictions.len() != n || r.predictions.iter().zip(&models).any(|(a, b)| &a.model != b) {
                return Err(Error::Format(format!("record {} has inconsistent model predictions", r.id)));
            }
            let i = models
                .iter()
                .position(|m| m == &r.crafted_on)
                .ok_or_else(|| Error::Format(format!("record {} crafted on unknown model", r.id)))?;
            counts[i] += 1;
            for (j, mp) in r.predictions.iter().enumerate() {
                fooled[i][j] += (mp.prediction != r.label) as usize;
            }
        }
        if counts.iter().any(|&c| c != counts[0]) || counts[0] == 0 {
            return Err(Error::Format(format!("grid point {p} has unequal sample counts per model")));
        }
        out.push(TransferMatrix {
            method: first.method,
            levels: first.levels,
            kernel_size: first.kernel_size,
            models,
            samples: counts[0],
            rates: fooled
                .iter()
                .map(|row| row.iter().map(|&f| f as f64 / counts[0] as f64).collect())
                .collect(),
        });
    }
    Ok(out)
}
