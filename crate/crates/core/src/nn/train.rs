//! Minibatch SGD with momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabeledSample;

use super::model::Classifier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Set the model's input standardization from training-set channel statistics.
    pub fit_input_stats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            fit_input_stats: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Trains a copy of `model` on `data`.
///
/// Batch gradients are computed in parallel but reduced in sample order, so the
/// result depends only on the inputs and `cfg.seed`.
pub fn train(model: &Classifier, data: &[LabeledSample], cfg: &TrainConfig) -> Result<Classifier> {
    train_with_log(model, data, cfg, |_| {})
}

pub fn train_with_log(
    model: &Classifier,
    data: &[LabeledSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Classifier> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    cfg.validate()?;
    let (h, w, c) = model.input_shape();
    for s in data {
        if s.image.shape() != (h, w, c) {
            return Err(Error::dim(format!(
                "sample {} has shape {:?}, model expects {:?}",
                s.id,
                s.image.shape(),
                (h, w, c)
            )));
        }
        if s.label >= model.num_classes() {
            return Err(Error::invalid(format!("sample {} has label {} out of range", s.id, s.label)));
        }
    }

    let mut model = model.clone();
    if cfg.fit_input_stats && cfg.epochs > 0 {
        let (mean, std) = channel_stats(data)?;
        model.set_input_stats(&mean, &std)?;
    }
    let mut velocity = model.zero_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<(f64, bool, Vec<Vec<f64>>)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &data[i];
                    let (loss, pred, g) = model.loss_and_param_gradient(&s.image, s.label).expect("shape checked");
                    (loss, pred == s.label, g)
                })
                .collect();
            let mut grad = model.zero_grads();
            for (loss, hit, g) in &per_sample {
                loss_sum += loss;
                correct += *hit as usize;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((p, v), g) in model.params_mut().into_iter().zip(&mut velocity).zip(&grad) {
                for ((pj, vj), gj) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vj = cfg.momentum * *vj + gj * scale;
                    *pj = (*pj as f64 - cfg.learning_rate * *vj) as f32;
                }
            }
        }
        on_epoch(&EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(model)
}

/// Per-channel pixel mean and standard deviation over `data` (std floored at 1e-3).
pub fn channel_stats(data: &[LabeledSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = data.first().ok_or_else(|| Error::invalid("no samples for channel statistics"))?;
    let c = first.image.channels();
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut n = 0usize;
    for s in data {
        if s.image.channels() != c {
            return Err(Error::dim(format!("sample {} has {} channels, expected {c}", s.id, s.image.channels())));
        }
        for px in s.image.data().chunks(c) {
            for (k, v) in px.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        n += s.image.height() * s.image.width();
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
        .collect();
    Ok((mean, std))
}

/// Fraction of samples the model labels correctly.
pub fn accuracy(model: &Classifier, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let hits = data
        .par_iter()
        .map(|s| model.predict(&s.image).map(|p| (p == s.label) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::nn::Arch;

    fn toy_data(n: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let v = if label == 0 { 0.2 } else { 0.8 };
                let jitter = (i as f64 * 0.37).sin() * 0.1;
                LabeledSample {
                    image: Image::from_fn(8, 8, 3, |y, x, _| v + jitter * ((y + x) % 2) as f64),
                    label,
                    id: format!("s{i}"),
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let m = Classifier::new(Arch::A, (8, 8, 3), 2, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train(&m, &toy_data(4), &cfg).unwrap(), m);
    }

    #[test]
    fn empty_data_is_an_error() {
        let m = Classifier::new(Arch::A, (8, 8, 3), 2, 5).unwrap();
        assert!(train(&m, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let m = Classifier::new(Arch::C, (8, 8, 3), 2, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let data = toy_data(10);
        let a = train(&m, &data, &cfg).unwrap();
        let b = train(&m, &data, &cfg).unwrap();
        let bits = |m: &Classifier| -> Vec<u32> { m.params().into_iter().flatten().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, m);
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let m = Classifier::new(Arch::A, (8, 8, 3), 2, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 4,
            learning_rate: 0.1,
            seed: 3,
            ..TrainConfig::default()
        };
        let trained = train(&m, &toy_data(40), &cfg).unwrap();
        assert!(accuracy(&trained, &toy_data(40)).unwrap() >= 0.95);
    }
}
