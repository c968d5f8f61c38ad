//! Attack procedures: multiplicative exposure, BEF, CBEF and the FGSM family.
//!
//! All attacks are untargeted: they ascend the cross-entropy of the true label
//! and succeed when the prediction on the returned image differs from it.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{sign, BracketSpec, BracketStack, FusionParams, KernelField, WeightMaps};
use crate::image::{clamp01, clamp_unit, Image, LabeledSample};
use crate::nn::Classifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Multiplicative,
    Bef,
    Cbef,
    Fgsm,
    Ifgsm,
    Mifgsm,
    Tifgsm,
    Tiifgsm,
    Timifgsm,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Multiplicative,
        Method::Bef,
        Method::Cbef,
        Method::Fgsm,
        Method::Ifgsm,
        Method::Mifgsm,
        Method::Tifgsm,
        Method::Tiifgsm,
        Method::Timifgsm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Multiplicative => "multiplicative",
            Method::Bef => "bef",
            Method::Cbef => "cbef",
            Method::Fgsm => "fgsm",
            Method::Ifgsm => "ifgsm",
            Method::Mifgsm => "mifgsm",
            Method::Tifgsm => "tifgsm",
            Method::Tiifgsm => "tiifgsm",
            Method::Timifgsm => "timifgsm",
        }
    }

    /// FGSM-family methods that perturb pixels additively within an epsilon ball.
    pub fn is_additive(self) -> bool {
        !matches!(self, Method::Multiplicative | Method::Bef | Method::Cbef)
    }

    pub fn is_fusion(self) -> bool {
        matches!(self, Method::Bef | Method::Cbef)
    }

    fn translation_invariant(self) -> bool {
        matches!(self, Method::Tifgsm | Method::Tiifgsm | Method::Timifgsm)
    }

    fn uses_momentum(self) -> bool {
        matches!(self, Method::Mifgsm | Method::Timifgsm)
    }

    fn single_step(self) -> bool {
        matches!(self, Method::Fgsm | Method::Tifgsm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| Error::invalid(format!("unknown attack method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub method: Method,
    /// Step size of every sign update.
    pub alpha: f64,
    pub max_iter: usize,
    /// Pyramid levels for BEF/CBEF.
    pub levels: usize,
    /// CBEF kernel size (odd).
    pub kernel_size: usize,
    pub bracket: BracketSpec,
    /// Infinity-norm bound: on `E - 1` for the multiplicative attack, on the
    /// pixel perturbation for the FGSM family.
    pub epsilon: f64,
    pub momentum_mu: f64,
    pub ti_kernel_size: usize,
    pub ti_sigma: f64,
    pub early_stop_on_flip: bool,
    /// Give every color channel its own fusion weights or kernels instead of
    /// one set per spatial position shared by all channels.
    pub per_channel_params: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            method: Method::Cbef,
            alpha: 0.1,
            max_iter: 10,
            levels: 3,
            kernel_size: 3,
            bracket: BracketSpec::default(),
            epsilon: 0.5,
            momentum_mu: 1.0,
            ti_kernel_size: 15,
            ti_sigma: 3.0,
            early_stop_on_flip: true,
            per_channel_params: false,
        }
    }
}

impl AttackConfig {
    pub fn with_method(method: Method) -> Self {
        AttackConfig {
            method,
            ..Self::default()
        }
    }

    /// Zero `alpha` and `epsilon` are accepted; they give the degenerate, no-op attacks.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be nonnegative"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if self.levels == 0 {
            return Err(Error::invalid("levels must be at least 1"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon must be nonnegative"));
        }
        if !(self.momentum_mu >= 0.0) {
            return Err(Error::invalid("momentum must be nonnegative"));
        }
        if self.ti_kernel_size % 2 == 0 || !(self.ti_sigma > 0.0) {
            return Err(Error::invalid("TI kernel needs odd size and positive sigma"));
        }
        self.bracket.validate()
    }
}

/// Per-pixel, per-channel exposure multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureMap {
    pub map: Image,
}

impl ExposureMap {
    pub fn ones(h: usize, w: usize, c: usize) -> Self {
        ExposureMap {
            map: Image::filled(h, w, c, 1.0),
        }
    }

    /// Clips every multiplier to `[max(1 - eps, 0), 1 + eps]`.
    pub fn project(&mut self, epsilon: f64) {
        let (lo, hi) = ((1.0 - epsilon).max(0.0), 1.0 + epsilon);
        self.map.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }

    /// How far the map lies outside its feasible set (0 when feasible).
    pub fn violation(&self, epsilon: f64) -> f64 {
        self.map
            .data()
            .iter()
            .map(|&e| ((e - 1.0).abs() - epsilon).max(-e).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn apply(&self, img: &Image) -> Image {
        clamp01(&img.zip_map(&self.map, |x, e| x * e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub id: String,
    pub method: Method,
    pub label: usize,
    pub initial_prediction: usize,
    pub final_prediction: usize,
    pub success: bool,
    /// Parameter updates applied.
    pub iterations: usize,
    /// Loss of each iterate that drove an update.
    pub loss_trace: Vec<f64>,
    /// Where the optimized fusion parameters were written, if they were.
    pub params_path: Option<String>,
    #[serde(skip)]
    pub adversarial: Option<Image>,
    #[serde(skip)]
    pub fusion_params: Option<KernelField>,
}

impl AttackResult {
    pub fn initially_correct(&self) -> bool {
        self.initial_prediction == self.label
    }

    pub fn adversarial(&self) -> &Image {
        self.adversarial.as_ref().expect("adversarial image kept")
    }
}

/// State after one parameter update, passed to an observer.
#[derive(Debug)]
pub struct IterationRecord<'a> {
    /// 1-based update count.
    pub iteration: usize,
    /// Loss of the iterate the update started from.
    pub loss: f64,
    /// The new iterate.
    pub adversarial: &'a Image,
    /// Distance outside the feasible set after projection; 0 when every
    /// constraint holds (for fusion attacks, the largest per-position deviation
    /// of the parameter sum from 1).
    pub constraint_violation: f64,
}

/// Tolerance for the in-loop feasibility check.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-6;

type Observer<'o> = &'o mut dyn FnMut(&IterationRecord<'_>);

/// Runs the attack selected by `cfg.method`.
pub fn run_attack(model: &Classifier, sample: &LabeledSample, cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack_observed(model, sample, cfg, &mut |_| {})
}

pub fn run_attack_observed(
    model: &Classifier,
    sample: &LabeledSample,
    cfg: &AttackConfig,
    observer: Observer<'_>,
) -> Result<AttackResult> {
    match cfg.method {
        Method::Multiplicative => attack_multiplicative_observed(model, sample, cfg, observer),
        Method::Bef => attack_bef_observed(model, sample, cfg, observer),
        Method::Cbef => attack_cbef_observed(model, sample, cfg, observer),
        _ => attack_additive_observed(model, sample, cfg, observer),
    }
}

/// Attacks every sample in parallel; results keep the input order.
pub fn run_attack_batch(model: &Classifier, samples: &[LabeledSample], cfg: &AttackConfig) -> Result<Vec<AttackResult>> {
    samples.par_iter().map(|s| run_attack(model, s, cfg)).collect()
}

fn check_sample(model: &Classifier, sample: &LabeledSample, cfg: &AttackConfig) -> Result<usize> {
    cfg.validate()?;
    if sample.image.shape() != model.input_shape() {
        return Err(Error::dim(format!(
            "sample {} has shape {:?}, model expects {:?}",
            sample.id,
            sample.image.shape(),
            model.input_shape()
        )));
    }
    model.predict(&sample.image)
}

fn finish(
    model: &Classifier,
    sample: &LabeledSample,
    method: Method,
    initial_prediction: usize,
    adversarial: Image,
    iterations: usize,
    loss_trace: Vec<f64>,
) -> Result<AttackResult> {
    let final_prediction = model.predict(&adversarial)?;
    Ok(AttackResult {
        id: sample.id.clone(),
        method,
        label: sample.label,
        initial_prediction,
        final_prediction,
        success: final_prediction != sample.label,
        iterations,
        loss_trace,
        params_path: None,
        adversarial: Some(adversarial),
        fusion_params: None,
    })
}

pub fn attack_multiplicative(model: &Classifier, sample: &LabeledSample, cfg: &AttackConfig) -> Result<AttackResult> {
    attack_multiplicative_observed(model, sample, cfg, &mut |_| {})
}

pub fn attack_multiplicative_observed(
    model: &Classifier,
    sample: &LabeledSample,
    cfg: &AttackConfig,
    observer: Observer<'_>,
) -> Result<AttackResult> {
    let initial = check_sample(model, sample, cfg)?;
    let x = &sample.image;
    let (h, w, c) = x.shape();
    let mut e = ExposureMap::ones(h, w, c);
    let mut trace = Vec::with_capacity(cfg.max_iter);
    let mut adv = e.apply(x);
    let mut iterations = 0;
    for t in 1..=cfg.max_iter {
        let eval = model.evaluate(&adv, sample.label)?;
        if cfg.early_stop_on_flip && eval.prediction != sample.label {
            break;
        }
        trace.push(eval.loss);
        // d clamp01(x * e) / de = x inside the unclamped range, 0 outside.
        let grad_e = Image::from_fn(h, w, c, |y, xx, ch| {
            let (xv, ev) = (x.get(y, xx, ch), e.map.get(y, xx, ch));
            let v = xv * ev;
            if (0.0..=1.0).contains(&v) {
                eval.gradient.get(y, xx, ch) * xv
            } else {
                0.0
            }
        });
        e.map
            .data_mut()
            .iter_mut()
            .zip(grad_e.data())
            .for_each(|(ev, &g)| *ev += cfg.alpha * sign(g));
        e.project(cfg.epsilon);
        adv = e.apply(x);
        iterations = t;
        let violation = e.violation(cfg.epsilon);
        debug_assert!(violation <= CONSTRAINT_TOLERANCE);
        observer(&IterationRecord {
            iteration: t,
            loss: eval.loss,
            adversarial: &adv,
            constraint_violation: violation,
        });
    }
    finish(model, sample, Method::Multiplicative, initial, adv, iterations, trace)
}

fn param_channels(sample: &LabeledSample, cfg: &AttackConfig) -> usize {
    if cfg.per_channel_params {
        sample.image.channels()
    } else {
        1
    }
}

pub fn attack_bef(model: &Classifier, sample: &LabeledSample, cfg: &AttackConfig) -> Result<AttackResult> {
    attack_bef_observed(model, sample, cfg, &mut |_| {})
}

pub fn attack_bef_observed(
    model: &Classifier,
    sample: &LabeledSample,
    cfg: &AttackConfig,
    observer: Observer<'_>,
) -> Result<AttackResult> {
    check_sample(model, sample, cfg)?;
    let (h, w, _) = sample.image.shape();
    let init = WeightMaps::identity(h, w, param_channels(sample, cfg), cfg.levels, cfg.bracket.len());
    let (mut result, params) = fusion_attack(model, sample, cfg, Method::Bef, init, observer)?;
    result.fusion_params = Some(params.to_kernel_field());
    Ok(result)
}

pub fn attack_cbef(model: &Classifier, sample: &LabeledSample, cfg: &AttackConfig) -> Result<AttackResult> {
    attack_cbef_observed(model, sample, cfg, &mut |_| {})
}

pub fn attack_cbef_observed(
    model: &Classifier,
    sample: &LabeledSample,
    cfg: &AttackConfig,
    observer: Observer<'_>,
) -> Result<AttackResult> {
    check_sample(model, sample, cfg)?;
    let (h, w, _) = sample.image.shape();
    let init = KernelField::identity(h, w, param_channels(sample, cfg), cfg.levels, cfg.bracket.len(), cfg.kernel_size)?;
    let (mut result, params) = fusion_attack(model, sample, cfg, Method::Cbef, init, observer)?;
    result.fusion_params = Some(params);
    Ok(result)
}

/// Sign ascent on fusion parameters, starting from `params`.
///
/// Each iteration fuses, takes the loss gradient through the classifier and
/// the fusion, steps `alpha * sign(grad)`, and re-projects onto the sum-to-one
/// constraint. With early stopping the first iterate that flips the label is
/// returned; otherwise the iterate after `max_iter` updates.
pub fn fusion_attack<P: FusionParams>(
    model: &Classifier,
    sample: &LabeledSample,
    cfg: &AttackConfig,
    method: Method,
    mut params: P,
    observer: Observer<'_>,
) -> Result<(AttackResult, P)> {
    let initial = check_sample(model, sample, cfg)?;
    let stack = BracketStack::new(&sample.image, &cfg.bracket, cfg.levels)?;
    let mut unclamped = stack.fuse_unclamped(&params)?;
    let mut adv = clamp01(&unclamped);
    let mut trace = Vec::with_capacity(cfg.max_iter);
    let mut iterations = 0;
    for t in 1..=cfg.max_iter {
        let eval = model.evaluate(&adv, sample.label)?;
        if cfg.early_stop_on_flip && eval.prediction != sample.label {
            break;
        }
        trace.push(eval.loss);
        let grad = stack.param_gradient(&params, &unclamped, &eval.gradient)?;
        params.sign_step(&grad, cfg.alpha);
        params.project();
        unclamped = stack.fuse_unclamped(&params)?;
        adv = clamp01(&unclamped);
        iterations = t;
        let violation = params.max_constraint_violation();
        debug_assert!(violation <= CONSTRAINT_TOLERANCE, "sum constraint off by {violation}");
        observer(&IterationRecord {
            iteration: t,
            loss: eval.loss,
            adversarial: &adv,
            constraint_violation: violation,
        });
    }
    Ok((finish(model, sample, method, initial, adv, iterations, trace)?, params))
}

/// Normalized `size x size` Gaussian used to smooth gradients in the TI variants.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (dy, dx) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Per-channel correlation with a square kernel, zero padding, same output size.
pub fn smooth_gradient(grad: &Image, kernel: &[f64], size: usize) -> Image {
    let (h, w, c) = grad.shape();
    let r = (size / 2) as isize;
    Image::from_fn(h, w, c, |y, x, ch| {
        let mut s = 0.0;
        for ky in 0..size {
            let sy = y as isize + ky as isize - r;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for kx in 0..size {
                let sx = x as isize + kx as isize - r;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                s += kernel[ky * size + kx] * grad.get(sy as usize, sx as usize, ch);
            }
        }
        s
    })
}

pub fn attack_additive(model: &Classifier, sample: &LabeledSample, cfg: &AttackConfig) -> Result<AttackResult> {
    attack_additive_observed(model, sample, cfg, &mut |_| {})
}

/// FGSM family.
///
/// Single-step variants move `epsilon * sign(g)`; iterative variants take
/// `max_iter` steps of `alpha * sign(g)`, each followed by projection onto the
/// epsilon ball around the input and onto `[0, 1]`. Momentum variants use
/// `g <- mu * g + grad / ||grad||_1`; TI variants smooth the gradient with a
/// Gaussian first.
pub fn attack_additive_observed(
    model: &Classifier,
    sample: &LabeledSample,
    cfg: &AttackConfig,
    observer: Observer<'_>,
) -> Result<AttackResult> {
    let method = cfg.method;
    if !method.is_additive() {
        return Err(Error::invalid(format!("{method} is not an additive attack")));
    }
    let initial = check_sample(model, sample, cfg)?;
    let x = &sample.image;
    let ti = method
        .translation_invariant()
        .then(|| gaussian_kernel(cfg.ti_kernel_size, cfg.ti_sigma));
    let (steps, step) = if method.single_step() {
        (1, cfg.epsilon)
    } else {
        (cfg.max_iter, cfg.alpha)
    };
    let mut adv = x.clone();
    let mut accum = Image::zeros_like(x);
    let mut trace = Vec::with_capacity(steps);
    let mut iterations = 0;
    for t in 1..=steps {
        let eval = model.evaluate(&adv, sample.label)?;
        if cfg.early_stop_on_flip && eval.prediction != sample.label {
            break;
        }
        trace.push(eval.loss);
        let mut g = eval.gradient;
        if let Some(k) = &ti {
            g = smooth_gradient(&g, k, cfg.ti_kernel_size);
        }
        if method.uses_momentum() {
            let l1: f64 = g.data().iter().map(|v| v.abs()).sum();
            let inv = if l1 > 0.0 { 1.0 / l1 } else { 0.0 };
            accum = accum.zip_map(&g, |a, gv| cfg.momentum_mu * a + gv * inv);
            g = accum.clone();
        }
        let (eps, stepped) = (cfg.epsilon, adv.zip_map(&g, |a, gv| a + step * sign(gv)));
        adv = stepped.zip_map(x, |a, x0| clamp_unit(a.clamp(x0 - eps, x0 + eps)));
        iterations = t;
        let violation = (adv.max_abs_diff(x) - eps).max(0.0);
        debug_assert!(violation <= CONSTRAINT_TOLERANCE);
        observer(&IterationRecord {
            iteration: t,
            loss: eval.loss,
            adversarial: &adv,
            constraint_violation: violation,
        });
    }
    finish(model, sample, method, initial, adv, iterations, trace)
}

/// Fraction of successful attacks, optionally only over initially-correct samples.
pub fn success_rate(results: &[AttackResult], only_correct: bool) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("no attack results"));
    }
    let pool: Vec<&AttackResult> = results
        .iter()
        .filter(|r| !only_correct || r.initially_correct())
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid("no initially-correct samples"));
    }
    Ok(pool.iter().filter(|r| r.success).count() as f64 / pool.len() as f64)
}
