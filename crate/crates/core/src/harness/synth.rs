//! Procedural fundus-like images with class-dependent lesion load.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabeledSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 5,
            height: 64,
            width: 64,
            train_per_class: 300,
            test_per_class: 60,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("synthetic data needs at least two classes"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid("synthetic images must be at least 16x16"));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        self.train_per_class * self.num_classes
    }

    pub fn test_count(&self) -> usize {
        self.test_per_class * self.num_classes
    }
}

/// Bright exudate-like blobs drawn for a class: four more per grade.
pub fn lesion_count(class: usize) -> usize {
    4 * class
}

/// Where the generator put things, for checks on the generator itself.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusLayout {
    pub center: (f64, f64),
    pub radius: f64,
    pub lesions: Vec<(f64, f64, f64)>,
    pub new_vessels: usize,
}

/// Sample `index` of the stream for `seed`; label is `index % num_classes`.
pub fn render_sample(spec: &SyntheticSpec, seed: u64, index: usize) -> (LabeledSample, FundusLayout) {
    let label = index % spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (image, layout) = render_fundus(spec.height, spec.width, label, &mut rng);
    let sample = LabeledSample {
        image,
        label,
        id: format!("syn{index:06}"),
    };
    (sample, layout)
}

/// Samples `start..start + count` of the stream for `seed`, classes balanced by index.
pub fn generate_range(spec: &SyntheticSpec, seed: u64, start: usize, count: usize) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    Ok((start..start + count)
        .into_par_iter()
        .map(|i| render_sample(spec, seed, i).0)
        .collect())
}

/// Training samples come first in the stream, test samples after them.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let train = generate_range(spec, seed, 0, spec.train_count())?;
    let test = generate_range(spec, seed, spec.train_count(), spec.test_count())?;
    Ok((train, test))
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f64; 3]>,
    vessels: Vec<f64>,
}

impl Canvas {
    /// Calls `f(index, squared distance)` for pixels within `reach` of `(cy, cx)`.
    fn around(&self, cy: f64, cx: f64, reach: f64, mut f: impl FnMut(usize, f64)) {
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(self.h - 1);
        let x1 = ((cx + reach).ceil() as usize).min(self.w - 1);
        if cy + reach < 0.0 || cx + reach < 0.0 {
            return;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                f(y * self.w + x, dy * dy + dx * dx);
            }
        }
    }

    fn stroke(&mut self, path: &[(f64, f64)], width: f64, strength: f64) {
        let mut vessels = std::mem::take(&mut self.vessels);
        for &(y, x) in path {
            self.around(y, x, 2.5 * width, |i, d2| {
                let v = strength * (-d2 / (2.0 * width * width)).exp();
                if v > vessels[i] {
                    vessels[i] = v;
                }
            });
        }
        self.vessels = vessels;
    }
}

fn curve(rng: &mut ChaCha8Rng, start: (f64, f64), heading: f64, steps: usize, step: f64, wiggle: f64) -> Vec<(f64, f64)> {
    let (mut y, mut x, mut a) = (start.0, start.1, heading);
    let mut turn = 0.0;
    let mut pts = Vec::with_capacity(steps);
    for _ in 0..steps {
        pts.push((y, x));
        turn = 0.7 * turn + rng.gen_range(-wiggle..wiggle);
        a += turn;
        y += step * a.sin();
        x += step * a.cos();
    }
    pts
}

fn render_fundus(h: usize, w: usize, label: usize, rng: &mut ChaCha8Rng) -> (Image, FundusLayout) {
    let size = h.min(w) as f64;
    let cy = h as f64 / 2.0 + rng.gen_range(-0.03..0.03) * size;
    let cx = w as f64 / 2.0 + rng.gen_range(-0.03..0.03) * size;
    let radius = size * rng.gen_range(0.42..0.47);
    let brightness = rng.gen_range(0.85..1.1);
    let tint = [
        0.78 + rng.gen_range(-0.04..0.04),
        0.34 + rng.gen_range(-0.04..0.04),
        0.13 + rng.gen_range(-0.03..0.03),
    ];
    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![[0.0; 3]; h * w],
        vessels: vec![0.0; h * w],
    };

    // Optic disc on a random side of the field.
    let disc_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let disc = (
        cy + 0.55 * radius * disc_angle.sin(),
        cx + 0.55 * radius * disc_angle.cos(),
    );
    let disc_sigma = 0.07 * size;

    for i in 0..4 + rng.gen_range(0..2) {
        let heading = disc_angle + std::f64::consts::PI + rng.gen_range(-1.2..1.2) + i as f64 * 0.2;
        let path = curve(rng, disc, heading, (1.4 * radius) as usize, 1.0, 0.06);
        canvas.stroke(&path, rng.gen_range(0.55..0.8), 0.45);
    }

    let mut lesions = Vec::new();
    for _ in 0..lesion_count(label) {
        let (r, t) = (radius * 0.8 * rng.gen::<f64>().sqrt(), rng.gen_range(0.0..std::f64::consts::TAU));
        let sigma = size / 64.0 * (1.0 + 0.05 * label as f64 + rng.gen_range(-0.15..0.15));
        lesions.push((cy + r * t.sin(), cx + r * t.cos(), sigma));
    }

    let new_vessels = if label >= 3 { 2 * (label - 2) } else { 0 };
    for _ in 0..new_vessels {
        let (r, t) = (radius * 0.6 * rng.gen::<f64>().sqrt(), rng.gen_range(0.0..std::f64::consts::TAU));
        let start = (cy + r * t.sin(), cx + r * t.cos());
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let path = curve(rng, start, heading, (0.25 * size) as usize, 0.8, 0.5);
        canvas.stroke(&path, 0.45, 0.35);
    }

    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let d = (dy * dy + dx * dx).sqrt();
            let edge = (radius - d + 0.5).clamp(0.0, 1.0);
            let shade = brightness * (1.0 - 0.45 * (d / radius).powi(2)) * edge;
            let i = y * w + x;
            for c in 0..3 {
                canvas.rgb[i][c] = tint[c] * shade;
            }
        }
    }
    // Lesions and the disc are additive; the vessel mask darkens multiplicatively.
    let mut add = vec![[0.0; 3]; h * w];
    let mut canvas_add = |i: usize, c: usize, v: f64| add[i][c] += v;
    let disc_color = [0.3, 0.32, 0.18];
    let disc_sigma2 = 2.0 * disc_sigma * disc_sigma;
    canvas.around(disc.0, disc.1, 3.0 * disc_sigma, |i, d2| {
        let g = (-d2 / disc_sigma2).exp() * brightness;
        for (c, col) in disc_color.iter().enumerate() {
            canvas_add(i, c, col * g);
        }
    });
    let lesion_color = [0.32, 0.36, 0.06];
    for &(ly, lx, s) in &lesions {
        let amp = rng.gen_range(0.7..1.0);
        canvas.around(ly, lx, 3.0 * s, |i, d2| {
            let g = amp * (-d2 / (2.0 * s * s)).exp();
            for (c, col) in lesion_color.iter().enumerate() {
                canvas_add(i, c, col * g);
            }
        });
    }

    let noise = Normal::new(0.0, 0.01).expect("valid std");
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let (dy, dx) = ((i / w) as f64 + 0.5 - cy, (i % w) as f64 + 0.5 - cx);
        let edge = (radius - (dy * dy + dx * dx).sqrt() + 0.5).clamp(0.0, 1.0);
        let dark = 1.0 - canvas.vessels[i];
        for c in 0..3 {
            let mut v = canvas.rgb[i][c] * dark + add[i][c] * edge;
            if edge > 0.0 {
                v += edge * noise.sample(rng);
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let image = Image::new(h, w, 3, data).expect("sized buffer");
    (
        image,
        FundusLayout {
            center: (cy, cx),
            radius,
            lesions,
            new_vessels,
        },
    )
}
