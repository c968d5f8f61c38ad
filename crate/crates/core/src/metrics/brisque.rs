use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pyramid::{reduce, reflect};

use super::ssim::gaussian_taps;

pub const MSCN_WINDOW: usize = 7;
pub const MSCN_SIGMA: f64 = 7.0 / 6.0;
/// Stabilizer: 1 on the 0-255 scale.
pub const MSCN_C: f64 = 1.0 / 255.0;
pub const BRISQUE_MIN_SIZE: usize = 32;
pub const NUM_FEATURES: usize = 36;

const SHAPE_MIN: f64 = 0.2;
const SHAPE_MAX: f64 = 10.0;
const SHAPE_STEP: f64 = 0.001;

/// Mean subtracted contrast normalized coefficients of the luminance.
///
/// The local mean and deviation use a 7x7 Gaussian (sigma 7/6) with
/// reflected borders. Both are accumulated from differences to the center
/// pixel, so a constant image maps to exact zeros.
pub fn mscn(img: &Image) -> Image {
    let gray = if img.channels() == 1 { img.clone() } else { img.luminance() };
    let (h, w, _) = gray.shape();
    let taps = gaussian_taps(MSCN_WINDOW, MSCN_SIGMA);
    let r = (MSCN_WINDOW / 2) as isize;
    let px = gray.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let center = px[y * w + x];
            let mut window = [0.0; MSCN_WINDOW * MSCN_WINDOW];
            let mut offset = 0.0;
            for (i, ty) in taps.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - r, h);
                for (j, tx) in taps.iter().enumerate() {
                    let sx = reflect(x as isize + j as isize - r, w);
                    let d = px[sy * w + sx] - center;
                    window[i * MSCN_WINDOW + j] = d;
                    offset += ty * tx * d;
                }
            }
            // offset = mu - center
            let mut var = 0.0;
            for (i, ty) in taps.iter().enumerate() {
                for (j, tx) in taps.iter().enumerate() {
                    let d = window[i * MSCN_WINDOW + j] - offset;
                    var += ty * tx * d * d;
                }
            }
            out[y * w + x] = -offset / (var.sqrt() + MSCN_C);
        }
    }
    Image::new(h, w, 1, out).expect("shape preserved")
}

/// Asymmetric generalized Gaussian fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggdFit {
    pub shape: f64,
    pub mean: f64,
    pub left_var: f64,
    pub right_var: f64,
}

fn rho(alpha: f64) -> f64 {
    (2.0 * ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp()
}

fn rho_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = ((SHAPE_MAX - SHAPE_MIN) / SHAPE_STEP).round() as usize;
        (0..=n)
            .map(|i| {
                let a = SHAPE_MIN + i as f64 * SHAPE_STEP;
                (a, rho(a))
            })
            .collect()
    })
}

/// Moment-matching fit: shape from the generalized Gaussian ratio
/// `Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a))` searched on `[0.2, 10]` in steps of
/// 0.001, left/right variances from the negative/positive samples.
pub fn aggd_fit(samples: &[f64]) -> AggdFit {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for &v in samples {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
        abs_sum += v.abs();
        sq_sum += v * v;
    }
    let left_var = if ln > 0 { ls / ln as f64 } else { 0.0 };
    let right_var = if rn > 0 { rs / rn as f64 } else { 0.0 };
    if sq_sum == 0.0 || samples.is_empty() {
        return AggdFit {
            shape: SHAPE_MIN,
            mean: 0.0,
            left_var,
            right_var,
        };
    }
    let (sl, sr) = (left_var.sqrt(), right_var.sqrt());
    let n = samples.len() as f64;
    let r_hat = (abs_sum / n).powi(2) / (sq_sum / n);
    let big_r = if sr > 0.0 {
        let g = sl / sr;
        r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2)
    } else {
        // No positive samples: the correction factor tends to 1 as the ratio grows.
        r_hat
    };
    let shape = rho_table()
        .iter()
        .fold((SHAPE_MIN, f64::INFINITY), |best, &(a, r)| {
            let d = (r - big_r).abs();
            if d < best.1 {
                (a, d)
            } else {
                best
            }
        })
        .0;
    let mean = (sr - sl) * (ln_gamma(2.0 / shape) - ln_gamma(1.0 / shape)).exp()
        * (ln_gamma(1.0 / shape) - ln_gamma(3.0 / shape)).exp().sqrt();
    AggdFit {
        shape,
        mean,
        left_var,
        right_var,
    }
}

/// Products of each MSCN coefficient with its horizontal, vertical and two
/// diagonal neighbors.
fn neighbor_products(m: &Image) -> [Vec<f64>; 4] {
    let (h, w, _) = m.shape();
    let d = m.data();
    let at = |y: usize, x: usize| d[y * w + x];
    let mut horiz = Vec::with_capacity(h * (w - 1));
    let mut vert = Vec::with_capacity((h - 1) * w);
    let mut main = Vec::with_capacity((h - 1) * (w - 1));
    let mut anti = Vec::with_capacity((h - 1) * (w - 1));
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                horiz.push(at(y, x) * at(y, x + 1));
            }
            if y + 1 < h {
                vert.push(at(y, x) * at(y + 1, x));
                if x + 1 < w {
                    main.push(at(y, x) * at(y + 1, x + 1));
                }
                if x > 0 {
                    anti.push(at(y, x) * at(y + 1, x - 1));
                }
            }
        }
    }
    [horiz, vert, main, anti]
}

fn scale_features(gray: &Image, out: &mut Vec<f64>) {
    let m = mscn(gray);
    let fit = aggd_fit(m.data());
    out.push(fit.shape);
    out.push((fit.left_var + fit.right_var) / 2.0);
    for prod in neighbor_products(&m) {
        let f = aggd_fit(&prod);
        out.extend([f.shape, f.mean, f.left_var, f.right_var]);
    }
}

/// 36 natural-scene statistics: at the full and half scale, the MSCN shape
/// and variance, then shape, mean and left/right variance for each of the
/// four neighbor-product maps.
pub fn brisque_features(img: &Image) -> Result<Vec<f64>> {
    let (h, w, _) = img.shape();
    if h < BRISQUE_MIN_SIZE || w < BRISQUE_MIN_SIZE {
        return Err(Error::dim(format!(
            "features need at least {BRISQUE_MIN_SIZE}x{BRISQUE_MIN_SIZE}, got {h}x{w}"
        )));
    }
    let gray = if img.channels() == 1 { img.clone() } else { img.luminance() };
    let mut out = Vec::with_capacity(NUM_FEATURES);
    scale_features(&gray, &mut out);
    scale_features(&reduce(&gray), &mut out);
    Ok(out)
}
