//! Laplacian pyramid decomposition, exact reconstruction and its adjoint.
//!
//! Reduce is a separable `[1, 4, 6, 4, 1] / 16` blur followed by keeping even
//! rows and columns (`ceil(n / 2)` samples). Expand zero-inserts onto the
//! recorded finer grid and blurs with the same kernel scaled by 2 per axis.
//! Borders reflect without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
//!
//! Band `l` is `G_l - expand(G_{l+1})` and the last band is the Gaussian
//! residual, so `reconstruct(decompose(x))` is exact up to rounding whatever
//! the reduce/expand pair.

use crate::error::{Error, Result};
use crate::image::Image;

pub(crate) const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror index `i` into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Rows,
    Cols,
}

/// One 1-D correlation pass with reflected borders, scaled by `gain`.
fn pass(img: &Image, axis: Axis, taps: &[f64], gain: f64) -> Image {
    let (h, w, c) = img.shape();
    let r = (taps.len() / 2) as isize;
    let mut out = Image::zeros(h, w, c);
    let src = img.data();
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            for (k, &t) in taps.iter().enumerate() {
                let off = k as isize - r;
                let (sy, sx) = match axis {
                    Axis::Rows => (reflect(y as isize + off, h), x),
                    Axis::Cols => (y, reflect(x as isize + off, w)),
                };
                let s = (sy * w + sx) * c;
                let d = (y * w + x) * c;
                let wt = t * gain;
                for ch in 0..c {
                    dst[d + ch] += wt * src[s + ch];
                }
            }
        }
    }
    out
}

/// Transpose of [`pass`]: scatters each output sample back to its taps.
fn pass_adjoint(grad: &Image, axis: Axis, taps: &[f64], gain: f64) -> Image {
    let (h, w, c) = grad.shape();
    let r = (taps.len() / 2) as isize;
    let mut out = Image::zeros(h, w, c);
    let src = grad.data();
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            for (k, &t) in taps.iter().enumerate() {
                let off = k as isize - r;
                let (sy, sx) = match axis {
                    Axis::Rows => (reflect(y as isize + off, h), x),
                    Axis::Cols => (y, reflect(x as isize + off, w)),
                };
                let s = (sy * w + sx) * c;
                let d = (y * w + x) * c;
                let wt = t * gain;
                for ch in 0..c {
                    dst[s + ch] += wt * src[d + ch];
                }
            }
        }
    }
    out
}

fn blur(img: &Image, gain: f64) -> Image {
    pass(&pass(img, Axis::Cols, &BINOMIAL5, gain), Axis::Rows, &BINOMIAL5, gain)
}

fn blur_adjoint(grad: &Image, gain: f64) -> Image {
    pass_adjoint(
        &pass_adjoint(grad, Axis::Rows, &BINOMIAL5, gain),
        Axis::Cols,
        &BINOMIAL5,
        gain,
    )
}

#[inline]
fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Blur then keep even rows and columns.
pub fn reduce(img: &Image) -> Image {
    let blurred = blur(img, 1.0);
    let (h, w, c) = img.shape();
    Image::from_fn(half(h), half(w), c, |y, x, ch| blurred.get(2 * y, 2 * x, ch))
}

/// Zero-insert onto a `height x width` grid, then blur with gain 2 per axis.
pub fn expand(img: &Image, height: usize, width: usize) -> Image {
    debug_assert_eq!((half(height), half(width)), (img.height(), img.width()));
    let c = img.channels();
    let mut up = Image::zeros(height, width, c);
    for y in 0..img.height() {
        for x in 0..img.width() {
            for ch in 0..c {
                up.set(2 * y, 2 * x, ch, img.get(y, x, ch));
            }
        }
    }
    blur(&up, 2.0)
}

/// Transpose of [`expand`], mapping a fine-grid gradient to the coarse grid.
pub fn expand_adjoint(grad: &Image) -> Image {
    let blurred = blur_adjoint(grad, 2.0);
    let (h, w, c) = grad.shape();
    Image::from_fn(half(h), half(w), c, |y, x, ch| blurred.get(2 * y, 2 * x, ch))
}

/// Spatial sizes `(h, w)` of each of `levels` pyramid levels.
pub fn level_sizes(height: usize, width: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut sizes = Vec::with_capacity(levels);
    let (mut h, mut w) = (height, width);
    for _ in 0..levels {
        sizes.push((h, w));
        h = half(h);
        w = half(w);
    }
    sizes
}

/// Checks that an image of `height x width` admits `levels` pyramid levels.
pub fn check_levels(height: usize, width: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::dim("pyramid needs at least one level"));
    }
    if levels > usize::BITS as usize || height.min(width) < 1usize << (levels - 1) {
        return Err(Error::dim(format!(
            "{height}x{width} image is too small for {levels} pyramid levels"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    levels: Vec<Image>,
}

impl Pyramid {
    /// Validates that level `l + 1` is the `ceil`-halved size of level `l`.
    pub fn new(levels: Vec<Image>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::dim("pyramid needs at least one level"))?;
        let expected = level_sizes(first.height(), first.width(), levels.len());
        for (l, (band, &(h, w))) in levels.iter().zip(&expected).enumerate() {
            if band.height() != h || band.width() != w || band.channels() != first.channels() {
                return Err(Error::dim(format!(
                    "level {l} has shape {:?}, expected ({h}, {w}, {})",
                    band.shape(),
                    first.channels()
                )));
            }
        }
        Ok(Pyramid { levels })
    }

    pub fn levels(&self) -> &[Image] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Image] {
        &mut self.levels
    }

    pub fn into_levels(self) -> Vec<Image> {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn zeros(height: usize, width: usize, channels: usize, levels: usize) -> Self {
        Pyramid {
            levels: level_sizes(height, width, levels)
                .into_iter()
                .map(|(h, w)| Image::zeros(h, w, channels))
                .collect(),
        }
    }

    pub fn dot(&self, other: &Pyramid) -> f64 {
        self.levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| a.dot(b))
            .sum()
    }
}

pub fn decompose(img: &Image, levels: usize) -> Result<Pyramid> {
    check_levels(img.height(), img.width(), levels)?;
    let mut bands = Vec::with_capacity(levels);
    let mut current = img.clone();
    for _ in 1..levels {
        let coarse = reduce(&current);
        let up = expand(&coarse, current.height(), current.width());
        bands.push(current.zip_map(&up, |a, b| a - b));
        current = coarse;
    }
    bands.push(current);
    Ok(Pyramid { levels: bands })
}

/// Collapses a pyramid; the output is not clamped. Level sizes are checked
/// again since `levels_mut` allows reshaping bands.
pub fn reconstruct(pyr: &Pyramid) -> Result<Image> {
    let levels = pyr.levels();
    let Some(last) = levels.last() else {
        return Err(Error::dim("empty pyramid"));
    };
    let expected = level_sizes(levels[0].height(), levels[0].width(), levels.len());
    for (band, &(h, w)) in levels.iter().zip(&expected) {
        if (band.height(), band.width(), band.channels()) != (h, w, levels[0].channels()) {
            return Err(Error::dim("inconsistent pyramid level sizes"));
        }
    }
    let mut acc = last.clone();
    for band in levels.iter().rev().skip(1) {
        let mut up = expand(&acc, band.height(), band.width());
        up.add_assign(band);
        acc = up;
    }
    Ok(acc)
}

/// Gradient of [`reconstruct`] with respect to every band, given the output gradient.
pub fn reconstruct_adjoint(grad_out: &Image, levels: usize) -> Result<Pyramid> {
    check_levels(grad_out.height(), grad_out.width(), levels)?;
    let mut bands = Vec::with_capacity(levels);
    let mut g = grad_out.clone();
    for _ in 1..levels {
        let coarse = expand_adjoint(&g);
        bands.push(g);
        g = coarse;
    }
    bands.push(g);
    Ok(Pyramid { levels: bands })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |_, _, _| rng.gen::<f64>())
    }

    fn random_pyramid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, l: usize) -> Pyramid {
        Pyramid::new(
            level_sizes(h, w, l)
                .into_iter()
                .map(|(lh, lw)| random_image(rng, lh, lw, c))
                .collect(),
        )
        .unwrap()
    }

    // Independent 2-D oracle: explicit 5x5 outer-product kernel and a
    // hand-written mirror rule.
    fn mirror(i: isize, n: isize) -> usize {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n {
                i = 2 * (n - 1) - i;
            } else {
                return i as usize;
            }
        }
    }

    fn oracle_blur(img: &Image, gain: f64) -> Image {
        let k = [1.0, 4.0, 6.0, 4.0, 1.0];
        let (h, w, c) = img.shape();
        Image::from_fn(h, w, c, |y, x, ch| {
            let mut s = 0.0;
            for dy in -2isize..=2 {
                for dx in -2isize..=2 {
                    let yy = mirror(y as isize + dy, h as isize);
                    let xx = mirror(x as isize + dx, w as isize);
                    s += k[(dy + 2) as usize] * k[(dx + 2) as usize] * img.get(yy, xx, ch);
                }
            }
            s * gain * gain / 256.0
        })
    }

    fn oracle_down(img: &Image) -> Image {
        let b = oracle_blur(img, 1.0);
        let (h, w, c) = img.shape();
        Image::from_fn((h + 1) / 2, (w + 1) / 2, c, |y, x, ch| b.get(2 * y, 2 * x, ch))
    }

    fn oracle_up(img: &Image, h: usize, w: usize) -> Image {
        let c = img.channels();
        let z = Image::from_fn(h, w, c, |y, x, ch| {
            if y % 2 == 0 && x % 2 == 0 {
                img.get(y / 2, x / 2, ch)
            } else {
                0.0
            }
        });
        oracle_blur(&z, 2.0)
    }

    #[test]
    fn reflect_matches_mirror() {
        for n in 1..7usize {
            for i in -12isize..20 {
                let expected = if n == 1 { 0 } else { mirror(i, n as isize) };
                assert_eq!(reflect(i, n), expected, "i={i} n={n}");
            }
        }
    }

    #[test]
    fn single_level_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 5, 7, 3);
        let p = decompose(&img, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.levels()[0], img);
    }

    #[test]
    fn constant_image_has_zero_detail() {
        let img = Image::filled(16, 12, 3, 0.37);
        let p = decompose(&img, 4).unwrap();
        for band in &p.levels()[..3] {
            assert!(band.data().iter().all(|v| v.abs() < 1e-15));
        }
        assert!(p.levels()[3].data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn bands_match_step_by_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 8, 8, 1);
        let p = decompose(&img, 3).unwrap();
        let g2 = oracle_down(&img);
        let g3 = oracle_down(&g2);
        let b1 = img.zip_map(&oracle_up(&g2, 8, 8), |a, b| a - b);
        let b2 = g2.zip_map(&oracle_up(&g3, 4, 4), |a, b| a - b);
        for (got, want) in p.levels().iter().zip([b1, b2, g3]) {
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn odd_sizes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (h, w) in [(17, 23), (9, 5), (31, 64)] {
            let img = random_image(&mut rng, h, w, 3);
            for l in [1, 3] {
                let back = reconstruct(&decompose(&img, l).unwrap()).unwrap();
                assert!(back.max_abs_diff(&img) < 1e-6);
            }
        }
    }

    #[test]
    fn too_many_levels_is_dimension_error() {
        let img = Image::zeros(7, 32, 1);
        assert!(decompose(&img, 3).is_ok());
        assert!(matches!(decompose(&img, 4), Err(Error::Dimension(_))));
        assert!(matches!(decompose(&img, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_pyramid_reconstructs_to_zero() {
        let p = Pyramid::zeros(12, 10, 2, 3);
        assert!(reconstruct(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_only_constant_reconstructs_constant() {
        let mut p = Pyramid::zeros(20, 13, 1, 3);
        let last = p.levels_mut().last_mut().unwrap();
        *last = Image::filled(last.height(), last.width(), 1, 0.8);
        // Oracle: repeated expansion of a constant.
        let mut acc = Image::filled(5, 4, 1, 0.8);
        for (h, w) in [(10, 7), (20, 13)] {
            acc = oracle_up(&acc, h, w);
        }
        let rec = reconstruct(&p).unwrap();
        assert!(rec.max_abs_diff(&acc) < 1e-12);
        assert!(rec.data().iter().all(|v| (v - 0.8).abs() < 1e-6));
    }

    #[test]
    fn inconsistent_levels_rejected() {
        let bad = vec![Image::zeros(8, 8, 1), Image::zeros(3, 4, 1)];
        assert!(Pyramid::new(bad).is_err());
    }

    #[test]
    fn adjoint_single_level_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_image(&mut rng, 6, 9, 2);
        assert_eq!(reconstruct_adjoint(&g, 1).unwrap().levels()[0], g);
    }

    #[test]
    fn adjoint_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let h = rng.gen_range(4..24);
            let w = rng.gen_range(4..24);
            let c = if trial % 2 == 0 { 1 } else { 3 };
            let l = rng.gen_range(1..=3);
            let p = random_pyramid(&mut rng, h, w, c, l);
            let g = random_image(&mut rng, h, w, c);
            let lhs = reconstruct(&p).unwrap().dot(&g);
            let rhs = p.dot(&reconstruct_adjoint(&g, l).unwrap());
            assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1e-12));
        }
    }

    #[test]
    fn adjoint_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w, c, l) = (9, 7, 1, 3);
        let p = random_pyramid(&mut rng, h, w, c, l);
        let g = random_image(&mut rng, h, w, c);
        let adj = reconstruct_adjoint(&g, l).unwrap();
        let step = 1e-3;
        for lvl in 0..l {
            for i in 0..p.levels()[lvl].data().len() {
                let mut plus = p.clone();
                plus.levels_mut()[lvl].data_mut()[i] += step;
                let mut minus = p.clone();
                minus.levels_mut()[lvl].data_mut()[i] -= step;
                let fd = (reconstruct(&plus).unwrap().dot(&g) - reconstruct(&minus).unwrap().dot(&g))
                    / (2.0 * step);
                let an = adj.levels()[lvl].data()[i];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-6) + 1e-9);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn perfect_reconstruction(seed in 0u64..1000, h in 4usize..40, w in 4usize..40, c in 1usize..=3, l in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, h, w, c);
            let back = reconstruct(&decompose(&img, l).unwrap()).unwrap();
            proptest::prop_assert!(back.max_abs_diff(&img) < 1e-6);
        }

        #[test]
        fn reconstruct_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_pyramid(&mut rng, 13, 10, 2, 3);
            let q = random_pyramid(&mut rng, 13, 10, 2, 3);
            let combo = Pyramid::new(
                p.levels().iter().zip(q.levels()).map(|(x, y)| x.zip_map(y, |u, v| a * u + b * v)).collect(),
            ).unwrap();
            let lhs = reconstruct(&combo).unwrap();
            let rhs = reconstruct(&p).unwrap().zip_map(&reconstruct(&q).unwrap(), |u, v| a * u + b * v);
            proptest::prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
        }
    }
}
