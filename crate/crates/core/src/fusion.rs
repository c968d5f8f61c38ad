//! Bracketed exposure generation and the two pyramid-space fusion models.
//!
//! * BEF: each band of the fused pyramid is `sum_i W_i * band_i`, one scalar
//!   weight per exposure, level and pixel.
//! * CBEF: each band sample is `sum_i sum_q K_i(p, q) * band_i(p + q)`, a
//!   distinct `K x K` kernel per exposure, level and pixel, with reflected
//!   borders.
//!
//! For both, the parameters at one position (all exposures, all taps) are
//! constrained to sum to one. Parameters may carry one channel, shared by
//! every color channel, or one set per channel.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp01, Image};
use crate::pyramid::{check_levels, decompose, reconstruct, reconstruct_adjoint, reflect, Pyramid};

/// Sums whose magnitude falls below this are reset to the identity initialization.
pub const DEGENERATE_SUM: f64 = 1e-6;

/// Exposure shifts in EV stops, each within `[-lambda, lambda]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketSpec {
    pub lambda: f64,
    pub shifts: Vec<f64>,
}

impl BracketSpec {
    pub fn new(lambda: f64, shifts: Vec<f64>) -> Result<Self> {
        let spec = BracketSpec { lambda, shifts };
        spec.validate()?;
        Ok(spec)
    }

    /// `count` shifts evenly spaced over `[-lambda, lambda]` (a single shift is `0`).
    pub fn symmetric(count: usize, lambda: f64) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("bracket needs at least one exposure"));
        }
        let shifts = if count == 1 {
            vec![0.0]
        } else {
            (0..count)
                .map(|i| -lambda + 2.0 * lambda * i as f64 / (count - 1) as f64)
                .collect()
        };
        Self::new(lambda, shifts)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("bracket lambda must be positive"));
        }
        if self.shifts.is_empty() {
            return Err(Error::invalid("bracket needs at least one exposure"));
        }
        if self.shifts.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("bracket shifts must be sorted ascending"));
        }
        if self.shifts.iter().any(|e| e.abs() > self.lambda) {
            return Err(Error::invalid("bracket shift exceeds lambda"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }
}

impl Default for BracketSpec {
    fn default() -> Self {
        BracketSpec::symmetric(5, 1.0).expect("valid default bracket")
    }
}

/// `X_i = clamp01(X * 2^e_i)` for every shift, in shift order.
pub fn generate_brackets(img: &Image, spec: &BracketSpec) -> Vec<Image> {
    spec.shifts
        .iter()
        .map(|&e| {
            let gain = e.exp2();
            clamp01(&img.scale(gain))
        })
        .collect()
}

/// `+1`, `-1`, or `0` for a zero (or NaN) gradient.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-level BEF weights, indexed `[level][exposure]`, each shaped like its
/// band. A single-channel map is shared by every channel of the band.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMaps {
    levels: Vec<Vec<Image>>,
}

impl WeightMaps {
    pub fn new(levels: Vec<Vec<Image>>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|l| l.is_empty()) {
            return Err(Error::dim("weight maps need at least one level and exposure"));
        }
        let n = levels[0].len();
        for lvl in &levels {
            if lvl.len() != n || lvl.iter().any(|m| !m.same_shape(&lvl[0])) {
                return Err(Error::dim("weight maps differ in exposure count or shape"));
            }
        }
        Ok(WeightMaps { levels })
    }

    /// `1 / N` everywhere.
    pub fn identity(height: usize, width: usize, channels: usize, levels: usize, exposures: usize) -> Self {
        let w = 1.0 / exposures as f64;
        WeightMaps {
            levels: crate::pyramid::level_sizes(height, width, levels)
                .into_iter()
                .map(|(h, wd)| vec![Image::filled(h, wd, channels, w); exposures])
                .collect(),
        }
    }

    /// All weight on exposure `j`.
    pub fn selector(height: usize, width: usize, channels: usize, levels: usize, exposures: usize, j: usize) -> Self {
        WeightMaps {
            levels: crate::pyramid::level_sizes(height, width, levels)
                .into_iter()
                .map(|(h, wd)| {
                    (0..exposures)
                        .map(|i| Image::filled(h, wd, channels, if i == j { 1.0 } else { 0.0 }))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn levels(&self) -> &[Vec<Image>] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Vec<Image>] {
        &mut self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_exposures(&self) -> usize {
        self.levels[0].len()
    }

    /// The equivalent `1 x 1` kernel field.
    pub fn to_kernel_field(&self) -> KernelField {
        KernelField {
            kernel_size: 1,
            levels: self
                .levels
                .iter()
                .map(|maps| {
                    let (h, w, c) = maps[0].shape();
                    KernelLevel {
                        height: h,
                        width: w,
                        channels: c,
                        kernels: maps.iter().map(|m| m.data().to_vec()).collect(),
                    }
                })
                .collect(),
        }
    }
}

/// Spatially varying kernels for one pyramid level. With `channels == 1` each
/// kernel is shared by every channel of the band.
///
/// `kernels[i][(pos * K * K) + tap]`, where `pos = (y * width + x) * channels + c`
/// and `tap = (dy + r) * K + (dx + r)` for offsets in `[-r, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLevel {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernels: Vec<Vec<f64>>,
}

impl KernelLevel {
    pub fn positions(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    kernel_size: usize,
    levels: Vec<KernelLevel>,
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd and positive, got {k}")));
    }
    Ok(())
}

impl KernelField {
    pub fn new(kernel_size: usize, levels: Vec<KernelLevel>) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        if levels.is_empty() {
            return Err(Error::dim("kernel field needs at least one level"));
        }
        let n = levels[0].kernels.len();
        let taps = kernel_size * kernel_size;
        for lvl in &levels {
            if lvl.kernels.len() != n || n == 0 {
                return Err(Error::dim("kernel field exposure count differs between levels"));
            }
            if lvl.kernels.iter().any(|k| k.len() != lvl.positions() * taps) {
                return Err(Error::dim("kernel field level has wrong number of taps"));
            }
        }
        Ok(KernelField { kernel_size, levels })
    }

    /// Centre tap `1 / N`, every other tap zero.
    pub fn identity(
        height: usize,
        width: usize,
        channels: usize,
        levels: usize,
        exposures: usize,
        kernel_size: usize,
    ) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        let taps = kernel_size * kernel_size;
        let centre = taps / 2;
        let levels = crate::pyramid::level_sizes(height, width, levels)
            .into_iter()
            .map(|(h, w)| {
                let positions = h * w * channels;
                let mut k = vec![0.0; positions * taps];
                for p in 0..positions {
                    k[p * taps + centre] = 1.0 / exposures as f64;
                }
                KernelLevel {
                    height: h,
                    width: w,
                    channels,
                    kernels: vec![k; exposures],
                }
            })
            .collect();
        Ok(KernelField {
            kernel_size,
            levels,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn levels(&self) -> &[KernelLevel] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [KernelLevel] {
        &mut self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_exposures(&self) -> usize {
        self.levels[0].kernels.len()
    }
}

/// Operations shared by BEF weight maps and CBEF kernel fields.
pub trait FusionParams: Clone + Send + Sync {
    fn num_levels(&self) -> usize;
    fn num_exposures(&self) -> usize;

    /// Fused pyramid of the bracket pyramids under these parameters.
    fn fuse_bands(&self, bands: &[Pyramid]) -> Result<Pyramid>;

    /// Gradient w.r.t. every parameter, given the gradient w.r.t. each fused band.
    fn gradient_from_bands(&self, bands: &[Pyramid], band_grads: &Pyramid) -> Result<Self>;

    /// Per-position renormalization to unit sum; degenerate sums reset to identity.
    fn project(&mut self);

    /// `max |sum - 1|` over all positions.
    fn max_constraint_violation(&self) -> f64;

    /// `self += alpha * sign(grad)`.
    fn sign_step(&mut self, grad: &Self, alpha: f64);

    /// Every parameter value, in a stable order.
    fn values(&self) -> Vec<f64>;
}

/// Parameters match a band spatially and have either one channel (shared by
/// every band channel) or one per band channel.
fn check_param_shape(param: (usize, usize, usize), band: (usize, usize, usize)) -> Result<()> {
    if param.0 != band.0 || param.1 != band.1 || (param.2 != 1 && param.2 != band.2) {
        return Err(Error::dim(format!("fusion parameters {param:?} do not fit band {band:?}")));
    }
    Ok(())
}

fn check_band_inputs(bands: &[Pyramid], levels: usize, exposures: usize) -> Result<()> {
    if bands.len() != exposures {
        return Err(Error::dim(format!(
            "{} bracket pyramids for {exposures} exposures",
            bands.len()
        )));
    }
    if bands.iter().any(|b| b.len() != levels) {
        return Err(Error::dim("bracket pyramid level count differs from parameters"));
    }
    Ok(())
}

impl FusionParams for WeightMaps {
    fn num_levels(&self) -> usize {
        self.levels.len()
    }

    fn num_exposures(&self) -> usize {
        self.levels[0].len()
    }

    fn fuse_bands(&self, bands: &[Pyramid]) -> Result<Pyramid> {
        check_band_inputs(bands, self.num_levels(), self.num_exposures())?;
        let mut fused = Vec::with_capacity(self.num_levels());
        for (l, maps) in self.levels.iter().enumerate() {
            let mut acc = bands[0].levels()[l].zeros_like();
            let c = acc.channels();
            for (i, w) in maps.iter().enumerate() {
                let band = &bands[i].levels()[l];
                check_param_shape(w.shape(), band.shape())?;
                if w.channels() == c {
                    for ((a, &wv), &bv) in acc.data_mut().iter_mut().zip(w.data()).zip(band.data()) {
                        *a += wv * bv;
                    }
                } else {
                    for ((a, bv), &wv) in acc.data_mut().chunks_mut(c).zip(band.data().chunks(c)).zip(w.data()) {
                        a.iter_mut().zip(bv).for_each(|(a, b)| *a += wv * b);
                    }
                }
            }
            fused.push(acc);
        }
        Pyramid::new(fused)
    }

    fn gradient_from_bands(&self, bands: &[Pyramid], band_grads: &Pyramid) -> Result<Self> {
        check_band_inputs(bands, self.num_levels(), self.num_exposures())?;
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(l, maps)| {
                let g = &band_grads.levels()[l];
                let (h, w, pc) = maps[0].shape();
                let c = g.channels();
                (0..maps.len())
                    .map(|i| {
                        let prod = g.zip_map(&bands[i].levels()[l], |gv, bv| gv * bv);
                        if pc == c {
                            prod
                        } else {
                            let summed = prod.data().chunks(c).map(|px| px.iter().sum()).collect();
                            Image::new(h, w, 1, summed).expect("sized from band")
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(WeightMaps { levels })
    }

    fn project(&mut self) {
        let n = self.num_exposures();
        for maps in &mut self.levels {
            let len = maps[0].data().len();
            for p in 0..len {
                let s: f64 = maps.iter().map(|m| m.data()[p]).sum();
                for m in maps.iter_mut() {
                    let v = &mut m.data_mut()[p];
                    *v = if s.abs() < DEGENERATE_SUM { 1.0 / n as f64 } else { *v / s };
                }
            }
        }
    }

    fn max_constraint_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for maps in &self.levels {
            for p in 0..maps[0].data().len() {
                let s: f64 = maps.iter().map(|m| m.data()[p]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    fn sign_step(&mut self, grad: &Self, alpha: f64) {
        for (maps, gmaps) in self.levels.iter_mut().zip(&grad.levels) {
            for (m, g) in maps.iter_mut().zip(gmaps) {
                for (v, &gv) in m.data_mut().iter_mut().zip(g.data()) {
                    *v += alpha * sign(gv);
                }
            }
        }
    }

    fn values(&self) -> Vec<f64> {
        self.levels
            .iter()
            .flatten()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }
}

impl KernelField {
    #[inline]
    fn offsets(&self) -> impl Iterator<Item = (usize, isize, isize)> {
        let k = self.kernel_size;
        let r = (k / 2) as isize;
        (0..k * k).map(move |t| (t, (t / k) as isize - r, (t % k) as isize - r))
    }
}

impl FusionParams for KernelField {
    fn num_levels(&self) -> usize {
        self.levels.len()
    }

    fn num_exposures(&self) -> usize {
        self.levels[0].kernels.len()
    }

    fn fuse_bands(&self, bands: &[Pyramid]) -> Result<Pyramid> {
        check_band_inputs(bands, self.num_levels(), self.num_exposures())?;
        let taps = self.kernel_size * self.kernel_size;
        let offsets: Vec<_> = self.offsets().collect();
        let mut fused = Vec::with_capacity(self.num_levels());
        for (l, lvl) in self.levels.iter().enumerate() {
            let (h, w, pc) = (lvl.height, lvl.width, lvl.channels);
            let c = bands[0].levels()[l].channels();
            let mut acc = Image::zeros(h, w, c);
            for (i, kern) in lvl.kernels.iter().enumerate() {
                let band = &bands[i].levels()[l];
                check_param_shape((h, w, pc), band.shape())?;
                let src = band.data();
                let dst = acc.data_mut();
                for y in 0..h {
                    for x in 0..w {
                        for &(t, dy, dx) in &offsets {
                            let sy = reflect(y as isize + dy, h);
                            let sx = reflect(x as isize + dx, w);
                            let s = (sy * w + sx) * c;
                            let p0 = (y * w + x) * c;
                            for ch in 0..c {
                                let k = (y * w + x) * pc + ch % pc;
                                dst[p0 + ch] += kern[k * taps + t] * src[s + ch];
                            }
                        }
                    }
                }
            }
            fused.push(acc);
        }
        Pyramid::new(fused)
    }

    fn gradient_from_bands(&self, bands: &[Pyramid], band_grads: &Pyramid) -> Result<Self> {
        check_band_inputs(bands, self.num_levels(), self.num_exposures())?;
        let taps = self.kernel_size * self.kernel_size;
        let offsets: Vec<_> = self.offsets().collect();
        let mut levels = Vec::with_capacity(self.levels.len());
        for (l, lvl) in self.levels.iter().enumerate() {
            let (h, w, pc) = (lvl.height, lvl.width, lvl.channels);
            let g = band_grads.levels()[l].data();
            let c = band_grads.levels()[l].channels();
            let mut kernels = Vec::with_capacity(lvl.kernels.len());
            for i in 0..lvl.kernels.len() {
                let band = &bands[i].levels()[l];
                check_param_shape((h, w, pc), band.shape())?;
                let src = band.data();
                let mut dk = vec![0.0; lvl.positions() * taps];
                for y in 0..h {
                    for x in 0..w {
                        for &(t, dy, dx) in &offsets {
                            let sy = reflect(y as isize + dy, h);
                            let sx = reflect(x as isize + dx, w);
                            let s = (sy * w + sx) * c;
                            let p0 = (y * w + x) * c;
                            for ch in 0..c {
                                let k = (y * w + x) * pc + ch % pc;
                                dk[k * taps + t] += g[p0 + ch] * src[s + ch];
                            }
                        }
                    }
                }
                kernels.push(dk);
            }
            levels.push(KernelLevel {
                height: h,
                width: w,
                channels: pc,
                kernels,
            });
        }
        Ok(KernelField {
            kernel_size: self.kernel_size,
            levels,
        })
    }

    fn project(&mut self) {
        let taps = self.kernel_size * self.kernel_size;
        let centre = taps / 2;
        let n = self.num_exposures() as f64;
        for lvl in &mut self.levels {
            for p in 0..lvl.positions() {
                let range = p * taps..(p + 1) * taps;
                let s: f64 = lvl.kernels.iter().map(|k| k[range.clone()].iter().sum::<f64>()).sum();
                for k in lvl.kernels.iter_mut() {
                    let kp = &mut k[range.clone()];
                    if s.abs() < DEGENERATE_SUM {
                        kp.iter_mut().for_each(|v| *v = 0.0);
                        kp[centre] = 1.0 / n;
                    } else {
                        kp.iter_mut().for_each(|v| *v /= s);
                    }
                }
            }
        }
    }

    fn max_constraint_violation(&self) -> f64 {
        let taps = self.kernel_size * self.kernel_size;
        let mut worst = 0.0f64;
        for lvl in &self.levels {
            for p in 0..lvl.positions() {
                let s: f64 = lvl
                    .kernels
                    .iter()
                    .map(|k| k[p * taps..(p + 1) * taps].iter().sum::<f64>())
                    .sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    fn sign_step(&mut self, grad: &Self, alpha: f64) {
        for (lvl, glvl) in self.levels.iter_mut().zip(&grad.levels) {
            for (k, gk) in lvl.kernels.iter_mut().zip(&glvl.kernels) {
                for (v, &gv) in k.iter_mut().zip(gk) {
                    *v += alpha * sign(gv);
                }
            }
        }
    }

    fn values(&self) -> Vec<f64> {
        self.levels
            .iter()
            .flat_map(|l| l.kernels.iter().flatten().copied())
            .collect()
    }
}

/// Bracket pyramids for one image, computed once and reused across attack iterations.
#[derive(Debug, Clone)]
pub struct BracketStack {
    bands: Vec<Pyramid>,
    levels: usize,
    shape: (usize, usize, usize),
}

impl BracketStack {
    pub fn new(img: &Image, spec: &BracketSpec, levels: usize) -> Result<Self> {
        spec.validate()?;
        Self::from_brackets(&generate_brackets(img, spec), levels)
    }

    pub fn from_brackets(brackets: &[Image], levels: usize) -> Result<Self> {
        let first = brackets
            .first()
            .ok_or_else(|| Error::invalid("no bracket images"))?;
        if brackets.iter().any(|b| !b.same_shape(first)) {
            return Err(Error::dim("bracket images differ in shape"));
        }
        check_levels(first.height(), first.width(), levels)?;
        let bands = brackets
            .iter()
            .map(|b| decompose(b, levels))
            .collect::<Result<Vec<_>>>()?;
        Ok(BracketStack {
            bands,
            levels,
            shape: first.shape(),
        })
    }

    pub fn bands(&self) -> &[Pyramid] {
        &self.bands
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn exposures(&self) -> usize {
        self.bands.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    /// Fused image before clamping.
    pub fn fuse_unclamped<P: FusionParams>(&self, params: &P) -> Result<Image> {
        reconstruct(&params.fuse_bands(&self.bands)?)
    }

    pub fn fuse<P: FusionParams>(&self, params: &P) -> Result<Image> {
        Ok(clamp01(&self.fuse_unclamped(params)?))
    }

    /// Gradient of `<clamp01(fuse(params)), grad_out>` w.r.t. the parameters.
    ///
    /// `unclamped` is the pre-clamp fusion; positions outside `[0, 1]` get zero gradient.
    pub fn param_gradient<P: FusionParams>(
        &self,
        params: &P,
        unclamped: &Image,
        grad_out: &Image,
    ) -> Result<P> {
        unclamped.check_same_shape(grad_out, "fused image vs output gradient")?;
        let masked = clamp_mask(unclamped, grad_out);
        let band_grads = reconstruct_adjoint(&masked, self.levels)?;
        params.gradient_from_bands(&self.bands, &band_grads)
    }
}

/// Zeroes `grad` wherever `value` lies outside `[0, 1]`.
pub fn clamp_mask(value: &Image, grad: &Image) -> Image {
    value.zip_map(grad, |v, g| if (0.0..=1.0).contains(&v) { g } else { 0.0 })
}

pub fn fuse_bef(brackets: &[Image], weights: &WeightMaps, levels: usize) -> Result<Image> {
    check_param_levels(weights.num_levels(), levels)?;
    BracketStack::from_brackets(brackets, levels)?.fuse(weights)
}

pub fn fuse_cbef(brackets: &[Image], kernels: &KernelField, levels: usize) -> Result<Image> {
    check_param_levels(kernels.num_levels(), levels)?;
    BracketStack::from_brackets(brackets, levels)?.fuse(kernels)
}

fn check_param_levels(have: usize, want: usize) -> Result<()> {
    if have != want {
        return Err(Error::dim(format!(
            "parameters have {have} levels, fusion requested {want}"
        )));
    }
    Ok(())
}

pub fn project_constraints<P: FusionParams>(params: &P) -> P {
    let mut out = params.clone();
    out.project();
    out
}

pub fn fusion_param_gradient<P: FusionParams>(
    brackets: &[Image],
    params: &P,
    levels: usize,
    grad_wrt_output: &Image,
) -> Result<P> {
    check_param_levels(params.num_levels(), levels)?;
    let stack = BracketStack::from_brackets(brackets, levels)?;
    let unclamped = stack.fuse_unclamped(params)?;
    stack.param_gradient(params, &unclamped, grad_wrt_output)
}

const PARAM_MAGIC: &[u8; 4] = b"EXPF";
const PARAM_VERSION: u32 = 1;

/// Writes a kernel field (BEF weights via [`WeightMaps::to_kernel_field`]).
///
/// Layout, all little-endian: magic `EXPF`, `u32` version (1), `u32` levels,
/// `u32` exposures, `u32` kernel size, `u32` channels, then `(u32 h, u32 w)`
/// per level, then `f64` values ordered level, exposure, position
/// `((y * w + x) * channels + c)`, tap.
pub fn write_params(path: impl AsRef<Path>, field: &KernelField) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAM_MAGIC);
    for v in [
        PARAM_VERSION,
        field.num_levels() as u32,
        field.num_exposures() as u32,
        field.kernel_size as u32,
        field.levels[0].channels as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for lvl in &field.levels {
        buf.extend_from_slice(&(lvl.height as u32).to_le_bytes());
        buf.extend_from_slice(&(lvl.width as u32).to_le_bytes());
    }
    for v in field.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<KernelField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(bytes.as_slice());
    let truncated = |_| Error::Format(format!("{}: truncated parameter file", path.display()));
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(truncated)?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Format(format!("{}: bad parameter magic", path.display())));
    }
    let read_u32 = |cur: &mut Cursor<&[u8]>| -> Result<usize> {
        let mut b = [0u8; 4];
        cur.read_exact(&mut b).map_err(truncated)?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let version = read_u32(&mut cur)?;
    if version != PARAM_VERSION as usize {
        return Err(Error::Format(format!("unsupported parameter version {version}")));
    }
    let (levels, exposures, k, channels) = (
        read_u32(&mut cur)?,
        read_u32(&mut cur)?,
        read_u32(&mut cur)?,
        read_u32(&mut cur)?,
    );
    let dims = (0..levels)
        .map(|_| Ok((read_u32(&mut cur)?, read_u32(&mut cur)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(levels);
    for (h, w) in dims {
        let count = h * w * channels * k * k;
        let kernels = (0..exposures)
            .map(|_| {
                (0..count)
                    .map(|_| {
                        let mut b = [0u8; 8];
                        cur.read_exact(&mut b).map_err(truncated)?;
                        Ok(f64::from_le_bytes(b))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(KernelLevel {
            height: h,
            width: w,
            channels,
            kernels,
        });
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    KernelField::new(k, out).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Image {
        Image::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..hi))
    }

    fn single(spec_shift: f64) -> BracketSpec {
        BracketSpec::new(1.0, vec![spec_shift]).unwrap()
    }

    fn perturbed_weights(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, l: usize, n: usize, amp: f64) -> WeightMaps {
        let mut wm = WeightMaps::identity(h, w, c, l, n);
        for maps in wm.levels_mut() {
            for m in maps.iter_mut() {
                m.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-amp..amp));
            }
        }
        wm.project();
        wm
    }

    fn perturbed_kernels(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, l: usize, n: usize, k: usize, amp: f64) -> KernelField {
        let mut kf = KernelField::identity(h, w, c, l, n, k).unwrap();
        for lvl in kf.levels_mut() {
            for kern in lvl.kernels.iter_mut() {
                kern.iter_mut().for_each(|v| *v += rng.gen_range(-amp..amp));
            }
        }
        kf.project();
        kf
    }

    #[test]
    fn bracket_examples() {
        let x = Image::filled(2, 3, 3, 0.25);
        let spec = BracketSpec::new(2.0, vec![0.0, 1.0, 2.0]).unwrap();
        let b = generate_brackets(&x, &spec);
        assert_eq!(b[0], x);
        assert!(b[1].data().iter().all(|&v| v == 0.5));
        assert!(b[2].data().iter().all(|&v| v == 1.0));
        let bright = generate_brackets(&Image::filled(2, 2, 1, 0.8), &single(1.0));
        assert!(bright[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn default_bracket_is_symmetric_five() {
        assert_eq!(BracketSpec::default().shifts, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(BracketSpec::new(1.0, vec![0.5, -0.5]).is_err());
        assert!(BracketSpec::new(1.0, vec![-1.5]).is_err());
        assert!(BracketSpec::new(0.0, vec![0.0]).is_err());
    }

    #[test]
    fn bef_single_exposure_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 16, 16, 3, 0.0, 1.0);
        for l in [1, 3, 5] {
            let brackets = generate_brackets(&x, &single(0.0));
            let w = WeightMaps::identity(16, 16, 3, l, 1);
            assert!(fuse_bef(&brackets, &w, l).unwrap().max_abs_diff(&x) < 1e-6);
        }
    }

    #[test]
    fn bef_uniform_weights_on_constant_closed_form() {
        for c in [0.1, 0.3, 0.5] {
            let x = Image::filled(12, 12, 1, c);
            let spec = BracketSpec::new(1.0, vec![-1.0, 0.0, 1.0]).unwrap();
            let brackets = generate_brackets(&x, &spec);
            let w = WeightMaps::identity(12, 12, 1, 3, 3);
            let out = fuse_bef(&brackets, &w, 3).unwrap();
            let expected = ((c / 2.0f64).clamp(0.0, 1.0) + c + (2.0 * c).clamp(0.0, 1.0)) / 3.0;
            assert!(out.data().iter().all(|v| (v - expected).abs() < 1e-6));
        }
    }

    #[test]
    fn bef_selector_picks_bracket() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 16, 20, 3, 0.0, 1.0);
        let brackets = generate_brackets(&x, &BracketSpec::default());
        for j in 0..5 {
            let w = WeightMaps::selector(16, 20, 3, 3, 5, j);
            assert!(fuse_bef(&brackets, &w, 3).unwrap().max_abs_diff(&brackets[j]) < 1e-6);
        }
    }

    #[test]
    fn cbef_identity_init_gives_bracket_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 16, 16, 3, 0.0, 1.0);
        let brackets = generate_brackets(&x, &BracketSpec::default());
        let kf = KernelField::identity(16, 16, 3, 3, 5, 3).unwrap();
        let out = fuse_cbef(&brackets, &kf, 3).unwrap();
        let mean = Image::from_fn(16, 16, 3, |y, xx, c| {
            brackets.iter().map(|b| b.get(y, xx, c)).sum::<f64>() / 5.0
        });
        assert!(out.max_abs_diff(&mean) < 1e-6);
    }

    #[test]
    fn cbef_single_exposure_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_image(&mut rng, 16, 16, 1, 0.0, 1.0);
        for l in [1, 3, 5] {
            let kf = KernelField::identity(16, 16, 1, l, 1, 5).unwrap();
            let out = fuse_cbef(&generate_brackets(&x, &single(0.0)), &kf, l).unwrap();
            assert!(out.max_abs_diff(&x) < 1e-6);
        }
    }

    #[test]
    fn cbef_k1_matches_bef() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (h, w) = (rng.gen_range(8..20), rng.gen_range(8..20));
            let x = random_image(&mut rng, h, w, 3, 0.0, 1.0);
            let brackets = generate_brackets(&x, &BracketSpec::default());
            let wm = perturbed_weights(&mut rng, h, w, 3, 3, 5, 0.5);
            let a = fuse_bef(&brackets, &wm, 3).unwrap();
            let b = fuse_cbef(&brackets, &wm.to_kernel_field(), 3).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }

    #[test]
    fn projection_examples() {
        let mk = |vals: [f64; 2]| {
            WeightMaps::new(vec![vals
                .iter()
                .map(|&v| Image::filled(1, 1, 1, v))
                .collect()])
            .unwrap()
        };
        let p = project_constraints(&mk([2.0, 2.0]));
        assert_eq!(p.values(), vec![0.5, 0.5]);
        let p = project_constraints(&mk([3.0, -1.0]));
        assert_eq!(p.values(), vec![1.5, -0.5]);
        let p = project_constraints(&mk([1.0, -1.0]));
        assert_eq!(p.values(), vec![0.5, 0.5]);
        let already = mk([0.25, 0.75]);
        let again = project_constraints(&already);
        for (a, b) in already.values().iter().zip(again.values()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn kernel_projection_resets_degenerate_positions() {
        let mut kf = KernelField::identity(2, 2, 1, 1, 2, 3).unwrap();
        kf.levels_mut()[0].kernels[0][..9].iter_mut().for_each(|v| *v = 0.0);
        kf.levels_mut()[0].kernels[1][..9].iter_mut().for_each(|v| *v = 0.0);
        kf.levels_mut()[0].kernels[0][0] = 1.0;
        kf.levels_mut()[0].kernels[1][1] = -1.0;
        kf.project();
        assert_eq!(kf.levels()[0].kernels[0][..9], [0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert!(kf.max_constraint_violation() < 1e-12);
    }

    #[test]
    fn zero_output_gradient_gives_zero_param_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image(&mut rng, 8, 8, 2, 0.0, 1.0);
        let brackets = generate_brackets(&x, &BracketSpec::default());
        let kf = KernelField::identity(8, 8, 2, 2, 5, 3).unwrap();
        let g = fusion_param_gradient(&brackets, &kf, 2, &Image::zeros(8, 8, 2)).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    /// Central-difference check of `<clamp01(fuse(params)), g>` against the analytic gradient.
    fn check_gradient<P: FusionParams>(
        brackets: &[Image],
        params: &P,
        levels: usize,
        g: &Image,
        set: impl Fn(&mut P, usize, f64),
    ) {
        let grad = fusion_param_gradient(brackets, params, levels, g).unwrap().values();
        let base = params.values();
        let step = 1e-3;
        let stack = BracketStack::from_brackets(brackets, levels).unwrap();
        for (idx, an) in grad.iter().enumerate() {
            let mut plus = params.clone();
            set(&mut plus, idx, base[idx] + step);
            let mut minus = params.clone();
            set(&mut minus, idx, base[idx] - step);
            let fd = (stack.fuse(&plus).unwrap().dot(g) - stack.fuse(&minus).unwrap().dot(g)) / (2.0 * step);
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs().max(1e-6),
                "param {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn set_weight(wm: &mut WeightMaps, mut idx: usize, v: f64) {
        for maps in wm.levels_mut() {
            for m in maps.iter_mut() {
                if idx < m.data().len() {
                    m.data_mut()[idx] = v;
                    return;
                }
                idx -= m.data().len();
            }
        }
        panic!("index out of range");
    }

    fn set_tap(kf: &mut KernelField, mut idx: usize, v: f64) {
        for lvl in kf.levels_mut() {
            for k in lvl.kernels.iter_mut() {
                if idx < k.len() {
                    k[idx] = v;
                    return;
                }
                idx -= k.len();
            }
        }
        panic!("index out of range");
    }

    #[test]
    fn bef_single_level_gradient_is_bracket_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_image(&mut rng, 6, 6, 1, 0.3, 0.45);
        let brackets = generate_brackets(&x, &BracketSpec::default());
        let wm = WeightMaps::identity(6, 6, 1, 1, 5);
        let g = Image::filled(6, 6, 1, 1.0);
        let grad = fusion_param_gradient(&brackets, &wm, 1, &g).unwrap();
        for (i, m) in grad.levels()[0].iter().enumerate() {
            assert!(m.max_abs_diff(&brackets[i]) < 1e-15);
        }
        check_gradient(&brackets, &wm, 1, &g, set_weight);
    }

    #[test]
    fn bef_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x = random_image(&mut rng, 8, 8, 2, 0.3, 0.45);
            let brackets = generate_brackets(&x, &BracketSpec::default());
            let wm = perturbed_weights(&mut rng, 8, 8, 2, 2, 5, 0.05);
            let g = random_image(&mut rng, 8, 8, 2, -1.0, 1.0);
            check_gradient(&brackets, &wm, 2, &g, set_weight);
        }
    }

    #[test]
    fn cbef_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = BracketSpec::new(1.0, vec![-1.0, 0.5]).unwrap();
        for _ in 0..3 {
            let x = random_image(&mut rng, 8, 8, 1, 0.3, 0.45);
            let brackets = generate_brackets(&x, &spec);
            let kf = perturbed_kernels(&mut rng, 8, 8, 1, 2, 2, 3, 0.02);
            let g = random_image(&mut rng, 8, 8, 1, -1.0, 1.0);
            check_gradient(&brackets, &kf, 2, &g, set_tap);
        }
    }

    fn replicate_kernels(shared: &KernelField, c: usize) -> KernelField {
        let levels = shared
            .levels()
            .iter()
            .map(|lvl| KernelLevel {
                height: lvl.height,
                width: lvl.width,
                channels: c,
                kernels: lvl
                    .kernels
                    .iter()
                    .map(|k| {
                        let kk = shared.kernel_size() * shared.kernel_size();
                        k.chunks(kk).flat_map(|taps| std::iter::repeat(taps).take(c).flatten().copied()).collect()
                    })
                    .collect(),
            })
            .collect();
        KernelField::new(shared.kernel_size(), levels).unwrap()
    }

    #[test]
    fn shared_kernels_match_replicated_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_image(&mut rng, 10, 12, 3, 0.2, 0.5);
        let brackets = generate_brackets(&x, &BracketSpec::default());
        let shared = perturbed_kernels(&mut rng, 10, 12, 1, 2, 5, 3, 0.05);
        let full = replicate_kernels(&shared, 3);
        let a = fuse_cbef(&brackets, &shared, 2).unwrap();
        let b = fuse_cbef(&brackets, &full, 2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);

        let g = random_image(&mut rng, 10, 12, 3, -1.0, 1.0);
        let gs = fusion_param_gradient(&brackets, &shared, 2, &g).unwrap();
        let gf = fusion_param_gradient(&brackets, &full, 2, &g).unwrap();
        for (ls, lf) in gs.levels().iter().zip(gf.levels()) {
            for (ks, kf) in ls.kernels.iter().zip(&lf.kernels) {
                for (pos, taps) in ks.chunks(9).enumerate() {
                    for (t, &v) in taps.iter().enumerate() {
                        let summed: f64 = (0..3).map(|ch| kf[(pos * 3 + ch) * 9 + t]).sum();
                        assert!((v - summed).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn shared_weights_match_replicated_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_image(&mut rng, 9, 11, 3, 0.2, 0.5);
        let brackets = generate_brackets(&x, &BracketSpec::default());
        let shared = perturbed_weights(&mut rng, 9, 11, 1, 3, 5, 0.05);
        let full = WeightMaps::new(
            shared
                .levels()
                .iter()
                .map(|maps| maps.iter().map(|m| Image::from_fn(m.height(), m.width(), 3, |y, xx, _| m.get(y, xx, 0))).collect())
                .collect(),
        )
        .unwrap();
        let a = fuse_bef(&brackets, &shared, 3).unwrap();
        let b = fuse_bef(&brackets, &full, 3).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn shared_param_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_image(&mut rng, 8, 8, 3, 0.3, 0.45);
        let brackets = generate_brackets(&x, &BracketSpec::default());
        let g = random_image(&mut rng, 8, 8, 3, -1.0, 1.0);
        let wm = perturbed_weights(&mut rng, 8, 8, 1, 2, 5, 0.05);
        check_gradient(&brackets, &wm, 2, &g, set_weight);
        let kf = perturbed_kernels(&mut rng, 8, 8, 1, 2, 5, 3, 0.02);
        check_gradient(&brackets, &kf, 2, &g, set_tap);
    }

    #[test]
    fn param_channel_mismatch_is_rejected() {
        let x = Image::filled(8, 8, 3, 0.5);
        let brackets = generate_brackets(&x, &BracketSpec::default());
        let wm = WeightMaps::identity(8, 8, 2, 2, 5);
        assert!(fuse_bef(&brackets, &wm, 2).is_err());
    }

    #[test]
    fn gradient_is_zero_where_clamped() {
        let x = Image::filled(4, 4, 1, 0.9);
        let brackets = generate_brackets(&x, &BracketSpec::new(1.0, vec![0.0]).unwrap());
        let mut wm = WeightMaps::identity(4, 4, 1, 1, 1);
        wm.levels_mut()[0][0] = Image::filled(4, 4, 1, 2.0);
        let g = fusion_param_gradient(&brackets, &wm, 1, &Image::filled(4, 4, 1, 1.0)).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn level_mismatch_is_dimension_error() {
        let x = Image::filled(8, 8, 1, 0.5);
        let brackets = generate_brackets(&x, &BracketSpec::default());
        let wm = WeightMaps::identity(8, 8, 1, 2, 5);
        assert!(matches!(fuse_bef(&brackets, &wm, 3), Err(Error::Dimension(_))));
        let wm16 = WeightMaps::identity(16, 16, 1, 2, 5);
        assert!(matches!(fuse_bef(&brackets, &wm16, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn param_file_round_trip_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let kf = perturbed_kernels(&mut rng, 9, 7, 3, 2, 3, 3, 0.3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.bin");
        write_params(&p, &kf).unwrap();
        assert_eq!(read_params(&p).unwrap(), kf);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_params(&p), Err(Error::Format(_))));
    }

    proptest::proptest! {
        #[test]
        fn projection_is_idempotent_and_normalizes(seed in 0u64..500, k in proptest::sample::select(vec![1usize, 3, 5])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kf = perturbed_kernels(&mut rng, 6, 5, 2, 2, 3, k, 2.0);
            proptest::prop_assert!(kf.max_constraint_violation() < 1e-6);
            let again = project_constraints(&kf);
            for (a, b) in kf.values().iter().zip(again.values()) {
                proptest::prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }

        #[test]
        fn brackets_monotone_before_clamp(v in 0.0f64..1.0, ea in -2.0f64..2.0, eb in -2.0f64..2.0) {
            let (lo, hi) = if ea <= eb { (ea, eb) } else { (eb, ea) };
            proptest::prop_assert!(v * lo.exp2() <= v * hi.exp2());
        }
    }
}
