//! Layer kernels with hand-written forward and reverse passes.
//!
//! Parameters are stored as `f32`; all arithmetic runs in `f64`.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Zero-padded, stride-1 "same" convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Per-channel ("depthwise") same convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Depthwise {
    pub channels: usize,
    pub kernel: usize,
    /// `[channel][ky][kx]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Fixed per-channel `(x - mean) / std`; not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardize {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardize {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::dim("standardize needs one mean and one std per channel"));
        }
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("standardize needs finite means and positive stds"));
        }
        Ok(Standardize { mean, std })
    }

    /// Maps `[0, 1]` to `[-1, 1]` on every channel.
    pub fn unit(channels: usize) -> Self {
        Standardize {
            mean: vec![0.5; channels],
            std: vec![0.5; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Standardize(Standardize),
    Conv2d(Conv2d),
    Depthwise(Depthwise),
    Relu,
    /// 2x2 window, stride 2; a trailing odd row/column is dropped.
    MaxPool2,
    GlobalAvgPool,
    Dense(Dense),
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }
}

impl Depthwise {
    pub fn zeros(channels: usize, kernel: usize) -> Self {
        Depthwise {
            channels,
            kernel,
            weight: vec![0.0; channels * kernel * kernel],
            bias: vec![0.0; channels],
        }
    }
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

/// Valid output range for a spatial offset `d` on an axis of length `n`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// `out += wv * shift(inp, dy, dx)` over the valid region of one plane.
#[inline]
fn accumulate_shifted(out: &mut [f64], inp: &[f64], h: usize, w: usize, dy: isize, dx: isize, wv: f64) {
    let (y0, y1) = span(dy, h);
    let (x0, x1) = span(dx, w);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let orow = &mut out[y * w + x0..y * w + x1];
        let sx0 = (x0 as isize + dx) as usize;
        let irow = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (a, &b) in orow.iter_mut().zip(irow) {
            *a += wv * b;
        }
    }
}

/// Transpose of [`accumulate_shifted`] w.r.t. `inp`.
#[inline]
fn scatter_shifted(grad_in: &mut [f64], grad_out: &[f64], h: usize, w: usize, dy: isize, dx: isize, wv: f64) {
    let (y0, y1) = span(dy, h);
    let (x0, x1) = span(dx, w);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let grow = &grad_out[y * w + x0..y * w + x1];
        let irow = &mut grad_in[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (a, &g) in irow.iter_mut().zip(grow) {
            *a += wv * g;
        }
    }
}

/// `sum g(y, x) * inp(y + dy, x + dx)` over the valid region.
#[inline]
fn correlate_shifted(grad_out: &[f64], inp: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = span(dy, h);
    let (x0, x1) = span(dx, w);
    if x0 >= x1 {
        return 0.0;
    }
    let mut s = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let grow = &grad_out[y * w + x0..y * w + x1];
        let irow = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        s += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

impl Layer {
    /// Output `(c, h, w)` for an input of shape `(c, h, w)`.
    pub fn output_shape(&self, shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = shape;
        match self {
            Layer::Standardize(l) => {
                if c != l.mean.len() {
                    return Err(Error::dim(format!("standardize expects {} channels, got {c}", l.mean.len())));
                }
                Ok(shape)
            }
            Layer::Conv2d(l) => {
                if c != l.in_channels {
                    return Err(Error::dim(format!("conv expects {} channels, got {c}", l.in_channels)));
                }
                Ok((l.out_channels, h, w))
            }
            Layer::Depthwise(l) => {
                if c != l.channels {
                    return Err(Error::dim(format!("depthwise conv expects {} channels, got {c}", l.channels)));
                }
                Ok((c, h, w))
            }
            Layer::Relu => Ok(shape),
            Layer::MaxPool2 => {
                if h < 2 || w < 2 {
                    return Err(Error::dim(format!("max-pool needs at least 2x2 input, got {h}x{w}")));
                }
                Ok((c, h / 2, w / 2))
            }
            Layer::GlobalAvgPool => Ok((c, 1, 1)),
            Layer::Dense(l) => {
                if c * h * w != l.inputs {
                    return Err(Error::dim(format!("dense expects {} inputs, got {}", l.inputs, c * h * w)));
                }
                Ok((l.outputs, 1, 1))
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Standardize(l) => {
                let mut out = x.clone();
                for ch in 0..x.c {
                    let (m, s) = (l.mean[ch] as f64, l.std[ch] as f64);
                    out.plane_mut(ch).iter_mut().for_each(|v| *v = (*v - m) / s);
                }
                out
            }
            Layer::Conv2d(l) => {
                let (h, w, k) = (x.h, x.w, l.kernel);
                let r = (k / 2) as isize;
                let mut out = Tensor::zeros(l.out_channels, h, w);
                for o in 0..l.out_channels {
                    let plane = out.plane_mut(o);
                    plane.fill(l.bias[o] as f64);
                    for i in 0..l.in_channels {
                        let inp = x.plane(i);
                        let base = (o * l.in_channels + i) * k * k;
                        for t in 0..k * k {
                            let (dy, dx) = ((t / k) as isize - r, (t % k) as isize - r);
                            accumulate_shifted(plane, inp, h, w, dy, dx, l.weight[base + t] as f64);
                        }
                    }
                }
                out
            }
            Layer::Depthwise(l) => {
                let (h, w, k) = (x.h, x.w, l.kernel);
                let r = (k / 2) as isize;
                let mut out = Tensor::zeros(l.channels, h, w);
                for ch in 0..l.channels {
                    let plane = out.plane_mut(ch);
                    plane.fill(l.bias[ch] as f64);
                    let inp = x.plane(ch);
                    for t in 0..k * k {
                        let (dy, dx) = ((t / k) as isize - r, (t % k) as isize - r);
                        accumulate_shifted(plane, inp, h, w, dy, dx, l.weight[ch * k * k + t] as f64);
                    }
                }
                out
            }
            Layer::Relu => Tensor {
                data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                ..*x
            },
            Layer::MaxPool2 => {
                let (oh, ow) = (x.h / 2, x.w / 2);
                let mut out = Tensor::zeros(x.c, oh, ow);
                for ch in 0..x.c {
                    let inp = x.plane(ch);
                    let o = out.plane_mut(ch);
                    for y in 0..oh {
                        for xx in 0..ow {
                            let (_, v) = pool_argmax(inp, x.w, y, xx);
                            o[y * ow + xx] = v;
                        }
                    }
                }
                out
            }
            Layer::GlobalAvgPool => {
                let n = (x.h * x.w) as f64;
                Tensor::vector((0..x.c).map(|ch| x.plane(ch).iter().sum::<f64>() / n).collect())
            }
            Layer::Dense(l) => {
                let out = (0..l.outputs)
                    .map(|o| {
                        let row = &l.weight[o * l.inputs..(o + 1) * l.inputs];
                        l.bias[o] as f64
                            + row.iter().zip(&x.data).map(|(&wv, &xv)| wv as f64 * xv).sum::<f64>()
                    })
                    .collect();
                Tensor::vector(out)
            }
        }
    }

    /// Input gradient, accumulating parameter gradients into `param_grads`
    /// (`[weight, bias]`) when given.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, param_grads: Option<&mut [Vec<f64>]>) -> Tensor {
        match self {
            Layer::Standardize(l) => {
                let mut gin = grad_out.clone();
                for ch in 0..x.c {
                    let s = l.std[ch] as f64;
                    gin.plane_mut(ch).iter_mut().for_each(|v| *v /= s);
                }
                gin
            }
            Layer::Conv2d(l) => {
                let (h, w, k) = (x.h, x.w, l.kernel);
                let r = (k / 2) as isize;
                let mut gin = Tensor::zeros(l.in_channels, h, w);
                for o in 0..l.out_channels {
                    let g = grad_out.plane(o);
                    for i in 0..l.in_channels {
                        let base = (o * l.in_channels + i) * k * k;
                        let gi = gin.plane_mut(i);
                        for t in 0..k * k {
                            let (dy, dx) = ((t / k) as isize - r, (t % k) as isize - r);
                            scatter_shifted(gi, g, h, w, dy, dx, l.weight[base + t] as f64);
                        }
                    }
                }
                if let Some(pg) = param_grads {
                    for o in 0..l.out_channels {
                        let g = grad_out.plane(o);
                        for i in 0..l.in_channels {
                            let inp = x.plane(i);
                            let base = (o * l.in_channels + i) * k * k;
                            for t in 0..k * k {
                                let (dy, dx) = ((t / k) as isize - r, (t % k) as isize - r);
                                pg[0][base + t] += correlate_shifted(g, inp, h, w, dy, dx);
                            }
                        }
                        pg[1][o] += g.iter().sum::<f64>();
                    }
                }
                gin
            }
            Layer::Depthwise(l) => {
                let (h, w, k) = (x.h, x.w, l.kernel);
                let r = (k / 2) as isize;
                let mut gin = Tensor::zeros(l.channels, h, w);
                for ch in 0..l.channels {
                    let g = grad_out.plane(ch);
                    let gi = gin.plane_mut(ch);
                    for t in 0..k * k {
                        let (dy, dx) = ((t / k) as isize - r, (t % k) as isize - r);
                        scatter_shifted(gi, g, h, w, dy, dx, l.weight[ch * k * k + t] as f64);
                    }
                }
                if let Some(pg) = param_grads {
                    for ch in 0..l.channels {
                        let g = grad_out.plane(ch);
                        let inp = x.plane(ch);
                        for t in 0..k * k {
                            let (dy, dx) = ((t / k) as isize - r, (t % k) as isize - r);
                            pg[0][ch * k * k + t] += correlate_shifted(g, inp, h, w, dy, dx);
                        }
                        pg[1][ch] += g.iter().sum::<f64>();
                    }
                }
                gin
            }
            Layer::Relu => Tensor {
                data: x
                    .data
                    .iter()
                    .zip(&grad_out.data)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                ..*x
            },
            Layer::MaxPool2 => {
                let (oh, ow) = (x.h / 2, x.w / 2);
                let mut gin = Tensor::zeros(x.c, x.h, x.w);
                for ch in 0..x.c {
                    let inp = x.plane(ch);
                    let g = grad_out.plane(ch);
                    let gi = gin.plane_mut(ch);
                    for y in 0..oh {
                        for xx in 0..ow {
                            let (idx, _) = pool_argmax(inp, x.w, y, xx);
                            gi[idx] += g[y * ow + xx];
                        }
                    }
                }
                gin
            }
            Layer::GlobalAvgPool => {
                let n = x.h * x.w;
                let mut gin = Tensor::zeros(x.c, x.h, x.w);
                for ch in 0..x.c {
                    let v = grad_out.data[ch] / n as f64;
                    gin.plane_mut(ch).fill(v);
                }
                gin
            }
            Layer::Dense(l) => {
                let mut gin = vec![0.0; l.inputs];
                for o in 0..l.outputs {
                    let g = grad_out.data[o];
                    let row = &l.weight[o * l.inputs..(o + 1) * l.inputs];
                    for (gi, &wv) in gin.iter_mut().zip(row) {
                        *gi += wv as f64 * g;
                    }
                }
                if let Some(pg) = param_grads {
                    for o in 0..l.outputs {
                        let g = grad_out.data[o];
                        let row = &mut pg[0][o * l.inputs..(o + 1) * l.inputs];
                        for (d, &xv) in row.iter_mut().zip(&x.data) {
                            *d += g * xv;
                        }
                        pg[1][o] += g;
                    }
                }
                Tensor {
                    c: x.c,
                    h: x.h,
                    w: x.w,
                    data: gin,
                }
            }
        }
    }

    pub fn params(&self) -> Vec<&[f32]> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::Depthwise(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Depthwise(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Fan-in used for He initialization of the weight tensor.
    pub(crate) fn fan_in(&self) -> usize {
        match self {
            Layer::Conv2d(l) => l.in_channels * l.kernel * l.kernel,
            Layer::Depthwise(l) => l.kernel * l.kernel,
            Layer::Dense(l) => l.inputs,
            _ => 0,
        }
    }
}

/// Flat index and value of the maximum in 2x2 window `(y, x)`; first wins on ties.
#[inline]
fn pool_argmax(plane: &[f64], w: usize, y: usize, x: usize) -> (usize, f64) {
    let mut best = (2 * y * w + 2 * x, f64::NEG_INFINITY);
    for dy in 0..2 {
        for dx in 0..2 {
            let idx = (2 * y + dy) * w + 2 * x + dx;
            if plane[idx] > best.1 {
                best = (idx, plane[idx]);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            c,
            h,
            w,
            // Keep clear of the ReLU kink so central differences stay on one side.
            data: (0..c * h * w)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.05..1.0);
                    if rng.gen::<bool>() { v } else { -v }
                })
                .collect(),
        }
    }

    fn randomize(layer: &mut Layer, rng: &mut ChaCha8Rng) {
        for p in layer.params_mut() {
            p.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }

    fn check_layer(layer: &Layer, x: &Tensor, rng: &mut ChaCha8Rng) {
        let shape = layer.output_shape((x.c, x.h, x.w)).unwrap();
        let g = random_tensor(rng, shape.0, shape.1, shape.2);
        let objective = |t: &Tensor| -> f64 {
            layer.forward(t).data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let gin = layer.backward(x, &g, None);
        let step = 1e-3;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data[i] += step;
            let mut m = x.clone();
            m.data[i] -= step;
            let fd = (objective(&p) - objective(&m)) / (2.0 * step);
            let an = gin.data[i];
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-6),
                "{layer:?} input {i}: fd {fd} vs {an}"
            );
        }
        // Parameters are f32: divide by the step actually stored.
        let mut pg: Vec<Vec<f64>> = layer.params().iter().map(|p| vec![0.0; p.len()]).collect();
        if pg.is_empty() {
            return;
        }
        layer.backward(x, &g, Some(&mut pg));
        for (slot, grads) in pg.iter().enumerate() {
            for (j, &an) in grads.iter().enumerate().step_by(3) {
                let base = layer.params()[slot][j];
                let step = 1.0f32 / 256.0;
                let mut plus = layer.clone();
                plus.params_mut()[slot][j] = base + step;
                let mut minus = layer.clone();
                minus.params_mut()[slot][j] = base - step;
                let f = |l: &Layer| -> f64 { l.forward(x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum() };
                let delta = plus.params()[slot][j] as f64 - minus.params()[slot][j] as f64;
                let fd = (f(&plus) - f(&minus)) / delta;
                assert!(
                    (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-6),
                    "{layer:?} param {slot}/{j}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3, 5] {
            let mut layer = Layer::Conv2d(Conv2d::zeros(2, 3, k));
            randomize(&mut layer, &mut rng);
            let x = random_tensor(&mut rng, 2, 5, 6);
            check_layer(&layer, &x, &mut rng);
        }
    }

    #[test]
    fn depthwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = Layer::Depthwise(Depthwise::zeros(3, 3));
        randomize(&mut layer, &mut rng);
        let x = random_tensor(&mut rng, 3, 6, 4);
        check_layer(&layer, &x, &mut rng);
    }

    #[test]
    fn dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Layer::Dense(Dense::zeros(12, 4));
        randomize(&mut layer, &mut rng);
        let x = random_tensor(&mut rng, 3, 2, 2);
        check_layer(&layer, &x, &mut rng);
    }

    #[test]
    fn elementwise_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let standardize = Layer::Standardize(Standardize::new(vec![0.3, -0.1], vec![0.25, 2.0]).unwrap());
        for layer in [standardize, Layer::Relu, Layer::MaxPool2, Layer::GlobalAvgPool] {
            let x = random_tensor(&mut rng, 2, 6, 7);
            check_layer(&layer, &x, &mut rng);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = Conv2d::zeros(2, 2, 3);
        layer.weight.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        layer.bias = vec![0.25, -0.5];
        let x = random_tensor(&mut rng, 2, 4, 5);
        let out = Layer::Conv2d(layer.clone()).forward(&x);
        for o in 0..2 {
            for y in 0..4isize {
                for xx in 0..5isize {
                    let mut s = layer.bias[o] as f64;
                    for i in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                    let wv = layer.weight[((o * 2 + i) * 3 + ky as usize) * 3 + kx as usize] as f64;
                                    s += wv * x.data[(i * 4 + sy as usize) * 5 + sx as usize];
                                }
                            }
                        }
                    }
                    let got = out.data[(o * 4 + y as usize) * 5 + xx as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(Layer::Conv2d(Conv2d::zeros(3, 4, 3)).output_shape((2, 8, 8)).is_err());
        assert!(Layer::Dense(Dense::zeros(10, 2)).output_shape((3, 2, 2)).is_err());
        assert!(Layer::MaxPool2.output_shape((1, 1, 4)).is_err());
        assert_eq!(Layer::MaxPool2.output_shape((1, 5, 4)).unwrap(), (1, 2, 2));
    }
}
