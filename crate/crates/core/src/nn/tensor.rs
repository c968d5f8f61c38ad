use crate::image::Image;

/// Channel-major activation volume (`c x h x w`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            c: data.len(),
            h: 1,
            w: 1,
            data,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn plane(&self, ch: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn from_image(img: &Image) -> Self {
        let (h, w, c) = img.shape();
        let mut t = Tensor::zeros(c, h, w);
        for (p, px) in img.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                t.data[ch * h * w + p] = v;
            }
        }
        t
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.h, self.w, self.c, |y, x, ch| {
            self.data[(ch * self.h + y) * self.w + x]
        })
    }
}
