//! Float image container, 8-bit file I/O and dataset manifests.
//!
//! Pixels are stored row-major, interleaved (`(y * width + x) * channels + c`),
//! with intensities nominally in `[0, 1]`. Intermediate results (pyramid bands,
//! unclamped fusions) may leave that range; only operations documented as
//! clamping guarantee it.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty image");
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// An all-zero image with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.height, self.width, self.channels)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Element-wise combination of two same-shaped images.
    ///
    /// Panics on shape mismatch; callers validate shapes at API boundaries.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        assert!(self.same_shape(other), "zip_map shape mismatch");
        Image {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        }
    }

    pub fn add_assign(&mut self, other: &Image) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Image {
        self.map(|v| v * s)
    }

    pub fn dot(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Single-channel luminance (`0.299 R + 0.587 G + 0.114 B`); gray images are copied.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let c = self.channels;
        let data = self
            .data
            .chunks_exact(c)
            .map(|px| {
                if c >= 3 {
                    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
                } else {
                    px.iter().sum::<f64>() / c as f64
                }
            })
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Extracts channel `c` as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        assert!(c < self.channels);
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }
}

/// Clamps every intensity into `[0, 1]`.
pub fn clamp01(img: &Image) -> Image {
    img.map(clamp_unit)
}

#[inline]
pub fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Reads an 8-bit PNG, PPM or PGM file, mapping bytes to `[0, 1]` by `/255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, bytes) = match decoded {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported pixel layout {:?} (expected 8-bit gray or RGB)",
                path.display(),
                other.color()
            )))
        }
    };
    let data = bytes.into_iter().map(|b| b as f64 / 255.0).collect();
    Image::new(h, w, channels, data)
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

/// Writes a PNG (gray for 1 channel, RGB for 3). Values are clamped then rounded to 8 bits.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let result = match img.channels {
        1 => GrayImage::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save_with_format(path, image::ImageFormat::Png),
        3 => RgbImage::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save_with_format(path, image::ImageFormat::Png),
        c => {
            return Err(Error::Format(format!(
                "cannot save {c}-channel image as PNG"
            )))
        }
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    filename: String,
    label: usize,
}

/// Loads a `filename,label` CSV manifest; image paths are relative to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<LabeledSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["filename", "label"] {
        return Err(Error::Format(format!(
            "{}: manifest header must be `filename,label`",
            path.display()
        )));
    }
    let mut samples = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if row.label >= num_classes {
            return Err(Error::Format(format!(
                "{}: label {} out of range for {num_classes} classes",
                row.filename, row.label
            )));
        }
        let image = load_image(base.join(&row.filename))?;
        samples.push(LabeledSample {
            image,
            label: row.label,
            id: row.filename,
        });
    }
    Ok(samples)
}

/// Writes each sample as `<id>.png` (id sanitized) under `dir` plus `manifest.csv`.
pub fn write_manifest(samples: &[LabeledSample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest.display())))?;
    writer
        .write_record(["filename", "label"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for s in samples {
        let name = if s.id.ends_with(".png") {
            s.id.clone()
        } else {
            format!("{}.png", s.id)
        };
        save_image(&s.image, dir.join(&name))?;
        writer
            .write_record([name.as_str(), &s.label.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ppm_all_255_loads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend(std::iter::repeat(255u8).take(12));
        fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.shape(), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn png_gray_bytes_map_by_255() {
        let dir = tempfile::tempdir().unwrap();
        for (byte, expected) in [(0u8, 0.0), (128u8, 128.0 / 255.0)] {
            let p = dir.path().join(format!("g{byte}.png"));
            GrayImage::from_raw(1, 1, vec![byte]).unwrap().save(&p).unwrap();
            let img = load_image(&p).unwrap();
            assert_eq!(img.shape(), (1, 1, 1));
            assert_eq!(img.get(0, 0, 0), expected);
        }
        assert!((128.0f64 / 255.0 - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn save_extremes_write_extreme_bytes() {
        let dir = tempfile::tempdir().unwrap();
        for (v, byte) in [(0.0, 0u8), (1.0, 255u8)] {
            let p = dir.path().join(format!("e{byte}.png"));
            save_image(&Image::filled(3, 4, 3, v), &p).unwrap();
            let raw = image::open(&p).unwrap().into_rgb8().into_raw();
            assert!(raw.iter().all(|&b| b == byte));
        }
    }

    #[test]
    fn random_round_trip_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for channels in [1, 3] {
            let img = Image::from_fn(7, 5, channels, |_, _, _| rng.gen::<f64>());
            let p = dir.path().join(format!("r{channels}.png"));
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.shape(), img.shape());
            assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/nonexistent/zzz.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn sixteen_bit_png_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(2, 2, vec![0u16, 1000, 40000, 65535]).unwrap();
        buf.save(&p).unwrap();
        assert!(matches!(load_image(&p).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn garbage_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        fs::write(&p, b"definitely not an image").unwrap();
        assert!(matches!(load_image(&p).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn clamp_examples() {
        let img = Image::new(1, 3, 1, vec![1.7, -0.2, 0.42]).unwrap();
        let c = clamp01(&img);
        assert_eq!(c.data(), &[1.0, 0.0, 0.42]);
        assert_eq!(clamp01(&c), c);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_image(&Image::zeros(2, 2, 1), "/nonexistent-dir/x/y.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..3)
            .map(|i| LabeledSample {
                image: Image::filled(4, 4, 3, i as f64 / 4.0),
                label: i,
                id: format!("s{i}"),
            })
            .collect();
        let manifest = write_manifest(&samples, dir.path()).unwrap();
        let back = load_manifest(&manifest, 5).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2].label, 2);
        assert_eq!(back[1].id, "s1.png");
        assert!(back[1].image.max_abs_diff(&samples[1].image) <= 1.0 / 510.0);
        assert!(load_manifest(&manifest, 2).is_err());
    }

    #[test]
    fn luminance_weights() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((img.luminance().get(0, 0, 0) - 0.299).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn clamp_is_idempotent(v in proptest::collection::vec(-3.0f64..3.0, 1..64)) {
            let img = Image::new(1, v.len(), 1, v).unwrap();
            let once = clamp01(&img);
            proptest::prop_assert_eq!(clamp01(&once), once.clone());
            proptest::prop_assert!(once.in_unit_range());
        }
    }
}
