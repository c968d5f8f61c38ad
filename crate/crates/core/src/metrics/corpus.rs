use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;

use super::brisque::brisque_features;

/// Smallest corpus accepted by [`CorpusModel::fit`].
pub const MIN_CORPUS: usize = 30;
/// Weight of the diagonal target in the shrunk covariance.
pub const SHRINKAGE: f64 = 0.1;
const RIDGE: f64 = 1e-9;

const CORPUS_MAGIC: &[u8; 4] = b"EXCM";
const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Fitted {
    mean: Vec<f64>,
    cov: Vec<f64>,
    count: usize,
    hash: [u8; 32],
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Gaussian model of clean-image features, scoring new feature vectors by
/// Mahalanobis distance.
///
/// The covariance is shrunk toward its diagonal and lightly ridged so it stays
/// invertible for small corpora. Mean and covariance are rounded to `f32` at
/// fit time so a saved model scores identically after loading.
#[derive(Debug, Clone, Default)]
pub struct CorpusModel {
    fitted: Option<Fitted>,
}

impl CorpusModel {
    pub fn unfitted() -> Self {
        CorpusModel { fitted: None }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < MIN_CORPUS {
            return Err(Error::invalid(format!(
                "corpus needs at least {MIN_CORPUS} images, got {}",
                features.len()
            )));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::dim("corpus feature vectors differ in length"));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("corpus features must be finite"));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
        }
        let mut cov = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (f[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        let avg_var = (0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    cov[i * d + j] *= 1.0 - SHRINKAGE;
                }
            }
            cov[i * d + i] += RIDGE * avg_var.max(1e-12);
        }
        let mut hasher = Sha256::new();
        for v in features.iter().flatten() {
            hasher.update(v.to_le_bytes());
        }
        let round = |v: &f64| *v as f32 as f64;
        Self::from_parts(
            mean.iter().map(round).collect(),
            cov.iter().map(round).collect(),
            features.len(),
            hasher.finalize().into(),
        )
    }

    /// Fits on the features of `images`, computed in parallel.
    pub fn fit_images(images: &[Image]) -> Result<Self> {
        let feats = images
            .par_iter()
            .map(brisque_features)
            .collect::<Result<Vec<_>>>()?;
        Self::fit(&feats)
    }

    fn from_parts(mean: Vec<f64>, cov: Vec<f64>, count: usize, hash: [u8; 32]) -> Result<Self> {
        let d = mean.len();
        let chol = DMatrix::from_row_slice(d, d, &cov)
            .cholesky()
            .ok_or_else(|| Error::invalid("corpus covariance is not positive definite"))?;
        Ok(CorpusModel {
            fitted: Some(Fitted {
                mean,
                cov,
                count,
                hash,
                chol,
            }),
        })
    }

    fn state(&self) -> Result<&Fitted> {
        self.fitted.as_ref().ok_or(Error::Unfitted)
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.state()?.mean.len())
    }

    pub fn mean(&self) -> Result<&[f64]> {
        Ok(&self.state()?.mean)
    }

    /// Number of images the model was fitted on.
    pub fn corpus_size(&self) -> Result<usize> {
        Ok(self.state()?.count)
    }

    /// SHA-256 of the fitting features (`f64` little-endian, image-major).
    pub fn corpus_hash(&self) -> Result<String> {
        Ok(self.state()?.hash.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Writes the model.
    ///
    /// Layout, little-endian: magic `EXCM`, `u32` version (1), `u32`
    /// dimension `d`, `u32` corpus size, 32-byte SHA-256 corpus hash, `d`
    /// `f32` mean values, `d * d` `f32` covariance values (row-major).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = self.state()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CORPUS_MAGIC);
        for v in [CORPUS_VERSION, s.mean.len() as u32, s.count as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.hash);
        for v in s.mean.iter().chain(&s.cov) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let fmt = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
        let mut cur = Cursor::new(bytes.as_slice());
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if &magic != CORPUS_MAGIC {
            return Err(fmt("not a corpus model file"));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            cur.read_exact(&mut b).map_err(|_| fmt("truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        if word()? != CORPUS_VERSION {
            return Err(fmt("unsupported version"));
        }
        let (d, count) = (word()? as usize, word()? as usize);
        let mut hash = [0u8; 32];
        cur.read_exact(&mut hash).map_err(|_| fmt("truncated header"))?;
        let body = &bytes[cur.position() as usize..];
        if body.len() != 4 * (d + d * d) || d == 0 {
            return Err(fmt("body length does not match dimension"));
        }
        let vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::from_parts(vals[..d].to_vec(), vals[d..].to_vec(), count, hash).map_err(|e| fmt(&e.to_string()))
    }
}

/// Mahalanobis distance of `features` from the clean-corpus Gaussian; lower is more natural.
pub fn naturalness_score(features: &[f64], model: &CorpusModel) -> Result<f64> {
    let s = model.state()?;
    if features.len() != s.mean.len() {
        return Err(Error::dim(format!(
            "corpus model has {} features, got {}",
            s.mean.len(),
            features.len()
        )));
    }
    let diff = DVector::from_iterator(features.len(), features.iter().zip(&s.mean).map(|(f, m)| f - m));
    let solved = s.chol.solve(&diff);
    Ok(diff.dot(&solved).max(0.0).sqrt())
}
