//! Full-reference (SSIM) and no-reference (natural scene statistics) image quality.

mod brisque;
mod corpus;
mod ssim;

pub use brisque::{aggd_fit, brisque_features, mscn, AggdFit, BRISQUE_MIN_SIZE, MSCN_C, NUM_FEATURES};
pub use corpus::{naturalness_score, CorpusModel, MIN_CORPUS, SHRINKAGE};
pub use ssim::{ssim, SSIM_SIGMA, SSIM_WINDOW};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub ssim: f64,
    pub brisque_features: Vec<f64>,
    /// Corpus Mahalanobis distance; `None` without a fitted corpus model.
    pub naturalness: Option<f64>,
}

/// Scores `adversarial` against its clean source.
pub fn quality_report(clean: &Image, adversarial: &Image, corpus: Option<&CorpusModel>) -> Result<QualityReport> {
    let features = brisque_features(adversarial)?;
    let naturalness = match corpus {
        Some(m) => Some(naturalness_score(&features, m)?),
        None => None,
    };
    Ok(QualityReport {
        ssim: ssim(clean, adversarial)?,
        brisque_features: features,
        naturalness,
    })
}
