//! Experiment configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, Method};
use crate::error::{Error, Result};
use crate::nn::{Arch, TrainConfig};

use super::synth::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Attack at most this many test samples (0 attacks all of them).
    pub sample_limit: usize,
    /// Number of sample ids whose adversarial images are written as PNG.
    pub saved_images: usize,
    pub dataset: DatasetConfig,
    pub models: Vec<ModelSpec>,
    pub train: TrainConfig,
    /// Base attack settings; the grids below override individual fields.
    pub attack: AttackConfig,
    pub sweep: SweepConfig,
    pub transfer: TransferConfig,
    pub ablation: AblationConfig,
    pub corpus: CorpusConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            sample_limit: 0,
            saved_images: 4,
            dataset: DatasetConfig::default(),
            models: vec![
                ModelSpec::new("a", Arch::A),
                ModelSpec::new("b", Arch::B),
                ModelSpec::new("c", Arch::C),
            ],
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            sweep: SweepConfig::default(),
            transfer: TransferConfig::default(),
            ablation: AblationConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

/// Either a pair of `filename,label` manifests or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Class count for manifests; the synthetic generator has its own.
    pub num_classes: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_manifest: None,
            test_manifest: None,
            num_classes: 5,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        if self.uses_manifests() {
            self.num_classes
        } else {
            self.synthetic.num_classes
        }
    }

    pub fn uses_manifests(&self) -> bool {
        self.train_manifest.is_some() || self.test_manifest.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub arch: Arch,
    /// Load from here if the file exists; otherwise the model is trained and
    /// saved here (default `<output_dir>/models/<name>.exnn`).
    #[serde(default)]
    pub path: Option<PathBuf>,
}

impl ModelSpec {
    pub fn new(name: &str, arch: Arch) -> Self {
        ModelSpec {
            name: name.to_string(),
            arch,
            path: None,
        }
    }
}

/// Whitebox grid on the first model. Fusion and multiplicative methods sweep
/// `alphas`; FGSM-family methods sweep `epsilons`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub levels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            methods: vec![Method::Bef, Method::Cbef, Method::Ifgsm],
            alphas: vec![0.005, 0.01, 0.02, 0.05, 0.1],
            epsilons: [16.0, 32.0, 48.0, 64.0].iter().map(|v| v / 255.0).collect(),
            levels: vec![3],
            kernel_sizes: vec![3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub methods: Vec<Method>,
    pub alpha: f64,
    /// Perturbation bound for FGSM-family methods.
    pub epsilon: f64,
    pub levels: usize,
    pub kernel_size: usize,
    pub early_stop_on_flip: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            methods: vec![Method::Bef, Method::Cbef],
            alpha: 0.01,
            epsilon: 16.0 / 255.0,
            levels: 3,
            kernel_size: 3,
            early_stop_on_flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Methods crafted along the `L` axis.
    pub level_methods: Vec<Method>,
    pub levels: Vec<usize>,
    /// Methods crafted along the `K` axis.
    pub kernel_methods: Vec<Method>,
    pub kernel_sizes: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            level_methods: vec![Method::Bef],
            levels: vec![1, 3, 5],
            kernel_methods: vec![Method::Cbef],
            kernel_sizes: vec![1, 3, 5],
        }
    }
}

/// Clean corpus for the naturalness score: a saved model file, or the first
/// `fit_count` training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    pub fit_count: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            path: None,
            fit_count: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        if self.models.len() > 3 {
            return Err(Error::Config("at most three models are supported".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.name.is_empty() || m.name.contains(|c: char| c == ',' || c == '/' || c.is_whitespace()) {
                return Err(Error::Config(format!("invalid model name `{}`", m.name)));
            }
            if self.models[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate model name `{}`", m.name)));
            }
        }
        if self.dataset.uses_manifests() {
            if self.dataset.train_manifest.is_none() || self.dataset.test_manifest.is_none() {
                return Err(Error::Config("both train_manifest and test_manifest are required".into()));
            }
            if self.dataset.num_classes < 2 {
                return Err(Error::Config("num_classes must be at least 2".into()));
            }
        } else {
            self.dataset.synthetic.validate()?;
        }
        self.train.validate()?;
        self.attack.validate()?;
        let s = &self.sweep;
        if s.methods.is_empty() || s.levels.is_empty() || s.kernel_sizes.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        if s.methods.iter().any(|m| m.is_additive()) && s.epsilons.is_empty() {
            return Err(Error::Config("sweep has FGSM-family methods but no epsilons".into()));
        }
        if s.methods.iter().any(|m| !m.is_additive()) && s.alphas.is_empty() {
            return Err(Error::Config("sweep has exposure methods but no alphas".into()));
        }
        if self.transfer.methods.is_empty() {
            return Err(Error::Config("transfer needs at least one method".into()));
        }
        if self.ablation.levels.is_empty() || self.ablation.kernel_sizes.is_empty() {
            return Err(Error::Config("ablation grids must be nonempty".into()));
        }
        for m in self.ablation.level_methods.iter().chain(&self.ablation.kernel_methods) {
            if !m.is_fusion() {
                return Err(Error::Config(format!("ablation method {m} has no pyramid or kernel")));
            }
        }
        Ok(())
    }

    /// Where model `index` is read from or written to.
    pub fn model_path(&self, index: usize) -> PathBuf {
        let m = &self.models[index];
        m.path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("models").join(format!("{}.exnn", m.name)))
    }

    /// Attack settings for one grid point. `value` is the step size for
    /// exposure methods and the perturbation bound for FGSM-family methods;
    /// iterative FGSM variants then step by `value / max_iter`.
    pub fn attack_for(&self, method: Method, value: f64, levels: usize, kernel_size: usize) -> AttackConfig {
        let mut cfg = self.attack.clone();
        cfg.method = method;
        cfg.levels = levels;
        cfg.kernel_size = kernel_size;
        if method.is_additive() {
            cfg.epsilon = value;
            cfg.alpha = value / cfg.max_iter as f64;
        } else {
            cfg.alpha = value;
        }
        cfg
    }

    /// Attack settings used for transfer studies.
    pub fn transfer_attack(&self, method: Method, levels: usize, kernel_size: usize) -> AttackConfig {
        let t = &self.transfer;
        let value = if method.is_additive() { t.epsilon } else { t.alpha };
        let mut cfg = self.attack_for(method, value, levels, kernel_size);
        cfg.early_stop_on_flip = t.early_stop_on_flip;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seed = 9
            [[models]]
            name = "only"
            arch = "b"
            [transfer]
            alpha = 0.02
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.models, vec![ModelSpec::new("only", Arch::B)]);
        assert_eq!(cfg.transfer.alpha, 0.02);
        assert_eq!(cfg.transfer.levels, 3);
        assert_eq!(cfg.sweep, SweepConfig::default());
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "models = []",
            "unknown = 1",
            "[sweep]\nmethods = []",
            "[sweep]\nmethods = [\"ifgsm\"]\nepsilons = []",
            "[dataset]\ntrain_manifest = \"a.csv\"",
            "[ablation]\nlevel_methods = [\"fgsm\"]",
            "[[models]]\nname = \"x\"\narch = \"a\"\n[[models]]\nname = \"x\"\narch = \"b\"",
            "[attack]\nkernel_size = 2",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn grid_point_settings() {
        let cfg = ExperimentConfig::default();
        let a = cfg.attack_for(Method::Ifgsm, 0.2, 3, 3);
        assert_eq!((a.epsilon, a.alpha), (0.2, 0.2 / 10.0));
        let b = cfg.attack_for(Method::Bef, 0.05, 5, 1);
        assert_eq!((b.alpha, b.levels, b.kernel_size), (0.05, 5, 1));
        let t = cfg.transfer_attack(Method::Cbef, 3, 3);
        assert_eq!(t.alpha, 0.01);
        assert!(!t.early_stop_on_flip);
    }
}
