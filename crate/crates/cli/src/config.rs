//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ocda_core::data::{CsvSchema, SpectrumConfig, Surface};
use ocda_core::eval::ProtocolConfig;
use ocda_core::meta::HyperParams;
use ocda_core::models::{build_pump_cnn, build_rainbow_cnn, ModelSpec};
use ocda_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Rainbow {
        /// Directory holding the four MNIST IDX files.
        #[serde(default = "default_mnist_dir")]
        mnist_dir: PathBuf,
        #[serde(default = "default_rainbow_per_class")]
        per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    SyntheticPump {
        #[serde(default = "default_pump_domains")]
        domains: usize,
        #[serde(default = "default_pump_per_class")]
        per_class: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        spectrum: Option<SpectrumConfig>,
    },
    Csv {
        files: Vec<PathBuf>,
        #[serde(default)]
        schema: Option<CsvSchema>,
    },
}

fn default_mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}
fn default_rainbow_per_class() -> usize {
    100
}
fn default_pump_domains() -> usize {
    32
}
fn default_pump_per_class() -> usize {
    300
}

impl DatasetConfig {
    pub fn class_count(&self) -> usize {
        match self {
            DatasetConfig::Rainbow { .. } => 10,
            DatasetConfig::SyntheticPump { spectrum, .. } => spectrum
                .as_ref()
                .map_or(ocda_core::data::pump::CLASS_NAMES.len(), |s| {
                    s.class_count()
                }),
            DatasetConfig::Csv { schema, .. } => schema
                .as_ref()
                .map_or(ocda_core::data::pump::CLASS_NAMES.len(), |s| s.labels.len()),
        }
    }

    fn default_hyper(&self) -> HyperParams {
        match self {
            DatasetConfig::Rainbow { .. } => HyperParams::rainbow(),
            _ => HyperParams::pump(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SplitConfig {
    /// Seeded shuffle of all domain ids into three groups.
    Counts {
        train: usize,
        validation: usize,
        test: usize,
        #[serde(default)]
        seed: u64,
    },
    Explicit {
        train: Vec<String>,
        validation: Vec<String>,
        test: Vec<String>,
    },
    /// Pump domains: train on the other units on `source_surface`, validate
    /// on `unit` on `source_surface`, test on `unit` on the other surface.
    LeaveOneUnitOut {
        unit: u8,
        #[serde(default = "default_surface")]
        source_surface: Surface,
    },
}

fn default_surface() -> Surface {
    Surface::Steel
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    RainbowCnn,
    PumpCnn,
    /// Model spec JSON file.
    Custom {
        path: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    StandardLearning,
    Maml,
    OcdaMaml,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::StandardLearning => "standard-learning",
            Method::Maml => "maml",
            Method::OcdaMaml => "ocda-maml",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::StandardLearning => "Standard",
            Method::Maml => "MAML",
            Method::OcdaMaml => "OC-DA MAML",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: Method,
    /// Required by `ocda-maml`; also the adaptation class when evaluating.
    #[serde(default)]
    pub normal_class: Option<usize>,
    /// Overrides on top of the dataset's default hyperparameters.
    #[serde(default)]
    pub hyper: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Normal-class shots at meta-test time; defaults to the training `K`.
    pub shots: Option<usize>,
    /// Sampled supports averaged per target domain.
    pub supports: usize,
    /// Test-time inner step size; defaults to the training value.
    pub inner_lr: Option<f64>,
    /// Test-time inner steps; defaults to the training value.
    pub inner_steps: Option<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            shots: None,
            supports: ocda_core::eval::META_TEST_SUPPORTS,
            inner_lr: None,
            inner_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub alphas: Vec<f64>,
    /// Validation tasks sampled per validation domain.
    pub tasks_per_domain: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.02, 0.01, 0.005],
            tasks_per_domain: 1,
        }
    }
}

/// The TOML document as written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub method: MethodConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a run depends on, with every default filled in. Its hash
/// identifies the experiment independently of seeds and output location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub model: ModelSpec,
    pub method: Method,
    pub normal_class: Option<usize>,
    pub hyper: HyperParams,
    pub protocol: ProtocolConfig,
    pub evaluation: EvaluationConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_error(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
            .with_context(|| format!("reading configuration {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths inside the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(ModelConfig::Custom { path }) = &mut cfg.model {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let DatasetConfig::Csv { files, .. } = &mut cfg.dataset {
            for f in files.iter_mut().filter(|f| f.is_relative()) {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    pub fn hyper(&self) -> Result<HyperParams> {
        let mut merged = toml::Table::try_from(self.dataset.default_hyper())
            .map_err(|e| config_error(e.to_string()))?;
        for (k, v) in &self.method.hyper {
            merged.insert(k.clone(), v.clone());
        }
        let hp: HyperParams = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| config_error(format!("invalid hyperparameters: {e}")))?;
        hp.validate()?;
        Ok(hp)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let classes = self.dataset.class_count();
        let model = self.model.clone().unwrap_or(match self.dataset {
            DatasetConfig::Rainbow { .. } => ModelConfig::RainbowCnn,
            _ => ModelConfig::PumpCnn,
        });
        let spec = match model {
            ModelConfig::RainbowCnn => build_rainbow_cnn(classes)?,
            ModelConfig::PumpCnn => build_pump_cnn(classes)?,
            ModelConfig::Custom { path } => {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                ModelSpec::from_json(&text)?
            }
        };
        if spec.class_count != classes {
            return Err(config_error(format!(
                "model has {} classes, dataset has {classes}",
                spec.class_count
            )));
        }
        Ok(spec)
    }

    /// Checks invariants and fills in defaults.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        if self.seeds.is_empty() {
            return Err(config_error("seeds must not be empty"));
        }
        let classes = self.dataset.class_count();
        match (self.method.kind, self.method.normal_class) {
            (Method::OcdaMaml, None) => {
                return Err(config_error("method ocda-maml requires normal_class"))
            }
            (_, Some(n)) if n >= classes => {
                return Err(config_error(format!(
                    "normal_class {n} outside [0, {classes})"
                )))
            }
            _ => {}
        }
        self.protocol.validate()?;
        if self.evaluation.supports == 0 {
            return Err(config_error("evaluation.supports must be positive"));
        }
        match &self.dataset {
            DatasetConfig::Rainbow { per_class, .. } if *per_class == 0 => {
                return Err(config_error("dataset.per_class must be positive"))
            }
            DatasetConfig::SyntheticPump {
                domains, per_class, ..
            } if *domains == 0 || *per_class == 0 => {
                return Err(config_error(
                    "dataset.domains and dataset.per_class must be positive",
                ))
            }
            DatasetConfig::Csv { files, .. } if files.is_empty() => {
                return Err(config_error("dataset.files must not be empty"))
            }
            _ => {}
        }
        Ok(ResolvedConfig {
            dataset: self.dataset.clone(),
            split: self.split.clone(),
            model: self.model_spec()?,
            method: self.method.kind,
            normal_class: self.method.normal_class,
            hyper: self.hyper()?,
            protocol: self.protocol.clone(),
            evaluation: self.evaluation.clone(),
            analysis: self.analysis.clone(),
        })
    }
}

impl ResolvedConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("configuration serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Hash of the dataset block alone; prepared data depends on nothing
    /// else.
    pub fn dataset_hash(&self) -> String {
        let json = serde_json::to_vec(&self.dataset).expect("configuration serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn meta_test_shots(&self) -> usize {
        self.evaluation.shots.unwrap_or(self.hyper.shots)
    }

    pub fn meta_test_alpha(&self) -> f64 {
        self.evaluation.inner_lr.unwrap_or(self.hyper.inner_lr)
    }

    pub fn meta_test_steps(&self) -> usize {
        self.evaluation
            .inner_steps
            .unwrap_or(self.hyper.inner_steps)
    }
}
