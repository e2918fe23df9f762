//! Experiment configuration: strict JSON with documented defaults.

use std::path::PathBuf;

use crate::classify::ModelKind;
use crate::denoiser::UNetConfig;
use crate::error::{Error, Result};
use crate::pggan::GanConfig;
use crate::selection::ScenarioSpec;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Procedural two-class corpus.
    Generated {
        #[serde(default = "default_n_per_class")]
        n_per_class: usize,
        #[serde(default = "default_corpus_size")]
        size: usize,
        /// Corpus stream seed; defaults to the experiment master seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Existing PGM tree (`<path>/<class>/<id>.pgm`).
    Dir { path: PathBuf },
}

fn default_n_per_class() -> usize {
    200
}

fn default_corpus_size() -> usize {
    32
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Generated {
            n_per_class: default_n_per_class(),
            size: default_corpus_size(),
            seed: None,
        }
    }
}

/// DDPM training configuration. Paper-anchored values: batch 16, learning
/// rate 1e-4; the paper's 8000 timesteps and 512 epochs stay reachable
/// through `timesteps`/`epochs` while the desk defaults are small.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpmConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub unet: UNetConfig,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        DdpmConfig {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            epochs: 64,
            batch_size: 16,
            lr: 1e-4,
            unet: UNetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub models: Vec<ModelKind>,
    pub input_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cnn_epochs: usize,
    pub vgg_epochs: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            models: vec![ModelKind::CustomCnn, ModelKind::Vgg16],
            input_size: 32,
            batch_size: 32,
            lr: 1e-4,
            cnn_epochs: 20,
            vgg_epochs: 10,
        }
    }
}

impl ClassifierConfig {
    pub fn epochs_for(&self, kind: ModelKind) -> usize {
        match kind {
            ModelKind::CustomCnn => self.cnn_epochs,
            ModelKind::Vgg16 => self.vgg_epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// 8x8 average-pooled pixels (self-contained default).
    Pixels8,
    /// Penultimate activations of the trained expert classifier.
    Expert,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub scenario: ScenarioSpec,
    pub ddpm: DdpmConfig,
    pub pggan: GanConfig,
    /// Synthetic images generated per class per generator.
    pub synth_per_class: usize,
    pub classifier: ClassifierConfig,
    pub runs: usize,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub fid_extractor: ExtractorKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSource::default(),
            scenario: ScenarioSpec::default(),
            ddpm: DdpmConfig::default(),
            pggan: GanConfig::default(),
            synth_per_class: 2000,
            classifier: ClassifierConfig::default(),
            runs: 5,
            master_seed: 42,
            out_dir: PathBuf::from("out"),
            fid_extractor: ExtractorKind::Pixels8,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| -> Result<()> {
            Err(Error::Config {
                path: path.to_string(),
                message: message.to_string(),
            })
        };
        if self.runs < 2 {
            return bad("runs", "need at least 2 runs for mean/std aggregation");
        }
        if self.synth_per_class == 0 {
            return bad("synth_per_class", "must be positive");
        }
        match &self.corpus {
            CorpusSource::Generated { n_per_class, size, .. } => {
                if *n_per_class == 0 {
                    return bad("corpus.n_per_class", "must be positive");
                }
                if *size < 16 || !size.is_power_of_two() {
                    return bad("corpus.size", "must be a power of two >= 16");
                }
            }
            CorpusSource::Dir { path } => {
                if path.as_os_str().is_empty() {
                    return bad("corpus.path", "must not be empty");
                }
            }
        }
        self.scenario
            .validate()
            .map_err(|e| Error::Config {
                path: "scenario".into(),
                message: e.to_string(),
            })?;
        if self.ddpm.timesteps == 0 {
            return bad("ddpm.timesteps", "must be positive");
        }
        if self.ddpm.epochs == 0 || self.ddpm.batch_size == 0 {
            return bad("ddpm.epochs", "epochs and batch_size must be positive");
        }
        if !(0.0 < self.ddpm.beta_start
            && self.ddpm.beta_start <= self.ddpm.beta_end
            && self.ddpm.beta_end < 1.0)
        {
            return bad("ddpm.beta_start", "need 0 < beta_start <= beta_end < 1");
        }
        if self.ddpm.lr <= 0.0 {
            return bad("ddpm.lr", "must be positive");
        }
        self.ddpm.unet.validate().map_err(|e| Error::Config {
            path: "ddpm.unet".into(),
            message: e.to_string(),
        })?;
        self.pggan.validate().map_err(|e| Error::Config {
            path: "pggan".into(),
            message: e.to_string(),
        })?;
        if self.classifier.models.is_empty() {
            return bad("classifier.models", "need at least one model");
        }
        if self.classifier.cnn_epochs == 0 || self.classifier.vgg_epochs == 0 {
            return bad("classifier.cnn_epochs", "epoch counts must be positive");
        }
        if self.classifier.lr <= 0.0 || self.classifier.batch_size == 0 {
            return bad("classifier.lr", "lr and batch_size must be positive");
        }
        Ok(())
    }
}

/// Parse a strict-JSON experiment config: defaults fill absent keys,
/// unknown keys are rejected with their full path, and constraint
/// violations name the offending key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let deserializer = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig =
        serde_path_to_error::deserialize(deserializer).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    cfg.validate()?;
    Ok(cfg)
}
