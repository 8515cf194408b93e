//! Run configuration read from TOML.
//!
//! Every section is optional; missing keys take the defaults below. Unknown
//! keys are rejected so that typos surface as configuration errors.

use std::path::{Path, PathBuf};

use pcb_core::bottleneck::BottleneckConfig;
use pcb_core::counterfactual::{AnalysisConfig, PlausibilityRange};
use pcb_core::encoder::EncoderConfig;
use pcb_core::model::{ModelConfig, ModelKind};
use pcb_core::synth::{build_vocabulary, EncodeConfig, GeneratorConfig, TaskTemplate};
use pcb_core::trainer::{Schedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub template: TaskTemplate,
    pub seed: u64,
    pub generator: GeneratorSection,
    pub encoder: EncoderSection,
    pub bottleneck: BottleneckSection,
    pub trainer: TrainerSection,
    pub analysis: AnalysisSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            template: TaskTemplate::AfHf,
            seed: 0,
            generator: GeneratorSection::default(),
            encoder: EncoderSection::default(),
            bottleneck: BottleneckSection::default(),
            trainer: TrainerSection::default(),
            analysis: AnalysisSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub num_patients: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self { num_patients: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub extractor_layers: usize,
    pub aggregator_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub max_len: usize,
    pub window: usize,
    pub stride: usize,
    /// Histories with fewer visits are rejected at encoding time.
    pub min_visits: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::desk(0);
        Self {
            extractor_layers: d.extractor_layers,
            aggregator_layers: d.aggregator_layers,
            hidden: d.hidden,
            heads: d.heads,
            intermediate: d.intermediate,
            dropout: d.dropout,
            attention_dropout: d.attention_dropout,
            max_len: d.max_len,
            window: d.window,
            stride: d.stride,
            min_visits: EncodeConfig::default().min_visits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckSection {
    pub latent_groups: usize,
    pub concept_hidden: usize,
    pub classifier_hidden: [usize; 2],
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_decay: f64,
    pub lambda_c: f64,
}

impl Default for BottleneckSection {
    fn default() -> Self {
        let b = BottleneckConfig::default();
        Self {
            latent_groups: b.latent_groups,
            concept_hidden: b.concept_hidden,
            classifier_hidden: b.classifier_hidden,
            tau_init: b.tau_init,
            tau_min: b.tau_min,
            tau_decay: b.tau_decay,
            lambda_c: b.lambda_c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup: f64,
    pub hold: f64,
    pub decay: f64,
    pub patience: usize,
    /// Train, tune and validation shares.
    pub split: [f64; 3],
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            model: ModelKind::Pcb,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.schedule.base_lr,
            warmup: t.schedule.warmup,
            hold: t.schedule.hold,
            decay: t.schedule.decay,
            patience: t.patience,
            split: [0.6, 0.1, 0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub coverage: f64,
    pub plausibility_min: f64,
    pub plausibility_max: f64,
    /// Exposure concept for the sanity check; defaults to the template's first concept.
    pub exposure: Option<String>,
    pub exposed_level: usize,
    pub reference_level: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let a = AnalysisConfig::default();
        Self {
            coverage: a.coverage,
            plausibility_min: a.plausibility.min,
            plausibility_max: a.plausibility.max,
            exposure: None,
            exposed_level: a.exposed_level,
            reference_level: a.reference_level,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Dataset directory written by `gen` and read by the other commands.
    pub data: PathBuf,
    /// Run directory for checkpoints and reports.
    pub run: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            run: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section without needing the dataset.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.generator.num_patients == 0 {
            return Err(CliError::usage("generator.num_patients must be >= 1"));
        }
        let g = self.generator_config();
        g.validate()?;
        self.model_config(build_vocabulary(&g)?.len()).validate()?;
        self.train_config().validate()?;
        self.analysis_config().validate(&self.template.concept_specs())?;
        let [a, b, c] = self.trainer.split;
        if [a, b, c].iter().any(|r| !(*r > 0.0 && *r < 1.0)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(CliError::usage(format!(
                "trainer.split must be three shares in (0, 1) summing to 1, got {:?}",
                self.trainer.split
            )));
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig::for_template(self.template, self.generator.num_patients, self.seed)
    }

    pub fn encode_config(&self) -> EncodeConfig {
        EncodeConfig {
            max_len: self.encoder.max_len,
            min_visits: self.encoder.min_visits,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let e = &self.encoder;
        let b = &self.bottleneck;
        ModelConfig {
            kind: self.trainer.model,
            encoder: EncoderConfig {
                extractor_layers: e.extractor_layers,
                aggregator_layers: e.aggregator_layers,
                hidden: e.hidden,
                heads: e.heads,
                intermediate: e.intermediate,
                dropout: e.dropout,
                attention_dropout: e.attention_dropout,
                max_len: e.max_len,
                window: e.window,
                stride: e.stride,
                vocab_size,
            },
            bottleneck: BottleneckConfig {
                latent_groups: b.latent_groups,
                concept_hidden: b.concept_hidden,
                classifier_hidden: b.classifier_hidden,
                tau_init: b.tau_init,
                tau_min: b.tau_min,
                tau_decay: b.tau_decay,
                lambda_c: b.lambda_c,
            },
            concepts: self.template.concept_specs(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.trainer;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            schedule: Schedule {
                base_lr: t.base_lr,
                warmup: t.warmup,
                hold: t.hold,
                decay: t.decay,
            },
            patience: t.patience,
            seed: self.seed,
        }
    }

    pub fn analysis_config(&self) -> AnalysisConfig {
        let a = &self.analysis;
        let exposure = a
            .exposure
            .clone()
            .unwrap_or_else(|| self.template.concept_specs()[0].name.clone());
        AnalysisConfig {
            coverage: a.coverage,
            plausibility: PlausibilityRange {
                min: a.plausibility_min,
                max: a.plausibility_max,
            },
            exposure,
            exposed_level: a.exposed_level,
            reference_level: a.reference_level,
        }
    }
}
