//! A small planted cohort and model for trainer and analysis tests.

use pcb_core::bottleneck::BottleneckConfig;
use pcb_core::encoder::EncoderConfig;
use pcb_core::model::{Model, ModelConfig, ModelKind};
use pcb_core::synth::{generate_cohort, Dataset, EncodeConfig, GeneratorConfig};
use pcb_core::trainer::{examples, Example};

pub const TINY_MAX_LEN: usize = 24;

pub fn tiny_cohort(n: usize, seed: u64) -> (Dataset, Vec<Example>) {
    let ds = generate_cohort(&GeneratorConfig::af_hf(n, seed)).unwrap();
    let ec = EncodeConfig {
        max_len: TINY_MAX_LEN,
        ..EncodeConfig::default()
    };
    let ex = examples(&ds, None, &ec).unwrap();
    (ds, ex)
}

pub fn tiny_model_config(ds: &Dataset, kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        encoder: EncoderConfig {
            extractor_layers: 1,
            aggregator_layers: 1,
            hidden: 8,
            heads: 2,
            intermediate: 16,
            dropout: 0.1,
            attention_dropout: 0.1,
            max_len: TINY_MAX_LEN,
            window: 8,
            stride: 4,
            vocab_size: ds.vocab.len(),
        },
        bottleneck: BottleneckConfig {
            latent_groups: 3,
            concept_hidden: 8,
            classifier_hidden: [8, 4],
            ..BottleneckConfig::default()
        },
        concepts: ds.concept_specs(),
    }
}

pub fn tiny_model(ds: &Dataset, kind: ModelKind, seed: u64) -> Model {
    Model::new(tiny_model_config(ds, kind), seed).unwrap()
}
