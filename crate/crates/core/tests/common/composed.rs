//! A small encoder + bottleneck graph for finite-difference checks.

use pcb_core::autograd::{GradCheck, Tape, Var};
use pcb_core::bottleneck::{joint_loss, BottleneckConfig, ConceptSource, QuantMode};
use pcb_core::concept::{ConceptSpec, ConceptVector};
use pcb_core::encoder::{EncoderConfig, Mode};
use pcb_core::model::{Model, ModelConfig, ModelKind};
use pcb_core::rng::stream_rng;
use pcb_core::synth::{TokenSequence, CLS, PAD};
use pcb_core::Result;

pub fn composed_model(seed: u64) -> Model {
    let encoder = EncoderConfig {
        extractor_layers: 1,
        aggregator_layers: 1,
        hidden: 6,
        heads: 2,
        intermediate: 8,
        dropout: 0.2,
        attention_dropout: 0.2,
        max_len: 10,
        window: 6,
        stride: 3,
        vocab_size: 12,
    };
    let bottleneck = BottleneckConfig {
        latent_groups: 3,
        concept_hidden: 8,
        classifier_hidden: [6, 4],
        ..BottleneckConfig::default()
    };
    let concepts = vec![
        ConceptSpec::binary("a"),
        ConceptSpec::binary("b"),
        ConceptSpec::categorical("c", &["x", "y", "z"], 2),
    ];
    let config = ModelConfig {
        kind: ModelKind::Pcb,
        encoder,
        bottleneck,
        concepts,
    };
    Model::new(config, seed).unwrap()
}

pub fn composed_sequence() -> TokenSequence {
    let active = 9;
    let mut s = TokenSequence {
        tokens: vec![PAD; 10],
        ages: vec![0; 10],
        segments: vec![0; 10],
        positions: vec![0; 10],
        mask: vec![false; 10],
    };
    for i in 0..active {
        s.tokens[i] = if i == 0 { CLS } else { 4 + (i * 5) % 8 };
        s.ages[i] = 60 + i;
        s.segments[i] = (i / 3) % 2;
        s.positions[i] = i;
        s.mask[i] = true;
    }
    s
}

/// Joint loss through encoder (train-mode dropout), concept head, relaxed
/// quantizer and classifier, with all randomness drawn from a fixed seed.
pub fn composed_loss(model: &Model, tape: &mut Tape, seq: &TokenSequence) -> Result<Var> {
    let b = model.bottleneck().unwrap();
    let truth = ConceptVector(vec![1, 0, 2]);
    let mut rng = stream_rng(99, 7);
    let mut mode = Mode {
        train: true,
        rng: &mut rng,
    };
    let rep = model.encoder().forward(tape, seq, &mut mode)?;
    let logits = b.concept_head_g(tape, rep)?;
    let q = b.quantize_h(tape, rep, &model.quantizer, QuantMode::Relaxed, &mut *mode.rng)?;
    let z = b.latent_embedding(tape, q.one_hot)?;
    let cin = b.assemble_concept_input(tape, ConceptSource::Values(&truth))?;
    let risk = b.classifier_f(tape, cin, z)?;
    Ok(joint_loss(tape, b.specs(), risk, 1, logits, &truth, 1.0)?.total)
}

pub fn check_composed(seed: u64, h: f64) -> GradCheck {
    let model = composed_model(seed);
    let seq = composed_sequence();
    pcb_core::autograd::check_gradients(&model.params, h, |t| composed_loss(&model, t, &seq)).unwrap()
}
