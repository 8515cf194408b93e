//! Encoder plus either the concept bottleneck or a black-box logistic head.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, ParamId, ParamStore, Tape, Var};
use crate::bottleneck::{joint_loss, total_logits, Bottleneck, BottleneckConfig, ConceptSource, QuantMode, QuantizerState};
use crate::concept::{ConceptSpec, ConceptVector};
use crate::encoder::{linear, lookup_pair, register_linear, Encoder, EncoderConfig, Mode};
use crate::error::{config_err, usage_err, Result};
use crate::rng::{stream_rng, streams};
use crate::synth::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Pcb,
    BlackBox,
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcb" => Ok(Self::Pcb),
            "black-box" | "blackbox" => Ok(Self::BlackBox),
            _ => Err(usage_err(format!("unknown model kind `{s}` (expected pcb or black-box)"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pcb => "pcb",
            Self::BlackBox => "black-box",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub bottleneck: BottleneckConfig,
    pub concepts: Vec<ConceptSpec>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.kind == ModelKind::Pcb {
            self.bottleneck.validate()?;
            if self.concepts.is_empty() {
                return Err(config_err("a pcb model needs at least one concept"));
            }
            crate::concept::validate_specs(&self.concepts)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Head {
    Pcb(Bottleneck),
    BlackBox((ParamId, ParamId)),
}

/// Logistic risk head on the patient representation, `[1, 1]`.
pub fn black_box_head(tape: &mut Tape, rep: Var, layer: (ParamId, ParamId)) -> Result<Var> {
    linear(tape, rep, layer)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub quantizer: QuantizerState,
    encoder: Encoder,
    head: Head,
}

/// Training targets of one patient.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub label: u8,
    pub concepts: &'a ConceptVector,
}

/// Loss values recorded on the tape.
pub struct LossVars {
    pub total: Var,
    pub outcome: Var,
    pub concept: Option<Var>,
}

/// Inference result for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub risk: f64,
    pub risk_logit: f64,
    /// Concept-head logits (empty for the black box).
    pub concept_logits: Vec<f64>,
    pub concepts: Option<ConceptVector>,
    pub code: Option<Vec<usize>>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, streams::INIT);
        let mut params = ParamStore::new();
        let encoder = Encoder::register(&config.encoder, &mut params, &mut rng)?;
        let head = match config.kind {
            ModelKind::Pcb => Head::Pcb(Bottleneck::register(
                config.encoder.hidden,
                &config.concepts,
                &config.bottleneck,
                &mut params,
                &mut rng,
            )?),
            ModelKind::BlackBox => {
                register_linear(&mut params, "bb.out", config.encoder.hidden, 1, &mut rng)?;
                Head::BlackBox(lookup_pair(&params, "bb.out", "w", "b")?)
            }
        };
        Ok(Self {
            quantizer: QuantizerState::new(&config.bottleneck),
            config,
            params,
            encoder,
            head,
        })
    }

    /// Rebuilds a model around stored parameters.
    pub fn from_parts(config: ModelConfig, params: ParamStore, quantizer: QuantizerState) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::bind(&config.encoder, &params)?;
        let head = match config.kind {
            ModelKind::Pcb => Head::Pcb(Bottleneck::bind(&config.concepts, &config.bottleneck, &params)?),
            ModelKind::BlackBox => Head::BlackBox(lookup_pair(&params, "bb.out", "w", "b")?),
        };
        Ok(Self {
            config,
            params,
            quantizer,
            encoder,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn bottleneck(&self) -> Option<&Bottleneck> {
        match &self.head {
            Head::Pcb(b) => Some(b),
            Head::BlackBox(_) => None,
        }
    }

    pub fn concept_specs(&self) -> &[ConceptSpec] {
        &self.config.concepts
    }

    /// Records the loss of one patient. In training mode dropout is active and
    /// the quantizer samples; otherwise dropout is off and it takes the argmax.
    /// The classifier always sees ground-truth concepts here.
    pub fn loss(
        &self,
        tape: &mut Tape,
        seq: &TokenSequence,
        targets: Targets,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<LossVars> {
        let mut mode = Mode { train, rng };
        let rep = self.encoder.forward(tape, seq, &mut mode)?;
        match &self.head {
            Head::BlackBox(layer) => {
                let logit = black_box_head(tape, rep, *layer)?;
                let outcome = tape.bce_with_logits(logit, f64::from(targets.label))?;
                Ok(LossVars {
                    total: outcome,
                    outcome,
                    concept: None,
                })
            }
            Head::Pcb(b) => {
                let concept_logits = b.concept_head_g(tape, rep)?;
                let qmode = if train { QuantMode::Train } else { QuantMode::Eval };
                let q = b.quantize_h(tape, rep, &self.quantizer, qmode, &mut *mode.rng)?;
                let z = b.latent_embedding(tape, q.one_hot)?;
                let cin = b.assemble_concept_input(tape, ConceptSource::Values(targets.concepts))?;
                let logit = b.classifier_f(tape, cin, z)?;
                let l = joint_loss(
                    tape,
                    b.specs(),
                    logit,
                    targets.label,
                    concept_logits,
                    targets.concepts,
                    b.config().lambda_c,
                )?;
                Ok(LossVars {
                    total: l.total,
                    outcome: l.outcome,
                    concept: Some(l.concept),
                })
            }
        }
    }

    /// Test-time prediction: the classifier sees predicted concepts.
    pub fn predict(&self, seq: &TokenSequence) -> Result<Prediction> {
        let mut tape = Tape::new(&self.params);
        let mut rng = stream_rng(0, 0);
        let mut mode = Mode {
            train: false,
            rng: &mut rng,
        };
        let rep = self.encoder.forward(&mut tape, seq, &mut mode)?;
        match &self.head {
            Head::BlackBox(layer) => {
                let logit = black_box_head(&mut tape, rep, *layer)?;
                let l = tape.value(logit).item();
                Ok(Prediction {
                    risk: sigmoid(l),
                    risk_logit: l,
                    concept_logits: Vec::new(),
                    concepts: None,
                    code: None,
                })
            }
            Head::Pcb(b) => {
                let concept_logits = b.concept_head_g(&mut tape, rep)?;
                let q = b.quantize_h(&mut tape, rep, &self.quantizer, QuantMode::Eval, &mut *mode.rng)?;
                let z = b.latent_embedding(&mut tape, q.one_hot)?;
                let cin = b.assemble_concept_input(&mut tape, ConceptSource::Predicted(concept_logits))?;
                let logit = b.classifier_f(&mut tape, cin, z)?;
                let l = tape.value(logit).item();
                let cl = tape.value(concept_logits).data().to_vec();
                Ok(Prediction {
                    risk: sigmoid(l),
                    risk_logit: l,
                    concepts: Some(b.predicted_concepts(&cl)),
                    concept_logits: cl,
                    code: Some(q.bits),
                })
            }
        }
    }

    /// Eval-mode latent code of a patient.
    pub fn latent_code(&self, seq: &TokenSequence) -> Result<Vec<usize>> {
        let b = self.require_bottleneck()?;
        let mut tape = Tape::new(&self.params);
        let mut rng = stream_rng(0, 0);
        let mut mode = Mode {
            train: false,
            rng: &mut rng,
        };
        let rep = self.encoder.forward(&mut tape, seq, &mut mode)?;
        Ok(b.quantize_h(&mut tape, rep, &self.quantizer, QuantMode::Eval, &mut *mode.rng)?.bits)
    }

    /// Risk logit of `f` for a latent code and fixed concept values.
    pub fn risk_logit_for(&self, code: &[usize], concepts: &ConceptVector) -> Result<f64> {
        let b = self.require_bottleneck()?;
        let mut tape = Tape::new(&self.params);
        let one_hot = b.one_hot(&mut tape, code)?;
        let z = b.latent_embedding(&mut tape, one_hot)?;
        let cin = b.assemble_concept_input(&mut tape, ConceptSource::Values(concepts))?;
        let logit = b.classifier_f(&mut tape, cin, z)?;
        Ok(tape.value(logit).item())
    }

    /// Eval-mode risk logit with ground-truth concepts fed to `f`.
    pub fn ground_truth_logit(&self, seq: &TokenSequence, concepts: &ConceptVector) -> Result<f64> {
        let b = self.require_bottleneck()?;
        let mut tape = Tape::new(&self.params);
        let mut rng = stream_rng(0, 0);
        let mut mode = Mode {
            train: false,
            rng: &mut rng,
        };
        let rep = self.encoder.forward(&mut tape, seq, &mut mode)?;
        let q = b.quantize_h(&mut tape, rep, &self.quantizer, QuantMode::Eval, &mut *mode.rng)?;
        let z = b.latent_embedding(&mut tape, q.one_hot)?;
        let cin = b.assemble_concept_input(&mut tape, ConceptSource::Values(concepts))?;
        let logit = b.classifier_f(&mut tape, cin, z)?;
        Ok(tape.value(logit).item())
    }

    pub fn require_bottleneck(&self) -> Result<&Bottleneck> {
        self.bottleneck()
            .ok_or_else(|| usage_err("operation requires a pcb model, not a black box"))
    }

    pub fn concept_logit_count(&self) -> usize {
        total_logits(&self.config.concepts)
    }
}

