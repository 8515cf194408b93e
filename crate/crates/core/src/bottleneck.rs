//! Concept head `g`, Gumbel-Softmax quantizer `h` with its codebook, classifier
//! `f` over concepts and latent embeddings, and the joint objective.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{argmax, ParamId, ParamStore, Tape, Tensor, Var};
use crate::concept::{validate_specs, ConceptKind, ConceptSpec, ConceptVector};
use crate::encoder::{linear, lookup, lookup_pair, normal, register_linear};
use crate::error::{config_err, usage_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    /// Number of binary latent groups `n`.
    pub latent_groups: usize,
    pub concept_hidden: usize,
    pub classifier_hidden: [usize; 2],
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_decay: f64,
    /// Weight of the concept loss.
    pub lambda_c: f64,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            latent_groups: 6,
            concept_hidden: 64,
            classifier_hidden: [16, 8],
            tau_init: 2.0,
            tau_min: 0.5,
            tau_decay: 0.999,
            lambda_c: 1.0,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_groups == 0 || self.latent_groups > 16 {
            return Err(config_err("bottleneck.latent_groups must lie in 1..=16"));
        }
        if self.concept_hidden == 0 || self.classifier_hidden.contains(&0) {
            return Err(config_err("bottleneck layer sizes must be >= 1"));
        }
        if !(self.tau_init > 0.0 && self.tau_min > 0.0) {
            return Err(config_err("bottleneck temperatures must be > 0"));
        }
        if !(self.tau_decay > 0.0 && self.tau_decay <= 1.0) {
            return Err(config_err("bottleneck.tau_decay must lie in (0, 1]"));
        }
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(config_err("bottleneck.lambda_c must be >= 0"));
        }
        Ok(())
    }
}

/// Annealed Gumbel-Softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub tau: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl QuantizerState {
    pub fn new(config: &BottleneckConfig) -> Self {
        Self {
            tau: config.tau_init,
            tau_min: config.tau_min,
            decay: config.tau_decay,
        }
    }

    /// `τ ← max(τ_min, τ·decay)`, once per optimizer step.
    pub fn step(&mut self) {
        self.tau = self.tau_min.max(self.tau * self.decay);
    }
}

/// Standard Gumbel draw `-ln(-ln u)`, `u ~ U(0, 1)`.
pub fn gumbel_noise(rng: &mut dyn RngCore) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// Row-wise `softmax((logits + g) / τ)`; with `hard`, the forward value is the
/// one-hot of the row argmax while gradients flow through the soft sample.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, tau: f64, hard: bool, rng: &mut dyn RngCore) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(usage_err(format!("temperature must be > 0, got {tau}")));
    }
    let shape = tape.value(logits).shape().to_vec();
    let n: usize = shape.iter().product();
    let noise = Tensor::new(shape, (0..n).map(|_| gumbel_noise(rng)).collect())?;
    let y = tape.add_const(logits, &noise)?;
    let y = tape.scale(y, 1.0 / tau);
    let y = tape.softmax(y, None)?;
    Ok(if hard { tape.straight_through(y) } else { y })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Hard Gumbel-Softmax sample with straight-through gradients.
    Train,
    /// Soft Gumbel-Softmax sample; smooth in every parameter.
    Relaxed,
    /// Per-group argmax, no noise.
    Eval,
}

/// Where the classifier's concept input comes from.
#[derive(Clone, Copy, Debug)]
pub enum ConceptSource<'a> {
    /// Ground-truth or intervened values, fed exactly.
    Values(&'a ConceptVector),
    /// Concept-head logits `[1, total_logits]`.
    Predicted(Var),
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    specs: Vec<ConceptSpec>,
    config: BottleneckConfig,
    g1: (ParamId, ParamId),
    g2: (ParamId, ParamId),
    h: (ParamId, ParamId),
    codebook: ParamId,
    concept_embeddings: Vec<Option<ParamId>>,
    f1: (ParamId, ParamId),
    f2: (ParamId, ParamId),
    f3: (ParamId, ParamId),
}

pub fn total_logits(specs: &[ConceptSpec]) -> usize {
    specs.iter().map(ConceptSpec::logit_count).sum()
}

pub fn concept_input_dim(specs: &[ConceptSpec]) -> usize {
    specs.iter().map(ConceptSpec::input_dim).sum()
}

/// Latent selection `[n, 2]` (one-hot unless relaxed) and its bits.
pub struct Quantized {
    pub bits: Vec<usize>,
    pub one_hot: Var,
}

impl Bottleneck {
    pub fn register(
        hidden: usize,
        specs: &[ConceptSpec],
        config: &BottleneckConfig,
        params: &mut ParamStore,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        validate_specs(specs)?;
        config.validate()?;
        let n = config.latent_groups;
        register_linear(params, "pcb.g.hidden", hidden, config.concept_hidden, rng)?;
        register_linear(params, "pcb.g.out", config.concept_hidden, total_logits(specs), rng)?;
        register_linear(params, "pcb.h", hidden, 2 * n, rng)?;
        params.add("pcb.codebook", normal(rng, &[n, 2], 1.0))?;
        for s in specs {
            if let ConceptKind::Categorical { k } = s.kind {
                params.add(format!("pcb.concept_emb.{}", s.name), normal(rng, &[k, s.embed_dim], 0.5))?;
            }
        }
        let [h1, h2] = config.classifier_hidden;
        register_linear(params, "pcb.f.0", concept_input_dim(specs) + n, h1, rng)?;
        register_linear(params, "pcb.f.1", h1, h2, rng)?;
        register_linear(params, "pcb.f.2", h2, 1, rng)?;
        Self::bind(specs, config, params)
    }

    pub fn bind(specs: &[ConceptSpec], config: &BottleneckConfig, params: &ParamStore) -> Result<Self> {
        validate_specs(specs)?;
        config.validate()?;
        let wb = |p: &str| lookup_pair(params, p, "w", "b");
        let codebook = lookup(params, "pcb.codebook")?;
        if params.get(codebook).shape() != [config.latent_groups, 2] {
            return Err(config_err("codebook shape does not match latent_groups"));
        }
        Ok(Self {
            specs: specs.to_vec(),
            config: config.clone(),
            g1: wb("pcb.g.hidden")?,
            g2: wb("pcb.g.out")?,
            h: wb("pcb.h")?,
            codebook,
            concept_embeddings: specs
                .iter()
                .map(|s| match s.kind {
                    ConceptKind::Binary => Ok(None),
                    ConceptKind::Categorical { .. } => {
                        lookup(params, &format!("pcb.concept_emb.{}", s.name)).map(Some)
                    }
                })
                .collect::<Result<_>>()?,
            f1: wb("pcb.f.0")?,
            f2: wb("pcb.f.1")?,
            f3: wb("pcb.f.2")?,
        })
    }

    pub fn specs(&self) -> &[ConceptSpec] {
        &self.specs
    }

    pub fn config(&self) -> &BottleneckConfig {
        &self.config
    }

    /// Concept logits `[1, total_logits]`.
    pub fn concept_head_g(&self, tape: &mut Tape, rep: Var) -> Result<Var> {
        let x = linear(tape, rep, self.g1)?;
        let x = tape.relu(x);
        linear(tape, x, self.g2)
    }

    /// Per-group selection: a hard Gumbel-Softmax sample in training, the argmax in evaluation.
    pub fn quantize_h(
        &self,
        tape: &mut Tape,
        rep: Var,
        state: &QuantizerState,
        mode: QuantMode,
        rng: &mut dyn RngCore,
    ) -> Result<Quantized> {
        let n = self.config.latent_groups;
        let logits = linear(tape, rep, self.h)?;
        let logits = tape.reshape(logits, vec![n, 2])?;
        match mode {
            QuantMode::Train | QuantMode::Relaxed => {
                let one_hot = gumbel_softmax(tape, logits, state.tau, mode == QuantMode::Train, rng)?;
                let v = tape.value(one_hot);
                let bits = (0..n).map(|j| argmax(v.row(j))).collect();
                Ok(Quantized { bits, one_hot })
            }
            QuantMode::Eval => {
                let v = tape.value(logits);
                let bits: Vec<usize> = (0..n).map(|j| argmax(v.row(j))).collect();
                let one_hot = self.one_hot(tape, &bits)?;
                Ok(Quantized { bits, one_hot })
            }
        }
    }

    /// Constant one-hot selection for a given bit code.
    pub fn one_hot(&self, tape: &mut Tape, bits: &[usize]) -> Result<Var> {
        let n = self.config.latent_groups;
        if bits.len() != n || bits.iter().any(|b| *b > 1) {
            return Err(usage_err(format!("latent code must have {n} binary entries")));
        }
        let mut t = Tensor::zeros(&[n, 2]);
        for (j, b) in bits.iter().enumerate() {
            t.data_mut()[j * 2 + b] = 1.0;
        }
        Ok(tape.constant(t))
    }

    /// Latent embedding `z` `[1, n]`: the selected 1-dim codebook entry of every group.
    pub fn latent_embedding(&self, tape: &mut Tape, one_hot: Var) -> Result<Var> {
        let cb = tape.param(self.codebook);
        let picked = tape.mul(one_hot, cb)?;
        let z = tape.row_sum(picked);
        tape.reshape(z, vec![1, self.config.latent_groups])
    }

    /// Classifier input for the concepts `[1, concept_input_dim]`.
    pub fn assemble_concept_input(&self, tape: &mut Tape, source: ConceptSource) -> Result<Var> {
        if let ConceptSource::Values(v) = source {
            v.check(&self.specs)?;
        }
        let mut parts = Vec::with_capacity(self.specs.len());
        let mut offset = 0;
        for (i, s) in self.specs.iter().enumerate() {
            let width = s.logit_count();
            let part = match (s.kind, source) {
                (ConceptKind::Binary, ConceptSource::Values(v)) => {
                    tape.constant(Tensor::row_vector(vec![v.0[i] as f64]))
                }
                (ConceptKind::Binary, ConceptSource::Predicted(logits)) => {
                    let l = tape.slice_cols(logits, offset..offset + 1)?;
                    tape.sigmoid(l)
                }
                (ConceptKind::Categorical { .. }, src) => {
                    let level = match src {
                        ConceptSource::Values(v) => v.0[i],
                        ConceptSource::Predicted(logits) => {
                            argmax(&tape.value(logits).data()[offset..offset + width])
                        }
                    };
                    let table = tape.param(self.concept_embeddings[i].expect("categorical table"));
                    tape.embedding(table, &[level])?
                }
            };
            parts.push(part);
            offset += width;
        }
        tape.concat_cols(&parts)
    }

    /// Risk logit `[1, 1]` from the concept input and latent embedding.
    pub fn classifier_f(&self, tape: &mut Tape, concept_input: Var, z: Var) -> Result<Var> {
        let x = tape.concat_cols(&[concept_input, z])?;
        let x = linear(tape, x, self.f1)?;
        let x = tape.relu(x);
        let x = linear(tape, x, self.f2)?;
        let x = tape.relu(x);
        linear(tape, x, self.f3)
    }

    /// Predicted concept values: sigmoid ≥ 0.5 for binary, argmax for categorical.
    pub fn predicted_concepts(&self, logits: &[f64]) -> ConceptVector {
        let mut out = Vec::with_capacity(self.specs.len());
        let mut offset = 0;
        for s in &self.specs {
            let w = s.logit_count();
            out.push(match s.kind {
                ConceptKind::Binary => usize::from(logits[offset] >= 0.0),
                ConceptKind::Categorical { .. } => argmax(&logits[offset..offset + w]),
            });
            offset += w;
        }
        ConceptVector(out)
    }
}

/// Joint objective and its two parts.
pub struct JointLoss {
    pub total: Var,
    pub outcome: Var,
    pub concept: Var,
}

/// `L = bce(risk_logit, y) + λ · Σ_concepts (bce | ce)`.
pub fn joint_loss(
    tape: &mut Tape,
    specs: &[ConceptSpec],
    risk_logit: Var,
    y: u8,
    concept_logits: Var,
    truth: &ConceptVector,
    lambda_c: f64,
) -> Result<JointLoss> {
    truth.check(specs)?;
    let outcome = tape.bce_with_logits(risk_logit, f64::from(y))?;
    let mut concept: Option<Var> = None;
    let mut offset = 0;
    for (s, &v) in specs.iter().zip(truth.values()) {
        let w = s.logit_count();
        let logits = tape.slice_cols(concept_logits, offset..offset + w)?;
        let term = match s.kind {
            ConceptKind::Binary => tape.bce_with_logits(logits, v as f64)?,
            ConceptKind::Categorical { .. } => tape.ce_with_logits(logits, v)?,
        };
        concept = Some(match concept {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        offset += w;
    }
    let concept = concept.ok_or_else(|| usage_err("no concepts"))?;
    let weighted = if lambda_c == 1.0 { concept } else { tape.scale(concept, lambda_c) };
    let total = tape.add(outcome, weighted)?;
    Ok(JointLoss {
        total,
        outcome,
        concept,
    })
}
