//! Concept definitions and values.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConceptKind {
    Binary,
    Categorical { k: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ConceptKind,
    /// Embedding width fed to the classifier; only used for categorical concepts.
    #[serde(default)]
    pub embed_dim: usize,
    /// Human readable value labels, one per level.
    #[serde(default)]
    pub levels: Vec<String>,
}

impl ConceptSpec {
    pub fn binary(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ConceptKind::Binary,
            embed_dim: 0,
            levels: vec!["0".into(), "1".into()],
        }
    }

    pub fn categorical(name: impl Into<String>, levels: &[&str], embed_dim: usize) -> Self {
        Self {
            name: name.into(),
            kind: ConceptKind::Categorical { k: levels.len() },
            embed_dim,
            levels: levels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ConceptKind::Categorical { k } = self.kind {
            if k < 2 {
                return Err(config_err(format!(
                    "categorical concept `{}` needs at least 2 categories, got {k}",
                    self.name
                )));
            }
            if self.embed_dim == 0 {
                return Err(config_err(format!(
                    "categorical concept `{}` needs embed_dim >= 1",
                    self.name
                )));
            }
        }
        if !self.levels.is_empty() && self.levels.len() != self.arity() {
            return Err(config_err(format!(
                "concept `{}` has {} level labels for {} levels",
                self.name,
                self.levels.len(),
                self.arity()
            )));
        }
        Ok(())
    }

    /// Number of values the concept can take.
    pub fn arity(&self) -> usize {
        match self.kind {
            ConceptKind::Binary => 2,
            ConceptKind::Categorical { k } => k,
        }
    }

    /// Logits produced by the concept head for this concept.
    pub fn logit_count(&self) -> usize {
        match self.kind {
            ConceptKind::Binary => 1,
            ConceptKind::Categorical { k } => k,
        }
    }

    /// Width of this concept's slice of the classifier input.
    pub fn input_dim(&self) -> usize {
        match self.kind {
            ConceptKind::Binary => 1,
            ConceptKind::Categorical { .. } => self.embed_dim,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.kind == ConceptKind::Binary
    }

    pub fn level_label(&self, value: usize) -> String {
        self.levels
            .get(value)
            .cloned()
            .unwrap_or_else(|| value.to_string())
    }
}

pub fn validate_specs(specs: &[ConceptSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(config_err("at least one concept is required"));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if specs[..i].iter().any(|o| o.name == s.name) {
            return Err(config_err(format!("duplicate concept name `{}`", s.name)));
        }
    }
    Ok(())
}

/// One value per concept: 0/1 for binary, a category index for categorical.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptVector(pub Vec<usize>);

impl ConceptVector {
    pub fn check(&self, specs: &[ConceptSpec]) -> Result<()> {
        if self.0.len() != specs.len() {
            return Err(usage_err(format!(
                "expected {} concept values, got {}",
                specs.len(),
                self.0.len()
            )));
        }
        for (v, s) in self.0.iter().zip(specs) {
            if *v >= s.arity() {
                return Err(usage_err(format!(
                    "value {v} out of range for concept `{}` with {} levels",
                    s.name,
                    s.arity()
                )));
            }
        }
        Ok(())
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    /// Comma-separated rendering, e.g. `1,0,1`.
    pub fn render(&self) -> String {
        render_values(&self.0)
    }
}

pub fn render_values(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// A contrast on one concept: `exposed` versus `reference` level, other concepts fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Exposure {
    pub concept: usize,
    pub exposed: usize,
    pub reference: usize,
}

impl Exposure {
    /// `concept = 1` versus `concept = 0`.
    pub fn binary(concept: usize) -> Self {
        Self {
            concept,
            exposed: 1,
            reference: 0,
        }
    }

    pub fn check(&self, specs: &[ConceptSpec]) -> Result<()> {
        let spec = specs
            .get(self.concept)
            .ok_or_else(|| usage_err(format!("exposure concept index {} out of range", self.concept)))?;
        if self.exposed >= spec.arity() || self.reference >= spec.arity() {
            return Err(usage_err(format!(
                "exposure levels {}/{} out of range for `{}`",
                self.exposed, self.reference, spec.name
            )));
        }
        if self.exposed == self.reference {
            return Err(usage_err("exposed and reference levels must differ"));
        }
        Ok(())
    }

    /// `base` with the exposure concept set to the exposed or reference level.
    pub fn apply(&self, base: &ConceptVector, exposed: bool) -> ConceptVector {
        let mut v = base.clone();
        v.0[self.concept] = if exposed { self.exposed } else { self.reference };
        v
    }
}

/// Total number of concept combinations.
pub fn combination_count(specs: &[ConceptSpec]) -> usize {
    specs.iter().map(ConceptSpec::arity).product()
}

/// Mixed-radix index of a combination; the first concept is the most significant digit.
pub fn combination_index(specs: &[ConceptSpec], values: &[usize]) -> usize {
    specs
        .iter()
        .zip(values)
        .fold(0, |acc, (s, &v)| acc * s.arity() + v)
}

pub fn combination_from_index(specs: &[ConceptSpec], mut index: usize) -> ConceptVector {
    let mut values = vec![0; specs.len()];
    for (slot, s) in values.iter_mut().zip(specs).rev() {
        *slot = index % s.arity();
        index /= s.arity();
    }
    ConceptVector(values)
}
