//! Patient records and datasets.

use serde::{Deserialize, Serialize};

use crate::concept::ConceptVector;

/// One coded event. Serialized as a `[code, age, visit]` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, u32, u32)", into = "(usize, u32, u32)")]
pub struct MedicalEvent {
    pub code: usize,
    pub age: u32,
    pub visit: u32,
}

impl From<(usize, u32, u32)> for MedicalEvent {
    fn from((code, age, visit): (usize, u32, u32)) -> Self {
        Self { code, age, visit }
    }
}

impl From<MedicalEvent> for (usize, u32, u32) {
    fn from(e: MedicalEvent) -> Self {
        (e.code, e.age, e.visit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: u64,
    /// Hidden generator stratum.
    pub stratum: usize,
    pub label: u8,
    /// Ground-truth concepts, consistent with [`super::derive_concepts`].
    pub concepts: ConceptVector,
    /// `events[..baseline]` is the history used for prediction; the rest is the outcome window.
    pub baseline: usize,
    pub baseline_age: f64,
    /// Exact age (years) at each visit index.
    pub visit_ages: Vec<f64>,
    pub events: Vec<MedicalEvent>,
}

impl PatientRecord {
    pub fn history(&self) -> &[MedicalEvent] {
        &self.events[..self.baseline.min(self.events.len())]
    }

    pub fn outcome_window(&self) -> &[MedicalEvent] {
        &self.events[self.baseline.min(self.events.len())..]
    }

    /// Number of distinct visits in the history.
    pub fn history_visits(&self) -> usize {
        let mut n = 0;
        let mut last = None;
        for e in self.history() {
            if last != Some(e.visit) {
                n += 1;
                last = Some(e.visit);
            }
        }
        n
    }
}
