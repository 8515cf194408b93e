//! Record → token sequence encoding.

use serde::{Deserialize, Serialize};

use super::record::PatientRecord;
use super::vocab::{CodeVocabulary, CLS, PAD};
use crate::error::{config_err, data_err, Result};

/// Largest representable age id; older ages are clamped.
pub const MAX_AGE: usize = 120;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeConfig {
    pub max_len: usize,
    /// Histories with fewer distinct visits are rejected.
    pub min_visits: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            max_len: 48,
            min_visits: 3,
        }
    }
}

/// Four aligned id channels plus the attention mask, all of length `max_len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub ages: Vec<usize>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of unmasked positions (CLS included).
    pub fn active_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Checks the channel-length, mask and segment invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if [self.ages.len(), self.segments.len(), self.positions.len(), self.mask.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(data_err("token sequence channels differ in length"));
        }
        let active = self.active_len();
        if self.mask[..active].iter().any(|m| !m) {
            return Err(data_err("mask must be a prefix of ones"));
        }
        for i in active..n {
            if self.tokens[i] != PAD || self.ages[i] != 0 || self.segments[i] != 0 || self.positions[i] != 0 {
                return Err(data_err(format!("padded position {i} is not zeroed")));
            }
        }
        for i in 0..active {
            if self.positions[i] != i || self.segments[i] > 1 {
                return Err(data_err(format!("bad position or segment at {i}")));
            }
        }
        Ok(())
    }
}

/// Encodes the pre-baseline history: `CLS` followed by event codes, the oldest
/// events dropped when longer than `max_len - 1`, then padded to `max_len`.
pub fn encode_patient(
    record: &PatientRecord,
    vocab: &CodeVocabulary,
    config: &EncodeConfig,
) -> Result<TokenSequence> {
    if config.max_len < 2 {
        return Err(config_err(format!("max_len must be >= 2, got {}", config.max_len)));
    }
    let history = record.history();
    if history.is_empty() {
        return Err(data_err(format!("patient {} has an empty history", record.id)));
    }
    let visits = record.history_visits();
    if visits < config.min_visits {
        return Err(data_err(format!(
            "patient {} has {visits} visits before baseline, below the minimum of {}",
            record.id, config.min_visits
        )));
    }
    let keep = history.len().min(config.max_len - 1);
    let kept = &history[history.len() - keep..];
    let n = config.max_len;
    let mut seq = TokenSequence {
        tokens: vec![PAD; n],
        ages: vec![0; n],
        segments: vec![0; n],
        positions: vec![0; n],
        mask: vec![false; n],
    };
    seq.tokens[0] = CLS;
    seq.ages[0] = (kept[0].age as usize).min(MAX_AGE);
    seq.mask[0] = true;
    let mut segment = 0;
    let mut last_visit = kept[0].visit;
    for (i, e) in kept.iter().enumerate() {
        if e.code >= vocab.len() {
            return Err(data_err(format!(
                "patient {}: code id {} outside vocabulary of {}",
                record.id,
                e.code,
                vocab.len()
            )));
        }
        if e.visit != last_visit {
            segment = 1 - segment;
            last_visit = e.visit;
        }
        let p = i + 1;
        seq.tokens[p] = e.code;
        seq.ages[p] = (e.age as usize).min(MAX_AGE);
        seq.segments[p] = segment;
        seq.positions[p] = p;
        seq.mask[p] = true;
    }
    Ok(seq)
}

/// Inverse of the token channel: the event codes without CLS and padding.
pub fn decode_tokens(seq: &TokenSequence) -> Vec<usize> {
    seq.tokens
        .iter()
        .zip(&seq.mask)
        .skip(1)
        .filter(|(_, m)| **m)
        .map(|(t, _)| *t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::ConceptVector;
    use crate::synth::record::MedicalEvent;

    fn record(visits: &[u32]) -> (PatientRecord, CodeVocabulary) {
        let mut vocab = CodeVocabulary::new();
        let ids: Vec<usize> = (0..visits.len())
            .map(|i| vocab.insert(&format!("DX:C{i}")).unwrap())
            .collect();
        let events: Vec<MedicalEvent> = visits
            .iter()
            .zip(&ids)
            .map(|(&visit, &code)| MedicalEvent {
                code,
                age: 60 + visit,
                visit,
            })
            .collect();
        let max_visit = visits.iter().copied().max().unwrap_or(0) as usize;
        (
            PatientRecord {
                id: 0,
                stratum: 0,
                label: 0,
                concepts: ConceptVector(vec![]),
                baseline: events.len(),
                baseline_age: 70.0,
                visit_ages: (0..=max_visit).map(|v| 60.0 + v as f64).collect(),
                events,
            },
            vocab,
        )
    }

    #[test]
    fn hand_trace_three_events_two_visits() {
        let (r, v) = record(&[0, 0, 1]);
        let cfg = EncodeConfig { max_len: 8, min_visits: 1 };
        let s = encode_patient(&r, &v, &cfg).unwrap();
        assert_eq!(s.tokens, vec![CLS, 4, 5, 6, 0, 0, 0, 0]);
        assert_eq!(s.segments, vec![0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(s.positions, vec![0, 1, 2, 3, 0, 0, 0, 0]);
        assert_eq!(s.ages, vec![60, 60, 60, 61, 0, 0, 0, 0]);
        assert_eq!(s.mask, vec![true, true, true, true, false, false, false, false]);
        s.validate().unwrap();
    }

    #[test]
    fn exact_fit_has_no_padding() {
        let (r, v) = record(&[0, 1, 2, 3]);
        let cfg = EncodeConfig { max_len: 5, min_visits: 1 };
        let s = encode_patient(&r, &v, &cfg).unwrap();
        assert!(s.mask.iter().all(|m| *m));
        assert_eq!(decode_tokens(&s), vec![4, 5, 6, 7]);
    }

    #[test]
    fn long_history_keeps_most_recent() {
        let visits: Vec<u32> = (0..2000).map(|i| i / 4).collect();
        let (r, v) = record(&visits);
        let cfg = EncodeConfig { max_len: 1220, min_visits: 3 };
        let s = encode_patient(&r, &v, &cfg).unwrap();
        let codes = decode_tokens(&s);
        assert_eq!(codes.len(), 1219);
        let all: Vec<usize> = r.events.iter().map(|e| e.code).collect();
        assert_eq!(codes, all[2000 - 1219..]);
        assert_eq!(s.tokens[0], CLS);
    }

    #[test]
    fn short_or_empty_history_is_rejected() {
        let (r, v) = record(&[0, 0, 1]);
        assert!(encode_patient(&r, &v, &EncodeConfig { max_len: 8, min_visits: 3 }).is_err());
        let (mut r, v) = record(&[0]);
        r.baseline = 0;
        assert!(encode_patient(&r, &v, &EncodeConfig { max_len: 8, min_visits: 0 }).is_err());
    }
}
