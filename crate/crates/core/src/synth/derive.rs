use super::record::PatientRecord;
use super::template::{
    bucket_of, ConceptDefinition, ConceptRule, FOLLOW_UP_EDGES, FREQUENCY_EDGES,
};
use super::vocab::CodeVocabulary;
use crate::concept::ConceptVector;
use crate::error::{data_err, Error, Result};

fn ids(codes: &[String], vocab: &CodeVocabulary) -> Vec<usize> {
    codes.iter().filter_map(|c| vocab.id(c)).collect()
}

fn not_applicable(def: &ConceptDefinition, reason: &str) -> Error {
    Error::NotApplicable {
        concept: def.spec.name.clone(),
        reason: reason.to_string(),
    }
}

/// Visit index of the first history event carrying an index code.
fn index_visit(record: &PatientRecord, index: &[usize]) -> Option<u32> {
    record
        .history()
        .iter()
        .find(|e| index.contains(&e.code))
        .map(|e| e.visit)
}

fn visit_age(record: &PatientRecord, visit: u32) -> Result<f64> {
    record.visit_ages.get(visit as usize).copied().ok_or_else(|| {
        data_err(format!(
            "patient {} has no age for visit {visit}",
            record.id
        ))
    })
}

/// Years from the index condition to baseline.
pub fn follow_up_years(record: &PatientRecord, index_codes: &[usize]) -> Option<f64> {
    let v = index_visit(record, index_codes)?;
    Some(record.baseline_age - record.visit_ages.get(v as usize)?)
}

/// Reads every concept off the pre-baseline history.
pub fn derive_concepts(
    record: &PatientRecord,
    defs: &[ConceptDefinition],
    vocab: &CodeVocabulary,
) -> Result<ConceptVector> {
    let history = record.history();
    let mut values = Vec::with_capacity(defs.len());
    for def in defs {
        let v = match &def.rule {
            ConceptRule::AnyCode { codes } => {
                let set = ids(codes, vocab);
                usize::from(history.iter().any(|e| set.contains(&e.code)))
            }
            ConceptRule::FollowUp { index_codes } | ConceptRule::VisitFrequency { index_codes } => {
                let set = ids(index_codes, vocab);
                let iv = index_visit(record, &set)
                    .ok_or_else(|| not_applicable(def, "no index condition before baseline"))?;
                let fu = record.baseline_age - visit_age(record, iv)?;
                if fu < 0.0 {
                    return Err(data_err(format!(
                        "patient {}: index condition after baseline",
                        record.id
                    )));
                }
                if let ConceptRule::FollowUp { .. } = def.rule {
                    bucket_of(fu, &FOLLOW_UP_EDGES)
                } else {
                    if fu <= 0.0 {
                        return Err(not_applicable(def, "zero follow-up time"));
                    }
                    let mut visits: Vec<u32> =
                        history.iter().map(|e| e.visit).filter(|&v| v > iv).collect();
                    visits.dedup();
                    bucket_of(visits.len() as f64 / fu, &FREQUENCY_EDGES)
                }
            }
        };
        values.push(v);
    }
    Ok(ConceptVector(values))
}
