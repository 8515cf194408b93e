//! Built-in task templates: which concepts exist and how they are read off a record.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::concept::ConceptSpec;
use crate::error::{usage_err, Error, Result};

pub const HF_CODE: &str = "DX:I50";
pub const CHD_CODE: &str = "DX:I25";

/// Binary concepts of the AF-HF template: (name, diagnosis code, related medication).
pub const AF_HF_CONCEPTS: [(&str, &str, &str); 3] = [
    ("AF", "DX:I48", "MED:2.8"),
    ("hypertension", "DX:I10", "MED:2.5"),
    ("diabetes", "DX:E11", "MED:6.1"),
];

/// Upper edges of the visit-frequency categories (visits per year).
pub const FREQUENCY_EDGES: [f64; 6] = [2.0, 4.0, 8.0, 12.0, 16.0, 24.0];
pub const FREQUENCY_LABELS: [&str; 7] = ["0-2", "2-4", "4-8", "8-12", "12-16", "16-24", ">24"];
/// Upper edges of the follow-up categories (years since the index condition).
pub const FOLLOW_UP_EDGES: [f64; 7] = [1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 10.0];
pub const FOLLOW_UP_LABELS: [&str; 8] = ["0-1", "1-2", "2-3", "3-4", "4-5", "5-7", "7-10", ">10"];

/// Category of `value` for left-closed, right-open bins delimited by `edges`.
pub fn bucket_of(value: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&e| value >= e).count()
}

/// Lower and upper bound of category `k` (the last category is capped at `top`).
pub fn bucket_bounds(k: usize, edges: &[f64], top: f64) -> (f64, f64) {
    let lo = if k == 0 { 0.0 } else { edges[k - 1] };
    let hi = edges.get(k).copied().unwrap_or(top);
    (lo, hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskTemplate {
    #[serde(rename = "af-hf")]
    AfHf,
    #[serde(rename = "f-hf")]
    FHf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum ConceptRule {
    /// 1 iff any of the codes occurs before baseline.
    AnyCode { codes: Vec<String> },
    /// Visits after the index condition per year of follow-up, bucketed.
    VisitFrequency { index_codes: Vec<String> },
    /// Years from the index condition to baseline, bucketed.
    FollowUp { index_codes: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDefinition {
    pub spec: ConceptSpec,
    pub rule: ConceptRule,
}

impl TaskTemplate {
    pub fn name(self) -> &'static str {
        match self {
            TaskTemplate::AfHf => "af-hf",
            TaskTemplate::FHf => "f-hf",
        }
    }

    pub fn concept_definitions(self) -> Vec<ConceptDefinition> {
        match self {
            TaskTemplate::AfHf => AF_HF_CONCEPTS
                .iter()
                .map(|(name, dx, _)| ConceptDefinition {
                    spec: ConceptSpec::binary(*name),
                    rule: ConceptRule::AnyCode {
                        codes: vec![dx.to_string()],
                    },
                })
                .collect(),
            TaskTemplate::FHf => vec![
                ConceptDefinition {
                    spec: ConceptSpec::categorical("visit-frequency", &FREQUENCY_LABELS, 2),
                    rule: ConceptRule::VisitFrequency {
                        index_codes: vec![CHD_CODE.into()],
                    },
                },
                ConceptDefinition {
                    spec: ConceptSpec::categorical("follow-up", &FOLLOW_UP_LABELS, 2),
                    rule: ConceptRule::FollowUp {
                        index_codes: vec![CHD_CODE.into()],
                    },
                },
            ],
        }
    }

    pub fn concept_specs(self) -> Vec<ConceptSpec> {
        self.concept_definitions().into_iter().map(|d| d.spec).collect()
    }
}

impl fmt::Display for TaskTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "af-hf" | "af-hf-style" => Ok(TaskTemplate::AfHf),
            "f-hf" | "f-hf-style" => Ok(TaskTemplate::FHf),
            other => Err(usage_err(format!("unknown task template `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_left_closed() {
        assert_eq!(bucket_of(0.0, &FOLLOW_UP_EDGES), 0);
        assert_eq!(bucket_of(2.5, &FOLLOW_UP_EDGES), 2);
        assert_eq!(bucket_of(5.0, &FOLLOW_UP_EDGES), 5);
        assert_eq!(bucket_of(10.0, &FOLLOW_UP_EDGES), 7);
        assert_eq!(bucket_of(9.0, &FREQUENCY_EDGES), 3);
        assert_eq!(bucket_of(2.0, &FREQUENCY_EDGES), 1);
        assert_eq!(bucket_of(30.0, &FREQUENCY_EDGES), 6);
    }

    #[test]
    fn template_shapes() {
        let af = TaskTemplate::AfHf.concept_specs();
        assert_eq!(af.len(), 3);
        assert!(af.iter().all(|s| s.is_binary()));
        let f = TaskTemplate::FHf.concept_specs();
        assert_eq!(f.iter().map(|s| s.logit_count()).collect::<Vec<_>>(), vec![7, 8]);
    }
}
