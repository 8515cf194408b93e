//! Synthetic cohorts and record encoding.

mod derive;
mod encode;
mod generator;
mod measure;
mod record;
mod split;
mod template;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use derive::{derive_concepts, follow_up_years};
pub use encode::{decode_tokens, encode_patient, EncodeConfig, TokenSequence, MAX_AGE};
pub use generator::{
    build_vocabulary, generate_cohort, generate_patient, generate_patients, independent_combinations,
    logistic_risk_table, GeneratorConfig, StratumSpec,
};
pub use measure::{categorize_measurement, measurement_bucket, MeasurementBucket, MeasurementKind};
pub use record::{MedicalEvent, PatientRecord};
pub use split::{split_dataset, Split};
pub use template::{
    bucket_bounds, bucket_of, ConceptDefinition, ConceptRule, TaskTemplate, AF_HF_CONCEPTS, CHD_CODE,
    FOLLOW_UP_EDGES, FOLLOW_UP_LABELS, FREQUENCY_EDGES, FREQUENCY_LABELS, HF_CODE,
};
pub use vocab::{Channel, CodeVocabulary, VocabEntry, CLS, PAD, SEP, UNK};

use crate::concept::ConceptSpec;
use crate::error::{data_err, Result};

pub const DATASET_FORMAT: &str = "pcb-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub template: TaskTemplate,
    pub concepts: Vec<ConceptDefinition>,
    /// Present for generated cohorts; carries the oracle risk table.
    pub generator: Option<GeneratorConfig>,
    pub num_patients: usize,
}

impl DatasetHeader {
    pub fn new(template: TaskTemplate, generator: Option<GeneratorConfig>, num_patients: usize) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            template,
            concepts: template.concept_definitions(),
            generator,
            num_patients,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub vocab: CodeVocabulary,
    pub patients: Vec<PatientRecord>,
}

impl Dataset {
    pub fn concept_specs(&self) -> Vec<ConceptSpec> {
        self.header.concepts.iter().map(|d| d.spec.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// Subset by indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            header: DatasetHeader {
                num_patients: indices.len(),
                ..self.header.clone()
            },
            vocab: self.vocab.clone(),
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }

    pub fn position_of(&self, patient_id: u64) -> Option<usize> {
        self.patients.iter().position(|p| p.id == patient_id)
    }

    /// One JSON header line, then one JSON object per patient.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header).map_err(|e| data_err(e.to_string()))?;
        writeln!(w)?;
        for p in &self.patients {
            serde_json::to_writer(&mut w, p).map_err(|e| data_err(e.to_string()))?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead, vocab: CodeVocabulary) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines.next().ok_or_else(|| data_err("empty dataset file"))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)
            .map_err(|e| data_err(format!("dataset header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(data_err(format!("not a dataset file (format `{}`)", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(data_err(format!("unsupported dataset version {}", header.version)));
        }
        let specs: Vec<ConceptSpec> = header.concepts.iter().map(|d| d.spec.clone()).collect();
        let mut patients = Vec::with_capacity(header.num_patients);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: PatientRecord = serde_json::from_str(&line)
                .map_err(|e| data_err(format!("dataset line {}: {e}", n + 2)))?;
            p.concepts.check(&specs)?;
            if p.label > 1 || p.baseline > p.events.len() {
                return Err(data_err(format!("dataset line {}: invalid label or baseline", n + 2)));
            }
            if let Some(e) = p.events.iter().find(|e| e.code >= vocab.len()) {
                return Err(data_err(format!(
                    "patient {}: code id {} outside vocabulary",
                    p.id, e.code
                )));
            }
            patients.push(p);
        }
        if patients.len() != header.num_patients {
            return Err(data_err(format!(
                "dataset header announces {} patients, file holds {}",
                header.num_patients,
                patients.len()
            )));
        }
        Ok(Self {
            header,
            vocab,
            patients,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(DATASET_FILE))?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(VOCAB_FILE))?);
        self.vocab.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let open = |name: &str| {
            File::open(dir.join(name))
                .map(BufReader::new)
                .map_err(|e| data_err(format!("cannot open {}: {e}", dir.join(name).display())))
        };
        let vocab = CodeVocabulary::read_from(open(VOCAB_FILE)?)?;
        Self::read_jsonl(open(DATASET_FILE)?, vocab)
    }
}
