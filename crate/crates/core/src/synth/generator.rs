//! Cohort generator with a planted stratum → concept → outcome structure.
//!
//! Each patient draws a hidden stratum, then a concept combination from that
//! stratum's distribution, then a label from `risk_table[stratum][combination]`.
//! The event stream carries stratum signature codes, the concepts' diagnosis and
//! medication codes, measurements, lifestyle tokens and noise, so the risk
//! structure is learnable and the true risk ratios are known in closed form.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::derive::derive_concepts;
use super::measure::{measurement_bucket, MeasurementKind};
use super::record::{MedicalEvent, PatientRecord};
use super::template::{
    bucket_bounds, ConceptDefinition, TaskTemplate, AF_HF_CONCEPTS, CHD_CODE, FOLLOW_UP_EDGES,
    FREQUENCY_EDGES, HF_CODE,
};
use super::vocab::CodeVocabulary;
use super::{Dataset, DatasetHeader};
use crate::concept::{
    combination_count, combination_from_index, combination_index, ConceptSpec, ConceptVector,
    Exposure,
};
use crate::error::{config_err, data_err, Result};
use crate::rng::stream_rng;

const LIFESTYLE: [&str; 6] = [
    "LIFE:smoke-current",
    "LIFE:smoke-ex",
    "LIFE:smoke-non",
    "LIFE:drink-current",
    "LIFE:drink-ex",
    "LIFE:drink-non",
];
const NOISE_CHANNELS: [&str; 4] = ["DX", "MED", "TEST", "PROC"];
/// Cap on the open-ended last follow-up and frequency categories.
const FOLLOW_UP_TOP: f64 = 13.0;
const FREQUENCY_TOP: f64 = 32.0;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumSpec {
    pub prior: f64,
    /// Probability of each concept combination (mixed-radix order, first concept most significant).
    pub combinations: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub template: TaskTemplate,
    pub num_patients: usize,
    pub seed: u64,
    pub strata: Vec<StratumSpec>,
    /// `risk_table[s][c]` = P(label = 1 | stratum s, combination c).
    pub risk_table: Vec<Vec<f64>>,
    /// Signature codes per stratum.
    pub signature_codes: usize,
    /// Probability that a visit's signature code comes from the patient's own stratum.
    pub signature_purity: f64,
    pub noise_codes: usize,
    /// Maximum noise codes per visit.
    pub noise_per_visit: usize,
    /// Inclusive range of pre-baseline visits (AF-HF template).
    pub visits: [usize; 2],
    pub history_years: [f64; 2],
    pub baseline_age: [f64; 2],
    /// Per-visit probability of a blood-pressure reading (BMI at half this rate).
    pub measurement_rate: f64,
    /// Per-visit probability of a medication code once a concept is present.
    pub medication_rate: f64,
}

/// Independent per-concept marginals → joint combination distribution.
pub fn independent_combinations(specs: &[ConceptSpec], marginals: &[Vec<f64>]) -> Vec<f64> {
    (0..combination_count(specs))
        .map(|i| {
            let c = combination_from_index(specs, i);
            c.0.iter().zip(marginals).map(|(&v, m)| m[v]).product()
        })
        .collect()
}

/// `risk[s][c] = sigmoid(alpha[s] + Σ_j effects[j][c_j])`.
pub fn logistic_risk_table(specs: &[ConceptSpec], alpha: &[f64], effects: &[Vec<f64>]) -> Vec<Vec<f64>> {
    alpha
        .iter()
        .map(|a| {
            (0..combination_count(specs))
                .map(|i| {
                    let c = combination_from_index(specs, i);
                    let z = a + c.0.iter().zip(effects).map(|(&v, e)| e[v]).sum::<f64>();
                    crate::autograd::sigmoid(z)
                })
                .collect()
        })
        .collect()
}

fn binary_marginal(p: f64) -> Vec<f64> {
    vec![1.0 - p, p]
}

impl GeneratorConfig {
    /// Planted design for the binary-concept task: four strata with increasing
    /// baseline risk and concept prevalence, and additive concept effects on the logit.
    pub fn af_hf(num_patients: usize, seed: u64) -> Self {
        let specs = TaskTemplate::AfHf.concept_specs();
        let marginals = [
            [0.30, 0.30, 0.25],
            [0.40, 0.40, 0.35],
            [0.45, 0.50, 0.45],
            [0.50, 0.60, 0.50],
        ];
        let strata = marginals
            .iter()
            .map(|m| StratumSpec {
                prior: 0.25,
                combinations: independent_combinations(
                    &specs,
                    &m.iter().map(|p| binary_marginal(*p)).collect::<Vec<_>>(),
                ),
            })
            .collect();
        let effects = vec![vec![0.0, 2.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        Self {
            template: TaskTemplate::AfHf,
            num_patients,
            seed,
            strata,
            risk_table: logistic_risk_table(&specs, &[-3.5, -1.5, 0.5, 2.5], &effects),
            signature_codes: 6,
            signature_purity: 0.95,
            noise_codes: 40,
            noise_per_visit: 1,
            visits: [3, 6],
            history_years: [3.0, 10.0],
            baseline_age: [50.0, 80.0],
            measurement_rate: 0.5,
            medication_rate: 0.5,
        }
    }

    /// Planted design for the categorical task (visit frequency × follow-up).
    pub fn f_hf(num_patients: usize, seed: u64) -> Self {
        let specs = TaskTemplate::FHf.concept_specs();
        let freq = [
            vec![0.30, 0.25, 0.20, 0.10, 0.07, 0.05, 0.03],
            vec![0.25, 0.25, 0.20, 0.12, 0.08, 0.06, 0.04],
            vec![0.20, 0.22, 0.22, 0.14, 0.10, 0.07, 0.05],
            vec![0.15, 0.20, 0.22, 0.16, 0.12, 0.09, 0.06],
        ];
        let follow = vec![0.15, 0.15, 0.15, 0.12, 0.12, 0.13, 0.10, 0.08];
        let strata = freq
            .iter()
            .map(|f| StratumSpec {
                prior: 0.25,
                combinations: independent_combinations(&specs, &[f.clone(), follow.clone()]),
            })
            .collect();
        let effects = vec![
            vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2],
            vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
        ];
        Self {
            template: TaskTemplate::FHf,
            risk_table: logistic_risk_table(&specs, &[-4.0, -2.5, -1.0, 0.5], &effects),
            strata,
            ..Self::af_hf(num_patients, seed)
        }
    }

    pub fn for_template(template: TaskTemplate, num_patients: usize, seed: u64) -> Self {
        match template {
            TaskTemplate::AfHf => Self::af_hf(num_patients, seed),
            TaskTemplate::FHf => Self::f_hf(num_patients, seed),
        }
    }

    pub fn concept_specs(&self) -> Vec<ConceptSpec> {
        self.template.concept_specs()
    }

    pub fn validate(&self) -> Result<()> {
        let specs = self.concept_specs();
        let combos = combination_count(&specs);
        if self.strata.is_empty() {
            return Err(config_err("generator needs at least one stratum"));
        }
        let prior_sum: f64 = self.strata.iter().map(|s| s.prior).sum();
        if (prior_sum - 1.0).abs() > 1e-9 || self.strata.iter().any(|s| s.prior < 0.0) {
            return Err(config_err(format!("stratum priors sum to {prior_sum}, not 1")));
        }
        for (i, s) in self.strata.iter().enumerate() {
            if s.combinations.len() != combos {
                return Err(config_err(format!(
                    "stratum {i}: {} combination probabilities for {combos} combinations",
                    s.combinations.len()
                )));
            }
            let sum: f64 = s.combinations.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || s.combinations.iter().any(|p| *p < 0.0) {
                return Err(config_err(format!(
                    "stratum {i}: combination distribution sums to {sum}, not 1"
                )));
            }
        }
        if self.risk_table.len() != self.strata.len()
            || self.risk_table.iter().any(|r| r.len() != combos)
        {
            return Err(config_err("risk_table must be strata × combinations"));
        }
        if self.risk_table.iter().flatten().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(config_err("every risk must lie in (0, 1)"));
        }
        if self.signature_codes == 0 {
            return Err(config_err("signature_codes must be >= 1"));
        }
        if self.visits[0] == 0 || self.visits[0] > self.visits[1] {
            return Err(config_err("visits must be a non-empty range starting at >= 1"));
        }
        for (name, r) in [
            ("history_years", self.history_years),
            ("baseline_age", self.baseline_age),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(config_err(format!("{name} must be a positive, ordered range")));
            }
        }
        if self.baseline_age[0] <= self.history_years[1] + FOLLOW_UP_TOP {
            return Err(config_err("baseline_age must exceed the longest history"));
        }
        for (name, p) in [
            ("signature_purity", self.signature_purity),
            ("measurement_rate", self.measurement_rate),
            ("medication_rate", self.medication_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn risk(&self, stratum: usize, combination: &ConceptVector) -> f64 {
        self.risk_table[stratum][combination_index(&self.concept_specs(), combination.values())]
    }

    /// Generator-oracle risk ratio of an exposure within a stratum, other concepts at `base`.
    pub fn oracle_risk_ratio(&self, stratum: usize, exposure: &Exposure, base: &ConceptVector) -> Result<f64> {
        let specs = self.concept_specs();
        exposure.check(&specs)?;
        base.check(&specs)?;
        if stratum >= self.strata.len() {
            return Err(data_err(format!("stratum {stratum} out of range")));
        }
        Ok(self.risk(stratum, &exposure.apply(base, true)) / self.risk(stratum, &exposure.apply(base, false)))
    }

    /// Marginal label prevalence implied by the tables.
    pub fn expected_prevalence(&self) -> f64 {
        self.strata
            .iter()
            .zip(&self.risk_table)
            .map(|(s, r)| s.prior * s.combinations.iter().zip(r).map(|(p, r)| p * r).sum::<f64>())
            .sum()
    }
}

fn signature_code(s: usize, j: usize) -> String {
    let ch = if j % 2 == 0 { "TEST" } else { "PROC" };
    format!("{ch}:SIG{s}-{j}")
}

fn noise_code(j: usize) -> String {
    format!("{}:N{j}", NOISE_CHANNELS[j % NOISE_CHANNELS.len()])
}

/// Deterministic vocabulary for a generator configuration.
pub fn build_vocabulary(config: &GeneratorConfig) -> Result<CodeVocabulary> {
    let mut v = CodeVocabulary::new();
    for (_, dx, med) in AF_HF_CONCEPTS {
        v.insert(dx)?;
        v.insert(med)?;
    }
    v.insert(CHD_CODE)?;
    v.insert(HF_CODE)?;
    for s in 0..config.strata.len() {
        for j in 0..config.signature_codes {
            v.insert(&signature_code(s, j))?;
        }
    }
    for j in 0..config.noise_codes {
        v.insert(&noise_code(j))?;
    }
    for kind in MeasurementKind::ALL {
        for c in kind.all_codes() {
            v.insert(&c)?;
        }
    }
    for c in LIFESTYLE {
        v.insert(c)?;
    }
    Ok(v)
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

struct Builder<'a> {
    config: &'a GeneratorConfig,
    vocab: &'a CodeVocabulary,
    stratum: usize,
    visit_ages: Vec<f64>,
    events: Vec<MedicalEvent>,
}

impl Builder<'_> {
    fn id(&self, code: &str) -> usize {
        self.vocab.id(code).expect("generator code missing from vocabulary")
    }

    fn open_visit(&mut self, age: f64) -> u32 {
        self.visit_ages.push(age);
        (self.visit_ages.len() - 1) as u32
    }

    fn emit(&mut self, code: &str, visit: u32) {
        let code = self.id(code);
        let age = self.visit_ages[visit as usize].floor().max(0.0) as u32;
        self.events.push(MedicalEvent { code, age, visit });
    }

    fn signature(&mut self, rng: &mut ChaCha8Rng, visit: u32) {
        let n = self.config.strata.len();
        let s = if n == 1 || rng.random_bool(self.config.signature_purity) {
            self.stratum
        } else {
            let other = rng.random_range(0..n - 1);
            if other >= self.stratum {
                other + 1
            } else {
                other
            }
        };
        let j = rng.random_range(0..self.config.signature_codes);
        self.emit(&signature_code(s, j), visit);
    }

    fn noise(&mut self, rng: &mut ChaCha8Rng, visit: u32) {
        if self.config.noise_codes == 0 {
            return;
        }
        for _ in 0..rng.random_range(0..=self.config.noise_per_visit) {
            let j = rng.random_range(0..self.config.noise_codes);
            self.emit(&noise_code(j), visit);
        }
    }

    fn measurement(&mut self, kind: MeasurementKind, mean: f64, sd: f64, rng: &mut ChaCha8Rng, visit: u32) {
        let v = Normal::new(mean, sd).expect("valid normal").sample(rng);
        if let Ok(Some(b)) = measurement_bucket(v, kind) {
            self.emit(&b.code(), visit);
        }
    }

    fn lifestyle(&mut self, rng: &mut ChaCha8Rng, visit: u32) {
        let smoke = rng.random_range(0..3);
        let drink = rng.random_range(3..6);
        self.emit(LIFESTYLE[smoke], visit);
        self.emit(LIFESTYLE[drink], visit);
    }
}

fn sorted_uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn af_hf_history(b: &mut Builder, rng: &mut ChaCha8Rng, concepts: &ConceptVector, baseline_age: f64) {
    let cfg = b.config;
    let n_visits = rng.random_range(cfg.visits[0]..=cfg.visits[1]);
    let span = rng.random_range(cfg.history_years[0]..=cfg.history_years[1]);
    let times = sorted_uniform(rng, n_visits, 0.0, span);
    // Visit at which each present concept is first diagnosed.
    let onset: Vec<Option<usize>> = concepts
        .0
        .iter()
        .map(|&v| (v == 1).then(|| rng.random_range(0..n_visits)))
        .collect();
    let ht = concepts.0[1] as f64;
    let dm = concepts.0[2] as f64;
    for (k, t) in times.iter().enumerate() {
        let visit = b.open_visit(baseline_age - span + t);
        if k == 0 {
            b.lifestyle(rng, visit);
        }
        b.signature(rng, visit);
        for (c, on) in onset.iter().enumerate() {
            let (_, dx, med) = AF_HF_CONCEPTS[c];
            match on {
                Some(d) if *d == k => b.emit(dx, visit),
                Some(d) if *d < k && rng.random_bool(cfg.medication_rate) => b.emit(med, visit),
                _ => {}
            }
        }
        b.noise(rng, visit);
        if rng.random_bool(cfg.measurement_rate) {
            b.measurement(MeasurementKind::SystolicBp, 125.0 + 15.0 * ht, 12.0, rng, visit);
        }
        if rng.random_bool(cfg.measurement_rate / 2.0) {
            b.measurement(MeasurementKind::Bmi, 27.0 + 4.0 * dm, 4.0, rng, visit);
        }
    }
}

/// Returns false when the sampled follow-up admits no visit count in the frequency category.
fn f_hf_history(b: &mut Builder, rng: &mut ChaCha8Rng, concepts: &ConceptVector, baseline_age: f64) -> bool {
    let (flo, fhi) = bucket_bounds(concepts.0[1], &FOLLOW_UP_EDGES, FOLLOW_UP_TOP);
    let w = fhi - flo;
    let follow_up = rng.random_range(flo + 0.1 * w..fhi - 0.1 * w);
    let (rlo, rhi) = bucket_bounds(concepts.0[0], &FREQUENCY_EDGES, FREQUENCY_TOP);
    let min_count = (rlo * follow_up).ceil() as usize;
    let max_count = ((rhi * follow_up).ceil() as usize).saturating_sub(1);
    if min_count > max_count {
        return false;
    }
    let count = rng.random_range(min_count..=max_count);
    let index_age = baseline_age - follow_up;
    let n_pre = rng.random_range(2usize.saturating_sub(count).max(1)..=3);
    for age in sorted_uniform(rng, n_pre, index_age - 4.0, index_age - 0.2) {
        let visit = b.open_visit(age);
        if b.visit_ages.len() == 1 {
            b.lifestyle(rng, visit);
        }
        b.signature(rng, visit);
        b.noise(rng, visit);
        if rng.random_bool(b.config.measurement_rate) {
            b.measurement(MeasurementKind::SystolicBp, 130.0, 15.0, rng, visit);
            b.measurement(MeasurementKind::DiastolicBp, 80.0, 10.0, rng, visit);
        }
    }
    let visit = b.open_visit(index_age);
    b.emit(CHD_CODE, visit);
    b.signature(rng, visit);
    for t in sorted_uniform(rng, count, 0.0, follow_up) {
        let visit = b.open_visit(index_age + t.max(1e-6));
        if rng.random_bool(0.7) {
            b.signature(rng, visit);
        } else if b.config.noise_codes > 0 {
            let j = rng.random_range(0..b.config.noise_codes);
            b.emit(&noise_code(j), visit);
        } else {
            b.signature(rng, visit);
        }
    }
    true
}

/// Generates one patient from its own random stream.
pub fn generate_patient(
    config: &GeneratorConfig,
    vocab: &CodeVocabulary,
    defs: &[ConceptDefinition],
    id: u64,
) -> Result<PatientRecord> {
    let mut rng = stream_rng(config.seed, id);
    let specs = config.concept_specs();
    let priors: Vec<f64> = config.strata.iter().map(|s| s.prior).collect();
    let stratum = sample_index(&mut rng, &priors);
    let combo = sample_index(&mut rng, &config.strata[stratum].combinations);
    let concepts = combination_from_index(&specs, combo);
    let label = u8::from(rng.random_bool(config.risk_table[stratum][combo]));
    for _ in 0..MAX_ATTEMPTS {
        let baseline_age = rng.random_range(config.baseline_age[0]..=config.baseline_age[1]);
        let mut b = Builder {
            config,
            vocab,
            stratum,
            visit_ages: Vec::new(),
            events: Vec::new(),
        };
        let ok = match config.template {
            TaskTemplate::AfHf => {
                af_hf_history(&mut b, &mut rng, &concepts, baseline_age);
                true
            }
            TaskTemplate::FHf => f_hf_history(&mut b, &mut rng, &concepts, baseline_age),
        };
        if !ok {
            continue;
        }
        let baseline = b.events.len();
        let visit = b.open_visit(baseline_age + rng.random_range(0.1..5.0));
        if label == 1 {
            b.emit(HF_CODE, visit);
        }
        b.noise(&mut rng, visit);
        let record = PatientRecord {
            id,
            stratum,
            label,
            concepts: concepts.clone(),
            baseline,
            baseline_age,
            visit_ages: b.visit_ages,
            events: b.events,
        };
        // Floating-point edge cases can push a derived category across a boundary; redraw them.
        if derive_concepts(&record, defs, vocab)? == concepts {
            return Ok(record);
        }
    }
    Err(data_err(format!(
        "patient {id}: could not realize concept combination {}",
        concepts.render()
    )))
}

/// Patients with ids in `ids`. Any sharding of the id range yields the same records.
pub fn generate_patients(
    config: &GeneratorConfig,
    vocab: &CodeVocabulary,
    ids: Range<u64>,
) -> Result<Vec<PatientRecord>> {
    let defs = config.template.concept_definitions();
    ids.into_par_iter()
        .map(|id| generate_patient(config, vocab, &defs, id))
        .collect()
}

pub fn generate_cohort(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let vocab = build_vocabulary(config)?;
    let patients = generate_patients(config, &vocab, 0..config.num_patients as u64)?;
    Ok(Dataset {
        header: DatasetHeader::new(config.template, Some(config.clone()), patients.len()),
        vocab,
        patients,
    })
}
