//! Cluster-conditioned counterfactual analysis over a frozen model.

pub mod report;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::concept::{combination_count, combination_from_index, combination_index, ConceptSpec, ConceptVector, Exposure};
use crate::error::{config_err, usage_err, Result};
use crate::model::Model;
use crate::trainer::Example;

pub use stats::{adjusted_rand_index, spearman};

/// An n-bit latent code; the first bit is the most significant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClusterId {
    index: u32,
    n: u8,
}

impl ClusterId {
    pub fn from_index(index: u32, n: usize) -> Result<Self> {
        if n == 0 || n > 16 {
            return Err(usage_err(format!("code length {n} outside 1..=16")));
        }
        if index >= 1 << n {
            return Err(usage_err(format!("cluster {index} out of range for {n} bits")));
        }
        Ok(Self { index, n: n as u8 })
    }

    pub fn from_bits(bits: &[usize]) -> Result<Self> {
        if bits.iter().any(|b| *b > 1) {
            return Err(usage_err("cluster bits must be 0 or 1"));
        }
        let index = bits.iter().fold(0u32, |acc, b| (acc << 1) | *b as u32);
        Self::from_index(index, bits.len())
    }

    /// Parses the comma rendering, e.g. `0,1,1`.
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .split(',')
            .map(|t| match t.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(usage_err(format!("bad cluster bit `{other}`"))),
            })
            .collect::<Result<Vec<usize>>>()?;
        Self::from_bits(&bits)
    }

    pub fn index(self) -> u32 {
        self.index
    }

    pub fn bits_len(self) -> usize {
        self.n as usize
    }

    pub fn bits(self) -> Vec<usize> {
        (0..self.n)
            .rev()
            .map(|k| ((self.index >> k) & 1) as usize)
            .collect()
    }

    pub fn render(self) -> String {
        crate::concept::render_values(&self.bits())
    }
}

impl Serialize for ClusterId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for ClusterId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// What the analysis needs to know about one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientAnalysis {
    pub id: u64,
    pub cluster: ClusterId,
    pub label: u8,
    pub concepts: ConceptVector,
    /// Test-time risk (predicted concepts fed to the classifier).
    pub risk: f64,
    /// Eval-mode risk of the full forward pass with the recorded concepts fed to the classifier.
    pub factual_risk: f64,
    /// Predicted concepts.
    pub predicted: ConceptVector,
}

/// Eval-mode latent code of every example, in input order.
pub fn assign_clusters(model: &Model, data: &[Example]) -> Result<Vec<ClusterId>> {
    data.par_iter()
        .map(|ex| ClusterId::from_bits(&model.latent_code(&ex.seq)?))
        .collect()
}

/// Clusters plus test-time and factual risks for every example.
pub fn analyze_patients(model: &Model, data: &[Example]) -> Result<Vec<PatientAnalysis>> {
    model.require_bottleneck()?;
    data.par_iter()
        .map(|ex| {
            let p = model.predict(&ex.seq)?;
            let code = p.code.expect("pcb code");
            let cluster = ClusterId::from_bits(&code)?;
            let factual = model.ground_truth_logit(&ex.seq, &ex.concepts)?;
            Ok(PatientAnalysis {
                id: ex.id,
                cluster,
                label: ex.label,
                concepts: ex.concepts.clone(),
                risk: p.risk,
                factual_risk: sigmoid(factual),
                predicted: p.concepts.expect("pcb concepts"),
            })
        })
        .collect()
}

/// Occupied clusters and their sizes, ordered by id.
pub fn cluster_sizes(clusters: impl IntoIterator<Item = ClusterId>) -> Vec<(ClusterId, usize)> {
    let mut m: BTreeMap<ClusterId, usize> = BTreeMap::new();
    for c in clusters {
        *m.entry(c).or_default() += 1;
    }
    m.into_iter().collect()
}

/// Clusters by size (descending, ties by id ascending), cut at the shortest
/// prefix whose share of patients reaches `coverage`.
pub fn select_major_clusters(sizes: &[(ClusterId, usize)], coverage: f64) -> Result<Vec<ClusterId>> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(config_err(format!("analysis.coverage must lie in (0, 1], got {coverage}")));
    }
    let total: usize = sizes.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(usage_err("no assigned patients"));
    }
    let mut sorted: Vec<(ClusterId, usize)> = sizes.iter().copied().filter(|(_, n)| *n > 0).collect();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::new();
    let mut covered = 0usize;
    for (c, n) in sorted {
        out.push(c);
        covered += n;
        // Integer comparison of covered / total >= coverage up to rounding of `coverage`.
        if covered as f64 >= coverage * total as f64 - 1e-9 {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsetCell {
    pub combination: ConceptVector,
    pub count: usize,
    /// Mean test-time model risk of the members in this cell.
    pub mean_risk: f64,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsetTable {
    pub cluster: ClusterId,
    pub size: usize,
    /// Non-empty cells in combination order.
    pub cells: Vec<UpsetCell>,
    pub mean_baseline_age: Option<f64>,
}

impl UpsetTable {
    pub fn count(&self, combination: &ConceptVector) -> usize {
        self.cells
            .iter()
            .find(|c| &c.combination == combination)
            .map_or(0, |c| c.count)
    }

    /// Share of members with exactly this combination (0 for an empty cluster).
    pub fn prevalence(&self, combination: &ConceptVector) -> f64 {
        if self.size == 0 {
            0.0
        } else {
            self.count(combination) as f64 / self.size as f64
        }
    }
}

/// Member of a cluster for UpSet counting.
#[derive(Clone, Copy, Debug)]
pub struct Member<'a> {
    pub concepts: &'a ConceptVector,
    pub risk: f64,
    pub label: u8,
    pub baseline_age: Option<f64>,
}

pub fn upset(cluster: ClusterId, members: &[Member], specs: &[ConceptSpec]) -> Result<UpsetTable> {
    let mut cells: BTreeMap<usize, (usize, f64, usize)> = BTreeMap::new();
    let mut ages = Vec::new();
    for m in members {
        m.concepts.check(specs)?;
        let e = cells.entry(combination_index(specs, m.concepts.values())).or_default();
        e.0 += 1;
        e.1 += m.risk;
        e.2 += usize::from(m.label);
        ages.extend(m.baseline_age);
    }
    Ok(UpsetTable {
        cluster,
        size: members.len(),
        cells: cells
            .into_iter()
            .map(|(idx, (count, risk, positives))| UpsetCell {
                combination: combination_from_index(specs, idx),
                count,
                mean_risk: risk / count as f64,
                positives,
            })
            .collect(),
        mean_baseline_age: (!ages.is_empty()).then(|| ages.iter().sum::<f64>() / ages.len() as f64),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityRange {
    pub min: f64,
    pub max: f64,
}

impl Default for PlausibilityRange {
    fn default() -> Self {
        Self { min: 0.05, max: 0.95 }
    }
}

impl PlausibilityRange {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.min && self.min < self.max && self.max <= 1.0) {
            return Err(config_err(format!(
                "analysis.plausibility must satisfy 0 <= min < max <= 1, got ({}, {})",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Plausible,
    Implausible,
    Impossible,
}

/// Impossible at prevalence 0 or 1, plausible inside the (closed) range, implausible otherwise.
pub fn verdict_for(prevalence: f64, range: &PlausibilityRange) -> Verdict {
    if prevalence <= 0.0 || prevalence >= 1.0 {
        Verdict::Impossible
    } else if prevalence >= range.min && prevalence <= range.max {
        Verdict::Plausible
    } else {
        Verdict::Implausible
    }
}

pub fn judge_plausibility(table: &UpsetTable, combination: &ConceptVector, range: &PlausibilityRange) -> (Verdict, f64) {
    let p = table.prevalence(combination);
    (verdict_for(p, range), p)
}

/// `p(y | do(c), l)`: the classifier on the cluster's codebook embedding and
/// the given concept values.
pub fn estimate_risk(model: &Model, cluster: ClusterId, assignment: &ConceptVector) -> Result<f64> {
    let n = model.require_bottleneck()?.config().latent_groups;
    if cluster.bits_len() != n {
        return Err(usage_err(format!("cluster code has {} bits, model uses {n}", cluster.bits_len())));
    }
    Ok(sigmoid(model.risk_logit_for(&cluster.bits(), assignment)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskRatio {
    pub exposed_risk: f64,
    pub reference_risk: f64,
    pub rr: f64,
}

pub fn risk_ratio(model: &Model, cluster: ClusterId, exposure: &Exposure, base: &ConceptVector) -> Result<RiskRatio> {
    exposure.check(model.concept_specs())?;
    let exposed_risk = estimate_risk(model, cluster, &exposure.apply(base, true))?;
    let reference_risk = estimate_risk(model, cluster, &exposure.apply(base, false))?;
    if reference_risk <= 0.0 {
        return Err(crate::Error::UndefinedMetric("reference risk is zero".into()));
    }
    Ok(RiskRatio {
        exposed_risk,
        reference_risk,
        rr: exposed_risk / reference_risk,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedRatio {
    pub exposed_n: usize,
    pub exposed_positive: usize,
    pub reference_n: usize,
    pub reference_positive: usize,
    /// Missing when either group is empty or the reference group has no positives.
    pub rr: Option<f64>,
}

/// Label prevalence ratio between members with the exposed and the reference
/// combination (other concepts at `base`).
pub fn observed_risk_ratio<'a>(
    members: impl IntoIterator<Item = (&'a ConceptVector, u8)>,
    exposure: &Exposure,
    base: &ConceptVector,
) -> ObservedRatio {
    let exposed = exposure.apply(base, true);
    let reference = exposure.apply(base, false);
    let mut o = ObservedRatio {
        exposed_n: 0,
        exposed_positive: 0,
        reference_n: 0,
        reference_positive: 0,
        rr: None,
    };
    for (c, y) in members {
        if c == &exposed {
            o.exposed_n += 1;
            o.exposed_positive += usize::from(y);
        } else if c == &reference {
            o.reference_n += 1;
            o.reference_positive += usize::from(y);
        }
    }
    if o.exposed_n > 0 && o.reference_n > 0 && o.reference_positive > 0 {
        let pe = o.exposed_positive as f64 / o.exposed_n as f64;
        let pr = o.reference_positive as f64 / o.reference_n as f64;
        o.rr = Some(pe / pr);
    }
    o
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub cluster: ClusterId,
    pub intervention: ConceptVector,
    pub reference: ConceptVector,
    pub estimated_risk: f64,
    pub reference_risk: f64,
    pub risk_ratio: f64,
    pub prevalence: f64,
    pub verdict: Verdict,
}

/// Evaluates `do(intervention)` in a cluster against a reference assignment.
pub fn counterfactual(
    model: &Model,
    table: &UpsetTable,
    intervention: &ConceptVector,
    reference: &ConceptVector,
    range: &PlausibilityRange,
) -> Result<CounterfactualResult> {
    let cluster = table.cluster;
    let estimated_risk = estimate_risk(model, cluster, intervention)?;
    let reference_risk = estimate_risk(model, cluster, reference)?;
    let (verdict, prevalence) = judge_plausibility(table, intervention, range);
    Ok(CounterfactualResult {
        cluster,
        intervention: intervention.clone(),
        reference: reference.clone(),
        estimated_risk,
        reference_risk,
        risk_ratio: estimated_risk / reference_risk,
        prevalence,
        verdict,
    })
}

/// Most frequent combination of a cluster (ties to the lowest combination).
pub fn modal_combination(table: &UpsetTable) -> Option<ConceptVector> {
    let mut best: Option<&UpsetCell> = None;
    for c in &table.cells {
        if best.is_none_or(|b| c.count > b.count) {
            best = Some(c);
        }
    }
    best.map(|c| c.combination.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: ClusterId,
    pub size: usize,
    pub share: f64,
    pub major: bool,
    pub mean_risk: f64,
    pub observed_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityRow {
    pub cluster: ClusterId,
    /// Full combination with the exposure concept at its reference level.
    pub base: ConceptVector,
    pub estimated_rr: f64,
    pub observed_rr: Option<f64>,
    pub exposed_risk: f64,
    pub reference_risk: f64,
    pub exposed_n: usize,
    pub reference_n: usize,
    pub exposed_prevalence: f64,
    pub reference_prevalence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub exposure: String,
    pub rows: Vec<SanityRow>,
    /// Rows with an observed ratio.
    pub comparable: usize,
    pub spearman: Option<f64>,
    pub notice: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub coverage: f64,
    pub plausibility: PlausibilityRange,
    /// Name of the exposure concept used by the sanity check.
    pub exposure: String,
    pub exposed_level: usize,
    pub reference_level: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            coverage: 0.95,
            plausibility: PlausibilityRange::default(),
            exposure: "AF".into(),
            exposed_level: 1,
            reference_level: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self, specs: &[ConceptSpec]) -> Result<Exposure> {
        self.plausibility.validate()?;
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(config_err(format!("analysis.coverage must lie in (0, 1], got {}", self.coverage)));
        }
        let concept = specs
            .iter()
            .position(|s| s.name == self.exposure)
            .ok_or_else(|| config_err(format!("analysis.exposure `{}` is not a concept", self.exposure)))?;
        let e = Exposure {
            concept,
            exposed: self.exposed_level,
            reference: self.reference_level,
        };
        e.check(specs).map_err(|err| config_err(format!("analysis.exposure: {err}")))?;
        Ok(e)
    }
}

/// Everything derived from a frozen model and a cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub latent_groups: usize,
    pub config: AnalysisConfig,
    pub patients: Vec<PatientAnalysis>,
    pub clusters: Vec<ClusterSummary>,
    pub upsets: Vec<UpsetTable>,
    pub sanity: SanityReport,
}

impl Analysis {
    pub fn cluster(&self, id: ClusterId) -> Option<&ClusterSummary> {
        self.clusters.iter().find(|c| c.cluster == id)
    }

    pub fn upset(&self, id: ClusterId) -> Option<&UpsetTable> {
        self.upsets.iter().find(|u| u.cluster == id)
    }

    pub fn patient(&self, id: u64) -> Option<&PatientAnalysis> {
        self.patients.iter().find(|p| p.id == id)
    }
}

/// Assigns clusters, builds UpSet tables and the sanity report.
pub fn analyze(
    model: &Model,
    data: &[Example],
    baseline_ages: Option<&[f64]>,
    config: &AnalysisConfig,
) -> Result<Analysis> {
    let specs = model.concept_specs().to_vec();
    let exposure = config.validate(&specs)?;
    let n = model.require_bottleneck()?.config().latent_groups;
    if data.is_empty() {
        return Err(crate::error::data_err("no patients to analyze"));
    }
    let patients = analyze_patients(model, data)?;
    let sizes = cluster_sizes(patients.iter().map(|p| p.cluster));
    let major = select_major_clusters(&sizes, config.coverage)?;
    let total = patients.len() as f64;

    let mut members: BTreeMap<ClusterId, Vec<usize>> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        members.entry(p.cluster).or_default().push(i);
    }
    let mut clusters = Vec::new();
    let mut upsets = Vec::new();
    for (&c, idx) in &members {
        let m: Vec<Member> = idx
            .iter()
            .map(|&i| Member {
                concepts: &patients[i].concepts,
                risk: patients[i].risk,
                label: patients[i].label,
                baseline_age: baseline_ages.map(|a| a[i]),
            })
            .collect();
        upsets.push(upset(c, &m, &specs)?);
        clusters.push(ClusterSummary {
            cluster: c,
            size: idx.len(),
            share: idx.len() as f64 / total,
            major: major.contains(&c),
            mean_risk: m.iter().map(|x| x.risk).sum::<f64>() / idx.len() as f64,
            observed_rate: m.iter().map(|x| f64::from(x.label)).sum::<f64>() / idx.len() as f64,
        });
    }

    let mut rows = Vec::new();
    for &c in &major {
        let table = upsets.iter().find(|u| u.cluster == c).expect("table");
        for k in 0..combination_count(&specs) {
            let base = combination_from_index(&specs, k);
            if base.0[exposure.concept] != exposure.reference {
                continue;
            }
            let exposed = exposure.apply(&base, true);
            let pe = table.prevalence(&exposed);
            let pr = table.prevalence(&base);
            if verdict_for(pe, &config.plausibility) != Verdict::Plausible
                || verdict_for(pr, &config.plausibility) != Verdict::Plausible
            {
                continue;
            }
            let est = risk_ratio(model, c, &exposure, &base)?;
            let obs = observed_risk_ratio(
                members[&c].iter().map(|&i| (&patients[i].concepts, patients[i].label)),
                &exposure,
                &base,
            );
            rows.push(SanityRow {
                cluster: c,
                base,
                estimated_rr: est.rr,
                observed_rr: obs.rr,
                exposed_risk: est.exposed_risk,
                reference_risk: est.reference_risk,
                exposed_n: obs.exposed_n,
                reference_n: obs.reference_n,
                exposed_prevalence: pe,
                reference_prevalence: pr,
            });
        }
    }
    let pairs: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.observed_rr.map(|o| (r.estimated_rr, o)))
        .collect();
    let (spearman_rho, notice) = if pairs.len() < 3 {
        (None, Some(format!("only {} comparable rows; correlation omitted", pairs.len())))
    } else {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        match spearman(&a, &b) {
            Some(r) => (Some(r), None),
            None => (None, Some("ranks are constant; correlation undefined".into())),
        }
    };
    Ok(Analysis {
        latent_groups: n,
        config: config.clone(),
        sanity: SanityReport {
            exposure: specs[exposure.concept].name.clone(),
            comparable: pairs.len(),
            rows,
            spearman: spearman_rho,
            notice,
        },
        patients,
        clusters,
        upsets,
    })
}
