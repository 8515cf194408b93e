//! Read-only HTTP/JSON service over a frozen model and its cluster analysis.
//!
//! | method | path                         | body                          |
//! |--------|------------------------------|-------------------------------|
//! | GET    | `/api/meta`                  | task, cohort size, concepts   |
//! | GET    | `/api/clusters`              | occupied clusters             |
//! | GET    | `/api/clusters/{id}/upset`   | UpSet table of one cluster    |
//! | POST   | `/api/counterfactual`        | `do(c)` query in a cluster    |
//! | GET    | `/api/sanity`                | estimated vs observed RR      |
//! | GET    | `/api/patients/{id}/risk`    | factual risk and cluster      |
//!
//! Cluster ids in paths and request bodies are integers; payloads also carry
//! the comma bit-string rendering. Errors are `{"code", "message"}` objects.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pcb_core::concept::{ConceptSpec, ConceptVector};
use pcb_core::counterfactual::{
    counterfactual, modal_combination, Analysis, ClusterId, CounterfactualResult, PlausibilityRange, SanityReport,
    UpsetCell, UpsetTable,
};
use pcb_core::model::Model;
use pcb_core::synth::TaskTemplate;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    BadRequest,
    NotFound,
    NotPlausibleContext,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn status(&self) -> StatusCode {
        match self.code {
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::NotPlausibleContext => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

impl From<pcb_core::Error> for ApiError {
    fn from(e: pcb_core::Error) -> Self {
        match e {
            pcb_core::Error::Usage(m) => ApiError::new(ErrorCode::BadRequest, m),
            other => ApiError::new(ErrorCode::Internal, other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub task: TaskTemplate,
    pub n: usize,
    pub latent_groups: usize,
    pub concepts: Vec<ConceptSpec>,
    pub exposure: String,
    pub coverage: f64,
    pub plausibility: PlausibilityRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub id: u32,
    pub code: ClusterId,
    pub size: usize,
    pub share: f64,
    pub mean_risk: f64,
    pub observed_rate: f64,
    /// Member of the major-cluster set.
    pub major: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clusters {
    pub coverage: f64,
    pub clusters: Vec<ClusterEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Upset {
    pub id: u32,
    pub code: ClusterId,
    pub size: usize,
    pub cells: Vec<UpsetCell>,
    pub mean_baseline_age: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualRequest {
    pub cluster: u32,
    pub assignment: Vec<usize>,
    /// Defaults to the cluster's most frequent combination.
    #[serde(default)]
    pub reference: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub id: u32,
    #[serde(flatten)]
    pub result: CounterfactualResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRisk {
    pub id: u64,
    pub cluster_id: u32,
    pub cluster: ClusterId,
    pub concepts: ConceptVector,
    /// Frozen-model risk with the recorded concepts.
    pub factual_risk: f64,
    /// Risk with predicted concepts.
    pub risk: f64,
}

/// Immutable state shared by all requests.
pub struct ServiceState {
    pub task: TaskTemplate,
    pub model: Model,
    pub analysis: Analysis,
    patient_index: HashMap<u64, usize>,
}

impl ServiceState {
    pub fn new(task: TaskTemplate, model: Model, analysis: Analysis) -> Self {
        let patient_index = analysis.patients.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        Self {
            task,
            model,
            analysis,
            patient_index,
        }
    }

    fn cluster_id(&self, index: u32) -> Result<ClusterId, ApiError> {
        ClusterId::from_index(index, self.analysis.latent_groups)
            .map_err(|_| ApiError::new(ErrorCode::NotFound, format!("no cluster {index}")))
    }

    /// UpSet table of an occupied cluster, or an empty one.
    fn table(&self, c: ClusterId) -> UpsetTable {
        self.analysis.upset(c).cloned().unwrap_or(UpsetTable {
            cluster: c,
            size: 0,
            cells: Vec::new(),
            mean_baseline_age: None,
        })
    }
}

type Shared = Arc<ServiceState>;

fn parse_int<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, ApiError> {
    s.parse()
        .map_err(|_| ApiError::new(ErrorCode::BadRequest, format!("{what} must be a non-negative integer, got `{s}`")))
}

async fn meta(State(s): State<Shared>) -> Json<Meta> {
    let a = &s.analysis;
    Json(Meta {
        task: s.task,
        n: a.patients.len(),
        latent_groups: a.latent_groups,
        concepts: s.model.concept_specs().to_vec(),
        exposure: a.config.exposure.clone(),
        coverage: a.config.coverage,
        plausibility: a.config.plausibility,
    })
}

async fn clusters(State(s): State<Shared>) -> Json<Clusters> {
    let mut v: Vec<ClusterEntry> = s
        .analysis
        .clusters
        .iter()
        .map(|c| ClusterEntry {
            id: c.cluster.index(),
            code: c.cluster,
            size: c.size,
            share: c.share,
            mean_risk: c.mean_risk,
            observed_rate: c.observed_rate,
            major: c.major,
        })
        .collect();
    v.sort_by(|a, b| b.size.cmp(&a.size).then(a.id.cmp(&b.id)));
    Json(Clusters {
        coverage: s.analysis.config.coverage,
        clusters: v,
    })
}

async fn upset(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<Upset>, ApiError> {
    let c = s.cluster_id(parse_int(&id, "cluster id")?)?;
    let t = s.table(c);
    Ok(Json(Upset {
        id: c.index(),
        code: c,
        size: t.size,
        cells: t.cells,
        mean_baseline_age: t.mean_baseline_age,
    }))
}

fn check_assignment(specs: &[ConceptSpec], v: Vec<usize>, what: &str) -> Result<ConceptVector, ApiError> {
    let cv = ConceptVector(v);
    cv.check(specs)
        .map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("{what}: {e}")))?;
    Ok(cv)
}

async fn post_counterfactual(State(s): State<Shared>, body: Bytes) -> Result<Json<Counterfactual>, ApiError> {
    let req: CounterfactualRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("malformed request: {e}")))?;
    let c = s.cluster_id(req.cluster)?;
    let specs = s.model.concept_specs();
    let assignment = check_assignment(specs, req.assignment, "assignment")?;
    let table = s.table(c);
    let reference = match req.reference {
        Some(r) => check_assignment(specs, r, "reference")?,
        None => modal_combination(&table).ok_or_else(|| {
            ApiError::new(
                ErrorCode::NotPlausibleContext,
                format!("cluster {c} has no members, so there is no default reference; supply one"),
            )
        })?,
    };
    let result = counterfactual(&s.model, &table, &assignment, &reference, &s.analysis.config.plausibility)?;
    Ok(Json(Counterfactual { id: c.index(), result }))
}

async fn sanity(State(s): State<Shared>) -> Json<SanityReport> {
    Json(s.analysis.sanity.clone())
}

async fn patient_risk(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<PatientRisk>, ApiError> {
    let id: u64 = parse_int(&id, "patient id")?;
    let i = *s
        .patient_index
        .get(&id)
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("no patient {id}")))?;
    let p = &s.analysis.patients[i];
    Ok(Json(PatientRisk {
        id: p.id,
        cluster_id: p.cluster.index(),
        cluster: p.cluster,
        concepts: p.concepts.clone(),
        factual_risk: p.factual_risk,
        risk: p.risk,
    }))
}

async fn fallback() -> ApiError {
    ApiError::new(ErrorCode::NotFound, "no such endpoint")
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/clusters", get(clusters))
        .route("/api/clusters/{id}/upset", get(upset))
        .route("/api/counterfactual", post(post_counterfactual))
        .route("/api/sanity", get(sanity))
        .route("/api/patients/{id}/risk", get(patient_risk))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Shared, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
