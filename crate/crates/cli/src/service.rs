//! HTTP service over one trained model and the dataset it was trained on.
//!
//! Routes:
//!
//! - `GET /schema`: the resolved schema embedded in the checkpoint
//! - `GET /entities?type=&offset=&limit=`: a page of entities in human form
//! - `GET /entity/{id}`: one entity with its incoming and outgoing edges
//! - `GET /component/{id}`: every entity connected to `id`
//! - `GET /neighbors/{id}?k=&same_type=`: most cosine-similar entities
//! - `POST /infer`: evaluation-mode forward over an edited component
//!
//! Errors carry `{"error", "field", "diagnostics"}` bodies. Requests that do
//! not fit the schema get 422.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use graphae::dataset::{Batch, Dataset, DatasetError};
use graphae::explore::{export_bottlenecks, neighbors_of, BottleneckTable, ExploreError, PairList};
use graphae::model::{AssembledModel, ModelError};
use graphae::schema::{Diagnostic, EntityRecord};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
pub const MAX_PAGE: usize = 1000;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            field: None,
            diagnostics: Vec::new(),
        }
    }

    fn unprocessable(message: impl Into<String>, field: impl Into<String>) -> Self {
        ApiError {
            field: Some(field.into()),
            ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
        }
    }

    fn from_diagnostics(message: &str, diagnostics: Vec<Diagnostic>) -> Self {
        ApiError {
            field: diagnostics.first().map(|d| d.location.clone()),
            diagnostics,
            ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": self.message,
            "field": self.field,
            "diagnostics": self.diagnostics,
        });
        (self.status, Json(body)).into_response()
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Dataset(d) => d.into(),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl From<DatasetError> for ApiError {
    fn from(e: DatasetError) -> Self {
        match &e {
            DatasetError::Invalid(d) => ApiError::from_diagnostics("entities do not fit the schema", d.clone()),
            DatasetError::Pack { property, .. } => ApiError::unprocessable(e.to_string(), property.clone()),
            _ => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        }
    }
}

impl From<ExploreError> for ApiError {
    fn from(e: ExploreError) -> Self {
        let status = match e {
            ExploreError::UnknownId(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

/// Immutable state shared by all requests.
pub struct AppState {
    model: AssembledModel,
    dataset: Dataset,
    table: BottleneckTable,
    schema_json: String,
}

impl AppState {
    /// Packs `entities` with the model's codecs and exports the deepest
    /// bottlenecks for neighbor queries.
    pub fn new(model: AssembledModel, entities: &[Value]) -> Result<AppState, ModelError> {
        let dataset = Dataset::new(model.schema().clone(), entities)?.with_codecs(model.codecs().clone())?;
        let table = export_bottlenecks(&model, &dataset, model.wiring().depth).map_err(|e| match e {
            ExploreError::Model(m) => m,
            other => ModelError::Checkpoint(other.to_string()),
        })?;
        let schema_json = serde_json::to_string(&model.schema().to_document()).expect("schema documents serialize");
        Ok(AppState {
            model,
            dataset,
            table,
            schema_json,
        })
    }

    pub fn model(&self) -> &AssembledModel {
        &self.model
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn table(&self) -> &BottleneckTable {
        &self.table
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/schema", get(schema))
        .route("/entities", get(entities))
        .route("/entity/{id}", get(entity))
        .route("/component/{id}", get(component))
        .route("/neighbors/{id}", get(neighbors))
        .route("/infer", post(infer_route))
        .with_state(state)
}

async fn schema(State(s): State<Arc<AppState>>) -> Response {
    ([(axum::http::header::CONTENT_TYPE, "application/json")], s.schema_json.clone()).into_response()
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    #[serde(rename = "type")]
    pub entity_type: Option<String>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EntityPage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub entities: Vec<Value>,
}

async fn entities(State(s): State<Arc<AppState>>, q: Result<Query<PageQuery>, axum::extract::rejection::QueryRejection>) -> Result<Json<EntityPage>, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(50);
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("limit must be in 1..={MAX_PAGE}")));
    }
    let ids: Vec<usize> = match &q.entity_type {
        Some(t) if s.dataset.schema().entity_type(t).is_none() => {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown entity-type {t:?}")));
        }
        Some(t) => s.dataset.of_type(t),
        None => (0..s.dataset.len()).collect(),
    };
    if offset > ids.len() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("offset {offset} is past the last of {} entities", ids.len()),
        ));
    }
    Ok(Json(EntityPage {
        total: ids.len(),
        offset,
        limit,
        entities: ids[offset..].iter().take(limit).map(|&i| s.dataset.record(i).to_value()).collect(),
    }))
}

#[derive(Debug, Serialize, Deserialize, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub relationship: String,
    pub source: String,
    pub target: String,
}

fn lookup(s: &AppState, id: &str) -> Result<usize, ApiError> {
    s.dataset
        .index_of(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown entity {id:?}")))
}

fn edges_touching(d: &Dataset, members: &BTreeSet<usize>) -> Vec<Edge> {
    let mut out = Vec::new();
    for (rel, list) in d.edges() {
        for &(a, b) in list {
            if members.contains(&a) || members.contains(&b) {
                out.push(Edge {
                    relationship: rel.clone(),
                    source: d.id(a).to_string(),
                    target: d.id(b).to_string(),
                });
            }
        }
    }
    out
}

async fn entity(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let i = lookup(&s, &id)?;
    Ok(Json(json!({
        "entity": s.dataset.record(i).to_value(),
        "edges": edges_touching(&s.dataset, &BTreeSet::from([i])),
    })))
}

async fn component(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let i = lookup(&s, &id)?;
    let mut seen = BTreeSet::from([i]);
    let mut stack = vec![i];
    while let Some(x) = stack.pop() {
        for &y in s.dataset.neighbors(x) {
            if seen.insert(y) {
                stack.push(y);
            }
        }
    }
    Ok(Json(json!({
        "entities": seen.iter().map(|&j| s.dataset.record(j).to_value()).collect::<Vec<_>>(),
        "edges": edges_touching(&s.dataset, &seen),
    })))
}

#[derive(Debug, Deserialize)]
pub struct NeighborQuery {
    pub k: Option<usize>,
    #[serde(default)]
    pub same_type: bool,
}

async fn neighbors(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    q: Result<Query<NeighborQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<PairList>, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    lookup(&s, &id)?;
    Ok(Json(neighbors_of(&s.table, &id, q.k.unwrap_or(10), q.same_type)?))
}

/// A property to hide from the input: by name for every entity, or for one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskEntry {
    Everywhere(String),
    One { id: String, property: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    /// Human-form entities. Inline relationship values must name entities
    /// in the request.
    pub entities: Vec<Value>,
    /// Extra relationship edges among the request's entities.
    #[serde(default)]
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub mask: Vec<MaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredEntity {
    pub id: String,
    pub entity_type: String,
    /// Properties hidden from the input.
    pub masked: Vec<String>,
    /// Decoded value of every decodable property, observed or not.
    pub reconstruction: IndexMap<String, Value>,
    /// Loss of each provided value, masked ones included.
    pub losses: IndexMap<String, f64>,
    /// One vector per depth.
    pub bottlenecks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub entities: Vec<InferredEntity>,
    pub loss: f64,
}

async fn infer_route(
    State(s): State<Arc<AppState>>,
    body: Result<Json<InferRequest>, JsonRejection>,
) -> Result<Json<InferResponse>, ApiError> {
    let Json(req) = body.map_err(|e| {
        let status = match e {
            JsonRejection::JsonDataError(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.body_text())
    })?;
    Ok(Json(infer(&s.model, &req)?))
}

/// Packs the request with the model's codecs and runs an evaluation-mode
/// forward over it. Never touches stored data.
pub fn infer(model: &AssembledModel, req: &InferRequest) -> Result<InferResponse, ApiError> {
    let schema = model.schema();
    let mut records = Vec::with_capacity(req.entities.len());
    for (n, raw) in req.entities.iter().enumerate() {
        match EntityRecord::parse(schema, raw) {
            Ok(r) => records.push(r),
            Err(report) => {
                let mut e = ApiError::from_diagnostics(&format!("entity {n} does not fit the schema"), report.errors);
                e.field = e.field.map(|f| format!("entities[{n}].{f}"));
                return Err(e);
            }
        }
    }
    let position: HashMap<String, usize> = records.iter().enumerate().map(|(k, r)| (r.id.clone(), k)).collect();
    for (n, e) in req.edges.iter().enumerate() {
        let field = format!("edges[{n}]");
        let Some(def) = schema.relationship(&e.relationship) else {
            return Err(ApiError::unprocessable(format!("unknown relationship {:?}", e.relationship), field));
        };
        let Some(&k) = position.get(&e.source) else {
            return Err(ApiError::unprocessable(format!("source {:?} is not in the request", e.source), field));
        };
        if records[k].entity_type != def.source_entity_type {
            return Err(ApiError::unprocessable(
                format!("{:?} is a {}, {} starts at {}", e.source, records[k].entity_type, e.relationship, def.source_entity_type),
                field,
            ));
        }
        records[k].relationships.entry(e.relationship.clone()).or_default().push(e.target.clone());
    }
    let dataset = Dataset::from_records(schema.clone(), records)?.with_codecs(model.codecs().clone())?;

    let mut batch = Batch::new(&dataset, (0..dataset.len()).collect());
    for (n, m) in req.mask.iter().enumerate() {
        let (who, property) = match m {
            MaskEntry::Everywhere(p) => (None, p),
            MaskEntry::One { id, property } => (Some(id), property),
        };
        if schema.property(property).is_none() {
            return Err(ApiError::unprocessable(format!("unknown property {property:?}"), format!("mask[{n}]")));
        }
        match who {
            None => batch.hidden.iter_mut().for_each(|h| {
                h.insert(property.clone());
            }),
            Some(id) => {
                let Some(&k) = position.get(id) else {
                    return Err(ApiError::unprocessable(format!("entity {id:?} is not in the request"), format!("mask[{n}]")));
                };
                batch.hidden[k].insert(property.clone());
            }
        }
    }

    let out = model.forward(&dataset, &batch)?;
    let recon = model.reconstruct(&out)?;
    let entities = recon
        .into_iter()
        .enumerate()
        .map(|(k, reconstruction)| {
            let etype = dataset.entity_type(k);
            InferredEntity {
                id: dataset.id(k).to_string(),
                entity_type: etype.to_string(),
                masked: schema.entity_types[etype]
                    .properties
                    .iter()
                    .filter(|p| batch.hidden[k].contains(*p))
                    .cloned()
                    .collect(),
                reconstruction,
                losses: out.entity_losses[k].clone(),
                bottlenecks: (0..out.bottlenecks.len()).map(|d| out.bottleneck(d, k).to_vec()).collect(),
            }
        })
        .collect();
    Ok(InferResponse { entities, loss: out.loss })
}
