use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use graphae::dataset::{Batch, Dataset};
use graphae::explore::{nearest_pairs, neighbors_of, SearchMode};
use graphae::model::{AssembledModel, Wiring, WiringConfig};
use graphae::schema::{apply_rules, parse_schema, read_entities};
use graphae_cli::service::{infer, router, AppState, EntityPage, InferRequest, InferResponse, MaskEntry};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const SCHEMA: &str = include_str!("../../core/tests/fixtures/employment_schema.json");

fn entities() -> Vec<Value> {
    read_entities(
        r#"
{"entity_type": "person", "id": "P1", "name": "Mary", "age": 27, "job": "clerk"}
{"entity_type": "person", "id": "P2", "name": "Ann", "age": 35, "job": "judge", "client_of": "P1"}
{"entity_type": "person", "id": "P3", "name": "Bob", "age": 51, "job": "clerk"}
{"entity_type": "person", "id": "P4", "name": "Cy", "age": 44, "job": "baker", "client_of": ["P3"]}
{"entity_type": "person", "id": "P5", "name": "Dee", "age": 19}
{"entity_type": "location", "id": "L1", "coordinates": {"latitude": 39.29, "longitude": 76.61},
 "photo": "www.site.com/shot.jpg", "office_of": ["P1", "P4"]}
{"entity_type": "location", "id": "L2", "coordinates": {"latitude": 40.7, "longitude": 74.0}, "office_of": ["P5"]}
"#,
    )
    .unwrap()
}

fn model(depth: usize) -> AssembledModel {
    let schema = apply_rules(&parse_schema(SCHEMA).unwrap(), &[]).unwrap().schema;
    let ds = Dataset::new(schema, &entities()).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let ds = ds.fit(&all).unwrap();
    let w = WiringConfig {
        depth,
        wiring: Wiring::Highway,
        bottleneck_size: 8,
        hidden_size: 16,
        summary_size: 4,
        ..Default::default()
    };
    AssembledModel::assemble(ds.schema(), ds.codecs(), &w, 4).unwrap()
}

fn state() -> Arc<AppState> {
    Arc::new(AppState::new(model(1), &entities()).unwrap())
}

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(state: &Arc<AppState>, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(state, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post(state: &Arc<AppState>, body: &Value) -> (StatusCode, Value) {
    let req = Request::post("/infer")
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap();
    let (s, b) = call(state, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn component_request() -> Value {
    let ids = ["P1", "P2", "P3", "P4", "L1"];
    json!({"entities": entities().into_iter().filter(|e| ids.contains(&e["id"].as_str().unwrap())).collect::<Vec<_>>()})
}

#[tokio::test]
async fn schema_route_returns_embedded_schema() {
    let s = state();
    let (status, body) = call(&s, Request::get("/schema").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, serde_json::to_vec(&s.model().schema().to_document()).unwrap());
}

#[tokio::test]
async fn entity_pages_filter_and_reject_bad_ranges() {
    let s = state();
    let (status, body) = get(&s, "/entities?type=person&offset=1&limit=2").await;
    assert_eq!(status, StatusCode::OK);
    let page: EntityPage = serde_json::from_value(body).unwrap();
    assert_eq!(page.total, 5);
    let ids: Vec<&str> = page.entities.iter().map(|e| e["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["P2", "P3"]);
    let (_, body) = get(&s, "/entities?offset=6").await;
    assert_eq!(body["entities"].as_array().unwrap().len(), 1);
    assert_eq!(get(&s, "/entities?limit=0").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&s, "/entities?offset=8").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&s, "/entities?offset=-1").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&s, "/entities?type=ship").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn entity_route_lists_edges_and_404s() {
    let s = state();
    let (status, body) = get(&s, "/entity/P1").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["entity"]["name"], "Mary");
    let mut edges: Vec<(String, String, String)> = body["edges"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["relationship"].as_str().unwrap().into(), e["source"].as_str().unwrap().into(), e["target"].as_str().unwrap().into()))
        .collect();
    edges.sort();
    assert_eq!(
        edges,
        [("client_of".into(), "P2".into(), "P1".into()), ("office_of".into(), "L1".into(), "P1".into())]
    );
    let (status, body) = get(&s, "/entity/unknown").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("unknown"));
    let (_, comp) = get(&s, "/component/P3").await;
    assert_eq!(comp["entities"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn neighbors_match_the_restricted_pair_list() {
    let s = state();
    let (status, body) = get(&s, "/neighbors/P1?k=3").await;
    assert_eq!(status, StatusCode::OK);
    let expected = neighbors_of(s.table(), "P1", 3, false).unwrap();
    assert_eq!(body, serde_json::to_value(&expected).unwrap());
    let all = nearest_pairs(s.table(), None, 100, SearchMode::Exact).unwrap();
    let restricted: Vec<_> = all.pairs.into_iter().filter(|p| p.a == "P1" || p.b == "P1").take(3).collect();
    assert_eq!(expected.pairs, restricted);
    let (_, same) = get(&s, "/neighbors/P1?k=10&same_type=true").await;
    assert!(same["pairs"].as_array().unwrap().iter().all(|p| p["a"].as_str().unwrap().starts_with('P') && p["b"].as_str().unwrap().starts_with('P')));
    assert_eq!(get(&s, "/neighbors/nobody?k=3").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&s, "/neighbors/P1?k=0").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unmodified_component_matches_the_batch_pipeline() {
    let s = state();
    let (status, body) = post(&s, &component_request()).await;
    assert_eq!(status, StatusCode::OK);
    let resp: InferResponse = serde_json::from_value(body).unwrap();
    let ds = s.dataset();
    let members: Vec<usize> = resp.entities.iter().map(|e| ds.index_of(&e.id).unwrap()).collect();
    let out = s.model().forward(ds, &Batch::new(ds, members)).unwrap();
    let recon = s.model().reconstruct(&out).unwrap();
    assert_eq!(resp.loss, out.loss);
    for (k, e) in resp.entities.iter().enumerate() {
        assert_eq!(e.reconstruction, recon[k]);
        assert_eq!(e.losses, out.entity_losses[k]);
        assert_eq!(e.bottlenecks.len(), 2);
        assert_eq!(e.bottlenecks[1], out.bottleneck(1, k));
    }
    let (_, again) = post(&s, &component_request()).await;
    assert_eq!(serde_json::from_value::<InferResponse>(again).unwrap(), resp);
}

#[tokio::test]
async fn masked_age_is_reconstructed_and_still_scored() {
    let s = state();
    let mut req = component_request();
    req["mask"] = json!([{"id": "P1", "property": "age"}]);
    let (status, body) = post(&s, &req).await;
    assert_eq!(status, StatusCode::OK);
    let resp: InferResponse = serde_json::from_value(body).unwrap();
    let p1 = resp.entities.iter().find(|e| e.id == "P1").unwrap();
    assert_eq!(p1.masked, ["age"]);
    assert!(p1.reconstruction["age"].as_f64().unwrap().is_finite());
    assert!(p1.losses.contains_key("age"));
    assert!(resp.entities.iter().filter(|e| e.id != "P1").all(|e| e.masked.is_empty()));

    let plain: InferResponse = serde_json::from_value(post(&s, &component_request()).await.1).unwrap();
    let before = plain.entities.iter().find(|e| e.id == "P1").unwrap();
    assert_ne!(before.bottlenecks[0], p1.bottlenecks[0]);

    let mut everywhere = component_request();
    everywhere["mask"] = json!(["age"]);
    let resp: InferResponse = serde_json::from_value(post(&s, &everywhere).await.1).unwrap();
    assert!(resp.entities.iter().filter(|e| e.entity_type == "person").all(|e| e.masked == ["age"]));
}

#[test]
fn removing_an_edge_only_moves_nearby_bottlenecks() {
    let m = model(1);
    let base: InferRequest = serde_json::from_value(component_request()).unwrap();
    let mut cut = base.clone();
    for e in &mut cut.entities {
        if e["id"] == "L1" {
            e["office_of"] = json!(["P4"]);
        }
    }
    let a = infer(&m, &base).unwrap();
    let b = infer(&m, &cut).unwrap();
    for (x, y) in a.entities.iter().zip(&b.entities) {
        assert_eq!(x.bottlenecks[0], y.bottlenecks[0], "{}", x.id);
        let touched = x.id == "L1";
        assert_eq!(x.bottlenecks[1] != y.bottlenecks[1], touched, "{}", x.id);
    }
}

#[test]
fn extra_edges_and_unseen_categories_are_accepted() {
    let m = model(1);
    let mut req: InferRequest = serde_json::from_value(component_request()).unwrap();
    req.entities[0]["job"] = json!("astronaut");
    req.edges.push(serde_json::from_value(json!({"relationship": "client_of", "source": "P3", "target": "P1"})).unwrap());
    req.mask.push(MaskEntry::Everywhere("job".into()));
    let out = infer(&m, &req).unwrap();
    assert_eq!(out.entities.len(), 5);
    assert!(out.entities[0].losses.contains_key("job"));
}

#[tokio::test]
async fn schema_mismatches_are_422_with_field() {
    let s = state();
    let cases = [
        (json!({"entities": [{"entity_type": "person", "id": "P1", "age": "old"}]}), "entities[0].P1.age"),
        (json!({"entities": [{"entity_type": "ship", "id": "S1"}]}), "entities[0].S1.entity_type"),
        (json!({"entities": [{"entity_type": "person", "id": "P1", "client_of": "P9"}]}), "P1.client_of"),
        (
            json!({"entities": [{"entity_type": "person", "id": "P1"}], "edges": [{"relationship": "owns", "source": "P1", "target": "P1"}]}),
            "edges[0]",
        ),
        (json!({"entities": [{"entity_type": "person", "id": "P1"}], "mask": ["colour"]}), "mask[0]"),
        (json!({"entities": [{"entity_type": "person", "id": "P1"}], "mask": [{"id": "P7", "property": "age"}]}), "mask[0]"),
    ];
    for (body, field) in cases {
        let (status, err) = post(&s, &body).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_eq!(err["field"], field, "{err}");
    }
    let (status, _) = post(&s, &json!({"entity": []})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let req = Request::post("/infer").header("content-type", "application/json").body(Body::from("{")).unwrap();
    assert_eq!(call(&s, req).await.0, StatusCode::BAD_REQUEST);
}
