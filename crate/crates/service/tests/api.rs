use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use teachkit_core::classifier::{train_classifier, ClsTrainConfig};
use teachkit_core::segmenter::{HeuristicHandSegmenter, ObjectSegmenter, UNetConfig};
use teachkit_core::session::CategoryId;
use teachkit_core::{Frame, Mask};
use teachkit_service::app::replay_envelopes;
use teachkit_service::{import_bundle, router, AppState, ExportBundle, Models, ServiceConfig, Shared};
use tower::ServiceExt;

fn setup(with_segmenter: bool) -> (Shared, Router) {
    let objects = with_segmenter
        .then(|| ObjectSegmenter::new(UNetConfig { resolution: 32, ..UNetConfig::default() }, 3).unwrap());
    let models = Models::new(Arc::new(HeuristicHandSegmenter::default()), objects);
    let mut config = ServiceConfig::default();
    config.classifier.epochs = 3;
    let state = AppState::new(config, models);
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn frame_png(seed: u64, tint: [u8; 3]) -> String {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut f = Frame::filled(32, 32, [90, 90, 90]).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            let n: i16 = rng.gen_range(-20..20);
            let base = if (8..24).contains(&x) && (8..24).contains(&y) { tint } else { [90, 90, 90] };
            f.set_pixel(x, y, base.map(|c| (c as i16 + n).clamp(0, 255) as u8));
        }
    }
    STANDARD.encode(f.to_png().unwrap())
}

fn box_mask_png() -> String {
    let on: Vec<bool> = (0..32 * 32).map(|i| (8..24).contains(&(i % 32)) && (8..24).contains(&(i / 32))).collect();
    STANDARD.encode(Mask::from_binary(32, 32, &on).unwrap().to_png().unwrap())
}

async fn new_session(app: &Router, categories: &[&str]) -> String {
    let cats: Vec<Value> = categories
        .iter()
        .enumerate()
        .map(|(i, n)| json!({ "id": i, "name": n, "color": [i as u8 * 60, 100, 100] }))
        .collect();
    let (status, body) = call(app, "POST", "/sessions", Some(json!({ "categories": cats }))).await;
    assert_eq!(status, StatusCode::CREATED);
    body["id"].as_str().unwrap().to_string()
}

async fn stream_and_capture(app: &Router, id: &str, seed: u64, class: CategoryId, condition: &str) -> (StatusCode, Value) {
    let tint = [[200, 40, 40], [40, 200, 40], [40, 40, 200]][class as usize % 3];
    let (status, body) = call(
        app,
        "POST",
        &format!("/sessions/{id}/frames"),
        Some(json!({ "image": frame_png(seed, tint), "category_id": class })),
    )
    .await;
    if status != StatusCode::OK {
        return (status, body);
    }
    let mut body = json!({ "category_id": class, "condition": condition });
    if condition == "click" || condition == "contour" {
        body["mask"] = json!(box_mask_png());
    }
    call(app, "POST", &format!("/sessions/{id}/capture"), Some(body)).await
}

#[tokio::test]
async fn create_session_starts_in_teaching() {
    let (_, app) = setup(false);
    let (status, body) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = body["id"].as_str().unwrap();
    let (status, got) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(got["phase"], "teaching");
    let (_, other) = call(&app, "POST", "/sessions", None).await;
    assert_ne!(other["id"], body["id"]);
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let (_, app) = setup(false);
    assert_eq!(call(&app, "GET", "/sessions/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/jobs/nope", None).await.0, StatusCode::NOT_FOUND);
    let id = new_session(&app, &["a", "b"]).await;
    let (status, _) = call(&app, "DELETE", &format!("/sessions/{id}/samples/s99999"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn in_situ_capture_needs_a_prior_frame() {
    let (_, app) = setup(true);
    let id = new_session(&app, &["a", "b"]).await;
    let (status, body) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/capture"),
        Some(json!({ "category_id": 0, "condition": "in_situ" })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("no frame"));
}

#[tokio::test]
async fn in_situ_without_segmenter_is_a_missing_mask() {
    let (_, app) = setup(false);
    let id = new_session(&app, &["a", "b"]).await;
    let (status, body) = stream_and_capture(&app, &id, 1, 0, "in_situ").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("mask required"));
}

#[tokio::test]
async fn condition_flag_controls_the_attached_mask() {
    let (state, app) = setup(true);
    let id = new_session(&app, &["a", "b"]).await;
    for (i, cond) in ["naive", "click", "contour", "in_situ"].iter().enumerate() {
        let (status, _) = stream_and_capture(&app, &id, i as u64, 0, cond).await;
        assert_eq!(status, StatusCode::CREATED, "{cond}");
    }
    let set = state.session(&id).unwrap().teaching_set();
    let masks: Vec<bool> = set.samples().map(|s| s.object_mask.is_some()).collect();
    assert_eq!(masks, vec![false, true, true, true]);
    assert!(set.samples().all(|s| s.hand_mask.is_some()));

    // click without a drawn mask, naive with one
    let (status, _) =
        call(&app, "POST", &format!("/sessions/{id}/capture"), Some(json!({ "category_id": 0, "condition": "click" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/capture"),
        Some(json!({ "category_id": 0, "condition": "naive", "mask": box_mask_png() })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn capture_emits_one_matching_sample_added() {
    let (state, app) = setup(false);
    let id = new_session(&app, &["a", "b"]).await;
    let sub = state.session(&id).unwrap().hub.subscribe(None);
    let (status, body) = stream_and_capture(&app, &id, 5, 1, "naive").await;
    assert_eq!(status, StatusCode::CREATED);
    let added: Vec<_> = std::iter::from_fn(|| sub.try_next()).filter(|e| e.kind == "sample_added").collect();
    assert_eq!(added.len(), 1);
    assert_eq!(added[0].payload["sample_id"], body["sample_id"]);
}

#[tokio::test]
async fn training_on_one_category_is_422() {
    let (_, app) = setup(false);
    let id = new_session(&app, &["only"]).await;
    stream_and_capture(&app, &id, 1, 0, "naive").await;
    let (status, body) = call(&app, "POST", &format!("/sessions/{id}/train"), Some(json!({}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("need >= 2 categories"));
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s["phase"], "teaching");
}

async fn wait_for_job(app: &Router, job: &str) -> Value {
    for _ in 0..600 {
        let (status, body) = call(app, "GET", &format!("/jobs/{job}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if body["status"] == "done" || body["status"] == "failed" {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {job} did not finish");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn training_job_lifecycle() {
    let (state, app) = setup(false);
    let id = new_session(&app, &["red", "green"]).await;
    for i in 0..8 {
        let (status, _) = stream_and_capture(&app, &id, i, (i % 2) as CategoryId, "naive").await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let session = state.session(&id).unwrap();
    let set = session.teaching_set();
    let sub = session.hub.subscribe(None);

    let (status, job) = call(&app, "POST", &format!("/sessions/{id}/train"), Some(json!({ "epochs": 4 }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job_id = job["id"].as_str().unwrap().to_string();
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/train"), Some(json!({ "epochs": 1 }))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let done = wait_for_job(&app, &job_id).await;
    assert_eq!(done["status"], "done");
    assert_eq!(done["progress"], 1.0);

    // the rejected request left the job untouched: same report as a direct run
    let config = ClsTrainConfig { epochs: 4, ..ClsTrainConfig::default() };
    let (_, direct) = train_classifier(&set, &config, |_, _, _| {}).unwrap();
    assert_eq!(done["report"]["epoch_losses"], serde_json::to_value(&direct.epoch_losses).unwrap());

    let mut progress = Vec::new();
    let mut statuses = Vec::new();
    while let Some(e) = sub.next_blocking(Duration::from_millis(200)) {
        if e.kind == "job_progress" && e.payload["job_id"] == job_id.as_str() {
            progress.push(e.payload["progress"].as_f64().unwrap());
            statuses.push(e.payload["status"].as_str().unwrap().to_string());
        }
    }
    assert!(progress.windows(2).all(|w| w[0] <= w[1]), "{progress:?}");
    assert_eq!(progress.last(), Some(&1.0));
    assert_eq!(statuses.last().map(String::as_str), Some("done"));

    let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s["phase"], "assessing");
    assert_eq!(s["latest_snapshot"], done["report"]["snapshot"]);

    let (status, a) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/assess"),
        Some(json!({ "image": frame_png(99, [200, 40, 40]) })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let probs: f64 = a["prediction"]["probabilities"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-6);
    let overlay = STANDARD.decode(a["overlay"].as_str().unwrap()).unwrap();
    assert_eq!(&overlay[1..4], b"PNG");

    // capturing again goes back to teaching
    stream_and_capture(&app, &id, 50, 0, "naive").await;
    let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s["phase"], "teaching");
}

#[tokio::test]
async fn assess_without_model_is_422() {
    let (_, app) = setup(false);
    let id = new_session(&app, &["a", "b"]).await;
    let (status, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/assess"),
        Some(json!({ "image": frame_png(1, [1, 2, 3]) })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn oversized_frames_are_rejected() {
    let models = Models::heuristic();
    let config = ServiceConfig { max_frame_bytes: 64, ..ServiceConfig::default() };
    let app = router(AppState::new(config, models));
    let id = new_session(&app, &["a", "b"]).await;
    let (status, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/frames"),
        Some(json!({ "image": frame_png(1, [1, 2, 3]) })),
    )
    .await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn export_round_trips() {
    let (state, app) = setup(true);
    let id = new_session(&app, &["a", "b"]).await;
    for (i, cond) in ["naive", "in_situ", "click", "naive"].iter().enumerate() {
        stream_and_capture(&app, &id, i as u64, (i % 2) as CategoryId, cond).await;
    }
    let original = state.session(&id).unwrap().teaching_set();
    let (status, bundle) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, StatusCode::OK);
    let bundle: ExportBundle = serde_json::from_value(bundle).unwrap();
    let restored = import_bundle(&bundle).unwrap();
    assert!(restored.same_contents(&original) && original.same_contents(&restored));

    let (status, created) = call(&app, "POST", "/sessions", Some(json!({ "import": bundle }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["counts"], json!({ "0": 2, "1": 2 }));
    let (_, again) = call(&app, "GET", &format!("/sessions/{}/export", created["id"].as_str().unwrap()), None).await;
    assert_eq!(serde_json::from_value::<ExportBundle>(again).unwrap(), bundle);
}

#[tokio::test]
async fn event_stream_speaks_sse_and_resumes() {
    let (_, app) = setup(false);
    let id = new_session(&app, &["a", "b"]).await;
    stream_and_capture(&app, &id, 1, 0, "naive").await;
    stream_and_capture(&app, &id, 2, 1, "naive").await;

    let req = Request::builder().uri(format!("/sessions/{id}/events?last_seq=0")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();
    let mut text = String::new();
    while text.matches("sample_added").count() < 4 {
        let frame = tokio::time::timeout(Duration::from_secs(5), body.frame()).await.unwrap().unwrap().unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
    }
    let envelopes: Vec<Value> = text
        .lines()
        .filter_map(|l| l.strip_prefix("data: "))
        .map(|d| serde_json::from_str(d).unwrap())
        .collect();
    let seqs: Vec<u64> = envelopes.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    let added: Vec<&Value> = envelopes.iter().filter(|e| e["type"] == "sample_added").collect();
    assert_eq!(added.len(), 2);
    assert!(envelopes.iter().all(|e| e.get("payload").is_some()));

    // resuming after the first sample_added skips it
    let cut = added[0]["seq"].as_u64().unwrap();
    let req = Request::builder()
        .uri(format!("/sessions/{id}/events"))
        .header("last-event-id", cut.to_string())
        .body(Body::empty())
        .unwrap();
    let mut body = app.clone().oneshot(req).await.unwrap().into_body();
    let mut text = String::new();
    while !text.contains("sample_added") {
        let frame = tokio::time::timeout(Duration::from_secs(5), body.frame()).await.unwrap().unwrap().unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
    }
    assert!(text.contains(&added[1]["payload"]["sample_id"].as_str().unwrap().to_string()));
    assert!(!text.contains(&format!("id: {cut}\n")));
}

#[derive(Clone, Debug)]
enum Op {
    Capture { class: CategoryId, seed: u64 },
    Delete { pick: usize },
    DeleteUnknown,
    AddCategory,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0u32..4, any::<u64>()).prop_map(|(class, seed)| Op::Capture { class, seed }),
        2 => any::<usize>().prop_map(|pick| Op::Delete { pick }),
        1 => Just(Op::DeleteUnknown),
        1 => Just(Op::AddCategory),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn api_sequences_agree_with_replay(ops in proptest::collection::vec(op(), 1..24)) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let (state, app) = setup(false);
            let id = new_session(&app, &["a", "b"]).await;
            let sub = state.session(&id).unwrap().hub.subscribe(Some(0));
            let mut oracle: BTreeMap<CategoryId, usize> = [(0, 0), (1, 0)].into();
            let mut live: Vec<(String, CategoryId)> = Vec::new();
            for op in ops {
                match op {
                    Op::Capture { class, seed } => {
                        let (status, body) = stream_and_capture(&app, &id, seed, class, "naive").await;
                        if oracle.contains_key(&class) {
                            assert_eq!(status, StatusCode::CREATED);
                            *oracle.get_mut(&class).unwrap() += 1;
                            live.push((body["sample_id"].as_str().unwrap().into(), class));
                        } else {
                            assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
                        }
                    }
                    Op::Delete { pick } if !live.is_empty() => {
                        let (sid, class) = live.remove(pick % live.len());
                        let (status, _) = call(&app, "DELETE", &format!("/sessions/{id}/samples/{sid}"), None).await;
                        assert_eq!(status, StatusCode::OK);
                        *oracle.get_mut(&class).unwrap() -= 1;
                    }
                    Op::Delete { .. } | Op::DeleteUnknown => {
                        let (status, _) = call(&app, "DELETE", &format!("/sessions/{id}/samples/zzz"), None).await;
                        assert_eq!(status, StatusCode::NOT_FOUND);
                    }
                    Op::AddCategory => {
                        let (status, c) = call(&app, "POST", &format!("/sessions/{id}/categories"), Some(json!({ "name": "x" }))).await;
                        assert_eq!(status, StatusCode::CREATED);
                        oracle.insert(c["id"].as_u64().unwrap() as CategoryId, 0);
                    }
                }
            }
            let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
            let served: BTreeMap<CategoryId, usize> = serde_json::from_value(s["counts"].clone()).unwrap();
            let envelopes: Vec<_> = std::iter::from_fn(|| sub.try_next()).collect();
            let replayed = replay_envelopes(envelopes.iter().map(|e| e.as_ref()));
            assert_eq!(&served, &oracle);
            assert_eq!(&replayed, &oracle);
            let samples = s["samples"].as_array().unwrap();
            assert_eq!(samples.len(), live.len());
        });
    }
}
