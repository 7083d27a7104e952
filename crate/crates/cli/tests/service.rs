use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use vanish::request::{resolve, AttackRequest};
use vanish::server::{router, views, AppState, ServerOptions};
use vanish_core::attack::{run_attack, AttackMode};
use vanish_core::detector::{detect, ToyDetector};
use vanish_core::image::ImageTensor;
use vanish_core::scene::{SceneSource, SyntheticCorpus};

fn app(options: ServerOptions) -> Router {
    router(AppState::new(Arc::new(ToyDetector::bundled()), options))
}

async fn call(app: &Router, method: &str, uri: &str, body: Body) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .body(body)
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Body) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn upload(app: &Router, image: &ImageTensor) -> Value {
    let (s, v) = call_json(app, "POST", "/v1/sessions", Body::from(image.encode_png())).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v
}

async fn submit(app: &Router, session: &str, body: Value) -> (StatusCode, Value) {
    call_json(
        app,
        "POST",
        &format!("/v1/sessions/{session}/attacks"),
        Body::from(body.to_string()),
    )
    .await
}

/// Polls until the job leaves the queue, checking the state never goes back.
async fn wait(app: &Router, job: &str) -> Value {
    let rank = |s: &str| match s {
        "queued" => 0,
        "running" => 1,
        _ => 2,
    };
    let mut last = 0;
    for _ in 0..6000 {
        let (s, v) = call_json(app, "GET", &format!("/v1/jobs/{job}"), Body::empty()).await;
        assert_eq!(s, StatusCode::OK);
        let r = rank(v["state"].as_str().unwrap());
        assert!(r >= last, "state regressed to {}", v["state"]);
        last = r;
        if r == 2 {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {job} never finished");
}

/// A held-out scene where the detector finds a circle and something else.
fn mixed_scene(det: &ToyDetector) -> ImageTensor {
    let corpus = SyntheticCorpus::new(2000, 60);
    for i in 0..corpus.len() {
        let img = corpus.scene(i).unwrap().image;
        let cats: Vec<usize> = detect(det, &img, 0.3)
            .unwrap()
            .iter()
            .map(|d| d.category_index)
            .collect();
        if cats.contains(&1) && cats.iter().any(|&c| c != 1) {
            return img;
        }
    }
    panic!("no mixed scene in the held-out corpus");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn pre_detections_match_the_library() {
    let det = ToyDetector::bundled();
    let app = app(ServerOptions::default());
    let img = SyntheticCorpus::new(2000, 1).scene(0).unwrap().image;
    let v = upload(&app, &img).await;
    let expected = serde_json::to_value(views(&det, &detect(&det, &img, 0.3).unwrap())).unwrap();
    assert_eq!(v["detections"], expected);
    assert_eq!(v["width"], img.width());

    let id = v["session_id"].as_str().unwrap();
    let (s, again) = call_json(&app, "GET", &format!("/v1/sessions/{id}"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again["detections"], expected);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sensitive_attack_hides_the_selected_category() {
    let det = ToyDetector::bundled();
    let app = app(ServerOptions::default());
    let img = mixed_scene(&det);
    let session = upload(&app, &img).await;
    let sid = session["session_id"].as_str().unwrap();
    let body = json!({
        "mode": "sensitive",
        "sensitive": ["circle"],
        "target_class": "triangle",
        "epsilon": "3/255",
    });
    let (s, v) = submit(&app, sid, body.clone()).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let job = v["job_id"].as_str().unwrap().to_string();
    let status = wait(&app, &job).await;
    assert_eq!(status["state"], "done", "{status}");
    assert!(!status["trace"].as_array().unwrap().is_empty());

    let (s, result) = call_json(
        &app,
        "GET",
        &format!("/v1/jobs/{job}/result"),
        Body::empty(),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(result["succeeded"], true);
    assert!(result["psnr"].as_f64().unwrap() > 30.0);

    // oracle: the returned bytes, decoded and re-detected
    let (s, png) = call(
        &app,
        "GET",
        &format!("/v1/jobs/{job}/result/image"),
        Body::empty(),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let redetected = detect(&det, &ImageTensor::decode(&png).unwrap(), 0.3).unwrap();
    assert!(redetected.iter().all(|d| d.category_index != 1));
    assert!(result["detections"]
        .as_array()
        .unwrap()
        .iter()
        .all(|d| d["category"] != "circle"));

    let b64 = base64::engine::general_purpose::STANDARD
        .decode(result["image_png_base64"].as_str().unwrap())
        .unwrap();
    assert_eq!(b64, png);
    let (_, png2) = call(
        &app,
        "GET",
        &format!("/v1/jobs/{job}/result/image"),
        Body::empty(),
    )
    .await;
    assert_eq!(png, png2, "re-download changed the bytes");

    // same inputs through the shared library path give the same image
    let request: AttackRequest = serde_json::from_value(body).unwrap();
    let pre = detect(&det, &img, 0.3).unwrap();
    let (config, target) = resolve(&request, &det, &pre).unwrap();
    let local = run_attack(&det, &img, &config, target.as_ref(), &mut |_, _| {}).unwrap();
    assert_eq!(local.adversarial_image.encode_png(), png);
    assert_eq!(config.mode, AttackMode::Sensitive);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_parameters_are_422_with_fields() {
    let app = app(ServerOptions::default());
    let img = SyntheticCorpus::new(2000, 1).scene(0).unwrap().image;
    let sid = upload(&app, &img).await["session_id"]
        .as_str()
        .unwrap()
        .to_string();

    let (s, v) = submit(&app, &sid, json!({"mode": "all", "epsilon": 0})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["fields"]["epsilon"].is_string(), "{v}");

    let (s, v) = submit(
        &app,
        &sid,
        json!({"mode": "sensitive", "sensitive": ["circle"], "target_class": "circle"}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["fields"]["target_class"].is_string(), "{v}");

    let (s, v) = submit(&app, &sid, json!({"mode": "all", "sensitive_boxes": [99]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");

    let (s, _) = submit(&app, &sid, json!({"mode": "all", "colour": 1})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = call(&app, "POST", "/v1/sessions", Body::from("not an image")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unknown_ids_are_404() {
    let app = app(ServerOptions::default());
    for uri in [
        "/v1/sessions/s999",
        "/v1/jobs/j999",
        "/v1/jobs/j999/result",
        "/v1/jobs/j999/result/image",
    ] {
        assert_eq!(
            call(&app, "GET", uri, Body::empty()).await.0,
            StatusCode::NOT_FOUND,
            "{uri}"
        );
    }
    let (s, _) = submit(&app, "s999", json!({"mode": "all"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn busy_session_refuses_a_second_job_without_queueing() {
    let det = ToyDetector::bundled();
    let app = app(ServerOptions {
        workers: 1,
        queueing: false,
    });
    let img = mixed_scene(&det);
    // a slow job in another session holds the only worker slot
    let blocker = upload(&app, &img).await["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let slow =
        json!({"mode": "all", "epsilon": "1/255", "step_size": 0.0001, "max_iterations": 400});
    let (s, v) = submit(&app, &blocker, slow).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");

    let sid = upload(&app, &img).await["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let (s, first) = submit(&app, &sid, json!({"mode": "all"})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let (s, v) = submit(&app, &sid, json!({"mode": "all"})).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");

    // once finished, the session takes new work again
    wait(&app, first["job_id"].as_str().unwrap()).await;
    let (s, _) = submit(&app, &sid, json!({"mode": "all"})).await;
    assert_eq!(s, StatusCode::ACCEPTED);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn queued_jobs_run_in_order() {
    let app = app(ServerOptions::default());
    let img = SyntheticCorpus::new(2000, 1).scene(0).unwrap().image;
    let sid = upload(&app, &img).await["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let mut jobs = Vec::new();
    for eps in ["2/255", "4/255"] {
        let (s, v) = submit(&app, &sid, json!({"mode": "all", "epsilon": eps})).await;
        assert_eq!(s, StatusCode::ACCEPTED);
        jobs.push(v["job_id"].as_str().unwrap().to_string());
    }
    let last = wait(&app, &jobs[1]).await;
    assert_eq!(last["state"], "done");
    let (_, first) = call_json(&app, "GET", &format!("/v1/jobs/{}", jobs[0]), Body::empty()).await;
    assert_eq!(first["state"], "done");
    assert_eq!(first["parameters"]["epsilon"], "2/255");

    let (_, session) = call_json(&app, "GET", &format!("/v1/sessions/{sid}"), Body::empty()).await;
    assert_eq!(session["jobs"], json!(jobs));
}
