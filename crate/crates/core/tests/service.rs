use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use usground::dataset::{synth_samples, SynthConfig};
use usground::detector::{Detector, NullDetector, ScriptedDetector};
use usground::geometry::{BinaryMask, BoundingBox};
use usground::imaging::GrayImage;
use usground::mask::{BoxMaskBackend, MaskBackend, ScriptedMaskBackend};
use usground::pipeline::Pipeline;
use usground::service::{decode_mask_field, router, ServiceState, SegmentResponse};

const BOUNDARY: &str = "usgroundtestboundary";

enum Part<'a> {
    File(&'a str, Vec<u8>),
    Text(&'a str, &'a str),
}

fn multipart(parts: &[Part]) -> Vec<u8> {
    let mut body = Vec::new();
    for p in parts {
        body.extend(format!("--{BOUNDARY}\r\n").bytes());
        match p {
            Part::File(name, bytes) => {
                body.extend(
                    format!(
                        "Content-Disposition: form-data; name=\"{name}\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n"
                    )
                    .bytes(),
                );
                body.extend(bytes);
            }
            Part::Text(name, value) => {
                body.extend(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}").bytes());
            }
        }
        body.extend(b"\r\n");
    }
    body.extend(format!("--{BOUNDARY}--\r\n").bytes());
    body
}

async fn post(state: &ServiceState, parts: &[Part<'_>]) -> (StatusCode, Value, Vec<u8>) {
    let req = Request::post("/api/segment")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(parts)))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    let json = serde_json::from_slice(&bytes).expect("every response body is JSON");
    (status, json, bytes)
}

async fn health(state: &ServiceState) -> Value {
    let req = Request::get("/api/health").body(Body::empty()).unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap()
}

fn png(img: &GrayImage) -> Vec<u8> {
    img.encode_png().unwrap()
}

fn state(det: impl Detector + 'static, seg: impl MaskBackend + 'static) -> ServiceState {
    ServiceState::with(Pipeline::new(Arc::new(det), Arc::new(seg)), Some("test-ckpt".into()))
}

fn textured(h: usize, w: usize) -> GrayImage {
    GrayImage::from_u8(h, w, &(0..h * w).map(|i| (i * 7 % 251) as u8).collect::<Vec<_>>()).unwrap()
}

#[tokio::test]
async fn oracle_mask_round_trips_byte_for_byte() {
    let samples = synth_samples(&SynthConfig { count: 3, ..SynthConfig::default() }, 5);
    let st = state(ScriptedDetector::oracle(&samples), ScriptedMaskBackend::oracle(&samples));
    for s in &samples {
        let (status, json, _) = post(&st, &[Part::File("image", png(&s.image)), Part::Text("prompt", &s.prompt)]).await;
        assert_eq!(status, StatusCode::OK, "{json}");
        let r: SegmentResponse = serde_json::from_value(json).unwrap();
        let m = decode_mask_field(&r.mask).unwrap();
        assert_eq!(m.shape(), s.image.shape());
        assert_eq!(m.to_u8(), s.mask.to_u8());
        assert_eq!(r.boxes.len(), 1);
        assert_eq!(r.model_info.checkpoint.as_deref(), Some("test-ckpt"));
        assert!(r.timing_ms.total >= r.timing_ms.detect + r.timing_ms.segment - 1e-9);
    }
}

#[tokio::test]
async fn weak_detection_above_threshold_is_422_with_best_score() {
    let img = textured(40, 50);
    let mut det = ScriptedDetector::new();
    det.insert(&img, vec![BoundingBox::new(5.0, 5.0, 20.0, 20.0).unwrap().with_score(0.6)]);
    let st = state(det, BoxMaskBackend);
    let (status, json, _) = post(
        &st,
        &[Part::File("image", png(&img)), Part::Text("prompt", "bright lesion"), Part::Text("threshold", "0.99")],
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json["error"], "no_detection");
    assert!((json["best_score"].as_f64().unwrap() - 0.6).abs() < 1e-9);
    assert!(json["detail"].is_string());
}

#[tokio::test]
async fn mode_all_unions_disjoint_boxes() {
    let img = textured(40, 60);
    let a = BoundingBox::new(2.0, 3.0, 12.0, 15.0).unwrap().with_score(0.9);
    let b = BoundingBox::new(30.0, 20.0, 55.0, 38.0).unwrap().with_score(0.8);
    let mut det = ScriptedDetector::new();
    det.insert(&img, vec![a.clone(), b.clone()]);
    let st = state(det, BoxMaskBackend);
    let (status, json, _) = post(
        &st,
        &[Part::File("image", png(&img)), Part::Text("prompt", "lesion"), Part::Text("mode", "all")],
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let r: SegmentResponse = serde_json::from_value(json).unwrap();
    let expected = BinaryMask::from_box(40, 60, &a).union(&BinaryMask::from_box(40, 60, &b)).unwrap();
    assert_eq!(decode_mask_field(&r.mask).unwrap(), expected);

    let (_, json, _) = post(&st, &[Part::File("image", png(&img)), Part::Text("prompt", "lesion")]).await;
    let r: SegmentResponse = serde_json::from_value(json).unwrap();
    assert_eq!(decode_mask_field(&r.mask).unwrap(), BinaryMask::from_box(40, 60, &a));
}

#[tokio::test]
async fn bad_requests_are_structured_400s() {
    let st = state(NullDetector, BoxMaskBackend);
    let img = png(&textured(16, 16));
    let cases: Vec<(Vec<Part>, &str)> = vec![
        (vec![Part::File("image", img.clone()), Part::Text("prompt", "   ")], "prompt"),
        (vec![Part::File("image", img.clone())], "prompt"),
        (vec![Part::File("image", b"not an image".to_vec()), Part::Text("prompt", "x")], "image"),
        (vec![Part::Text("prompt", "x")], "image"),
        (vec![Part::File("image", img.clone()), Part::Text("prompt", "x"), Part::Text("threshold", "high")], "threshold"),
        (vec![Part::File("image", img.clone()), Part::Text("prompt", "x"), Part::Text("threshold", "1.5")], "threshold"),
        (vec![Part::File("image", img.clone()), Part::Text("prompt", "x"), Part::Text("mode", "some")], "mode"),
    ];
    for (parts, kind) in cases {
        let (status, json, _) = post(&st, &parts).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{json}");
        assert_eq!(json["error"], kind);
        assert!(json["detail"].as_str().is_some_and(|d| !d.is_empty()));
    }
}

#[tokio::test]
async fn unloaded_service_is_503_and_reports_no_backends() {
    let st = ServiceState::empty();
    let h = health(&st).await;
    assert_eq!(h["status"], "ok");
    assert_eq!(h["backends"], serde_json::json!([]));
    let (status, json, _) = post(&st, &[Part::File("image", png(&textured(8, 8))), Part::Text("prompt", "x")]).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(json["error"], "not_loaded");

    st.load(Pipeline::new(Arc::new(NullDetector), Arc::new(BoxMaskBackend)), None).await;
    assert_eq!(health(&st).await["backends"], serde_json::json!(["null", "box"]));
    let (status, _, _) = post(&st, &[Part::File("image", png(&textured(8, 8))), Part::Text("prompt", "x")]).await;
    assert_eq!(status, StatusCode::OK);

    st.unload().await;
    assert_eq!(health(&st).await["backends"], serde_json::json!([]));
}

#[tokio::test]
async fn identical_requests_give_identical_payloads() {
    let img = png(&textured(64, 64));
    let st = ServiceState::with(
        Pipeline::new(
            usground::detector::external_backend("toy").unwrap(),
            usground::mask::mask_backend("toy").unwrap(),
        ),
        None,
    );
    let parts = [Part::File("image", img), Part::Text("prompt", "bright lesion"), Part::Text("threshold", "0.0")];
    let (s1, mut a, _) = post(&st, &parts).await;
    let (s2, mut b, _) = post(&st, &parts).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    // wall-clock timings are the only field allowed to differ
    a.as_object_mut().unwrap().remove("timing_ms");
    b.as_object_mut().unwrap().remove("timing_ms");
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
}

#[tokio::test]
async fn hot_swap_waits_for_in_flight_requests() {
    let st = state(NullDetector, BoxMaskBackend);
    let img = png(&textured(32, 32));
    let parts = [Part::File("image", img.clone()), Part::Text("prompt", "x")];
    let (before, after) = tokio::join!(post(&st, &parts), async {
        st.load(Pipeline::new(Arc::new(NullDetector), Arc::new(ScriptedMaskBackend::new())), Some("v2".into()))
            .await;
    });
    assert_eq!(before.0, StatusCode::OK);
    let _ = after;
    let (_, json, _) = post(&st, &parts).await;
    assert_eq!(json["model_info"]["checkpoint"], "v2");
    assert_eq!(json["model_info"]["segmenter"], "scripted");
}
