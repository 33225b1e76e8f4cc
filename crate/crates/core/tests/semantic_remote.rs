//! Remote semantic client against a scripted in-process HTTP server.

use rlrf::raster::{RasterImage, RenderSpec};
use rlrf::reward::{
    BackendErrorPolicy, RewardComponent, RewardContext, RewardKind, RewardSpec, RolloutInput,
};
use rlrf::semantic::{
    decode_png_b64, SemanticBackend, SemanticClient, SemanticError, SemanticMetric,
};
use rlrf::svg::SvgSource;
use std::sync::mpsc;
use std::thread::JoinHandle;

struct Mock {
    url: String,
    requests: mpsc::Receiver<(String, String)>,
    handle: JoinHandle<()>,
}

/// Serves one scripted `(status, body)` per request, then stops.
fn mock(script: Vec<(u16, &'static str)>) -> Mock {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let (tx, requests) = mpsc::channel();
    let handle = std::thread::spawn(move || {
        for (status, body) in script {
            let mut req = server.recv().unwrap();
            let mut text = String::new();
            req.as_reader().read_to_string(&mut text).unwrap();
            tx.send((req.url().to_string(), text)).unwrap();
            req.respond(tiny_http::Response::from_string(body).with_status_code(status))
                .unwrap();
        }
    });
    Mock {
        url,
        requests,
        handle,
    }
}

fn client(url: &str, retries: u32) -> SemanticClient {
    SemanticClient::new(SemanticBackend {
        retries,
        timeout_ms: 2000,
        ..SemanticBackend::remote(url)
    })
    .unwrap()
}

fn img(v: f64) -> RasterImage {
    RasterImage::from_fn(8, 8, 3, |x, _, c| (v + 0.05 * (x + c) as f64).min(1.0))
}

#[test]
fn score_pair_sends_both_images() {
    let m = mock(vec![(200, r#"{"score": 0.25, "model_id": "m"}"#)]);
    let s = client(&m.url, 0)
        .score_pair(&img(0.1), &img(0.5), SemanticMetric::Dreamsim)
        .unwrap();
    assert_eq!(s, 0.25);
    let (path, body) = m.requests.recv().unwrap();
    assert_eq!(path, "/score");
    let v: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["metric"], "dreamsim");
    let a = decode_png_b64(v["image_a"].as_str().unwrap()).unwrap();
    assert_eq!((a.width(), a.height()), (8, 8));
    assert!(v.get("prompt").is_none());
    m.handle.join().unwrap();
}

#[test]
fn text_metrics_carry_the_prompt() {
    let m = mock(vec![(200, r#"{"score": 0.9, "model_id": "m"}"#)]);
    let s = client(&m.url, 0)
        .score_text_image("a red square", &img(0.1), SemanticMetric::JudgeHard)
        .unwrap();
    assert_eq!(s, 0.9);
    let v: serde_json::Value = serde_json::from_str(&m.requests.recv().unwrap().1).unwrap();
    assert_eq!(
        (v["metric"].as_str(), v["prompt"].as_str()),
        (Some("judge_hard"), Some("a red square"))
    );
    assert!(v.get("image_b").is_none());
}

#[test]
fn server_errors_are_retried() {
    let m = mock(vec![
        (503, "loading"),
        (503, "loading"),
        (200, r#"{"score": 0.5, "model_id": "m"}"#),
    ]);
    let s = client(&m.url, 2)
        .score_pair(&img(0.1), &img(0.2), SemanticMetric::Dreamsim)
        .unwrap();
    assert_eq!(s, 0.5);
    assert_eq!(m.requests.try_iter().count(), 3);
}

#[test]
fn exhausted_retries_report_the_attempts() {
    let m = mock(vec![(503, "down"), (503, "down")]);
    match client(&m.url, 1).score_pair(&img(0.1), &img(0.2), SemanticMetric::Dreamsim) {
        Err(SemanticError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn client_errors_are_not_retried() {
    let m = mock(vec![(422, "unsupported metric")]);
    let err = client(&m.url, 3)
        .score_pair(&img(0.1), &img(0.2), SemanticMetric::DreamsimCanny)
        .unwrap_err();
    assert!(
        matches!(err, SemanticError::Protocol(ref msg) if msg.contains("422")),
        "{err:?}"
    );
    m.handle.join().unwrap();
    assert_eq!(m.requests.try_iter().count(), 1);
}

#[test]
fn out_of_range_scores_are_rejected() {
    let m = mock(vec![
        (200, r#"{"score": 2.5, "model_id": "m"}"#),
        (200, r#"{"nope": 1}"#),
    ]);
    let c = client(&m.url, 0);
    assert!(matches!(
        c.score_pair(&img(0.1), &img(0.2), SemanticMetric::Dreamsim),
        Err(SemanticError::Protocol(_))
    ));
    assert!(matches!(
        c.score_pair(&img(0.1), &img(0.2), SemanticMetric::Dreamsim),
        Err(SemanticError::Protocol(_))
    ));
}

#[test]
fn health_reports_the_model() {
    let m = mock(vec![
        (200, r#"{"status": "ok", "model_id": "dreamsim-x"}"#),
        (503, r#"{"status": "loading"}"#),
    ]);
    let c = client(&m.url, 0);
    let h = c.health_check();
    assert!(h.ok);
    assert_eq!(h.model_id.as_deref(), Some("dreamsim-x"));
    assert_eq!(m.requests.recv().unwrap().0, "/health");
    assert!(!c.health_check().ok);
}

#[test]
fn unreachable_backend_fails_or_drops_the_component() {
    // Bind and release a port so nothing is listening on it.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let semantic = client(&format!("http://127.0.0.1:{port}"), 0);
    let spec = RewardSpec::new(vec![
        RewardComponent {
            kind: RewardKind::L2,
            weight: 1.0,
        },
        RewardComponent {
            kind: RewardKind::Dreamsim,
            weight: 1.0,
        },
    ])
    .unwrap();
    let svg = SvgSource::new(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="8" height="8"><rect width="4" height="4" fill="#000"/></svg>"##,
    );
    let target = img(0.3);
    let render = RenderSpec::new(8, 8);
    let fail = RewardContext {
        semantic: semantic.clone(),
        ..RewardContext::default()
    };
    assert!(fail
        .reward_rollout(RolloutInput::image(&target), &svg, None, &spec, &render)
        .is_err());
    let drop = RewardContext {
        semantic,
        on_backend_error: BackendErrorPolicy::Drop,
        ..RewardContext::default()
    };
    let b = drop
        .reward_rollout(RolloutInput::image(&target), &svg, None, &spec, &render)
        .unwrap();
    assert_eq!(b.per_component.len(), 1);
    assert_eq!(b.per_component[0].kind, RewardKind::L2);
}
