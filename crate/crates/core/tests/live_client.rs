//! The chat-completions client against an in-process mock server.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use loopguard_core::backend::{Backend, BackendError, LiveConfig, OpenAiCompatClient};
use loopguard_core::detector::{DetectionQuery, DetectorConfig, FnChannel, MllmDetector};
use loopguard_core::domain::{Observation, Outcome, Subtask, TaskSpec};
use loopguard_core::planner::EnvState;
use loopguard_core::prompting::StrategyKind;
use loopguard_core::uncertainty::Method;

#[derive(Default)]
struct Mock {
    replies: Mutex<VecDeque<(u16, Value)>>,
    seen: Mutex<Vec<(Option<String>, Value)>>,
}

async fn chat(State(mock): State<Arc<Mock>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let auth = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    mock.seen.lock().unwrap().push((auth, body));
    let (status, reply) = mock
        .replies
        .lock()
        .unwrap()
        .pop_front()
        .unwrap_or((500, json!({"error": "no reply queued"})));
    (StatusCode::from_u16(status).unwrap(), Json(reply))
}

struct Server {
    mock: Arc<Mock>,
    url: String,
    _rt: tokio::runtime::Runtime,
}

fn serve(replies: Vec<(u16, Value)>) -> Server {
    let mock = Arc::new(Mock {
        replies: Mutex::new(replies.into()),
        ..Default::default()
    });
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/models", get(|| async { Json(json!({"data": []})) }))
        .with_state(mock.clone());
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server {
        mock,
        url: format!("http://{addr}/v1"),
        _rt: rt,
    }
}

fn config(url: &str, key_env: &str) -> LiveConfig {
    let mut cfg = LiveConfig::new(url, "llava-test");
    cfg.api_key_env = key_env.to_string();
    cfg.backoff_ms = 1;
    cfg.timeout_ms = 5_000;
    cfg
}

/// A reply whose first token carries Yes/No alternatives.
fn completion(text: &str, yes: f64, no: f64) -> Value {
    let first = text.split_whitespace().next().unwrap_or("");
    let own = if first == "No" { no } else { yes };
    json!({
        "model": "llava-test",
        "choices": [{
            "message": {"role": "assistant", "content": text},
            "logprobs": {"content": [{
                "token": first,
                "logprob": own.ln(),
                "top_logprobs": [
                    {"token": "Yes", "logprob": yes.ln()},
                    {"token": "No", "logprob": no.ln()},
                ],
            }]},
        }],
    })
}

fn task() -> Arc<TaskSpec> {
    Arc::new(TaskSpec {
        id: "open_drawer".into(),
        instruction: "open the upper drawer".into(),
        subtasks: vec![Subtask::new(0, "open the upper drawer", "the upper drawer is open")],
    })
}

fn query(observation: Observation) -> DetectionQuery {
    let t = task();
    let sub = t.subtasks[0].clone();
    DetectionQuery::new(t, sub, observation, 0)
}

fn sim_observation() -> Observation {
    Observation::sim_state(EnvState::default().with_fixture("upper_drawer", "open"), 0)
}

type Operator = fn(&loopguard_core::detector::EscalationRequest) -> Outcome;

fn detector(url: &str, method: Method) -> MllmDetector<OpenAiCompatClient, FnChannel<Operator>> {
    let client = OpenAiCompatClient::new(config(url, "LOOPGUARD_TEST_UNSET_KEY")).unwrap();
    let op: Operator = |_| Outcome::Failure;
    MllmDetector::new(DetectorConfig::new(StrategyKind::Ssc, method, 0.6), client, FnChannel(op)).unwrap()
}

#[test]
fn entropy_detection_over_the_wire() {
    let server = serve(vec![(200, completion("Yes", 0.9, 0.1))]);
    let det = detector(&server.url, Method::Entropy);
    let a = det.assess(&query(sim_observation())).unwrap();
    assert_eq!(a.predicted_outcome(), Some(Outcome::Success));
    let oracle = -(0.9f64 * 0.9f64.log2() + 0.1 * 0.1f64.log2());
    assert!((a.estimate.value() - oracle).abs() < 1e-12);

    let seen = server.mock.seen.lock().unwrap();
    let (auth, body) = &seen[0];
    assert!(auth.is_none());
    assert_eq!(body["model"], "llava");
    assert_eq!(body["logprobs"], true);
    assert!(body["top_logprobs"].as_u64().unwrap() >= 2);
    let content = body["messages"][0]["content"].as_array().unwrap();
    assert!(content[0]["text"]
        .as_str()
        .unwrap()
        .contains("is the the upper drawer is open satisfied?"));
    // simulated state travels as a second text part
    assert_eq!(content[1]["type"], "text");
    assert!(content[1]["text"].as_str().unwrap().contains("upper_drawer"));
}

#[test]
fn image_is_sent_as_data_url() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frame.png");
    std::fs::write(&path, [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a]).unwrap();
    let server = serve(vec![(200, completion("No", 0.2, 0.8))]);
    let det = detector(&server.url, Method::TokenProbability);
    let a = det
        .assess(&query(Observation::image(path.display().to_string(), 0)))
        .unwrap();
    assert_eq!(a.predicted_outcome(), Some(Outcome::Failure));
    assert!((a.estimate.value() - 0.2).abs() < 1e-12);
    let seen = server.mock.seen.lock().unwrap();
    let part = &seen[0].1["messages"][0]["content"][1];
    assert_eq!(part["type"], "image_url");
    assert!(part["image_url"]["url"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));
}

#[test]
fn bearer_token_from_env() {
    std::env::set_var("LOOPGUARD_TEST_KEY_A", "sekret");
    let server = serve(vec![(200, completion("Yes", 0.9, 0.1))]);
    let client = OpenAiCompatClient::new(config(&server.url, "LOOPGUARD_TEST_KEY_A")).unwrap();
    assert!(!format!("{client:?}").contains("sekret"));
    let det = MllmDetector::new(
        DetectorConfig::new(StrategyKind::Ssc, Method::Entropy, 0.6),
        client,
        FnChannel(|_: &loopguard_core::detector::EscalationRequest| Outcome::Failure),
    )
    .unwrap();
    det.assess(&query(sim_observation())).unwrap();
    let seen = server.mock.seen.lock().unwrap();
    assert_eq!(seen[0].0.as_deref(), Some("Bearer sekret"));
}

#[test]
fn retries_rate_limits_and_server_errors() {
    let server = serve(vec![
        (429, json!({"error": "slow down"})),
        (503, json!({"error": "busy"})),
        (200, completion("Yes", 0.9, 0.1)),
    ]);
    let det = detector(&server.url, Method::Entropy);
    det.assess(&query(sim_observation())).unwrap();
    assert_eq!(server.mock.seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_retry_budget() {
    let server = serve(vec![(429, json!({})); 10]);
    let det = detector(&server.url, Method::Entropy);
    let err = det.assess(&query(sim_observation())).unwrap_err();
    assert!(err.to_string().contains("rate limited"), "{err}");
    // one attempt plus three retries
    assert_eq!(server.mock.seen.lock().unwrap().len(), 4);
}

#[test]
fn missing_logprobs_is_reported() {
    let reply = json!({"choices": [{"message": {"content": "Yes"}}]});
    let server = serve(vec![(200, reply)]);
    let det = detector(&server.url, Method::Entropy);
    let err = det.assess(&query(sim_observation())).unwrap_err();
    assert!(err.to_string().contains("self_explained"), "{err}");
}

#[test]
fn rejected_logprobs_parameter_is_reported() {
    let server = serve(vec![(400, json!({"error": "logprobs is not supported"}))]);
    let det = detector(&server.url, Method::TokenProbability);
    let err = det.assess(&query(sim_observation())).unwrap_err();
    assert!(err.to_string().contains("log-probabilities"), "{err}");
}

#[test]
fn self_explained_needs_no_logprobs() {
    let reply = json!({"choices": [{"message": {"content": "I am 80% certain that the answer is Yes"}}]});
    let server = serve(vec![(200, reply)]);
    let det = detector(&server.url, Method::SelfExplained);
    let a = det.assess(&query(sim_observation())).unwrap();
    assert_eq!(a.predicted_outcome(), Some(Outcome::Success));
    assert!((a.estimate.value() - 0.2).abs() < 1e-12);
    let body = &server.mock.seen.lock().unwrap()[0].1;
    assert!(body.get("logprobs").is_none());
}

#[test]
fn malformed_body_is_protocol_mismatch() {
    let server = serve(vec![(200, json!({"unexpected": true}))]);
    let client = OpenAiCompatClient::new(config(&server.url, "LOOPGUARD_TEST_UNSET_KEY")).unwrap();
    let req = loopguard_core::backend::BackendRequest {
        messages: vec![loopguard_core::backend::ChatMessage::user("hi", false)],
        observation: None,
        want_logprobs: false,
        top_logprobs: 0,
        model_name: String::new(),
        max_tokens: 8,
        temperature: 0.0,
        answer_options: Vec::new(),
        context: None,
    };
    assert!(matches!(client.complete(&req), Err(BackendError::ProtocolMismatch(_))));
}

#[test]
fn health_check() {
    let server = serve(Vec::new());
    let client = OpenAiCompatClient::new(config(&server.url, "LOOPGUARD_TEST_UNSET_KEY")).unwrap();
    assert!(client.health_check().is_ok());
    let dead = OpenAiCompatClient::new(config("http://127.0.0.1:9/v1", "LOOPGUARD_TEST_UNSET_KEY")).unwrap();
    assert!(matches!(dead.health_check(), Err(BackendError::Unreachable(_))));
}
