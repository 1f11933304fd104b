use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Once};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use heart2mind_cli::config::{LlmBackendKind, ServiceConfig};
use heart2mind_cli::server::{build_state, load_model, make_backend, router};
use heart2mind_core::contest::{
    chat, AuditLog, CaseStore, ChatMessage, ChatTranscript, ContestError, ContestService, HttpChatClient,
    LlmEndpointConfig, MockScript, Role, ScriptedOutcome,
};
use heart2mind_core::mstft::{model_checksum, Hyperparams, MstftModel};
use heart2mind_core::signal_store::records_from_rri;
use heart2mind_core::windowing::synth_dataset;

static KEY: Once = Once::new();

fn set_key() {
    KEY.call_once(|| std::env::set_var("HEART2MIND_KEY", "cd".repeat(32)));
}

fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.to_path_buf(),
        llm_backend: LlmBackendKind::Scripted,
        cors_allowlist: vec!["http://localhost:5173".into()],
        ..Default::default()
    }
}

fn app(dir: &Path) -> (Router, String) {
    set_key();
    let cfg = config(dir);
    let model = MstftModel::new(Hyperparams::reduced(), 0).unwrap();
    let checksum = model_checksum(&model);
    let state = build_state(&cfg, model, make_backend(&cfg).unwrap()).unwrap();
    (router(state, &cfg.cors_allowlist), checksum)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, Value, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header(header::CONTENT_TYPE, "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if ctype.starts_with("application/json") {
        serde_json::from_slice(&bytes).unwrap()
    } else {
        Value::Null
    };
    (status, value, String::from_utf8_lossy(&bytes).into_owned())
}

/// Key names and value kinds, recursively; arrays are described by their first element.
fn shape(v: &Value) -> Value {
    match v {
        Value::Object(o) => Value::Object(o.iter().map(|(k, v)| (k.clone(), shape(v))).collect()),
        Value::Array(a) => json!([a.first().map(shape).unwrap_or(json!("empty"))]),
        Value::Null => json!("null"),
        Value::Bool(_) => json!("bool"),
        Value::Number(_) => json!("number"),
        Value::String(_) => json!("string"),
    }
}

fn check_golden(name: &str, shapes: &BTreeMap<String, Value>) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let current = serde_json::to_string_pretty(shapes).unwrap() + "\n";
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &current).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(current, golden, "response schema drifted from {}", path.display());
}

fn ndjson(rri: &[f64]) -> String {
    records_from_rri(rri)
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rest_flow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (app, checksum) = app(dir.path());
    let mut shapes = BTreeMap::new();

    let (s, health, _) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(health["model_checksum"], checksum);
    assert_eq!(health["config_digest"].as_str().unwrap().len(), 64);
    shapes.insert("GET /healthz".to_string(), shape(&health));

    let new = json!({ "profile": { "name": "P1", "age": 52, "sex": "male" }, "label": "treatment" }).to_string();
    let (s, created, _) = call(&app, Method::POST, "/sessions", Some(new)).await;
    assert_eq!(s, StatusCode::CREATED);
    shapes.insert("POST /sessions".to_string(), shape(&created));
    let sid = created["session_id"].as_str().unwrap().to_string();

    let rri = &synth_dataset(1, 5)[1].rri[..1200];
    let (s, acks, _) = call(&app, Method::POST, &format!("/sessions/{sid}/records"), Some(ndjson(rri))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(acks["accepted"], 1200);
    shapes.insert("POST /sessions/{id}/records".to_string(), shape(&acks));

    let (s, bad, _) = call(&app, Method::POST, &format!("/sessions/{sid}/records"), Some("{oops}\n".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(bad["error"]["kind"], "parse");
    shapes.insert("error".to_string(), shape(&bad));

    let (s, _, _) = call(&app, Method::POST, &format!("/diagnose/{sid}"), None).await;
    assert_eq!(s, StatusCode::CONFLICT, "diagnosis needs a closed session");

    let (s, summary, _) = call(&app, Method::POST, &format!("/sessions/{sid}/close"), None).await;
    assert_eq!(s, StatusCode::OK);
    shapes.insert("POST /sessions/{id}/close".to_string(), shape(&summary));

    let (s, session, _) = call(&app, Method::GET, &format!("/sessions/{sid}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(session["rri"].as_array().unwrap().len(), 1200);
    assert!(session["profile"].get("name").is_none(), "names never leave the store");
    shapes.insert("GET /sessions/{id}".to_string(), shape(&session));

    let (s, _, csv) = call(&app, Method::GET, &format!("/sessions/{sid}/export.csv"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(csv.starts_with("timestamp_ms,rri_ms"));
    assert_eq!(csv.lines().count(), 1201);

    let (s, bundle, _) = call(&app, Method::POST, &format!("/diagnose/{sid}"), None).await;
    assert_eq!(s, StatusCode::OK, "{bundle}");
    assert!(matches!(bundle["prediction"].as_str(), Some("control" | "treatment")));
    assert!(bundle["f_r"].is_object());
    shapes.insert("POST /diagnose/{session_id}".to_string(), shape(&bundle));
    let case_id = bundle["case_id"].as_str().unwrap().to_string();

    let (_, again, _) = call(&app, Method::POST, &format!("/diagnose/{sid}"), None).await;
    assert_eq!(again["case_id"], case_id, "repeat diagnosis reuses the case");
    let (_, fresh, _) = call(&app, Method::POST, &format!("/diagnose/{sid}?fresh=true&window=0"), None).await;
    assert_ne!(fresh["case_id"], case_id);
    assert_eq!(fresh["explained_window"], 0);
    let (s, _, _) = call(&app, Method::POST, &format!("/diagnose/{sid}?window=100000"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, case, _) = call(&app, Method::GET, &format!("/cases/{case_id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(case["status"], "open");
    assert_eq!(case["transcript"][0]["role"], "system");
    shapes.insert("GET /cases/{id}".to_string(), shape(&case));

    let msg = json!({ "content": "Which region matters most?" }).to_string();
    let (s, reply, _) = call(&app, Method::POST, &format!("/cases/{case_id}/messages"), Some(msg)).await;
    assert_eq!(s, StatusCode::OK);
    assert!(reply["metrics"]["toks"].as_u64().unwrap() > 0);
    shapes.insert("POST /cases/{id}/messages".to_string(), shape(&reply));

    let (s, fin, _) = call(&app, Method::POST, &format!("/cases/{case_id}/finalize"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(fin["case"]["decision_source"], "llm_retain");
    assert_eq!(fin["case"]["final_decision"], bundle["prediction"]);
    shapes.insert("POST /cases/{id}/finalize".to_string(), shape(&fin));

    let (s, _, _) = call(&app, Method::POST, &format!("/cases/{case_id}/finalize"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let other = if bundle["prediction"] == "control" { "treatment" } else { "control" };
    let no_reason = json!({ "decision": other, "clinician_id": "dr-a" }).to_string();
    let (s, _, _) = call(&app, Method::POST, &format!("/cases/{case_id}/override"), Some(no_reason)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let body = json!({ "decision": other, "reason": "motion artifacts", "clinician_id": "dr-a" }).to_string();
    let (s, ov, _) = call(&app, Method::POST, &format!("/cases/{case_id}/override"), Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ov["case"]["decision_source"], "clinician_override");
    assert_eq!(ov["case"]["final_decision"], other);
    shapes.insert("POST /cases/{id}/override".to_string(), shape(&ov));
    let (s, _, _) = call(&app, Method::POST, &format!("/cases/{case_id}/override"), Some(body)).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, missing, _) = call(&app, Method::GET, "/cases/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(missing["schema_version"], 1);

    for (name, v) in &shapes {
        assert!(v.get("schema_version").is_some(), "{name} lacks schema_version");
    }
    check_golden("api_schema.json", &shapes);

    let audit = AuditLog::open(&dir.path().join("audit.ndjson")).unwrap();
    assert!(audit.verify().unwrap() >= 6);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn short_session_is_insufficient_data() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let new = json!({ "profile": { "name": "P2", "age": 30, "sex": "female" } }).to_string();
    let (_, created, _) = call(&app, Method::POST, "/sessions", Some(new)).await;
    let sid = created["session_id"].as_str().unwrap().to_string();
    call(&app, Method::POST, &format!("/sessions/{sid}/records"), Some(ndjson(&[800.0; 20]))).await;
    call(&app, Method::POST, &format!("/sessions/{sid}/close"), None).await;
    let (s, err, _) = call(&app, Method::POST, &format!("/diagnose/{sid}"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"]["kind"], "insufficient_data");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cors_preflight_follows_allowlist() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    for (origin, allowed) in [("http://localhost:5173", true), ("http://evil.example", false)] {
        let req = Request::builder()
            .method(Method::OPTIONS)
            .uri("/sessions")
            .header(header::ORIGIN, origin)
            .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
            .body(Body::empty())
            .unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        let got = resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).map(|v| v.to_str().unwrap().to_string());
        assert_eq!(got.as_deref() == Some(origin), allowed, "{origin}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bearer_token_option() {
    set_key();
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var("H2M_TEST_TOKEN", "s3cret");
    let cfg = ServiceConfig {
        auth_token_env: Some("H2M_TEST_TOKEN".into()),
        ..config(dir.path())
    };
    let model = MstftModel::new(Hyperparams::reduced(), 0).unwrap();
    let app = router(build_state(&cfg, model, make_backend(&cfg).unwrap()).unwrap(), &cfg.cors_allowlist);
    let (s, _, _) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _, _) = call(&app, Method::GET, "/cases/x", None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let req = Request::get("/cases/x")
        .header(header::AUTHORIZATION, "Bearer s3cret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::NOT_FOUND);
}

#[test]
fn bad_checkpoint_names_the_path() {
    let err = load_model(Path::new("/nonexistent/model.h2m")).unwrap_err();
    assert!(format!("{err:#}").contains("/nonexistent/model.h2m"));
}

#[test]
fn config_env_overrides_and_field_errors() {
    let mut cfg = ServiceConfig::from_toml("listen = \"0.0.0.0:9000\"\n[llm]\nmodel_name = \"gemma\"\n").unwrap();
    assert_eq!(cfg.llm.model_name, "gemma");
    assert_eq!(cfg.llm.max_tokens, 2048);
    assert_eq!(cfg.llm.temperature, 0.8);
    assert_eq!(cfg.llm.top_p, 0.1);
    cfg.apply_env(|k| match k {
        "HEART2MIND_LISTEN" => Some("127.0.0.1:9001".into()),
        "HEART2MIND_CORS_ALLOWLIST" => Some("http://a.test, http://b.test".into()),
        _ => None,
    })
    .unwrap();
    assert_eq!(cfg.listen, "127.0.0.1:9001");
    assert_eq!(cfg.cors_allowlist.len(), 2);
    cfg.validate().unwrap();

    cfg.listen = "nowhere".into();
    cfg.llm.top_p = 0.0;
    cfg.sae.rho = 1.5;
    let msg = cfg.validate().unwrap_err().to_string();
    for field in ["listen:", "llm.top_p:", "sae.rho:"] {
        assert!(msg.contains(field), "{msg}");
    }
    assert!(ServiceConfig::from_toml("bogus_field = 1").is_err());
    assert_ne!(ServiceConfig::default().digest(), cfg.digest());
}

/// Mock endpoint on an ephemeral port, served from a background runtime.
fn spawn(app: Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}/v1", rx.recv().unwrap())
}

#[test]
fn http_client_against_mock_server() {
    let dir = tempfile::tempdir().unwrap();
    let mut script = MockScript::default();
    script.cases.insert("case-over".into(), ScriptedOutcome::Overturn);
    let base = spawn(heart2mind_cli::mock_llm::router(script));
    let cfg = LlmEndpointConfig {
        base_url: base,
        backoff_ms: 1,
        ..Default::default()
    };
    let client = Arc::new(HttpChatClient::new(cfg.clone()).unwrap());

    let mut t = ChatTranscript::new(ChatMessage::new(Role::System, "sys")).unwrap();
    let (reply, m) = chat(client.as_ref(), &cfg, &mut t, "hello", Some("x")).unwrap();
    assert!(!reply.is_empty());
    assert_eq!(t.len(), 3);
    assert!(m.toks > 0 && m.output_time > 0.0 && m.tps > 0.0);

    set_key();
    let svc = ContestService::new(
        CaseStore::open(&dir.path().join("cases")).unwrap(),
        Arc::new(AuditLog::open(&dir.path().join("audit.ndjson")).unwrap()),
        client,
        cfg,
    );
    let series = &synth_dataset(1, 2)[0];
    let input = heart2mind_core::contest::CaseInput {
        session_ref: "s".into(),
        baseline_prediction: series.label,
        baseline_probability: 0.3,
        f_r: heart2mind_core::hrv::baseline_metrics(&series.rri).unwrap(),
        f_d: vec![],
        sae_flagged: false,
        profile: None,
    };
    let mut case = heart2mind_core::contest::ContestCase::open("case-over", input).unwrap();
    CaseStore::open(&dir.path().join("cases")).unwrap().save(&case).unwrap();
    let (out, stored) = svc.finalize("case-over").unwrap();
    assert_eq!(out.decision_source, Some(heart2mind_core::contest::DecisionSource::LlmOverturn));
    assert_ne!(stored.final_decision, Some(series.label));
    case = stored;
    assert!(case.is_finalized());
}

#[test]
fn endpoint_and_parse_errors() {
    use axum::routing::post;
    let failing = Router::new().route(
        "/v1/chat/completions",
        post(|| async { (StatusCode::SERVICE_UNAVAILABLE, "model overloaded, retry later") }),
    );
    let garbage = Router::new().route("/v1/chat/completions", post(|| async { "not json" }));
    for (app, want_endpoint) in [(failing, true), (garbage, false)] {
        let cfg = LlmEndpointConfig {
            base_url: spawn(app),
            ..Default::default()
        };
        let client = HttpChatClient::new(cfg.clone()).unwrap();
        let mut t = ChatTranscript::new(ChatMessage::new(Role::System, "sys")).unwrap();
        let err = chat(&client, &cfg, &mut t, "hi", None).unwrap_err();
        match err {
            ContestError::Endpoint { status, excerpt } => {
                assert!(want_endpoint);
                assert_eq!(status, 503);
                assert!(excerpt.contains("overloaded"));
            }
            ContestError::Parse(_) => assert!(!want_endpoint),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(t.len(), 1, "failed calls leave the transcript untouched");
    }
}
