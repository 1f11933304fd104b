//! Scripted chat-completions server for offline runs.

use std::sync::Arc;

use anyhow::Context;
use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use heart2mind_core::contest::{ChatRequest, ChatResponse, MockScript};

async fn completions(State(script): State<Arc<MockScript>>, Json(req): Json<ChatRequest>) -> Json<ChatResponse> {
    Json(script.response(&req))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(script: MockScript) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(completions))
        .route("/chat/completions", post(completions))
        .route("/healthz", get(health))
        .with_state(Arc::new(script))
}

pub async fn serve(listen: &str, script: MockScript) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .with_context(|| format!("cannot listen on {listen}"))?;
    log::info!("mock chat endpoint on http://{}/v1", listener.local_addr()?);
    axum::serve(listener, router(script))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
