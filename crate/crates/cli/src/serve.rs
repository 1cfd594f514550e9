use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cutie_core::infer::{InferRequest, Predictor};
use cutie_core::Error;
use serde_json::json;

pub fn router(predictor: Arc<Predictor>) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/infer", post(infer))
        .with_state(predictor)
}

async fn health(State(p): State<Arc<Predictor>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model": p.summary() }))
}

fn error(status: StatusCode, message: String) -> Response {
    (status, Json(json!({ "error": message }))).into_response()
}

async fn infer(State(p): State<Arc<Predictor>>, body: Bytes) -> Response {
    let request: InferRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) if e.is_data() => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    match tokio::task::spawn_blocking(move || p.predict(&request)).await {
        Ok(Ok(response)) => Json(response).into_response(),
        Ok(Err(e)) => {
            let status = match e {
                Error::InvalidArgument(_)
                | Error::BadBBox(_)
                | Error::UnknownLabel(_)
                | Error::RowCapacity { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            };
            error(status, e.to_string())
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task failed: {e}")),
    }
}

pub fn serve(predictor: Predictor, addr: SocketAddr) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        // Tests and scripts read the bound address from this line.
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(Arc::new(predictor)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
