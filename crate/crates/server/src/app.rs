//! HTTP endpoint: `/ws` upgrades to the editing socket, `/health` answers `ok`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::sessions::{coalesce, Service};
use crate::wire::WireMessage;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/ws", get(upgrade))
        .route("/health", get(|| async { "ok" }))
        .with_state(service)
}

async fn upgrade(ws: WebSocketUpgrade, State(service): State<Arc<Service>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, service))
}

async fn connection(socket: WebSocket, service: Arc<Service>) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<WireMessage>();

    // Reading runs ahead of inference so queued gestures can be coalesced.
    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = stream.next().await {
            let parsed = match msg {
                Message::Text(text) => serde_json::from_str::<WireMessage>(&text)
                    .unwrap_or_else(|e| WireMessage::error(None, None, format!("malformed message: {e}"))),
                Message::Binary(_) => WireMessage::error(None, None, "binary messages are not supported"),
                Message::Close(_) => break,
                _ => continue,
            };
            if tx.send(parsed).is_err() {
                break;
            }
        }
    });

    while let Some(first) = rx.recv().await {
        let mut batch = vec![first];
        while let Ok(more) = rx.try_recv() {
            batch.push(more);
        }
        for msg in coalesce(batch) {
            let reply = match msg {
                e @ WireMessage::Error { .. } => e,
                msg => {
                    let svc = service.clone();
                    match tokio::task::spawn_blocking(move || svc.handle(msg)).await {
                        Ok(r) => r,
                        Err(e) => WireMessage::error(None, None, format!("internal error: {e}")),
                    }
                }
            };
            let text = serde_json::to_string(&reply).expect("wire messages serialise");
            if sink.send(Message::Text(text.into())).await.is_err() {
                reader.abort();
                return;
            }
        }
    }
    reader.abort();
}

/// Serves until the process is stopped.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await?;
    Ok(())
}

/// Binds an ephemeral local port and serves in the background.
pub async fn spawn_local(service: Arc<Service>) -> anyhow::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router(service)).await;
    });
    Ok((addr, handle))
}
