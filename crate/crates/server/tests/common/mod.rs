#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use dragedit_core::generator::{Generator, GeneratorConfig};
use dragedit_core::latent::LatentSeq;
use dragedit_core::transformer::{LatentTransformer, TransformerConfig};
use dragedit_server::app::spawn_local;
use dragedit_server::sessions::{Service, ServiceConfig};
use dragedit_server::wire::{Frame, WireMessage};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

/// Toy generator plus an untrained transformer with a non-zero head.
pub fn toy_service() -> Service {
    let g = Generator::procedural(GeneratorConfig::toy_32(4), 5).unwrap();
    let w_bar = g.average_latent(64, 0).unwrap();
    let ch = g.extract_feature_map(&LatentSeq::broadcast(&w_bar, 8)).unwrap().channels();
    let mut model = LatentTransformer::new(TransformerConfig::small(4, 8, 32, ch, 16, 2, 1), 1).unwrap();
    model.randomize_head(2);
    Service::new(g, model, Some(w_bar), ServiceConfig::default()).unwrap()
}

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl Client {
    pub async fn connect(addr: SocketAddr) -> Self {
        let (ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
        Self { ws }
    }

    pub async fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::Text(text.into())).await.unwrap();
    }

    pub async fn send(&mut self, msg: &WireMessage) {
        self.send_raw(&serde_json::to_string(msg).unwrap()).await;
    }

    pub async fn recv(&mut self) -> WireMessage {
        loop {
            match self.ws.next().await.unwrap().unwrap() {
                Message::Text(t) => return serde_json::from_str(&t).unwrap(),
                Message::Ping(_) | Message::Pong(_) => continue,
                other => panic!("unexpected message {other:?}"),
            }
        }
    }

    pub async fn call(&mut self, msg: &WireMessage) -> WireMessage {
        self.send(msg).await;
        self.recv().await
    }

    pub async fn frame(&mut self, msg: &WireMessage) -> Frame {
        match self.call(msg).await {
            WireMessage::Frame(f) => f,
            other => panic!("expected a frame for {msg:?}, got {other:?}"),
        }
    }
}

pub async fn start(service: Service) -> SocketAddr {
    spawn_local(Arc::new(service)).await.unwrap().0
}
