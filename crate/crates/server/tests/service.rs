mod common;

use common::{start, toy_service, Client};
use dragedit_core::interaction::ZKey;
use dragedit_core::transformer::PixelPosition;
use dragedit_server::wire::{decode_png, WireMessage};

fn create(seed: u64) -> WireMessage {
    WireMessage::CreateSession {
        seed: Some(seed),
        latent: None,
        use_average_direction: false,
    }
}

fn drag(session: &str, id: u64, s: (i64, i64), e: (i64, i64)) -> WireMessage {
    WireMessage::Drag {
        session: session.into(),
        id,
        s: PixelPosition::new(s.0, s.1),
        e: PixelPosition::new(e.0, e.1),
        z_key: ZKey::None,
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn session_lifecycle_over_the_socket() {
    let addr = start(toy_service()).await;
    let mut c = Client::connect(addr).await;

    let a = c.frame(&create(42)).await;
    let b = c.frame(&create(42)).await;
    assert_ne!(a.session, b.session);
    assert_eq!(a.png, b.png);
    assert_eq!((a.width, a.height), (32, 32));
    assert_eq!(decode_png(&a.png).unwrap().dimensions(), (32, 32));
    let s = a.session.clone();

    let f = c.frame(&drag(&s, 1, (10, 10), (13, 14))).await;
    assert_eq!(f.id, Some(1));
    assert_eq!(f.k, Some(1));
    assert_eq!(f.motion, Some([0.6, 0.8, 0.0]));
    assert!((f.alpha.unwrap() - 0.1).abs() < 1e-12);
    assert_ne!(f.png, a.png);
    let plain_drag = f.png.clone();

    let anchored = c
        .frame(&WireMessage::AnchorAdd {
            session: s.clone(),
            p: PixelPosition::new(25, 5),
        })
        .await;
    assert_eq!(anchored.k, Some(2));
    let again = c.frame(&drag(&s, 2, (10, 10), (13, 14))).await;
    assert_eq!(again.k, Some(2));
    assert_eq!(again.png, anchored.png);
    assert_ne!(again.png, plain_drag);

    let reverted = c.frame(&WireMessage::Revert { session: s.clone() }).await;
    assert_eq!(reverted.png, a.png);
    assert_eq!(reverted.notice.as_deref(), Some("reverted"));
    let noop = c.frame(&WireMessage::Revert { session: s.clone() }).await;
    assert_eq!(noop.notice.as_deref(), Some("nothing to revert"));
    let noop = c.frame(&WireMessage::Commit { session: s.clone() }).await;
    assert_eq!(noop.notice.as_deref(), Some("nothing to commit"));
    assert_eq!(noop.png, a.png);

    let edited = c.frame(&drag(&s, 3, (10, 10), (20, 10))).await;
    let committed = c.frame(&WireMessage::Commit { session: s.clone() }).await;
    assert_eq!(committed.png, edited.png);
    assert_eq!(c.frame(&WireMessage::Revert { session: s.clone() }).await.png, edited.png);

    let beta = c
        .frame(&WireMessage::SetBeta {
            session: s.clone(),
            beta: 0.05,
        })
        .await;
    assert_eq!(beta.notice.as_deref(), Some("beta updated"));
    let f = c.frame(&drag(&s, 4, (10, 10), (13, 14))).await;
    assert!((f.alpha.unwrap() - 0.25).abs() < 1e-12);

    let f = c
        .frame(&WireMessage::Wheel {
            session: s.clone(),
            id: 5,
            p: PixelPosition::new(16, 16),
            clicks: 2,
        })
        .await;
    assert_eq!(f.motion, Some([0.0, 0.0, -5.0]));
    assert!((f.alpha.unwrap() - 0.2).abs() < 1e-12);
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_keep_the_connection_alive() {
    let addr = start(toy_service()).await;
    let mut c = Client::connect(addr).await;
    let s = c.frame(&create(1)).await.session;

    c.send_raw(r#"{"type":"teleport","session":"s1"}"#).await;
    assert!(matches!(c.recv().await, WireMessage::Error { message, .. } if message.contains("malformed")));
    c.send_raw("not json").await;
    assert!(matches!(c.recv().await, WireMessage::Error { .. }));

    let bad = WireMessage::CreateSession {
        seed: None,
        latent: Some(vec![vec![0.0; 4]; 3]),
        use_average_direction: false,
    };
    match c.call(&bad).await {
        WireMessage::Error { message, .. } => assert!(message.contains("8x4"), "{message}"),
        other => panic!("{other:?}"),
    }
    match c.call(&drag(&s, 9, (10, 10), (40, 10))).await {
        WireMessage::Error { session, id, message } => {
            assert_eq!(session.as_deref(), Some(s.as_str()));
            assert_eq!(id, Some(9));
            assert!(message.contains("outside"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(c.call(&drag("nope", 1, (1, 1), (2, 2))).await, WireMessage::Error { .. }));
    assert_eq!(c.frame(&drag(&s, 10, (10, 10), (12, 10))).await.id, Some(10));
}

#[tokio::test(flavor = "multi_thread")]
async fn queued_drags_coalesce_to_the_newest() {
    let addr = start(toy_service()).await;
    let mut c = Client::connect(addr).await;
    let s = c.frame(&create(7)).await.session;

    for id in 1..=8 {
        c.send(&drag(&s, id, (10, 10), (10 + id as i64, 10))).await;
    }
    c.send(&WireMessage::Revert { session: s.clone() }).await;
    let mut ids = Vec::new();
    let mut last_png = None;
    loop {
        match c.recv().await {
            WireMessage::Frame(f) if f.id.is_some() => {
                ids.push(f.id.unwrap());
                last_png = Some(f.png);
            }
            WireMessage::Frame(f) => {
                assert_eq!(f.notice.as_deref(), Some("reverted"));
                break;
            }
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(*ids.last().unwrap(), 8);
    assert!(ids.windows(2).all(|w| w[0] < w[1]));

    // The newest gesture alone yields the same frame.
    let mut fresh = Client::connect(addr).await;
    let s2 = fresh.frame(&create(7)).await.session;
    assert_eq!(fresh.frame(&drag(&s2, 1, (10, 10), (18, 10))).await.png, last_png.unwrap());
}

#[tokio::test(flavor = "multi_thread")]
async fn average_direction_sessions() {
    let service = toy_service();
    let rows = vec![vec![0.3, -0.1, 0.2, 0.5]; 8];
    let addr = start(service).await;
    let mut c = Client::connect(addr).await;
    let msg = WireMessage::CreateSession {
        seed: None,
        latent: Some(rows),
        use_average_direction: true,
    };
    let s = c.frame(&msg).await.session;
    let f = c.frame(&drag(&s, 1, (5, 5), (9, 8))).await;
    assert_eq!(f.k, Some(1));
    let both = WireMessage::CreateSession {
        seed: Some(1),
        latent: Some(vec![vec![0.0; 4]; 8]),
        use_average_direction: false,
    };
    assert!(matches!(c.call(&both).await, WireMessage::Error { .. }));
}

#[tokio::test(flavor = "multi_thread")]
async fn health_endpoint() {
    let addr = start(toy_service()).await;
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut body = String::new();
    stream.read_to_string(&mut body).await.unwrap();
    assert!(body.starts_with("HTTP/1.1 200"));
    assert!(body.ends_with("ok"));
}
