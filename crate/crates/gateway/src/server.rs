//! NDJSON-over-TCP server and the HTTP bridge for browsers.
//!
//! The HTTP side exposes `POST /rpc` (one request message in, one reply
//! out) and `GET /events` (server-sent `metrics_push` messages). Both speak
//! the same message schema as the TCP side.

use std::convert::Infallible;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde_json::json;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};

use crate::codec;
use crate::config::GatewayConfig;
use crate::dispatch::{self, DeviceBackend};
use crate::protocol::{ErrorReason, ManagementMessage, MessageType, SubscribePayload};

/// Longest accepted request line.
pub const MAX_LINE_BYTES: usize = 1 << 20;

/// The device every connection talks to. The mutex (or the device thread's
/// command channel behind it) is the single queue through which all
/// commands are serialized.
pub type SharedBackend = Arc<Mutex<dyn DeviceBackend>>;

pub fn shared(backend: impl DeviceBackend + 'static) -> SharedBackend {
    Arc::new(Mutex::new(backend))
}

struct GatewayState {
    backend: SharedBackend,
    push_interval: Duration,
    next_subscription: AtomicU64,
}

impl GatewayState {
    async fn dispatch(&self, msg: ManagementMessage) -> ManagementMessage {
        let backend = self.backend.clone();
        let id = msg.id.clone();
        tokio::task::spawn_blocking(move || match backend.lock() {
            Ok(mut b) => dispatch::handle(&mut *b, &msg),
            Err(_) => ManagementMessage::error(msg.id.clone(), ErrorReason::Unavailable, "device lock poisoned"),
        })
        .await
        .unwrap_or_else(|e| ManagementMessage::error(id, ErrorReason::Unavailable, e.to_string()))
    }

    async fn push(&self, subscription: String) -> Option<ManagementMessage> {
        let backend = self.backend.clone();
        tokio::task::spawn_blocking(move || {
            let mut b = backend.lock().ok()?;
            dispatch::metrics_push(&mut *b, &subscription).ok()
        })
        .await
        .ok()
        .flatten()
    }

    fn subscription(&self, payload: &SubscribePayload) -> (String, Duration) {
        let n = self.next_subscription.fetch_add(1, Ordering::Relaxed);
        let interval = payload
            .interval_ms
            .filter(|ms| *ms > 0)
            .map_or(self.push_interval, Duration::from_millis);
        (format!("sub-{n}"), interval)
    }
}

pub struct Gateway {
    tcp: TcpListener,
    http: Option<TcpListener>,
    state: Arc<GatewayState>,
}

impl Gateway {
    pub async fn bind(config: &GatewayConfig, backend: SharedBackend) -> std::io::Result<Self> {
        let tcp = TcpListener::bind(config.listen).await?;
        let http = match config.http_listen {
            Some(addr) => Some(TcpListener::bind(addr).await?),
            None => None,
        };
        Ok(Gateway {
            tcp,
            http,
            state: Arc::new(GatewayState {
                backend,
                push_interval: Duration::from_millis(config.push_interval_ms),
                next_subscription: AtomicU64::new(1),
            }),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.tcp.local_addr()
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http.as_ref().and_then(|l| l.local_addr().ok())
    }

    /// Serves until `shutdown` resolves.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        let (stop_tx, stop_rx) = watch::channel(false);
        tokio::spawn(async move {
            shutdown.await;
            let _ = stop_tx.send(true);
        });
        let http_task = self.http.map(|listener| {
            let app = router(self.state.clone());
            let mut rx = stop_rx.clone();
            tokio::spawn(async move {
                axum::serve(listener, app)
                    .with_graceful_shutdown(async move {
                        let _ = rx.wait_for(|s| *s).await;
                    })
                    .await
            })
        });
        let mut rx = stop_rx;
        loop {
            tokio::select! {
                _ = rx.wait_for(|s| *s) => break,
                accepted = self.tcp.accept() => match accepted {
                    Ok((stream, peer)) => {
                        tracing::debug!(%peer, "management connection");
                        tokio::spawn(connection(stream, self.state.clone()));
                    }
                    Err(e) => tracing::warn!("accept failed: {e}"),
                }
            }
        }
        if let Some(t) = http_task {
            t.await.map_err(std::io::Error::other)??;
        }
        Ok(())
    }
}

async fn connection(stream: TcpStream, state: Arc<GatewayState>) {
    let (read, mut write) = stream.into_split();
    let (tx, mut rx) = mpsc::channel::<String>(256);
    let writer = tokio::spawn(async move {
        while let Some(line) = rx.recv().await {
            if write.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
    });
    let mut reader = BufReader::new(read);
    let mut subscriptions = Vec::new();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = match (&mut reader)
            .take(MAX_LINE_BYTES as u64 + 1)
            .read_until(b'\n', &mut buf)
            .await
        {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        if n > MAX_LINE_BYTES && buf.last() != Some(&b'\n') {
            let msg = ManagementMessage::error("", ErrorReason::Parse, "line too long");
            if tx.send(codec::encode(&msg)).await.is_err() {
                break;
            }
            let mut rest = Vec::new();
            if reader.read_until(b'\n', &mut rest).await.unwrap_or(0) == 0 {
                break;
            }
            continue;
        }
        let text = String::from_utf8_lossy(&buf);
        if text.trim().is_empty() {
            continue;
        }
        let reply = match codec::decode(&text) {
            Err((id, e)) => ManagementMessage::error(id.unwrap_or_default(), e.reason(), e.to_string()),
            Ok(msg) if msg.kind == MessageType::SubscribeMetrics => match msg.payload_as::<SubscribePayload>() {
                Ok(p) => {
                    let (sub, interval) = state.subscription(&p);
                    subscriptions.push(tokio::spawn(push_loop(
                        state.clone(),
                        sub.clone(),
                        interval,
                        tx.clone(),
                    )));
                    ManagementMessage::ack(
                        msg.id,
                        json!({"subscription": sub, "interval_ms": interval.as_millis() as u64}),
                    )
                }
                Err(e) => ManagementMessage::error(msg.id, e.reason(), e.to_string()),
            },
            Ok(msg) => state.dispatch(msg).await,
        };
        if tx.send(codec::encode(&reply)).await.is_err() {
            break;
        }
    }
    for s in subscriptions {
        s.abort();
    }
    drop(tx);
    let _ = writer.await;
}

async fn push_loop(state: Arc<GatewayState>, sub: String, interval: Duration, tx: mpsc::Sender<String>) {
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        ticker.tick().await;
        let Some(msg) = state.push(sub.clone()).await else {
            return;
        };
        if tx.send(codec::encode(&msg)).await.is_err() {
            return;
        }
    }
}

fn router(state: Arc<GatewayState>) -> Router {
    Router::new()
        .route("/rpc", post(rpc).options(preflight))
        .route("/events", get(events))
        .with_state(state)
}

fn with_cors(mut r: Response) -> Response {
    let h = r.headers_mut();
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    h.insert(
        header::ACCESS_CONTROL_ALLOW_HEADERS,
        HeaderValue::from_static("content-type"),
    );
    h.insert(
        header::ACCESS_CONTROL_ALLOW_METHODS,
        HeaderValue::from_static("GET, POST, OPTIONS"),
    );
    r
}

async fn preflight() -> Response {
    with_cors(StatusCode::NO_CONTENT.into_response())
}

async fn rpc(State(state): State<Arc<GatewayState>>, body: String) -> Response {
    let reply = match codec::decode(&body) {
        Err((id, e)) => ManagementMessage::error(id.unwrap_or_default(), e.reason(), e.to_string()),
        Ok(msg) if msg.kind == MessageType::SubscribeMetrics => ManagementMessage::error(
            msg.id,
            ErrorReason::Unavailable,
            "subscribe over GET /events on this transport",
        ),
        Ok(msg) => state.dispatch(msg).await,
    };
    let body = serde_json::to_string(&reply).expect("message serializes");
    with_cors(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

async fn events(State(state): State<Arc<GatewayState>>, Query(p): Query<SubscribePayload>) -> Response {
    let (sub, interval) = state.subscription(&p);
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let stream = futures::stream::unfold((state, ticker, sub), |(state, mut ticker, sub)| async move {
        ticker.tick().await;
        let msg = state.push(sub.clone()).await?;
        let event = Event::default()
            .event("metrics_push")
            .data(serde_json::to_string(&msg).expect("message serializes"));
        Some((Ok::<_, Infallible>(event), (state, ticker, sub)))
    });
    with_cors(Sse::new(stream).keep_alive(KeepAlive::default()).into_response())
}

/// A gateway serving from its own runtime thread.
pub struct RunningGateway {
    pub tcp_addr: SocketAddr,
    pub http_addr: Option<SocketAddr>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl RunningGateway {
    pub fn spawn(config: &GatewayConfig, backend: SharedBackend) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let gateway = runtime.block_on(Gateway::bind(config, backend))?;
        let tcp_addr = gateway.local_addr()?;
        let http_addr = gateway.http_addr();
        let (stop, stopped) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("gateway".into()).spawn(move || {
            let r = runtime.block_on(gateway.run(async move {
                let _ = stopped.await;
            }));
            runtime.shutdown_timeout(Duration::from_secs(1));
            r
        })?;
        Ok(RunningGateway {
            tcp_addr,
            http_addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> std::io::Result<()> {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| std::io::Error::other("gateway thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for RunningGateway {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}
