//! WebSocket front end. A single task owns the [`SimCore`]; connections
//! talk to it only through the inbound queue and receive frames through a
//! broadcast channel (lagging clients lose their oldest frames).

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, watch};
use tokio::task::JoinHandle;
use tokio::time::{sleep_until, Instant};

use aerobat::composer::builtin_scripts;
use aerobat::dynamics::POLICY_DT;
use aerobat::tasks::TaskId;

use crate::protocol::{decode_message, encode_frame, ClientMessage, Event, ServerFrame, PROTOCOL_VERSION};
use crate::sim::SimCore;

#[derive(Debug, Clone)]
pub struct ServiceInfo {
    pub config_hash: String,
    pub network_hash: String,
    pub telemetry_hz: f64,
    /// Frames buffered per client before the oldest are dropped.
    pub client_queue: usize,
}

struct Inbound {
    msg: ClientMessage,
    reply: mpsc::Sender<Arc<str>>,
}

#[derive(Clone)]
struct AppState {
    inbound: mpsc::Sender<Inbound>,
    frames: broadcast::Sender<Arc<str>>,
    hello: Arc<str>,
}

pub struct RunningService {
    pub addr: SocketAddr,
    stop: watch::Sender<bool>,
    server: JoinHandle<()>,
    sim: JoinHandle<()>,
}

impl RunningService {
    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        let _ = self.sim.await;
        let _ = self.server.await;
    }

    /// Runs until the server task ends.
    pub async fn wait(self) {
        let _ = self.server.await;
        let _ = self.stop.send(true);
        let _ = self.sim.await;
    }
}

fn frame(f: &ServerFrame) -> Arc<str> {
    Arc::from(encode_frame(f))
}

fn publish(tx: &broadcast::Sender<Arc<str>>, events: Vec<Event>) {
    for e in events {
        let _ = tx.send(frame(&ServerFrame::Event(e)));
    }
}

async fn sim_loop(
    mut core: SimCore,
    mut inbound: mpsc::Receiver<Inbound>,
    tx: broadcast::Sender<Arc<str>>,
    telemetry_hz: f64,
    mut stop: watch::Receiver<bool>,
) {
    let tel_period = Duration::from_secs_f64(1.0 / telemetry_hz);
    let mut next_step = Instant::now();
    let mut next_tel = Instant::now();
    loop {
        tokio::select! {
            biased;
            _ = stop.changed() => break,
            Some(inb) = inbound.recv() => match core.apply(inb.msg) {
                Ok(events) => publish(&tx, events),
                Err(message) => {
                    let _ = inb.reply.try_send(frame(&ServerFrame::Error { message }));
                }
            },
            _ = sleep_until(next_step) => {
                match core.tick() {
                    Ok(events) => publish(&tx, events),
                    Err(message) => {
                        let _ = tx.send(frame(&ServerFrame::Error { message }));
                    }
                }
                next_step += Duration::from_secs_f64(POLICY_DT / core.time_scale);
                let now = Instant::now();
                if next_step + Duration::from_millis(100) < now {
                    // fell behind (e.g. after a stall): don't try to catch up
                    next_step = now;
                }
            }
            _ = sleep_until(next_tel) => {
                let _ = tx.send(frame(&ServerFrame::Telemetry(core.telemetry())));
                next_tel += tel_period;
                let now = Instant::now();
                if next_tel < now {
                    next_tel = now + tel_period;
                }
            }
        }
    }
}

async fn ws_handler(ws: WebSocketUpgrade, State(st): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client(socket, st))
}

async fn client(socket: WebSocket, st: AppState) {
    let (mut sink, mut stream) = socket.split();
    let mut sub = st.frames.subscribe();
    if sink.send(Message::Text(st.hello.to_string().into())).await.is_err() {
        return;
    }
    let (reply_tx, mut reply_rx) = mpsc::channel::<Arc<str>>(16);
    loop {
        tokio::select! {
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => match decode_message(&text) {
                    Ok(msg) => {
                        if st.inbound.send(Inbound { msg, reply: reply_tx.clone() }).await.is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let f = encode_frame(&ServerFrame::Error { message: e.to_string() });
                        if sink.send(Message::Text(f.into())).await.is_err() {
                            break;
                        }
                    }
                },
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
            out = sub.recv() => match out {
                Ok(f) => {
                    if sink.send(Message::Text(f.to_string().into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::debug!(dropped = n, "slow client lost frames");
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            Some(f) = reply_rx.recv() => {
                if sink.send(Message::Text(f.to_string().into())).await.is_err() {
                    break;
                }
            }
        }
    }
}

/// Starts the sim loop and serves `ws://<addr>/ws` on `listener`.
pub async fn start(core: SimCore, info: ServiceInfo, listener: TcpListener) -> std::io::Result<RunningService> {
    let addr = listener.local_addr()?;
    let (frames, _) = broadcast::channel(info.client_queue.max(1));
    let (inbound_tx, inbound_rx) = mpsc::channel(256);
    let (stop_tx, stop_rx) = watch::channel(false);
    let hello = frame(&ServerFrame::Hello {
        protocol_version: PROTOCOL_VERSION,
        config_hash: info.config_hash.clone(),
        network_hash: info.network_hash.clone(),
        tasks: TaskId::ALL.to_vec(),
        scripts: builtin_scripts().into_keys().collect(),
        policy_hz: 1.0 / POLICY_DT,
        telemetry_hz: info.telemetry_hz,
    });
    let sim = tokio::spawn(sim_loop(core, inbound_rx, frames.clone(), info.telemetry_hz, stop_rx.clone()));
    let state = AppState { inbound: inbound_tx, frames, hello };
    let app = Router::new().route("/ws", get(ws_handler)).with_state(state);
    let mut stop = stop_rx;
    let server = tokio::spawn(async move {
        let shutdown = async move {
            let _ = stop.changed().await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            tracing::error!("server error: {e}");
        }
    });
    Ok(RunningService { addr, stop: stop_tx, server, sim })
}
