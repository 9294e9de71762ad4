//! Cockpit bridge: one simulated walk per websocket at `/session`.
//!
//! The server sends the current Snapshot on connect, one per tick, and one
//! after every text frame that carried an accepted Control. Every text frame
//! holds newline-terminated JSON lines.

use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use vw_core::belt::{NullTransport, Transport};
use vw_core::cockpit::{encode_line, parse_control, CockpitSession};
use vw_core::sim::{Mode, TrialConfig};
use vw_core::Result;

use crate::mqtt::MqttTransport;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub layout: String,
    pub mode: Mode,
    pub tick_ms: u64,
    pub trial: TrialConfig,
    /// Mirror the belt commands to this broker when set.
    pub broker: Option<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        let trial = TrialConfig::default();
        Self {
            layout: "easy-a".into(),
            mode: Mode::OpenPath,
            tick_ms: trial.session.tick_budget_ms,
            trial,
            broker: None,
        }
    }
}

pub fn router(cfg: ServeConfig) -> Router {
    Router::new()
        .route("/session", get(upgrade))
        .with_state(cfg)
}

async fn upgrade(ws: WebSocketUpgrade, State(cfg): State<ServeConfig>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| async move {
        if let Err(e) = run_socket(socket, cfg).await {
            log::warn!("session ended: {e}");
        }
    })
}

fn open_session(cfg: &ServeConfig) -> Result<CockpitSession<Box<dyn Transport + Send>>> {
    let transport: Box<dyn Transport + Send> = match &cfg.broker {
        Some(b) => Box::new(MqttTransport::connect(b, "vw-serve")?),
        None => Box::new(NullTransport),
    };
    CockpitSession::with_transport(&cfg.layout, cfg.mode, cfg.trial.clone(), transport)
}

async fn run_socket(socket: WebSocket, cfg: ServeConfig) -> Result<()> {
    let mut session = open_session(&cfg)?;
    let (mut tx, mut rx) = socket.split();
    let tick = Duration::from_millis(cfg.tick_ms);
    let mut ticker = tokio::time::interval_at(tokio::time::Instant::now() + tick, tick);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut outgoing = Some(session.snapshot());
    loop {
        if let Some(snap) = outgoing.take() {
            if tx
                .send(Message::Text(encode_line(&snap)?.into()))
                .await
                .is_err()
            {
                return Ok(());
            }
        }
        tokio::select! {
            _ = ticker.tick() => outgoing = Some(session.step()),
            msg = rx.next() => match msg {
                Some(Ok(Message::Text(text))) => {
                    let mut applied = false;
                    for line in text.lines().filter(|l| !l.trim().is_empty()) {
                        match parse_control(line).and_then(|c| session.apply(&c)) {
                            Ok(()) => applied = true,
                            Err(e) => log::warn!("control rejected: {e}"),
                        }
                    }
                    if applied {
                        outgoing = Some(session.snapshot());
                    }
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => return Ok(()),
                Some(Ok(_)) => {}
            }
        }
    }
}
