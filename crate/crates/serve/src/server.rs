use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use chordjam::symbolic::MelodyToken;
use tokio::net::TcpListener;

use crate::protocol::Message;
use crate::registry::ModelRegistry;
use crate::session::{Direction, Session, SessionOptions, Transcript, WireEvent};

#[derive(Clone, Debug, PartialEq)]
pub struct ServerConfig {
    pub default_tempo: f64,
    pub default_temperature: f64,
    /// Completed session transcripts are written here as JSON when set.
    pub transcript_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            default_tempo: 120.0,
            default_temperature: 0.0,
            transcript_dir: None,
        }
    }
}

pub struct AppState {
    pub registry: ModelRegistry,
    pub config: ServerConfig,
    sessions: AtomicU64,
}

impl AppState {
    pub fn new(registry: ModelRegistry, config: ServerConfig) -> Arc<Self> {
        Arc::new(AppState {
            registry,
            config,
            sessions: AtomicU64::new(0),
        })
    }
}

/// Protocol state machine for one websocket connection, independent of the
/// transport. Every message in and out is logged in wire order.
pub struct Connection {
    app: Arc<AppState>,
    session: Option<Session>,
    events: Vec<WireEvent>,
}

impl Connection {
    pub fn new(app: Arc<AppState>) -> Self {
        Connection {
            app,
            session: None,
            events: Vec::new(),
        }
    }

    pub fn session(&self) -> Option<&Session> {
        self.session.as_ref()
    }

    /// Handles one text frame; returns the replies in send order and whether
    /// the connection should close after sending them.
    pub fn handle_text(&mut self, text: &str) -> (Vec<Message>, bool) {
        match Message::from_json(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => {
                let reply = Message::error(self.session_id().as_deref(), None, format!("malformed message: {e}"));
                self.log(Direction::Sent, reply.clone(), None);
                (vec![reply], false)
            }
        }
    }

    fn session_id(&self) -> Option<String> {
        self.session.as_ref().map(|s| s.id().to_string())
    }

    fn log(&mut self, direction: Direction, message: Message, accepted: Option<bool>) {
        self.events.push(WireEvent {
            direction,
            message,
            accepted,
        });
    }

    pub fn handle(&mut self, msg: Message) -> (Vec<Message>, bool) {
        let idx = self.events.len();
        self.log(Direction::Received, msg.clone(), None);
        let sid = self.session_id();
        let err = |frame, text: String| Message::error(sid.as_deref(), frame, text);
        let (replies, close) = match (msg, self.session.as_mut()) {
            (Message::Hello { model, tempo, temperature, seed }, None) => (self.open(&model, tempo, temperature, seed), false),
            (Message::Hello { .. }, Some(_)) => (vec![err(None, "session already open on this connection".into())], false),
            (Message::Bye { .. }, _) => {
                let mut out = Vec::new();
                if let Some(s) = &self.session {
                    out.push(Message::Metrics {
                        session: sid.clone(),
                        report: Some(s.metrics()),
                    });
                }
                out.push(Message::Bye {
                    session: sid.clone(),
                    reason: Some("client closed".into()),
                });
                (out, true)
            }
            (_, None) => (vec![err(None, "send hello first".into())], false),
            (Message::MelodyFrame { frame, token, .. }, Some(s)) => {
                let parsed: Result<MelodyToken, _> = token.parse();
                let out = match parsed {
                    Err(e) => vec![err(Some(frame), format!("invalid melody token: {e}"))],
                    Ok(tok) => match s.step(frame, tok) {
                        Ok(next) => {
                            self.events[idx].accepted = Some(true);
                            let mut out = Vec::new();
                            if let Some(c) = next {
                                out.push(Message::ChordFrame {
                                    session: s.id().to_string(),
                                    frame: frame + 1,
                                    token: c.to_string(),
                                });
                            }
                            if s.is_finished() {
                                out.push(Message::Metrics {
                                    session: sid.clone(),
                                    report: Some(s.metrics()),
                                });
                            }
                            out
                        }
                        Err(e) => vec![err(Some(frame), e.to_string())],
                    },
                };
                if self.events[idx].accepted.is_none() {
                    self.events[idx].accepted = Some(false);
                }
                (out, false)
            }
            (Message::Perturb { semitones, .. }, Some(s)) => {
                let r = s.perturb(semitones);
                tracing::info!(session = s.id(), frame = r.frame, semitones, offset = r.offset, "perturbation");
                let ack = Message::Perturb {
                    session: sid.clone(),
                    semitones,
                    frame: Some(r.frame),
                    offset: Some(r.offset),
                };
                (vec![ack], false)
            }
            (Message::Metrics { .. }, Some(s)) => (
                vec![Message::Metrics {
                    session: sid.clone(),
                    report: Some(s.metrics()),
                }],
                false,
            ),
            (other, Some(_)) => {
                let kind = other.to_json();
                (vec![err(None, format!("unexpected message from client: {kind}"))], false)
            }
        };
        for r in &replies {
            self.log(Direction::Sent, r.clone(), None);
        }
        (replies, close)
    }

    fn open(&mut self, model_id: &str, tempo: Option<f64>, temperature: Option<f64>, seed: Option<u64>) -> Vec<Message> {
        let Some(model) = self.app.registry.get(model_id) else {
            let known: Vec<String> = self.app.registry.list().into_iter().map(|m| m.id).collect();
            return vec![Message::error(None, None, format!("unknown model `{model_id}` (available: {})", known.join(", ")))];
        };
        let n = self.app.sessions.fetch_add(1, Ordering::Relaxed) + 1;
        let opts = SessionOptions {
            tempo: tempo.unwrap_or(self.app.config.default_tempo),
            temperature: temperature.unwrap_or(self.app.config.default_temperature),
            seed: seed.unwrap_or(n),
        };
        let id = format!("session-{n}");
        match Session::new(id.clone(), model_id.to_string(), model, opts) {
            Ok((s, first)) => {
                let created = Message::SessionCreated {
                    session: id.clone(),
                    model: model_id.to_string(),
                    tempo: opts.tempo,
                    temperature: opts.temperature,
                    seed: opts.seed,
                    frame_ms: opts.frame_ms(),
                    max_frames: s.max_frames(),
                };
                tracing::info!(session = %id, model = model_id, tempo = opts.tempo, temperature = opts.temperature, "session created");
                self.session = Some(s);
                vec![
                    created,
                    Message::ChordFrame {
                        session: id,
                        frame: 1,
                        token: first.to_string(),
                    },
                ]
            }
            Err(e) => vec![Message::error(None, None, e.to_string())],
        }
    }

    /// Transcript including the wire log, if a session was opened.
    pub fn transcript(&self) -> Option<Transcript> {
        self.session.as_ref().map(|s| Transcript {
            events: self.events.clone(),
            ..s.transcript()
        })
    }

    /// Writes the transcript when a transcript directory is configured.
    pub fn finish(&self) {
        let (Some(dir), Some(t)) = (&self.app.config.transcript_dir, self.transcript()) else {
            return;
        };
        let path = dir.join(format!("{}.json", t.session));
        let written = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, serde_json::to_vec_pretty(&t).expect("transcript serializes")));
        if let Err(e) = written {
            tracing::warn!(path = %path.display(), error = %e, "could not write transcript");
        }
    }
}

async fn models(State(app): State<Arc<AppState>>) -> impl IntoResponse {
    Json(serde_json::json!({
        "models": app.registry.list(),
        "default_tempo": app.config.default_tempo,
        "default_temperature": app.config.default_temperature,
    }))
}

async fn ws(upgrade: WebSocketUpgrade, State(app): State<Arc<AppState>>) -> impl IntoResponse {
    upgrade.on_upgrade(move |socket| run_socket(socket, app))
}

/// Replies to each message are fully written before the next message is
/// read, so chord frame `t` is always on the wire before melody frame `t`
/// is consumed.
async fn run_socket(mut socket: WebSocket, app: Arc<AppState>) {
    let mut conn = Connection::new(app);
    while let Some(Ok(msg)) = socket.recv().await {
        let (replies, close) = match msg {
            WsMessage::Text(t) => conn.handle_text(t.as_str()),
            WsMessage::Binary(_) => conn.handle_text("binary frames are not supported"),
            WsMessage::Close(_) => break,
            _ => continue,
        };
        let mut broken = false;
        for r in replies {
            if socket.send(WsMessage::Text(r.to_json().into())).await.is_err() {
                broken = true;
                break;
            }
        }
        if close || broken {
            let _ = socket.send(WsMessage::Close(None)).await;
            break;
        }
    }
    conn.finish();
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new().route("/models", get(models)).route("/ws", get(ws)).with_state(app)
}

pub async fn serve(listener: TcpListener, app: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(app)).await
}
