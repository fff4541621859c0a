//! One realtime connection: handshake, per-connection sequencing, and the
//! bridge between session events and outbound frames.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::ws::{Message as WsMessage, WebSocket};
use bm_core::protocol::{
    self, encode, Bye, ByeReason, Control, ErrorCode, Envelope, FrameSubmit, Hello,
    InboundCheck, JoinInfo, Joined, Message, ProtocolError, Role, ScopeKind, PROTOCOL_VERSION,
};
use bm_core::session::{Audience, EventSink, PlayerId, Scope, Session, SessionEvent, SubscriberId};
use futures_util::{SinkExt, StreamExt};
use tokio::sync::{mpsc, Notify};

use crate::app::AppState;

/// Outbound frames a connection may have queued before it counts as stalled
/// and is dropped.
const OUTBOUND_QUEUE: usize = 1024;

enum Outbound {
    Send(Message),
    Close,
}

/// Per-player frame budget: `rate` tokens per second, bursts up to `rate`.
struct TokenBucket {
    rate: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(rate: f64) -> Self {
        Self {
            rate,
            tokens: rate,
            last: Instant::now(),
        }
    }

    fn take(&mut self) -> bool {
        let now = Instant::now();
        let elapsed = now.duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + elapsed * self.rate).min(self.rate.max(1.0));
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

/// Turns session events into frames for one connection.
struct ConnSink {
    tx: mpsc::Sender<Outbound>,
    stalled: Arc<Notify>,
    audience: Audience,
    session_id: String,
    base_url: String,
    /// Handed out in `joined`; teachers only.
    next_credential: Option<String>,
    /// Handed out in the final `bye`; set when a replacement session exists.
    bye_credential: Arc<Mutex<Option<String>>>,
    shutting_down: Arc<AtomicBool>,
}

impl ConnSink {
    fn message(&self, event: SessionEvent) -> Option<Message> {
        match event {
            SessionEvent::Welcome { player_id, snapshot } => {
                let snapshot = protocol::snapshot(&snapshot);
                let join_url = snapshot
                    .join_token
                    .as_ref()
                    .map(|t| crate::join_url(&self.base_url, t));
                Some(Message::Joined(Joined {
                    protocol_version: PROTOCOL_VERSION.to_owned(),
                    role: match self.audience {
                        Audience::Teacher => Role::Teacher,
                        Audience::Student(_) => Role::Student,
                    },
                    session_id: self.session_id.clone(),
                    player_id: player_id.map(|p| p.0),
                    snapshot,
                    join_url,
                    next_teacher_credential: self.next_credential.clone(),
                }))
            }
            SessionEvent::Ended => Some(Message::Bye(Bye {
                reason: if self.shutting_down.load(Ordering::SeqCst) {
                    ByeReason::ServerShutdown
                } else {
                    ByeReason::SessionEnded
                },
                next_teacher_credential: self.bye_credential.lock().unwrap_or_else(|e| e.into_inner()).take(),
            })),
            other => protocol::event_message(&other, &self.audience),
        }
    }
}

impl EventSink for ConnSink {
    fn deliver(&self, event: SessionEvent) -> bool {
        let Some(message) = self.message(event) else {
            return true;
        };
        match self.tx.try_send(Outbound::Send(message)) {
            Ok(()) => true,
            Err(mpsc::error::TrySendError::Full(_)) => {
                log::warn!("dropping a connection that stopped reading");
                self.stalled.notify_one();
                false
            }
            Err(mpsc::error::TrySendError::Closed(_)) => false,
        }
    }
}

enum Who {
    Teacher { bye_credential: Arc<Mutex<Option<String>>> },
    Student(PlayerId),
}

struct Attached {
    session: Arc<Session>,
    subscriber: SubscriberId,
    who: Who,
}

enum Flow {
    Continue,
    Close,
}

struct Connection {
    state: Arc<AppState>,
    tx: mpsc::Sender<Outbound>,
    stalled: Arc<Notify>,
    check: InboundCheck,
    attached: Option<Attached>,
    bucket: TokenBucket,
}

/// Serves one websocket until either side closes it.
pub(crate) async fn serve(socket: WebSocket, state: Arc<AppState>) {
    let _guard = state.track_connection();
    let (ws_tx, mut ws_rx) = socket.split();
    let (tx, rx) = mpsc::channel(OUTBOUND_QUEUE);
    let mut writer = tokio::spawn(write_loop(ws_tx, rx));
    let stalled = Arc::new(Notify::new());
    let mut conn = Connection {
        bucket: TokenBucket::new(state.frame_rate()),
        state,
        tx,
        stalled: stalled.clone(),
        check: InboundCheck::default(),
        attached: None,
    };

    let mut writer_done = false;
    loop {
        let frame = tokio::select! {
            frame = ws_rx.next() => frame,
            _ = &mut writer => {
                writer_done = true;
                break;
            }
            _ = stalled.notified() => break,
        };
        let bytes = match frame {
            Some(Ok(WsMessage::Text(text))) => text.as_bytes().to_vec(),
            Some(Ok(WsMessage::Binary(bytes))) => bytes.to_vec(),
            Some(Ok(WsMessage::Ping(_) | WsMessage::Pong(_))) => continue,
            Some(Ok(WsMessage::Close(_)) | Err(_)) | None => break,
        };
        if let Flow::Close = conn.on_frame(&bytes).await {
            break;
        }
    }
    conn.detach();
    let _ = conn.tx.try_send(Outbound::Close);
    drop(conn);
    if !writer_done {
        let _ = writer.await;
    }
}

async fn write_loop<S>(mut ws: S, mut rx: mpsc::Receiver<Outbound>)
where
    S: futures_util::Sink<WsMessage> + Unpin,
{
    let mut seq = 0u64;
    while let Some(out) = rx.recv().await {
        let message = match out {
            Outbound::Send(m) => m,
            Outbound::Close => break,
        };
        let terminal = matches!(message, Message::Bye(_));
        seq += 1;
        let bytes = match encode(&Envelope::new(seq, message)) {
            Ok(b) => b,
            Err(e) => {
                log::error!("cannot encode outbound frame: {e}");
                continue;
            }
        };
        let text = String::from_utf8(bytes).expect("encoded frames are JSON text");
        if ws.send(WsMessage::Text(text.into())).await.is_err() {
            return;
        }
        if terminal {
            break;
        }
    }
    let _ = ws.send(WsMessage::Close(None)).await;
    let _ = ws.close().await;
}

/// `seq` of a frame that failed validation, when it has a readable one.
fn raw_seq(bytes: &[u8]) -> Option<u64> {
    serde_json::from_slice::<serde_json::Value>(bytes)
        .ok()?
        .get("seq")?
        .as_u64()
}

impl Connection {
    fn send(&self, message: Message) {
        if self.tx.try_send(Outbound::Send(message)).is_err() {
            self.stalled.notify_one();
        }
    }

    fn send_error(&self, error: &ProtocolError, in_reply_to: Option<u64>) {
        self.send(error.notice(in_reply_to));
    }

    fn detach(&mut self) {
        if let Some(a) = self.attached.take() {
            a.session.detach(a.subscriber);
        }
    }

    async fn on_frame(&mut self, bytes: &[u8]) -> Flow {
        let envelope = match self.check.accept(bytes) {
            Ok(env) => env,
            Err(e) => {
                log::debug!("rejected inbound frame: {}", e.code);
                self.send_error(&e, raw_seq(bytes));
                if e.code == ErrorCode::Version {
                    self.send(Message::Bye(Bye {
                        reason: ByeReason::ProtocolError,
                        next_teacher_credential: None,
                    }));
                }
                return Flow::Continue;
            }
        };
        let seq = envelope.seq;
        match envelope.message {
            Message::Hello(hello) => match self.hello(hello) {
                Ok(()) => Flow::Continue,
                Err(e) => {
                    log::info!("handshake refused: {}", e.code);
                    self.send_error(&e, Some(seq));
                    let _ = self.tx.try_send(Outbound::Close);
                    Flow::Close
                }
            },
            Message::FrameSubmit(frame) => {
                if let Err(e) = self.frame(frame).await {
                    self.send_error(&e, Some(seq));
                }
                Flow::Continue
            }
            Message::Control(control) => {
                if let Err(e) = self.control(control) {
                    self.send_error(&e, Some(seq));
                }
                Flow::Continue
            }
            Message::Ping(ping) => {
                self.send(Message::Pong(ping));
                Flow::Continue
            }
            other => {
                // the inbound check only lets client messages through
                let e = ProtocolError::new(ErrorCode::Sequence, format!("{} is a server message", other.type_name()));
                self.send_error(&e, Some(seq));
                Flow::Continue
            }
        }
    }

    fn sink(&self, audience: Audience, session: &Session, next_credential: Option<String>) -> (ConnSink, Arc<Mutex<Option<String>>>) {
        let bye_credential = Arc::new(Mutex::new(None));
        let sink = ConnSink {
            tx: self.tx.clone(),
            stalled: self.stalled.clone(),
            audience,
            session_id: session.id().0.clone(),
            base_url: self.state.base_url().to_owned(),
            next_credential,
            bye_credential: bye_credential.clone(),
            shutting_down: self.state.shutdown_flag(),
        };
        (sink, bye_credential)
    }

    fn hello(&mut self, hello: Hello) -> Result<(), ProtocolError> {
        match hello.role {
            Role::Student => {
                let token = hello.join_token.unwrap_or_default();
                let name = hello.display_name.unwrap_or_default();
                let avatar = hello
                    .avatar
                    .map(|bytes| image::load_from_memory(&bytes).map(|img| img.to_rgb8()))
                    .transpose()
                    .map_err(|e| ProtocolError::new(ErrorCode::BadFrame, format!("avatar: {e}")))?;
                let (session, player) = self.state.registry().join(&token, &name, avatar).map_err(|e| ProtocolError::from(&e))?;
                let (sink, _) = self.sink(Audience::Student(player.clone()), &session, None);
                let subscriber = match session.attach(Audience::Student(player.clone()), Arc::new(sink)) {
                    Ok(s) => s,
                    Err(e) => return Err(ProtocolError::from(&e)),
                };
                log::info!("student joined ({} players)", session.player_count().unwrap_or(0));
                self.attached = Some(Attached {
                    session,
                    subscriber,
                    who: Who::Student(player),
                });
            }
            Role::Teacher => {
                let key = hello.teacher_credential.unwrap_or_default();
                let session = self.state.registry().by_teacher_key(&key).map_err(|e| ProtocolError::from(&e))?;
                let next = session.rotate_teacher_key(&key).map_err(|e| ProtocolError::from(&e))?;
                let (sink, bye_credential) = self.sink(Audience::Teacher, &session, Some(next));
                let subscriber = session
                    .attach(Audience::Teacher, Arc::new(sink))
                    .map_err(|e| ProtocolError::from(&e))?;
                log::info!("teacher connected");
                self.attached = Some(Attached {
                    session,
                    subscriber,
                    who: Who::Teacher { bye_credential },
                });
            }
        }
        Ok(())
    }

    async fn frame(&mut self, frame: FrameSubmit) -> Result<(), ProtocolError> {
        let Some(Attached {
            session,
            who: Who::Student(player),
            ..
        }) = &self.attached
        else {
            return Err(ProtocolError::new(ErrorCode::Sequence, "frame_submit is a student message"));
        };
        if !self.bucket.take() {
            log::debug!("frame rate limit hit");
            return Err(ProtocolError::new(ErrorCode::RateLimited, "too many frames; slow down"));
        }
        let (session, player) = (session.clone(), player.clone());
        let FrameSubmit { image, client_ts } = frame;
        let outcome = tokio::task::spawn_blocking(move || session.submit_encoded(&player, &image))
            .await
            .map_err(|e| ProtocolError::new(ErrorCode::BadFrame, format!("inference task failed: {e}")))?
            .map_err(|e| ProtocolError::from(&e))?;
        self.send(Message::Score(protocol::score(&outcome, Some(client_ts))));
        Ok(())
    }

    fn control(&mut self, control: Control) -> Result<(), ProtocolError> {
        let Some(Attached {
            session,
            who: Who::Teacher { bye_credential },
            ..
        }) = &self.attached
        else {
            return Err(ProtocolError::new(ErrorCode::NotTeacher, "only the teacher may send control"));
        };
        let fail = |e: bm_core::session::SessionError| ProtocolError::from(&e);
        match control {
            Control::SetChallenge {
                label_index,
                scope,
                player_ids,
            } => {
                let scope = match scope {
                    ScopeKind::All => Scope::All,
                    ScopeKind::Players => Scope::Players(player_ids.unwrap_or_default().into_iter().map(PlayerId).collect()),
                };
                session.set_challenge(scope, label_index).map_err(fail)?;
            }
            Control::SetPause { paused } => session.set_pause(paused).map_err(fail)?,
            Control::SetReveal { reveal } => session.set_reveal(reveal).map_err(fail)?,
            Control::SetHeatmap { enabled } => session.set_heatmap(enabled).map_err(fail)?,
            Control::SetDatasetUnlock { enabled } => session.set_dataset_unlock(enabled).map_err(fail)?,
            Control::RegenerateToken => {
                let token = self.state.registry().regenerate_token(session.id()).map_err(fail)?;
                log::info!("join token regenerated");
                self.send(Message::JoinInfo(JoinInfo {
                    join_url: crate::join_url(self.state.base_url(), &token),
                    join_token: token,
                }));
            }
            Control::EndSession => {
                match self.state.start_session() {
                    Ok(next) => {
                        *bye_credential.lock().unwrap_or_else(|e| e.into_inner()) = Some(next.teacher_key.clone());
                        self.state.announce(&next);
                    }
                    Err(e) => log::warn!("no replacement session: {e}"),
                }
                let id = session.id().clone();
                self.state.registry().end_session(&id).map_err(fail)?;
                // purge already dropped our subscription
                self.attached = None;
            }
        }
        Ok(())
    }
}

