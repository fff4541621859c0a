//! One simulated participant on the realtime channel.

use std::time::{Duration, Instant};

use bm_core::protocol::{decode, encode, redact_images, ClientView, Envelope, Message, Ping};
use futures_util::stream::SplitSink;
use futures_util::{SinkExt, StreamExt};
use serde::Serialize;
use serde_json::Value;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use crate::SimError;

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

/// A received frame as it appears in the transcript.
#[derive(Debug, Clone, Serialize)]
pub struct Received {
    pub seq: u64,
    /// Milliseconds since the run started.
    pub t_ms: f64,
    #[serde(rename = "type")]
    pub kind: String,
    /// The frame with image payloads replaced by placeholders.
    pub frame: Value,
}

enum Incoming {
    Frame(Envelope, Received),
    Broken(String),
    Closed,
}

pub struct Client {
    pub name: String,
    pub view: Option<ClientView>,
    pub log: Vec<Received>,
    pub closed: bool,
    sink: SplitSink<Ws, WsMessage>,
    inbox: mpsc::UnboundedReceiver<Incoming>,
    seq: u64,
    nonce: u64,
    timeout: Duration,
}

impl Client {
    pub async fn connect(url: &str, name: &str, started: Instant, timeout: Duration) -> Result<Self, SimError> {
        let (ws, _) = tokio::time::timeout(timeout, tokio_tungstenite::connect_async(url))
            .await
            .map_err(|_| SimError::Timeout(format!("{name}: connecting")))?
            .map_err(|e| SimError::Connect(format!("{name}: {e}")))?;
        let (sink, mut stream) = ws.split();
        let (tx, inbox) = mpsc::unbounded_channel();
        tokio::spawn(async move {
            let mut last_seq = 0;
            while let Some(frame) = stream.next().await {
                let bytes = match frame {
                    Ok(WsMessage::Text(t)) => t.as_bytes().to_vec(),
                    Ok(WsMessage::Binary(b)) => b.to_vec(),
                    Ok(WsMessage::Close(_)) => break,
                    Ok(_) => continue,
                    Err(e) => {
                        let _ = tx.send(Incoming::Broken(e.to_string()));
                        return;
                    }
                };
                let t_ms = started.elapsed().as_secs_f64() * 1e3;
                let item = match decode(&bytes) {
                    Ok(env) if env.seq > last_seq => {
                        last_seq = env.seq;
                        let mut frame: Value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
                        redact_images(&mut frame);
                        let received = Received {
                            seq: env.seq,
                            t_ms,
                            kind: env.message.type_name().to_owned(),
                            frame,
                        };
                        Incoming::Frame(env, received)
                    }
                    Ok(env) => Incoming::Broken(format!("server seq went from {last_seq} to {}", env.seq)),
                    Err(e) => Incoming::Broken(format!("undecodable server frame: {e}")),
                };
                if tx.send(item).is_err() {
                    return;
                }
            }
            let _ = tx.send(Incoming::Closed);
        });
        Ok(Self {
            name: name.to_owned(),
            view: None,
            log: Vec::new(),
            closed: false,
            sink,
            inbox,
            seq: 0,
            nonce: 0,
            timeout,
        })
    }

    /// Sends a message and returns its sequence number.
    pub async fn send(&mut self, message: Message) -> Result<u64, SimError> {
        self.seq += 1;
        let bytes = encode(&Envelope::new(self.seq, message)).map_err(|e| SimError::Protocol(e.to_string()))?;
        let text = String::from_utf8(bytes).expect("encoded frames are JSON text");
        self.sink
            .send(WsMessage::Text(text.into()))
            .await
            .map_err(|e| SimError::Connect(format!("{}: {e}", self.name)))?;
        Ok(self.seq)
    }

    /// Sends raw text as-is, without an envelope or a sequence number.
    pub async fn send_raw(&mut self, text: String) -> Result<(), SimError> {
        self.sink
            .send(WsMessage::Text(text.into()))
            .await
            .map_err(|e| SimError::Connect(format!("{}: {e}", self.name)))
    }

    /// Next server message, or `None` once the connection is closed.
    pub async fn recv(&mut self) -> Result<Option<Message>, SimError> {
        if self.closed {
            return Ok(None);
        }
        let item = tokio::time::timeout(self.timeout, self.inbox.recv())
            .await
            .map_err(|_| SimError::Timeout(format!("{}: waiting for the server", self.name)))?;
        match item {
            Some(Incoming::Frame(env, received)) => {
                self.log.push(received);
                if let Message::Joined(j) = &env.message {
                    self.view = Some(ClientView::from_joined(j));
                } else if let Some(view) = self.view.as_mut() {
                    view.apply(&env.message);
                }
                Ok(Some(env.message))
            }
            Some(Incoming::Broken(why)) => {
                self.closed = true;
                Err(SimError::Protocol(format!("{}: {why}", self.name)))
            }
            Some(Incoming::Closed) | None => {
                self.closed = true;
                Ok(None)
            }
        }
    }

    /// Receives until `pick` returns a value; messages before it are applied
    /// and logged as usual.
    pub async fn until<T>(&mut self, what: &str, mut pick: impl FnMut(&Message) -> Option<T>) -> Result<T, SimError> {
        loop {
            match self.recv().await? {
                Some(m) => {
                    if let Some(found) = pick(&m) {
                        return Ok(found);
                    }
                }
                None => return Err(SimError::Protocol(format!("{}: closed while waiting for {what}", self.name))),
            }
        }
    }

    /// Round-trips a ping. Afterwards every message the server had queued
    /// for this connection before the ping has been received.
    pub async fn barrier(&mut self) -> Result<(), SimError> {
        self.barrier_watching(|_| {}).await
    }

    /// [`Client::barrier`], showing every message received on the way to
    /// `watch`.
    pub async fn barrier_watching(&mut self, mut watch: impl FnMut(&Message)) -> Result<(), SimError> {
        if self.closed || self.ended() {
            return Ok(());
        }
        self.nonce += 1;
        let nonce = self.nonce;
        self.send(Message::Ping(Ping { nonce })).await?;
        self.until("pong", |m| {
            watch(m);
            matches!(m, Message::Pong(p) if p.nonce == nonce).then_some(())
        })
        .await
    }

    pub fn ended(&self) -> bool {
        self.view.as_ref().is_some_and(|v| v.ended)
    }

    /// Drains what is already queued without waiting.
    pub fn drain_ready(&mut self) {
        while let Ok(item) = self.inbox.try_recv() {
            match item {
                Incoming::Frame(env, received) => {
                    self.log.push(received);
                    if let Some(view) = self.view.as_mut() {
                        view.apply(&env.message);
                    }
                }
                Incoming::Broken(_) | Incoming::Closed => self.closed = true,
            }
        }
    }

    pub async fn close(&mut self) {
        let _ = self.sink.send(WsMessage::Close(None)).await;
        let _ = self.sink.close().await;
        // let the server's farewell close frame arrive
        while !self.closed {
            match tokio::time::timeout(Duration::from_millis(500), self.inbox.recv()).await {
                Ok(Some(Incoming::Frame(env, received))) => {
                    self.log.push(received);
                    if let Some(view) = self.view.as_mut() {
                        view.apply(&env.message);
                    }
                }
                Ok(Some(_)) | Ok(None) | Err(_) => self.closed = true,
            }
        }
    }
}
