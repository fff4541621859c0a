//! Scripted classroom for the Breakable Machine server.
//!
//! [`run`] connects a teacher and any number of students over the realtime
//! protocol, drives them through a [`Scenario`], and returns a
//! [`Transcript`] of every message each client received. Steps synchronise
//! with ping barriers rather than sleeps, so a script's outcome does not
//! depend on timing.

mod client;
pub mod scenario;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use bm_core::protocol::{
    Control, Hello, Joined, Message, Role, ScopeKind, WireSnapshot, FrameSubmit, PROTOCOL_VERSION,
};
use futures_util::future::join_all;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

pub use client::{Client, Received};
pub use scenario::{parse, Action, Scenario, ScenarioError, Step, Target, TeacherOp};

/// Environment variable holding the teacher credential.
pub const CREDENTIAL_ENV: &str = "BM_TEACHER_CREDENTIAL";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot connect: {0}")]
    Connect(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("server refused with {code}: {detail}")]
    Rejected { code: String, detail: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Expectation(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// `ws://host:port/rt`
    pub realtime_url: String,
    pub teacher_credential: Option<String>,
    /// Longest wait for any single server reply.
    pub timeout: Duration,
}

impl SimConfig {
    /// Accepts the server's base URL or the printed teacher URL; a
    /// `#teacher=<credential>` fragment supplies the credential.
    pub fn from_server_url(server: &str) -> Result<Self, SimError> {
        let url = url::Url::parse(server).map_err(|e| SimError::Config(format!("bad server URL {server:?}: {e}")))?;
        let scheme = match url.scheme() {
            "http" | "ws" => "ws",
            "https" | "wss" => "wss",
            other => return Err(SimError::Config(format!("unsupported URL scheme {other:?}"))),
        };
        let host = url
            .host_str()
            .ok_or_else(|| SimError::Config(format!("server URL {server:?} has no host")))?;
        let port = url.port_or_known_default().unwrap_or(80);
        let teacher_credential = url
            .fragment()
            .and_then(|f| f.strip_prefix("teacher="))
            .map(str::to_owned);
        Ok(Self {
            realtime_url: format!("{scheme}://{host}:{port}/rt"),
            teacher_credential,
            timeout: Duration::from_secs(10),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub line: usize,
    pub step: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub results: Vec<Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub line: usize,
    pub converged: bool,
    pub mismatches: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientRecord {
    pub name: String,
    pub role: Role,
    pub player_id: Option<String>,
    pub ended: bool,
    pub last_type: Option<String>,
    pub messages: Vec<Received>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoardEntry {
    pub rank: usize,
    pub player_id: String,
    pub display_name: String,
    pub confidence: Option<f32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MergedEntry {
    pub t_ms: f64,
    pub client: String,
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Transcript {
    pub server: String,
    /// Every step ran and met its expectation.
    pub ok: bool,
    pub steps: Vec<StepRecord>,
    pub checks: Vec<CheckRecord>,
    pub clients: Vec<ClientRecord>,
    /// The teacher's last leaderboard.
    pub final_board: Option<Vec<BoardEntry>>,
    /// All received frames ordered by arrival, then client, then seq.
    pub merged: Vec<MergedEntry>,
}

struct Runner {
    config: SimConfig,
    started: Instant,
    credential: Option<String>,
    join_token: Option<String>,
    labels: Vec<String>,
    teacher: Option<Client>,
    students: Vec<Client>,
    checks: Vec<CheckRecord>,
}

fn refused(message: &Message, seq: u64) -> Option<(String, String)> {
    match message {
        Message::Error(e) if e.in_reply_to == Some(seq) => Some((e.code.as_str().to_owned(), e.detail.clone())),
        _ => None,
    }
}

async fn handshake(client: &mut Client, hello: Hello) -> Result<Joined, SimError> {
    let seq = client.send(Message::Hello(hello)).await?;
    let outcome = client
        .until("joined", |m| match m {
            Message::Joined(j) => Some(Ok(j.clone())),
            other => refused(other, seq).map(Err),
        })
        .await?;
    outcome.map_err(|(code, detail)| SimError::Rejected { code, detail })
}

fn check_expectation(expect: &Option<String>, outcome: Result<(), (String, String)>) -> Result<(), SimError> {
    match (expect, outcome) {
        (None, Ok(())) => Ok(()),
        (None, Err((code, detail))) => Err(SimError::Rejected { code, detail }),
        (Some(want), Ok(())) => Err(SimError::Expectation(format!("expected {want}, the server accepted"))),
        (Some(want), Err((code, _))) if &code == want => Ok(()),
        (Some(want), Err((code, detail))) => Err(SimError::Expectation(format!("expected {want}, got {code}: {detail}"))),
    }
}

impl Runner {
    fn teacher(&mut self) -> Result<&mut Client, SimError> {
        self.teacher
            .as_mut()
            .ok_or_else(|| SimError::Config("no teacher connected; add a `teacher` step first".into()))
    }

    fn player_id(&self, name: &str) -> Result<String, SimError> {
        self.students
            .iter()
            .find(|c| c.name == name)
            .and_then(|c| c.view.as_ref()?.player_id.clone())
            .ok_or_else(|| SimError::Config(format!("no student named {name:?}")))
    }

    fn label_index(&self, label: &str) -> Result<usize, SimError> {
        if let Ok(i) = label.parse() {
            return Ok(i);
        }
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| SimError::Config(format!("the model has no label {label:?}")))
    }

    fn live_students(&mut self) -> impl Iterator<Item = &mut Client> {
        self.students.iter_mut().filter(|c| !c.closed && !c.ended())
    }

    async fn connect_teacher(&self, name: &str) -> Result<(Client, Joined), SimError> {
        let credential = self.credential.clone().ok_or_else(|| {
            SimError::Config(format!("no teacher credential: pass the teacher URL or set {CREDENTIAL_ENV}"))
        })?;
        let mut client = Client::connect(&self.config.realtime_url, name, self.started, self.config.timeout).await?;
        let joined = handshake(
            &mut client,
            Hello {
                protocol_version: PROTOCOL_VERSION.into(),
                role: Role::Teacher,
                join_token: None,
                teacher_credential: Some(credential),
                display_name: None,
                avatar: None,
            },
        )
        .await?;
        Ok((client, joined))
    }

    async fn step(&mut self, step: &Step) -> Result<Vec<Value>, SimError> {
        match &step.action {
            Action::Teacher => {
                let (client, joined) = self.connect_teacher("teacher").await?;
                self.credential = joined.next_teacher_credential.clone();
                self.join_token = joined.snapshot.join_token.clone();
                self.labels = joined.snapshot.labels.clone();
                self.teacher = Some(client);
                Ok(vec![json!({"session_id": joined.session_id, "labels": self.labels})])
            }
            Action::Join { names, avatar } => {
                let token = self
                    .join_token
                    .clone()
                    .ok_or_else(|| SimError::Config("no join token yet; connect the teacher first".into()))?;
                let avatar = match avatar {
                    Some(p) => Some(std::fs::read(p).map_err(|source| SimError::Io { path: p.clone(), source })?),
                    None => None,
                };
                let (url, started, timeout) = (&self.config.realtime_url, self.started, self.config.timeout);
                let joins = names.iter().map(|name| {
                    let (token, avatar) = (token.clone(), avatar.clone());
                    async move {
                        let mut client = Client::connect(url, name, started, timeout).await?;
                        let joined = handshake(
                            &mut client,
                            Hello {
                                protocol_version: PROTOCOL_VERSION.into(),
                                role: Role::Student,
                                join_token: Some(token),
                                teacher_credential: None,
                                display_name: Some(name.clone()),
                                avatar,
                            },
                        )
                        .await?;
                        Ok::<_, SimError>((client, joined))
                    }
                });
                let mut results = Vec::new();
                for outcome in join_all(joins).await {
                    let (client, joined) = outcome?;
                    results.push(json!({"name": client.name, "player_id": joined.player_id}));
                    self.students.push(client);
                }
                Ok(results)
            }
            Action::Submit { target, image, expect } => {
                let bytes = std::fs::read(image).map_err(|source| SimError::Io {
                    path: image.clone(),
                    source,
                })?;
                let started = self.started;
                let clients: Vec<&mut Client> = match target {
                    Target::AllStudents => self.live_students().collect(),
                    Target::Player(name) => {
                        let c: Vec<&mut Client> = self.students.iter_mut().filter(|c| &c.name == name).collect();
                        if c.is_empty() {
                            return Err(SimError::Config(format!("no student named {name:?}")));
                        }
                        c
                    }
                };
                let submits = clients.into_iter().map(|client| {
                    let image = bytes.clone();
                    async move {
                        let client_ts = started.elapsed().as_millis() as u64;
                        let seq = client.send(Message::FrameSubmit(FrameSubmit { image, client_ts })).await?;
                        let reply = client
                            .until("score", |m| match m {
                                Message::Score(s) => Some(Ok(s.clone())),
                                other => refused(other, seq).map(Err),
                            })
                            .await?;
                        let record = match &reply {
                            Ok(s) => json!({
                                "player": client.name,
                                "confidence": s.confidence,
                                "is_new_best": s.is_new_best,
                                "epoch": s.epoch,
                                "label": s.challenge.label_name,
                            }),
                            Err((code, _)) => json!({"player": client.name, "error": code}),
                        };
                        check_expectation(expect, reply.map(|_| ()))?;
                        Ok::<_, SimError>(record)
                    }
                });
                join_all(submits).await.into_iter().collect()
            }
            Action::Teach { op, expect } => self.teach(op, expect).await,
            Action::Settle => {
                self.settle().await?;
                Ok(Vec::new())
            }
            Action::Check => {
                self.settle().await?;
                let record = self.check(step.line).await?;
                let ok = record.converged;
                let detail = record.mismatches.join("; ");
                self.checks.push(record);
                if ok {
                    Ok(Vec::new())
                } else {
                    Err(SimError::Expectation(format!("views diverged: {detail}")))
                }
            }
            Action::Wait(d) => {
                tokio::time::sleep(*d).await;
                Ok(Vec::new())
            }
            Action::Disconnect(name) => {
                let client = self
                    .students
                    .iter_mut()
                    .find(|c| &c.name == name)
                    .ok_or_else(|| SimError::Config(format!("no student named {name:?}")))?;
                client.close().await;
                Ok(Vec::new())
            }
        }
    }

    async fn teach(&mut self, op: &TeacherOp, expect: &Option<String>) -> Result<Vec<Value>, SimError> {
        let control = match op {
            TeacherOp::Challenge { label, players } => {
                let label_index = self.label_index(label)?;
                if players.is_empty() {
                    Control::SetChallenge {
                        label_index,
                        scope: ScopeKind::All,
                        player_ids: None,
                    }
                } else {
                    let ids = players.iter().map(|p| self.player_id(p)).collect::<Result<_, _>>()?;
                    Control::SetChallenge {
                        label_index,
                        scope: ScopeKind::Players,
                        player_ids: Some(ids),
                    }
                }
            }
            TeacherOp::Pause(paused) => Control::SetPause { paused: *paused },
            TeacherOp::Reveal(reveal) => Control::SetReveal { reveal: *reveal },
            TeacherOp::Heatmap(enabled) => Control::SetHeatmap { enabled: *enabled },
            TeacherOp::Dataset(enabled) => Control::SetDatasetUnlock { enabled: *enabled },
            TeacherOp::Regenerate => Control::RegenerateToken,
            TeacherOp::End => Control::EndSession,
        };
        let teacher = self.teacher()?;
        let seq = teacher.send(Message::Control(control)).await?;
        match op {
            TeacherOp::End => {
                let outcome = teacher
                    .until("bye", |m| match m {
                        Message::Bye(b) => Some(Ok(b.clone())),
                        other => refused(other, seq).map(Err),
                    })
                    .await?;
                let bye = outcome.as_ref().ok().cloned();
                check_expectation(expect, outcome.map(|_| ()))?;
                let Some(bye) = bye else { return Ok(Vec::new()) };
                self.credential = bye.next_teacher_credential.clone();
                let byes = self.live_students().map(|c| c.until("bye", |m| matches!(m, Message::Bye(_)).then_some(())));
                for r in join_all(byes).await {
                    r?;
                }
                Ok(vec![json!({"next_session": bye.next_teacher_credential.is_some()})])
            }
            TeacherOp::Regenerate => {
                let outcome = teacher
                    .until("join_info", |m| match m {
                        Message::JoinInfo(info) => Some(Ok(info.clone())),
                        other => refused(other, seq).map(Err),
                    })
                    .await?;
                let info = outcome.as_ref().ok().cloned();
                check_expectation(expect, outcome.map(|_| ()))?;
                if let Some(info) = info {
                    self.join_token = Some(info.join_token);
                }
                Ok(Vec::new())
            }
            _ => {
                // the control is handled before the ping, so its error (if
                // any) arrives before the pong
                let mut error = None;
                teacher.barrier_watching(|m| {
                    if let Some(e) = refused(m, seq) {
                        error = Some(e);
                    }
                })
                .await?;
                check_expectation(expect, error.map_or(Ok(()), Err))?;
                self.settle().await?;
                Ok(Vec::new())
            }
        }
    }

    /// Waits until every client has received everything the server sent
    /// before this call.
    async fn settle(&mut self) -> Result<(), SimError> {
        if let Some(t) = self.teacher.as_mut() {
            t.barrier().await?;
        }
        for r in join_all(self.live_students().map(|c| c.barrier())).await {
            r?;
        }
        Ok(())
    }

    /// Compares every client's accumulated view with a fresh teacher
    /// snapshot taken by a new connection.
    async fn check(&mut self, line: usize) -> Result<CheckRecord, SimError> {
        let (mut observer, joined) = self.connect_teacher("observer").await?;
        self.credential = joined.next_teacher_credential.clone();
        observer.close().await;
        let fresh = joined.snapshot;
        let mut mismatches = Vec::new();
        if let Some(view) = self.teacher.as_ref().and_then(|t| t.view.as_ref()) {
            if !view.ended && view.snapshot != fresh {
                mismatches.push(format!("teacher: {}", diff(&view.snapshot, &fresh)));
            }
        }
        for student in self.students.iter().filter(|c| !c.closed && !c.ended()) {
            let Some(view) = &student.view else { continue };
            let s = &view.snapshot;
            let entry = fresh
                .roster
                .iter()
                .flatten()
                .find(|e| Some(&e.player_id) == view.player_id.as_ref());
            let mine = s.my_challenge.as_ref().map(|m| (&m.challenge, m.epoch));
            let expected = entry.map(|e| (&e.challenge, e.epoch));
            let same = s.labels == fresh.labels
                && s.challenge == fresh.challenge
                && s.epoch == fresh.epoch
                && s.paused == fresh.paused
                && s.flags == fresh.flags
                && mine == expected;
            if !same {
                mismatches.push(format!("{}: stale view", student.name));
            }
        }
        Ok(CheckRecord {
            line,
            converged: mismatches.is_empty(),
            mismatches,
        })
    }

    async fn finish(mut self, steps: Vec<StepRecord>, server: String) -> Transcript {
        if !self.teacher.as_ref().is_none_or(|t| t.closed || t.ended()) {
            let _ = self.settle().await;
        }
        let mut all: Vec<Client> = self.teacher.take().into_iter().chain(self.students.drain(..)).collect();
        for c in all.iter_mut() {
            c.drain_ready();
            c.close().await;
        }
        let final_board = all
            .first()
            .filter(|c| c.name == "teacher")
            .and_then(|c| c.view.as_ref()?.snapshot.board.as_ref())
            .map(|b| {
                b.rows
                    .iter()
                    .map(|r| BoardEntry {
                        rank: r.rank,
                        player_id: r.player_id.clone(),
                        display_name: r.display_name.clone(),
                        confidence: r.confidence,
                    })
                    .collect()
            });
        let mut merged: Vec<MergedEntry> = all
            .iter()
            .flat_map(|c| {
                c.log.iter().map(|r| MergedEntry {
                    t_ms: r.t_ms,
                    client: c.name.clone(),
                    seq: r.seq,
                    kind: r.kind.clone(),
                })
            })
            .collect();
        merged.sort_by(|a, b| {
            a.t_ms
                .total_cmp(&b.t_ms)
                .then_with(|| a.client.cmp(&b.client))
                .then(a.seq.cmp(&b.seq))
        });
        let clients = all
            .into_iter()
            .map(|c| ClientRecord {
                role: c.view.as_ref().map_or(Role::Student, |v| v.role),
                player_id: c.view.as_ref().and_then(|v| v.player_id.clone()),
                ended: c.ended(),
                last_type: c.log.last().map(|r| r.kind.clone()),
                name: c.name,
                messages: c.log,
            })
            .collect();
        Transcript {
            server,
            ok: steps.iter().all(|s| s.ok),
            steps,
            checks: self.checks,
            clients,
            final_board,
            merged,
        }
    }
}

fn diff(a: &WireSnapshot, b: &WireSnapshot) -> String {
    let mut fields = Vec::new();
    if a.labels != b.labels {
        fields.push("labels");
    }
    if a.challenge != b.challenge || a.epoch != b.epoch {
        fields.push("challenge");
    }
    if a.paused != b.paused {
        fields.push("paused");
    }
    if a.flags != b.flags {
        fields.push("flags");
    }
    if a.roster != b.roster {
        fields.push("roster");
    }
    if a.board != b.board {
        fields.push("board");
    }
    if a.join_token != b.join_token {
        fields.push("join_token");
    }
    format!("differs in {}", fields.join(", "))
}

/// Runs a scenario against a server. Step failures stop the script and are
/// recorded in the transcript rather than returned as errors.
pub async fn run(config: SimConfig, scenario: &Scenario) -> Transcript {
    let server = config.realtime_url.clone();
    let mut runner = Runner {
        credential: config.teacher_credential.clone(),
        config,
        started: Instant::now(),
        join_token: None,
        labels: Vec::new(),
        teacher: None,
        students: Vec::new(),
        checks: Vec::new(),
    };
    let mut steps = Vec::new();
    for step in &scenario.steps {
        let outcome = runner.step(step).await;
        let failed = outcome.is_err();
        let (results, error) = match outcome {
            Ok(r) => (r, None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
        steps.push(StepRecord {
            line: step.line,
            step: step.text.clone(),
            ok: !failed,
            error,
            results,
        });
        if failed {
            break;
        }
    }
    runner.finish(steps, server).await
}

