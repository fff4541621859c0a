//! Authoritative game state.
//!
//! A [`Registry`] owns every live [`Session`]. Each session serializes its
//! mutations behind one lock and fans the resulting [`SessionEvent`]s out to
//! attached [`EventSink`]s while still holding it, so every subscriber sees
//! the same order. Inference for a submitted frame runs outside the lock.
//!
//! Ending a session removes it from the registry and drops every name,
//! avatar, thumbnail and score it held.

mod images;
mod registry;
mod state;

use std::fmt;

use thiserror::Error;

use crate::cam::CamGrid;
use crate::error::NnError;

pub use images::{ImageTracker, TrackedImage};
pub use registry::{Registry, RegistryConfig, DEFAULT_MAX_SESSIONS};
pub use state::Session;

/// Maximum display name length, in characters.
pub const MAX_NAME_CHARS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PlayerId(pub String);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for PlayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("unknown session")]
    UnknownSession,
    #[error("unknown join token")]
    UnknownToken,
    #[error("unknown teacher credential")]
    UnknownCredential,
    #[error("session registry is full ({0} sessions)")]
    RegistryFull(usize),
    #[error("session is at capacity ({0} players)")]
    CapacityExceeded(usize),
    #[error("invalid display name: {0}")]
    InvalidName(String),
    #[error("unknown player")]
    UnknownPlayer,
    #[error("game is paused")]
    Paused,
    #[error("label index {0} is not valid for the loaded model")]
    InvalidLabel(usize),
    #[error("frame could not be decoded: {0}")]
    BadFrame(String),
    #[error("inference failed: {0}")]
    Inference(#[from] NnError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// How many top-ranked players have their numeric score shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reveal {
    #[default]
    Hidden,
    Top(usize),
}

impl Reveal {
    pub fn shows(&self, rank: usize) -> bool {
        match *self {
            Reveal::Hidden => false,
            Reveal::Top(n) => rank <= n,
        }
    }
}

impl std::str::FromStr for Reveal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("hidden") {
            return Ok(Reveal::Hidden);
        }
        s.parse::<usize>()
            .map(Reveal::Top)
            .map_err(|_| format!("expected a count or `hidden`, got `{s}`"))
    }
}

impl fmt::Display for Reveal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reveal::Hidden => f.write_str("hidden"),
            Reveal::Top(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub reveal: Reveal,
    pub max_players: usize,
    /// Label index of the challenge active when the session starts.
    pub initial_label: usize,
    /// Render a PNG overlay alongside the raw CAM grid.
    pub heatmap_png: bool,
    /// Longest side of stored thumbnails, in pixels.
    pub thumbnail_side: u32,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            reveal: Reveal::Hidden,
            max_players: 40,
            initial_label: 0,
            heatmap_png: true,
            thumbnail_side: 96,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub label_index: usize,
    pub label_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    All,
    Players(Vec<PlayerId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Audience {
    Teacher,
    Student(PlayerId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RosterEntry {
    pub player_id: PlayerId,
    pub display_name: String,
    pub avatar: Option<TrackedImage>,
    pub connected: bool,
    pub challenge: Challenge,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoardRow {
    pub player_id: PlayerId,
    pub display_name: String,
    /// 1-based.
    pub rank: usize,
    /// Present only when the reveal policy shows this rank.
    pub confidence: Option<f32>,
    pub thumbnail: TrackedImage,
    pub challenge: Challenge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoardView {
    pub reveal: Reveal,
    pub rows: Vec<BoardRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub heatmap_enabled: bool,
    pub dataset_unlocked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlayerChallenge {
    pub challenge: Challenge,
    pub epoch: u64,
}

/// Everything a freshly attached client needs. Teachers get the roster,
/// board and join token; students get their own challenge.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub labels: Vec<String>,
    pub challenge: Challenge,
    pub epoch: u64,
    pub paused: bool,
    pub flags: Flags,
    pub my_challenge: Option<PlayerChallenge>,
    pub roster: Option<Vec<RosterEntry>>,
    pub board: Option<BoardView>,
    pub join_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChallengeUpdate {
    pub challenge: Challenge,
    pub scope: Scope,
    pub epoch: u64,
}

/// Messages a session pushes to its subscribers, in mutation order.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    /// Always the first event a new subscriber receives.
    Welcome {
        player_id: Option<PlayerId>,
        snapshot: Box<Snapshot>,
    },
    Roster(Vec<RosterEntry>),
    Board(BoardView),
    Challenge(ChallengeUpdate),
    Pause(bool),
    Flags(Flags),
    /// Terminal; nothing follows it.
    Ended,
}

/// Receives session events. Called with the session lock held, so it must
/// not block; returning `false` detaches the sink.
pub trait EventSink: Send + Sync {
    fn deliver(&self, event: SessionEvent) -> bool;
}

impl<F> EventSink for F
where
    F: Fn(SessionEvent) -> bool + Send + Sync,
{
    fn deliver(&self, event: SessionEvent) -> bool {
        self(event)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubscriberId(pub u64);

/// Result of scoring one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmissionOutcome {
    /// Softmax probability of the player's effective challenge label.
    pub confidence: f32,
    pub is_new_best: bool,
    pub challenge: Challenge,
    pub epoch: u64,
    /// Normalized CAM for the challenge label, when heatmaps are enabled.
    pub cam: Option<CamGrid>,
    pub heatmap_png: Option<Vec<u8>>,
}
