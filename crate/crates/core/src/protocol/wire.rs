use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ErrorCode;
use crate::session::Reveal;

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

mod b64_opt {
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match bytes {
            Some(b) => super::b64::serialize(b, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        super::b64::deserialize(d).map(Some)
    }
}

impl Serialize for Reveal {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Reveal::Hidden => s.serialize_str("hidden"),
            Reveal::Top(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Reveal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct RevealVisitor;

        impl Visitor<'_> for RevealVisitor {
            type Value = Reveal;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("\"hidden\" or a non-negative integer")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Reveal, E> {
                if v == "hidden" {
                    Ok(Reveal::Hidden)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Reveal, E> {
                usize::try_from(v).map(Reveal::Top).map_err(E::custom)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Reveal, E> {
                usize::try_from(v)
                    .map(Reveal::Top)
                    .map_err(|_| E::invalid_value(de::Unexpected::Signed(v), &self))
            }
        }

        d.deserialize_any(RevealVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    All,
    Players,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireChallenge {
    pub label_index: usize,
    pub label_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePlayerChallenge {
    pub challenge: WireChallenge,
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireFlags {
    pub heatmap_enabled: bool,
    pub dataset_unlocked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRosterEntry {
    pub player_id: String,
    pub display_name: String,
    /// PNG.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "b64_opt")]
    pub avatar: Option<Vec<u8>>,
    pub connected: bool,
    pub challenge: WireChallenge,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBoardRow {
    pub player_id: String,
    pub display_name: String,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f32>,
    /// PNG.
    #[serde(with = "b64")]
    pub thumbnail: Vec<u8>,
    pub challenge: WireChallenge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBoard {
    pub reveal: Reveal,
    pub rows: Vec<WireBoardRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSnapshot {
    pub labels: Vec<String>,
    pub challenge: WireChallenge,
    pub epoch: u64,
    pub paused: bool,
    pub flags: WireFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub my_challenge: Option<WirePlayerChallenge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roster: Option<Vec<WireRosterEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub board: Option<WireBoard>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_credential: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "b64_opt")]
    pub avatar: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joined {
    pub protocol_version: String,
    pub role: Role,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub player_id: Option<String>,
    pub snapshot: WireSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_teacher_credential: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSubmit {
    #[serde(with = "b64")]
    pub image: Vec<u8>,
    /// Client clock in milliseconds, echoed in the score.
    pub client_ts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub confidence: f32,
    pub is_new_best: bool,
    pub challenge: WireChallenge,
    pub epoch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_ts: Option<u64>,
    /// Row-major normalized CAM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cam_grid: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cam_height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cam_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "b64_opt")]
    pub heatmap_png: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeNotice {
    pub challenge: WireChallenge,
    pub scope: ScopeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub player_ids: Option<Vec<String>>,
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PauseNotice {
    pub paused: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub players: Vec<WireRosterEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Control {
    SetChallenge {
        label_index: usize,
        scope: ScopeKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        player_ids: Option<Vec<String>>,
    },
    SetPause {
        paused: bool,
    },
    SetReveal {
        reveal: Reveal,
    },
    SetHeatmap {
        enabled: bool,
    },
    SetDatasetUnlock {
        enabled: bool,
    },
    EndSession,
    RegenerateToken,
}

/// Connection barrier; the server answers with a [`Message::Pong`] carrying
/// the same nonce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ping {
    pub nonce: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinInfo {
    pub join_token: String,
    pub join_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorNotice {
    pub code: ErrorCode,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_reply_to: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByeReason {
    SessionEnded,
    ServerShutdown,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bye {
    pub reason: ByeReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_teacher_credential: Option<String>,
}

/// Every message in the catalog, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(Hello),
    Joined(Joined),
    FrameSubmit(FrameSubmit),
    Score(Score),
    Challenge(ChallengeNotice),
    Pause(PauseNotice),
    Board(WireBoard),
    Roster(Roster),
    Flags(WireFlags),
    Control(Control),
    Ping(Ping),
    Pong(Ping),
    JoinInfo(JoinInfo),
    Error(ErrorNotice),
    Bye(Bye),
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello(_) => "hello",
            Message::Joined(_) => "joined",
            Message::FrameSubmit(_) => "frame_submit",
            Message::Score(_) => "score",
            Message::Challenge(_) => "challenge",
            Message::Pause(_) => "pause",
            Message::Board(_) => "board",
            Message::Roster(_) => "roster",
            Message::Flags(_) => "flags",
            Message::Control(_) => "control",
            Message::Ping(_) => "ping",
            Message::Pong(_) => "pong",
            Message::JoinInfo(_) => "join_info",
            Message::Error(_) => "error",
            Message::Bye(_) => "bye",
        }
    }

    /// Whether clients send this message (as opposed to the server).
    pub fn from_client(&self) -> bool {
        matches!(
            self,
            Message::Hello(_) | Message::FrameSubmit(_) | Message::Control(_) | Message::Ping(_)
        )
    }
}
