use super::wire::*;

/// A client's picture of the session: the `joined` snapshot with every later
/// broadcast applied in order. At a quiescent point it equals a fresh
/// snapshot for the same role.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientView {
    pub role: Role,
    pub player_id: Option<String>,
    pub snapshot: WireSnapshot,
    pub ended: bool,
}

impl ClientView {
    pub fn from_joined(joined: &Joined) -> Self {
        Self {
            role: joined.role,
            player_id: joined.player_id.clone(),
            snapshot: joined.snapshot.clone(),
            ended: false,
        }
    }

    /// Applies one server message. Messages that do not change session
    /// state (scores, errors) are ignored.
    pub fn apply(&mut self, message: &Message) {
        let s = &mut self.snapshot;
        match message {
            Message::Roster(r) => s.roster = Some(r.players.clone()),
            Message::Board(b) => s.board = Some(b.clone()),
            Message::Pause(p) => s.paused = p.paused,
            Message::Flags(f) => s.flags = *f,
            Message::JoinInfo(info) => s.join_token = Some(info.join_token.clone()),
            Message::Bye(_) => self.ended = true,
            Message::Challenge(c) => {
                let affects = |id: &str| match c.scope {
                    ScopeKind::All => true,
                    ScopeKind::Players => c.player_ids.iter().flatten().any(|p| p == id),
                };
                if c.scope == ScopeKind::All {
                    s.challenge = c.challenge.clone();
                    s.epoch = c.epoch;
                }
                for entry in s.roster.iter_mut().flatten() {
                    if affects(&entry.player_id) {
                        entry.challenge = c.challenge.clone();
                        entry.epoch = c.epoch;
                    }
                }
                if let (Some(me), Some(mine)) = (&self.player_id, s.my_challenge.as_mut()) {
                    if affects(me) {
                        mine.challenge = c.challenge.clone();
                        mine.epoch = c.epoch;
                    }
                }
            }
            Message::Hello(_)
            | Message::Joined(_)
            | Message::FrameSubmit(_)
            | Message::Score(_)
            | Message::Control(_)
            | Message::Ping(_)
            | Message::Pong(_)
            | Message::Error(_) => {}
        }
    }
}
