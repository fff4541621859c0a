//! Session types to wire messages.

use super::wire::*;
use crate::session::{
    Audience, BoardView, Challenge, PlayerChallenge, RosterEntry, Scope, SessionEvent, Snapshot,
    SubmissionOutcome,
};

pub fn wire_challenge(c: &Challenge) -> WireChallenge {
    WireChallenge {
        label_index: c.label_index,
        label_name: c.label_name.clone(),
    }
}

fn player_challenge(p: &PlayerChallenge) -> WirePlayerChallenge {
    WirePlayerChallenge {
        challenge: wire_challenge(&p.challenge),
        epoch: p.epoch,
    }
}

fn flags(f: crate::session::Flags) -> WireFlags {
    WireFlags {
        heatmap_enabled: f.heatmap_enabled,
        dataset_unlocked: f.dataset_unlocked,
    }
}

pub fn roster_entry(e: &RosterEntry) -> WireRosterEntry {
    WireRosterEntry {
        player_id: e.player_id.0.clone(),
        display_name: e.display_name.clone(),
        avatar: e.avatar.as_ref().map(|a| a.png().to_vec()),
        connected: e.connected,
        challenge: wire_challenge(&e.challenge),
        epoch: e.epoch,
    }
}

pub fn board(view: &BoardView) -> WireBoard {
    WireBoard {
        reveal: view.reveal,
        rows: view
            .rows
            .iter()
            .map(|r| WireBoardRow {
                player_id: r.player_id.0.clone(),
                display_name: r.display_name.clone(),
                rank: r.rank,
                confidence: r.confidence,
                thumbnail: r.thumbnail.png().to_vec(),
                challenge: wire_challenge(&r.challenge),
            })
            .collect(),
    }
}

pub fn snapshot(s: &Snapshot) -> WireSnapshot {
    WireSnapshot {
        labels: s.labels.clone(),
        challenge: wire_challenge(&s.challenge),
        epoch: s.epoch,
        paused: s.paused,
        flags: flags(s.flags),
        my_challenge: s.my_challenge.as_ref().map(player_challenge),
        roster: s.roster.as_ref().map(|r| r.iter().map(roster_entry).collect()),
        board: s.board.as_ref().map(board),
        join_token: s.join_token.clone(),
    }
}

pub fn score(outcome: &SubmissionOutcome, client_ts: Option<u64>) -> Score {
    let cam = outcome.cam.as_ref();
    Score {
        confidence: outcome.confidence,
        is_new_best: outcome.is_new_best,
        challenge: wire_challenge(&outcome.challenge),
        epoch: outcome.epoch,
        client_ts,
        cam_grid: cam.map(|c| c.values.clone()),
        cam_height: cam.map(|c| c.height),
        cam_width: cam.map(|c| c.width),
        heatmap_png: outcome.heatmap_png.clone(),
    }
}

/// The broadcast for `event` as seen by `audience`. Welcome snapshots become
/// a `joined` message, which needs connection details, so they map to `None`.
///
/// Students only learn their own id from a scoped challenge change.
pub fn event_message(event: &SessionEvent, audience: &Audience) -> Option<Message> {
    Some(match event {
        SessionEvent::Welcome { .. } => return None,
        SessionEvent::Roster(entries) => Message::Roster(Roster {
            players: entries.iter().map(roster_entry).collect(),
        }),
        SessionEvent::Board(view) => Message::Board(board(view)),
        SessionEvent::Challenge(update) => {
            let (scope, player_ids) = match (&update.scope, audience) {
                (Scope::All, _) => (ScopeKind::All, None),
                (Scope::Players(ids), Audience::Teacher) => {
                    (ScopeKind::Players, Some(ids.iter().map(|p| p.0.clone()).collect()))
                }
                (Scope::Players(_), Audience::Student(me)) => (ScopeKind::Players, Some(vec![me.0.clone()])),
            };
            Message::Challenge(ChallengeNotice {
                challenge: wire_challenge(&update.challenge),
                scope,
                player_ids,
                epoch: update.epoch,
            })
        }
        SessionEvent::Pause(paused) => Message::Pause(PauseNotice { paused: *paused }),
        SessionEvent::Flags(f) => Message::Flags(flags(*f)),
        SessionEvent::Ended => Message::Bye(Bye {
            reason: ByeReason::SessionEnded,
            next_teacher_credential: None,
        }),
    })
}
