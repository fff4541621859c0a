use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::SystemTime;

use image::{imageops, RgbImage};

use super::images::{ImageTracker, TrackedImage};
use super::{
    Audience, BoardRow, BoardView, Challenge, ChallengeUpdate, EventSink, Flags, PlayerChallenge,
    PlayerId, Reveal, RosterEntry, Scope, SessionConfig, SessionError, SessionEvent, SessionId,
    Snapshot, SubmissionOutcome, SubscriberId, MAX_NAME_CHARS,
};
use crate::cam::{compute_cam, encode_png, normalize_cam, render_heatmap, upsample_bilinear, CamGrid};
use crate::model::Model;
use crate::nn::{forward, preprocess};

/// Longest side of the server-rendered heatmap PNG.
const HEATMAP_SIDE: u32 = 224;
const HEATMAP_ALPHA: f32 = 0.6;

struct Player {
    display_name: String,
    avatar: Option<TrackedImage>,
    challenge: Challenge,
    epoch: u64,
    connections: usize,
}

struct LeaderboardEntry {
    best_confidence: f32,
    thumbnail: TrackedImage,
    /// Global achievement counter; breaks confidence ties in time order.
    order: u64,
}

struct Subscriber {
    id: SubscriberId,
    audience: Audience,
    sink: Arc<dyn EventSink>,
}

struct Inner {
    live: bool,
    join_token: String,
    teacher_key: String,
    config: SessionConfig,
    roster_order: Vec<PlayerId>,
    players: HashMap<PlayerId, Player>,
    global: Challenge,
    global_epoch: u64,
    epoch_counter: u64,
    paused: bool,
    flags: Flags,
    reveal: Reveal,
    leaderboard: HashMap<PlayerId, LeaderboardEntry>,
    subscribers: Vec<Subscriber>,
    next_subscriber: u64,
    next_order: u64,
    /// A board broadcast held back while paused.
    board_pending: bool,
}

/// One classroom game. Cheap to share behind an `Arc`.
pub struct Session {
    id: SessionId,
    model: Arc<Model>,
    tracker: ImageTracker,
    created_at: SystemTime,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("id", &self.id).finish_non_exhaustive()
    }
}

impl Session {
    pub(crate) fn new(
        id: SessionId,
        model: Arc<Model>,
        tracker: ImageTracker,
        config: SessionConfig,
        join_token: String,
        teacher_key: String,
    ) -> Result<Self, SessionError> {
        if config.max_players == 0 {
            return Err(SessionError::InvalidConfig("max_players must be positive".into()));
        }
        if config.thumbnail_side == 0 {
            return Err(SessionError::InvalidConfig("thumbnail_side must be positive".into()));
        }
        let global = challenge_for(&model, config.initial_label)
            .map_err(|_| SessionError::InvalidConfig(format!("initial label {} out of range", config.initial_label)))?;
        Ok(Self {
            id,
            created_at: SystemTime::now(),
            inner: Mutex::new(Inner {
                live: true,
                join_token,
                teacher_key,
                reveal: config.reveal,
                config,
                roster_order: Vec::new(),
                players: HashMap::new(),
                global,
                global_epoch: 0,
                epoch_counter: 0,
                paused: false,
                flags: Flags::default(),
                leaderboard: HashMap::new(),
                subscribers: Vec::new(),
                next_subscriber: 0,
                next_order: 0,
                board_pending: false,
            }),
            model,
            tracker,
        })
    }

    pub fn id(&self) -> &SessionId {
        &self.id
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn created_at(&self) -> SystemTime {
        self.created_at
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn live(&self) -> Result<MutexGuard<'_, Inner>, SessionError> {
        let guard = self.lock();
        if guard.live {
            Ok(guard)
        } else {
            Err(SessionError::UnknownSession)
        }
    }

    pub fn is_live(&self) -> bool {
        self.lock().live
    }

    pub fn join_token(&self) -> Result<String, SessionError> {
        Ok(self.live()?.join_token.clone())
    }

    pub fn teacher_key_matches(&self, key: &str) -> bool {
        let inner = self.lock();
        inner.live && constant_time_eq(inner.teacher_key.as_bytes(), key.as_bytes())
    }

    pub fn teacher_key(&self) -> Result<String, SessionError> {
        Ok(self.live()?.teacher_key.clone())
    }

    /// Spends the teacher credential `current` and issues its replacement.
    /// Fails with `UnknownCredential` unless `current` is the live one.
    pub fn rotate_teacher_key(&self, current: &str) -> Result<String, SessionError> {
        let mut inner = self.live()?;
        if !constant_time_eq(inner.teacher_key.as_bytes(), current.as_bytes()) {
            return Err(SessionError::UnknownCredential);
        }
        let key = super::registry::random_token();
        inner.teacher_key = key.clone();
        Ok(key)
    }

    pub(crate) fn set_join_token(&self, token: String) -> Result<(), SessionError> {
        self.live()?.join_token = token;
        Ok(())
    }

    pub fn player_count(&self) -> Result<usize, SessionError> {
        Ok(self.live()?.players.len())
    }

    pub fn flags(&self) -> Result<Flags, SessionError> {
        Ok(self.live()?.flags)
    }

    pub fn is_paused(&self) -> Result<bool, SessionError> {
        Ok(self.live()?.paused)
    }

    pub fn reveal(&self) -> Result<Reveal, SessionError> {
        Ok(self.live()?.reveal)
    }

    /// Adds a player. The name is trimmed; duplicates get a `-2`, `-3`, ... suffix.
    pub fn add_player(&self, display_name: &str, avatar: Option<RgbImage>) -> Result<PlayerId, SessionError> {
        let name = display_name.trim();
        let len = name.chars().count();
        if len == 0 {
            return Err(SessionError::InvalidName("name is empty".into()));
        }
        if len > MAX_NAME_CHARS {
            return Err(SessionError::InvalidName(format!("longer than {MAX_NAME_CHARS} characters")));
        }
        if name.chars().any(char::is_control) {
            return Err(SessionError::InvalidName("contains control characters".into()));
        }
        let mut inner = self.live()?;
        if inner.players.len() >= inner.config.max_players {
            return Err(SessionError::CapacityExceeded(inner.config.max_players));
        }
        let unique = inner.unique_name(name);
        let side = inner.config.thumbnail_side;
        let avatar = avatar.map(|img| self.tracker.track(shrink(&img, side)));
        let id = loop {
            let candidate = PlayerId(format!("p-{}", super::registry::random_hex(6)));
            if !inner.players.contains_key(&candidate) {
                break candidate;
            }
        };
        let player = Player {
            display_name: unique,
            avatar,
            challenge: inner.global.clone(),
            epoch: inner.global_epoch,
            connections: 0,
        };
        inner.players.insert(id.clone(), player);
        inner.roster_order.push(id.clone());
        log::info!("player joined, roster size {}", inner.players.len());
        inner.emit_roster();
        Ok(id)
    }

    /// Registers a sink. It receives a `Welcome` snapshot first, then every
    /// subsequent event for its audience.
    pub fn attach(&self, audience: Audience, sink: Arc<dyn EventSink>) -> Result<SubscriberId, SessionError> {
        let mut inner = self.live()?;
        if let Audience::Student(pid) = &audience {
            if !inner.players.contains_key(pid) {
                return Err(SessionError::UnknownPlayer);
            }
        }
        let snapshot = inner.snapshot(&self.model, &audience);
        let player_id = match &audience {
            Audience::Student(pid) => Some(pid.clone()),
            Audience::Teacher => None,
        };
        if !sink.deliver(SessionEvent::Welcome {
            player_id,
            snapshot: Box::new(snapshot),
        }) {
            return Err(SessionError::UnknownSession);
        }
        let id = SubscriberId(inner.next_subscriber);
        inner.next_subscriber += 1;
        let newly_connected = match &audience {
            Audience::Student(pid) => {
                let p = inner.players.get_mut(pid).expect("checked above");
                p.connections += 1;
                p.connections == 1
            }
            Audience::Teacher => false,
        };
        inner.subscribers.push(Subscriber { id, audience, sink });
        if newly_connected {
            inner.emit_roster();
        }
        Ok(id)
    }

    /// Removes a sink. Disconnected players stay on the roster.
    pub fn detach(&self, id: SubscriberId) {
        let mut inner = self.lock();
        let Some(pos) = inner.subscribers.iter().position(|s| s.id == id) else {
            return;
        };
        let sub = inner.subscribers.remove(pos);
        if let Audience::Student(pid) = sub.audience {
            if let Some(p) = inner.players.get_mut(&pid) {
                p.connections = p.connections.saturating_sub(1);
                if p.connections == 0 && inner.live {
                    inner.emit_roster();
                }
            }
        }
    }

    pub fn snapshot(&self, audience: &Audience) -> Result<Snapshot, SessionError> {
        Ok(self.live()?.snapshot(&self.model, audience))
    }

    pub fn leaderboard_view(&self) -> Result<BoardView, SessionError> {
        Ok(self.live()?.board())
    }

    /// Best confidence in the player's current challenge epoch (0 if none).
    pub fn best_confidence(&self, player: &PlayerId) -> Result<f32, SessionError> {
        let inner = self.live()?;
        if !inner.players.contains_key(player) {
            return Err(SessionError::UnknownPlayer);
        }
        Ok(inner.leaderboard.get(player).map_or(0.0, |e| e.best_confidence))
    }

    pub fn thumbnail(&self, player: &PlayerId) -> Result<Option<TrackedImage>, SessionError> {
        let inner = self.live()?;
        if !inner.players.contains_key(player) {
            return Err(SessionError::UnknownPlayer);
        }
        Ok(inner.leaderboard.get(player).map(|e| e.thumbnail.clone()))
    }

    pub fn player_challenge(&self, player: &PlayerId) -> Result<PlayerChallenge, SessionError> {
        let inner = self.live()?;
        let p = inner.players.get(player).ok_or(SessionError::UnknownPlayer)?;
        Ok(PlayerChallenge {
            challenge: p.challenge.clone(),
            epoch: p.epoch,
        })
    }

    pub fn display_name(&self, player: &PlayerId) -> Result<String, SessionError> {
        let inner = self.live()?;
        let p = inner.players.get(player).ok_or(SessionError::UnknownPlayer)?;
        Ok(p.display_name.clone())
    }

    /// Decodes an encoded frame (JPEG or PNG) and scores it.
    pub fn submit_encoded(&self, player: &PlayerId, bytes: &[u8]) -> Result<SubmissionOutcome, SessionError> {
        let frame = image::load_from_memory(bytes)
            .map_err(|e| SessionError::BadFrame(e.to_string()))?
            .to_rgb8();
        self.submit_frame(player, &frame)
    }

    /// Scores a frame against the player's effective challenge and updates
    /// the leaderboard if it beats the current best. The frame itself is not
    /// retained; only a thumbnail of a new best is kept.
    pub fn submit_frame(&self, player: &PlayerId, frame: &RgbImage) -> Result<SubmissionOutcome, SessionError> {
        let (challenge, epoch, heatmap, heatmap_png, side) = {
            let inner = self.live()?;
            if inner.paused {
                return Err(SessionError::Paused);
            }
            let p = inner.players.get(player).ok_or(SessionError::UnknownPlayer)?;
            (
                p.challenge.clone(),
                p.epoch,
                inner.flags.heatmap_enabled,
                inner.config.heatmap_png,
                inner.config.thumbnail_side,
            )
        };
        if frame.width() == 0 || frame.height() == 0 {
            return Err(SessionError::BadFrame("empty frame".into()));
        }

        let input = preprocess(frame, self.model.input_size())?;
        let result = forward(&self.model, &input)?;
        let confidence = result.probs[challenge.label_index];
        let cam = if heatmap {
            let raw = compute_cam(&result.feature_maps, self.model.head_weights(), challenge.label_index)?;
            Some(normalize_cam(&raw))
        } else {
            None
        };
        let heatmap_png = match (&cam, heatmap_png) {
            (Some(grid), true) => Some(render_overlay(grid, frame)?),
            _ => None,
        };
        let thumb = shrink(frame, side);

        let mut inner = self.live()?;
        if inner.paused {
            return Err(SessionError::Paused);
        }
        let current_epoch = inner.players.get(player).ok_or(SessionError::UnknownPlayer)?.epoch;
        let mut is_new_best = false;
        if current_epoch == epoch {
            let best = inner.leaderboard.get(player).map_or(0.0, |e| e.best_confidence);
            if confidence > best {
                is_new_best = true;
                let thumbnail = self.tracker.track(thumb);
                let order = inner.next_order;
                inner.next_order += 1;
                inner.leaderboard.insert(
                    player.clone(),
                    LeaderboardEntry {
                        best_confidence: confidence,
                        thumbnail: thumbnail.clone(),
                        order,
                    },
                );
                let p = inner.players.get_mut(player).expect("checked above");
                let new_avatar = p.avatar.is_none();
                if new_avatar {
                    p.avatar = Some(thumbnail);
                }
                inner.publish_board();
                if new_avatar {
                    inner.emit_roster();
                }
            }
        }
        Ok(SubmissionOutcome {
            confidence,
            is_new_best,
            challenge,
            epoch,
            cam,
            heatmap_png,
        })
    }

    /// Changes the challenge for everyone or for selected players. Affected
    /// players always start a new epoch with their best reset, even when the
    /// label is unchanged.
    pub fn set_challenge(&self, scope: Scope, label_index: usize) -> Result<u64, SessionError> {
        let challenge = challenge_for(&self.model, label_index)?;
        let mut inner = self.live()?;
        if let Scope::Players(ids) = &scope {
            if let Some(missing) = ids.iter().find(|id| !inner.players.contains_key(id)) {
                log::debug!("set_challenge for unknown player {missing}");
                return Err(SessionError::UnknownPlayer);
            }
        }
        inner.epoch_counter += 1;
        let epoch = inner.epoch_counter;
        let affected: Vec<PlayerId> = match &scope {
            Scope::All => {
                inner.global = challenge.clone();
                inner.global_epoch = epoch;
                inner.roster_order.clone()
            }
            Scope::Players(ids) => ids.clone(),
        };
        for pid in &affected {
            if let Some(p) = inner.players.get_mut(pid) {
                p.challenge = challenge.clone();
                p.epoch = epoch;
            }
            inner.leaderboard.remove(pid);
        }
        let update = ChallengeUpdate {
            challenge,
            scope: scope.clone(),
            epoch,
        };
        inner.emit(SessionEvent::Challenge(update), |a| match a {
            Audience::Teacher => true,
            Audience::Student(pid) => matches!(&scope, Scope::All) || affected.contains(pid),
        });
        inner.publish_board();
        Ok(epoch)
    }

    pub fn set_pause(&self, paused: bool) -> Result<(), SessionError> {
        let mut inner = self.live()?;
        inner.paused = paused;
        inner.emit(SessionEvent::Pause(paused), |_| true);
        if !paused && std::mem::take(&mut inner.board_pending) {
            inner.publish_board();
        }
        Ok(())
    }

    pub fn set_reveal(&self, reveal: Reveal) -> Result<(), SessionError> {
        let mut inner = self.live()?;
        inner.reveal = reveal;
        inner.publish_board();
        Ok(())
    }

    pub fn set_heatmap(&self, enabled: bool) -> Result<(), SessionError> {
        let mut inner = self.live()?;
        inner.flags.heatmap_enabled = enabled;
        let flags = inner.flags;
        inner.emit(SessionEvent::Flags(flags), |_| true);
        Ok(())
    }

    pub fn set_dataset_unlock(&self, unlocked: bool) -> Result<(), SessionError> {
        let mut inner = self.live()?;
        inner.flags.dataset_unlocked = unlocked;
        let flags = inner.flags;
        inner.emit(SessionEvent::Flags(flags), |_| true);
        Ok(())
    }

    /// Drops all session data and tells every subscriber the session ended.
    pub(crate) fn purge(&self) {
        let mut inner = self.lock();
        if !inner.live {
            return;
        }
        inner.live = false;
        let subscribers = std::mem::take(&mut inner.subscribers);
        for s in &subscribers {
            s.sink.deliver(SessionEvent::Ended);
        }
        drop(subscribers);
        inner.leaderboard.clear();
        inner.players.clear();
        inner.roster_order.clear();
        inner.join_token.clear();
        inner.teacher_key.clear();
    }
}

impl Inner {
    fn emit(&mut self, event: SessionEvent, to: impl Fn(&Audience) -> bool) {
        self.subscribers
            .retain(|s| !to(&s.audience) || s.sink.deliver(event.clone()));
    }

    /// Sends the board to teachers, or holds it until the game resumes.
    fn publish_board(&mut self) {
        if self.paused {
            self.board_pending = true;
            return;
        }
        let board = self.board();
        self.emit(SessionEvent::Board(board), |a| *a == Audience::Teacher);
    }

    fn emit_roster(&mut self) {
        let roster = self.roster();
        self.emit(SessionEvent::Roster(roster), |a| *a == Audience::Teacher);
    }

    fn unique_name(&self, name: &str) -> String {
        let taken = |candidate: &str| self.players.values().any(|p| p.display_name == candidate);
        if !taken(name) {
            return name.to_string();
        }
        (2..)
            .map(|n| {
                let suffix = format!("-{n}");
                let keep = MAX_NAME_CHARS - suffix.chars().count();
                let base: String = name.chars().take(keep).collect();
                format!("{base}{suffix}")
            })
            .find(|c| !taken(c))
            .expect("unbounded search")
    }

    fn roster(&self) -> Vec<RosterEntry> {
        self.roster_order
            .iter()
            .map(|pid| {
                let p = &self.players[pid];
                RosterEntry {
                    player_id: pid.clone(),
                    display_name: p.display_name.clone(),
                    avatar: p.avatar.clone(),
                    connected: p.connections > 0,
                    challenge: p.challenge.clone(),
                    epoch: p.epoch,
                }
            })
            .collect()
    }

    /// Descending by best confidence, earlier achievement first on ties.
    fn board(&self) -> BoardView {
        let mut entries: Vec<(&PlayerId, &LeaderboardEntry)> = self.leaderboard.iter().collect();
        entries.sort_by(|a, b| {
            b.1.best_confidence
                .total_cmp(&a.1.best_confidence)
                .then(a.1.order.cmp(&b.1.order))
        });
        let rows = entries
            .into_iter()
            .enumerate()
            .map(|(i, (pid, e))| {
                let rank = i + 1;
                let p = &self.players[pid];
                BoardRow {
                    player_id: pid.clone(),
                    display_name: p.display_name.clone(),
                    rank,
                    confidence: self.reveal.shows(rank).then_some(e.best_confidence),
                    thumbnail: e.thumbnail.clone(),
                    challenge: p.challenge.clone(),
                }
            })
            .collect();
        BoardView {
            reveal: self.reveal,
            rows,
        }
    }

    fn snapshot(&self, model: &Model, audience: &Audience) -> Snapshot {
        let teacher = *audience == Audience::Teacher;
        let my_challenge = match audience {
            Audience::Student(pid) => self.players.get(pid).map(|p| PlayerChallenge {
                challenge: p.challenge.clone(),
                epoch: p.epoch,
            }),
            Audience::Teacher => None,
        };
        Snapshot {
            labels: model.labels().to_vec(),
            challenge: self.global.clone(),
            epoch: self.global_epoch,
            paused: self.paused,
            flags: self.flags,
            my_challenge,
            roster: teacher.then(|| self.roster()),
            board: teacher.then(|| self.board()),
            join_token: teacher.then(|| self.join_token.clone()),
        }
    }
}

fn challenge_for(model: &Model, label_index: usize) -> Result<Challenge, SessionError> {
    model
        .labels()
        .get(label_index)
        .map(|name| Challenge {
            label_index,
            label_name: name.clone(),
        })
        .ok_or(SessionError::InvalidLabel(label_index))
}

/// Downscales so the longest side is at most `side`, keeping aspect ratio.
fn shrink(frame: &RgbImage, side: u32) -> RgbImage {
    let (w, h) = frame.dimensions();
    if w <= side && h <= side {
        return frame.clone();
    }
    let scale = side as f32 / w.max(h) as f32;
    let nw = ((w as f32 * scale).round() as u32).max(1);
    let nh = ((h as f32 * scale).round() as u32).max(1);
    imageops::thumbnail(frame, nw, nh)
}

fn render_overlay(grid: &CamGrid, frame: &RgbImage) -> Result<Vec<u8>, SessionError> {
    let base = shrink(frame, HEATMAP_SIDE);
    let (w, h) = base.dimensions();
    let overlay = upsample_bilinear(grid, h as usize, w as usize)?;
    let rgba = render_heatmap(&overlay, &base, HEATMAP_ALPHA)?;
    Ok(encode_png(&rgba))
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
