//! Reference leaderboard model and a checker that replays random operation
//! sequences against a real session.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use bm_core::session::{
    Audience, PlayerId, Registry, Reveal, Scope, Session, SessionConfig, SessionError, SessionEvent,
};
use bm_core::testkit::{brightness_model_sized, grey_frame};
use bm_core::Model;
use proptest::prelude::*;

const SIDE: usize = 8;
const LABELS: [&str; 2] = ["dark", "bright"];

/// Reveal settings the checker exercises; `Roster` means the current roster size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevealPick {
    Hidden,
    Top(usize),
    Roster,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Join,
    /// Player index is taken modulo the roster size.
    Submit { player: usize, level: u8 },
    /// `None` targets everyone; otherwise a player bitmask.
    Challenge { players: Option<u8>, label: usize },
    Pause(bool),
    Reveal(RevealPick),
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        1 => Just(Op::Join),
        8 => (0..8usize, any::<u8>()).prop_map(|(player, level)| Op::Submit { player, level }),
        2 => (proptest::option::of(any::<u8>()), 0..LABELS.len())
            .prop_map(|(players, label)| Op::Challenge { players, label }),
        2 => any::<bool>().prop_map(Op::Pause),
        2 => prop_oneof![
            Just(RevealPick::Hidden),
            (0..=2usize).prop_map(RevealPick::Top),
            Just(RevealPick::Roster),
        ]
        .prop_map(Op::Reveal),
    ]
}

/// Between one and five starting players followed by up to `max_ops` operations.
pub fn scenario(max_ops: usize) -> impl Strategy<Value = (usize, Vec<Op>)> {
    (1..=5usize, proptest::collection::vec(op(), 1..=max_ops))
}

#[derive(Clone)]
struct Best {
    confidence: f64,
    order: u64,
    level: u8,
}

struct RefPlayer {
    id: PlayerId,
    label: usize,
    best: Option<Best>,
}

/// Replays operations against a session and the reference model, checking
/// monotonicity, reset completeness, reveal soundness, pause soundness and
/// board order after every step.
pub struct Checker {
    registry: Registry,
    session: Arc<Session>,
    teacher: Arc<Mutex<Vec<SessionEvent>>>,
    players: Vec<RefPlayer>,
    paused: bool,
    reveal: Reveal,
    label: usize,
    next_order: u64,
    confidence_cache: HashMap<(u8, usize), f64>,
}

fn brightness() -> Model {
    brightness_model_sized(SIDE, &LABELS, &[-4.0, 4.0], &[4.0, -4.0])
}

impl Checker {
    pub fn new(initial_players: usize) -> Self {
        let registry = Registry::default();
        let (id, _) = registry
            .create_session(Arc::new(brightness()), SessionConfig { max_players: 64, ..Default::default() })
            .expect("fresh registry");
        let session = registry.get(&id).expect("just created");
        let teacher: Arc<Mutex<Vec<SessionEvent>>> = Arc::default();
        let log = teacher.clone();
        session
            .attach(
                Audience::Teacher,
                Arc::new(move |e: SessionEvent| {
                    log.lock().unwrap().push(e);
                    true
                }),
            )
            .expect("live session");
        let mut checker = Self {
            registry,
            session,
            teacher,
            players: Vec::new(),
            paused: false,
            reveal: Reveal::Hidden,
            label: 0,
            next_order: 0,
            confidence_cache: HashMap::new(),
        };
        for _ in 0..initial_players {
            checker.apply(&Op::Join).expect("join");
        }
        checker
    }

    fn oracle_confidence(&mut self, level: u8, label: usize) -> f64 {
        *self.confidence_cache.entry((level, label)).or_insert_with(|| {
            let model = brightness();
            let input = crate::preprocess(&grey_frame(SIDE as u32, level), SIDE);
            crate::forward(&model, &input).probs[label]
        })
    }

    fn board_events(&self) -> usize {
        self.teacher
            .lock()
            .unwrap()
            .iter()
            .filter(|e| matches!(e, SessionEvent::Board(_)))
            .count()
    }

    pub fn run(initial_players: usize, ops: &[Op]) -> Result<(), String> {
        let mut checker = Self::new(initial_players);
        for (i, op) in ops.iter().enumerate() {
            checker.apply(op).map_err(|e| format!("step {i} {op:?}: {e}"))?;
        }
        checker.finish()
    }

    pub fn apply(&mut self, op: &Op) -> Result<(), String> {
        let before: Vec<(Option<Best>, Option<bm_core::session::TrackedImage>)> = self
            .players
            .iter()
            .map(|p| Ok((p.best.clone(), self.session.thumbnail(&p.id).map_err(|e| e.to_string())?)))
            .collect::<Result<_, String>>()?;
        let boards_before = self.board_events();
        let mut reset: Vec<bool> = vec![false; self.players.len()];

        match *op {
            Op::Join => {
                let name = format!("player {}", self.players.len());
                let id = self.session.add_player(&name, None).map_err(|e| e.to_string())?;
                self.players.push(RefPlayer { id, label: self.label, best: None });
            }
            Op::Submit { player, level } => {
                if self.players.is_empty() {
                    return Ok(());
                }
                let idx = player % self.players.len();
                let id = self.players[idx].id.clone();
                let result = self.session.submit_frame(&id, &grey_frame(SIDE as u32, level));
                if self.paused {
                    if result != Err(SessionError::Paused) {
                        return Err(format!("submission while paused returned {result:?}"));
                    }
                } else {
                    let out = result.map_err(|e| e.to_string())?;
                    let label = self.players[idx].label;
                    let expected = self.oracle_confidence(level, label);
                    if (out.confidence as f64 - expected).abs() > 1e-5 {
                        return Err(format!("confidence {} vs oracle {expected}", out.confidence));
                    }
                    if out.challenge.label_index != label {
                        return Err(format!("scored against label {} not {label}", out.challenge.label_index));
                    }
                    // ranking uses the session's own values, already checked against the
                    // oracle above; mirrored frames can tie in f64 yet differ by an ulp in f32
                    let observed = out.confidence as f64;
                    let prior = self.players[idx].best.as_ref().map_or(0.0, |b| b.confidence);
                    let improves = observed > prior;
                    if out.is_new_best != improves {
                        return Err(format!("is_new_best {} with prior {prior} and {observed}", out.is_new_best));
                    }
                    if improves {
                        self.players[idx].best = Some(Best { confidence: observed, order: self.next_order, level });
                        self.next_order += 1;
                    }
                }
            }
            Op::Challenge { players, label } => {
                let scope = match players {
                    None => {
                        self.label = label;
                        reset.iter_mut().for_each(|r| *r = true);
                        Scope::All
                    }
                    Some(mask) => {
                        let mut ids = Vec::new();
                        for (i, p) in self.players.iter().enumerate() {
                            if i < 8 && mask & (1 << i) != 0 {
                                ids.push(p.id.clone());
                                reset[i] = true;
                            }
                        }
                        Scope::Players(ids)
                    }
                };
                self.session.set_challenge(scope, label).map_err(|e| e.to_string())?;
                for (p, r) in self.players.iter_mut().zip(&reset) {
                    if *r {
                        p.label = label;
                        p.best = None;
                    }
                }
            }
            Op::Pause(paused) => {
                self.session.set_pause(paused).map_err(|e| e.to_string())?;
                self.paused = paused;
            }
            Op::Reveal(pick) => {
                let reveal = match pick {
                    RevealPick::Hidden => Reveal::Hidden,
                    RevealPick::Top(n) => Reveal::Top(n),
                    RevealPick::Roster => Reveal::Top(self.players.len()),
                };
                self.session.set_reveal(reveal).map_err(|e| e.to_string())?;
                self.reveal = reveal;
            }
        }

        // pause soundness: nothing reaches the board while paused
        if self.paused && self.board_events() != boards_before {
            return Err("board broadcast while paused".into());
        }

        for (i, (old_best, old_thumb)) in before.iter().enumerate() {
            let p = &self.players[i];
            let best = self.session.best_confidence(&p.id).map_err(|e| e.to_string())? as f64;
            let thumb = self.session.thumbnail(&p.id).map_err(|e| e.to_string())?;
            let old = old_best.as_ref().map_or(0.0, |b| b.confidence);
            if reset[i] {
                if best != 0.0 || thumb.is_some() {
                    return Err(format!("player {i} kept best {best} after reset"));
                }
            } else if best + 1e-6 < old {
                return Err(format!("player {i} best fell from {old} to {best}"));
            } else if !matches!(op, Op::Submit { .. }) {
                let same = match (&thumb, old_thumb) {
                    (Some(a), Some(b)) => a.ptr_eq(b),
                    (None, None) => true,
                    _ => false,
                };
                if !same || (best - old).abs() > 1e-6 {
                    return Err(format!("player {i} changed outside a submission"));
                }
            }
        }
        self.check_board()
    }

    fn check_board(&self) -> Result<(), String> {
        let view = self.session.leaderboard_view().map_err(|e| e.to_string())?;
        if view.reveal != self.reveal {
            return Err(format!("reveal {:?} vs {:?}", view.reveal, self.reveal));
        }
        let mut expected: Vec<&RefPlayer> = self.players.iter().filter(|p| p.best.is_some()).collect();
        expected.sort_by(|a, b| {
            let (a, b) = (a.best.as_ref().unwrap(), b.best.as_ref().unwrap());
            b.confidence.total_cmp(&a.confidence).then(a.order.cmp(&b.order))
        });
        if view.rows.len() != expected.len() {
            return Err(format!("{} board rows, expected {}", view.rows.len(), expected.len()));
        }
        for (i, (row, want)) in view.rows.iter().zip(&expected).enumerate() {
            let best = want.best.as_ref().unwrap();
            if row.rank != i + 1 || row.player_id != want.id {
                return Err(format!("rank {} holds {} instead of {}", i + 1, row.player_id, want.id));
            }
            let shown = match self.reveal {
                Reveal::Hidden => false,
                Reveal::Top(n) => row.rank <= n,
            };
            match row.confidence {
                Some(_) if !shown => return Err(format!("rank {} shows a score under {:?}", row.rank, self.reveal)),
                None if shown => return Err(format!("rank {} hides its score under {:?}", row.rank, self.reveal)),
                Some(c) if c as f64 != best.confidence => {
                    return Err(format!("rank {} shows {c}, oracle {}", row.rank, best.confidence))
                }
                _ => {}
            }
            let px = row.thumbnail.image().get_pixel(0, 0).0;
            if px != [best.level; 3] {
                return Err(format!("rank {} thumbnail is not the best frame", row.rank));
            }
        }
        Ok(())
    }

    /// Resumes, checks the teacher's last board matches the session, then
    /// ends the session and checks every image buffer was released.
    pub fn finish(mut self) -> Result<(), String> {
        if self.paused {
            self.apply(&Op::Pause(false))?;
        }
        let view = self.session.leaderboard_view().map_err(|e| e.to_string())?;
        let last = self
            .teacher
            .lock()
            .unwrap()
            .iter()
            .rev()
            .find_map(|e| match e {
                SessionEvent::Board(b) => Some(b.clone()),
                SessionEvent::Welcome { snapshot, .. } => snapshot.board.clone(),
                _ => None,
            });
        if last.as_ref() != Some(&view) {
            return Err("teacher's last board differs from the session".into());
        }
        drop((last, view));
        self.registry.end_session(self.session.id()).map_err(|e| e.to_string())?;
        self.teacher.lock().unwrap().clear();
        let retained = self.registry.retained_images();
        if retained != 0 {
            return Err(format!("{retained} image buffers retained after end"));
        }
        Ok(())
    }
}
