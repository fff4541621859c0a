use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use image::RgbImage;
use rand::RngCore;

use super::images::ImageTracker;
use super::state::Session;
use super::{PlayerId, SessionConfig, SessionError, SessionId};
use crate::model::Model;

pub const DEFAULT_MAX_SESSIONS: usize = 8;

/// Random bytes behind each join token and teacher key (144 bits).
const TOKEN_BYTES: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistryConfig {
    pub max_sessions: usize,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            max_sessions: DEFAULT_MAX_SESSIONS,
        }
    }
}

#[derive(Default)]
struct Tables {
    sessions: HashMap<SessionId, Arc<Session>>,
    tokens: HashMap<String, SessionId>,
}

/// All live sessions. In memory only: a restarted server starts empty.
pub struct Registry {
    config: RegistryConfig,
    tracker: ImageTracker,
    tables: Mutex<Tables>,
}

pub(crate) fn random_token() -> String {
    let mut bytes = [0u8; TOKEN_BYTES];
    rand::rng().fill_bytes(&mut bytes);
    URL_SAFE_NO_PAD.encode(bytes)
}

pub(crate) fn random_hex(bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rand::rng().fill_bytes(&mut buf);
    buf.iter().map(|b| format!("{b:02x}")).collect()
}

impl Registry {
    pub fn new(config: RegistryConfig) -> Self {
        Self {
            config,
            tracker: ImageTracker::new(),
            tables: Mutex::new(Tables::default()),
        }
    }

    fn tables(&self) -> MutexGuard<'_, Tables> {
        self.tables.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Live image buffers across all sessions, including ones still queued
    /// for delivery.
    pub fn retained_images(&self) -> usize {
        self.tracker.retained()
    }

    pub fn tracker(&self) -> &ImageTracker {
        &self.tracker
    }

    pub fn session_count(&self) -> usize {
        self.tables().sessions.len()
    }

    pub fn create_session(
        &self,
        model: Arc<Model>,
        config: SessionConfig,
    ) -> Result<(SessionId, String), SessionError> {
        let mut tables = self.tables();
        if tables.sessions.len() >= self.config.max_sessions {
            return Err(SessionError::RegistryFull(self.config.max_sessions));
        }
        let id = loop {
            let id = SessionId(format!("s-{}", random_hex(8)));
            if !tables.sessions.contains_key(&id) {
                break id;
            }
        };
        let token = random_token();
        let session = Session::new(
            id.clone(),
            model,
            self.tracker.clone(),
            config,
            token.clone(),
            random_token(),
        )?;
        tables.sessions.insert(id.clone(), Arc::new(session));
        tables.tokens.insert(token.clone(), id.clone());
        log::info!("session created ({} live)", tables.sessions.len());
        Ok((id, token))
    }

    pub fn get(&self, id: &SessionId) -> Result<Arc<Session>, SessionError> {
        self.tables()
            .sessions
            .get(id)
            .cloned()
            .ok_or(SessionError::UnknownSession)
    }

    pub fn by_token(&self, token: &str) -> Result<Arc<Session>, SessionError> {
        let tables = self.tables();
        let id = tables.tokens.get(token).ok_or(SessionError::UnknownToken)?;
        tables
            .sessions
            .get(id)
            .cloned()
            .ok_or(SessionError::UnknownToken)
    }

    pub fn by_teacher_key(&self, key: &str) -> Result<Arc<Session>, SessionError> {
        self.tables()
            .sessions
            .values()
            .find(|s| s.teacher_key_matches(key))
            .cloned()
            .ok_or(SessionError::UnknownCredential)
    }

    /// Adds a player to the session behind `token`.
    pub fn join(
        &self,
        token: &str,
        display_name: &str,
        avatar: Option<RgbImage>,
    ) -> Result<(Arc<Session>, PlayerId), SessionError> {
        let session = self.by_token(token)?;
        let player = session.add_player(display_name, avatar)?;
        Ok((session, player))
    }

    /// Issues a fresh join token; the previous one stops resolving.
    pub fn regenerate_token(&self, id: &SessionId) -> Result<String, SessionError> {
        let mut tables = self.tables();
        let session = tables
            .sessions
            .get(id)
            .cloned()
            .ok_or(SessionError::UnknownSession)?;
        let token = random_token();
        session.set_join_token(token.clone())?;
        tables.tokens.retain(|_, sid| sid != id);
        tables.tokens.insert(token.clone(), id.clone());
        Ok(token)
    }

    /// Removes and purges a session. Ending an unknown or already ended
    /// session succeeds without effect.
    pub fn end_session(&self, id: &SessionId) -> Result<(), SessionError> {
        let removed = {
            let mut tables = self.tables();
            tables.tokens.retain(|_, sid| sid != id);
            tables.sessions.remove(id)
        };
        if let Some(session) = removed {
            session.purge();
            log::info!("session ended ({} live)", self.session_count());
        }
        Ok(())
    }

    /// Ends every session; used on shutdown.
    pub fn end_all(&self) {
        let ids: Vec<SessionId> = self.tables().sessions.keys().cloned().collect();
        for id in ids {
            let _ = self.end_session(&id);
        }
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::new(RegistryConfig::default())
    }
}
