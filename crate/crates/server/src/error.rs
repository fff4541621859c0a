use std::io;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use bm_core::session::SessionError;
use bm_core::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot read model file {}: {source}", path.display())]
    ModelRead { path: PathBuf, source: io::Error },
    #[error("model file {} is not a valid BMN1 model: {source}", path.display())]
    ModelInvalid { path: PathBuf, source: NnError },
    #[error("dataset {}: {reason}", path.display())]
    Dataset { path: PathBuf, reason: String },
    #[error("refusing to bind {0}: only loopback, private or link-local addresses are served")]
    NonLocalBind(IpAddr),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error(transparent)]
    Session(#[from] SessionError),
}
