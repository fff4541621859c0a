//! Locality filter and connection audit.
//!
//! The server talks only to machines on the local network. Every accepted
//! TCP connection passes through [`AuditedListener`], which drops peers
//! outside loopback, private and link-local ranges before any byte is read
//! and records the decision in a [`NetAudit`].

use std::io;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::connect_info::Connected;
use axum::serve::{IncomingStream, Listener};
use serde::Serialize;
use tokio::net::{TcpListener, TcpStream};

fn is_local_v4(ip: Ipv4Addr) -> bool {
    ip.is_loopback() || ip.is_private() || ip.is_link_local()
}

fn is_local_v6(ip: Ipv6Addr) -> bool {
    if let Some(v4) = ip.to_ipv4_mapped() {
        return is_local_v4(v4);
    }
    let first = ip.segments()[0];
    ip.is_loopback()
        || (first & 0xfe00) == 0xfc00 // unique local
        || (first & 0xffc0) == 0xfe80 // link-local
}

/// Loopback, RFC 1918 private, link-local, and IPv6 unique-local addresses.
pub fn is_local(ip: IpAddr) -> bool {
    match ip {
        IpAddr::V4(v4) => is_local_v4(v4),
        IpAddr::V6(v6) => is_local_v6(v6),
    }
}

/// Addresses the server may listen on: local ones plus the wildcard.
pub fn is_bindable(ip: IpAddr) -> bool {
    ip.is_unspecified() || is_local(ip)
}

/// Counts of accepted and refused peers.
#[derive(Debug, Default)]
pub struct NetAudit {
    accepted: AtomicUsize,
    rejected_non_local: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NetCounts {
    pub accepted: usize,
    pub rejected_non_local: usize,
}

impl NetAudit {
    /// Records a connection attempt and returns whether to serve it.
    pub fn admit(&self, peer: IpAddr) -> bool {
        if is_local(peer) {
            self.accepted.fetch_add(1, Ordering::Relaxed);
            true
        } else {
            self.rejected_non_local.fetch_add(1, Ordering::Relaxed);
            log::warn!("refused a connection from outside the local network");
            false
        }
    }

    pub fn counts(&self) -> NetCounts {
        NetCounts {
            accepted: self.accepted.load(Ordering::Relaxed),
            rejected_non_local: self.rejected_non_local.load(Ordering::Relaxed),
        }
    }
}

/// A TCP listener that only hands local peers to the HTTP stack.
pub struct AuditedListener {
    inner: TcpListener,
    audit: Arc<NetAudit>,
}

impl AuditedListener {
    pub fn new(inner: TcpListener, audit: Arc<NetAudit>) -> Self {
        Self { inner, audit }
    }
}

impl Listener for AuditedListener {
    type Io = TcpStream;
    type Addr = SocketAddr;

    async fn accept(&mut self) -> (Self::Io, Self::Addr) {
        loop {
            match self.inner.accept().await {
                Ok((stream, peer)) => {
                    if self.audit.admit(peer.ip()) {
                        let _ = stream.set_nodelay(true);
                        return (stream, peer);
                    }
                    drop(stream);
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            }
        }
    }

    fn local_addr(&self) -> io::Result<Self::Addr> {
        self.inner.local_addr()
    }
}

/// Remote address of an HTTP request.
#[derive(Debug, Clone, Copy)]
pub struct PeerAddr(pub SocketAddr);

impl Connected<IncomingStream<'_, AuditedListener>> for PeerAddr {
    fn connect_info(stream: IncomingStream<'_, AuditedListener>) -> Self {
        PeerAddr(*stream.remote_addr())
    }
}

/// First private IPv4 address of this machine, for URLs students can reach.
pub fn lan_address() -> Option<IpAddr> {
    let mut addrs: Vec<Ipv4Addr> = if_addrs::get_if_addrs()
        .ok()?
        .into_iter()
        .filter_map(|i| match i.ip() {
            IpAddr::V4(v4) if v4.is_private() => Some(v4),
            _ => None,
        })
        .collect();
    addrs.sort();
    addrs.first().copied().map(IpAddr::V4)
}
