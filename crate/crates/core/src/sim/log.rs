//! Append-only event log.
//!
//! One event per line, tab-separated:
//!
//! ```text
//! tick  seq  kind  principals  digest  detail
//! ```
//!
//! `seq` counts events within a tick. `digest` is the hex SHA-256 of the
//! message bytes for message events and `-` otherwise. Message bytes live in
//! a sidecar keyed by digest: repeated records of 32 digest octets, a 4-octet
//! big-endian length, then the bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::ids::Tick;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Send,
    Deliver,
    Drop,
    Verdict,
    Rekey,
    Admit,
    Remove,
    Elect,
    Alert,
    Secret,
    Info,
}

impl EventKind {
    pub const ALL: [EventKind; 11] = [
        EventKind::Send,
        EventKind::Deliver,
        EventKind::Drop,
        EventKind::Verdict,
        EventKind::Rekey,
        EventKind::Admit,
        EventKind::Remove,
        EventKind::Elect,
        EventKind::Alert,
        EventKind::Secret,
        EventKind::Info,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Send => "send",
            EventKind::Deliver => "deliver",
            EventKind::Drop => "drop",
            EventKind::Verdict => "verdict",
            EventKind::Rekey => "rekey",
            EventKind::Admit => "admit",
            EventKind::Remove => "remove",
            EventKind::Elect => "elect",
            EventKind::Alert => "alert",
            EventKind::Secret => "secret",
            EventKind::Info => "info",
        }
    }
}

impl FromStr for EventKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or(())
    }
}

/// Hex SHA-256 of message bytes; the sidecar key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PayloadDigest(pub [u8; 32]);

impl PayloadDigest {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }
}

impl fmt::Display for PayloadDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for PayloadDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PayloadDigest({})", &hex::encode(self.0)[..12])
    }
}

impl FromStr for PayloadDigest {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let v = hex::decode(s).map_err(|_| ())?;
        Ok(Self(v.try_into().map_err(|_| ())?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub tick: Tick,
    pub seq: u32,
    pub kind: EventKind,
    pub principals: String,
    pub digest: Option<PayloadDigest>,
    pub detail: String,
}

impl Event {
    /// Whitespace-separated detail words.
    pub fn words(&self) -> Vec<&str> {
        self.detail.split_whitespace().collect()
    }

    /// Sender and recipients of a send (`A>B,C`) or deliver/drop (`B<A`).
    pub fn endpoints(&self) -> (&str, Vec<&str>) {
        if let Some((from, to)) = self.principals.split_once('>') {
            (from, to.split(',').filter(|s| !s.is_empty()).collect())
        } else if let Some((to, from)) = self.principals.split_once('<') {
            (from, vec![to])
        } else {
            (self.principals.as_str(), Vec::new())
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let digest = self.digest.map(|d| d.to_string()).unwrap_or_else(|| "-".into());
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.tick,
            self.seq,
            self.kind.name(),
            self.principals,
            digest,
            self.detail
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("line {0}: expected 6 tab-separated fields")]
    Fields(usize),
    #[error("line {0}: bad {1}")]
    Field(usize, &'static str),
    #[error("line {0}: events out of order")]
    Order(usize),
    #[error("log is truncated (no final `end` record)")]
    Truncated,
    #[error("sidecar is corrupt at offset {0}")]
    Sidecar(usize),
    #[error("sidecar record does not match its digest")]
    SidecarDigest,
}

/// The full record of a run: events plus the message bytes they reference.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
    pub payloads: BTreeMap<PayloadDigest, Vec<u8>>,
}

impl EventLog {
    pub fn push(
        &mut self,
        tick: Tick,
        kind: EventKind,
        principals: impl Into<String>,
        digest: Option<PayloadDigest>,
        detail: impl Into<String>,
    ) -> usize {
        let seq = match self.events.last() {
            Some(e) if e.tick == tick => e.seq + 1,
            _ => 0,
        };
        self.events.push(Event {
            tick,
            seq,
            kind,
            principals: principals.into(),
            digest,
            detail: detail.into(),
        });
        self.events.len() - 1
    }

    /// Stores `bytes` in the sidecar and returns their digest.
    pub fn store(&mut self, bytes: &[u8]) -> PayloadDigest {
        let d = PayloadDigest::of(bytes);
        self.payloads.entry(d).or_insert_with(|| bytes.to_vec());
        d
    }

    pub fn payload(&self, d: &PayloadDigest) -> Option<&[u8]> {
        self.payloads.get(d).map(|v| v.as_slice())
    }

    /// True when the final record is the end marker.
    pub fn is_complete(&self) -> bool {
        self.events
            .last()
            .is_some_and(|e| e.kind == EventKind::Info && e.detail == "end")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Vec<Event>, LogError> {
        let mut out: Vec<Event> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.splitn(6, '\t').collect();
            if f.len() != 6 {
                return Err(LogError::Fields(n));
            }
            let tick: Tick = f[0].parse().map_err(|_| LogError::Field(n, "tick"))?;
            let seq: u32 = f[1].parse().map_err(|_| LogError::Field(n, "seq"))?;
            let kind: EventKind = f[2].parse().map_err(|_| LogError::Field(n, "kind"))?;
            let digest = match f[4] {
                "-" => None,
                d => Some(d.parse().map_err(|_| LogError::Field(n, "digest"))?),
            };
            if let Some(prev) = out.last() {
                let expected = if prev.tick == tick { prev.seq + 1 } else { 0 };
                if tick < prev.tick || seq != expected {
                    return Err(LogError::Order(n));
                }
            } else if seq != 0 {
                return Err(LogError::Order(n));
            }
            out.push(Event {
                tick,
                seq,
                kind,
                principals: f[3].to_string(),
                digest,
                detail: f[5].to_string(),
            });
        }
        Ok(out)
    }

    pub fn sidecar_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (d, bytes) in &self.payloads {
            out.extend_from_slice(&d.0);
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn parse_sidecar(mut b: &[u8]) -> Result<BTreeMap<PayloadDigest, Vec<u8>>, LogError> {
        let total = b.len();
        let mut out = BTreeMap::new();
        while !b.is_empty() {
            let off = total - b.len();
            if b.len() < 36 {
                return Err(LogError::Sidecar(off));
            }
            let d = PayloadDigest(b[..32].try_into().unwrap());
            let len = u32::from_be_bytes(b[32..36].try_into().unwrap()) as usize;
            let body = b.get(36..36 + len).ok_or(LogError::Sidecar(off))?;
            if PayloadDigest::of(body) != d {
                return Err(LogError::SidecarDigest);
            }
            out.insert(d, body.to_vec());
            b = &b[36 + len..];
        }
        Ok(out)
    }

    /// Rebuilds a log from its two serialised halves.
    pub fn from_parts(text: &str, sidecar: &[u8]) -> Result<Self, LogError> {
        Ok(Self {
            events: Self::parse_text(text)?,
            payloads: Self::parse_sidecar(sidecar)?,
        })
    }
}
