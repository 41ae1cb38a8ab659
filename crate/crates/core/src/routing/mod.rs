//! Signed, hash-chained on-demand route discovery.
//!
//! # Chain and lifetime convention
//!
//! The lifetime carried by a broadcast is the value its broadcaster put into
//! its own chain term. The source broadcasts `L` with
//! `h_S = H(S, D, seq, L)`; each forwarder receiving lifetime `l > 0`
//! broadcasts `l - 1` and replaces the chain with `H(h_prev, self, l - 1)`.
//! A destination receiving lifetime `l` over the route `[S, n1, .., nk]`
//! therefore expects
//!
//! ```text
//! H(nk, l, H(n(k-1), l+1, .. H(n1, l+k-1, H(S, D, seq, l+k)) ..))
//! ```
//!
//! Any relay that consumes a lifetime decrement without appearing in the
//! route shifts every reconstructed term by one and breaks the match.
//!
//! # Signature coverage
//!
//! `DS_X` for the node at route position `i` signs
//! `(S, D, seq, route[0..=i])`, binding the signer to the discovery and to its
//! position. The destination's `DS_D` signs `(S, D, seq, full route, h_D)`.

pub mod intergroup;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::crypto::encoding::{DecodeError, Encoder, Reader, Tag};
use crate::crypto::{CryptoError, CryptoProvider, Digest, PrivateKey, PublicKey, Signature};
use crate::ids::{NodeId, Tick};

pub use intergroup::{compose_routes, ComposedRoute};

/// Wire type tags for routing messages.
pub const RREQ_TAG: u8 = 0x20;
pub const RREP_TAG: u8 = 0x21;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteRequest {
    pub source: NodeId,
    pub dest: NodeId,
    pub seq: u64,
    pub lifetime: u32,
    pub route: Vec<NodeId>,
    pub signatures: Vec<Signature>,
    pub chain: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteReply {
    pub source: NodeId,
    pub dest: NodeId,
    pub seq: u64,
    /// `[S, n1, .., nk, D]`.
    pub route: Vec<NodeId>,
    /// One per route entry, the last being `DS_D`.
    pub signatures: Vec<Signature>,
    pub chain: Digest,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rejection {
    #[error("chain_mismatch")]
    ChainMismatch,
    #[error("bad_signature")]
    BadSignature,
    #[error("stale_seq")]
    StaleSeq,
    #[error("duplicate")]
    Duplicate,
    #[error("lifetime_exhausted")]
    LifetimeExhausted,
    #[error("loop")]
    Loop,
    #[error("foreign_group")]
    ForeignGroup,
    #[error("not_on_path")]
    NotOnPath,
    #[error("wrong_endpoint")]
    WrongEndpoint,
}

impl Rejection {
    pub fn as_str(&self) -> &'static str {
        match self {
            Rejection::ChainMismatch => "chain_mismatch",
            Rejection::BadSignature => "bad_signature",
            Rejection::StaleSeq => "stale_seq",
            Rejection::Duplicate => "duplicate",
            Rejection::LifetimeExhausted => "lifetime_exhausted",
            Rejection::Loop => "loop",
            Rejection::ForeignGroup => "foreign_group",
            Rejection::NotOnPath => "not_on_path",
            Rejection::WrongEndpoint => "wrong_endpoint",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Rejection::ChainMismatch,
            Rejection::BadSignature,
            Rejection::StaleSeq,
            Rejection::Duplicate,
            Rejection::LifetimeExhausted,
            Rejection::Loop,
            Rejection::ForeignGroup,
            Rejection::NotOnPath,
            Rejection::WrongEndpoint,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }

    /// Silent discards are protocol hygiene, not attack detections.
    pub fn is_silent(&self) -> bool {
        matches!(self, Rejection::Duplicate | Rejection::LifetimeExhausted)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RoutingError {
    #[error("route lifetime must be at least 1")]
    ZeroLifetime,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Public-key directory of the nodes a router accepts traffic from.
pub trait KeyLookup {
    fn public_key(&self, node: NodeId) -> Option<&PublicKey>;
}

impl KeyLookup for BTreeMap<NodeId, PublicKey> {
    fn public_key(&self, node: NodeId) -> Option<&PublicKey> {
        self.get(&node)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RouterConfig {
    /// Intermediate nodes also reconstruct the chain before forwarding.
    pub strict_chain: bool,
}

pub fn origin_chain(p: &dyn CryptoProvider, source: NodeId, dest: NodeId, seq: u64, lifetime: u32) -> Digest {
    p.hash(
        &Encoder::new()
            .node(Tag::Source, source)
            .node(Tag::Dest, dest)
            .u64(Tag::Seq, seq)
            .u32(Tag::Lifetime, lifetime)
            .finish(),
    )
}

pub fn chain_step(p: &dyn CryptoProvider, prev: &Digest, node: NodeId, lifetime: u32) -> Digest {
    p.hash(
        &Encoder::new()
            .bytes(Tag::Chain, prev.as_bytes())
            .node(Tag::Node, node)
            .u32(Tag::Lifetime, lifetime)
            .finish(),
    )
}

/// Chain over `route = [S, n1..nk]` with the given per-position lifetimes
/// (`lifetimes[0]` for `S`). `None` if any lifetime is out of range.
pub fn chain_with_lifetimes(
    p: &dyn CryptoProvider,
    dest: NodeId,
    seq: u64,
    route: &[NodeId],
    lifetimes: &[u64],
) -> Option<Digest> {
    let (&source, hops) = route.split_first()?;
    let first = u32::try_from(*lifetimes.first()?).ok()?;
    let mut h = origin_chain(p, source, dest, seq, first);
    for (node, l) in hops.iter().zip(&lifetimes[1..]) {
        h = chain_step(p, &h, *node, u32::try_from(*l).ok()?);
    }
    Some(h)
}

/// Destination-side reconstruction from the received lifetime.
pub fn reconstruct_chain(
    p: &dyn CryptoProvider,
    dest: NodeId,
    seq: u64,
    route: &[NodeId],
    received_lifetime: u32,
) -> Option<Digest> {
    let k = route.len().checked_sub(1)? as u64;
    let lifetimes: Vec<u64> = (0..=k).map(|i| received_lifetime as u64 + k - i).collect();
    chain_with_lifetimes(p, dest, seq, route, &lifetimes)
}

/// Source-side computation from the lifetime the source originally chose.
pub fn chain_from_origin(
    p: &dyn CryptoProvider,
    dest: NodeId,
    seq: u64,
    route: &[NodeId],
    origin_lifetime: u32,
) -> Option<Digest> {
    let lifetimes: Vec<u64> = (0..route.len() as u64)
        .map(|i| (origin_lifetime as u64).checked_sub(i))
        .collect::<Option<_>>()?;
    chain_with_lifetimes(p, dest, seq, route, &lifetimes)
}

pub fn hop_signing_bytes(source: NodeId, dest: NodeId, seq: u64, prefix: &[NodeId]) -> Vec<u8> {
    Encoder::new()
        .node(Tag::Source, source)
        .node(Tag::Dest, dest)
        .u64(Tag::Seq, seq)
        .nodes(Tag::Node, prefix)
        .finish()
}

pub fn reply_signing_bytes(source: NodeId, dest: NodeId, seq: u64, route: &[NodeId], chain: &Digest) -> Vec<u8> {
    Encoder::new()
        .node(Tag::Source, source)
        .node(Tag::Dest, dest)
        .u64(Tag::Seq, seq)
        .nodes(Tag::Node, route)
        .bytes(Tag::Chain, chain.as_bytes())
        .finish()
}

fn verify_hop_signatures(
    p: &dyn CryptoProvider,
    source: NodeId,
    dest: NodeId,
    seq: u64,
    route: &[NodeId],
    signatures: &[Signature],
    dir: &dyn KeyLookup,
) -> Result<(), Rejection> {
    if route.is_empty() || signatures.len() != route.len() || route[0] != source {
        return Err(Rejection::BadSignature);
    }
    for (i, (node, sig)) in route.iter().zip(signatures).enumerate() {
        let pk = dir.public_key(*node).ok_or(Rejection::BadSignature)?;
        if !p.verify(pk, &hop_signing_bytes(source, dest, seq, &route[..=i]), sig) {
            return Err(Rejection::BadSignature);
        }
    }
    Ok(())
}

pub fn make_rreq(
    p: &dyn CryptoProvider,
    private: &PrivateKey,
    source: NodeId,
    dest: NodeId,
    seq: u64,
    lifetime: u32,
) -> Result<RouteRequest, RoutingError> {
    if lifetime < 1 {
        return Err(RoutingError::ZeroLifetime);
    }
    let route = vec![source];
    let sig = p.sign(private, &hop_signing_bytes(source, dest, seq, &route))?;
    Ok(RouteRequest {
        source,
        dest,
        seq,
        lifetime,
        route,
        signatures: vec![sig],
        chain: origin_chain(p, source, dest, seq, lifetime),
    })
}

/// Duplicate-suppression cache: each `(source, seq)` is processed once.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SeqCache {
    seen: BTreeSet<(NodeId, u64)>,
}

impl SeqCache {
    pub fn seen(&self, source: NodeId, seq: u64) -> bool {
        self.seen.contains(&(source, seq))
    }

    /// Returns `false` if the pair was already present.
    pub fn insert(&mut self, source: NodeId, seq: u64) -> bool {
        self.seen.insert((source, seq))
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// Intermediate-node processing. On success the returned request is the one
/// to rebroadcast and `(source, seq)` is marked in `cache`.
#[allow(clippy::too_many_arguments)]
pub fn forward_rreq(
    p: &dyn CryptoProvider,
    node: NodeId,
    private: &PrivateKey,
    rreq: &RouteRequest,
    dir: &dyn KeyLookup,
    cache: &mut SeqCache,
    cfg: &RouterConfig,
) -> Result<RouteRequest, Rejection> {
    let sender = *rreq.route.last().ok_or(Rejection::BadSignature)?;
    if dir.public_key(sender).is_none() {
        return Err(Rejection::ForeignGroup);
    }
    if cache.seen(rreq.source, rreq.seq) {
        return Err(Rejection::Duplicate);
    }
    if rreq.route.contains(&node) {
        return Err(Rejection::Loop);
    }
    if rreq.lifetime == 0 {
        return Err(Rejection::LifetimeExhausted);
    }
    verify_hop_signatures(p, rreq.source, rreq.dest, rreq.seq, &rreq.route, &rreq.signatures, dir)?;
    if cfg.strict_chain {
        let expected =
            reconstruct_chain(p, rreq.dest, rreq.seq, &rreq.route, rreq.lifetime).ok_or(Rejection::ChainMismatch)?;
        if expected != rreq.chain {
            return Err(Rejection::ChainMismatch);
        }
    }
    cache.insert(rreq.source, rreq.seq);
    let mut route = rreq.route.clone();
    route.push(node);
    let sig = p
        .sign(private, &hop_signing_bytes(rreq.source, rreq.dest, rreq.seq, &route))
        .map_err(|_| Rejection::BadSignature)?;
    let mut signatures = rreq.signatures.clone();
    signatures.push(sig);
    let lifetime = rreq.lifetime - 1;
    Ok(RouteRequest {
        source: rreq.source,
        dest: rreq.dest,
        seq: rreq.seq,
        lifetime,
        chain: chain_step(p, &rreq.chain, node, lifetime),
        route,
        signatures,
    })
}

/// Destination check. Returns the reconstructed chain (which becomes `h_D`).
///
/// `last_accepted_seq` is the highest sequence number this destination has
/// already answered for the request's source.
pub fn destination_verify(
    p: &dyn CryptoProvider,
    dest: NodeId,
    rreq: &RouteRequest,
    dir: &dyn KeyLookup,
    last_accepted_seq: Option<u64>,
) -> Result<Digest, Rejection> {
    if rreq.dest != dest {
        return Err(Rejection::WrongEndpoint);
    }
    verify_hop_signatures(p, rreq.source, rreq.dest, rreq.seq, &rreq.route, &rreq.signatures, dir)?;
    let expected = reconstruct_chain(p, dest, rreq.seq, &rreq.route, rreq.lifetime).ok_or(Rejection::ChainMismatch)?;
    if expected != rreq.chain {
        return Err(Rejection::ChainMismatch);
    }
    if last_accepted_seq.is_some_and(|last| rreq.seq <= last) {
        return Err(Rejection::StaleSeq);
    }
    Ok(expected)
}

pub fn make_rrep(
    p: &dyn CryptoProvider,
    dest: NodeId,
    private: &PrivateKey,
    rreq: &RouteRequest,
    verified_chain: Digest,
) -> Result<RouteReply, CryptoError> {
    let mut route = rreq.route.clone();
    route.push(dest);
    let sig = p.sign(
        private,
        &reply_signing_bytes(rreq.source, dest, rreq.seq, &route, &verified_chain),
    )?;
    let mut signatures = rreq.signatures.clone();
    signatures.push(sig);
    Ok(RouteReply {
        source: rreq.source,
        dest,
        seq: rreq.seq,
        route,
        signatures,
        chain: verified_chain,
    })
}

impl RouteReply {
    /// Node the reply travels to after `node`, walking the route backwards.
    pub fn previous_hop(&self, node: NodeId) -> Option<NodeId> {
        let i = self.route.iter().position(|n| *n == node)?;
        i.checked_sub(1).map(|j| self.route[j])
    }
}

fn verify_dest_signature(p: &dyn CryptoProvider, rrep: &RouteReply, dir: &dyn KeyLookup) -> Result<(), Rejection> {
    let (last, rest) = rrep.route.split_last().ok_or(Rejection::BadSignature)?;
    if *last != rrep.dest || rest.is_empty() || rrep.signatures.len() != rrep.route.len() {
        return Err(Rejection::BadSignature);
    }
    let pk = dir.public_key(rrep.dest).ok_or(Rejection::BadSignature)?;
    let bytes = reply_signing_bytes(rrep.source, rrep.dest, rrep.seq, &rrep.route, &rrep.chain);
    if !p.verify(pk, &bytes, rrep.signatures.last().unwrap()) {
        return Err(Rejection::BadSignature);
    }
    Ok(())
}

/// Intermediate relay of a reply. Returns the next hop toward the source.
pub fn forward_rrep(
    p: &dyn CryptoProvider,
    node: NodeId,
    rrep: &RouteReply,
    dir: &dyn KeyLookup,
) -> Result<NodeId, Rejection> {
    let pos = rrep.route.iter().position(|n| *n == node).ok_or(Rejection::NotOnPath)?;
    if pos == 0 || pos + 1 >= rrep.route.len() {
        return Err(Rejection::NotOnPath);
    }
    verify_dest_signature(p, rrep, dir)?;
    Ok(rrep.route[pos - 1])
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteEntry {
    pub next_hop: NodeId,
    pub route: Vec<NodeId>,
    pub seq: u64,
    pub learned_at: Tick,
}

/// At most one entry per destination; an entry's seq never decreases.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingTable {
    entries: BTreeMap<NodeId, RouteEntry>,
}

impl RoutingTable {
    pub fn get(&self, dest: NodeId) -> Option<&RouteEntry> {
        self.entries.get(&dest)
    }

    pub fn seq_for(&self, dest: NodeId) -> Option<u64> {
        self.entries.get(&dest).map(|e| e.seq)
    }

    /// Installs a route starting at the table owner. Refuses stale seqs.
    pub fn install(&mut self, dest: NodeId, route: Vec<NodeId>, seq: u64, tick: Tick) -> Result<(), Rejection> {
        if self.seq_for(dest).is_some_and(|s| seq <= s) {
            return Err(Rejection::StaleSeq);
        }
        let next_hop = *route.get(1).ok_or(Rejection::NotOnPath)?;
        self.entries.insert(
            dest,
            RouteEntry {
                next_hop,
                route,
                seq,
                learned_at: tick,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &RouteEntry)> {
        self.entries.iter()
    }
}

/// Source check of a reply against the lifetime it originally chose; installs
/// the route on success.
pub fn source_verify(
    p: &dyn CryptoProvider,
    source: NodeId,
    origin_lifetime: u32,
    rrep: &RouteReply,
    dir: &dyn KeyLookup,
    table: &mut RoutingTable,
    tick: Tick,
) -> Result<(), Rejection> {
    if rrep.source != source || rrep.route.first() != Some(&source) {
        return Err(Rejection::WrongEndpoint);
    }
    verify_dest_signature(p, rrep, dir)?;
    let hops = &rrep.route[..rrep.route.len() - 1];
    verify_hop_signatures(
        p,
        rrep.source,
        rrep.dest,
        rrep.seq,
        hops,
        &rrep.signatures[..hops.len()],
        dir,
    )?;
    let expected = chain_from_origin(p, rrep.dest, rrep.seq, hops, origin_lifetime).ok_or(Rejection::ChainMismatch)?;
    if expected != rrep.chain {
        return Err(Rejection::ChainMismatch);
    }
    table.install(rrep.dest, rrep.route.clone(), rrep.seq, tick)
}

impl RouteRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::with_type(RREQ_TAG)
            .node(Tag::Source, self.source)
            .node(Tag::Dest, self.dest)
            .u64(Tag::Seq, self.seq)
            .u32(Tag::Lifetime, self.lifetime)
            .nodes(Tag::Node, &self.route);
        for s in &self.signatures {
            e.push(Tag::Signature, &s.bytes);
        }
        e.bytes(Tag::Chain, self.chain.as_bytes()).finish()
    }

    /// Decodes the field sequence after the type tag.
    pub fn decode_body(body: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(body)?;
        let source = r.node(Tag::Source)?;
        let dest = r.node(Tag::Dest)?;
        let seq = r.u64(Tag::Seq)?;
        let lifetime = r.u32(Tag::Lifetime)?;
        let route = r.nodes(Tag::Node)?;
        let signatures = r
            .repeated(Tag::Signature)
            .iter()
            .map(|f| Signature::new(f.value.to_vec()))
            .collect();
        let chain = Digest(r.bytes(Tag::Chain)?.to_vec());
        r.finish()?;
        Ok(Self {
            source,
            dest,
            seq,
            lifetime,
            route,
            signatures,
            chain,
        })
    }
}

impl RouteReply {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::with_type(RREP_TAG)
            .node(Tag::Source, self.source)
            .node(Tag::Dest, self.dest)
            .u64(Tag::Seq, self.seq)
            .nodes(Tag::Node, &self.route);
        for s in &self.signatures {
            e.push(Tag::Signature, &s.bytes);
        }
        e.bytes(Tag::Chain, self.chain.as_bytes()).finish()
    }

    pub fn decode_body(body: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(body)?;
        let source = r.node(Tag::Source)?;
        let dest = r.node(Tag::Dest)?;
        let seq = r.u64(Tag::Seq)?;
        let route = r.nodes(Tag::Node)?;
        let signatures = r
            .repeated(Tag::Signature)
            .iter()
            .map(|f| Signature::new(f.value.to_vec()))
            .collect();
        let chain = Digest(r.bytes(Tag::Chain)?.to_vec());
        r.finish()?;
        Ok(Self {
            source,
            dest,
            seq,
            route,
            signatures,
            chain,
        })
    }
}

#[cfg(test)]
mod tests;
