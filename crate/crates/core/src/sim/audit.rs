//! Post-run security audit over a recorded event log.
//!
//! The auditor is a pure function of the log: it reads the header for
//! identities and public keys, replays every message each principal sent,
//! received or overheard, and closes each principal's knowledge under
//! decryption. Property checks then compare what principals could learn with
//! what the membership record entitles them to.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use num_bigint::BigUint;
use thiserror::Error;

use super::log::{Event, EventKind, EventLog};
use super::scenario::Expectation;
use crate::crypto::zk::{zk_verify, ZkPublicParams};
use crate::crypto::{CryptoProvider, PrivateKey, ProviderKind, PublicKey, SymmetricKey};
use crate::ids::{GroupId, NodeId, Tick};
use crate::keymgmt::{verify_certificate, KeyId, KeyRecord};
use crate::routing::{chain_from_origin, hop_signing_bytes, reconstruct_chain, RouteReply, RouteRequest};
use crate::wire::{key_records, BlobKind, Message};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuditError {
    #[error("log is truncated (no final `end` record)")]
    Truncated,
    #[error("log header is missing `{0}`")]
    Header(&'static str),
    #[error("unknown provider `{0}`")]
    Provider(String),
    #[error("unknown principal `{0}`")]
    UnknownPrincipal(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PropertyVerdict {
    pub name: &'static str,
    /// Counter-example event indices; empty means the property holds.
    pub counterexamples: Vec<usize>,
}

impl PropertyVerdict {
    pub fn pass(&self) -> bool {
        self.counterexamples.is_empty()
    }
}

impl fmt::Display for PropertyVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.pass() {
            write!(f, "{} PASS", self.name)
        } else {
            let idx: Vec<String> = self.counterexamples.iter().map(|i| i.to_string()).collect();
            write!(f, "{} FAIL {}", self.name, idx.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditReport {
    pub properties: Vec<PropertyVerdict>,
}

impl AuditReport {
    pub fn all_pass(&self) -> bool {
        self.properties.iter().all(|p| p.pass())
    }

    pub fn get(&self, name: &str) -> Option<&PropertyVerdict> {
        self.properties.iter().find(|p| p.name == name)
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.properties {
            writeln!(f, "{p}")?;
        }
        Ok(())
    }
}

/// What one principal can derive from the log.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Knowledge {
    /// Every symmetric or private key held, with the index it was obtained at.
    pub keys: BTreeMap<KeyId, usize>,
    /// Ciphertexts seen and opened.
    pub opened: usize,
    /// Ciphertexts seen and not opened.
    pub sealed: usize,
}

/// Closure of `principal`'s knowledge over events with tick ≤ `upto`.
pub fn knowledge_set(log: &EventLog, principal: &str, upto: Tick) -> Result<Knowledge, AuditError> {
    let a = Auditor::new(log)?;
    if !a.principals.contains_key(principal) {
        return Err(AuditError::UnknownPrincipal(principal.to_string()));
    }
    let end = log
        .events
        .iter()
        .position(|e| e.tick > upto)
        .unwrap_or(log.events.len());
    let k = a.closure(principal, end);
    Ok(Knowledge {
        keys: k.obtained,
        opened: k.opened,
        sealed: k.sealed,
    })
}

pub fn audit(log: &EventLog) -> Result<AuditReport, AuditError> {
    let a = Auditor::new(log)?;
    let closures: BTreeMap<String, Closure> = a
        .principals
        .keys()
        .map(|p| (p.clone(), a.closure(p, log.events.len())))
        .collect();
    let (forward, backward, confidentiality) = a.secrecy(&closures);
    Ok(AuditReport {
        properties: vec![
            verdict("key_confidentiality", confidentiality),
            verdict("forward_secrecy", forward),
            verdict("backward_secrecy", backward),
            verdict("mutual_auth", a.mutual_auth()),
            verdict("chain_soundness", a.chain_soundness()),
            verdict("duplicate_suppression", a.duplicate_suppression()),
            verdict("epoch_monotonicity", a.epoch_monotonicity()),
            verdict("detection_outcomes", a.detection_outcomes()),
        ],
    })
}

fn verdict(name: &'static str, mut idx: Vec<usize>) -> PropertyVerdict {
    idx.sort_unstable();
    idx.dedup();
    PropertyVerdict {
        name,
        counterexamples: idx,
    }
}

#[derive(Clone, Copy, Debug)]
struct Interval {
    open: usize,
    close: Option<(usize, Tick)>,
}

#[derive(Default)]
struct Closure {
    sym: BTreeMap<KeyId, SymmetricKey>,
    private: BTreeMap<NodeId, PrivateKey>,
    obtained: BTreeMap<KeyId, usize>,
    /// Keys learned since the last retry of unopened ciphertexts.
    fresh: Vec<KeyId>,
    opened: usize,
    sealed: usize,
}

impl Closure {
    fn learn(&mut self, rec: &KeyRecord, idx: usize) -> bool {
        if self.obtained.contains_key(&rec.id) {
            return false;
        }
        match rec.id {
            KeyId::Private(n) => {
                self.private.insert(n, PrivateKey(rec.bytes.clone()));
            }
            KeyId::LeaderSecret { .. } => {}
            _ => match rec.sym_key() {
                Some(k) => {
                    self.sym.insert(rec.id, k);
                }
                None => return false,
            },
        }
        self.obtained.insert(rec.id, idx);
        self.fresh.push(rec.id);
        true
    }

    /// Retries a ciphertext with only the keys in `fresh`.
    fn reopen(
        &self,
        p: &dyn CryptoProvider,
        fresh: &[KeyId],
        kind: BlobKind,
        key: &KeyId,
        bytes: &[u8],
    ) -> Option<Vec<u8>> {
        let held = match kind {
            BlobKind::Symmetric => self.sym.contains_key(key),
            BlobKind::PublicKey => matches!(key, KeyId::Private(n) if self.private.contains_key(n)),
        };
        if held && !fresh.contains(key) {
            return None;
        }
        if fresh.contains(key) {
            return self.open(p, kind, key, bytes);
        }
        fresh.iter().find_map(|f| match (kind, f) {
            (BlobKind::Symmetric, _) => self.sym.get(f).and_then(|k| p.sym_decrypt(k, bytes).ok()),
            (BlobKind::PublicKey, KeyId::Private(n)) => self.private.get(n).and_then(|k| p.pk_decrypt(k, bytes).ok()),
            _ => None,
        })
    }

    /// Opens a ciphertext by its named key first, then by trial.
    fn open(&self, p: &dyn CryptoProvider, kind: BlobKind, key: &KeyId, bytes: &[u8]) -> Option<Vec<u8>> {
        match kind {
            BlobKind::Symmetric => {
                if let Some(k) = self.sym.get(key) {
                    return p.sym_decrypt(k, bytes).ok();
                }
                self.sym.values().find_map(|k| p.sym_decrypt(k, bytes).ok())
            }
            BlobKind::PublicKey => {
                if let KeyId::Private(n) = key {
                    if let Some(k) = self.private.get(n) {
                        return p.pk_decrypt(k, bytes).ok();
                    }
                }
                self.private.values().find_map(|k| p.pk_decrypt(k, bytes).ok())
            }
        }
    }
}

struct Auditor<'l> {
    log: &'l EventLog,
    p: Arc<dyn CryptoProvider>,
    ttp: PublicKey,
    /// Name to id for nodes and link adversaries.
    principals: BTreeMap<String, NodeId>,
    names: BTreeMap<NodeId, String>,
    pubkeys: BTreeMap<NodeId, PublicKey>,
    adversaries: BTreeSet<String>,
    groups: BTreeMap<String, GroupId>,
    messages: BTreeMap<usize, Message>,
    /// Membership per (principal, group).
    intervals: BTreeMap<(String, GroupId), Vec<Interval>>,
    /// First secret event per key.
    created: BTreeMap<KeyId, usize>,
    /// Principals named on each key's secret events.
    owners: BTreeMap<KeyId, BTreeSet<String>>,
}

fn parse_group(s: &str) -> Option<GroupId> {
    s.strip_prefix('g')?.parse().ok().map(GroupId)
}

fn parse_node(s: &str) -> Option<NodeId> {
    s.strip_prefix('n')?.parse().ok().map(NodeId)
}

fn parse_secret(e: &Event) -> Option<KeyRecord> {
    let w = e.words();
    let id: KeyId = w.first()?.parse().ok()?;
    let bytes = hex::decode(w.get(1)?).ok()?;
    Some(KeyRecord { id, bytes })
}

impl<'l> Auditor<'l> {
    fn new(log: &'l EventLog) -> Result<Self, AuditError> {
        if !log.is_complete() {
            return Err(AuditError::Truncated);
        }
        let mut provider = None;
        let mut ttp = None;
        let mut principals = BTreeMap::new();
        let mut pubkeys = BTreeMap::new();
        let mut adversaries = BTreeSet::new();
        let mut groups = BTreeMap::new();
        for e in log.events.iter().filter(|e| e.kind == EventKind::Info && e.tick == 0) {
            let w = e.words();
            match w.as_slice() {
                ["provider", name] => provider = Some(name.to_string()),
                ["ttp", pk] => ttp = hex::decode(pk).ok().map(PublicKey),
                ["node", id, pk] => {
                    if let (Some(id), Ok(pk)) = (parse_node(id), hex::decode(pk)) {
                        principals.insert(e.principals.clone(), id);
                        pubkeys.insert(id, PublicKey(pk));
                    }
                }
                ["adversary", id, "link", ..] => {
                    if let Some(id) = parse_node(id) {
                        principals.insert(e.principals.clone(), id);
                    }
                    adversaries.insert(e.principals.clone());
                }
                ["adversary", ..] => {
                    adversaries.insert(e.principals.clone());
                }
                ["group", g, name] => {
                    if let Some(g) = parse_group(g) {
                        groups.insert(name.to_string(), g);
                    }
                }
                _ => {}
            }
        }
        let provider = provider.ok_or(AuditError::Header("provider"))?;
        let kind = ProviderKind::from_name(&provider).ok_or(AuditError::Provider(provider))?;
        let ttp = ttp.ok_or(AuditError::Header("ttp"))?;
        let names = principals.iter().map(|(n, id)| (*id, n.clone())).collect();
        let mut messages = BTreeMap::new();
        let mut intervals: BTreeMap<(String, GroupId), Vec<Interval>> = BTreeMap::new();
        let mut created = BTreeMap::new();
        let mut owners: BTreeMap<KeyId, BTreeSet<String>> = BTreeMap::new();
        for (i, e) in log.events.iter().enumerate() {
            match e.kind {
                EventKind::Send => {
                    if let Some(m) = e
                        .digest
                        .and_then(|d| log.payload(&d))
                        .and_then(|b| Message::decode(b).ok())
                    {
                        messages.insert(i, m);
                    }
                }
                EventKind::Verdict => {
                    if let Some(m) = e
                        .digest
                        .and_then(|d| log.payload(&d))
                        .and_then(|b| Message::decode(b).ok())
                    {
                        messages.insert(i, m);
                    }
                }
                EventKind::Admit | EventKind::Elect => {
                    if let Some(g) = e.words().first().and_then(|g| parse_group(g)) {
                        let v = intervals.entry((e.principals.clone(), g)).or_default();
                        if v.last().is_none_or(|iv| iv.close.is_some()) {
                            v.push(Interval { open: i, close: None });
                        }
                    }
                }
                EventKind::Remove => {
                    if let Some(g) = e.words().first().and_then(|g| parse_group(g)) {
                        if let Some(iv) = intervals
                            .get_mut(&(e.principals.clone(), g))
                            .and_then(|v| v.last_mut())
                            .filter(|iv| iv.close.is_none())
                        {
                            iv.close = Some((i, e.tick));
                        }
                    }
                }
                EventKind::Secret => {
                    if let Some(rec) = parse_secret(e) {
                        created.entry(rec.id).or_insert(i);
                        owners
                            .entry(rec.id)
                            .or_default()
                            .extend(e.principals.split(',').map(str::to_string));
                    }
                }
                _ => {}
            }
        }
        Ok(Self {
            log,
            p: kind.build(),
            ttp,
            principals,
            names,
            pubkeys,
            adversaries,
            groups,
            messages,
            intervals,
            created,
            owners,
        })
    }

    fn name(&self, id: NodeId) -> String {
        self.names.get(&id).cloned().unwrap_or_else(|| id.to_string())
    }

    fn message_at(&self, idx: usize) -> Option<&Message> {
        self.messages.get(&idx)
    }

    fn closure(&self, principal: &str, end: usize) -> Closure {
        let p = &*self.p;
        let mut c = Closure::default();
        let mut pending: Vec<(BlobKind, KeyId, Vec<u8>)> = Vec::new();
        for (i, e) in self.log.events.iter().enumerate().take(end) {
            let blobs: Vec<(BlobKind, KeyId, Vec<u8>)> = match e.kind {
                EventKind::Secret => {
                    if e.principals.split(',').any(|n| n == principal) {
                        if let Some(rec) = parse_secret(e) {
                            if c.learn(&rec, i) {
                                retry(p, &mut c, &mut pending, i);
                            }
                        }
                    }
                    continue;
                }
                EventKind::Send if e.endpoints().0 == principal => self.blobs(e),
                EventKind::Deliver if e.endpoints().1.first() == Some(&principal) => self.blobs(e),
                _ => continue,
            };
            for (kind, key, bytes) in blobs {
                match c.open(p, kind, &key, &bytes) {
                    Some(plain) => {
                        c.opened += 1;
                        let mut grew = false;
                        for rec in key_records(&plain) {
                            grew |= c.learn(&rec, i);
                        }
                        if grew {
                            retry(p, &mut c, &mut pending, i);
                        }
                    }
                    None => {
                        c.sealed += 1;
                        pending.push((kind, key, bytes));
                    }
                }
            }
        }
        c
    }

    fn blobs(&self, e: &Event) -> Vec<(BlobKind, KeyId, Vec<u8>)> {
        let Some(m) = e
            .digest
            .and_then(|d| self.log.payload(&d))
            .and_then(|b| Message::decode(b).ok())
        else {
            return Vec::new();
        };
        m.blobs()
            .into_iter()
            .map(|b| (b.kind, b.key, b.bytes.to_vec()))
            .collect()
    }

    fn member_at(&self, who: &str, g: GroupId, idx: usize) -> bool {
        self.intervals.get(&(who.to_string(), g)).is_some_and(|v| {
            v.iter()
                .any(|iv| iv.open <= idx && iv.close.is_none_or(|(c, _)| idx < c))
        })
    }

    /// Group traffic and key creation checked against membership.
    fn secrecy(&self, closures: &BTreeMap<String, Closure>) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let (mut fwd, mut bwd, mut conf) = (Vec::new(), Vec::new(), Vec::new());
        for (who, c) in closures {
            for (key, got) in &c.obtained {
                let Some(&made) = self.created.get(key) else {
                    continue;
                };
                match key {
                    KeyId::Group { group, .. } => {
                        if self.member_at(who, *group, made) || self.member_at(who, *group, *got) && *got <= made {
                            continue;
                        }
                        let ivs = self.intervals.get(&(who.clone(), *group));
                        let before = ivs.is_some_and(|v| v.iter().any(|iv| iv.close.is_some_and(|(x, _)| x <= made)));
                        let after = ivs.is_some_and(|v| v.iter().any(|iv| iv.open > made));
                        if before {
                            bwd.extend([made, *got]);
                        } else if after {
                            fwd.extend([made, *got]);
                        } else {
                            conf.extend([made, *got]);
                        }
                    }
                    KeyId::Private(_) | KeyId::LeaderSecret { .. } => {
                        if !self.owners.get(key).is_some_and(|o| o.contains(who)) {
                            conf.push(*got);
                        }
                    }
                    _ => {
                        if !self.owners.get(key).is_some_and(|o| o.contains(who)) {
                            conf.extend([made, *got]);
                        }
                    }
                }
            }
        }
        // Group traffic sent after a member left, or before it joined, must
        // stay opaque to it. One tick of grace covers messages already in
        // flight when the removal was recorded.
        for (i, e) in self
            .log
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EventKind::Send)
        {
            let Some(msg) = self.message_at(i) else { continue };
            let (Message::GroupData { wrap, sealed, .. }
            | Message::Data {
                wrap: Some(wrap),
                sealed,
                ..
            }) = msg
            else {
                continue;
            };
            let KeyId::Group { group, .. } = wrap else { continue };
            for ((who, g), ivs) in &self.intervals {
                if g != group || self.member_at(who, *g, i) {
                    continue;
                }
                let Some(c) = closures.get(who) else { continue };
                let departed = ivs.iter().any(|iv| iv.close.is_some_and(|(_, t)| e.tick > t + 1));
                let joined_later = ivs.iter().any(|iv| iv.open > i);
                if !(departed || joined_later) {
                    continue;
                }
                let readable = c.sym.get(wrap).is_some_and(|k| self.p.sym_decrypt(k, sealed).is_ok());
                if readable && departed {
                    bwd.push(i);
                } else if readable {
                    fwd.push(i);
                }
            }
        }
        // The member-key derivation secret never travels.
        for (key, &idx) in &self.created {
            if !matches!(key, KeyId::LeaderSecret { .. }) {
                continue;
            }
            let Some(rec) = parse_secret(&self.log.events[idx]) else {
                continue;
            };
            if rec.bytes.len() < 8 {
                continue;
            }
            let leaked = self
                .log
                .payloads
                .values()
                .any(|b| b.windows(rec.bytes.len()).any(|w| w == rec.bytes.as_slice()));
            if leaked {
                conf.push(idx);
            }
        }
        (fwd, bwd, conf)
    }

    /// Every admission rests on a verified challenge-response transcript
    /// against the leader's announced parameters and a TTP-signed
    /// certificate.
    fn mutual_auth(&self) -> Vec<usize> {
        let mut announced: BTreeMap<(GroupId, u32), (NodeId, ZkPublicParams)> = BTreeMap::new();
        let mut bad = Vec::new();
        for (i, e) in self.log.events.iter().enumerate() {
            if let Some(
                m @ Message::LeaderAnnounce {
                    group,
                    leader,
                    lineage,
                    params,
                    ..
                },
            ) = self.message_at(i)
            {
                if e.kind == EventKind::Send
                    && self
                        .pubkeys
                        .get(leader)
                        .is_some_and(|pk| m.verify_signature(&*self.p, pk))
                {
                    announced.entry((*group, *lineage)).or_insert((*leader, params.clone()));
                }
            }
            if e.kind != EventKind::Admit {
                continue;
            }
            let w = e.words();
            let group = w.first().and_then(|g| parse_group(g));
            let lineage = w
                .get(1)
                .and_then(|l| l.strip_prefix('l'))
                .and_then(|l| l.parse::<u32>().ok());
            let session = w
                .iter()
                .find_map(|x| x.strip_prefix("session="))
                .and_then(|s| s.parse::<u64>().ok());
            let (Some(group), Some(lineage), Some(session)) = (group, lineage, session) else {
                bad.push(i);
                continue;
            };
            let ok = announced
                .get(&(group, lineage))
                .is_some_and(|(leader, params)| self.transcript_ok(i, group, session, *leader, params));
            if !ok {
                bad.push(i);
            }
        }
        bad
    }

    fn transcript_ok(
        &self,
        admit: usize,
        group: GroupId,
        session: u64,
        leader: NodeId,
        params: &ZkPublicParams,
    ) -> bool {
        let mut commitments: Option<&Vec<BigUint>> = None;
        let mut challenges: Option<&Vec<u64>> = None;
        let mut responses: Option<&Vec<BigUint>> = None;
        let mut cert = None;
        for (i, m) in self.messages.range(..admit) {
            if self.log.events[*i].kind != EventKind::Send {
                continue;
            }
            match m {
                Message::ZkParams {
                    group: g,
                    session: s,
                    leader: l,
                    params: p,
                    commitments: c,
                } if *g == group && *s == session => {
                    if *l != leader || p != params {
                        return false;
                    }
                    commitments = Some(c);
                }
                Message::ZkChallenge {
                    group: g,
                    session: s,
                    challenges: c,
                } if *g == group && *s == session => challenges = Some(c),
                Message::ZkResponse {
                    group: g,
                    session: s,
                    responses: r,
                } if *g == group && *s == session => responses = Some(r),
                Message::Cert {
                    group: g,
                    session: s,
                    cert: c,
                } if *g == group && *s == session => cert = Some(c),
                _ => {}
            }
        }
        let (Some(x), Some(c), Some(y), Some(cert)) = (commitments, challenges, responses, cert) else {
            return false;
        };
        let rounds_ok = !x.is_empty()
            && x.len() == c.len()
            && c.len() == y.len()
            && x.iter()
                .zip(c)
                .zip(y)
                .all(|((x, c), y)| zk_verify(x, &params.v, *c, y, &params.n));
        let subject = self.log.events[admit].principals.as_str();
        rounds_ok && self.name(cert.subject) == subject && verify_certificate(&*self.p, &self.ttp, cert)
    }

    /// Origin lifetime of the first broadcast of `(source, seq)` by its source.
    fn origin_lifetime(&self, upto: usize, source: NodeId, seq: u64) -> Option<u32> {
        self.messages.range(..upto).find_map(|(i, m)| match m {
            Message::Rreq(r)
                if self.log.events[*i].kind == EventKind::Send
                    && r.source == source
                    && r.seq == seq
                    && r.route == [source] =>
            {
                Some(r.lifetime)
            }
            _ => None,
        })
    }

    fn rreq_sound(&self, idx: usize, r: &RouteRequest) -> bool {
        let p = &*self.p;
        if r.route.first() != Some(&r.source) || r.route.len() != r.signatures.len() {
            return false;
        }
        let sigs = r.route.iter().enumerate().all(|(k, n)| {
            self.pubkeys.get(n).is_some_and(|pk| {
                p.verify(
                    pk,
                    &hop_signing_bytes(r.source, r.dest, r.seq, &r.route[..=k]),
                    &r.signatures[k],
                )
            })
        });
        let chain = reconstruct_chain(p, r.dest, r.seq, &r.route, r.lifetime).is_some_and(|c| c == r.chain);
        let hops = self
            .origin_lifetime(idx, r.source, r.seq)
            .is_some_and(|l| r.lifetime as usize + r.route.len() - 1 == l as usize);
        // Each listed hop really transmitted this request.
        let transmitted = (1..r.route.len()).all(|k| {
            let who = self.name(r.route[k]);
            self.messages.range(..idx).any(|(i, m)| {
                let e = &self.log.events[*i];
                e.kind == EventKind::Send
                    && e.endpoints().0 == who
                    && matches!(m, Message::Rreq(x) if x.source == r.source && x.seq == r.seq && x.route == r.route[..=k])
            })
        });
        sigs && chain && hops && transmitted
    }

    fn rrep_sound(&self, idx: usize, r: &RouteReply) -> bool {
        let Some(l) = self.origin_lifetime(idx, r.source, r.seq) else {
            return false;
        };
        let hops = &r.route[..r.route.len().saturating_sub(1)];
        r.route.first() == Some(&r.source)
            && r.route.last() == Some(&r.dest)
            && chain_from_origin(&*self.p, r.dest, r.seq, hops, l).is_some_and(|c| c == r.chain)
    }

    /// Every accepted request or reply carries a chain that matches the
    /// hops that actually carried it.
    fn chain_soundness(&self) -> Vec<usize> {
        let mut bad = Vec::new();
        for (i, e) in self.log.events.iter().enumerate() {
            if e.kind != EventKind::Verdict || !e.detail.starts_with("accept ") {
                continue;
            }
            let ok = match self.message_at(i) {
                Some(Message::Rreq(r)) => self.rreq_sound(i, r),
                Some(Message::Rrep(r)) => self.rrep_sound(i, r),
                _ => true,
            };
            if !ok {
                bad.push(i);
            }
        }
        bad
    }

    fn duplicate_suppression(&self) -> Vec<usize> {
        let mut bad = Vec::new();
        let mut forwarded: BTreeMap<(String, NodeId, u64), usize> = BTreeMap::new();
        let mut accepted: BTreeMap<(String, String, &str), u64> = BTreeMap::new();
        for (i, e) in self.log.events.iter().enumerate() {
            match (e.kind, self.message_at(i)) {
                (EventKind::Send, Some(Message::Rreq(r))) => {
                    let who = e.endpoints().0.to_string();
                    let honest_hop = !self.adversaries.contains(&who)
                        && r.route.last().is_some_and(|l| self.name(*l) == who)
                        && !e.detail.contains("origin=");
                    if honest_hop && forwarded.insert((who, r.source, r.seq), i).is_some() {
                        bad.push(i);
                    }
                }
                (EventKind::Verdict, Some(m)) if e.detail.starts_with("accept ") => {
                    let (what, a, b, seq) = match m {
                        Message::Rreq(r) => ("rreq", r.dest, r.source, r.seq),
                        Message::Rrep(r) => ("rrep", r.source, r.dest, r.seq),
                        _ => continue,
                    };
                    let key = (self.name(a), self.name(b), what);
                    if accepted.get(&key).is_some_and(|last| seq <= *last) {
                        bad.push(i);
                    }
                    accepted.insert(key, seq);
                }
                _ => {}
            }
        }
        bad
    }

    fn epoch_monotonicity(&self) -> Vec<usize> {
        let mut last: BTreeMap<GroupId, (u32, u64)> = BTreeMap::new();
        let mut bad = Vec::new();
        for (i, e) in self
            .log
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EventKind::Rekey)
        {
            let w = e.words();
            let g = w.first().and_then(|g| parse_group(g));
            let l = w
                .get(1)
                .and_then(|l| l.strip_prefix('l'))
                .and_then(|l| l.parse::<u32>().ok());
            let ep = w
                .get(2)
                .and_then(|x| x.strip_prefix('e'))
                .and_then(|x| x.parse::<u64>().ok());
            let (Some(g), Some(l), Some(ep)) = (g, l, ep) else {
                bad.push(i);
                continue;
            };
            if last.get(&g).is_some_and(|&(pl, pe)| (l, ep) <= (pl, pe)) {
                bad.push(i);
            }
            last.insert(g, (l, ep));
        }
        bad
    }

    fn detection_outcomes(&self) -> Vec<usize> {
        let events = &self.log.events;
        let mut bad = Vec::new();
        for (i, e) in events.iter().enumerate() {
            let Some(text) = (e.kind == EventKind::Info && e.tick == 0)
                .then(|| e.detail.strip_prefix("expect "))
                .flatten()
            else {
                continue;
            };
            let Ok(x) = text.parse::<Expectation>() else {
                bad.push(i);
                continue;
            };
            if !self.expectation_met(&x) {
                bad.push(i);
            }
        }
        bad
    }

    fn expectation_met(&self, x: &Expectation) -> bool {
        let events = &self.log.events;
        let info = |who: &str, pred: &dyn Fn(&[&str]) -> bool| {
            events
                .iter()
                .any(|e| e.kind == EventKind::Info && e.principals == who && pred(&e.words()))
        };
        let verdict = |node: &str, accept: bool, reason: &Option<String>| {
            events.iter().any(|e| {
                let w = e.words();
                e.kind == EventKind::Verdict
                    && e.principals == node
                    && w.first() == Some(&if accept { "accept" } else { "reject" })
                    && reason.as_ref().is_none_or(|r| accept || w.get(1) == Some(&r.as_str()))
            })
        };
        let route = |s: &str, d: &str| {
            let pair = format!("{s}>{d}");
            events.iter().any(|e| {
                let w = e.words();
                e.kind == EventKind::Verdict
                    && e.principals == s
                    && w.first() == Some(&"accept")
                    && matches!(w.get(1), Some(&"rrep") | Some(&"composed"))
                    && w.get(2) == Some(&pair.as_str())
            })
        };
        let reason_ok =
            |w: &[&str], pos: usize, r: &Option<String>| r.as_ref().is_none_or(|r| w.get(pos) == Some(&r.as_str()));
        match x {
            Expectation::Verdict { node, accept, reason } => verdict(node, *accept, reason),
            Expectation::NoVerdict { node, accept, reason } => !verdict(node, *accept, reason),
            Expectation::Route { source, dest } => route(source, dest),
            Expectation::NoRoute { source, dest } => !route(source, dest),
            Expectation::Alert { subject } => events
                .iter()
                .any(|e| e.kind == EventKind::Alert && e.principals == *subject),
            Expectation::JoinAbort { node, reason } => info(node, &|w| {
                matches!(w.first(), Some(&"join_abort") | Some(&"join_reject")) && reason_ok(w, 2, reason)
            }),
            Expectation::Member { node, group } => {
                let Some(g) = self.groups.get(group) else {
                    return false;
                };
                self.intervals
                    .get(&(node.clone(), *g))
                    .and_then(|v| v.last())
                    .is_some_and(|iv| iv.close.is_none())
            }
            Expectation::Removed { node, reason } => events
                .iter()
                .any(|e| e.kind == EventKind::Remove && e.principals == *node && reason_ok(&e.words(), 1, reason)),
            Expectation::Session { a, b } => {
                info(a, &|w| w == ["session_confirmed", a, b]) || info(b, &|w| w == ["session_confirmed", a, b])
            }
            Expectation::SessionAbort { a, b, reason } => events.iter().any(|e| {
                let w = e.words();
                e.kind == EventKind::Info
                    && w.first() == Some(&"session_abort")
                    && w.get(1) == Some(&a.as_str())
                    && w.get(2) == Some(&b.as_str())
                    && reason_ok(&w, 3, reason)
            }),
            Expectation::Undetected => !events.iter().any(|e| {
                let w = e.words();
                (e.kind == EventKind::Verdict && w.first() == Some(&"reject"))
                    || e.kind == EventKind::Alert
                    || (e.kind == EventKind::Info
                        && matches!(
                            w.first(),
                            Some(&"join_abort") | Some(&"join_reject") | Some(&"session_abort")
                        ))
            }),
        }
    }
}

fn retry(p: &dyn CryptoProvider, c: &mut Closure, pending: &mut Vec<(BlobKind, KeyId, Vec<u8>)>, idx: usize) {
    loop {
        let fresh = std::mem::take(&mut c.fresh);
        if fresh.is_empty() {
            break;
        }
        let mut rest = Vec::new();
        for (kind, key, bytes) in std::mem::take(pending) {
            match c.reopen(p, &fresh, kind, &key, &bytes) {
                Some(plain) => {
                    c.opened += 1;
                    c.sealed -= 1;
                    for rec in key_records(&plain) {
                        c.learn(&rec, idx);
                    }
                }
                None => rest.push((kind, key, bytes)),
            }
        }
        *pending = rest;
    }
}
