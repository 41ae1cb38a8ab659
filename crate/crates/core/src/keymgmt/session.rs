//! Pairwise session-key agreement between two group members.
//!
//! ```text
//! A -> B   SESSION_1   e_B(ID_A, ID_B, T_A, DS_A)
//! B -> A   SESSION_2   e_A(ID_A, ID_B, T_A, T_B, DS_B)
//! A -> B   SESSION_3   e_B(T_A, T_B, num1, K_AB)
//! B -> A   SESSION_4   K_AB(num1, num2)
//! ```
//!
//! If B does not know A's public key it asks its leader, which either answers
//! with the key or alerts the whole group that A is not a member.

use std::collections::{BTreeMap, BTreeSet};

use super::{Addr, Ctx, KeyHierarchy, KeyId, KeyRecord, Note, Step};
use crate::crypto::encoding::{DecodeError, Encoder, Reader, Tag};
use crate::crypto::{KeyKind, PrivateKey, PublicKey, Signature, SymmetricKey};
use crate::ids::{GroupId, NodeId, Tick};
use crate::wire::Message;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SessionPhase {
    Initiated,
    Responded,
    Keyed,
    Confirmed,
    Aborted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SessionFailure {
    StaleTimestamp,
    BadSignature,
    WrongPeer,
    TimestampMismatch,
    EchoMismatch,
    NotMember,
    Undecryptable,
}

impl SessionFailure {
    pub fn as_str(&self) -> &'static str {
        match self {
            SessionFailure::StaleTimestamp => "stale_timestamp",
            SessionFailure::BadSignature => "bad_signature",
            SessionFailure::WrongPeer => "wrong_peer",
            SessionFailure::TimestampMismatch => "timestamp_mismatch",
            SessionFailure::EchoMismatch => "echo_mismatch",
            SessionFailure::NotMember => "not_member",
            SessionFailure::Undecryptable => "undecryptable",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Initiator,
    Responder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionState {
    pub a: NodeId,
    pub b: NodeId,
    pub role: Role,
    pub t_a: Tick,
    pub t_b: Option<Tick>,
    pub num1: Option<u64>,
    pub num2: Option<u64>,
    pub key: Option<SymmetricKey>,
    pub phase: SessionPhase,
    peer_pk: PublicKey,
}

impl SessionState {
    pub fn key_id(&self) -> KeyId {
        KeyId::Session {
            initiator: self.a,
            responder: self.b,
            t_a: self.t_a,
        }
    }

    pub fn peer(&self) -> NodeId {
        match self.role {
            Role::Initiator => self.b,
            Role::Responder => self.a,
        }
    }
}

/// A message 1 waiting on the leader's public-key lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
struct PendingLookup {
    t_a: Tick,
    sig: Signature,
}

/// All sessions a node takes part in, one per peer.
#[derive(Clone, Debug, Default)]
pub struct SessionTable {
    pub sessions: BTreeMap<NodeId, SessionState>,
    pending: BTreeMap<NodeId, PendingLookup>,
    pub malicious: BTreeSet<NodeId>,
}

impl SessionTable {
    pub fn get(&self, peer: NodeId) -> Option<&SessionState> {
        self.sessions.get(&peer)
    }

    /// Confirmed pairwise key with `peer`, if any.
    pub fn confirmed_key(&self, peer: NodeId) -> Option<(KeyId, &SymmetricKey)> {
        self.sessions
            .get(&peer)
            .filter(|s| s.phase == SessionPhase::Confirmed)
            .and_then(|s| s.key.as_ref().map(|k| (s.key_id(), k)))
    }
}

/// Parameters of a session participant.
pub struct Party<'a> {
    pub id: NodeId,
    pub private: &'a PrivateKey,
    /// Own group and leader, for public-key lookups.
    pub group: Option<(GroupId, NodeId)>,
    /// Public keys this node trusts as fellow members.
    pub known: &'a BTreeMap<NodeId, PublicKey>,
    pub leader_pk: Option<&'a PublicKey>,
    pub window: Tick,
}

fn ds_a_bytes(a: NodeId, b: NodeId, t_a: Tick) -> Vec<u8> {
    Encoder::new()
        .node(Tag::Source, a)
        .node(Tag::Dest, b)
        .u64(Tag::Timestamp, t_a)
        .finish()
}

fn ds_b_bytes(a: NodeId, b: NodeId, t_a: Tick, t_b: Tick) -> Vec<u8> {
    Encoder::new()
        .node(Tag::Source, a)
        .node(Tag::Dest, b)
        .u64(Tag::Timestamp, t_a)
        .u64(Tag::Timestamp, t_b)
        .finish()
}

struct Body1 {
    a: NodeId,
    b: NodeId,
    t_a: Tick,
    sig: Signature,
}

fn decode1(buf: &[u8]) -> Result<Body1, DecodeError> {
    let mut r = Reader::new(buf)?;
    let out = Body1 {
        a: r.node(Tag::Source)?,
        b: r.node(Tag::Dest)?,
        t_a: r.u64(Tag::Timestamp)?,
        sig: Signature::new(r.bytes(Tag::Signature)?.to_vec()),
    };
    r.finish()?;
    Ok(out)
}

struct Body2 {
    a: NodeId,
    b: NodeId,
    t_a: Tick,
    t_b: Tick,
    sig: Signature,
}

fn decode2(buf: &[u8]) -> Result<Body2, DecodeError> {
    let mut r = Reader::new(buf)?;
    let out = Body2 {
        a: r.node(Tag::Source)?,
        b: r.node(Tag::Dest)?,
        t_a: r.u64(Tag::Timestamp)?,
        t_b: r.u64(Tag::Timestamp)?,
        sig: Signature::new(r.bytes(Tag::Signature)?.to_vec()),
    };
    r.finish()?;
    Ok(out)
}

fn decode3(buf: &[u8]) -> Result<(Tick, Tick, u64, KeyRecord), DecodeError> {
    let mut r = Reader::new(buf)?;
    let out = (
        r.u64(Tag::Timestamp)?,
        r.u64(Tag::Timestamp)?,
        r.u64(Tag::Nonce)?,
        KeyRecord::decode(r.bytes(Tag::SessionKey)?)?,
    );
    r.finish()?;
    Ok(out)
}

fn decode4(buf: &[u8]) -> Result<(u64, u64), DecodeError> {
    let mut r = Reader::new(buf)?;
    let out = (r.u64(Tag::Nonce)?, r.u64(Tag::Nonce)?);
    r.finish()?;
    Ok(out)
}

fn abort(step: &mut Step, table: &mut SessionTable, a: NodeId, b: NodeId, peer: NodeId, reason: SessionFailure) {
    if let Some(s) = table.sessions.get_mut(&peer) {
        s.phase = SessionPhase::Aborted;
    }
    step.note(Note::SessionAborted { a, b, reason });
}

fn fresh(now: Tick, t: Tick, window: Tick) -> bool {
    t <= now && now - t <= window
}

/// A starts a session with B: emits `e_B(ID_A, ID_B, T_A, DS_A)`.
pub fn initiate_session(
    ctx: &mut Ctx<'_>,
    me: &Party<'_>,
    table: &mut SessionTable,
    peer: NodeId,
    peer_pk: &PublicKey,
) -> Step {
    let mut step = Step::default();
    let t_a = ctx.tick;
    let Ok(sig) = ctx.p.sign(me.private, &ds_a_bytes(me.id, peer, t_a)) else {
        return step;
    };
    let body = Encoder::new()
        .node(Tag::Source, me.id)
        .node(Tag::Dest, peer)
        .u64(Tag::Timestamp, t_a)
        .bytes(Tag::Signature, &sig.bytes)
        .finish();
    let Ok(sealed) = ctx.p.pk_encrypt(peer_pk, &body, ctx.rng) else {
        return step;
    };
    table.sessions.insert(
        peer,
        SessionState {
            a: me.id,
            b: peer,
            role: Role::Initiator,
            t_a,
            t_b: None,
            num1: None,
            num2: None,
            key: None,
            phase: SessionPhase::Initiated,
            peer_pk: peer_pk.clone(),
        },
    );
    step.send(
        Addr::Node(peer),
        Message::Session1 {
            from: me.id,
            to: peer,
            sealed,
        },
    );
    step
}

/// B's continuation once A's public key is trusted.
fn emit_message2(
    ctx: &mut Ctx<'_>,
    me: &Party<'_>,
    table: &mut SessionTable,
    a: NodeId,
    t_a: Tick,
    a_pk: &PublicKey,
    ds_a: &Signature,
) -> Step {
    let mut step = Step::default();
    if !ctx.p.verify(a_pk, &ds_a_bytes(a, me.id, t_a), ds_a) {
        abort(&mut step, table, a, me.id, a, SessionFailure::BadSignature);
        return step;
    }
    let t_b = ctx.tick;
    let Ok(sig) = ctx.p.sign(me.private, &ds_b_bytes(a, me.id, t_a, t_b)) else {
        return step;
    };
    let body = Encoder::new()
        .node(Tag::Source, a)
        .node(Tag::Dest, me.id)
        .u64(Tag::Timestamp, t_a)
        .u64(Tag::Timestamp, t_b)
        .bytes(Tag::Signature, &sig.bytes)
        .finish();
    let Ok(sealed) = ctx.p.pk_encrypt(a_pk, &body, ctx.rng) else {
        return step;
    };
    table.sessions.insert(
        a,
        SessionState {
            a,
            b: me.id,
            role: Role::Responder,
            t_a,
            t_b: Some(t_b),
            num1: None,
            num2: None,
            key: None,
            phase: SessionPhase::Responded,
            peer_pk: a_pk.clone(),
        },
    );
    step.send(
        Addr::Node(a),
        Message::Session2 {
            from: me.id,
            to: a,
            sealed,
        },
    );
    step
}

/// Handles every session-related message addressed to `me`:
/// messages 1 to 4 and the leader's lookup answer or alert.
pub fn session_step(ctx: &mut Ctx<'_>, me: &Party<'_>, table: &mut SessionTable, msg: &Message) -> Step {
    let mut step = Step::default();
    match msg {
        Message::Session1 { from, to, sealed } if *to == me.id => {
            let Some(body) = ctx.p.pk_decrypt(me.private, sealed).ok().and_then(|b| decode1(&b).ok()) else {
                step.note(Note::SessionAborted {
                    a: *from,
                    b: me.id,
                    reason: SessionFailure::Undecryptable,
                });
                return step;
            };
            if body.b != me.id || body.a != *from {
                step.note(Note::SessionAborted {
                    a: body.a,
                    b: me.id,
                    reason: SessionFailure::WrongPeer,
                });
                return step;
            }
            // A replayed opener must not disturb a session already in progress.
            if !fresh(ctx.tick, body.t_a, me.window) {
                step.note(Note::SessionAborted {
                    a: body.a,
                    b: me.id,
                    reason: SessionFailure::StaleTimestamp,
                });
                return step;
            }
            if table.malicious.contains(&body.a) {
                abort(&mut step, table, body.a, me.id, body.a, SessionFailure::NotMember);
                return step;
            }
            if let Some(pk) = me.known.get(&body.a) {
                return emit_message2(ctx, me, table, body.a, body.t_a, pk, &body.sig);
            }
            let Some((group, leader)) = me.group else {
                abort(&mut step, table, body.a, me.id, body.a, SessionFailure::NotMember);
                return step;
            };
            table.pending.insert(
                body.a,
                PendingLookup {
                    t_a: body.t_a,
                    sig: body.sig,
                },
            );
            if let Ok(q) = (Message::PubkeyQuery {
                group,
                asker: me.id,
                subject: body.a,
                sig: Signature::default(),
            })
            .signed(ctx.p, me.private)
            {
                step.send(Addr::Node(leader), q);
            }
        }
        Message::PubkeyAnswer {
            group,
            asker,
            subject,
            public_key,
            ..
        } if *asker == me.id => {
            let trusted = me.group.is_some_and(|(g, _)| g == *group)
                && me.leader_pk.is_some_and(|pk| msg.verify_signature(ctx.p, pk));
            if !trusted {
                return step;
            }
            if let Some(pending) = table.pending.remove(subject) {
                if !fresh(ctx.tick, pending.t_a, me.window) {
                    abort(
                        &mut step,
                        table,
                        *subject,
                        me.id,
                        *subject,
                        SessionFailure::StaleTimestamp,
                    );
                    return step;
                }
                return emit_message2(ctx, me, table, *subject, pending.t_a, public_key, &pending.sig);
            }
        }
        Message::MaliciousAlert { group, subject, .. } => {
            let trusted = me.group.is_some_and(|(g, _)| g == *group)
                && me.leader_pk.is_some_and(|pk| msg.verify_signature(ctx.p, pk));
            if !trusted {
                return step;
            }
            table.malicious.insert(*subject);
            if table.pending.remove(subject).is_some() {
                abort(&mut step, table, *subject, me.id, *subject, SessionFailure::NotMember);
            }
        }
        Message::Session2 { from, to, sealed } if *to == me.id => {
            let Some(s) = table.sessions.get(from).filter(|s| s.role == Role::Initiator).cloned() else {
                return step;
            };
            if s.phase != SessionPhase::Initiated {
                return step;
            }
            let Some(body) = ctx.p.pk_decrypt(me.private, sealed).ok().and_then(|b| decode2(&b).ok()) else {
                abort(&mut step, table, me.id, *from, *from, SessionFailure::Undecryptable);
                return step;
            };
            if body.a != me.id || body.b != *from {
                abort(&mut step, table, me.id, *from, *from, SessionFailure::WrongPeer);
                return step;
            }
            if body.t_a != s.t_a {
                abort(&mut step, table, me.id, *from, *from, SessionFailure::TimestampMismatch);
                return step;
            }
            if !fresh(ctx.tick, body.t_b, me.window) || body.t_b < body.t_a {
                abort(&mut step, table, me.id, *from, *from, SessionFailure::StaleTimestamp);
                return step;
            }
            if !ctx
                .p
                .verify(&s.peer_pk, &ds_b_bytes(me.id, *from, body.t_a, body.t_b), &body.sig)
            {
                abort(&mut step, table, me.id, *from, *from, SessionFailure::BadSignature);
                return step;
            }
            let key = SymmetricKey::random(KeyKind::Session, ctx.rng);
            let num1 = ctx.rng.next_u64();
            let record = KeyRecord::sym(s.key_id(), &key);
            let body3 = Encoder::new()
                .u64(Tag::Timestamp, body.t_a)
                .u64(Tag::Timestamp, body.t_b)
                .u64(Tag::Nonce, num1)
                .bytes(Tag::SessionKey, &record.encode())
                .finish();
            let Ok(sealed) = ctx.p.pk_encrypt(&s.peer_pk, &body3, ctx.rng) else {
                return step;
            };
            step.note(Note::Secret { owner: me.id, record });
            let st = table.sessions.get_mut(from).unwrap();
            st.t_b = Some(body.t_b);
            st.num1 = Some(num1);
            st.key = Some(key);
            st.phase = SessionPhase::Keyed;
            step.send(
                Addr::Node(*from),
                Message::Session3 {
                    from: me.id,
                    to: *from,
                    sealed,
                },
            );
        }
        Message::Session3 { from, to, sealed } if *to == me.id => {
            let Some(s) = table.sessions.get(from).filter(|s| s.role == Role::Responder).cloned() else {
                return step;
            };
            if s.phase != SessionPhase::Responded {
                return step;
            }
            let Some((t_a, t_b, num1, record)) =
                ctx.p.pk_decrypt(me.private, sealed).ok().and_then(|b| decode3(&b).ok())
            else {
                abort(&mut step, table, *from, me.id, *from, SessionFailure::Undecryptable);
                return step;
            };
            if t_a != s.t_a || Some(t_b) != s.t_b {
                abort(&mut step, table, *from, me.id, *from, SessionFailure::TimestampMismatch);
                return step;
            }
            let Some(key) = record.sym_key().filter(|_| record.id == s.key_id()) else {
                abort(&mut step, table, *from, me.id, *from, SessionFailure::Undecryptable);
                return step;
            };
            let num2 = ctx.rng.next_u64();
            let body4 = Encoder::new().u64(Tag::Nonce, num1).u64(Tag::Nonce, num2).finish();
            step.send(
                Addr::Node(*from),
                Message::Session4 {
                    from: me.id,
                    to: *from,
                    wrap: s.key_id(),
                    sealed: ctx.p.sym_encrypt(&key, &body4, ctx.rng),
                },
            );
            let st = table.sessions.get_mut(from).unwrap();
            st.num1 = Some(num1);
            st.num2 = Some(num2);
            st.key = Some(key);
            st.phase = SessionPhase::Confirmed;
            step.note(Note::SessionConfirmed { a: *from, b: me.id });
        }
        Message::Session4 { from, to, wrap, sealed } if *to == me.id => {
            let Some(s) = table.sessions.get(from).filter(|s| s.role == Role::Initiator).cloned() else {
                return step;
            };
            if s.phase != SessionPhase::Keyed || *wrap != s.key_id() {
                return step;
            }
            let key = s.key.clone().expect("keyed session");
            let Some((echo, num2)) = ctx.p.sym_decrypt(&key, sealed).ok().and_then(|b| decode4(&b).ok()) else {
                abort(&mut step, table, me.id, *from, *from, SessionFailure::Undecryptable);
                return step;
            };
            if Some(echo) != s.num1 {
                abort(&mut step, table, me.id, *from, *from, SessionFailure::EchoMismatch);
                return step;
            }
            let st = table.sessions.get_mut(from).unwrap();
            st.num2 = Some(num2);
            st.phase = SessionPhase::Confirmed;
            step.note(Note::SessionConfirmed { a: me.id, b: *from });
        }
        _ => {}
    }
    step
}

/// Leader side of a public-key lookup: answer for members, alert the group
/// about anyone else.
pub fn leader_answer_lookup(
    ctx: &mut Ctx<'_>,
    leader: NodeId,
    private: &PrivateKey,
    kh: &KeyHierarchy,
    msg: &Message,
) -> Step {
    let mut step = Step::default();
    let Message::PubkeyQuery {
        group, asker, subject, ..
    } = msg
    else {
        return step;
    };
    if *group != kh.group {
        return step;
    }
    let Some(asker_pk) = kh.member_list().get(asker) else {
        return step;
    };
    if !msg.verify_signature(ctx.p, asker_pk) {
        return step;
    }
    let reply = match kh.member_list().get(subject) {
        Some(pk) => Message::PubkeyAnswer {
            group: *group,
            asker: *asker,
            subject: *subject,
            public_key: pk.clone(),
            sig: Signature::default(),
        },
        None => {
            step.note(Note::Alert {
                group: *group,
                subject: *subject,
            });
            Message::MaliciousAlert {
                group: *group,
                reporter: leader,
                subject: *subject,
                sig: Signature::default(),
            }
        }
    };
    let to = if matches!(reply, Message::PubkeyAnswer { .. }) {
        Addr::Node(*asker)
    } else {
        Addr::Group(*group)
    };
    if let Ok(signed) = reply.signed(ctx.p, private) {
        step.send(to, signed);
    }
    step
}
