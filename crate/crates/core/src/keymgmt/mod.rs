//! Group key lifecycle: key hierarchy, join handshake, member keys,
//! group-key epochs, pairwise session keys, revocation and the leader ring.
//!
//! All protocol handlers are step functions: they take the owning node's
//! state and one inbound message and return a [`Step`] with the outbound
//! messages and the notable events (keys created, admissions, aborts).

pub mod join;
pub mod membership;
pub mod ring;
pub mod session;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::RngCore;
use thiserror::Error;

use crate::crypto::encoding::{DecodeError, Encoder, Reader, Tag};
use crate::crypto::{
    CryptoError, CryptoProvider, HashFn, KeyKind, KeyPair, PrivateKey, PublicKey, Signature, SymmetricKey, SYM_KEY_LEN,
};
use crate::ids::{GroupId, NodeId, Tick};
use crate::wire::Message;

pub use join::{
    leader_handle_join, node_handle_join, JoinConfig, JoinFailure, JoinPhase, LeaderIdentity, LeaderJoin, NodeIdentity,
    NodeJoin,
};
pub use membership::{
    check_liveness, leader_departure, remove_member, succeed, Departure, Liveness, RekeyConfig, RemovalReason,
};
pub use ring::{ring_handle, ring_start, RingState};
pub use session::{
    initiate_session, leader_answer_lookup, session_step, Party, Role, SessionFailure, SessionPhase, SessionState,
    SessionTable,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("unknown member {0}")]
    UnknownMember(NodeId),
    #[error("unexpected message for current state")]
    Unexpected,
    #[error("stale key epoch")]
    StaleEpoch,
}

/// Identifies every secret the system creates. Sealed messages carry the id
/// of the key that opens them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyId {
    /// A node's TTP-issued private key; also names public-key ciphertexts.
    Private(NodeId),
    /// A leader's member-key derivation secret `N`.
    LeaderSecret {
        group: GroupId,
        lineage: u32,
    },
    Group {
        group: GroupId,
        lineage: u32,
        epoch: u64,
    },
    Member {
        group: GroupId,
        lineage: u32,
        member: u64,
    },
    Ring {
        round: u64,
    },
    Session {
        initiator: NodeId,
        responder: NodeId,
        t_a: u64,
    },
}

impl KeyId {
    pub fn kind(&self) -> Option<KeyKind> {
        match self {
            KeyId::Group { .. } => Some(KeyKind::Group),
            KeyId::Member { .. } => Some(KeyKind::Member),
            KeyId::Ring { .. } => Some(KeyKind::LeaderRing),
            KeyId::Session { .. } => Some(KeyKind::Session),
            KeyId::Private(_) | KeyId::LeaderSecret { .. } => None,
        }
    }

    pub fn encode(&self) -> Encoder {
        let e = Encoder::new();
        match *self {
            KeyId::Private(n) => e.u32(Tag::Flag, 0).node(Tag::Node, n),
            KeyId::LeaderSecret { group, lineage } => e.u32(Tag::Flag, 1).group(group).u32(Tag::Lineage, lineage),
            KeyId::Group { group, lineage, epoch } => e
                .u32(Tag::Flag, 2)
                .group(group)
                .u32(Tag::Lineage, lineage)
                .u64(Tag::Epoch, epoch),
            KeyId::Member { group, lineage, member } => e
                .u32(Tag::Flag, 3)
                .group(group)
                .u32(Tag::Lineage, lineage)
                .u64(Tag::MemberId, member),
            KeyId::Ring { round } => e.u32(Tag::Flag, 4).u64(Tag::Round, round),
            KeyId::Session {
                initiator,
                responder,
                t_a,
            } => e
                .u32(Tag::Flag, 5)
                .node(Tag::Source, initiator)
                .node(Tag::Dest, responder)
                .u64(Tag::Timestamp, t_a),
        }
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u32(Tag::Flag)? {
            0 => KeyId::Private(r.node(Tag::Node)?),
            1 => KeyId::LeaderSecret {
                group: r.group()?,
                lineage: r.u32(Tag::Lineage)?,
            },
            2 => KeyId::Group {
                group: r.group()?,
                lineage: r.u32(Tag::Lineage)?,
                epoch: r.u64(Tag::Epoch)?,
            },
            3 => KeyId::Member {
                group: r.group()?,
                lineage: r.u32(Tag::Lineage)?,
                member: r.u64(Tag::MemberId)?,
            },
            4 => KeyId::Ring {
                round: r.u64(Tag::Round)?,
            },
            5 => KeyId::Session {
                initiator: r.node(Tag::Source)?,
                responder: r.node(Tag::Dest)?,
                t_a: r.u64(Tag::Timestamp)?,
            },
            _ => return Err(DecodeError::Invalid(Tag::Flag)),
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes)?;
        let id = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(id)
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyId::Private(n) => write!(f, "private:{n}"),
            KeyId::LeaderSecret { group, lineage } => write!(f, "nsecret:{group}:l{lineage}"),
            KeyId::Group { group, lineage, epoch } => write!(f, "group:{group}:l{lineage}:e{epoch}"),
            KeyId::Member { group, lineage, member } => write!(f, "member:{group}:l{lineage}:m{member}"),
            KeyId::Ring { round } => write!(f, "ring:r{round}"),
            KeyId::Session {
                initiator,
                responder,
                t_a,
            } => write!(f, "session:{initiator}:{responder}:t{t_a}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid key id `{0}`")]
pub struct KeyIdParseError(pub String);

impl FromStr for KeyId {
    type Err = KeyIdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || KeyIdParseError(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str, prefix: &str| -> Result<u64, KeyIdParseError> {
            p.strip_prefix(prefix).and_then(|v| v.parse().ok()).ok_or_else(err)
        };
        let node = |p: &str| num(p, "n").and_then(|v| u32::try_from(v).map(NodeId).map_err(|_| err()));
        let group = |p: &str| num(p, "g").and_then(|v| u32::try_from(v).map(GroupId).map_err(|_| err()));
        let lineage = |p: &str| num(p, "l").and_then(|v| u32::try_from(v).map_err(|_| err()));
        match parts.as_slice() {
            ["private", n] => Ok(KeyId::Private(node(n)?)),
            ["nsecret", g, l] => Ok(KeyId::LeaderSecret {
                group: group(g)?,
                lineage: lineage(l)?,
            }),
            ["group", g, l, e] => Ok(KeyId::Group {
                group: group(g)?,
                lineage: lineage(l)?,
                epoch: num(e, "e")?,
            }),
            ["member", g, l, m] => Ok(KeyId::Member {
                group: group(g)?,
                lineage: lineage(l)?,
                member: num(m, "m")?,
            }),
            ["ring", r] => Ok(KeyId::Ring { round: num(r, "r")? }),
            ["session", a, b, t] => Ok(KeyId::Session {
                initiator: node(a)?,
                responder: node(b)?,
                t_a: num(t, "t")?,
            }),
            _ => Err(err()),
        }
    }
}

/// A secret value together with its identity.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyRecord {
    pub id: KeyId,
    pub bytes: Vec<u8>,
}

impl fmt::Debug for KeyRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyRecord({})", self.id)
    }
}

impl KeyRecord {
    pub fn sym(id: KeyId, key: &SymmetricKey) -> Self {
        Self {
            id,
            bytes: key.bytes.to_vec(),
        }
    }

    /// The symmetric key, for symmetric ids with well-formed bytes.
    pub fn sym_key(&self) -> Option<SymmetricKey> {
        let kind = self.id.kind()?;
        let bytes: [u8; SYM_KEY_LEN] = self.bytes.as_slice().try_into().ok()?;
        Some(SymmetricKey::new(kind, bytes))
    }

    pub fn encode(&self) -> Vec<u8> {
        self.id.encode().bytes(Tag::KeyBytes, &self.bytes).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes)?;
        let id = KeyId::decode_from(&mut r)?;
        let bytes = r.bytes(Tag::KeyBytes)?.to_vec();
        r.finish()?;
        Ok(Self { id, bytes })
    }
}

/// TTP-issued binding of a node identifier to its public key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub subject: NodeId,
    pub subject_public_key: PublicKey,
    pub ttp_signature: Signature,
}

pub fn cert_signing_bytes(subject: NodeId, pk: &PublicKey) -> Vec<u8> {
    Encoder::new()
        .node(Tag::Node, subject)
        .bytes(Tag::PublicKey, &pk.0)
        .finish()
}

impl Certificate {
    pub fn encode(&self) -> Vec<u8> {
        Encoder::new()
            .node(Tag::Node, self.subject)
            .bytes(Tag::PublicKey, &self.subject_public_key.0)
            .bytes(Tag::Signature, &self.ttp_signature.bytes)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes)?;
        let cert = Self {
            subject: r.node(Tag::Node)?,
            subject_public_key: PublicKey(r.bytes(Tag::PublicKey)?.to_vec()),
            ttp_signature: Signature::new(r.bytes(Tag::Signature)?.to_vec()),
        };
        r.finish()?;
        Ok(cert)
    }
}

pub fn verify_certificate(p: &dyn CryptoProvider, ttp_public: &PublicKey, cert: &Certificate) -> bool {
    p.verify(
        ttp_public,
        &cert_signing_bytes(cert.subject, &cert.subject_public_key),
        &cert.ttp_signature,
    )
}

/// The offline trusted third party. Used only before the network starts.
#[derive(Clone, Debug)]
pub struct Ttp {
    keys: KeyPair,
}

impl Ttp {
    pub fn new(p: &dyn CryptoProvider, rng: &mut dyn RngCore) -> Self {
        Self {
            keys: p.generate_keypair(rng),
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn issue(
        &self,
        p: &dyn CryptoProvider,
        rng: &mut dyn RngCore,
        subject: NodeId,
    ) -> Result<(KeyPair, Certificate), CryptoError> {
        let keys = p.generate_keypair(rng);
        let cert = self.certify(p, subject, &keys.public)?;
        Ok((keys, cert))
    }

    pub fn certify(&self, p: &dyn CryptoProvider, subject: NodeId, pk: &PublicKey) -> Result<Certificate, CryptoError> {
        Ok(Certificate {
            subject,
            subject_public_key: pk.clone(),
            ttp_signature: p.sign(&self.keys.private, &cert_signing_bytes(subject, pk))?,
        })
    }
}

/// `k = hash_f(canonical(member_id, N))`, cut or stretched to the key length.
pub fn derive_member_key(member_id: u64, leader_secret_n: &BigUint, hash_f: HashFn) -> SymmetricKey {
    let input = Encoder::new()
        .u64(Tag::MemberId, member_id)
        .big(Tag::Secret, leader_secret_n)
        .finish();
    let mut out = hash_f.digest(&input);
    let mut counter = 0u8;
    while out.len() < SYM_KEY_LEN {
        counter += 1;
        let mut more = input.clone();
        more.push(counter);
        out.extend(hash_f.digest(&more));
    }
    let bytes: [u8; SYM_KEY_LEN] = out[..SYM_KEY_LEN].try_into().unwrap();
    SymmetricKey::new(KeyKind::Member, bytes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupKey {
    pub key: SymmetricKey,
    pub epoch: u64,
}

/// Fresh random group key for the epoch after `previous_epoch`.
pub fn generate_group_key(rng: &mut dyn RngCore, previous_epoch: u64) -> GroupKey {
    GroupKey {
        key: SymmetricKey::random(KeyKind::Group, rng),
        epoch: previous_epoch + 1,
    }
}

/// Shared state for one protocol step.
pub struct Ctx<'a> {
    pub p: &'a dyn CryptoProvider,
    pub rng: &'a mut dyn RngCore,
    pub tick: Tick,
}

/// Where an outbound message goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Addr {
    Node(NodeId),
    /// Every current member of the group.
    Group(GroupId),
    /// Group members plus one extra (non-member) node.
    GroupAnd(GroupId, NodeId),
    /// Every group leader.
    Leaders,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Out {
    pub to: Addr,
    pub msg: Message,
}

/// Events a step reports to its host.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Note {
    /// `owner` created `record`.
    Secret {
        owner: NodeId,
        record: KeyRecord,
    },
    Admitted {
        group: GroupId,
        node: NodeId,
        member_id: u64,
        session: u64,
    },
    JoinComplete {
        group: GroupId,
        node: NodeId,
        session: u64,
    },
    JoinRejected {
        group: GroupId,
        node: NodeId,
        reason: JoinFailure,
    },
    JoinAborted {
        group: GroupId,
        node: NodeId,
        reason: JoinFailure,
    },
    Removed {
        group: GroupId,
        node: NodeId,
        reason: RemovalReason,
    },
    Rekeyed {
        group: GroupId,
        lineage: u32,
        epoch: u64,
    },
    SessionConfirmed {
        a: NodeId,
        b: NodeId,
    },
    SessionAborted {
        a: NodeId,
        b: NodeId,
        reason: SessionFailure,
    },
    Alert {
        group: GroupId,
        subject: NodeId,
    },
    Warning(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Step {
    pub out: Vec<Out>,
    pub notes: Vec<Note>,
}

impl Step {
    pub fn send(&mut self, to: Addr, msg: Message) {
        self.out.push(Out { to, msg });
    }

    pub fn note(&mut self, note: Note) {
        self.notes.push(note);
    }

    pub fn extend(&mut self, other: Step) {
        self.out.extend(other.out);
        self.notes.extend(other.notes);
    }
}

/// Leader-side key state for one group lineage.
#[derive(Clone, Debug)]
pub struct KeyHierarchy {
    pub group: GroupId,
    pub lineage: u32,
    pub leader: NodeId,
    group_key: GroupKey,
    member_keys: BTreeMap<NodeId, (u64, SymmetricKey)>,
    leader_secret_n: BigUint,
    hash_f: HashFn,
    member_list: BTreeMap<NodeId, PublicKey>,
    next_member_id: u64,
}

impl KeyHierarchy {
    /// Fresh hierarchy with only the leader as member, group key at epoch 1.
    pub fn new(
        ctx: &mut Ctx<'_>,
        group: GroupId,
        lineage: u32,
        leader: NodeId,
        leader_pk: PublicKey,
        hash_f: HashFn,
        step: &mut Step,
    ) -> Self {
        let mut n_bytes = [0u8; 32];
        ctx.rng.fill_bytes(&mut n_bytes);
        n_bytes[0] |= 0x80;
        let leader_secret_n = BigUint::from_bytes_be(&n_bytes);
        let kh = Self {
            group,
            lineage,
            leader,
            group_key: generate_group_key(ctx.rng, 0),
            member_keys: BTreeMap::new(),
            leader_secret_n,
            hash_f,
            member_list: BTreeMap::from([(leader, leader_pk)]),
            next_member_id: 1,
        };
        step.note(Note::Secret {
            owner: leader,
            record: KeyRecord {
                id: KeyId::LeaderSecret { group, lineage },
                bytes: kh.leader_secret_n.to_bytes_be(),
            },
        });
        step.note(Note::Secret {
            owner: leader,
            record: kh.group_key_record(),
        });
        step.note(Note::Rekeyed {
            group,
            lineage,
            epoch: 1,
        });
        kh
    }

    pub fn epoch(&self) -> u64 {
        self.group_key.epoch
    }

    pub fn group_key(&self) -> &SymmetricKey {
        &self.group_key.key
    }

    pub fn group_key_id(&self) -> KeyId {
        KeyId::Group {
            group: self.group,
            lineage: self.lineage,
            epoch: self.group_key.epoch,
        }
    }

    pub fn group_key_record(&self) -> KeyRecord {
        KeyRecord::sym(self.group_key_id(), &self.group_key.key)
    }

    pub fn hash_f(&self) -> HashFn {
        self.hash_f
    }

    pub fn leader_secret_n(&self) -> &BigUint {
        &self.leader_secret_n
    }

    pub fn member_list(&self) -> &BTreeMap<NodeId, PublicKey> {
        &self.member_list
    }

    pub fn is_member(&self, node: NodeId) -> bool {
        self.member_list.contains_key(&node)
    }

    pub fn member_key(&self, node: NodeId) -> Option<(u64, &SymmetricKey)> {
        self.member_keys.get(&node).map(|(id, k)| (*id, k))
    }

    pub fn member_key_id(&self, member: u64) -> KeyId {
        KeyId::Member {
            group: self.group,
            lineage: self.lineage,
            member,
        }
    }

    /// Finds the member holding member id `member`.
    pub fn node_by_member_id(&self, member: u64) -> Option<NodeId> {
        self.member_keys
            .iter()
            .find(|(_, (id, _))| *id == member)
            .map(|(n, _)| *n)
    }

    /// Assigns the next member id to `node` and derives its `S_LX`.
    /// The node does not enter the member list until [`Self::add_member`].
    pub fn assign_member_key(&mut self, node: NodeId, step: &mut Step) -> (u64, SymmetricKey) {
        let id = self.next_member_id;
        self.next_member_id += 1;
        let key = derive_member_key(id, &self.leader_secret_n, self.hash_f);
        self.member_keys.insert(node, (id, key.clone()));
        step.note(Note::Secret {
            owner: self.leader,
            record: KeyRecord::sym(self.member_key_id(id), &key),
        });
        (id, key)
    }

    /// Drops a pending (not yet admitted) member key.
    pub fn discard_pending(&mut self, node: NodeId) {
        if !self.member_list.contains_key(&node) {
            self.member_keys.remove(&node);
        }
    }

    pub fn add_member(&mut self, node: NodeId, pk: PublicKey) {
        self.member_list.insert(node, pk);
    }

    pub fn drop_member(&mut self, node: NodeId) -> bool {
        self.member_keys.remove(&node);
        self.member_list.remove(&node).is_some()
    }

    /// Replaces the group key with a fresh one for the next epoch.
    pub fn rotate(&mut self, ctx: &mut Ctx<'_>, step: &mut Step) -> GroupKey {
        let old = self.group_key.clone();
        self.group_key = generate_group_key(ctx.rng, old.epoch);
        step.note(Note::Secret {
            owner: self.leader,
            record: self.group_key_record(),
        });
        step.note(Note::Rekeyed {
            group: self.group,
            lineage: self.lineage,
            epoch: self.group_key.epoch,
        });
        old
    }

    /// True when the member-key domain equals the member list minus the leader.
    pub fn invariants_hold(&self) -> bool {
        self.member_keys
            .keys()
            .copied()
            .eq(self.member_list.keys().copied().filter(|n| *n != self.leader))
    }
}

/// Member-side view of its group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Membership {
    pub group: GroupId,
    pub leader: NodeId,
    pub lineage: u32,
    pub member_id: u64,
    pub member_key: SymmetricKey,
    pub group_key: GroupKey,
    /// Public keys the member has been handed by its leader.
    pub known: BTreeMap<NodeId, PublicKey>,
}

impl Membership {
    pub fn group_key_id(&self) -> KeyId {
        KeyId::Group {
            group: self.group,
            lineage: self.lineage,
            epoch: self.group_key.epoch,
        }
    }

    pub fn member_key_id(&self) -> KeyId {
        KeyId::Member {
            group: self.group,
            lineage: self.lineage,
            member: self.member_id,
        }
    }
}

/// Opens a REKEY with whichever key it names. Installs the new group key
/// (and, on a lineage change, the new leader and member key) and returns
/// the opened body.
pub fn member_handle_rekey(
    p: &dyn CryptoProvider,
    me: NodeId,
    my_private: &PrivateKey,
    state: &mut Membership,
    msg: &Message,
) -> Result<crate::wire::RekeyBody, KeyError> {
    let Message::Rekey {
        group,
        lineage,
        epoch,
        wrap,
        sealed,
        ..
    } = msg
    else {
        return Err(KeyError::Unexpected);
    };
    if *group != state.group {
        return Err(KeyError::Unexpected);
    }
    let plain = match *wrap {
        KeyId::Private(n) if n == me => p.pk_decrypt(my_private, sealed)?,
        id if id == state.group_key_id() => p.sym_decrypt(&state.group_key.key, sealed)?,
        id if id == state.member_key_id() => p.sym_decrypt(&state.member_key, sealed)?,
        _ => return Err(KeyError::Unexpected),
    };
    let body = crate::wire::RekeyBody::decode(&plain)?;
    let KeyId::Group {
        group: g,
        lineage: l,
        epoch: e,
    } = body.group_key.id
    else {
        return Err(KeyError::Unexpected);
    };
    if g != *group || l != *lineage || e != *epoch {
        return Err(KeyError::Unexpected);
    }
    if (l, e) <= (state.lineage, state.group_key.epoch) {
        return Err(KeyError::StaleEpoch);
    }
    let key = body.group_key.sym_key().ok_or(KeyError::Unexpected)?;
    if l != state.lineage {
        let (leader, member) = match (body.leader, &body.member_key) {
            (Some(leader), Some(mk)) => (leader, mk),
            _ => return Err(KeyError::Unexpected),
        };
        let KeyId::Member { member: member_id, .. } = member.id else {
            return Err(KeyError::Unexpected);
        };
        state.leader = leader;
        state.lineage = l;
        state.member_id = member_id;
        state.member_key = member.sym_key().ok_or(KeyError::Unexpected)?;
    }
    state.group_key = GroupKey { key, epoch: e };
    if let Some(n) = body.removed {
        state.known.remove(&n);
    }
    Ok(body)
}

#[cfg(test)]
mod tests;
