//! Every message exchanged in the network and its canonical encoding.
//!
//! A message is a one-octet type tag followed by a canonical field sequence.
//! Signed messages carry their signature as the final field; the signature
//! covers the encoding with that field removed.
//!
//! | tag  | message          | tag  | message         |
//! |------|------------------|------|-----------------|
//! | 0x01 | JOIN_REQ         | 0x13 | LEAVE           |
//! | 0x02 | ZK_PARAMS        | 0x14 | RING_GDH        |
//! | 0x03 | ZK_CHALLENGE     | 0x15 | RING_GDH_FINAL  |
//! | 0x04 | ZK_RESPONSE      | 0x16 | JOIN_REJECT     |
//! | 0x05 | CERT             | 0x17 | REPORT          |
//! | 0x06 | ADMIT            | 0x20 | RREQ            |
//! | 0x07 | NONCE            | 0x21 | RREP            |
//! | 0x08 | MEMBER_SET       | 0x22 | GROUP_DATA      |
//! | 0x09 | REKEY            | 0x23 | DATA            |
//! | 0x0A-0x0D | SESSION_1..4 | 0x24 | ROUTE_QUERY    |
//! | 0x0E | PUBKEY_QUERY     | 0x25 | RING_RREQ       |
//! | 0x0F | PUBKEY_ANSWER    | 0x26 | RING_RREP       |
//! | 0x10 | MALICIOUS_ALERT  | 0x27 | ROUTE_COMPOSED  |
//! | 0x11 | HEARTBEAT        | 0x28 | ROUTE_NEGATIVE  |
//! | 0x12 | LEADER_ANNOUNCE  |      |                 |

use num_bigint::BigUint;

use crate::crypto::encoding::{DecodeError, Encoder, Reader, Tag};
use crate::crypto::zk::ZkPublicParams;
use crate::crypto::{CryptoError, CryptoProvider, PrivateKey, PublicKey, Signature};
use crate::ids::{GroupId, NodeId};
use crate::keymgmt::{Certificate, KeyId, KeyRecord};
use crate::routing::{RouteReply, RouteRequest};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    JoinReq {
        group: GroupId,
        joiner: NodeId,
        session: u64,
    },
    ZkParams {
        group: GroupId,
        session: u64,
        leader: NodeId,
        params: ZkPublicParams,
        commitments: Vec<BigUint>,
    },
    ZkChallenge {
        group: GroupId,
        session: u64,
        challenges: Vec<u64>,
    },
    ZkResponse {
        group: GroupId,
        session: u64,
        responses: Vec<BigUint>,
    },
    Cert {
        group: GroupId,
        session: u64,
        cert: Certificate,
    },
    /// `e_A(e_L, ID_A, S_LA)`.
    Admit {
        group: GroupId,
        session: u64,
        joiner: NodeId,
        sealed: Vec<u8>,
    },
    /// `S_LA(num)`.
    Nonce {
        group: GroupId,
        session: u64,
        wrap: KeyId,
        sealed: Vec<u8>,
    },
    /// `S_LA(num, member_list, group_key)`.
    MemberSet {
        group: GroupId,
        session: u64,
        wrap: KeyId,
        sealed: Vec<u8>,
    },
    Rekey {
        group: GroupId,
        lineage: u32,
        epoch: u64,
        wrap: KeyId,
        sealed: Vec<u8>,
    },
    Session1 {
        from: NodeId,
        to: NodeId,
        sealed: Vec<u8>,
    },
    Session2 {
        from: NodeId,
        to: NodeId,
        sealed: Vec<u8>,
    },
    Session3 {
        from: NodeId,
        to: NodeId,
        sealed: Vec<u8>,
    },
    Session4 {
        from: NodeId,
        to: NodeId,
        wrap: KeyId,
        sealed: Vec<u8>,
    },
    PubkeyQuery {
        group: GroupId,
        asker: NodeId,
        subject: NodeId,
        sig: Signature,
    },
    PubkeyAnswer {
        group: GroupId,
        asker: NodeId,
        subject: NodeId,
        public_key: PublicKey,
        sig: Signature,
    },
    MaliciousAlert {
        group: GroupId,
        reporter: NodeId,
        subject: NodeId,
        sig: Signature,
    },
    Heartbeat {
        group: GroupId,
        node: NodeId,
        lineage: u32,
        tick: u64,
        sig: Signature,
    },
    LeaderAnnounce {
        group: GroupId,
        leader: NodeId,
        lineage: u32,
        params: ZkPublicParams,
        sig: Signature,
    },
    Leave {
        group: GroupId,
        node: NodeId,
        lineage: u32,
        sig: Signature,
    },
    RingGdh {
        round: u64,
        order: Vec<NodeId>,
        partials: Vec<BigUint>,
        cardinal: BigUint,
    },
    RingGdhFinal {
        round: u64,
        order: Vec<NodeId>,
        values: Vec<BigUint>,
    },
    JoinReject {
        group: GroupId,
        session: u64,
        joiner: NodeId,
        reason: String,
    },
    Report {
        group: GroupId,
        reporter: NodeId,
        subject: NodeId,
        sig: Signature,
    },
    Rreq(RouteRequest),
    Rrep(RouteReply),
    GroupData {
        group: GroupId,
        sender: NodeId,
        wrap: KeyId,
        sealed: Vec<u8>,
    },
    Data {
        source: NodeId,
        dest: NodeId,
        route: Vec<NodeId>,
        wrap: Option<KeyId>,
        sealed: Vec<u8>,
    },
    RouteQuery {
        source: NodeId,
        target: NodeId,
        seq: u64,
        sig: Signature,
    },
    RingRreq {
        origin: NodeId,
        query: u64,
        wrap: KeyId,
        sealed: Vec<u8>,
    },
    RingRrep {
        responder: NodeId,
        query: u64,
        wrap: KeyId,
        sealed: Vec<u8>,
    },
    RouteComposed {
        leader: NodeId,
        source: NodeId,
        target: NodeId,
        seq: u64,
        second_leg: Vec<NodeId>,
        sig: Signature,
    },
    RouteNegative {
        leader: NodeId,
        source: NodeId,
        target: NodeId,
        seq: u64,
        sig: Signature,
    },
}

/// How a ciphertext inside a message is opened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobKind {
    Symmetric,
    PublicKey,
}

/// A ciphertext carried by a message with the key id it names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Blob<'a> {
    pub kind: BlobKind,
    pub key: KeyId,
    pub bytes: &'a [u8],
}

fn sig_field(e: Encoder, sig: Option<&Signature>) -> Encoder {
    match sig {
        Some(s) => e.bytes(Tag::Signature, &s.bytes),
        None => e,
    }
}

fn key_field(e: Encoder, id: &KeyId) -> Encoder {
    e.nested(Tag::Target, id.encode())
}

fn read_key(r: &mut Reader<'_>) -> Result<KeyId, DecodeError> {
    KeyId::decode(r.bytes(Tag::Target)?)
}

fn read_sig(r: &mut Reader<'_>) -> Result<Signature, DecodeError> {
    Ok(Signature::new(r.bytes(Tag::Signature)?.to_vec()))
}

fn read_bigs(r: &mut Reader<'_>, tag: Tag) -> Vec<BigUint> {
    r.repeated(tag).iter().map(|f| f.as_big()).collect()
}

fn bigs(mut e: Encoder, tag: Tag, vs: &[BigUint]) -> Encoder {
    for v in vs {
        e.push(tag, &v.to_bytes_be());
    }
    e
}

impl Message {
    pub fn type_tag(&self) -> u8 {
        match self {
            Message::JoinReq { .. } => 0x01,
            Message::ZkParams { .. } => 0x02,
            Message::ZkChallenge { .. } => 0x03,
            Message::ZkResponse { .. } => 0x04,
            Message::Cert { .. } => 0x05,
            Message::Admit { .. } => 0x06,
            Message::Nonce { .. } => 0x07,
            Message::MemberSet { .. } => 0x08,
            Message::Rekey { .. } => 0x09,
            Message::Session1 { .. } => 0x0a,
            Message::Session2 { .. } => 0x0b,
            Message::Session3 { .. } => 0x0c,
            Message::Session4 { .. } => 0x0d,
            Message::PubkeyQuery { .. } => 0x0e,
            Message::PubkeyAnswer { .. } => 0x0f,
            Message::MaliciousAlert { .. } => 0x10,
            Message::Heartbeat { .. } => 0x11,
            Message::LeaderAnnounce { .. } => 0x12,
            Message::Leave { .. } => 0x13,
            Message::RingGdh { .. } => 0x14,
            Message::RingGdhFinal { .. } => 0x15,
            Message::JoinReject { .. } => 0x16,
            Message::Report { .. } => 0x17,
            Message::Rreq(_) => crate::routing::RREQ_TAG,
            Message::Rrep(_) => crate::routing::RREP_TAG,
            Message::GroupData { .. } => 0x22,
            Message::Data { .. } => 0x23,
            Message::RouteQuery { .. } => 0x24,
            Message::RingRreq { .. } => 0x25,
            Message::RingRrep { .. } => 0x26,
            Message::RouteComposed { .. } => 0x27,
            Message::RouteNegative { .. } => 0x28,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::JoinReq { .. } => "JOIN_REQ",
            Message::ZkParams { .. } => "ZK_PARAMS",
            Message::ZkChallenge { .. } => "ZK_CHALLENGE",
            Message::ZkResponse { .. } => "ZK_RESPONSE",
            Message::Cert { .. } => "CERT",
            Message::Admit { .. } => "ADMIT",
            Message::Nonce { .. } => "NONCE",
            Message::MemberSet { .. } => "MEMBER_SET",
            Message::Rekey { .. } => "REKEY",
            Message::Session1 { .. } => "SESSION_1",
            Message::Session2 { .. } => "SESSION_2",
            Message::Session3 { .. } => "SESSION_3",
            Message::Session4 { .. } => "SESSION_4",
            Message::PubkeyQuery { .. } => "PUBKEY_QUERY",
            Message::PubkeyAnswer { .. } => "PUBKEY_ANSWER",
            Message::MaliciousAlert { .. } => "MALICIOUS_ALERT",
            Message::Heartbeat { .. } => "HEARTBEAT",
            Message::LeaderAnnounce { .. } => "LEADER_ANNOUNCE",
            Message::Leave { .. } => "LEAVE",
            Message::RingGdh { .. } => "RING_GDH",
            Message::RingGdhFinal { .. } => "RING_GDH_FINAL",
            Message::JoinReject { .. } => "JOIN_REJECT",
            Message::Report { .. } => "REPORT",
            Message::Rreq(_) => "RREQ",
            Message::Rrep(_) => "RREP",
            Message::GroupData { .. } => "GROUP_DATA",
            Message::Data { .. } => "DATA",
            Message::RouteQuery { .. } => "ROUTE_QUERY",
            Message::RingRreq { .. } => "RING_RREQ",
            Message::RingRrep { .. } => "RING_RREP",
            Message::RouteComposed { .. } => "ROUTE_COMPOSED",
            Message::RouteNegative { .. } => "ROUTE_NEGATIVE",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        self.encode_inner(true)
    }

    /// Bytes covered by the message signature (everything but the signature).
    pub fn signing_bytes(&self) -> Vec<u8> {
        self.encode_inner(false)
    }

    fn encode_inner(&self, with_sig: bool) -> Vec<u8> {
        let e = Encoder::with_type(self.type_tag());
        let sig = |s: &Signature| with_sig.then_some(s).cloned();
        match self {
            Message::JoinReq { group, joiner, session } => e
                .group(*group)
                .node(Tag::Node, *joiner)
                .u64(Tag::Session, *session)
                .finish(),
            Message::ZkParams {
                group,
                session,
                leader,
                params,
                commitments,
            } => bigs(
                e.group(*group)
                    .u64(Tag::Session, *session)
                    .node(Tag::Leader, *leader)
                    .big(Tag::ZkN, &params.n)
                    .big(Tag::ZkV, &params.v),
                Tag::ZkX,
                commitments,
            )
            .finish(),
            Message::ZkChallenge {
                group,
                session,
                challenges,
            } => {
                let mut e = e.group(*group).u64(Tag::Session, *session);
                for c in challenges {
                    e.push(Tag::ZkChallenge, &c.to_be_bytes());
                }
                e.finish()
            }
            Message::ZkResponse {
                group,
                session,
                responses,
            } => bigs(e.group(*group).u64(Tag::Session, *session), Tag::ZkY, responses).finish(),
            Message::Cert { group, session, cert } => e
                .group(*group)
                .u64(Tag::Session, *session)
                .bytes(Tag::Certificate, &cert.encode())
                .finish(),
            Message::Admit {
                group,
                session,
                joiner,
                sealed,
            } => e
                .group(*group)
                .u64(Tag::Session, *session)
                .node(Tag::Node, *joiner)
                .bytes(Tag::PkCiphertext, sealed)
                .finish(),
            Message::Nonce {
                group,
                session,
                wrap,
                sealed,
            }
            | Message::MemberSet {
                group,
                session,
                wrap,
                sealed,
            } => key_field(e.group(*group).u64(Tag::Session, *session), wrap)
                .bytes(Tag::SymCiphertext, sealed)
                .finish(),
            Message::Rekey {
                group,
                lineage,
                epoch,
                wrap,
                sealed,
            } => {
                let e = key_field(
                    e.group(*group).u32(Tag::Lineage, *lineage).u64(Tag::Epoch, *epoch),
                    wrap,
                );
                let tag = if matches!(wrap, KeyId::Private(_)) {
                    Tag::PkCiphertext
                } else {
                    Tag::SymCiphertext
                };
                e.bytes(tag, sealed).finish()
            }
            Message::Session1 { from, to, sealed }
            | Message::Session2 { from, to, sealed }
            | Message::Session3 { from, to, sealed } => e
                .node(Tag::Source, *from)
                .node(Tag::Dest, *to)
                .bytes(Tag::PkCiphertext, sealed)
                .finish(),
            Message::Session4 { from, to, wrap, sealed } => {
                key_field(e.node(Tag::Source, *from).node(Tag::Dest, *to), wrap)
                    .bytes(Tag::SymCiphertext, sealed)
                    .finish()
            }
            Message::PubkeyQuery {
                group,
                asker,
                subject,
                sig: s,
            } => sig_field(
                e.group(*group).node(Tag::Source, *asker).node(Tag::Target, *subject),
                sig(s).as_ref(),
            )
            .finish(),
            Message::PubkeyAnswer {
                group,
                asker,
                subject,
                public_key,
                sig: s,
            } => sig_field(
                e.group(*group)
                    .node(Tag::Source, *asker)
                    .node(Tag::Target, *subject)
                    .bytes(Tag::PublicKey, &public_key.0),
                sig(s).as_ref(),
            )
            .finish(),
            Message::MaliciousAlert {
                group,
                reporter,
                subject,
                sig: s,
            }
            | Message::Report {
                group,
                reporter,
                subject,
                sig: s,
            } => sig_field(
                e.group(*group).node(Tag::Source, *reporter).node(Tag::Target, *subject),
                sig(s).as_ref(),
            )
            .finish(),
            Message::Heartbeat {
                group,
                node,
                lineage,
                tick,
                sig: s,
            } => sig_field(
                e.group(*group)
                    .node(Tag::Node, *node)
                    .u32(Tag::Lineage, *lineage)
                    .u64(Tag::Timestamp, *tick),
                sig(s).as_ref(),
            )
            .finish(),
            Message::LeaderAnnounce {
                group,
                leader,
                lineage,
                params,
                sig: s,
            } => sig_field(
                e.group(*group)
                    .node(Tag::Leader, *leader)
                    .u32(Tag::Lineage, *lineage)
                    .big(Tag::ZkN, &params.n)
                    .big(Tag::ZkV, &params.v),
                sig(s).as_ref(),
            )
            .finish(),
            Message::Leave {
                group,
                node,
                lineage,
                sig: s,
            } => sig_field(
                e.group(*group).node(Tag::Node, *node).u32(Tag::Lineage, *lineage),
                sig(s).as_ref(),
            )
            .finish(),
            Message::RingGdh {
                round,
                order,
                partials,
                cardinal,
            } => bigs(
                e.u64(Tag::Round, *round).nodes(Tag::Leader, order),
                Tag::Value,
                partials,
            )
            .big(Tag::Secret, cardinal)
            .finish(),
            Message::RingGdhFinal { round, order, values } => {
                bigs(e.u64(Tag::Round, *round).nodes(Tag::Leader, order), Tag::Value, values).finish()
            }
            Message::JoinReject {
                group,
                session,
                joiner,
                reason,
            } => e
                .group(*group)
                .u64(Tag::Session, *session)
                .node(Tag::Node, *joiner)
                .bytes(Tag::Reason, reason.as_bytes())
                .finish(),
            Message::Rreq(r) => r.encode(),
            Message::Rrep(r) => r.encode(),
            Message::GroupData {
                group,
                sender,
                wrap,
                sealed,
            } => key_field(e.group(*group).node(Tag::Source, *sender), wrap)
                .bytes(Tag::SymCiphertext, sealed)
                .finish(),
            Message::Data {
                source,
                dest,
                route,
                wrap,
                sealed,
            } => {
                let e = e
                    .node(Tag::Source, *source)
                    .node(Tag::Dest, *dest)
                    .nodes(Tag::Node, route);
                match wrap {
                    Some(w) => key_field(e, w).bytes(Tag::SymCiphertext, sealed),
                    None => e.bytes(Tag::Payload, sealed),
                }
                .finish()
            }
            Message::RouteQuery {
                source,
                target,
                seq,
                sig: s,
            } => sig_field(
                e.node(Tag::Source, *source)
                    .node(Tag::Target, *target)
                    .u64(Tag::Seq, *seq),
                sig(s).as_ref(),
            )
            .finish(),
            Message::RingRreq {
                origin: n,
                query,
                wrap,
                sealed,
            }
            | Message::RingRrep {
                responder: n,
                query,
                wrap,
                sealed,
            } => key_field(e.node(Tag::Leader, *n).u64(Tag::Query, *query), wrap)
                .bytes(Tag::SymCiphertext, sealed)
                .finish(),
            Message::RouteComposed {
                leader,
                source,
                target,
                seq,
                second_leg,
                sig: s,
            } => sig_field(
                e.node(Tag::Leader, *leader)
                    .node(Tag::Source, *source)
                    .node(Tag::Target, *target)
                    .u64(Tag::Seq, *seq)
                    .nodes(Tag::Route, second_leg),
                sig(s).as_ref(),
            )
            .finish(),
            Message::RouteNegative {
                leader,
                source,
                target,
                seq,
                sig: s,
            } => sig_field(
                e.node(Tag::Leader, *leader)
                    .node(Tag::Source, *source)
                    .node(Tag::Target, *target)
                    .u64(Tag::Seq, *seq),
                sig(s).as_ref(),
            )
            .finish(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let (&kind, body) = bytes.split_first().ok_or(DecodeError::Empty)?;
        if kind == crate::routing::RREQ_TAG {
            return RouteRequest::decode_body(body).map(Message::Rreq);
        }
        if kind == crate::routing::RREP_TAG {
            return RouteReply::decode_body(body).map(Message::Rrep);
        }
        let mut reader = Reader::new(body)?;
        let r = &mut reader;
        let m = match kind {
            0x01 => Message::JoinReq {
                group: r.group()?,
                joiner: r.node(Tag::Node)?,
                session: r.u64(Tag::Session)?,
            },
            0x02 => Message::ZkParams {
                group: r.group()?,
                session: r.u64(Tag::Session)?,
                leader: r.node(Tag::Leader)?,
                params: ZkPublicParams {
                    n: r.big(Tag::ZkN)?,
                    v: r.big(Tag::ZkV)?,
                },
                commitments: read_bigs(r, Tag::ZkX),
            },
            0x03 => Message::ZkChallenge {
                group: r.group()?,
                session: r.u64(Tag::Session)?,
                challenges: r
                    .repeated(Tag::ZkChallenge)
                    .iter()
                    .map(|f| f.as_u64())
                    .collect::<Result<_, _>>()?,
            },
            0x04 => Message::ZkResponse {
                group: r.group()?,
                session: r.u64(Tag::Session)?,
                responses: read_bigs(r, Tag::ZkY),
            },
            0x05 => Message::Cert {
                group: r.group()?,
                session: r.u64(Tag::Session)?,
                cert: Certificate::decode(r.bytes(Tag::Certificate)?)?,
            },
            0x06 => Message::Admit {
                group: r.group()?,
                session: r.u64(Tag::Session)?,
                joiner: r.node(Tag::Node)?,
                sealed: r.bytes(Tag::PkCiphertext)?.to_vec(),
            },
            0x07 | 0x08 => {
                let group = r.group()?;
                let session = r.u64(Tag::Session)?;
                let wrap = read_key(r)?;
                let sealed = r.bytes(Tag::SymCiphertext)?.to_vec();
                if kind == 0x07 {
                    Message::Nonce {
                        group,
                        session,
                        wrap,
                        sealed,
                    }
                } else {
                    Message::MemberSet {
                        group,
                        session,
                        wrap,
                        sealed,
                    }
                }
            }
            0x09 => {
                let group = r.group()?;
                let lineage = r.u32(Tag::Lineage)?;
                let epoch = r.u64(Tag::Epoch)?;
                let wrap = read_key(r)?;
                let tag = if matches!(wrap, KeyId::Private(_)) {
                    Tag::PkCiphertext
                } else {
                    Tag::SymCiphertext
                };
                Message::Rekey {
                    group,
                    lineage,
                    epoch,
                    wrap,
                    sealed: r.bytes(tag)?.to_vec(),
                }
            }
            0x0a..=0x0c => {
                let from = r.node(Tag::Source)?;
                let to = r.node(Tag::Dest)?;
                let sealed = r.bytes(Tag::PkCiphertext)?.to_vec();
                match kind {
                    0x0a => Message::Session1 { from, to, sealed },
                    0x0b => Message::Session2 { from, to, sealed },
                    _ => Message::Session3 { from, to, sealed },
                }
            }
            0x0d => Message::Session4 {
                from: r.node(Tag::Source)?,
                to: r.node(Tag::Dest)?,
                wrap: read_key(r)?,
                sealed: r.bytes(Tag::SymCiphertext)?.to_vec(),
            },
            0x0e => Message::PubkeyQuery {
                group: r.group()?,
                asker: r.node(Tag::Source)?,
                subject: r.node(Tag::Target)?,
                sig: read_sig(r)?,
            },
            0x0f => Message::PubkeyAnswer {
                group: r.group()?,
                asker: r.node(Tag::Source)?,
                subject: r.node(Tag::Target)?,
                public_key: PublicKey(r.bytes(Tag::PublicKey)?.to_vec()),
                sig: read_sig(r)?,
            },
            0x10 | 0x17 => {
                let group = r.group()?;
                let reporter = r.node(Tag::Source)?;
                let subject = r.node(Tag::Target)?;
                let sig = read_sig(r)?;
                if kind == 0x10 {
                    Message::MaliciousAlert {
                        group,
                        reporter,
                        subject,
                        sig,
                    }
                } else {
                    Message::Report {
                        group,
                        reporter,
                        subject,
                        sig,
                    }
                }
            }
            0x11 => Message::Heartbeat {
                group: r.group()?,
                node: r.node(Tag::Node)?,
                lineage: r.u32(Tag::Lineage)?,
                tick: r.u64(Tag::Timestamp)?,
                sig: read_sig(r)?,
            },
            0x12 => Message::LeaderAnnounce {
                group: r.group()?,
                leader: r.node(Tag::Leader)?,
                lineage: r.u32(Tag::Lineage)?,
                params: ZkPublicParams {
                    n: r.big(Tag::ZkN)?,
                    v: r.big(Tag::ZkV)?,
                },
                sig: read_sig(r)?,
            },
            0x13 => Message::Leave {
                group: r.group()?,
                node: r.node(Tag::Node)?,
                lineage: r.u32(Tag::Lineage)?,
                sig: read_sig(r)?,
            },
            0x14 => Message::RingGdh {
                round: r.u64(Tag::Round)?,
                order: r.nodes(Tag::Leader)?,
                partials: read_bigs(r, Tag::Value),
                cardinal: r.big(Tag::Secret)?,
            },
            0x15 => Message::RingGdhFinal {
                round: r.u64(Tag::Round)?,
                order: r.nodes(Tag::Leader)?,
                values: read_bigs(r, Tag::Value),
            },
            0x16 => Message::JoinReject {
                group: r.group()?,
                session: r.u64(Tag::Session)?,
                joiner: r.node(Tag::Node)?,
                reason: String::from_utf8(r.bytes(Tag::Reason)?.to_vec())
                    .map_err(|_| DecodeError::Invalid(Tag::Reason))?,
            },
            0x22 => Message::GroupData {
                group: r.group()?,
                sender: r.node(Tag::Source)?,
                wrap: read_key(r)?,
                sealed: r.bytes(Tag::SymCiphertext)?.to_vec(),
            },
            0x23 => {
                let source = r.node(Tag::Source)?;
                let dest = r.node(Tag::Dest)?;
                let route = r.nodes(Tag::Node)?;
                let (wrap, sealed) = if r.peek_tag() == Some(Tag::Target) {
                    (Some(read_key(r)?), r.bytes(Tag::SymCiphertext)?.to_vec())
                } else {
                    (None, r.bytes(Tag::Payload)?.to_vec())
                };
                Message::Data {
                    source,
                    dest,
                    route,
                    wrap,
                    sealed,
                }
            }
            0x24 => Message::RouteQuery {
                source: r.node(Tag::Source)?,
                target: r.node(Tag::Target)?,
                seq: r.u64(Tag::Seq)?,
                sig: read_sig(r)?,
            },
            0x25 | 0x26 => {
                let n = r.node(Tag::Leader)?;
                let query = r.u64(Tag::Query)?;
                let wrap = read_key(r)?;
                let sealed = r.bytes(Tag::SymCiphertext)?.to_vec();
                if kind == 0x25 {
                    Message::RingRreq {
                        origin: n,
                        query,
                        wrap,
                        sealed,
                    }
                } else {
                    Message::RingRrep {
                        responder: n,
                        query,
                        wrap,
                        sealed,
                    }
                }
            }
            0x27 => Message::RouteComposed {
                leader: r.node(Tag::Leader)?,
                source: r.node(Tag::Source)?,
                target: r.node(Tag::Target)?,
                seq: r.u64(Tag::Seq)?,
                second_leg: r.nodes(Tag::Route)?,
                sig: read_sig(r)?,
            },
            0x28 => Message::RouteNegative {
                leader: r.node(Tag::Leader)?,
                source: r.node(Tag::Source)?,
                target: r.node(Tag::Target)?,
                seq: r.u64(Tag::Seq)?,
                sig: read_sig(r)?,
            },
            other => return Err(DecodeError::UnknownMessage(other)),
        };
        reader.finish()?;
        Ok(m)
    }

    fn sig_mut(&mut self) -> Option<&mut Signature> {
        match self {
            Message::PubkeyQuery { sig, .. }
            | Message::PubkeyAnswer { sig, .. }
            | Message::MaliciousAlert { sig, .. }
            | Message::Report { sig, .. }
            | Message::Heartbeat { sig, .. }
            | Message::LeaderAnnounce { sig, .. }
            | Message::Leave { sig, .. }
            | Message::RouteQuery { sig, .. }
            | Message::RouteComposed { sig, .. }
            | Message::RouteNegative { sig, .. } => Some(sig),
            _ => None,
        }
    }

    pub fn signature(&self) -> Option<&Signature> {
        match self {
            Message::PubkeyQuery { sig, .. }
            | Message::PubkeyAnswer { sig, .. }
            | Message::MaliciousAlert { sig, .. }
            | Message::Report { sig, .. }
            | Message::Heartbeat { sig, .. }
            | Message::LeaderAnnounce { sig, .. }
            | Message::Leave { sig, .. }
            | Message::RouteQuery { sig, .. }
            | Message::RouteComposed { sig, .. }
            | Message::RouteNegative { sig, .. } => Some(sig),
            _ => None,
        }
    }

    /// Fills in the signature of a signed message kind. No-op for others.
    pub fn signed(mut self, p: &dyn CryptoProvider, private: &PrivateKey) -> Result<Self, CryptoError> {
        if self.sig_mut().is_some() {
            let sig = p.sign(private, &self.signing_bytes())?;
            *self.sig_mut().unwrap() = sig;
        }
        Ok(self)
    }

    pub fn verify_signature(&self, p: &dyn CryptoProvider, public: &PublicKey) -> bool {
        self.signature()
            .is_some_and(|s| p.verify(public, &self.signing_bytes(), s))
    }

    /// Every ciphertext the message carries, with the key it names.
    pub fn blobs(&self) -> Vec<Blob<'_>> {
        match self {
            Message::Admit { joiner, sealed, .. } => vec![pk(*joiner, sealed)],
            Message::Nonce { wrap, sealed, .. }
            | Message::MemberSet { wrap, sealed, .. }
            | Message::Session4 { wrap, sealed, .. }
            | Message::GroupData { wrap, sealed, .. }
            | Message::RingRreq { wrap, sealed, .. }
            | Message::RingRrep { wrap, sealed, .. } => vec![sym(wrap, sealed)],
            Message::Rekey { wrap, sealed, .. } => match wrap {
                KeyId::Private(n) => vec![pk(*n, sealed)],
                w => vec![sym(w, sealed)],
            },
            Message::Session1 { to, sealed, .. }
            | Message::Session2 { to, sealed, .. }
            | Message::Session3 { to, sealed, .. } => vec![pk(*to, sealed)],
            Message::Data {
                wrap: Some(w), sealed, ..
            } => vec![sym(w, sealed)],
            _ => Vec::new(),
        }
    }
}

fn sym<'a>(key: &KeyId, bytes: &'a [u8]) -> Blob<'a> {
    Blob {
        kind: BlobKind::Symmetric,
        key: *key,
        bytes,
    }
}

fn pk(to: NodeId, bytes: &[u8]) -> Blob<'_> {
    Blob {
        kind: BlobKind::PublicKey,
        key: KeyId::Private(to),
        bytes,
    }
}

/// Extracts every key record at the top level of a decrypted body.
pub fn key_records(plaintext: &[u8]) -> Vec<KeyRecord> {
    crate::crypto::encoding::decode_fields(plaintext)
        .map(|fields| {
            fields
                .iter()
                .filter(|f| matches!(f.tag, Tag::GroupKey | Tag::MemberKey | Tag::SessionKey | Tag::RingKey))
                .filter_map(|f| KeyRecord::decode(f.value).ok())
                .collect()
        })
        .unwrap_or_default()
}

/// Plaintext of ADMIT: `(e_L, ID_A, S_LA)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdmitBody {
    pub leader: NodeId,
    pub leader_pk: PublicKey,
    pub member_id: u64,
    pub member_key: KeyRecord,
}

impl AdmitBody {
    pub fn encode(&self) -> Vec<u8> {
        Encoder::new()
            .node(Tag::Leader, self.leader)
            .bytes(Tag::PublicKey, &self.leader_pk.0)
            .u64(Tag::MemberId, self.member_id)
            .bytes(Tag::MemberKey, &self.member_key.encode())
            .finish()
    }

    pub fn decode(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b)?;
        let out = Self {
            leader: r.node(Tag::Leader)?,
            leader_pk: PublicKey(r.bytes(Tag::PublicKey)?.to_vec()),
            member_id: r.u64(Tag::MemberId)?,
            member_key: KeyRecord::decode(r.bytes(Tag::MemberKey)?)?,
        };
        r.finish()?;
        Ok(out)
    }
}

/// Plaintext of MEMBER_SET: `(num, member_list, group_key)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemberSetBody {
    pub num: u64,
    pub members: Vec<(NodeId, PublicKey)>,
    pub group_key: KeyRecord,
}

impl MemberSetBody {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new().u64(Tag::Nonce, self.num);
        for (n, pk) in &self.members {
            let inner = Encoder::new().node(Tag::Node, *n).bytes(Tag::PublicKey, &pk.0);
            e = e.nested(Tag::Member, inner);
        }
        e.bytes(Tag::GroupKey, &self.group_key.encode()).finish()
    }

    pub fn decode(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b)?;
        let num = r.u64(Tag::Nonce)?;
        let members = r
            .repeated(Tag::Member)
            .iter()
            .map(|f| {
                let mut m = Reader::new(f.value)?;
                let n = m.node(Tag::Node)?;
                let pk = PublicKey(m.bytes(Tag::PublicKey)?.to_vec());
                m.finish()?;
                Ok((n, pk))
            })
            .collect::<Result<_, DecodeError>>()?;
        let group_key = KeyRecord::decode(r.bytes(Tag::GroupKey)?)?;
        r.finish()?;
        Ok(Self {
            num,
            members,
            group_key,
        })
    }
}

/// Plaintext of REKEY. On a lineage change it also names the new leader and
/// carries the recipient's new member key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RekeyBody {
    pub group_key: KeyRecord,
    pub leader: Option<NodeId>,
    pub member_key: Option<KeyRecord>,
    pub added: Option<NodeId>,
    pub removed: Option<NodeId>,
}

impl RekeyBody {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new().bytes(Tag::GroupKey, &self.group_key.encode());
        if let Some(l) = self.leader {
            e = e.node(Tag::Leader, l);
        }
        if let Some(mk) = &self.member_key {
            e = e.bytes(Tag::MemberKey, &mk.encode());
        }
        if let Some(a) = self.added {
            e = e.node(Tag::Member, a);
        }
        if let Some(r) = self.removed {
            e = e.node(Tag::Removed, r);
        }
        e.finish()
    }

    pub fn decode(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b)?;
        let group_key = KeyRecord::decode(r.bytes(Tag::GroupKey)?)?;
        let leader = r.optional(Tag::Leader).map(|f| f.as_node()).transpose()?;
        let member_key = r
            .optional(Tag::MemberKey)
            .map(|f| KeyRecord::decode(f.value))
            .transpose()?;
        let added = r.optional(Tag::Member).map(|f| f.as_node()).transpose()?;
        let removed = r.optional(Tag::Removed).map(|f| f.as_node()).transpose()?;
        r.finish()?;
        Ok(Self {
            group_key,
            leader,
            member_key,
            added,
            removed,
        })
    }
}

/// Single-nonce body (NONCE).
pub fn encode_nonce(num: u64) -> Vec<u8> {
    Encoder::new().u64(Tag::Nonce, num).finish()
}

pub fn decode_nonce(b: &[u8]) -> Result<u64, DecodeError> {
    let mut r = Reader::new(b)?;
    let n = r.u64(Tag::Nonce)?;
    r.finish()?;
    Ok(n)
}

/// Leader-ring discovery body: `(source, target, seq)`.
pub fn encode_ring_query(source: NodeId, target: NodeId, seq: u64) -> Vec<u8> {
    Encoder::new()
        .node(Tag::Source, source)
        .node(Tag::Target, target)
        .u64(Tag::Seq, seq)
        .finish()
}

pub fn decode_ring_query(b: &[u8]) -> Result<(NodeId, NodeId, u64), DecodeError> {
    let mut r = Reader::new(b)?;
    let out = (r.node(Tag::Source)?, r.node(Tag::Target)?, r.u64(Tag::Seq)?);
    r.finish()?;
    Ok(out)
}

/// Leader-ring reply body: the target and, if found, the leg from the
/// responding leader to it.
pub fn encode_ring_reply(target: NodeId, leg: Option<&[NodeId]>) -> Vec<u8> {
    let e = Encoder::new().node(Tag::Target, target);
    match leg {
        Some(l) => e.u32(Tag::Flag, 1).nodes(Tag::Route, l),
        None => e.u32(Tag::Flag, 0),
    }
    .finish()
}

pub fn decode_ring_reply(b: &[u8]) -> Result<(NodeId, Option<Vec<NodeId>>), DecodeError> {
    let mut r = Reader::new(b)?;
    let target = r.node(Tag::Target)?;
    let found = r.u32(Tag::Flag)? == 1;
    let leg = r.nodes(Tag::Route)?;
    r.finish()?;
    Ok((target, found.then_some(leg)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ProviderKind;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sample_messages() -> Vec<Message> {
        let g = GroupId(1);
        let params = ZkPublicParams {
            n: BigUint::from(21u32),
            v: BigUint::from(4u32),
        };
        let wrap = KeyId::Group {
            group: g,
            lineage: 0,
            epoch: 3,
        };
        let sig = Signature::new(vec![1, 2, 3]);
        vec![
            Message::JoinReq {
                group: g,
                joiner: NodeId(4),
                session: 9,
            },
            Message::ZkParams {
                group: g,
                session: 9,
                leader: NodeId(1),
                params: params.clone(),
                commitments: vec![BigUint::from(16u32), BigUint::from(4u32)],
            },
            Message::ZkChallenge {
                group: g,
                session: 9,
                challenges: vec![1, u64::MAX],
            },
            Message::ZkResponse {
                group: g,
                session: 9,
                responses: vec![BigUint::from(11u32)],
            },
            Message::Cert {
                group: g,
                session: 9,
                cert: Certificate {
                    subject: NodeId(4),
                    subject_public_key: PublicKey(vec![7; 8]),
                    ttp_signature: sig.clone(),
                },
            },
            Message::Admit {
                group: g,
                session: 9,
                joiner: NodeId(4),
                sealed: vec![5; 20],
            },
            Message::Nonce {
                group: g,
                session: 9,
                wrap: KeyId::Member {
                    group: g,
                    lineage: 0,
                    member: 2,
                },
                sealed: vec![1; 30],
            },
            Message::MemberSet {
                group: g,
                session: 9,
                wrap,
                sealed: vec![1; 3],
            },
            Message::Rekey {
                group: g,
                lineage: 0,
                epoch: 4,
                wrap: KeyId::Private(NodeId(3)),
                sealed: vec![9; 9],
            },
            Message::Rekey {
                group: g,
                lineage: 0,
                epoch: 4,
                wrap,
                sealed: vec![9; 9],
            },
            Message::Session1 {
                from: NodeId(1),
                to: NodeId(2),
                sealed: vec![1],
            },
            Message::Session2 {
                from: NodeId(2),
                to: NodeId(1),
                sealed: vec![2],
            },
            Message::Session3 {
                from: NodeId(1),
                to: NodeId(2),
                sealed: vec![3],
            },
            Message::Session4 {
                from: NodeId(2),
                to: NodeId(1),
                wrap: KeyId::Session {
                    initiator: NodeId(1),
                    responder: NodeId(2),
                    t_a: 5,
                },
                sealed: vec![4],
            },
            Message::PubkeyQuery {
                group: g,
                asker: NodeId(2),
                subject: NodeId(1),
                sig: sig.clone(),
            },
            Message::PubkeyAnswer {
                group: g,
                asker: NodeId(2),
                subject: NodeId(1),
                public_key: PublicKey(vec![3; 4]),
                sig: sig.clone(),
            },
            Message::MaliciousAlert {
                group: g,
                reporter: NodeId(1),
                subject: NodeId(8),
                sig: sig.clone(),
            },
            Message::Report {
                group: g,
                reporter: NodeId(2),
                subject: NodeId(8),
                sig: sig.clone(),
            },
            Message::Heartbeat {
                group: g,
                node: NodeId(2),
                lineage: 0,
                tick: 40,
                sig: sig.clone(),
            },
            Message::LeaderAnnounce {
                group: g,
                leader: NodeId(1),
                lineage: 2,
                params,
                sig: sig.clone(),
            },
            Message::Leave {
                group: g,
                node: NodeId(3),
                lineage: 0,
                sig: sig.clone(),
            },
            Message::RingGdh {
                round: 1,
                order: vec![NodeId(1), NodeId(5)],
                partials: vec![BigUint::from(8u32)],
                cardinal: BigUint::from(2u32),
            },
            Message::RingGdhFinal {
                round: 1,
                order: vec![NodeId(1), NodeId(5)],
                values: vec![BigUint::from(8u32)],
            },
            Message::JoinReject {
                group: g,
                session: 3,
                joiner: NodeId(9),
                reason: "capacity".into(),
            },
            Message::GroupData {
                group: g,
                sender: NodeId(2),
                wrap,
                sealed: vec![0; 40],
            },
            Message::Data {
                source: NodeId(1),
                dest: NodeId(3),
                route: vec![NodeId(1), NodeId(2), NodeId(3)],
                wrap: Some(wrap),
                sealed: vec![1; 5],
            },
            Message::Data {
                source: NodeId(1),
                dest: NodeId(3),
                route: vec![NodeId(1), NodeId(3)],
                wrap: None,
                sealed: b"hi".to_vec(),
            },
            Message::RouteQuery {
                source: NodeId(1),
                target: NodeId(9),
                seq: 2,
                sig: sig.clone(),
            },
            Message::RingRreq {
                origin: NodeId(1),
                query: 7,
                wrap: KeyId::Ring { round: 1 },
                sealed: vec![3; 3],
            },
            Message::RingRrep {
                responder: NodeId(5),
                query: 7,
                wrap: KeyId::Ring { round: 1 },
                sealed: vec![3; 3],
            },
            Message::RouteComposed {
                leader: NodeId(1),
                source: NodeId(2),
                target: NodeId(9),
                seq: 2,
                second_leg: vec![NodeId(5), NodeId(9)],
                sig: sig.clone(),
            },
            Message::RouteNegative {
                leader: NodeId(1),
                source: NodeId(2),
                target: NodeId(9),
                seq: 2,
                sig,
            },
        ]
    }

    #[test]
    fn every_message_roundtrips() {
        for m in sample_messages() {
            let bytes = m.encode();
            assert_eq!(bytes[0], m.type_tag());
            assert_eq!(Message::decode(&bytes).unwrap(), m, "{}", m.name());
        }
    }

    #[test]
    fn type_tags_are_distinct() {
        let mut tags: Vec<u8> = sample_messages().iter().map(|m| m.type_tag()).collect();
        tags.sort();
        tags.dedup();
        assert_eq!(tags.len(), 30);
    }

    #[test]
    fn trailing_and_unknown_rejected() {
        let mut bytes = sample_messages()[0].encode();
        bytes.extend(Encoder::new().u32(Tag::Seq, 1).finish());
        assert_eq!(Message::decode(&bytes), Err(DecodeError::Trailing));
        assert_eq!(Message::decode(&[0x7f]), Err(DecodeError::UnknownMessage(0x7f)));
        assert_eq!(Message::decode(&[]), Err(DecodeError::Empty));
    }

    #[test]
    fn signatures_cover_all_but_signature() {
        let p = ProviderKind::TestDouble.build();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = p.generate_keypair(&mut rng);
        let m = Message::Leave {
            group: GroupId(1),
            node: NodeId(3),
            lineage: 0,
            sig: Signature::new(vec![]),
        }
        .signed(&*p, &kp.private)
        .unwrap();
        assert!(m.verify_signature(&*p, &kp.public));
        let Message::Leave { sig, .. } = m.clone() else {
            unreachable!()
        };
        let forged = Message::Leave {
            group: GroupId(1),
            node: NodeId(4),
            lineage: 0,
            sig,
        };
        assert!(!forged.verify_signature(&*p, &kp.public));
        let decoded = Message::decode(&m.encode()).unwrap();
        assert!(decoded.verify_signature(&*p, &kp.public));
    }

    #[test]
    fn bodies_roundtrip() {
        let rec = KeyRecord {
            id: KeyId::Group {
                group: GroupId(2),
                lineage: 1,
                epoch: 5,
            },
            bytes: vec![7; 32],
        };
        let m = MemberSetBody {
            num: 99,
            members: vec![(NodeId(1), PublicKey(vec![1, 2])), (NodeId(3), PublicKey(vec![3]))],
            group_key: rec.clone(),
        };
        assert_eq!(MemberSetBody::decode(&m.encode()).unwrap(), m);
        assert_eq!(key_records(&m.encode()), vec![rec.clone()]);
        let r = RekeyBody {
            group_key: rec.clone(),
            leader: Some(NodeId(4)),
            member_key: Some(KeyRecord {
                id: KeyId::Member {
                    group: GroupId(2),
                    lineage: 1,
                    member: 3,
                },
                bytes: vec![1; 32],
            }),
            added: None,
            removed: Some(NodeId(6)),
        };
        assert_eq!(RekeyBody::decode(&r.encode()).unwrap(), r);
        assert_eq!(key_records(&r.encode()).len(), 2);
        let a = AdmitBody {
            leader: NodeId(1),
            leader_pk: PublicKey(vec![4; 4]),
            member_id: 2,
            member_key: rec,
        };
        assert_eq!(AdmitBody::decode(&a.encode()).unwrap(), a);
        assert_eq!(decode_nonce(&encode_nonce(5)).unwrap(), 5);
        let q = encode_ring_query(NodeId(1), NodeId(2), 3);
        assert_eq!(decode_ring_query(&q).unwrap(), (NodeId(1), NodeId(2), 3));
        let leg = [NodeId(5), NodeId(2)];
        assert_eq!(
            decode_ring_reply(&encode_ring_reply(NodeId(2), Some(&leg))).unwrap(),
            (NodeId(2), Some(leg.to_vec()))
        );
        assert_eq!(
            decode_ring_reply(&encode_ring_reply(NodeId(2), None)).unwrap(),
            (NodeId(2), None)
        );
    }

    #[test]
    fn blobs_name_their_keys() {
        for m in sample_messages() {
            let blobs = m.blobs();
            match &m {
                Message::Admit { .. } | Message::Session1 { .. } => {
                    assert_eq!(blobs[0].kind, BlobKind::PublicKey)
                }
                Message::GroupData { .. } | Message::MemberSet { .. } => {
                    assert_eq!(blobs[0].kind, BlobKind::Symmetric)
                }
                Message::JoinReq { .. } | Message::Heartbeat { .. } => assert!(blobs.is_empty()),
                _ => {}
            }
        }
    }

    proptest! {
        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Message::decode(&bytes);
        }

        #[test]
        fn decode_encode_is_identity_when_decodable(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            if let Ok(m) = Message::decode(&bytes) {
                prop_assert_eq!(Message::decode(&m.encode()).unwrap(), m);
            }
        }
    }
}
