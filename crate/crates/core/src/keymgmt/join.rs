//! Nine-message join handshake with mutual authentication.
//!
//! ```text
//! A -> L        JOIN_REQ
//! L -> A u M    ZK_PARAMS      {N, V, X_1..X_r}
//! A -> L        ZK_CHALLENGE   {c_1..c_r}
//! L -> A u M    ZK_RESPONSE    {Y_1..Y_r}        A checks Y^2 = X V^c
//! A -> L        CERT           CERT_A            L checks the TTP signature
//! L -> A        ADMIT          e_A(e_L, ID_A, S_LA)
//! A -> L        NONCE          S_LA(num)
//! L -> A        MEMBER_SET     S_LA(num, member_list, group_key)
//! L -> M        REKEY          old_group_key(new_group_key)
//! ```

use std::collections::BTreeMap;

use num_bigint::BigUint;

use super::{verify_certificate, Certificate, Ctx, GroupKey, KeyHierarchy, KeyId, KeyRecord, Membership, Note, Step};
use crate::crypto::zk::{zk_commit, zk_respond, ChallengeSpace, ZkPublicParams, ZkSecret, ZkSession};
use crate::crypto::{PrivateKey, PublicKey};
use crate::ids::{GroupId, NodeId};
use crate::keymgmt::Addr;
use crate::wire::{decode_nonce, encode_nonce, AdmitBody, MemberSetBody, Message, RekeyBody};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum JoinPhase {
    Requested,
    ZkAnnounced,
    Challenged,
    ZkProved,
    CertVerified,
    Admitted,
    Rejected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JoinFailure {
    Capacity,
    OutOfOrder,
    BadCertificate,
    LeaderUnauthenticated,
    UnknownLeaderParams,
    NonceMismatch,
    Undecryptable,
    Rejected,
}

impl JoinFailure {
    pub fn as_str(&self) -> &'static str {
        match self {
            JoinFailure::Capacity => "capacity",
            JoinFailure::OutOfOrder => "out_of_order",
            JoinFailure::BadCertificate => "bad_certificate",
            JoinFailure::LeaderUnauthenticated => "leader_unauthenticated",
            JoinFailure::UnknownLeaderParams => "unknown_leader_params",
            JoinFailure::NonceMismatch => "nonce_mismatch",
            JoinFailure::Undecryptable => "undecryptable",
            JoinFailure::Rejected => "rejected",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JoinConfig {
    /// Challenge-response rounds per handshake.
    pub rounds: usize,
    pub space: ChallengeSpace,
    /// Maximum group size including the leader.
    pub capacity: usize,
    /// Fault injection: admit without checking the certificate.
    pub skip_cert_check: bool,
}

impl Default for JoinConfig {
    fn default() -> Self {
        Self {
            rounds: 1,
            space: ChallengeSpace::default(),
            capacity: usize::MAX,
            skip_cert_check: false,
        }
    }
}

/// What a leader needs to run its side of the handshake.
pub struct LeaderIdentity<'a> {
    pub id: NodeId,
    pub private: &'a PrivateKey,
    pub public: &'a PublicKey,
    pub zk: &'a ZkPublicParams,
    pub zk_secret: &'a ZkSecret,
    pub ttp: &'a PublicKey,
}

/// Leader-side record of one join handshake.
#[derive(Clone, Debug)]
pub struct LeaderJoin {
    pub joiner: NodeId,
    pub session: u64,
    pub phase: JoinPhase,
    commit_secrets: Vec<BigUint>,
    pub cert: Option<Certificate>,
    pub member_id: Option<u64>,
}

fn reject(
    step: &mut Step,
    kh: &KeyHierarchy,
    join: Option<&mut LeaderJoin>,
    joiner: NodeId,
    session: u64,
    reason: JoinFailure,
) {
    if let Some(j) = join {
        j.phase = JoinPhase::Rejected;
    }
    step.note(Note::JoinRejected {
        group: kh.group,
        node: joiner,
        reason,
    });
    step.send(
        Addr::Node(joiner),
        Message::JoinReject {
            group: kh.group,
            session,
            joiner,
            reason: reason.as_str().to_string(),
        },
    );
}

/// One leader-side protocol step. `joins` is keyed by session id.
pub fn leader_handle_join(
    ctx: &mut Ctx<'_>,
    me: &LeaderIdentity<'_>,
    kh: &mut KeyHierarchy,
    joins: &mut BTreeMap<u64, LeaderJoin>,
    cfg: &JoinConfig,
    from: NodeId,
    msg: &Message,
) -> Step {
    let mut step = Step::default();
    let group = kh.group;
    match msg {
        Message::JoinReq {
            group: g,
            joiner,
            session,
        } if *g == group => {
            if *joiner != from || joins.contains_key(session) || kh.is_member(*joiner) {
                step.note(Note::Warning(format!("ignored join request from {from}")));
                return step;
            }
            if kh.member_list().len() >= cfg.capacity {
                reject(&mut step, kh, None, *joiner, *session, JoinFailure::Capacity);
                return step;
            }
            let (xs, rs): (Vec<_>, Vec<_>) = (0..cfg.rounds).map(|_| zk_commit(ctx.rng, &me.zk.n)).unzip();
            joins.insert(
                *session,
                LeaderJoin {
                    joiner: *joiner,
                    session: *session,
                    phase: JoinPhase::ZkAnnounced,
                    commit_secrets: rs,
                    cert: None,
                    member_id: None,
                },
            );
            step.send(
                Addr::GroupAnd(group, *joiner),
                Message::ZkParams {
                    group,
                    session: *session,
                    leader: me.id,
                    params: me.zk.clone(),
                    commitments: xs,
                },
            );
        }
        Message::ZkChallenge {
            group: g,
            session,
            challenges,
        } if *g == group => {
            let Some(j) = joins.get_mut(session).filter(|j| j.joiner == from) else {
                return step;
            };
            if j.phase != JoinPhase::ZkAnnounced || challenges.len() != j.commit_secrets.len() {
                let joiner = j.joiner;
                reject(&mut step, kh, Some(j), joiner, *session, JoinFailure::OutOfOrder);
                return step;
            }
            let responses = j
                .commit_secrets
                .iter()
                .zip(challenges)
                .map(|(r, c)| zk_respond(r, &me.zk_secret.s, *c, &me.zk.n))
                .collect();
            j.phase = JoinPhase::Challenged;
            step.send(
                Addr::GroupAnd(group, j.joiner),
                Message::ZkResponse {
                    group,
                    session: *session,
                    responses,
                },
            );
        }
        Message::Cert {
            group: g,
            session,
            cert,
        } if *g == group => {
            let Some(j) = joins.get_mut(session).filter(|j| j.joiner == from) else {
                return step;
            };
            let joiner = j.joiner;
            if j.phase != JoinPhase::Challenged {
                reject(&mut step, kh, Some(j), joiner, *session, JoinFailure::OutOfOrder);
                return step;
            }
            // The node sends its certificate only after accepting the proof.
            j.phase = JoinPhase::ZkProved;
            let valid = cert.subject == joiner && verify_certificate(ctx.p, me.ttp, cert);
            if !valid && !cfg.skip_cert_check {
                reject(&mut step, kh, Some(j), joiner, *session, JoinFailure::BadCertificate);
                if let Ok(alert) = (Message::MaliciousAlert {
                    group,
                    reporter: me.id,
                    subject: joiner,
                    sig: Default::default(),
                })
                .signed(ctx.p, me.private)
                {
                    step.send(Addr::Leaders, alert);
                }
                step.note(Note::Alert { group, subject: joiner });
                return step;
            }
            let (member_id, member_key) = kh.assign_member_key(joiner, &mut step);
            let body = AdmitBody {
                leader: me.id,
                leader_pk: me.public.clone(),
                member_id,
                member_key: KeyRecord::sym(kh.member_key_id(member_id), &member_key),
            };
            match ctx.p.pk_encrypt(&cert.subject_public_key, &body.encode(), ctx.rng) {
                Ok(sealed) => {
                    j.cert = Some(cert.clone());
                    j.member_id = Some(member_id);
                    j.phase = JoinPhase::CertVerified;
                    step.send(
                        Addr::Node(joiner),
                        Message::Admit {
                            group,
                            session: *session,
                            joiner,
                            sealed,
                        },
                    );
                }
                Err(_) => {
                    kh.discard_pending(joiner);
                    reject(&mut step, kh, Some(j), joiner, *session, JoinFailure::BadCertificate);
                }
            }
        }
        Message::Nonce {
            group: g,
            session,
            wrap,
            sealed,
        } if *g == group => {
            let Some(j) = joins.get_mut(session).filter(|j| j.joiner == from) else {
                return step;
            };
            let joiner = j.joiner;
            if j.phase != JoinPhase::CertVerified {
                reject(&mut step, kh, Some(j), joiner, *session, JoinFailure::OutOfOrder);
                return step;
            }
            let Some((member_id, member_key)) = kh.member_key(joiner).map(|(i, k)| (i, k.clone())) else {
                return step;
            };
            let num = (*wrap == kh.member_key_id(member_id))
                .then(|| ctx.p.sym_decrypt(&member_key, sealed).ok())
                .flatten()
                .and_then(|b| decode_nonce(&b).ok());
            let Some(num) = num else {
                kh.discard_pending(joiner);
                reject(&mut step, kh, Some(j), joiner, *session, JoinFailure::Undecryptable);
                return step;
            };
            if kh.member_list().len() >= cfg.capacity {
                kh.discard_pending(joiner);
                reject(&mut step, kh, Some(j), joiner, *session, JoinFailure::Capacity);
                return step;
            }
            let pk = j
                .cert
                .as_ref()
                .map(|c| c.subject_public_key.clone())
                .unwrap_or_default();
            kh.add_member(joiner, pk);
            j.phase = JoinPhase::Admitted;
            step.note(Note::Admitted {
                group,
                node: joiner,
                member_id,
                session: *session,
            });
            let old = kh.rotate(ctx, &mut step);
            let members = kh.member_list().iter().map(|(n, k)| (*n, k.clone())).collect();
            let body = MemberSetBody {
                num,
                members,
                group_key: kh.group_key_record(),
            };
            step.send(
                Addr::Node(joiner),
                Message::MemberSet {
                    group,
                    session: *session,
                    wrap: kh.member_key_id(member_id),
                    sealed: ctx.p.sym_encrypt(&member_key, &body.encode(), ctx.rng),
                },
            );
            let rekey = RekeyBody {
                group_key: kh.group_key_record(),
                leader: None,
                member_key: None,
                added: Some(joiner),
                removed: None,
            };
            step.send(
                Addr::Group(group),
                Message::Rekey {
                    group,
                    lineage: kh.lineage,
                    epoch: kh.epoch(),
                    wrap: KeyId::Group {
                        group,
                        lineage: kh.lineage,
                        epoch: old.epoch,
                    },
                    sealed: ctx.p.sym_encrypt(&old.key, &rekey.encode(), ctx.rng),
                },
            );
        }
        _ => {}
    }
    step
}

/// What a joining node needs to run its side of the handshake.
pub struct NodeIdentity<'a> {
    pub id: NodeId,
    pub private: &'a PrivateKey,
    pub cert: &'a Certificate,
}

/// Node-side record of one join handshake.
#[derive(Clone, Debug)]
pub struct NodeJoin {
    pub group: GroupId,
    pub leader: NodeId,
    pub session: u64,
    pub phase: JoinPhase,
    /// The leader's `(N, V)` as published in the leader directory.
    expected: ZkPublicParams,
    leader_pk: PublicKey,
    pub zk: Vec<ZkSession>,
    num: Option<u64>,
    admit: Option<AdmitBody>,
}

impl NodeJoin {
    pub fn start(
        ctx: &mut Ctx<'_>,
        me: NodeId,
        group: GroupId,
        leader: NodeId,
        leader_params: ZkPublicParams,
        leader_pk: PublicKey,
        step: &mut Step,
    ) -> Self {
        let session = ctx.rng.next_u64();
        step.send(
            Addr::Node(leader),
            Message::JoinReq {
                group,
                joiner: me,
                session,
            },
        );
        Self {
            group,
            leader,
            session,
            phase: JoinPhase::Requested,
            expected: leader_params,
            leader_pk,
            zk: Vec::new(),
            num: None,
            admit: None,
        }
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, JoinPhase::Admitted | JoinPhase::Rejected)
    }

    fn abort(&mut self, step: &mut Step, me: NodeId, reason: JoinFailure) {
        self.phase = JoinPhase::Rejected;
        step.note(Note::JoinAborted {
            group: self.group,
            node: me,
            reason,
        });
    }
}

/// One node-side protocol step. Returns the new membership once admitted.
pub fn node_handle_join(
    ctx: &mut Ctx<'_>,
    me: &NodeIdentity<'_>,
    join: &mut NodeJoin,
    cfg: &JoinConfig,
    msg: &Message,
) -> (Step, Option<Membership>) {
    let mut step = Step::default();
    if join.is_finished() {
        return (step, None);
    }
    let leader = join.leader;
    match msg {
        Message::ZkParams {
            group,
            session,
            params,
            commitments,
            ..
        } if *group == join.group && *session == join.session => {
            if join.phase != JoinPhase::Requested {
                return (step, None);
            }
            if *params != join.expected {
                join.abort(&mut step, me.id, JoinFailure::UnknownLeaderParams);
                return (step, None);
            }
            if commitments.len() != cfg.rounds {
                join.abort(&mut step, me.id, JoinFailure::OutOfOrder);
                return (step, None);
            }
            let mut challenges = Vec::with_capacity(commitments.len());
            join.zk = commitments
                .iter()
                .map(|x| {
                    let mut s = ZkSession::committed(params.clone(), x.clone());
                    let c = cfg.space.sample(ctx.rng);
                    s.challenge(c).expect("fresh session");
                    challenges.push(c);
                    s
                })
                .collect();
            join.phase = JoinPhase::Challenged;
            step.send(
                Addr::Node(leader),
                Message::ZkChallenge {
                    group: join.group,
                    session: join.session,
                    challenges,
                },
            );
        }
        Message::ZkResponse {
            group,
            session,
            responses,
        } if *group == join.group && *session == join.session => {
            if join.phase != JoinPhase::Challenged {
                return (step, None);
            }
            if responses.len() != join.zk.len() {
                join.abort(&mut step, me.id, JoinFailure::LeaderUnauthenticated);
                return (step, None);
            }
            let mut ok = true;
            for (s, y) in join.zk.iter_mut().zip(responses) {
                s.respond(y.clone()).expect("challenged session");
                ok &= s.verify().expect("responded session");
            }
            if !ok {
                join.abort(&mut step, me.id, JoinFailure::LeaderUnauthenticated);
                return (step, None);
            }
            join.phase = JoinPhase::ZkProved;
            step.send(
                Addr::Node(leader),
                Message::Cert {
                    group: join.group,
                    session: join.session,
                    cert: me.cert.clone(),
                },
            );
        }
        Message::Admit {
            group,
            session,
            joiner,
            sealed,
        } if *group == join.group && *session == join.session && *joiner == me.id => {
            if join.phase != JoinPhase::ZkProved {
                return (step, None);
            }
            let body = ctx
                .p
                .pk_decrypt(me.private, sealed)
                .ok()
                .and_then(|b| AdmitBody::decode(&b).ok());
            let Some(body) = body else {
                join.abort(&mut step, me.id, JoinFailure::Undecryptable);
                return (step, None);
            };
            if body.leader != leader || body.leader_pk != join.leader_pk {
                join.abort(&mut step, me.id, JoinFailure::LeaderUnauthenticated);
                return (step, None);
            }
            let Some(key) = body.member_key.sym_key() else {
                join.abort(&mut step, me.id, JoinFailure::Undecryptable);
                return (step, None);
            };
            let num = ctx.rng.next_u64();
            join.num = Some(num);
            step.send(
                Addr::Node(leader),
                Message::Nonce {
                    group: join.group,
                    session: join.session,
                    wrap: body.member_key.id,
                    sealed: ctx.p.sym_encrypt(&key, &encode_nonce(num), ctx.rng),
                },
            );
            join.admit = Some(body);
            join.phase = JoinPhase::CertVerified;
        }
        Message::MemberSet {
            group,
            session,
            wrap,
            sealed,
        } if *group == join.group && *session == join.session => {
            if join.phase != JoinPhase::CertVerified {
                return (step, None);
            }
            let admit = join.admit.clone().expect("admit stored");
            let key = admit.member_key.sym_key().expect("checked on admit");
            let body = (*wrap == admit.member_key.id)
                .then(|| ctx.p.sym_decrypt(&key, sealed).ok())
                .flatten()
                .and_then(|b| MemberSetBody::decode(&b).ok());
            let Some(body) = body else {
                join.abort(&mut step, me.id, JoinFailure::Undecryptable);
                return (step, None);
            };
            if Some(body.num) != join.num {
                join.abort(&mut step, me.id, JoinFailure::NonceMismatch);
                return (step, None);
            }
            let (KeyId::Group { lineage, epoch, .. }, Some(gk)) = (body.group_key.id, body.group_key.sym_key()) else {
                join.abort(&mut step, me.id, JoinFailure::Undecryptable);
                return (step, None);
            };
            join.phase = JoinPhase::Admitted;
            step.note(Note::JoinComplete {
                group: join.group,
                node: me.id,
                session: join.session,
            });
            return (
                step,
                Some(Membership {
                    group: join.group,
                    leader,
                    lineage,
                    member_id: admit.member_id,
                    member_key: key,
                    group_key: GroupKey { key: gk, epoch },
                    known: body.members.into_iter().collect(),
                }),
            );
        }
        Message::JoinReject {
            group, session, joiner, ..
        } if *group == join.group && *session == join.session && *joiner == me.id => {
            join.abort(&mut step, me.id, JoinFailure::Rejected);
        }
        _ => {}
    }
    (step, None)
}
