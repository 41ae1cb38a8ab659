use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::crypto::dh::DhGroup;
use crate::crypto::zk::{zk_generate, ChallengeSpace, Impostor, ZkPublicParams, ZkSecret};
use crate::crypto::{CryptoProvider, KeyPair, TestDouble};
use crate::group::{NodeAttributes, WeightConfig};

macro_rules! ctx {
    ($w:expr) => {
        Ctx {
            p: &$w.p,
            rng: &mut $w.rng,
            tick: $w.tick,
        }
    };
}

const G: GroupId = GroupId(1);
const L: NodeId = NodeId(100);

fn n(i: u32) -> NodeId {
    NodeId(i)
}

struct Node {
    keys: KeyPair,
    cert: Certificate,
    membership: Option<Membership>,
    join: Option<NodeJoin>,
    sessions: SessionTable,
}

struct World {
    p: TestDouble,
    rng: ChaCha20Rng,
    tick: Tick,
    ttp: Ttp,
    leader_keys: KeyPair,
    zk: ZkPublicParams,
    zk_secret: ZkSecret,
    kh: KeyHierarchy,
    joins: BTreeMap<u64, LeaderJoin>,
    cfg: JoinConfig,
    nodes: BTreeMap<NodeId, Node>,
    notes: Vec<Note>,
}

impl World {
    fn new(seed: u64) -> Self {
        let p = TestDouble;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ttp = Ttp::new(&p, &mut rng);
        let leader_keys = p.generate_keypair(&mut rng);
        let (zk, zk_secret) = zk_generate(&mut rng, 64);
        let mut step = Step::default();
        let kh = {
            let mut ctx = Ctx {
                p: &p,
                rng: &mut rng,
                tick: 0,
            };
            KeyHierarchy::new(&mut ctx, G, 0, L, leader_keys.public.clone(), HashFn::Sha256, &mut step)
        };
        Self {
            p,
            rng,
            tick: 1,
            ttp,
            leader_keys,
            zk,
            zk_secret,
            kh,
            joins: BTreeMap::new(),
            cfg: JoinConfig::default(),
            nodes: BTreeMap::new(),
            notes: step.notes,
        }
    }

    fn add_node(&mut self, id: NodeId) {
        let (keys, cert) = self.ttp.issue(&self.p, &mut self.rng, id).unwrap();
        self.nodes.insert(
            id,
            Node {
                keys,
                cert,
                membership: None,
                join: None,
                sessions: SessionTable::default(),
            },
        );
    }

    fn start_join(&mut self, id: NodeId) -> VecDeque<(NodeId, Out)> {
        let mut step = Step::default();
        let join = {
            let mut ctx = Ctx {
                p: &self.p,
                rng: &mut self.rng,
                tick: self.tick,
            };
            NodeJoin::start(
                &mut ctx,
                id,
                G,
                L,
                self.zk.clone(),
                self.leader_keys.public.clone(),
                &mut step,
            )
        };
        self.nodes.get_mut(&id).unwrap().join = Some(join);
        step.out.into_iter().map(|o| (id, o)).collect()
    }

    fn recipients(&self, to: Addr) -> Vec<NodeId> {
        let members: Vec<NodeId> = self.kh.member_list().keys().copied().collect();
        match to {
            Addr::Node(x) => vec![x],
            Addr::Group(_) | Addr::Leaders => members,
            Addr::GroupAnd(_, x) => members.into_iter().chain([x]).collect(),
        }
    }

    /// Delivers everything queued until quiet, one message per tick.
    fn pump(&mut self, mut queue: VecDeque<(NodeId, Out)>) {
        while let Some((from, out)) = queue.pop_front() {
            self.tick += 1;
            for to in self.recipients(out.to) {
                if to == from {
                    continue;
                }
                let step = self.deliver(from, to, &out.msg);
                self.notes.extend(step.notes.iter().cloned());
                queue.extend(step.out.into_iter().map(|o| (to, o)));
            }
        }
    }

    fn deliver(&mut self, from: NodeId, to: NodeId, msg: &Message) -> Step {
        let mut ctx = Ctx {
            p: &self.p,
            rng: &mut self.rng,
            tick: self.tick,
        };
        if to == L {
            let me = LeaderIdentity {
                id: L,
                private: &self.leader_keys.private,
                public: &self.leader_keys.public,
                zk: &self.zk,
                zk_secret: &self.zk_secret,
                ttp: self.ttp.public_key(),
            };
            let mut step = leader_handle_join(&mut ctx, &me, &mut self.kh, &mut self.joins, &self.cfg, from, msg);
            step.extend(leader_answer_lookup(
                &mut ctx,
                L,
                &self.leader_keys.private,
                &self.kh,
                msg,
            ));
            return step;
        }
        let Some(node) = self.nodes.get_mut(&to) else {
            return Step::default();
        };
        let mut step = Step::default();
        if let Some(join) = node.join.as_mut() {
            let me = NodeIdentity {
                id: to,
                private: &node.keys.private,
                cert: &node.cert,
            };
            let (s, m) = node_handle_join(&mut ctx, &me, join, &self.cfg, msg);
            step.extend(s);
            if let Some(m) = m {
                node.membership = Some(m);
                node.join = None;
            }
        }
        if let (Some(m), Message::Rekey { .. }) = (node.membership.as_mut(), msg) {
            let _ = member_handle_rekey(&self.p, to, &node.keys.private, m, msg);
        }
        let known = node.membership.as_ref().map(|m| m.known.clone()).unwrap_or_default();
        let party = Party {
            id: to,
            private: &node.keys.private,
            group: node.membership.as_ref().map(|m| (m.group, m.leader)),
            known: &known,
            leader_pk: Some(&self.leader_keys.public),
            window: 50,
        };
        step.extend(session_step(&mut ctx, &party, &mut node.sessions, msg));
        step
    }

    fn join(&mut self, id: NodeId) {
        self.add_node(id);
        let q = self.start_join(id);
        self.pump(q);
    }

    fn membership(&self, id: NodeId) -> Option<&Membership> {
        self.nodes[&id].membership.as_ref()
    }
}

fn group_key_epoch(w: &World, id: NodeId) -> Option<u64> {
    w.membership(id).map(|m| m.group_key.epoch)
}

#[test]
fn key_id_text_roundtrip() {
    let ids = [
        KeyId::Private(n(3)),
        KeyId::LeaderSecret { group: G, lineage: 0 },
        KeyId::Group {
            group: G,
            lineage: 0,
            epoch: 3,
        },
        KeyId::Member {
            group: G,
            lineage: 2,
            member: 4,
        },
        KeyId::Ring { round: 2 },
        KeyId::Session {
            initiator: n(1),
            responder: n(2),
            t_a: 40,
        },
    ];
    let text: Vec<String> = ids.iter().map(|k| k.to_string()).collect();
    assert_eq!(
        text,
        [
            "private:n3",
            "nsecret:g1:l0",
            "group:g1:l0:e3",
            "member:g1:l2:m4",
            "ring:r2",
            "session:n1:n2:t40"
        ]
    );
    for (id, s) in ids.iter().zip(&text) {
        assert_eq!(s.parse::<KeyId>().unwrap(), *id);
        assert_eq!(KeyId::decode(&id.encode().finish()).unwrap(), *id);
    }
    assert!("group:g1".parse::<KeyId>().is_err());
}

#[test]
fn member_keys_are_pairwise_distinct() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut nb = [0u8; 32];
    rng.fill_bytes(&mut nb);
    let secret = num_bigint::BigUint::from_bytes_be(&nb);
    let keys: BTreeSet<[u8; 32]> = (1..=64)
        .map(|id| derive_member_key(id, &secret, HashFn::Sha256).bytes)
        .collect();
    assert_eq!(keys.len(), 64);
}

#[test]
fn member_keys_differ_across_leader_secrets() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut seen = BTreeSet::new();
    for _ in 0..1000 {
        let mut nb = [0u8; 32];
        rng.fill_bytes(&mut nb);
        let secret = num_bigint::BigUint::from_bytes_be(&nb);
        assert!(seen.insert(derive_member_key(1, &secret, HashFn::Sha256).bytes));
    }
}

#[test]
fn member_key_matches_hash_oracle() {
    use sha2::{Digest as _, Sha256, Sha512};
    let secret = num_bigint::BigUint::from(0x0102_0304u32);
    // MemberId tag, len 8, value 5; Secret tag, len 4, value.
    let mut input = vec![Tag::MemberId as u8, 0, 0, 0, 8, 0, 0, 0, 0, 0, 0, 0, 5];
    input.extend([Tag::Secret as u8, 0, 0, 0, 4, 1, 2, 3, 4]);
    let k = derive_member_key(5, &secret, HashFn::Sha256);
    assert_eq!(k.bytes[..], Sha256::digest(&input)[..]);
    let k = derive_member_key(5, &secret, HashFn::Sha512);
    assert_eq!(k.bytes[..], Sha512::digest(&input)[..32]);
}

#[test]
fn honest_join_admits_and_distributes_keys() {
    let mut w = World::new(1);
    w.join(n(1));
    let m = w.membership(n(1)).expect("admitted");
    assert_eq!(m.leader, L);
    assert_eq!(m.group_key.epoch, 2);
    assert_eq!(&m.group_key.key, w.kh.group_key());
    let (id, key) = w.kh.member_key(n(1)).unwrap();
    assert_eq!(m.member_id, id);
    assert_eq!(&m.member_key, key);
    assert_eq!(m.known.get(&L), Some(&w.leader_keys.public));
    assert!(w.kh.invariants_hold());
    assert!(w
        .notes
        .iter()
        .any(|x| matches!(x, Note::Admitted { node, .. } if *node == n(1))));

    // The existing member follows the next join's rekey.
    w.join(n(2));
    assert_eq!(group_key_epoch(&w, n(1)), Some(3));
    assert_eq!(group_key_epoch(&w, n(2)), Some(3));
    assert_eq!(
        w.membership(n(1)).unwrap().group_key,
        w.membership(n(2)).unwrap().group_key
    );
    assert!(w.kh.invariants_hold());
}

#[test]
fn forged_certificate_is_rejected_and_alerted() {
    let mut w = World::new(2);
    w.add_node(n(5));
    let other_ttp = Ttp::new(&w.p, &mut w.rng);
    let pk = w.nodes[&n(5)].keys.public.clone();
    w.nodes.get_mut(&n(5)).unwrap().cert = other_ttp.certify(&w.p, n(5), &pk).unwrap();
    let q = w.start_join(n(5));
    w.pump(q);
    assert!(w.membership(n(5)).is_none());
    assert!(!w.kh.is_member(n(5)));
    assert!(w.notes.iter().any(|x| matches!(
        x,
        Note::JoinRejected {
            reason: JoinFailure::BadCertificate,
            ..
        }
    )));
    assert!(w
        .notes
        .iter()
        .any(|x| matches!(x, Note::Alert { subject, .. } if *subject == n(5))));
    assert!(w.kh.invariants_hold());
}

#[test]
fn forged_certificate_admitted_when_check_skipped() {
    let mut w = World::new(3);
    w.cfg.skip_cert_check = true;
    w.add_node(n(5));
    let other_ttp = Ttp::new(&w.p, &mut w.rng);
    let pk = w.nodes[&n(5)].keys.public.clone();
    w.nodes.get_mut(&n(5)).unwrap().cert = other_ttp.certify(&w.p, n(5), &pk).unwrap();
    let q = w.start_join(n(5));
    w.pump(q);
    assert!(w.kh.is_member(n(5)));
}

#[test]
fn capacity_rejects_extra_joiner() {
    let mut w = World::new(4);
    w.cfg.capacity = 2;
    w.join(n(1));
    w.join(n(2));
    assert!(w.membership(n(1)).is_some());
    assert!(w.membership(n(2)).is_none());
    assert!(w.notes.iter().any(|x| matches!(
        x,
        Note::JoinRejected {
            reason: JoinFailure::Capacity,
            ..
        }
    )));
    assert!(w.notes.iter().any(|x| matches!(
        x,
        Note::JoinAborted {
            reason: JoinFailure::Rejected,
            ..
        }
    )));
}

/// Runs the node side against a leader that knows `(N, V)` but not `S`.
fn impostor_attempt(seed: u64, space: ChallengeSpace) -> bool {
    let mut w = World::new(seed);
    w.cfg.space = space;
    w.add_node(n(9));
    let mut step = Step::default();
    let mut join = {
        let mut ctx = ctx!(w);
        NodeJoin::start(
            &mut ctx,
            n(9),
            G,
            L,
            w.zk.clone(),
            w.leader_keys.public.clone(),
            &mut step,
        )
    };
    let imp = Impostor::commit(&mut w.rng, &w.zk, space);
    let node = &w.nodes[&n(9)];
    let me = NodeIdentity {
        id: n(9),
        private: &node.keys.private,
        cert: &node.cert,
    };
    let mut ctx = Ctx {
        p: &w.p,
        rng: &mut w.rng,
        tick: 2,
    };
    let params = Message::ZkParams {
        group: G,
        session: join.session,
        leader: L,
        params: w.zk.clone(),
        commitments: vec![imp.x.clone()],
    };
    let (s, _) = node_handle_join(&mut ctx, &me, &mut join, &w.cfg, &params);
    let Some(Message::ZkChallenge { challenges, .. }) = s.out.first().map(|o| o.msg.clone()) else {
        panic!("no challenge");
    };
    let resp = Message::ZkResponse {
        group: G,
        session: join.session,
        responses: vec![imp.respond(challenges[0])],
    };
    let (s, _) = node_handle_join(&mut ctx, &me, &mut join, &w.cfg, &resp);
    let aborted = s.notes.iter().any(|x| {
        matches!(
            x,
            Note::JoinAborted {
                reason: JoinFailure::LeaderUnauthenticated,
                ..
            }
        )
    });
    assert_eq!(aborted, join.phase == JoinPhase::Rejected);
    !aborted
}

#[test]
fn impostor_leader_is_caught_with_full_challenge_space() {
    let passed = (0..20)
        .filter(|s| impostor_attempt(*s, ChallengeSpace::default()))
        .count();
    assert_eq!(passed, 0);
}

#[test]
fn impostor_passes_a_one_bit_space_about_half_the_time() {
    let space = ChallengeSpace::new(1).unwrap();
    let passed = (0..200).filter(|s| impostor_attempt(100 + *s, space)).count();
    assert!((60..=140).contains(&passed), "passed {passed}");
}

#[test]
fn wrong_leader_params_abort_before_challenge() {
    let mut w = World::new(5);
    w.add_node(n(9));
    let mut step = Step::default();
    let (fake, _) = zk_generate(&mut w.rng, 64);
    let mut join = {
        let mut ctx = ctx!(w);
        NodeJoin::start(&mut ctx, n(9), G, L, fake, w.leader_keys.public.clone(), &mut step)
    };
    let node = &w.nodes[&n(9)];
    let me = NodeIdentity {
        id: n(9),
        private: &node.keys.private,
        cert: &node.cert,
    };
    let mut ctx = Ctx {
        p: &w.p,
        rng: &mut w.rng,
        tick: 2,
    };
    let msg = Message::ZkParams {
        group: G,
        session: join.session,
        leader: L,
        params: w.zk.clone(),
        commitments: vec![num_bigint::BigUint::from(4u32)],
    };
    let (s, _) = node_handle_join(&mut ctx, &me, &mut join, &w.cfg, &msg);
    assert!(s.out.is_empty());
    assert_eq!(join.phase, JoinPhase::Rejected);
}

#[test]
fn old_epoch_key_cannot_open_new_traffic() {
    let mut w = World::new(6);
    let old = w.kh.group_key().clone();
    let mut step = Step::default();
    let mut ctx = ctx!(w);
    let prev = w.kh.rotate(&mut ctx, &mut step);
    assert_eq!(prev.key, old);
    assert_eq!(w.kh.epoch(), prev.epoch + 1);
    let ct = w.p.sym_encrypt(w.kh.group_key(), b"hello", &mut w.rng);
    assert!(w.p.sym_decrypt(&old, &ct).is_err());
    assert_eq!(w.p.sym_decrypt(w.kh.group_key(), &ct).unwrap(), b"hello");
}

#[test]
fn stale_rekey_is_refused() {
    let mut w = World::new(7);
    w.join(n(1));
    let mut m = w.membership(n(1)).unwrap().clone();
    let stale = Message::Rekey {
        group: G,
        lineage: 0,
        epoch: m.group_key.epoch,
        wrap: KeyId::Private(n(1)),
        sealed: w
            .p
            .pk_encrypt(
                &w.nodes[&n(1)].keys.public,
                &crate::wire::RekeyBody {
                    group_key: KeyRecord::sym(m.group_key_id(), &m.group_key.key),
                    leader: None,
                    member_key: None,
                    added: None,
                    removed: None,
                }
                .encode(),
                &mut w.rng,
            )
            .unwrap(),
    };
    let err = member_handle_rekey(&w.p, n(1), &w.nodes[&n(1)].keys.private, &mut m, &stale);
    assert_eq!(err.unwrap_err(), KeyError::StaleEpoch);
}

fn session_world(seed: u64) -> World {
    let mut w = World::new(seed);
    w.join(n(1));
    w.join(n(2));
    w
}

fn initiate(w: &mut World, a: NodeId, b: NodeId) -> VecDeque<(NodeId, Out)> {
    let b_pk = w.nodes[&b].keys.public.clone();
    let node = w.nodes.get_mut(&a).unwrap();
    let known = node.membership.as_ref().map(|m| m.known.clone()).unwrap_or_default();
    let party = Party {
        id: a,
        private: &node.keys.private,
        group: node.membership.as_ref().map(|m| (m.group, m.leader)),
        known: &known,
        leader_pk: None,
        window: 50,
    };
    let mut ctx = Ctx {
        p: &w.p,
        rng: &mut w.rng,
        tick: w.tick,
    };
    let step = initiate_session(&mut ctx, &party, &mut node.sessions, b, &b_pk);
    step.out.into_iter().map(|o| (a, o)).collect()
}

#[test]
fn honest_session_confirms_same_key() {
    let mut w = session_world(10);
    let q = initiate(&mut w, n(1), n(2));
    w.pump(q);
    let ka = w.nodes[&n(1)].sessions.confirmed_key(n(2)).map(|(i, k)| (i, k.clone()));
    let kb = w.nodes[&n(2)].sessions.confirmed_key(n(1)).map(|(i, k)| (i, k.clone()));
    assert!(ka.is_some());
    assert_eq!(ka, kb);
    let s = w.nodes[&n(1)].sessions.get(n(2)).unwrap();
    assert_eq!(s.num1, w.nodes[&n(2)].sessions.get(n(1)).unwrap().num1);
}

#[test]
fn stale_timestamp_aborts() {
    let mut w = session_world(11);
    let q = initiate(&mut w, n(1), n(2));
    w.tick += 51;
    w.pump(q);
    assert!(w.nodes[&n(2)].sessions.confirmed_key(n(1)).is_none());
    assert!(w.notes.iter().any(|x| matches!(
        x,
        Note::SessionAborted {
            reason: SessionFailure::StaleTimestamp,
            ..
        }
    )));
}

#[test]
fn altered_message_one_aborts() {
    let mut w = session_world(12);
    let mut q = initiate(&mut w, n(1), n(2));
    if let Message::Session1 { sealed, .. } = &mut q[0].1.msg {
        let last = sealed.len() - 1;
        sealed[last] ^= 1;
    }
    w.pump(q);
    assert!(w.nodes[&n(2)].sessions.confirmed_key(n(1)).is_none());
    assert!(w.notes.iter().any(|x| matches!(
        x,
        Note::SessionAborted {
            reason: SessionFailure::Undecryptable,
            ..
        }
    )));
}

#[test]
fn unknown_member_is_looked_up_at_the_leader() {
    let mut w = session_world(13);
    w.nodes
        .get_mut(&n(2))
        .unwrap()
        .membership
        .as_mut()
        .unwrap()
        .known
        .remove(&n(1));
    let q = initiate(&mut w, n(1), n(2));
    w.pump(q);
    assert!(w.nodes[&n(2)].sessions.confirmed_key(n(1)).is_some());
}

#[test]
fn non_member_triggers_group_alert() {
    let mut w = session_world(14);
    w.add_node(n(66));
    let q = initiate(&mut w, n(66), n(2));
    w.pump(q);
    assert!(w.nodes[&n(2)]
        .sessions
        .get(n(66))
        .is_none_or(|s| s.phase == SessionPhase::Aborted));
    assert!(w
        .notes
        .iter()
        .any(|x| matches!(x, Note::Alert { subject, .. } if *subject == n(66))));
    assert!(w.nodes[&n(1)].sessions.malicious.contains(&n(66)));
    assert!(w.nodes[&n(2)].sessions.malicious.contains(&n(66)));
}

#[test]
fn replayed_message_three_is_refused() {
    let mut w = session_world(15);
    let q = initiate(&mut w, n(1), n(2));
    w.pump(q);
    let first = w.nodes[&n(2)].sessions.get(n(1)).unwrap().clone();
    // Capture the third message of a second run and replay it after a third.
    let mut q = initiate(&mut w, n(1), n(2));
    let mut captured = None;
    while let Some((from, out)) = q.pop_front() {
        w.tick += 1;
        if matches!(out.msg, Message::Session3 { .. }) {
            captured = Some(out.msg.clone());
        }
        let Addr::Node(to) = out.to else { continue };
        let step = w.deliver(from, to, &out.msg);
        w.notes.extend(step.notes.iter().cloned());
        q.extend(step.out.into_iter().map(|o| (to, o)));
    }
    let replay = captured.unwrap();
    let q = initiate(&mut w, n(1), n(2));
    // Deliver only message 1 so n2 waits for a fresh message 3.
    let (from, out) = q[0].clone();
    w.tick += 1;
    let _ = w.deliver(from, n(2), &out.msg);
    let step = w.deliver(n(1), n(2), &replay);
    assert!(step.out.is_empty());
    assert!(step.notes.iter().any(|x| matches!(
        x,
        Note::SessionAborted {
            reason: SessionFailure::TimestampMismatch,
            ..
        }
    )));
    assert_ne!(first.t_a, w.nodes[&n(2)].sessions.get(n(1)).unwrap().t_a);
}

#[test]
fn corrupted_echo_aborts_initiator() {
    let mut w = session_world(16);
    let mut q = initiate(&mut w, n(1), n(2));
    let mut aborted = false;
    while let Some((from, out)) = q.pop_front() {
        w.tick += 1;
        let Addr::Node(to) = out.to else { continue };
        let msg = match out.msg {
            Message::Session4 {
                from: f, to: t, wrap, ..
            } => {
                let key = w.nodes[&n(2)].sessions.get(n(1)).unwrap().key.clone().unwrap();
                let body = Encoder::new().u64(Tag::Nonce, 1).u64(Tag::Nonce, 2).finish();
                Message::Session4 {
                    from: f,
                    to: t,
                    wrap,
                    sealed: w.p.sym_encrypt(&key, &body, &mut w.rng),
                }
            }
            m => m,
        };
        let step = w.deliver(from, to, &msg);
        aborted |= step.notes.iter().any(|x| {
            matches!(
                x,
                Note::SessionAborted {
                    reason: SessionFailure::EchoMismatch,
                    ..
                }
            )
        });
        q.extend(step.out.into_iter().map(|o| (to, o)));
    }
    assert!(aborted);
    assert!(w.nodes[&n(1)].sessions.confirmed_key(n(2)).is_none());
}

fn removal_world(seed: u64) -> World {
    let mut w = World::new(seed);
    for i in 1..=4 {
        w.join(n(i));
    }
    w
}

fn remove(w: &mut World, node: NodeId, reason: RemovalReason, cfg: RekeyConfig) -> Step {
    let mut ctx = Ctx {
        p: &w.p,
        rng: &mut w.rng,
        tick: w.tick,
    };
    let step = remove_member(&mut ctx, &w.leader_keys.private, &mut w.kh, node, reason, &cfg);
    w.pump(step.out.iter().map(|o| (L, o.clone())).collect());
    step
}

#[test]
fn removal_rekeys_remaining_members_only() {
    for via_member_keys in [false, true] {
        let mut w = removal_world(20);
        let before = w.kh.epoch();
        let step = remove(
            &mut w,
            n(3),
            RemovalReason::AnnouncedLeave,
            RekeyConfig {
                via_member_keys,
                ..Default::default()
            },
        );
        assert_eq!(w.kh.epoch(), before + 1);
        assert!(!w.kh.is_member(n(3)));
        assert!(w.kh.invariants_hold());
        for i in [1, 2, 4] {
            assert_eq!(group_key_epoch(&w, n(i)), Some(before + 1));
        }
        assert_eq!(group_key_epoch(&w, n(3)), Some(before));
        assert!(step.out.iter().all(|o| o.to != Addr::Node(n(3))));
        let ct = w.p.sym_encrypt(w.kh.group_key(), b"after", &mut w.rng);
        let old = &w.membership(n(3)).unwrap().group_key.key;
        assert!(w.p.sym_decrypt(old, &ct).is_err());
    }
}

#[test]
fn leak_and_skip_faults_change_the_removed_nodes_view() {
    let mut w = removal_world(21);
    remove(
        &mut w,
        n(3),
        RemovalReason::AnnouncedLeave,
        RekeyConfig {
            leak_to_removed: true,
            ..Default::default()
        },
    );
    assert_eq!(group_key_epoch(&w, n(3)), Some(w.kh.epoch()));

    let mut w = removal_world(22);
    let before = w.kh.epoch();
    remove(
        &mut w,
        n(3),
        RemovalReason::AnnouncedLeave,
        RekeyConfig {
            skip_rekey: true,
            ..Default::default()
        },
    );
    assert_eq!(w.kh.epoch(), before);
    assert!(!w.kh.is_member(n(3)));
}

#[test]
fn misbehavior_removal_alerts_leaders_and_group() {
    let mut w = removal_world(23);
    let step = remove(&mut w, n(2), RemovalReason::Misbehavior, RekeyConfig::default());
    let alerts: Vec<Addr> = step
        .out
        .iter()
        .filter(|o| matches!(o.msg, Message::MaliciousAlert { subject, .. } if subject == n(2)))
        .map(|o| o.to)
        .collect();
    assert_eq!(alerts, [Addr::Leaders, Addr::Group(G)]);
    assert!(step
        .out
        .iter()
        .all(|o| !o.msg.verify_signature(&w.p, &w.nodes[&n(1)].keys.public)
            || !matches!(o.msg, Message::MaliciousAlert { .. })));
    assert!(step
        .out
        .iter()
        .filter(|o| matches!(o.msg, Message::MaliciousAlert { .. }))
        .all(|o| o.msg.verify_signature(&w.p, &w.leader_keys.public)));
}

#[test]
fn removing_a_non_member_is_a_no_op() {
    let mut w = removal_world(24);
    let before = w.kh.epoch();
    let step = remove(&mut w, n(77), RemovalReason::SilentTimeout, RekeyConfig::default());
    assert!(step.out.is_empty());
    assert_eq!(w.kh.epoch(), before);
}

#[test]
fn departure_elects_highest_weight_or_dissolves() {
    let weights = WeightConfig::new(0.5, 0.3, 0.2).unwrap();
    let attrs = [
        NodeAttributes::new(n(1), 0.9, 0.2, 0.5).unwrap(),
        NodeAttributes::new(n(2), 0.1, 0.9, 0.9).unwrap(),
    ];
    assert_eq!(leader_departure(&attrs, &weights), Departure::Elected(n(2)));
    assert_eq!(leader_departure(&[], &weights), Departure::Dissolved);
}

#[test]
fn succession_moves_members_to_a_new_lineage() {
    let mut w = removal_world(25);
    let new_leader = n(2);
    let new_keys = w.nodes[&new_leader].keys.clone();
    let mut members = w.kh.member_list().clone();
    members.remove(&L);
    let (kh, step) = {
        let mut ctx = ctx!(w);
        succeed(
            &mut ctx,
            G,
            1,
            new_leader,
            new_keys.public.clone(),
            &members,
            HashFn::Sha512,
        )
    };
    assert_eq!((kh.lineage, kh.epoch()), (1, 1));
    assert_ne!(kh.leader_secret_n(), w.kh.leader_secret_n());
    assert!(kh.invariants_hold());
    for o in &step.out {
        let Addr::Node(to) = o.to else { panic!() };
        let node = w.nodes.get_mut(&to).unwrap();
        let m = node.membership.as_mut().unwrap();
        member_handle_rekey(&w.p, to, &node.keys.private, m, &o.msg).unwrap();
        assert_eq!((m.leader, m.lineage, m.group_key.epoch), (new_leader, 1, 1));
        assert_eq!(Some((m.member_id, &m.member_key)), kh.member_key(to));
    }
    assert_eq!(step.out.len(), 3);
}

#[test]
fn liveness_flags_only_silent_nodes() {
    let mut l = Liveness::default();
    l.heartbeat(n(1), 10);
    l.heartbeat(n(2), 40);
    l.heartbeat(n(2), 35);
    assert_eq!(l.last_seen(n(2)), Some(40));
    assert_eq!(check_liveness(&l, 40, 30), Vec::<NodeId>::new());
    assert_eq!(check_liveness(&l, 41, 30), vec![n(1)]);
    l.forget(n(1));
    assert!(check_liveness(&l, 100, 30).contains(&n(2)));
}

fn run_ring(leaders: &[NodeId], seed: u64) -> BTreeMap<NodeId, Option<SymmetricKey>> {
    let p = TestDouble;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dh = DhGroup::modp_1536();
    let mut states: BTreeMap<NodeId, Option<RingState>> = leaders.iter().map(|l| (*l, None)).collect();
    let mut queue = VecDeque::new();
    for l in leaders {
        let mut ctx = Ctx {
            p: &p,
            rng: &mut rng,
            tick: 0,
        };
        let (s, step) = ring_start(&mut ctx, &dh, *l, 1, leaders.to_vec());
        states.insert(*l, Some(s));
        queue.extend(step.out.into_iter().map(|o| (*l, o)));
    }
    while let Some((from, out)) = queue.pop_front() {
        let to: Vec<NodeId> = match out.to {
            Addr::Node(x) => vec![x],
            _ => leaders.iter().copied().filter(|l| *l != from).collect(),
        };
        for t in to {
            let mut ctx = Ctx {
                p: &p,
                rng: &mut rng,
                tick: 0,
            };
            let step = ring_handle(&mut ctx, &dh, t, states.get_mut(&t).unwrap(), &out.msg);
            queue.extend(step.out.into_iter().map(|o| (t, o)));
        }
    }
    states.into_iter().map(|(l, s)| (l, s.and_then(|s| s.key))).collect()
}

#[test]
fn ring_agreement_gives_every_leader_the_same_key() {
    for k in 1..=5u32 {
        let leaders: Vec<NodeId> = (1..=k).map(|i| n(i * 10)).collect();
        let keys = run_ring(&leaders, k as u64);
        let first = keys[&leaders[0]].clone().expect("keyed");
        assert!(keys.values().all(|x| x.as_ref() == Some(&first)), "k={k}");
    }
}

#[test]
fn ring_agreement_matches_direct_computation() {
    let dh = DhGroup::modp_1536();
    let leaders = [n(1), n(2), n(3)];
    let keys = run_ring(&leaders, 99);
    // Replay the same secrets: each start draws exactly one secret in order.
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let secrets: Vec<_> = (0..3).map(|_| dh.random_secret(&mut rng)).collect();
    let expected = crate::crypto::dh::ring_key(&crate::crypto::dh::ring_values(&dh, &secrets).unwrap()[0]);
    assert_eq!(keys[&n(1)].as_ref(), Some(&expected));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn epochs_strictly_increase(ops in proptest::collection::vec(0u8..3, 1..12), seed in any::<u64>()) {
        let mut w = World::new(seed);
        let mut next = 1u32;
        let mut last = w.kh.epoch();
        for op in ops {
            match op {
                0 => { w.join(n(next)); next += 1; }
                1 => {
                    let victim = w.kh.member_list().keys().copied().find(|x| *x != L);
                    if let Some(v) = victim {
                        remove(&mut w, v, RemovalReason::AnnouncedLeave, RekeyConfig::default());
                    }
                }
                _ => { let mut ctx = ctx!(w); let mut s = Step::default(); w.kh.rotate(&mut ctx, &mut s); }
            }
            prop_assert!(w.kh.epoch() >= last);
            last = w.kh.epoch();
            prop_assert!(w.kh.invariants_hold());
            for m in w.kh.member_list().keys().filter(|x| **x != L) {
                prop_assert!(group_key_epoch(&w, *m).unwrap() <= w.kh.epoch());
            }
        }
    }

    #[test]
    fn key_id_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = KeyId::decode(&bytes);
        let _ = KeyRecord::decode(&bytes);
        let _ = Certificate::decode(&bytes);
    }
}
