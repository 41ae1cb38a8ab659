//! Revocation, leader succession and liveness tracking.

use std::collections::BTreeMap;

use super::{Addr, Ctx, KeyHierarchy, KeyId, KeyRecord, Note, Step};
use crate::crypto::{HashFn, PrivateKey, PublicKey, Signature};
use crate::group::{elect_leader, NodeAttributes, WeightConfig};
use crate::ids::{GroupId, NodeId, Tick};
use crate::wire::{Message, RekeyBody};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RemovalReason {
    AnnouncedLeave,
    SilentTimeout,
    Misbehavior,
    /// The removed node was the leader of the previous lineage.
    LeaderDeparture,
}

impl RemovalReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RemovalReason::AnnouncedLeave => "announced_leave",
            RemovalReason::SilentTimeout => "silent_timeout",
            RemovalReason::Misbehavior => "misbehavior",
            RemovalReason::LeaderDeparture => "leader_departure",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RekeyConfig {
    /// Wrap leave rekeys with each member's `S_LX` instead of its public key.
    pub via_member_keys: bool,
    /// Fault injection: also hand the new key to the removed node.
    pub leak_to_removed: bool,
    /// Fault injection: remove without rotating the group key.
    pub skip_rekey: bool,
}

fn seal_for(
    ctx: &mut Ctx<'_>,
    kh: &KeyHierarchy,
    member: NodeId,
    pk: &PublicKey,
    body: &[u8],
    via_member_key: bool,
) -> Option<(KeyId, Vec<u8>)> {
    if via_member_key {
        let (id, key) = kh.member_key(member)?;
        Some((kh.member_key_id(id), ctx.p.sym_encrypt(key, body, ctx.rng)))
    } else {
        let sealed = ctx.p.pk_encrypt(pk, body, ctx.rng).ok()?;
        Some((KeyId::Private(member), sealed))
    }
}

/// Removes `node`, rotates the group key and sends it to every remaining
/// member. Misbehavior removals also alert the other leaders.
pub fn remove_member(
    ctx: &mut Ctx<'_>,
    leader_private: &PrivateKey,
    kh: &mut KeyHierarchy,
    node: NodeId,
    reason: RemovalReason,
    cfg: &RekeyConfig,
) -> Step {
    let mut step = Step::default();
    let group = kh.group;
    let removed_pk = kh.member_list().get(&node).cloned();
    if node == kh.leader || !kh.drop_member(node) {
        step.note(Note::Warning(format!("remove of non-member {node} ignored")));
        return step;
    }
    step.note(Note::Removed { group, node, reason });
    if reason == RemovalReason::Misbehavior {
        step.note(Note::Alert { group, subject: node });
        if let Ok(alert) = (Message::MaliciousAlert {
            group,
            reporter: kh.leader,
            subject: node,
            sig: Signature::default(),
        })
        .signed(ctx.p, leader_private)
        {
            step.send(Addr::Leaders, alert.clone());
            step.send(Addr::Group(group), alert);
        }
    }
    if cfg.skip_rekey {
        return step;
    }
    kh.rotate(ctx, &mut step);
    let body = RekeyBody {
        group_key: kh.group_key_record(),
        leader: None,
        member_key: None,
        added: None,
        removed: Some(node),
    }
    .encode();
    let recipients: Vec<(NodeId, PublicKey)> = kh
        .member_list()
        .iter()
        .filter(|(n, _)| **n != kh.leader)
        .map(|(n, pk)| (*n, pk.clone()))
        .collect();
    for (m, pk) in recipients {
        if let Some((wrap, sealed)) = seal_for(ctx, kh, m, &pk, &body, cfg.via_member_keys) {
            step.send(
                Addr::Node(m),
                Message::Rekey {
                    group,
                    lineage: kh.lineage,
                    epoch: kh.epoch(),
                    wrap,
                    sealed,
                },
            );
        }
    }
    if cfg.leak_to_removed {
        if let Some(pk) = removed_pk {
            if let Ok(sealed) = ctx.p.pk_encrypt(&pk, &body, ctx.rng) {
                step.send(
                    Addr::Node(node),
                    Message::Rekey {
                        group,
                        lineage: kh.lineage,
                        epoch: kh.epoch(),
                        wrap: KeyId::Private(node),
                        sealed,
                    },
                );
            }
        }
    }
    step
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Departure {
    Dissolved,
    Elected(NodeId),
}

/// Chooses the successor among the remaining members.
pub fn leader_departure(remaining: &[NodeAttributes], weights: &WeightConfig) -> Departure {
    match elect_leader(remaining, weights) {
        Ok(n) => Departure::Elected(n),
        Err(_) => Departure::Dissolved,
    }
}

/// Builds the new leader's hierarchy under a fresh lineage: new `N`, new
/// group key at epoch 1, a new `S_LX` per member, each delivered under the
/// member's public key together with the group key.
#[allow(clippy::too_many_arguments)]
pub fn succeed(
    ctx: &mut Ctx<'_>,
    group: GroupId,
    lineage: u32,
    leader: NodeId,
    leader_pk: PublicKey,
    members: &BTreeMap<NodeId, PublicKey>,
    hash_f: HashFn,
) -> (KeyHierarchy, Step) {
    let mut step = Step::default();
    let mut kh = KeyHierarchy::new(ctx, group, lineage, leader, leader_pk, hash_f, &mut step);
    for (m, pk) in members.iter().filter(|(m, _)| **m != leader) {
        let (id, key) = kh.assign_member_key(*m, &mut step);
        kh.add_member(*m, pk.clone());
        let body = RekeyBody {
            group_key: kh.group_key_record(),
            leader: Some(leader),
            member_key: Some(KeyRecord::sym(kh.member_key_id(id), &key)),
            added: None,
            removed: None,
        };
        if let Ok(sealed) = ctx.p.pk_encrypt(pk, &body.encode(), ctx.rng) {
            step.send(
                Addr::Node(*m),
                Message::Rekey {
                    group,
                    lineage,
                    epoch: kh.epoch(),
                    wrap: KeyId::Private(*m),
                    sealed,
                },
            );
        }
    }
    (kh, step)
}

/// Last heartbeat tick per member.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Liveness {
    last_seen: BTreeMap<NodeId, Tick>,
}

impl Liveness {
    pub fn heartbeat(&mut self, node: NodeId, tick: Tick) {
        let e = self.last_seen.entry(node).or_insert(tick);
        *e = (*e).max(tick);
    }

    pub fn forget(&mut self, node: NodeId) {
        self.last_seen.remove(&node);
    }

    pub fn last_seen(&self, node: NodeId) -> Option<Tick> {
        self.last_seen.get(&node).copied()
    }
}

/// Nodes silent for more than `deadline` ticks.
pub fn check_liveness(liveness: &Liveness, now: Tick, deadline: Tick) -> Vec<NodeId> {
    liveness
        .last_seen
        .iter()
        .filter(|(_, t)| now.saturating_sub(**t) > deadline)
        .map(|(n, _)| *n)
        .collect()
}
