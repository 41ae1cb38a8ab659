//! Tick-driven network simulation.
//!
//! Every transmission takes one tick. Within a tick the engine first
//! delivers everything queued for it (in send order), then runs the script
//! actions for that tick, then the periodic work: heartbeats, liveness
//! checks, the forwarding watchdog and scheduled replays.
//!
//! Delivery classes:
//!
//! * RREQ is a radio broadcast reaching every live node within `radius`.
//! * RREP and DATA are radio unicasts; a recipient out of range misses them.
//! * Everything else is a control unicast reaching anyone within
//!   `control_range`.
//!
//! Node-placed adversaries overhear every transmission made within their
//! radio range. Link-placed adversaries sit on one link and see, and
//! depending on behavior replace, whatever crosses it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::adversary::mutate_message;
use super::log::{EventKind, EventLog, PayloadDigest};
use super::scenario::{Behavior, Fault, Placement, Scenario, ScenarioError};
use super::Action;
use crate::crypto::dh::DhGroup;
use crate::crypto::zk::{zk_generate, ChallengeSpace, Impostor, ZkPublicParams, ZkSecret};
use crate::crypto::{CryptoError, CryptoProvider, KeyPair, PublicKey, Signature, SymmetricKey};
use crate::group::{elect_leader, mobility, update_trust, NodeAttributes, Observation, PositionTrace, TrustRule};
use crate::ids::{GroupId, NodeId, Tick};
use crate::keymgmt::{
    initiate_session, leader_answer_lookup, leader_departure, leader_handle_join, member_handle_rekey,
    node_handle_join, remove_member, ring_handle, ring_start, session_step, succeed, Addr, Certificate, Ctx, Departure,
    JoinConfig, KeyHierarchy, KeyId, LeaderIdentity, LeaderJoin, Liveness, Membership, NodeIdentity, NodeJoin, Note,
    Out, Party, RekeyConfig, RemovalReason, RingState, SessionTable, Step, Ttp,
};
use crate::routing::{
    compose_routes, destination_verify, forward_rrep, forward_rreq, make_rrep, make_rreq, source_verify, ComposedRoute,
    Rejection, RouteReply, RouteRequest, RouterConfig, RoutingTable, SeqCache,
};
use crate::wire::{decode_ring_query, decode_ring_reply, encode_ring_query, encode_ring_reply, Message};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Invalid(#[from] ScenarioError),
    #[error("key setup failed: {0}")]
    Crypto(#[from] CryptoError),
}

/// Runs `scenario` to completion and returns its event log.
pub fn run(scenario: &Scenario) -> Result<EventLog, SimError> {
    scenario.validate()?;
    let mut engine = Engine::new(scenario)?;
    engine.execute();
    Ok(engine.log)
}

static NO_KEYS: BTreeMap<NodeId, PublicKey> = BTreeMap::new();

macro_rules! ctx {
    ($s:ident) => {
        Ctx {
            p: &*$s.p,
            rng: &mut $s.rng,
            tick: $s.tick,
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Channel {
    Broadcast,
    Radio,
    Control,
    /// Adversary injection onto its own link; no range check.
    Direct,
}

#[derive(Clone)]
struct Transit {
    /// Physical transmitter.
    from: NodeId,
    /// Claimed sender.
    origin: NodeId,
    to: NodeId,
    /// The addressee when `to` is intercepting or overhearing.
    intended: Option<NodeId>,
    bytes: Rc<Vec<u8>>,
    digest: PayloadDigest,
    drop: Option<&'static str>,
    overheard: bool,
}

#[derive(Clone, Debug)]
struct Active {
    behavior: Behavior,
    from: Tick,
    until: Tick,
}

impl Active {
    fn at(&self, t: Tick) -> bool {
        (self.from..=self.until).contains(&t)
    }
}

struct LinkAdv {
    id: NodeId,
    a: NodeId,
    b: NodeId,
    act: Active,
    impostors: BTreeMap<u64, Vec<Impostor>>,
}

#[derive(Clone, Debug)]
enum Then {
    RouteQuery { target: NodeId, seq: u64 },
    RingReply { origin: NodeId, query: u64 },
}

#[derive(Clone, Debug)]
struct Pending {
    lifetime: u32,
    then: Vec<Then>,
}

struct RingQuery {
    source: NodeId,
    target: NodeId,
    seq: u64,
    awaiting: usize,
}

struct Lead {
    kh: KeyHierarchy,
    zk: ZkPublicParams,
    zk_secret: ZkSecret,
    joins: BTreeMap<u64, LeaderJoin>,
    liveness: Liveness,
    queries: BTreeMap<u64, RingQuery>,
}

struct Node {
    id: NodeId,
    keys: KeyPair,
    cert: Certificate,
    trace: PositionTrace,
    battery: f64,
    trust: f64,
    alive: bool,
    member: Option<Membership>,
    join: Option<NodeJoin>,
    lead: Option<Box<Lead>>,
    leader_seen: Tick,
    cache: SeqCache,
    dest_seen: SeqCache,
    answered: BTreeMap<NodeId, u64>,
    table: RoutingTable,
    next_seq: u64,
    pending: BTreeMap<(NodeId, u64), Pending>,
    inter: BTreeSet<(NodeId, u64)>,
    composed: BTreeMap<NodeId, ComposedRoute>,
    sessions: SessionTable,
    ring: Option<RingState>,
    adversary: Option<Active>,
    adv_seen: BTreeSet<(NodeId, u64)>,
}

#[derive(Clone)]
struct DirEntry {
    leader: NodeId,
    lineage: u32,
    params: ZkPublicParams,
}

struct Watch {
    watcher: NodeId,
    subject: NodeId,
    source: NodeId,
    dest: NodeId,
    deadline: Tick,
}

struct Replay {
    from: NodeId,
    origin: NodeId,
    to: Option<NodeId>,
    msg: Message,
    channel: Channel,
}

struct Engine<'s> {
    sc: &'s Scenario,
    p: Arc<dyn CryptoProvider>,
    rng: ChaCha20Rng,
    arng: ChaCha20Rng,
    tick: Tick,
    log: EventLog,
    nodes: Vec<Node>,
    links: Vec<LinkAdv>,
    names: BTreeMap<NodeId, String>,
    ttp: Ttp,
    certs: BTreeMap<NodeId, Certificate>,
    directory: BTreeMap<GroupId, DirEntry>,
    capacity: BTreeMap<GroupId, usize>,
    queue: BTreeMap<Tick, VecDeque<Transit>>,
    replays: BTreeMap<Tick, Vec<Replay>>,
    watches: Vec<Watch>,
    ring_round: u64,
    dh: DhGroup,
    m_max: f64,
    join_cfg: JoinConfig,
    rekey: RekeyConfig,
    router: RouterConfig,
    trust_rule: TrustRule,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

impl<'s> Engine<'s> {
    fn new(sc: &'s Scenario) -> Result<Self, SimError> {
        let params = &sc.params;
        let p = params.provider.build();
        let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
        let arng = ChaCha20Rng::seed_from_u64(params.seed ^ 0xA5A5_5A5A_F00D_BEEF);
        let ttp = Ttp::new(&*p, &mut rng);
        let forged = match &params.fault {
            Some((Fault::ForgedAdmit, Some(who))) => Some((Ttp::new(&*p, &mut rng), who.clone())),
            _ => None,
        };
        let mut names = BTreeMap::new();
        let mut nodes = Vec::new();
        let mut certs = BTreeMap::new();
        for (i, spec) in sc.nodes.iter().enumerate() {
            let id = NodeId(i as u32 + 1);
            let (keys, cert) = match &forged {
                Some((rogue, who)) if *who == spec.name => rogue.issue(&*p, &mut rng, id)?,
                _ => ttp.issue(&*p, &mut rng, id)?,
            };
            let adversary = sc
                .adversaries
                .iter()
                .find(|a| a.placement == Placement::Node && a.name == spec.name)
                .map(|a| Active {
                    behavior: a.behavior.clone(),
                    from: a.from,
                    until: a.until,
                });
            names.insert(id, spec.name.clone());
            certs.insert(id, cert.clone());
            nodes.push(Node {
                id,
                keys,
                cert,
                trace: spec.trace.clone(),
                battery: spec.battery,
                trust: spec.trust,
                alive: true,
                member: None,
                join: None,
                lead: None,
                leader_seen: 0,
                cache: SeqCache::default(),
                dest_seen: SeqCache::default(),
                answered: BTreeMap::new(),
                table: RoutingTable::default(),
                next_seq: 0,
                pending: BTreeMap::new(),
                inter: BTreeSet::new(),
                composed: BTreeMap::new(),
                sessions: SessionTable::default(),
                ring: None,
                adversary,
                adv_seen: BTreeSet::new(),
            });
        }
        let id_of = |name: &str| NodeId(sc.node_index(name).expect("validated") as u32 + 1);
        let mut links = Vec::new();
        for a in &sc.adversaries {
            if let Placement::Link(u, v) = &a.placement {
                let id = NodeId((nodes.len() + links.len()) as u32 + 1);
                names.insert(id, a.name.clone());
                links.push(LinkAdv {
                    id,
                    a: id_of(u),
                    b: id_of(v),
                    act: Active {
                        behavior: a.behavior.clone(),
                        from: a.from,
                        until: a.until,
                    },
                    impostors: BTreeMap::new(),
                });
            }
        }
        let m_max = sc.nodes.iter().map(|n| mobility(&n.trace)).fold(0.0, f64::max);
        let capacity = sc
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| (GroupId(i as u32 + 1), g.capacity))
            .collect();
        let fault = params.fault.as_ref().map(|f| f.0);
        Ok(Self {
            sc,
            p,
            rng,
            arng,
            tick: 0,
            log: EventLog::default(),
            nodes,
            links,
            names,
            ttp,
            certs,
            directory: BTreeMap::new(),
            capacity,
            queue: BTreeMap::new(),
            replays: BTreeMap::new(),
            watches: Vec::new(),
            ring_round: 0,
            dh: DhGroup::modp_1536(),
            m_max,
            join_cfg: JoinConfig {
                rounds: params.rounds,
                space: ChallengeSpace::new(params.challenge_bits).unwrap_or_default(),
                capacity: usize::MAX,
                skip_cert_check: fault == Some(Fault::ForgedAdmit),
            },
            rekey: RekeyConfig {
                via_member_keys: params.rekey_via_member_keys,
                leak_to_removed: fault == Some(Fault::LeakKey),
                skip_rekey: fault == Some(Fault::SkipRekey),
            },
            router: RouterConfig {
                strict_chain: params.strict_chain,
            },
            trust_rule: TrustRule::default(),
        })
    }

    // ---- bookkeeping ----

    fn name(&self, id: NodeId) -> String {
        self.names.get(&id).cloned().unwrap_or_else(|| id.to_string())
    }

    fn node(&self, id: NodeId) -> Option<&Node> {
        (id.0 as usize).checked_sub(1).and_then(|i| self.nodes.get(i))
    }

    fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        (id.0 as usize).checked_sub(1).and_then(|i| self.nodes.get_mut(i))
    }

    fn id_of(&self, name: &str) -> NodeId {
        NodeId(self.sc.node_index(name).expect("validated") as u32 + 1)
    }

    fn group_id(&self, name: &str) -> GroupId {
        GroupId(self.sc.group_index(name).expect("validated") as u32 + 1)
    }

    fn alive(&self, id: NodeId) -> bool {
        match self.node(id) {
            Some(n) => n.alive,
            None => self.links.iter().any(|l| l.id == id),
        }
    }

    fn position(&self, id: NodeId) -> Option<(f64, f64)> {
        self.node(id).map(|n| n.trace.position_at(self.tick))
    }

    fn in_range(&self, a: NodeId, b: NodeId, range: f64) -> bool {
        match (self.position(a), self.position(b)) {
            (Some(x), Some(y)) => dist(x, y) <= range,
            _ => true,
        }
    }

    fn info(&mut self, who: &str, detail: String) {
        self.log.push(self.tick, EventKind::Info, who, None, detail);
    }

    fn info_at(&mut self, id: NodeId, detail: String) {
        let who = self.name(id);
        self.info(&who, detail);
    }

    fn verdict(&mut self, at: NodeId, digest: PayloadDigest, detail: String) {
        let who = self.name(at);
        self.log.push(self.tick, EventKind::Verdict, who, Some(digest), detail);
    }

    /// Own group and leader.
    fn group_of(&self, id: NodeId) -> Option<(GroupId, NodeId)> {
        let n = self.node(id)?;
        if let Some(l) = &n.lead {
            return Some((l.kh.group, id));
        }
        n.member.as_ref().map(|m| (m.group, m.leader))
    }

    fn roster(&self, id: NodeId) -> Option<&BTreeMap<NodeId, PublicKey>> {
        let n = self.node(id)?;
        if let Some(l) = &n.lead {
            return Some(l.kh.member_list());
        }
        n.member.as_ref().map(|m| &m.known)
    }

    fn group_key(&self, id: NodeId) -> Option<(KeyId, SymmetricKey)> {
        let n = self.node(id)?;
        if let Some(l) = &n.lead {
            return Some((l.kh.group_key_id(), l.kh.group_key().clone()));
        }
        n.member.as_ref().map(|m| (m.group_key_id(), m.group_key.key.clone()))
    }

    fn ring_key(&self, id: NodeId) -> Option<(KeyId, SymmetricKey)> {
        let r = self.node(id)?.ring.as_ref()?;
        r.key.clone().map(|k| (r.key_id(), k))
    }

    fn is_leader(&self, id: NodeId) -> bool {
        self.node(id).is_some_and(|n| n.lead.is_some())
    }

    fn adversary(&self, id: NodeId) -> Option<&Behavior> {
        let a = self.node(id)?.adversary.as_ref()?;
        a.at(self.tick).then_some(&a.behavior)
    }

    // ---- transport ----

    fn resolve(&self, from: NodeId, to: Addr) -> Vec<NodeId> {
        let group = |g: GroupId| -> Vec<NodeId> {
            match (self.group_of(from), self.roster(from)) {
                (Some((mine, _)), Some(r)) if mine == g => r.keys().copied().filter(|n| *n != from).collect(),
                _ => Vec::new(),
            }
        };
        match to {
            Addr::Node(n) => vec![n],
            Addr::Group(g) => group(g),
            Addr::GroupAnd(g, n) => {
                let mut v = group(g);
                if !v.contains(&n) && n != from {
                    v.push(n);
                }
                v
            }
            Addr::Leaders => self
                .directory
                .values()
                .map(|e| e.leader)
                .filter(|l| *l != from)
                .collect(),
        }
    }

    fn emit(&mut self, from: NodeId, out: Out) {
        let channel = match &out.msg {
            Message::Rreq(_) => Channel::Broadcast,
            Message::Rrep(_) | Message::Data { .. } => Channel::Radio,
            _ => Channel::Control,
        };
        let targets = self.resolve(from, out.to);
        self.transmit(from, from, targets, &out.msg, channel);
    }

    fn link_on(&self, a: NodeId, b: NodeId) -> Option<usize> {
        self.links
            .iter()
            .position(|l| l.act.at(self.tick) && ((l.a == a && l.b == b) || (l.a == b && l.b == a)))
    }

    fn transmit(&mut self, from: NodeId, origin: NodeId, targets: Vec<NodeId>, msg: &Message, channel: Channel) {
        if let Message::Data { source, dest, .. } = msg {
            self.watches
                .retain(|w| !(w.subject == from && w.source == *source && w.dest == *dest));
        }
        let bytes = Rc::new(msg.encode());
        let digest = self.log.store(&bytes);
        let targets = if channel == Channel::Broadcast {
            let radius = self.sc.params.radius;
            self.nodes
                .iter()
                .filter(|n| n.alive && n.id != from)
                .map(|n| n.id)
                .filter(|n| self.in_range(from, *n, radius))
                .collect()
        } else {
            targets
        };
        let range = match channel {
            Channel::Radio | Channel::Broadcast => self.sc.params.radius,
            Channel::Control => self.sc.params.control_range,
            Channel::Direct => f64::INFINITY,
        };
        let mut out: Vec<Transit> = Vec::new();
        for t in targets.iter().copied().filter(|t| *t != from) {
            let mut tr = Transit {
                from,
                origin,
                to: t,
                intended: Some(t),
                bytes: bytes.clone(),
                digest,
                drop: None,
                overheard: false,
            };
            if !self.in_range(from, t, range) {
                tr.drop = Some("out_of_range");
            } else if channel != Channel::Direct {
                if let Some(li) = self.link_on(from, t) {
                    let adv = self.links[li].id;
                    let intercept = match self.links[li].act.behavior {
                        Behavior::MitmRelay | Behavior::Modify(..) | Behavior::DropAll | Behavior::Impersonate(_) => {
                            true
                        }
                        Behavior::Drop(p) => self.arng.gen_bool(p),
                        Behavior::Replay(_) | Behavior::Eavesdrop => false,
                    };
                    if intercept {
                        tr.to = adv;
                    } else {
                        let mut copy = tr.clone();
                        copy.to = adv;
                        copy.overheard = true;
                        out.push(copy);
                    }
                }
            }
            out.push(tr);
        }
        let radius = self.sc.params.radius;
        let intended = if channel == Channel::Broadcast {
            None
        } else {
            targets.first().copied()
        };
        let listeners: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.alive && n.id != from && n.adversary.as_ref().is_some_and(|a| a.at(self.tick)))
            .map(|n| n.id)
            .filter(|x| !out.iter().any(|t| t.to == *x))
            .filter(|x| channel != Channel::Direct && self.in_range(from, *x, radius))
            .collect();
        for x in listeners {
            out.push(Transit {
                from,
                origin,
                to: x,
                intended,
                bytes: bytes.clone(),
                digest,
                drop: None,
                overheard: true,
            });
        }
        let mut detail = msg.name().to_string();
        if origin != from {
            detail.push_str(&format!(" origin={}", self.name(origin)));
        }
        let principals = format!(
            "{}>{}",
            self.name(from),
            out.iter().map(|t| self.name(t.to)).collect::<Vec<_>>().join(",")
        );
        self.log
            .push(self.tick, EventKind::Send, principals, Some(digest), detail);
        self.queue.entry(self.tick + 1).or_default().extend(out);
    }

    fn deliver(&mut self, tr: Transit) {
        let principals = format!("{}<{}", self.name(tr.to), self.name(tr.from));
        let decoded = Message::decode(&tr.bytes);
        let label = decoded.as_ref().map(|m| m.name()).unwrap_or("?");
        let drop = tr
            .drop
            .or_else(|| (!self.alive(tr.to)).then_some("down"))
            .or_else(|| decoded.is_err().then_some("malformed"));
        if let Some(reason) = drop {
            self.log.push(
                self.tick,
                EventKind::Drop,
                principals,
                Some(tr.digest),
                format!("{label} {reason}"),
            );
            return;
        }
        let msg = decoded.expect("checked");
        let detail = if tr.overheard {
            format!("{label} overheard")
        } else {
            label.to_string()
        };
        self.log
            .push(self.tick, EventKind::Deliver, principals, Some(tr.digest), detail);
        if let Some(li) = self.links.iter().position(|l| l.id == tr.to) {
            self.link_adversary(li, &tr, msg);
        } else if tr.overheard || self.subverts(tr.to, &msg) {
            self.overhear(tr.to, &tr, msg);
        } else {
            self.handle(tr.to, tr.origin, msg, tr.digest);
        }
    }

    // ---- adversaries ----

    fn link_adversary(&mut self, li: usize, tr: &Transit, msg: Message) {
        let adv = self.links[li].id;
        let Some(v) = tr.intended else {
            return;
        };
        match self.links[li].act.behavior.clone() {
            Behavior::MitmRelay => {
                let relayed = match msg {
                    Message::Rreq(mut r) => {
                        if r.lifetime == 0 {
                            return;
                        }
                        r.lifetime -= 1;
                        Message::Rreq(r)
                    }
                    m => m,
                };
                self.transmit(adv, tr.origin, vec![v], &relayed, Channel::Direct);
            }
            Behavior::Modify(field, mutation) => {
                let m = mutate_message(&msg, field, mutation, &mut self.arng);
                self.transmit(adv, tr.origin, vec![v], &m, Channel::Direct);
            }
            Behavior::Replay(delay) => {
                self.replays.entry(self.tick + delay.max(1)).or_default().push(Replay {
                    from: adv,
                    origin: tr.origin,
                    to: Some(v),
                    msg,
                    channel: Channel::Direct,
                });
            }
            Behavior::Impersonate(_) => self.impostor_leader(li, tr, v, msg),
            Behavior::DropAll | Behavior::Drop(_) | Behavior::Eavesdrop => {}
        }
    }

    /// A link adversary answering a join as if it were the leader, knowing
    /// only the leader's public challenge-response parameters.
    fn impostor_leader(&mut self, li: usize, tr: &Transit, v: NodeId, msg: Message) {
        let adv = self.links[li].id;
        match msg {
            Message::JoinReq { group, joiner, session } => {
                let Some(entry) = self.directory.get(&group).cloned() else {
                    return;
                };
                let imps: Vec<Impostor> = (0..self.join_cfg.rounds)
                    .map(|_| Impostor::commit(&mut self.arng, &entry.params, self.join_cfg.space))
                    .collect();
                let reply = Message::ZkParams {
                    group,
                    session,
                    leader: entry.leader,
                    params: entry.params.clone(),
                    commitments: imps.iter().map(|i| i.x.clone()).collect(),
                };
                self.links[li].impostors.insert(session, imps);
                self.transmit(adv, entry.leader, vec![joiner], &reply, Channel::Direct);
            }
            Message::ZkChallenge {
                group,
                session,
                challenges,
            } => {
                let Some(imps) = self.links[li].impostors.get(&session) else {
                    return;
                };
                let responses = imps.iter().zip(&challenges).map(|(i, c)| i.respond(*c)).collect();
                let reply = Message::ZkResponse {
                    group,
                    session,
                    responses,
                };
                self.transmit(adv, v, vec![tr.origin], &reply, Channel::Direct);
            }
            // Without the leader's private key the handshake cannot go on.
            Message::Cert { .. } | Message::Nonce { .. } => {}
            m => self.transmit(adv, tr.origin, vec![v], &m, Channel::Direct),
        }
    }

    fn overhear(&mut self, x: NodeId, tr: &Transit, msg: Message) {
        let Some(behavior) = self.adversary(x).cloned() else {
            return;
        };
        match (behavior, msg) {
            (Behavior::MitmRelay, Message::Rreq(mut r)) => {
                let fresh = self.node_mut(x).is_some_and(|n| n.adv_seen.insert((r.source, r.seq)));
                if fresh && r.lifetime > 0 {
                    r.lifetime -= 1;
                    self.transmit(x, tr.origin, Vec::new(), &Message::Rreq(r), Channel::Broadcast);
                }
            }
            (Behavior::MitmRelay, m @ (Message::Rrep(_) | Message::Data { .. })) => {
                let radius = self.sc.params.radius;
                if let Some(t) = tr.intended {
                    if !self.in_range(tr.from, t, radius) && self.in_range(x, t, radius) {
                        self.transmit(x, tr.origin, vec![t], &m, Channel::Radio);
                    }
                }
            }
            (Behavior::Modify(field, mutation), m @ Message::Rreq(_)) => {
                let Message::Rreq(r) = &m else { unreachable!() };
                if self.node_mut(x).is_some_and(|n| n.adv_seen.insert((r.source, r.seq))) {
                    let out = mutate_message(&m, field, mutation, &mut self.arng);
                    self.transmit(x, tr.origin, Vec::new(), &out, Channel::Broadcast);
                }
            }
            (Behavior::Replay(delay), Message::Rreq(r)) => {
                if self.node_mut(x).is_some_and(|n| n.adv_seen.insert((r.source, r.seq))) {
                    self.replays.entry(self.tick + delay.max(1)).or_default().push(Replay {
                        from: x,
                        origin: tr.origin,
                        to: None,
                        msg: Message::Rreq(r),
                        channel: Channel::Broadcast,
                    });
                }
            }
            (Behavior::Impersonate(victim), Message::Rreq(r)) => {
                let victim = self.id_of(&victim);
                if r.source == victim || !self.node_mut(x).is_some_and(|n| n.adv_seen.insert((r.source, r.seq))) {
                    return;
                }
                let Some(private) = self.node(x).map(|n| n.keys.private.clone()) else {
                    return;
                };
                // Signed with the adversary's own key under the victim's name.
                if let Ok(forged) = make_rreq(&*self.p, &private, victim, r.dest, r.seq + 1_000_000, r.lifetime.max(1))
                {
                    self.transmit(x, victim, Vec::new(), &Message::Rreq(forged), Channel::Broadcast);
                }
            }
            _ => {}
        }
    }

    /// Active adversaries replace honest routing with their own behavior.
    /// Droppers and eavesdroppers keep forwarding like honest nodes.
    fn subverts(&self, id: NodeId, msg: &Message) -> bool {
        let active = matches!(
            self.adversary(id),
            Some(Behavior::MitmRelay | Behavior::Modify(..) | Behavior::Replay(_) | Behavior::Impersonate(_))
        );
        active && matches!(msg, Message::Rreq(_) | Message::Rrep(_) | Message::Data { .. })
    }

    fn blackholes(&mut self, id: NodeId) -> bool {
        match self.adversary(id).cloned() {
            Some(Behavior::DropAll) => true,
            Some(Behavior::Drop(p)) => self.arng.gen_bool(p),
            _ => false,
        }
    }

    // ---- step plumbing ----

    fn apply(&mut self, actor: NodeId, step: Step) {
        for note in step.notes {
            self.note(actor, note);
        }
        for out in step.out {
            self.emit(actor, out);
        }
    }

    fn note(&mut self, actor: NodeId, note: Note) {
        let t = self.tick;
        match note {
            Note::Secret { owner, record } => {
                let mut who = self.name(owner);
                if let KeyId::Member { member, .. } = record.id {
                    let holder = self
                        .node(actor)
                        .and_then(|n| n.lead.as_ref())
                        .and_then(|l| l.kh.node_by_member_id(member));
                    if let Some(h) = holder {
                        who = format!("{who},{}", self.name(h));
                    }
                }
                if let KeyId::Session {
                    initiator, responder, ..
                } = record.id
                {
                    let peer = if initiator == owner { responder } else { initiator };
                    who = format!("{who},{}", self.name(peer));
                }
                self.log.push(
                    t,
                    EventKind::Secret,
                    who,
                    None,
                    format!("{} {}", record.id, hex::encode(&record.bytes)),
                );
            }
            Note::Admitted {
                group,
                node,
                member_id,
                session,
            } => {
                let lineage = self.directory.get(&group).map_or(0, |e| e.lineage);
                let who = self.name(node);
                self.log.push(
                    t,
                    EventKind::Admit,
                    who,
                    None,
                    format!("{group} l{lineage} member={member_id} session={session}"),
                );
                if let Some(l) = self.node_mut(actor).and_then(|n| n.lead.as_deref_mut()) {
                    l.liveness.heartbeat(node, t);
                }
            }
            Note::JoinComplete { group, node, .. } => self.info_at(node, format!("join_complete {group}")),
            Note::JoinRejected { group, node, reason } => {
                self.info_at(node, format!("join_reject {group} {}", reason.as_str()))
            }
            Note::JoinAborted { group, node, reason } => {
                if let Some(n) = self.node_mut(node) {
                    n.join = None;
                }
                self.info_at(node, format!("join_abort {group} {}", reason.as_str()));
            }
            Note::Removed { group, node, reason } => {
                if let Some(l) = self.node_mut(actor).and_then(|n| n.lead.as_deref_mut()) {
                    l.liveness.forget(node);
                }
                let who = self.name(node);
                self.log
                    .push(t, EventKind::Remove, who, None, format!("{group} {}", reason.as_str()));
            }
            Note::Rekeyed { group, lineage, epoch } => {
                let who = self.name(actor);
                self.log
                    .push(t, EventKind::Rekey, who, None, format!("{group} l{lineage} e{epoch}"));
            }
            Note::SessionConfirmed { a, b } => {
                let d = format!("session_confirmed {} {}", self.name(a), self.name(b));
                self.info_at(actor, d);
            }
            Note::SessionAborted { a, b, reason } => {
                let d = format!("session_abort {} {} {}", self.name(a), self.name(b), reason.as_str());
                self.info_at(actor, d);
            }
            Note::Alert { group, subject } => {
                let who = self.name(subject);
                let by = self.name(actor);
                self.log
                    .push(t, EventKind::Alert, who, None, format!("{group} by {by}"));
            }
            Note::Warning(w) => self.info_at(actor, format!("warning {w}")),
        }
    }

    // ---- message handling ----

    fn handle(&mut self, at: NodeId, origin: NodeId, msg: Message, digest: PayloadDigest) {
        match msg {
            Message::JoinReq { .. } | Message::ZkChallenge { .. } | Message::Cert { .. } | Message::Nonce { .. } => {
                self.leader_join(at, origin, &msg)
            }
            Message::ZkParams { .. }
            | Message::ZkResponse { .. }
            | Message::Admit { .. }
            | Message::MemberSet { .. }
            | Message::JoinReject { .. } => self.node_join(at, &msg),
            Message::Rekey { .. } => self.on_rekey(at, &msg),
            Message::Session1 { .. }
            | Message::Session2 { .. }
            | Message::Session3 { .. }
            | Message::Session4 { .. }
            | Message::PubkeyAnswer { .. }
            | Message::MaliciousAlert { .. } => self.on_session(at, &msg),
            Message::PubkeyQuery { .. } => {
                let n = &mut self.nodes[at.0 as usize - 1];
                let Some(lead) = n.lead.as_deref() else {
                    return;
                };
                let mut ctx = ctx!(self);
                let step = leader_answer_lookup(&mut ctx, at, &n.keys.private, &lead.kh, &msg);
                self.apply(at, step);
            }
            Message::Heartbeat { .. } => self.on_heartbeat(at, &msg),
            Message::Leave { .. } => self.on_leave(at, &msg),
            Message::Report { .. } => self.on_report(at, &msg),
            Message::RingGdh { .. } | Message::RingGdhFinal { .. } => {
                let n = &mut self.nodes[at.0 as usize - 1];
                if n.lead.is_none() {
                    return;
                }
                let mut ctx = ctx!(self);
                let step = ring_handle(&mut ctx, &self.dh, at, &mut n.ring, &msg);
                self.apply(at, step);
            }
            Message::Rreq(r) => self.on_rreq(at, r, digest),
            Message::Rrep(r) => self.on_rrep(at, r, digest),
            Message::Data { .. } => self.forward_data(at, msg),
            Message::RouteQuery { .. } => self.on_route_query(at, &msg),
            Message::RingRreq { .. } => self.on_ring_rreq(at, &msg),
            Message::RingRrep { .. } => self.on_ring_rrep(at, &msg, digest),
            Message::RouteComposed { .. } => self.on_route_composed(at, &msg, digest),
            Message::RouteNegative { .. } => self.on_route_negative(at, &msg),
            Message::GroupData { .. } | Message::LeaderAnnounce { .. } => {}
        }
    }

    fn leader_join(&mut self, at: NodeId, origin: NodeId, msg: &Message) {
        let ttp = self.ttp.public_key().clone();
        let n = &mut self.nodes[at.0 as usize - 1];
        let Some(lead) = n.lead.as_deref_mut() else {
            return;
        };
        let cfg = JoinConfig {
            capacity: self.capacity.get(&lead.kh.group).copied().unwrap_or(usize::MAX),
            ..self.join_cfg
        };
        let Lead {
            kh,
            zk,
            zk_secret,
            joins,
            ..
        } = lead;
        let me = LeaderIdentity {
            id: at,
            private: &n.keys.private,
            public: &n.keys.public,
            zk,
            zk_secret,
            ttp: &ttp,
        };
        let mut ctx = ctx!(self);
        let step = leader_handle_join(&mut ctx, &me, kh, joins, &cfg, origin, msg);
        self.apply(at, step);
    }

    fn node_join(&mut self, at: NodeId, msg: &Message) {
        let cfg = self.join_cfg;
        let tick = self.tick;
        let n = &mut self.nodes[at.0 as usize - 1];
        let Some(join) = n.join.as_mut() else {
            return;
        };
        let me = NodeIdentity {
            id: at,
            private: &n.keys.private,
            cert: &n.cert,
        };
        let mut ctx = ctx!(self);
        let (step, membership) = node_handle_join(&mut ctx, &me, join, &cfg, msg);
        if let Some(m) = membership {
            n.member = Some(m);
            n.join = None;
            n.leader_seen = tick;
        }
        self.apply(at, step);
    }

    fn on_rekey(&mut self, at: NodeId, msg: &Message) {
        let tick = self.tick;
        let n = &mut self.nodes[at.0 as usize - 1];
        let Some(m) = n.member.as_mut() else {
            return;
        };
        let old_leader = m.leader;
        let Ok(body) = member_handle_rekey(&*self.p, at, &n.keys.private, m, msg) else {
            return;
        };
        if let Some(a) = body.added {
            if let Some(c) = self.certs.get(&a) {
                m.known.insert(a, c.subject_public_key.clone());
            }
        }
        if m.leader != old_leader {
            m.known.remove(&old_leader);
            n.leader_seen = tick;
        }
    }

    fn on_session(&mut self, at: NodeId, msg: &Message) {
        let window = self.sc.params.window;
        let n = &mut self.nodes[at.0 as usize - 1];
        let (group, known, leader_pk) = if let Some(l) = n.lead.as_deref() {
            (None, l.kh.member_list(), None)
        } else if let Some(m) = n.member.as_ref() {
            (Some((m.group, m.leader)), &m.known, m.known.get(&m.leader))
        } else {
            (None, &NO_KEYS, None)
        };
        let party = Party {
            id: at,
            private: &n.keys.private,
            group,
            known,
            leader_pk,
            window,
        };
        let mut ctx = ctx!(self);
        let step = session_step(&mut ctx, &party, &mut n.sessions, msg);
        if let Message::MaliciousAlert { group, subject, .. } = msg {
            if let Some(m) = n.member.as_mut() {
                let trusted = m.group == *group
                    && m.known
                        .get(&m.leader)
                        .is_some_and(|pk| msg.verify_signature(&*self.p, pk));
                if trusted && *subject != m.leader {
                    m.known.remove(subject);
                }
            }
        }
        self.apply(at, step);
    }

    fn on_heartbeat(&mut self, at: NodeId, msg: &Message) {
        let Message::Heartbeat {
            group,
            node,
            lineage,
            tick: sent,
            ..
        } = msg
        else {
            return;
        };
        if *sent > self.tick {
            return;
        }
        let p = &*self.p;
        let n = &mut self.nodes[at.0 as usize - 1];
        if let Some(l) = n.lead.as_deref_mut() {
            let ok = l.kh.group == *group
                && *node != at
                && l.kh
                    .member_list()
                    .get(node)
                    .is_some_and(|pk| msg.verify_signature(p, pk));
            if ok {
                l.liveness.heartbeat(*node, *sent);
            }
        } else if let Some(m) = n.member.as_ref() {
            let ok = m.group == *group
                && m.leader == *node
                && m.lineage == *lineage
                && m.known.get(node).is_some_and(|pk| msg.verify_signature(p, pk));
            if ok {
                n.leader_seen = n.leader_seen.max(*sent);
            }
        }
    }

    fn on_leave(&mut self, at: NodeId, msg: &Message) {
        let Message::Leave {
            group, node, lineage, ..
        } = msg
        else {
            return;
        };
        let ok = self.node(at).and_then(|n| n.lead.as_ref()).is_some_and(|l| {
            l.kh.group == *group
                && l.kh.lineage == *lineage
                && l.kh
                    .member_list()
                    .get(node)
                    .is_some_and(|pk| msg.verify_signature(&*self.p, pk))
        });
        if ok {
            self.remove(at, *node, RemovalReason::AnnouncedLeave);
        }
    }

    fn remove(&mut self, leader: NodeId, node: NodeId, reason: RemovalReason) {
        let cfg = self.rekey;
        let n = &mut self.nodes[leader.0 as usize - 1];
        let Some(lead) = n.lead.as_deref_mut() else {
            return;
        };
        let mut ctx = ctx!(self);
        let step = remove_member(&mut ctx, &n.keys.private, &mut lead.kh, node, reason, &cfg);
        self.apply(leader, step);
    }

    fn on_report(&mut self, at: NodeId, msg: &Message) {
        let Message::Report {
            group,
            reporter,
            subject,
            ..
        } = msg
        else {
            return;
        };
        let ok = self.node(at).and_then(|n| n.lead.as_ref()).is_some_and(|l| {
            l.kh.group == *group
                && l.kh.is_member(*subject)
                && *subject != at
                && l.kh
                    .member_list()
                    .get(reporter)
                    .is_some_and(|pk| msg.verify_signature(&*self.p, pk))
        });
        if ok {
            self.penalise(at, *subject, *reporter);
        }
    }

    fn penalise(&mut self, leader: NodeId, subject: NodeId, reporter: NodeId) {
        let rule = self.trust_rule;
        let Some(n) = self.node_mut(subject) else {
            return;
        };
        n.trust = update_trust(n.trust, Observation::Dropped, &rule);
        let trust = n.trust;
        let d = format!(
            "trust {} {trust:.2} reported_by {}",
            self.name(subject),
            self.name(reporter)
        );
        self.info_at(leader, d);
        if trust < self.sc.params.trust_threshold {
            self.remove(leader, subject, RemovalReason::Misbehavior);
        }
    }

    // ---- routing ----

    fn rreq_label(&self, r: &RouteRequest) -> String {
        format!("rreq {}>{} seq={}", self.name(r.source), self.name(r.dest), r.seq)
    }

    fn rrep_label(&self, r: &RouteReply) -> String {
        format!("rrep {}>{} seq={}", self.name(r.source), self.name(r.dest), r.seq)
    }

    fn discard(&mut self, at: NodeId, why: &str, what: String) {
        self.info_at(at, format!("discard {why} {what}"));
    }

    fn on_rreq(&mut self, at: NodeId, r: RouteRequest, digest: PayloadDigest) {
        let label = self.rreq_label(&r);
        let Some(roster) = self.roster(at).cloned() else {
            self.discard(at, "foreign_group", label);
            return;
        };
        let p = self.p.clone();
        let cfg = self.router;
        let n = &mut self.nodes[at.0 as usize - 1];
        if r.dest == at {
            if n.dest_seen.seen(r.source, r.seq) {
                self.discard(at, "duplicate", label);
                return;
            }
            if r.route.last().is_none_or(|l| !roster.contains_key(l)) {
                self.discard(at, "foreign_group", label);
                return;
            }
            match destination_verify(&*p, at, &r, &roster, n.answered.get(&r.source).copied()) {
                Ok(h) => {
                    n.dest_seen.insert(r.source, r.seq);
                    n.answered.insert(r.source, r.seq);
                    let rrep = make_rrep(&*p, at, &n.keys.private, &r, h);
                    self.verdict(at, digest, format!("accept {label}"));
                    if let (Ok(rrep), Some(prev)) = (rrep, r.route.last()) {
                        let out = Out {
                            to: Addr::Node(*prev),
                            msg: Message::Rrep(rrep),
                        };
                        self.emit(at, out);
                    }
                }
                Err(e) => self.verdict(at, digest, format!("reject {} {label}", e.as_str())),
            }
            return;
        }
        match forward_rreq(&*p, at, &n.keys.private, &r, &roster, &mut n.cache, &cfg) {
            Ok(next) => self.emit(
                at,
                Out {
                    to: Addr::Leaders,
                    msg: Message::Rreq(next),
                },
            ),
            Err(e) if e.is_silent() || e == Rejection::ForeignGroup => self.discard(at, e.as_str(), label),
            Err(e) => self.verdict(at, digest, format!("reject {} {label}", e.as_str())),
        }
    }

    fn on_rrep(&mut self, at: NodeId, r: RouteReply, digest: PayloadDigest) {
        let label = self.rrep_label(&r);
        let Some(roster) = self.roster(at).cloned() else {
            self.discard(at, "foreign_group", label);
            return;
        };
        let p = self.p.clone();
        let tick = self.tick;
        let n = &mut self.nodes[at.0 as usize - 1];
        if r.source == at {
            let Some(lifetime) = n.pending.get(&(r.dest, r.seq)).map(|p| p.lifetime) else {
                self.discard(at, "unsolicited", label);
                return;
            };
            match source_verify(&*p, at, lifetime, &r, &roster, &mut n.table, tick) {
                Ok(()) => {
                    let then = n
                        .pending
                        .get_mut(&(r.dest, r.seq))
                        .map(|p| std::mem::take(&mut p.then))
                        .unwrap_or_default();
                    self.verdict(at, digest, format!("accept {label}"));
                    for t in then {
                        self.continue_with(at, r.dest, t);
                    }
                }
                Err(e) => self.verdict(at, digest, format!("reject {} {label}", e.as_str())),
            }
            return;
        }
        match forward_rrep(&*p, at, &r, &roster) {
            Ok(prev) => self.emit(
                at,
                Out {
                    to: Addr::Node(prev),
                    msg: Message::Rrep(r),
                },
            ),
            Err(e) => self.verdict(at, digest, format!("reject {} {label}", e.as_str())),
        }
    }

    /// Floods a fresh RREQ from `at` to `dest`. Returns the sequence number.
    fn start_discovery(&mut self, at: NodeId, dest: NodeId, then: Option<Then>) -> u64 {
        let lifetime = self.sc.params.lifetime;
        let n = &mut self.nodes[at.0 as usize - 1];
        n.next_seq += 1;
        let seq = n.next_seq;
        n.pending.insert(
            (dest, seq),
            Pending {
                lifetime,
                then: then.into_iter().collect(),
            },
        );
        n.cache.insert(at, seq);
        if let Ok(r) = make_rreq(&*self.p, &n.keys.private, at, dest, seq, lifetime) {
            self.emit(
                at,
                Out {
                    to: Addr::Leaders,
                    msg: Message::Rreq(r),
                },
            );
        }
        seq
    }

    fn continue_with(&mut self, at: NodeId, reached: NodeId, then: Then) {
        match then {
            Then::RouteQuery { target, seq } => self.send_route_query(at, reached, target, seq),
            Then::RingReply { origin, query } => {
                let leg = self
                    .node(at)
                    .and_then(|n| n.table.get(reached))
                    .map(|e| e.route.clone());
                self.ring_reply(at, origin, query, reached, leg);
            }
        }
    }

    fn discover(&mut self, s: NodeId, d: NodeId, direct: bool) {
        if !self.alive(s) {
            return;
        }
        let (sn, dn) = (self.name(s), self.name(d));
        let same_group = self.roster(s).is_some_and(|r| r.contains_key(&d));
        if direct || same_group {
            let seq = self.start_discovery(s, d, None);
            let how = if same_group { "" } else { " direct" };
            self.info(&sn, format!("discover {sn} {dn} seq={seq}{how}"));
            return;
        }
        let Some((_, leader)) = self.group_of(s) else {
            self.info(&sn, format!("discover_failed {sn} {dn} not_member"));
            return;
        };
        let n = &mut self.nodes[s.0 as usize - 1];
        n.next_seq += 1;
        let seq = n.next_seq;
        n.inter.insert((d, seq));
        let has_leg = n.table.get(leader).is_some();
        self.info(&sn, format!("discover {sn} {dn} seq={seq} inter"));
        if leader == s {
            self.ring_query(s, s, d, seq);
        } else if has_leg {
            self.send_route_query(s, leader, d, seq);
        } else {
            let leg = self.start_discovery(s, leader, Some(Then::RouteQuery { target: d, seq }));
            let ln = self.name(leader);
            self.info(&sn, format!("discover_leg {sn} {ln} seq={leg}"));
        }
    }

    fn send_route_query(&mut self, s: NodeId, leader: NodeId, target: NodeId, seq: u64) {
        let n = &self.nodes[s.0 as usize - 1];
        let q = Message::RouteQuery {
            source: s,
            target,
            seq,
            sig: Signature::default(),
        };
        if let Ok(q) = q.signed(&*self.p, &n.keys.private) {
            self.emit(
                s,
                Out {
                    to: Addr::Node(leader),
                    msg: q,
                },
            );
        }
    }

    fn on_route_query(&mut self, at: NodeId, msg: &Message) {
        let Message::RouteQuery {
            source, target, seq, ..
        } = msg
        else {
            return;
        };
        let ok = self
            .node(at)
            .and_then(|n| n.lead.as_ref())
            .and_then(|l| l.kh.member_list().get(source))
            .is_some_and(|pk| msg.verify_signature(&*self.p, pk));
        if ok {
            self.ring_query(at, *source, *target, *seq);
        }
    }

    fn ring_query(&mut self, leader: NodeId, source: NodeId, target: NodeId, seq: u64) {
        let others = self.directory.values().filter(|e| e.leader != leader).count();
        let ring = self.ring_key(leader);
        let (Some((wrap, key)), true) = (ring, others > 0) else {
            self.negative(leader, source, target, seq);
            return;
        };
        let query = self.rng.next_u64();
        let sealed = self
            .p
            .sym_encrypt(&key, &encode_ring_query(source, target, seq), &mut self.rng);
        if let Some(l) = self.node_mut(leader).and_then(|n| n.lead.as_deref_mut()) {
            l.queries.insert(
                query,
                RingQuery {
                    source,
                    target,
                    seq,
                    awaiting: others,
                },
            );
        }
        self.emit(
            leader,
            Out {
                to: Addr::Leaders,
                msg: Message::RingRreq {
                    origin: leader,
                    query,
                    wrap,
                    sealed,
                },
            },
        );
    }

    fn negative(&mut self, leader: NodeId, source: NodeId, target: NodeId, seq: u64) {
        if source == leader {
            let d = format!("route_negative {} {}", self.name(source), self.name(target));
            self.info_at(leader, d);
            return;
        }
        let msg = Message::RouteNegative {
            leader,
            source,
            target,
            seq,
            sig: Signature::default(),
        };
        if let Ok(m) = msg.signed(&*self.p, &self.nodes[leader.0 as usize - 1].keys.private) {
            self.emit(
                leader,
                Out {
                    to: Addr::Node(source),
                    msg: m,
                },
            );
        }
    }

    fn on_ring_rreq(&mut self, at: NodeId, msg: &Message) {
        let Message::RingRreq {
            origin,
            query,
            wrap,
            sealed,
        } = msg
        else {
            return;
        };
        let Some((id, key)) = self.ring_key(at) else {
            return;
        };
        if id != *wrap {
            return;
        }
        let Some((_, target, _)) = self
            .p
            .sym_decrypt(&key, sealed)
            .ok()
            .and_then(|b| decode_ring_query(&b).ok())
        else {
            return;
        };
        let n = &self.nodes[at.0 as usize - 1];
        let member = n.lead.as_ref().is_some_and(|l| l.kh.is_member(target));
        if !member {
            self.ring_reply(at, *origin, *query, target, None);
        } else if target == at {
            self.ring_reply(at, *origin, *query, target, Some(vec![at]));
        } else if let Some(e) = n.table.get(target) {
            let leg = e.route.clone();
            self.ring_reply(at, *origin, *query, target, Some(leg));
        } else {
            let seq = self.start_discovery(
                at,
                target,
                Some(Then::RingReply {
                    origin: *origin,
                    query: *query,
                }),
            );
            let d = format!("discover_leg {} {} seq={seq}", self.name(at), self.name(target));
            self.info_at(at, d);
        }
    }

    fn ring_reply(&mut self, at: NodeId, origin: NodeId, query: u64, target: NodeId, leg: Option<Vec<NodeId>>) {
        let Some((wrap, key)) = self.ring_key(at) else {
            return;
        };
        let sealed = self
            .p
            .sym_encrypt(&key, &encode_ring_reply(target, leg.as_deref()), &mut self.rng);
        self.emit(
            at,
            Out {
                to: Addr::Node(origin),
                msg: Message::RingRrep {
                    responder: at,
                    query,
                    wrap,
                    sealed,
                },
            },
        );
    }

    fn on_ring_rrep(&mut self, at: NodeId, msg: &Message, digest: PayloadDigest) {
        let Message::RingRrep {
            query, wrap, sealed, ..
        } = msg
        else {
            return;
        };
        let Some((id, key)) = self.ring_key(at) else {
            return;
        };
        if id != *wrap {
            return;
        }
        let Some((_, leg)) = self
            .p
            .sym_decrypt(&key, sealed)
            .ok()
            .and_then(|b| decode_ring_reply(&b).ok())
        else {
            return;
        };
        let Some(lead) = self.node_mut(at).and_then(|n| n.lead.as_deref_mut()) else {
            return;
        };
        let Some(q) = lead.queries.get_mut(query) else {
            return;
        };
        match leg {
            Some(leg) => {
                let q = lead.queries.remove(query).expect("present");
                if q.source == at {
                    self.compose(at, at, q.target, q.seq, leg, digest);
                    return;
                }
                let m = Message::RouteComposed {
                    leader: at,
                    source: q.source,
                    target: q.target,
                    seq: q.seq,
                    second_leg: leg,
                    sig: Signature::default(),
                };
                if let Ok(m) = m.signed(&*self.p, &self.nodes[at.0 as usize - 1].keys.private) {
                    self.emit(
                        at,
                        Out {
                            to: Addr::Node(q.source),
                            msg: m,
                        },
                    );
                }
            }
            None => {
                q.awaiting = q.awaiting.saturating_sub(1);
                if q.awaiting == 0 {
                    let q = lead.queries.remove(query).expect("present");
                    self.negative(at, q.source, q.target, q.seq);
                }
            }
        }
    }

    fn on_route_composed(&mut self, at: NodeId, msg: &Message, digest: PayloadDigest) {
        let Message::RouteComposed {
            leader,
            source,
            target,
            seq,
            second_leg,
            ..
        } = msg
        else {
            return;
        };
        let trusted = self.group_of(at).is_some_and(|(_, l)| l == *leader)
            && self
                .roster(at)
                .and_then(|r| r.get(leader))
                .is_some_and(|pk| msg.verify_signature(&*self.p, pk));
        let solicited = self.node(at).is_some_and(|n| n.inter.contains(&(*target, *seq)));
        if *source == at && trusted && solicited {
            self.compose(at, *leader, *target, *seq, second_leg.clone(), digest);
        }
    }

    fn compose(
        &mut self,
        at: NodeId,
        leader: NodeId,
        target: NodeId,
        seq: u64,
        leg: Vec<NodeId>,
        digest: PayloadDigest,
    ) {
        let label = format!("composed {}>{} seq={seq}", self.name(at), self.name(target));
        let n = &mut self.nodes[at.0 as usize - 1];
        let first = if at == leader {
            Some(vec![at])
        } else {
            n.table.get(leader).map(|e| e.route.clone())
        };
        match first.and_then(|f| compose_routes(&f, &leg)) {
            Some(c) => {
                n.inter.remove(&(target, seq));
                n.composed.insert(target, c);
                self.verdict(at, digest, format!("accept {label}"));
            }
            None => self.verdict(at, digest, format!("reject loop {label}")),
        }
    }

    fn on_route_negative(&mut self, at: NodeId, msg: &Message) {
        let Message::RouteNegative { leader, target, .. } = msg else {
            return;
        };
        let trusted = self
            .roster(at)
            .and_then(|r| r.get(leader))
            .is_some_and(|pk| msg.verify_signature(&*self.p, pk));
        if trusted {
            let d = format!("route_negative {} {}", self.name(at), self.name(*target));
            self.info_at(at, d);
        }
    }

    // ---- data ----

    fn send_data(&mut self, s: NodeId, d: NodeId, text: &str) {
        let (sn, dn) = (self.name(s), self.name(d));
        let Some(n) = self.node(s).filter(|n| n.alive) else {
            return;
        };
        let route = n
            .table
            .get(d)
            .map(|e| e.route.clone())
            .or_else(|| n.composed.get(&d).map(|c| c.full()));
        let Some(route) = route else {
            self.info(&sn, format!("send_failed {sn} {dn} no_route"));
            return;
        };
        let key = n
            .sessions
            .confirmed_key(d)
            .map(|(id, k)| (id, k.clone()))
            .or_else(|| self.group_key(s));
        let Some((wrap, key)) = key else {
            self.info(&sn, format!("send_failed {sn} {dn} no_key"));
            return;
        };
        let sealed = self.p.sym_encrypt(&key, text.as_bytes(), &mut self.rng);
        let msg = Message::Data {
            source: s,
            dest: d,
            route,
            wrap: Some(wrap),
            sealed,
        };
        self.forward_data(s, msg);
    }

    fn open(&self, at: NodeId, wrap: &KeyId, sealed: &[u8]) -> Option<Vec<u8>> {
        let n = self.node(at)?;
        let key = match wrap {
            KeyId::Session {
                initiator, responder, ..
            } => {
                let peer = if *initiator == at { *responder } else { *initiator };
                n.sessions
                    .confirmed_key(peer)
                    .filter(|(id, _)| id == wrap)
                    .map(|(_, k)| k.clone())
            }
            KeyId::Ring { .. } => self.ring_key(at).filter(|(id, _)| id == wrap).map(|(_, k)| k),
            _ => self.group_key(at).filter(|(id, _)| id == wrap).map(|(_, k)| k),
        }?;
        self.p.sym_decrypt(&key, sealed).ok()
    }

    fn forward_data(&mut self, at: NodeId, msg: Message) {
        let Message::Data {
            source,
            dest,
            route,
            wrap: Some(wrap),
            sealed,
        } = msg
        else {
            return;
        };
        let label = format!("data {}>{}", self.name(source), self.name(dest));
        let Some(pos) = route.iter().position(|n| *n == at) else {
            self.discard(at, "not_on_path", label);
            return;
        };
        if at == dest {
            let ok = self.open(at, &wrap, &sealed).is_some();
            self.info_at(at, format!("{label} {}", if ok { "ok" } else { "undecryptable" }));
            return;
        }
        if at != source && self.blackholes(at) {
            return;
        }
        let Some(next) = route.get(pos + 1).copied() else {
            return;
        };
        let crossing = self.is_leader(at) && self.is_leader(next) && self.group_of(at) != self.group_of(next);
        let mut out = (wrap, sealed, Channel::Radio);
        if crossing {
            out.2 = Channel::Control;
            if self.group_key(at).is_some_and(|(id, _)| id == out.0) {
                if let (Some(plain), Some((rid, rk))) = (self.open(at, &out.0, &out.1), self.ring_key(at)) {
                    out = (rid, self.p.sym_encrypt(&rk, &plain, &mut self.rng), Channel::Control);
                }
            }
        } else if self.is_leader(at) && matches!(out.0, KeyId::Ring { .. }) {
            if let (Some(plain), Some((gid, gk))) = (self.open(at, &out.0, &out.1), self.group_key(at)) {
                out = (gid, self.p.sym_encrypt(&gk, &plain, &mut self.rng), Channel::Radio);
            }
        }
        let (wrap, sealed, channel) = out;
        let m = Message::Data {
            source,
            dest,
            route,
            wrap: Some(wrap),
            sealed,
        };
        self.transmit(at, at, vec![next], &m, channel);
        if next != dest && channel == Channel::Radio {
            self.watches.push(Watch {
                watcher: at,
                subject: next,
                source,
                dest,
                deadline: self.tick + 1,
            });
        }
    }

    fn report(&mut self, watcher: NodeId, subject: NodeId) {
        let Some((group, leader)) = self.group_of(watcher) else {
            return;
        };
        if leader == watcher {
            if self
                .node(watcher)
                .and_then(|n| n.lead.as_ref())
                .is_some_and(|l| l.kh.is_member(subject))
            {
                self.penalise(watcher, subject, watcher);
            }
            return;
        }
        let m = Message::Report {
            group,
            reporter: watcher,
            subject,
            sig: Signature::default(),
        };
        if let Ok(m) = m.signed(&*self.p, &self.nodes[watcher.0 as usize - 1].keys.private) {
            self.emit(
                watcher,
                Out {
                    to: Addr::Node(leader),
                    msg: m,
                },
            );
        }
    }

    // ---- leadership ----

    fn attributes(&self, id: NodeId) -> NodeAttributes {
        let n = self.node(id).expect("scenario node");
        NodeAttributes::observe(id, &n.trace, n.battery, n.trust, self.m_max)
            .unwrap_or_else(|_| NodeAttributes::new(id, 0.0, n.battery, n.trust).expect("finite attributes"))
    }

    fn install_leader(
        &mut self,
        id: NodeId,
        group: GroupId,
        lineage: u32,
        members: Option<&BTreeMap<NodeId, PublicKey>>,
    ) {
        let prime_bits = (self.sc.params.zk_bits / 2).max(4);
        let (zk, zk_secret) = zk_generate(&mut self.rng, prime_bits);
        let hash = self.sc.params.hash;
        let tick = self.tick;
        let pk = self.nodes[id.0 as usize - 1].keys.public.clone();
        let mut step = Step::default();
        let mut ctx = ctx!(self);
        let kh = match members {
            Some(m) => {
                let (kh, s) = succeed(&mut ctx, group, lineage, id, pk, m, hash);
                step = s;
                kh
            }
            None => KeyHierarchy::new(&mut ctx, group, lineage, id, pk, hash, &mut step),
        };
        let mut liveness = Liveness::default();
        for m in kh.member_list().keys().filter(|m| **m != id) {
            liveness.heartbeat(*m, tick);
        }
        self.directory.insert(
            group,
            DirEntry {
                leader: id,
                lineage,
                params: zk.clone(),
            },
        );
        let n = &mut self.nodes[id.0 as usize - 1];
        n.member = None;
        n.join = None;
        n.lead = Some(Box::new(Lead {
            kh,
            zk: zk.clone(),
            zk_secret,
            joins: BTreeMap::new(),
            liveness,
            queries: BTreeMap::new(),
        }));
        self.apply(id, step);
        let announce = Message::LeaderAnnounce {
            group,
            leader: id,
            lineage,
            params: zk,
            sig: Signature::default(),
        };
        if let Ok(m) = announce.signed(&*self.p, &self.nodes[id.0 as usize - 1].keys.private) {
            self.emit(
                id,
                Out {
                    to: Addr::Leaders,
                    msg: m.clone(),
                },
            );
            self.emit(
                id,
                Out {
                    to: Addr::Group(group),
                    msg: m,
                },
            );
        }
    }

    /// The leader of `group` is gone: elect among its reachable members or
    /// dissolve the group.
    fn succession(&mut self, group: GroupId) {
        let Some(entry) = self.directory.get(&group).cloned() else {
            return;
        };
        let old = entry.leader;
        let candidates: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.alive && n.id != old)
            .filter(|n| {
                n.member
                    .as_ref()
                    .is_some_and(|m| m.group == group && m.lineage == entry.lineage)
            })
            .map(|n| n.id)
            .collect();
        let who = self.name(old);
        self.log.push(
            self.tick,
            EventKind::Remove,
            who,
            None,
            format!("{group} {}", RemovalReason::LeaderDeparture.as_str()),
        );
        if let Some(n) = self.node_mut(old) {
            n.lead = None;
            n.ring = None;
        }
        // The successor's rekey is on its way; give members a fresh deadline.
        let tick = self.tick;
        for c in &candidates {
            self.nodes[c.0 as usize - 1].leader_seen = tick;
        }
        let attrs: Vec<NodeAttributes> = candidates.iter().map(|c| self.attributes(*c)).collect();
        match leader_departure(&attrs, &self.sc.params.weights) {
            Departure::Dissolved => {
                self.directory.remove(&group);
                self.info("-", format!("dissolve {group}"));
            }
            Departure::Elected(new) => {
                let lineage = entry.lineage + 1;
                let members: BTreeMap<NodeId, PublicKey> = candidates
                    .iter()
                    .map(|c| (*c, self.certs[c].subject_public_key.clone()))
                    .collect();
                let who = self.name(new);
                self.log
                    .push(self.tick, EventKind::Elect, who, None, format!("{group} l{lineage}"));
                self.install_leader(new, group, lineage, Some(&members));
            }
        }
        self.restart_ring();
    }

    fn restart_ring(&mut self) {
        self.ring_round += 1;
        let round = self.ring_round;
        let order: Vec<NodeId> = self
            .directory
            .values()
            .map(|e| e.leader)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        self.info("-", format!("ring_round {round} leaders={}", order.len()));
        for l in order.clone() {
            let mut ctx = ctx!(self);
            let (state, step) = ring_start(&mut ctx, &self.dh, l, round, order.clone());
            self.nodes[l.0 as usize - 1].ring = Some(state);
            self.apply(l, step);
        }
    }

    fn start_join(&mut self, node: NodeId, group: GroupId) {
        let Some(entry) = self.directory.get(&group).cloned() else {
            self.info_at(node, format!("join_failed {group} no_leader"));
            return;
        };
        let leader_pk = self.certs[&entry.leader].subject_public_key.clone();
        let mut step = Step::default();
        let mut ctx = ctx!(self);
        let j = NodeJoin::start(&mut ctx, node, group, entry.leader, entry.params, leader_pk, &mut step);
        self.nodes[node.0 as usize - 1].join = Some(j);
        self.info_at(node, format!("join_start {group}"));
        self.apply(node, step);
    }

    // ---- driver ----

    fn header(&mut self) {
        let sc = self.sc;
        self.info("-", format!("provider {}", sc.params.provider.name()));
        self.info("-", format!("ttp {}", hex::encode(&self.ttp.public_key().0)));
        for i in 0..self.nodes.len() {
            let n = &self.nodes[i];
            let (id, pk) = (n.id, hex::encode(&n.keys.public.0));
            self.info_at(id, format!("node {id} {pk}"));
        }
        for i in 0..self.links.len() {
            let l = &self.links[i];
            let d = format!(
                "adversary {} link {} {} {}",
                l.id,
                self.name(l.a),
                self.name(l.b),
                l.act.behavior
            );
            let id = l.id;
            self.info_at(id, d);
        }
        for a in &sc.adversaries {
            if a.placement == Placement::Node {
                let id = self.id_of(&a.name);
                self.info_at(id, format!("adversary {id} node {}", a.behavior));
            }
        }
        for (i, g) in sc.groups.iter().enumerate() {
            self.info("-", format!("group {} {}", GroupId(i as u32 + 1), g.name));
        }
        let p = &sc.params;
        self.info(
            "-",
            format!(
                "params seed={} lifetime={} radius={} strict_chain={} rounds={} challenge_bits={} end={}",
                p.seed,
                p.lifetime,
                p.radius,
                p.strict_chain,
                p.rounds,
                p.challenge_bits,
                sc.end_tick()
            ),
        );
        for x in &sc.expect {
            self.info("-", format!("expect {x}"));
        }
        for i in 0..self.nodes.len() {
            let n = &self.nodes[i];
            let d = format!("{} {}", KeyId::Private(n.id), hex::encode(&n.keys.private.0));
            let who = self.name(n.id);
            self.log.push(0, EventKind::Secret, who, None, d);
        }
    }

    fn setup(&mut self) {
        self.header();
        let sc = self.sc;
        let mut joiners = Vec::new();
        for (gi, g) in sc.groups.iter().enumerate() {
            let group = GroupId(gi as u32 + 1);
            let members: Vec<NodeId> = g.members.iter().map(|m| self.id_of(m)).collect();
            let attrs: Vec<NodeAttributes> = members.iter().map(|m| self.attributes(*m)).collect();
            let Ok(leader) = elect_leader(&attrs, &sc.params.weights) else {
                continue;
            };
            let who = self.name(leader);
            self.log.push(0, EventKind::Elect, who, None, format!("{group} l0"));
            self.install_leader(leader, group, 0, None);
            joiners.extend(members.into_iter().filter(|m| *m != leader).map(|m| (m, group)));
        }
        self.restart_ring();
        for (m, g) in joiners {
            self.start_join(m, g);
        }
    }

    fn execute(&mut self) {
        let end = self.sc.end_tick();
        self.setup();
        let mut script = self.sc.script.iter().peekable();
        for t in 0..=end {
            self.tick = t;
            while let Some(tr) = self.queue.get_mut(&t).and_then(|q| q.pop_front()) {
                self.deliver(tr);
            }
            self.queue.remove(&t);
            while let Some(e) = script.next_if(|e| e.tick <= t) {
                self.act(&e.action);
            }
            self.timers();
        }
        self.info("-", "end".into());
    }

    fn act(&mut self, action: &Action) {
        match action {
            Action::Join { node, group } => {
                let (n, g) = (self.id_of(node), self.group_id(group));
                let busy = self
                    .node(n)
                    .is_some_and(|x| !x.alive || x.member.is_some() || x.lead.is_some());
                if busy {
                    self.info(node, format!("join_ignored {g}"));
                } else {
                    self.start_join(n, g);
                }
            }
            Action::Leave { node } => self.leave(self.id_of(node)),
            Action::Crash { node } => {
                let id = self.id_of(node);
                self.nodes[id.0 as usize - 1].alive = false;
                self.info(node, format!("crash {node}"));
            }
            Action::CrashLeader { group } => {
                let g = self.group_id(group);
                if let Some(l) = self.directory.get(&g).map(|e| e.leader) {
                    self.nodes[l.0 as usize - 1].alive = false;
                    let who = self.name(l);
                    self.info(&who, format!("crash {who}"));
                }
            }
            Action::Discover { source, dest } => self.discover(self.id_of(source), self.id_of(dest), false),
            Action::DiscoverDirect { source, dest } => self.discover(self.id_of(source), self.id_of(dest), true),
            Action::Send { source, dest, text } => self.send_data(self.id_of(source), self.id_of(dest), text),
            Action::GroupMsg { source, text } => {
                let s = self.id_of(source);
                let (Some((g, _)), Some((wrap, key))) = (self.group_of(s), self.group_key(s)) else {
                    return;
                };
                if !self.alive(s) {
                    return;
                }
                let sealed = self.p.sym_encrypt(&key, text.as_bytes(), &mut self.rng);
                self.emit(
                    s,
                    Out {
                        to: Addr::Group(g),
                        msg: Message::GroupData {
                            group: g,
                            sender: s,
                            wrap,
                            sealed,
                        },
                    },
                );
            }
            Action::Session { a, b } => {
                let (a, b) = (self.id_of(a), self.id_of(b));
                self.session(a, b);
            }
        }
    }

    fn leave(&mut self, id: NodeId) {
        let Some(n) = self.node(id).filter(|n| n.alive) else {
            return;
        };
        if let Some(l) = &n.lead {
            let g = l.kh.group;
            self.info_at(id, format!("leave {g}"));
            self.succession(g);
            return;
        }
        let Some(m) = n.member.clone() else {
            return;
        };
        let msg = Message::Leave {
            group: m.group,
            node: id,
            lineage: m.lineage,
            sig: Signature::default(),
        };
        if let Ok(msg) = msg.signed(&*self.p, &n.keys.private) {
            self.emit(
                id,
                Out {
                    to: Addr::Node(m.leader),
                    msg,
                },
            );
        }
        self.nodes[id.0 as usize - 1].member = None;
        self.info_at(id, format!("leave {}", m.group));
    }

    fn session(&mut self, a: NodeId, b: NodeId) {
        if !self.alive(a) {
            return;
        }
        let window = self.sc.params.window;
        let peer_pk = self
            .roster(a)
            .and_then(|r| r.get(&b).cloned())
            .unwrap_or_else(|| self.certs[&b].subject_public_key.clone());
        let n = &mut self.nodes[a.0 as usize - 1];
        let (group, known) = if let Some(l) = n.lead.as_deref() {
            (None, l.kh.member_list())
        } else if let Some(m) = n.member.as_ref() {
            (Some((m.group, m.leader)), &m.known)
        } else {
            (None, &NO_KEYS)
        };
        let party = Party {
            id: a,
            private: &n.keys.private,
            group,
            known,
            leader_pk: None,
            window,
        };
        let mut ctx = ctx!(self);
        let step = initiate_session(&mut ctx, &party, &mut n.sessions, b, &peer_pk);
        self.apply(a, step);
    }

    fn timers(&mut self) {
        let t = self.tick;
        let p = &self.sc.params;
        let (hb, deadline) = (p.heartbeat, p.deadline);
        if t > 0 && t.is_multiple_of(hb) {
            self.heartbeats();
        }
        // Leaders drop silent members.
        let leaders: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.alive && n.lead.is_some())
            .map(|n| n.id)
            .collect();
        for l in leaders {
            let silent = self.nodes[l.0 as usize - 1]
                .lead
                .as_ref()
                .map(|x| crate::keymgmt::check_liveness(&x.liveness, t, deadline))
                .unwrap_or_default();
            for s in silent {
                self.remove(l, s, RemovalReason::SilentTimeout);
            }
        }
        // Members notice a silent leader.
        let groups: Vec<(GroupId, DirEntry)> = self.directory.iter().map(|(g, e)| (*g, e.clone())).collect();
        for (g, e) in groups {
            if self.alive(e.leader) {
                continue;
            }
            let members: Vec<&Node> = self
                .nodes
                .iter()
                .filter(|n| {
                    n.alive
                        && n.member
                            .as_ref()
                            .is_some_and(|m| m.group == g && m.lineage == e.lineage)
                })
                .collect();
            if members.is_empty() || members.iter().any(|n| t > n.leader_seen + deadline) {
                self.succession(g);
            }
        }
        let orphans: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.alive && t > n.leader_seen + deadline)
            .filter(|n| {
                n.member.as_ref().is_some_and(|m| {
                    let e = self.directory.get(&m.group);
                    e.is_none_or(|e| e.leader != m.leader || self.alive(e.leader))
                })
            })
            .map(|n| n.id)
            .collect();
        for o in orphans {
            self.orphan(o);
        }
        let expired: Vec<Watch> = {
            let (gone, keep) = std::mem::take(&mut self.watches)
                .into_iter()
                .partition(|w| w.deadline < t);
            self.watches = keep;
            gone
        };
        for w in expired {
            if self.alive(w.watcher) {
                self.report(w.watcher, w.subject);
            }
        }
        if let Some(due) = self.replays.remove(&t) {
            for r in due {
                let targets = r.to.into_iter().collect();
                self.transmit(r.from, r.origin, targets, &r.msg, r.channel);
            }
        }
    }

    fn heartbeats(&mut self) {
        let t = self.tick;
        for i in 0..self.nodes.len() {
            let n = &self.nodes[i];
            if !n.alive {
                continue;
            }
            let (group, lineage, to) = if let Some(l) = &n.lead {
                (l.kh.group, l.kh.lineage, Addr::Group(l.kh.group))
            } else if let Some(m) = &n.member {
                (m.group, m.lineage, Addr::Node(m.leader))
            } else {
                continue;
            };
            let msg = Message::Heartbeat {
                group,
                node: n.id,
                lineage,
                tick: t,
                sig: Signature::default(),
            };
            let id = n.id;
            if let Ok(msg) = msg.signed(&*self.p, &n.keys.private) {
                self.emit(id, Out { to, msg });
            }
        }
    }

    /// A member whose leader went quiet while still alive gives up on the
    /// group and joins the nearest reachable one instead.
    fn orphan(&mut self, id: NodeId) {
        let Some(old) = self.nodes[id.0 as usize - 1].member.take() else {
            return;
        };
        self.info_at(id, format!("orphan {}", old.group));
        let range = self.sc.params.control_range;
        let here = self.position(id).expect("scenario node");
        let best = self
            .directory
            .iter()
            .filter(|(g, e)| **g != old.group && self.alive(e.leader))
            .filter_map(|(g, e)| self.position(e.leader).map(|p| (dist(here, p), *g)))
            .filter(|(d, _)| *d <= range)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((_, g)) = best {
            self.start_join(id, g);
        }
    }
}
