//! Scenario files: a sectioned plain-text format.
//!
//! ```text
//! # comment
//! [nodes]
//! S   0  0  battery=0.9 trust=1.0
//! A  10  0  trace=10,0;12,0;14,0
//! [groups]
//! g1 capacity=8 members=S,A
//! [params]
//! seed = 7
//! lifetime = 8
//! [script]
//! 5 discover S A
//! [adversaries]
//! X node mitm_relay
//! E link S A replay 3
//! [expect]
//! verdict A accept
//! ```
//!
//! See `scenarios/GRAMMAR.md` in the repository for every keyword.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::crypto::{HashFn, ProviderKind};
use crate::group::{GroupError, PositionTrace, WeightConfig};
use crate::ids::Tick;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct Diagnostic {
    /// 1-based line number; 0 for whole-file problems.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
pub struct ScenarioError(pub Vec<Diagnostic>);

#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub name: String,
    pub trace: PositionTrace,
    pub battery: f64,
    pub trust: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub name: String,
    pub capacity: usize,
    pub members: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The removed node also receives the post-removal group key.
    LeakKey,
    /// Removal happens without a group-key rotation.
    SkipRekey,
    /// Leaders skip certificate checks and the named node's certificate is
    /// signed by a rogue authority.
    ForgedAdmit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub seed: u64,
    pub lifetime: u32,
    pub radius: f64,
    /// Reach of non-routing unicasts (join, rekey, session, heartbeat).
    pub control_range: f64,
    pub heartbeat: Tick,
    pub deadline: Tick,
    pub window: Tick,
    pub rounds: usize,
    pub challenge_bits: u32,
    pub zk_bits: u64,
    pub weights: WeightConfig,
    pub trust_threshold: f64,
    pub strict_chain: bool,
    pub provider: ProviderKind,
    pub hash: HashFn,
    pub rekey_via_member_keys: bool,
    pub fault: Option<(Fault, Option<String>)>,
    /// Last tick simulated; defaults to the last scripted tick plus 40.
    pub end: Option<Tick>,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            seed: 1,
            lifetime: 8,
            radius: 12.0,
            control_range: f64::INFINITY,
            heartbeat: 10,
            deadline: 30,
            window: 50,
            rounds: 1,
            challenge_bits: 64,
            zk_bits: 64,
            weights: WeightConfig::default(),
            trust_threshold: 0.5,
            strict_chain: false,
            provider: ProviderKind::TestDouble,
            hash: HashFn::Sha256,
            rekey_via_member_keys: false,
            fault: None,
            end: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Join {
        node: String,
        group: String,
    },
    Leave {
        node: String,
    },
    Crash {
        node: String,
    },
    CrashLeader {
        group: String,
    },
    Discover {
        source: String,
        dest: String,
    },
    /// Intra-group discovery even when the destination is foreign.
    DiscoverDirect {
        source: String,
        dest: String,
    },
    Send {
        source: String,
        dest: String,
        text: String,
    },
    GroupMsg {
        source: String,
        text: String,
    },
    Session {
        a: String,
        b: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptEntry {
    pub tick: Tick,
    pub action: Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Source,
    Dest,
    Seq,
    Lifetime,
    Route,
    Chain,
    Sig,
    Payload,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mutation {
    Flip,
    Inc,
    Dec,
    Swap,
    Drop,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Behavior {
    MitmRelay,
    Modify(Field, Mutation),
    Replay(Tick),
    Impersonate(String),
    DropAll,
    Drop(f64),
    Eavesdrop,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Placement {
    /// A declared node; it overhears everything sent within radio range.
    Node,
    /// Sits on the link between two declared nodes, both directions.
    Link(String, String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarySpec {
    pub name: String,
    pub placement: Placement,
    pub behavior: Behavior,
    pub from: Tick,
    pub until: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expectation {
    Verdict {
        node: String,
        accept: bool,
        reason: Option<String>,
    },
    NoVerdict {
        node: String,
        accept: bool,
        reason: Option<String>,
    },
    Route {
        source: String,
        dest: String,
    },
    NoRoute {
        source: String,
        dest: String,
    },
    Alert {
        subject: String,
    },
    JoinAbort {
        node: String,
        reason: Option<String>,
    },
    Member {
        node: String,
        group: String,
    },
    Removed {
        node: String,
        reason: Option<String>,
    },
    Session {
        a: String,
        b: String,
    },
    SessionAbort {
        a: String,
        b: String,
        reason: Option<String>,
    },
    /// No rejection, alert or abort of any kind.
    Undetected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub nodes: Vec<NodeSpec>,
    pub groups: Vec<GroupSpec>,
    pub params: Params,
    pub script: Vec<ScriptEntry>,
    pub adversaries: Vec<AdversarySpec>,
    pub expect: Vec<Expectation>,
}

impl Field {
    pub const ALL: [Field; 8] = [
        Field::Source,
        Field::Dest,
        Field::Seq,
        Field::Lifetime,
        Field::Route,
        Field::Chain,
        Field::Sig,
        Field::Payload,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Source => "source",
            Field::Dest => "dest",
            Field::Seq => "seq",
            Field::Lifetime => "lifetime",
            Field::Route => "route",
            Field::Chain => "chain",
            Field::Sig => "sig",
            Field::Payload => "payload",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

impl Mutation {
    pub const ALL: [Mutation; 5] = [
        Mutation::Flip,
        Mutation::Inc,
        Mutation::Dec,
        Mutation::Swap,
        Mutation::Drop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::Flip => "flip",
            Mutation::Inc => "inc",
            Mutation::Dec => "dec",
            Mutation::Swap => "swap",
            Mutation::Drop => "drop",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl Scenario {
    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Last tick the engine runs.
    pub fn end_tick(&self) -> Tick {
        self.params
            .end
            .unwrap_or_else(|| self.script.last().map_or(0, |e| e.tick) + 40)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let (scenario, mut diags) = parse_raw(text);
        if diags.is_empty() {
            diags.extend(scenario.check(&|_| 0));
        }
        if diags.is_empty() {
            Ok(scenario)
        } else {
            Err(ScenarioError(diags))
        }
    }

    /// Referential and structural checks on an already-built scenario.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let diags = self.check(&|_| 0);
        if diags.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError(diags))
        }
    }

    fn check(&self, _line_of: &dyn Fn(&str) -> usize) -> Vec<Diagnostic> {
        let mut d = Vec::new();
        let mut err = |m: String| d.push(Diagnostic { line: 0, message: m });
        let names: BTreeSet<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
        if names.len() != self.nodes.len() {
            err("duplicate node name".into());
        }
        if self.nodes.is_empty() {
            err("no nodes declared".into());
        }
        let node_ok = |n: &str| names.contains(n);
        let group_ok = |g: &str| self.groups.iter().any(|x| x.name == g);
        let mut placed = BTreeSet::new();
        for g in &self.groups {
            if g.members.is_empty() {
                err(format!("group {} has no members", g.name));
            }
            if g.capacity < g.members.len() {
                err(format!(
                    "group {} has more members than its capacity {}",
                    g.name, g.capacity
                ));
            }
            for m in &g.members {
                if !node_ok(m) {
                    err(format!("group {} names undeclared node {m}", g.name));
                }
                if !placed.insert(m.as_str()) {
                    err(format!("node {m} is in more than one group"));
                }
            }
        }
        let gnames: BTreeSet<&str> = self.groups.iter().map(|g| g.name.as_str()).collect();
        if gnames.len() != self.groups.len() {
            err("duplicate group name".into());
        }
        let mut last = 0;
        for e in &self.script {
            if e.tick < last {
                err(format!("script time {} comes after {last}", e.tick));
            }
            last = e.tick;
            let (ns, gs): (Vec<&str>, Vec<&str>) = match &e.action {
                Action::Join { node, group } => (vec![node], vec![group]),
                Action::Leave { node } | Action::Crash { node } => (vec![node], vec![]),
                Action::CrashLeader { group } => (vec![], vec![group]),
                Action::Discover { source, dest }
                | Action::DiscoverDirect { source, dest }
                | Action::Send { source, dest, .. } => (vec![source, dest], vec![]),
                Action::GroupMsg { source, .. } => (vec![source], vec![]),
                Action::Session { a, b } => (vec![a, b], vec![]),
            };
            for n in ns {
                if !node_ok(n) {
                    err(format!("script at tick {} references undeclared node {n}", e.tick));
                }
            }
            for g in gs {
                if !group_ok(g) {
                    err(format!("script at tick {} references undeclared group {g}", e.tick));
                }
            }
        }
        for a in &self.adversaries {
            match &a.placement {
                Placement::Node => {
                    if !node_ok(&a.name) {
                        err(format!("node adversary {} is not a declared node", a.name));
                    }
                }
                Placement::Link(u, v) => {
                    if node_ok(&a.name) {
                        err(format!("link adversary {} clashes with a node name", a.name));
                    }
                    for n in [u, v] {
                        if !node_ok(n) {
                            err(format!("adversary {} placed on undeclared node {n}", a.name));
                        }
                    }
                }
            }
            if let Behavior::Impersonate(v) = &a.behavior {
                if !node_ok(v) {
                    err(format!("adversary {} impersonates undeclared node {v}", a.name));
                }
            }
            if let Behavior::Drop(p) = a.behavior {
                if !(0.0..=1.0).contains(&p) {
                    err(format!("adversary {} drop probability {p} outside [0, 1]", a.name));
                }
            }
        }
        if let Some((Fault::ForgedAdmit, who)) = &self.params.fault {
            if !who.as_deref().is_some_and(node_ok) {
                err("fault forged_admit needs a declared node, as forged_admit:<node>".into());
            }
        }
        for x in &self.expect {
            let ns: Vec<&String> = match x {
                Expectation::Verdict { node, .. }
                | Expectation::NoVerdict { node, .. }
                | Expectation::JoinAbort { node, .. }
                | Expectation::Removed { node, .. } => vec![node],
                Expectation::Member { node, group } => {
                    if !group_ok(group) {
                        err(format!("expectation names undeclared group {group}"));
                    }
                    vec![node]
                }
                Expectation::Route { source, dest } | Expectation::NoRoute { source, dest } => vec![source, dest],
                Expectation::Alert { subject } => vec![subject],
                Expectation::Session { a, b } | Expectation::SessionAbort { a, b, .. } => vec![a, b],
                Expectation::Undetected => vec![],
            };
            for n in ns {
                if !node_ok(n) {
                    err(format!("expectation references undeclared node {n}"));
                }
            }
        }
        if self.params.lifetime == 0 {
            err("lifetime must be at least 1".into());
        }
        if self.params.rounds == 0 {
            err("rounds must be at least 1".into());
        }
        if !(1..=64).contains(&self.params.challenge_bits) {
            err("challenge_bits must be in 1..=64".into());
        }
        if self.params.zk_bits < 8 {
            err("zk_bits must be at least 8".into());
        }
        d
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        _ => s.parse::<f64>().ok().filter(|v| !v.is_nan()),
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

fn parse_trace(s: &str) -> Option<Vec<(f64, f64)>> {
    s.split(';')
        .map(|p| {
            let (x, y) = p.split_once(',')?;
            Some((parse_f64(x)?, parse_f64(y)?))
        })
        .collect()
}

fn opt_reason(tokens: &[&str], i: usize) -> Option<String> {
    tokens.get(i).map(|s| s.to_string())
}

fn parse_accept(s: &str) -> Option<bool> {
    match s {
        "accept" => Some(true),
        "reject" => Some(false),
        _ => None,
    }
}

/// Parses the file without cross-reference checks.
fn parse_raw(text: &str) -> (Scenario, Vec<Diagnostic>) {
    let mut sc = Scenario {
        nodes: Vec::new(),
        groups: Vec::new(),
        params: Params::default(),
        script: Vec::new(),
        adversaries: Vec::new(),
        expect: Vec::new(),
    };
    let mut diags = Vec::new();
    let mut section: Option<String> = None;
    let mut weights: Option<(usize, f64, f64, f64)> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut err = |m: String| diags.push(Diagnostic { line, message: m });
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            let name = content.trim_start_matches('[').trim_end_matches(']').trim();
            if !["nodes", "groups", "params", "script", "adversaries", "expect"].contains(&name) {
                err(format!("unknown section [{name}]"));
            }
            section = Some(name.to_string());
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match section.as_deref() {
            None => err("content before the first section".into()),
            Some("nodes") => {
                if tokens.len() < 3 {
                    err("node line needs: <name> <x> <y> [key=value ...]".into());
                    continue;
                }
                let (Some(x), Some(y)) = (parse_f64(tokens[1]), parse_f64(tokens[2])) else {
                    err(format!("bad coordinates for node {}", tokens[0]));
                    continue;
                };
                let mut node = NodeSpec {
                    name: tokens[0].to_string(),
                    trace: PositionTrace::stationary(x, y),
                    battery: 1.0,
                    trust: 1.0,
                };
                for kv in &tokens[3..] {
                    let Some((k, v)) = kv.split_once('=') else {
                        err(format!("expected key=value, got {kv}"));
                        continue;
                    };
                    match k {
                        "battery" | "trust" => match parse_f64(v).filter(|x| (0.0..=1.0).contains(x)) {
                            Some(x) if k == "battery" => node.battery = x,
                            Some(x) => node.trust = x,
                            None => err(format!("{k} must be a number in [0, 1]")),
                        },
                        "trace" => match parse_trace(v).map(|mut s| {
                            s.insert(0, (x, y));
                            PositionTrace::new(s)
                        }) {
                            Some(Ok(t)) => node.trace = t,
                            _ => err(format!("bad trace {v}")),
                        },
                        _ => err(format!("unknown node attribute {k}")),
                    }
                }
                sc.nodes.push(node);
            }
            Some("groups") => {
                let mut g = GroupSpec {
                    name: tokens[0].to_string(),
                    capacity: usize::MAX,
                    members: Vec::new(),
                };
                for kv in &tokens[1..] {
                    match kv.split_once('=') {
                        Some(("capacity", v)) => match v.parse() {
                            Ok(c) => g.capacity = c,
                            Err(_) => err(format!("bad capacity {v}")),
                        },
                        Some(("members", v)) => {
                            g.members = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect()
                        }
                        _ => err(format!("unknown group attribute {kv}")),
                    }
                }
                sc.groups.push(g);
            }
            Some("params") => {
                let Some((k, v)) = content.split_once('=') else {
                    err("expected <key> = <value>".into());
                    continue;
                };
                let (k, v) = (k.trim(), v.trim());
                let p = &mut sc.params;
                let bad = |m: &str| format!("bad value for {k}: {m}");
                match k {
                    "seed" => match v.parse() {
                        Ok(x) => p.seed = x,
                        Err(_) => err(bad(v)),
                    },
                    "lifetime" => match v.parse() {
                        Ok(x) => p.lifetime = x,
                        Err(_) => err(bad(v)),
                    },
                    "radius" | "control_range" | "trust_threshold" => match parse_f64(v) {
                        Some(x) if k == "radius" => p.radius = x,
                        Some(x) if k == "control_range" => p.control_range = x,
                        Some(x) => p.trust_threshold = x,
                        None => err(bad(v)),
                    },
                    "heartbeat" | "deadline" | "window" | "end" => match v.parse::<u64>() {
                        Ok(x) if k == "heartbeat" && x > 0 => p.heartbeat = x,
                        Ok(x) if k == "deadline" => p.deadline = x,
                        Ok(x) if k == "window" => p.window = x,
                        Ok(x) if k == "end" => p.end = Some(x),
                        _ => err(bad(v)),
                    },
                    "rounds" => match v.parse() {
                        Ok(x) => p.rounds = x,
                        Err(_) => err(bad(v)),
                    },
                    "challenge_bits" => match v.parse() {
                        Ok(x) => p.challenge_bits = x,
                        Err(_) => err(bad(v)),
                    },
                    "zk_bits" => match v.parse() {
                        Ok(x) => p.zk_bits = x,
                        Err(_) => err(bad(v)),
                    },
                    "weights" => {
                        let ws: Vec<f64> = v.split_whitespace().filter_map(parse_f64).collect();
                        match ws[..] {
                            [a, b, c] => weights = Some((line, a, b, c)),
                            _ => err("weights needs three numbers".into()),
                        }
                    }
                    "strict_chain" => match parse_bool(v) {
                        Some(x) => p.strict_chain = x,
                        None => err(bad(v)),
                    },
                    "provider" => match ProviderKind::from_name(v) {
                        Some(x) => p.provider = x,
                        None => err(bad("expected test or real")),
                    },
                    "hash" => match v {
                        "sha256" => p.hash = HashFn::Sha256,
                        "sha512" => p.hash = HashFn::Sha512,
                        _ => err(bad("expected sha256 or sha512")),
                    },
                    "rekey_via" => match v {
                        "pk" => p.rekey_via_member_keys = false,
                        "member" => p.rekey_via_member_keys = true,
                        _ => err(bad("expected pk or member")),
                    },
                    "fault" => {
                        let (kind, who) = match v.split_once(':') {
                            Some((a, b)) => (a, Some(b.to_string())),
                            None => (v, None),
                        };
                        match kind {
                            "leak_key" => p.fault = Some((Fault::LeakKey, who)),
                            "skip_rekey" => p.fault = Some((Fault::SkipRekey, who)),
                            "forged_admit" => p.fault = Some((Fault::ForgedAdmit, who)),
                            "none" => p.fault = None,
                            _ => err(bad("expected leak_key, skip_rekey or forged_admit:<node>")),
                        }
                    }
                    _ => err(format!("unknown parameter {k}")),
                }
            }
            Some("script") => match parse_action(&tokens, content) {
                Ok(e) => sc.script.push(e),
                Err(m) => err(m),
            },
            Some("adversaries") => match parse_adversary(&tokens) {
                Ok(a) => sc.adversaries.push(a),
                Err(m) => err(m),
            },
            Some("expect") => match parse_expectation(&tokens) {
                Ok(x) => sc.expect.push(x),
                Err(m) => err(m),
            },
            Some(_) => {}
        }
    }
    if let Some((line, a, b, c)) = weights {
        match WeightConfig::new(a, b, c) {
            Ok(w) => sc.params.weights = w,
            Err(GroupError::BadWeights(sum)) => diags.push(Diagnostic {
                line,
                message: format!("weights must be non-negative with w0 + w1 + w2 = 1 (sum is {sum})"),
            }),
            Err(e) => diags.push(Diagnostic {
                line,
                message: e.to_string(),
            }),
        }
    }
    (sc, diags)
}

fn parse_action(t: &[&str], content: &str) -> Result<ScriptEntry, String> {
    let tick: Tick = t[0].parse().map_err(|_| format!("bad script time {}", t[0]))?;
    let verb = *t.get(1).ok_or("script line needs: <tick> <action> ...")?;
    let arg = |i: usize| -> Result<String, String> {
        t.get(i)
            .map(|s| s.to_string())
            .ok_or_else(|| format!("{verb} is missing an argument"))
    };
    // Free text runs to the end of the line.
    let rest = |skip: usize| -> String { content.split_whitespace().skip(skip).collect::<Vec<_>>().join(" ") };
    let action = match verb {
        "join" => Action::Join {
            node: arg(2)?,
            group: arg(3)?,
        },
        "leave" => Action::Leave { node: arg(2)? },
        "crash" => Action::Crash { node: arg(2)? },
        "crash_leader" => Action::CrashLeader { group: arg(2)? },
        "discover" => Action::Discover {
            source: arg(2)?,
            dest: arg(3)?,
        },
        "discover_direct" => Action::DiscoverDirect {
            source: arg(2)?,
            dest: arg(3)?,
        },
        "send" => Action::Send {
            source: arg(2)?,
            dest: arg(3)?,
            text: rest(4),
        },
        "group_msg" => Action::GroupMsg {
            source: arg(2)?,
            text: rest(3),
        },
        "session" => Action::Session { a: arg(2)?, b: arg(3)? },
        _ => return Err(format!("unknown action {verb}")),
    };
    Ok(ScriptEntry { tick, action })
}

fn parse_adversary(t: &[&str]) -> Result<AdversarySpec, String> {
    if t.len() < 3 {
        return Err("adversary line needs: <name> node|link [<a> <b>] <behavior> ...".into());
    }
    let name = t[0].to_string();
    let (placement, rest) = match t[1] {
        "node" => (Placement::Node, &t[2..]),
        "link" if t.len() >= 5 => (Placement::Link(t[2].into(), t[3].into()), &t[4..]),
        _ => return Err("placement must be `node` or `link <a> <b>`".into()),
    };
    let (mut from, mut until) = (0, Tick::MAX);
    let mut words = Vec::new();
    for w in rest {
        match w.split_once('=') {
            Some(("from", v)) => from = v.parse().map_err(|_| format!("bad from {v}"))?,
            Some(("until", v)) => until = v.parse().map_err(|_| format!("bad until {v}"))?,
            _ => words.push(*w),
        }
    }
    let need = |i: usize| {
        words
            .get(i)
            .copied()
            .ok_or_else(|| format!("{} is missing an argument", words[0]))
    };
    let behavior = match *words.first().ok_or("missing behavior")? {
        "mitm_relay" => Behavior::MitmRelay,
        "modify" => {
            let f = need(1)?;
            let m = need(2)?;
            Behavior::Modify(
                Field::from_name(f).ok_or_else(|| format!("unknown field {f}"))?,
                Mutation::from_name(m).ok_or_else(|| format!("unknown mutation {m}"))?,
            )
        }
        "replay" => Behavior::Replay(need(1)?.parse().map_err(|_| "replay delay must be an integer")?),
        "impersonate" => Behavior::Impersonate(need(1)?.to_string()),
        "drop_all" => Behavior::DropAll,
        "drop" => Behavior::Drop(parse_f64(need(1)?).ok_or("drop probability must be a number")?),
        "eavesdrop" => Behavior::Eavesdrop,
        b => return Err(format!("unknown behavior {b}")),
    };
    Ok(AdversarySpec {
        name,
        placement,
        behavior,
        from,
        until,
    })
}

impl std::str::FromStr for Expectation {
    type Err = String;

    /// Parses one `[expect]` line.
    fn from_str(s: &str) -> Result<Self, String> {
        let t: Vec<&str> = s.split_whitespace().collect();
        if t.is_empty() {
            return Err("empty expectation".into());
        }
        parse_expectation(&t)
    }
}

fn parse_expectation(t: &[&str]) -> Result<Expectation, String> {
    let arg = |i: usize| -> Result<String, String> {
        t.get(i)
            .map(|s| s.to_string())
            .ok_or_else(|| format!("{} is missing an argument", t[0]))
    };
    Ok(match t[0] {
        "verdict" | "no_verdict" => {
            let node = arg(1)?;
            let accept = parse_accept(&arg(2)?).ok_or("expected accept or reject")?;
            let reason = opt_reason(t, 3);
            if t[0] == "verdict" {
                Expectation::Verdict { node, accept, reason }
            } else {
                Expectation::NoVerdict { node, accept, reason }
            }
        }
        "route" => Expectation::Route {
            source: arg(1)?,
            dest: arg(2)?,
        },
        "no_route" => Expectation::NoRoute {
            source: arg(1)?,
            dest: arg(2)?,
        },
        "alert" => Expectation::Alert { subject: arg(1)? },
        "join_abort" => Expectation::JoinAbort {
            node: arg(1)?,
            reason: opt_reason(t, 2),
        },
        "member" => Expectation::Member {
            node: arg(1)?,
            group: arg(2)?,
        },
        "removed" => Expectation::Removed {
            node: arg(1)?,
            reason: opt_reason(t, 2),
        },
        "session" => Expectation::Session { a: arg(1)?, b: arg(2)? },
        "session_abort" => Expectation::SessionAbort {
            a: arg(1)?,
            b: arg(2)?,
            reason: opt_reason(t, 3),
        },
        "undetected" => Expectation::Undetected,
        x => return Err(format!("unknown expectation {x}")),
    })
}

fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x}")
    }
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ar = |a: bool| if a { "accept" } else { "reject" };
        let r = |r: &Option<String>| r.as_ref().map(|s| format!(" {s}")).unwrap_or_default();
        match self {
            Expectation::Verdict { node, accept, reason } => write!(f, "verdict {node} {}{}", ar(*accept), r(reason)),
            Expectation::NoVerdict { node, accept, reason } => {
                write!(f, "no_verdict {node} {}{}", ar(*accept), r(reason))
            }
            Expectation::Route { source, dest } => write!(f, "route {source} {dest}"),
            Expectation::NoRoute { source, dest } => write!(f, "no_route {source} {dest}"),
            Expectation::Alert { subject } => write!(f, "alert {subject}"),
            Expectation::JoinAbort { node, reason } => write!(f, "join_abort {node}{}", r(reason)),
            Expectation::Member { node, group } => write!(f, "member {node} {group}"),
            Expectation::Removed { node, reason } => write!(f, "removed {node}{}", r(reason)),
            Expectation::Session { a, b } => write!(f, "session {a} {b}"),
            Expectation::SessionAbort { a, b, reason } => write!(f, "session_abort {a} {b}{}", r(reason)),
            Expectation::Undetected => write!(f, "undetected"),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Join { node, group } => write!(f, "join {node} {group}"),
            Action::Leave { node } => write!(f, "leave {node}"),
            Action::Crash { node } => write!(f, "crash {node}"),
            Action::CrashLeader { group } => write!(f, "crash_leader {group}"),
            Action::Discover { source, dest } => write!(f, "discover {source} {dest}"),
            Action::DiscoverDirect { source, dest } => write!(f, "discover_direct {source} {dest}"),
            Action::Send { source, dest, text } => write!(f, "send {source} {dest} {text}"),
            Action::GroupMsg { source, text } => write!(f, "group_msg {source} {text}"),
            Action::Session { a, b } => write!(f, "session {a} {b}"),
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Behavior::MitmRelay => write!(f, "mitm_relay"),
            Behavior::Modify(x, m) => write!(f, "modify {} {}", x.name(), m.name()),
            Behavior::Replay(d) => write!(f, "replay {d}"),
            Behavior::Impersonate(v) => write!(f, "impersonate {v}"),
            Behavior::DropAll => write!(f, "drop_all"),
            Behavior::Drop(p) => write!(f, "drop {p}"),
            Behavior::Eavesdrop => write!(f, "eavesdrop"),
        }
    }
}

/// Renders the scenario back into the file format; `parse` inverts it.
impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[nodes]")?;
        for n in &self.nodes {
            let s = n.trace.samples();
            write!(
                f,
                "{} {} {} battery={} trust={}",
                n.name,
                fmt_f64(s[0].0),
                fmt_f64(s[0].1),
                n.battery,
                n.trust
            )?;
            if s.len() > 1 {
                let rest: Vec<String> = s[1..]
                    .iter()
                    .map(|(x, y)| format!("{},{}", fmt_f64(*x), fmt_f64(*y)))
                    .collect();
                write!(f, " trace={}", rest.join(";"))?;
            }
            writeln!(f)?;
        }
        writeln!(f, "[groups]")?;
        for g in &self.groups {
            write!(f, "{}", g.name)?;
            if g.capacity != usize::MAX {
                write!(f, " capacity={}", g.capacity)?;
            }
            writeln!(f, " members={}", g.members.join(","))?;
        }
        let p = &self.params;
        writeln!(f, "[params]")?;
        writeln!(f, "seed = {}", p.seed)?;
        writeln!(f, "lifetime = {}", p.lifetime)?;
        writeln!(f, "radius = {}", fmt_f64(p.radius))?;
        writeln!(f, "control_range = {}", fmt_f64(p.control_range))?;
        writeln!(f, "heartbeat = {}", p.heartbeat)?;
        writeln!(f, "deadline = {}", p.deadline)?;
        writeln!(f, "window = {}", p.window)?;
        writeln!(f, "rounds = {}", p.rounds)?;
        writeln!(f, "challenge_bits = {}", p.challenge_bits)?;
        writeln!(f, "zk_bits = {}", p.zk_bits)?;
        writeln!(f, "weights = {} {} {}", p.weights.w0, p.weights.w1, p.weights.w2)?;
        writeln!(f, "trust_threshold = {}", p.trust_threshold)?;
        writeln!(f, "strict_chain = {}", p.strict_chain)?;
        writeln!(f, "provider = {}", p.provider.name())?;
        writeln!(
            f,
            "hash = {}",
            match p.hash {
                HashFn::Sha256 => "sha256",
                HashFn::Sha512 => "sha512",
            }
        )?;
        writeln!(
            f,
            "rekey_via = {}",
            if p.rekey_via_member_keys { "member" } else { "pk" }
        )?;
        if let Some((fault, who)) = &p.fault {
            let name = match fault {
                Fault::LeakKey => "leak_key",
                Fault::SkipRekey => "skip_rekey",
                Fault::ForgedAdmit => "forged_admit",
            };
            match who {
                Some(w) => writeln!(f, "fault = {name}:{w}")?,
                None => writeln!(f, "fault = {name}")?,
            }
        }
        if let Some(e) = p.end {
            writeln!(f, "end = {e}")?;
        }
        writeln!(f, "[script]")?;
        for e in &self.script {
            writeln!(f, "{} {}", e.tick, e.action)?;
        }
        writeln!(f, "[adversaries]")?;
        for a in &self.adversaries {
            match &a.placement {
                Placement::Node => write!(f, "{} node {}", a.name, a.behavior)?,
                Placement::Link(u, v) => write!(f, "{} link {u} {v} {}", a.name, a.behavior)?,
            }
            if a.from != 0 {
                write!(f, " from={}", a.from)?;
            }
            if a.until != Tick::MAX {
                write!(f, " until={}", a.until)?;
            }
            writeln!(f)?;
        }
        writeln!(f, "[expect]")?;
        for x in &self.expect {
            writeln!(f, "{x}")?;
        }
        Ok(())
    }
}

/// Membership of the initial partition, by node name.
pub fn initial_groups(sc: &Scenario) -> BTreeMap<String, String> {
    sc.groups
        .iter()
        .flat_map(|g| g.members.iter().map(move |m| (m.clone(), g.name.clone())))
        .collect()
}
