//! Routing-layer tamper fuzzing.
//!
//! Each trial floods one route request over a random connected topology
//! with the routing functions alone (no key management, no simulator). In a
//! mutated trial the first copy reaching one chosen node is altered in a
//! single field; everything derived from that copy is tainted. The trial
//! passes if no tainted request is ever accepted. Control trials run the
//! same flood unaltered and must be accepted with no rejections.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::adversary::random_rreq_mutation;
use super::gen::{connected_layout, hop_distances};
use super::scenario::{Field, Mutation};
use crate::crypto::{CryptoProvider, PrivateKey, PublicKey, TestDouble};
use crate::ids::NodeId;
use crate::routing::{destination_verify, forward_rreq, make_rreq, RouteRequest, RouterConfig, SeqCache};

pub const FUZZ_NODES: usize = 16;
const RADIUS: f64 = 12.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialOutcome {
    /// The field and mutation applied, if the chosen node received a copy.
    pub mutation: Option<(Field, Mutation)>,
    /// Tainted requests accepted by a destination.
    pub tainted_accepts: usize,
    /// Untainted requests accepted by the destination.
    pub clean_accepts: usize,
    /// Non-silent rejections of untainted requests.
    pub false_rejects: usize,
}

impl TrialOutcome {
    /// A mutated trial passes when nothing tainted got through; a control
    /// passes when the request got through and nothing clean was refused.
    pub fn pass(&self) -> bool {
        match self.mutation {
            Some(_) => self.tainted_accepts == 0,
            None => self.clean_accepts == 1 && self.false_rejects == 0,
        }
    }
}

struct Copy {
    to: usize,
    rreq: RouteRequest,
    tainted: bool,
}

/// Runs trial `seed`. `mutate` selects a mutated trial or a control.
pub fn fuzz_trial(seed: u64, mutate: bool) -> TrialOutcome {
    let p = TestDouble;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pts = connected_layout(&mut rng, FUZZ_NODES);
    let hops = hop_distances(&pts, RADIUS);
    let keys: Vec<(PublicKey, PrivateKey)> = (0..FUZZ_NODES)
        .map(|_| {
            let kp = p.generate_keypair(&mut rng);
            (kp.public, kp.private)
        })
        .collect();
    let id = |i: usize| NodeId(i as u32 + 1);
    let dir: BTreeMap<NodeId, PublicKey> = keys.iter().enumerate().map(|(i, k)| (id(i), k.0.clone())).collect();
    let s = rng.gen_range(0..FUZZ_NODES);
    let d = loop {
        let d = rng.gen_range(0..FUZZ_NODES);
        if d != s {
            break d;
        }
    };
    let lifetime = hops.iter().flatten().copied().max().unwrap_or(1) as u32 + 1;
    let victim = loop {
        let v = rng.gen_range(0..FUZZ_NODES);
        if v != s {
            break v;
        }
    };
    let neighbours = |u: usize| -> Vec<usize> { (0..FUZZ_NODES).filter(|v| hops[u][*v] == 1).collect() };

    let mut out = TrialOutcome {
        mutation: None,
        tainted_accepts: 0,
        clean_accepts: 0,
        false_rejects: 0,
    };
    let cfg = RouterConfig::default();
    let mut caches: Vec<SeqCache> = (0..FUZZ_NODES).map(|_| SeqCache::default()).collect();
    let mut answered: Vec<Option<u64>> = vec![None; FUZZ_NODES];
    let mut dest_seen: Vec<SeqCache> = (0..FUZZ_NODES).map(|_| SeqCache::default()).collect();
    let first = make_rreq(&p, &keys[s].1, id(s), id(d), 1, lifetime).expect("test double signs");
    caches[s].insert(id(s), 1);
    let mut queue: VecDeque<Copy> = neighbours(s)
        .into_iter()
        .map(|to| Copy {
            to,
            rreq: first.clone(),
            tainted: false,
        })
        .collect();
    let mut armed = mutate;
    while let Some(mut c) = queue.pop_front() {
        if armed && c.to == victim {
            armed = false;
            if let Some((f, m, r)) = random_rreq_mutation(&c.rreq, &mut rng) {
                out.mutation = Some((f, m));
                c.rreq = r;
                c.tainted = true;
            }
        }
        let u = c.to;
        if c.rreq.dest == id(u) {
            // Later copies of an answered request are dropped unexamined.
            if !dest_seen[u].insert(c.rreq.source, c.rreq.seq) {
                continue;
            }
            match destination_verify(&p, id(u), &c.rreq, &dir, answered[u]) {
                Ok(_) => {
                    answered[u] = Some(c.rreq.seq);
                    if c.tainted {
                        out.tainted_accepts += 1;
                    } else {
                        out.clean_accepts += 1;
                    }
                }
                Err(e) if !c.tainted && !e.is_silent() => out.false_rejects += 1,
                Err(_) => {}
            }
            continue;
        }
        match forward_rreq(&p, id(u), &keys[u].1, &c.rreq, &dir, &mut caches[u], &cfg) {
            Ok(next) => {
                for to in neighbours(u) {
                    queue.push_back(Copy {
                        to,
                        rreq: next.clone(),
                        tainted: c.tainted,
                    });
                }
            }
            Err(e) if !c.tainted && !e.is_silent() => out.false_rejects += 1,
            Err(_) => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controls_are_accepted() {
        for seed in 0..50 {
            let o = fuzz_trial(seed, false);
            assert!(o.pass(), "seed {seed}: {o:?}");
        }
    }

    #[test]
    fn mutations_never_get_through() {
        let mut mutated = 0;
        for seed in 0..300 {
            let o = fuzz_trial(seed, true);
            assert!(o.pass(), "seed {seed}: {o:?}");
            mutated += o.mutation.is_some() as usize;
        }
        assert!(mutated > 250);
    }
}
