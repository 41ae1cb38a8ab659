use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::crypto::{KeyPair, ProviderKind};

struct Net {
    p: Arc<dyn CryptoProvider>,
    keys: BTreeMap<NodeId, KeyPair>,
    dir: BTreeMap<NodeId, PublicKey>,
}

impl Net {
    fn new(n: u32, seed: u64) -> Self {
        let p = ProviderKind::TestDouble.build();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let keys: BTreeMap<_, _> = (0..n).map(|i| (NodeId(i), p.generate_keypair(&mut rng))).collect();
        let dir = keys.iter().map(|(k, v)| (*k, v.public.clone())).collect();
        Self { p, keys, dir }
    }

    fn sk(&self, n: NodeId) -> &PrivateKey {
        &self.keys[&n].private
    }

    /// Source `path[0]`, intermediates `path[1..]`; returns what reaches the
    /// destination. `relay_after` inserts a lifetime-decrementing relay after
    /// the listed path positions.
    fn flood(&self, path: &[NodeId], dest: NodeId, seq: u64, lifetime: u32, relay_after: &[usize]) -> RouteRequest {
        let mut m = make_rreq(&*self.p, self.sk(path[0]), path[0], dest, seq, lifetime).unwrap();
        for (i, n) in path.iter().enumerate() {
            if i > 0 {
                let mut cache = SeqCache::default();
                m = forward_rreq(
                    &*self.p,
                    *n,
                    self.sk(*n),
                    &m,
                    &self.dir,
                    &mut cache,
                    &RouterConfig::default(),
                )
                .unwrap();
            }
            if relay_after.contains(&i) {
                m.lifetime -= 1;
            }
        }
        m
    }
}

fn tlv(tag: u8, v: &[u8]) -> Vec<u8> {
    let mut out = vec![tag];
    out.extend_from_slice(&(v.len() as u32).to_be_bytes());
    out.extend_from_slice(v);
    out
}

/// Byte-level oracle for `H(S, D, seq, L)`, built without the encoder.
fn oracle_origin(p: &dyn CryptoProvider, s: u32, d: u32, seq: u64, l: u32) -> Digest {
    let mut b = tlv(0x01, &s.to_be_bytes());
    b.extend(tlv(0x02, &d.to_be_bytes()));
    b.extend(tlv(0x03, &seq.to_be_bytes()));
    b.extend(tlv(0x04, &l.to_be_bytes()));
    p.hash(&b)
}

fn oracle_step(p: &dyn CryptoProvider, prev: &Digest, n: u32, l: u32) -> Digest {
    let mut b = tlv(0x07, prev.as_bytes());
    b.extend(tlv(0x05, &n.to_be_bytes()));
    b.extend(tlv(0x04, &l.to_be_bytes()));
    p.hash(&b)
}

const S: NodeId = NodeId(0);
const A: NodeId = NodeId(1);
const B: NodeId = NodeId(2);
const D: NodeId = NodeId(3);

#[test]
fn honest_chain_matches_nested_oracle() {
    let net = Net::new(4, 1);
    let p = &*net.p;
    let m = net.flood(&[S, A, B], D, 1, 8, &[]);
    assert_eq!(m.lifetime, 6);
    let expected = oracle_step(p, &oracle_step(p, &oracle_origin(p, 0, 3, 1, 8), 1, 7), 2, 6);
    assert_eq!(m.chain, expected);
    assert_eq!(destination_verify(p, D, &m, &net.dir, None), Ok(expected));
}

#[test]
fn relay_between_a_and_b_is_chain_mismatch() {
    let net = Net::new(4, 2);
    let p = &*net.p;
    let m = net.flood(&[S, A, B], D, 1, 8, &[1]);
    assert_eq!(m.lifetime, 5);
    assert_eq!(m.route, vec![S, A, B]);
    // What D recomputes from lifetime 5.
    let d_side = oracle_step(p, &oracle_step(p, &oracle_origin(p, 0, 3, 1, 7), 1, 6), 2, 5);
    assert_eq!(reconstruct_chain(p, D, 1, &m.route, 5), Some(d_side.clone()));
    assert_ne!(d_side, m.chain);
    assert_eq!(
        destination_verify(p, D, &m, &net.dir, None),
        Err(Rejection::ChainMismatch)
    );
}

#[test]
fn strict_mode_catches_relay_at_intermediate() {
    let net = Net::new(4, 3);
    let p = &*net.p;
    let mut m = net.flood(&[S, A], D, 1, 8, &[1]);
    let strict = RouterConfig { strict_chain: true };
    let mut cache = SeqCache::default();
    assert_eq!(
        forward_rreq(p, B, net.sk(B), &m, &net.dir, &mut cache, &strict),
        Err(Rejection::ChainMismatch)
    );
    assert!(!cache.seen(S, 1));
    m.lifetime += 1;
    assert!(forward_rreq(p, B, net.sk(B), &m, &net.dir, &mut cache, &strict).is_ok());
    assert!(cache.seen(S, 1));
}

#[test]
fn every_relay_position_is_detected() {
    let net = Net::new(10, 4);
    let p = &*net.p;
    for inter in 0..=6usize {
        let path: Vec<NodeId> = (0..=inter as u32).map(NodeId).collect();
        let dest = NodeId(9);
        for pos in 0..=inter {
            let m = net.flood(&path, dest, 7, 12, &[pos]);
            assert_eq!(
                destination_verify(p, dest, &m, &net.dir, None),
                Err(Rejection::ChainMismatch),
                "inter={inter} pos={pos}"
            );
        }
        let clean = net.flood(&path, dest, 7, 12, &[]);
        assert!(destination_verify(p, dest, &clean, &net.dir, None).is_ok());
    }
}

#[test]
fn forward_rejections() {
    let net = Net::new(5, 5);
    let p = &*net.p;
    let cfg = RouterConfig::default();
    let m = make_rreq(p, net.sk(S), S, D, 1, 1).unwrap();
    let mut cache = SeqCache::default();

    let fwd = forward_rreq(p, A, net.sk(A), &m, &net.dir, &mut cache, &cfg).unwrap();
    assert_eq!(fwd.lifetime, 0);
    assert_eq!(
        forward_rreq(p, A, net.sk(A), &m, &net.dir, &mut cache, &cfg),
        Err(Rejection::Duplicate)
    );
    let mut c2 = SeqCache::default();
    assert_eq!(
        forward_rreq(p, B, net.sk(B), &fwd, &net.dir, &mut c2, &cfg),
        Err(Rejection::LifetimeExhausted)
    );
    assert_eq!(
        forward_rreq(p, S, net.sk(S), &m, &net.dir, &mut SeqCache::default(), &cfg),
        Err(Rejection::Loop)
    );
    let mut foreign_dir = net.dir.clone();
    foreign_dir.remove(&S);
    assert_eq!(
        forward_rreq(p, A, net.sk(A), &m, &foreign_dir, &mut SeqCache::default(), &cfg),
        Err(Rejection::ForeignGroup)
    );
    let mut forged = m.clone();
    forged.signatures[0].bytes[0] ^= 1;
    assert_eq!(
        forward_rreq(p, A, net.sk(A), &forged, &net.dir, &mut SeqCache::default(), &cfg),
        Err(Rejection::BadSignature)
    );
}

#[test]
fn zero_lifetime_is_refused() {
    let net = Net::new(2, 6);
    assert_eq!(
        make_rreq(&*net.p, net.sk(S), S, A, 1, 0),
        Err(RoutingError::ZeroLifetime)
    );
}

#[test]
fn reply_roundtrip_and_install() {
    let net = Net::new(4, 7);
    let p = &*net.p;
    let m = net.flood(&[S, A, B], D, 3, 8, &[]);
    let h = destination_verify(p, D, &m, &net.dir, None).unwrap();
    let rrep = make_rrep(p, D, net.sk(D), &m, h).unwrap();
    assert_eq!(rrep.route, vec![S, A, B, D]);
    assert_eq!(forward_rrep(p, B, &rrep, &net.dir), Ok(A));
    assert_eq!(forward_rrep(p, A, &rrep, &net.dir), Ok(S));
    assert_eq!(forward_rrep(p, NodeId(9), &rrep, &net.dir), Err(Rejection::NotOnPath));
    let mut table = RoutingTable::default();
    source_verify(p, S, 8, &rrep, &net.dir, &mut table, 10).unwrap();
    let e = table.get(D).unwrap();
    assert_eq!((e.next_hop, e.seq, e.learned_at), (A, 3, 10));
    assert_eq!(
        source_verify(p, S, 8, &rrep, &net.dir, &mut table, 11),
        Err(Rejection::StaleSeq)
    );
    assert_eq!(
        source_verify(p, S, 9, &rrep, &net.dir, &mut RoutingTable::default(), 0),
        Err(Rejection::ChainMismatch)
    );
}

#[test]
fn modified_reply_route_is_caught() {
    let net = Net::new(5, 8);
    let p = &*net.p;
    let m = net.flood(&[S, A, B], D, 3, 8, &[]);
    let h = destination_verify(p, D, &m, &net.dir, None).unwrap();
    let mut rrep = make_rrep(p, D, net.sk(D), &m, h).unwrap();
    rrep.route[1] = NodeId(4);
    assert_eq!(forward_rrep(p, B, &rrep, &net.dir), Err(Rejection::BadSignature));
    assert_eq!(
        source_verify(p, S, 8, &rrep, &net.dir, &mut RoutingTable::default(), 0),
        Err(Rejection::BadSignature)
    );
}

#[test]
fn stale_seq_at_destination() {
    let net = Net::new(4, 9);
    let p = &*net.p;
    let m = net.flood(&[S, A], D, 4, 8, &[]);
    assert_eq!(
        destination_verify(p, D, &m, &net.dir, Some(4)),
        Err(Rejection::StaleSeq)
    );
    assert!(destination_verify(p, D, &m, &net.dir, Some(3)).is_ok());
    assert_eq!(
        destination_verify(p, B, &m, &net.dir, None),
        Err(Rejection::WrongEndpoint)
    );
}

#[test]
fn chain_helpers_agree() {
    let net = Net::new(6, 10);
    let p = &*net.p;
    let route = [S, A, B, NodeId(4)];
    let l = 9;
    let from_origin = chain_from_origin(p, D, 2, &route, l).unwrap();
    let received = l - (route.len() as u32 - 1);
    assert_eq!(reconstruct_chain(p, D, 2, &route, received), Some(from_origin));
    assert_eq!(chain_from_origin(p, D, 2, &route, 2), None);
    assert_eq!(reconstruct_chain(p, D, 2, &[], 1), None);
}

#[test]
fn wire_roundtrip() {
    let net = Net::new(4, 11);
    let p = &*net.p;
    let m = net.flood(&[S, A, B], D, 3, 8, &[]);
    let bytes = m.encode();
    assert_eq!(bytes[0], RREQ_TAG);
    assert_eq!(RouteRequest::decode_body(&bytes[1..]).unwrap(), m);
    let h = destination_verify(p, D, &m, &net.dir, None).unwrap();
    let r = make_rrep(p, D, net.sk(D), &m, h).unwrap();
    let bytes = r.encode();
    assert_eq!(bytes[0], RREP_TAG);
    assert_eq!(RouteReply::decode_body(&bytes[1..]).unwrap(), r);
}

#[test]
fn routing_table_keeps_seq_monotone() {
    let mut t = RoutingTable::default();
    t.install(D, vec![S, A, D], 5, 0).unwrap();
    assert_eq!(t.install(D, vec![S, B, D], 4, 1), Err(Rejection::StaleSeq));
    t.install(D, vec![S, B, D], 6, 2).unwrap();
    assert_eq!(t.get(D).unwrap().next_hop, B);
    assert_eq!(t.len(), 1);
}

#[derive(Clone, Debug)]
enum Mutation {
    Source,
    Dest,
    Seq,
    LifetimeUp,
    LifetimeDown,
    RouteSwap,
    RouteDrop,
    RouteReplace,
    ChainFlip(usize),
    SigFlip(usize, usize),
    SigDrop,
}

fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        Just(Mutation::Source),
        Just(Mutation::Dest),
        Just(Mutation::Seq),
        Just(Mutation::LifetimeUp),
        Just(Mutation::LifetimeDown),
        Just(Mutation::RouteSwap),
        Just(Mutation::RouteDrop),
        Just(Mutation::RouteReplace),
        (0usize..128).prop_map(Mutation::ChainFlip),
        (0usize..8, 0usize..128).prop_map(|(a, b)| Mutation::SigFlip(a, b)),
        Just(Mutation::SigDrop),
    ]
}

fn apply(m: &mut RouteRequest, mu: &Mutation) {
    match mu {
        Mutation::Source => m.source = NodeId(m.source.0 ^ 1),
        Mutation::Dest => m.dest = NodeId(8),
        Mutation::Seq => m.seq += 1,
        Mutation::LifetimeUp => m.lifetime += 1,
        Mutation::LifetimeDown => m.lifetime -= 1,
        Mutation::RouteSwap => {
            let n = m.route.len();
            m.route.swap(n - 1, n - 2)
        }
        Mutation::RouteDrop => {
            m.route.remove(1);
        }
        Mutation::RouteReplace => m.route[1] = NodeId(7),
        Mutation::ChainFlip(bit) => {
            let b = bit % (m.chain.0.len() * 8);
            m.chain.0[b / 8] ^= 1 << (b % 8);
        }
        Mutation::SigFlip(i, bit) => {
            let s = &mut m.signatures[i % m.route.len()].bytes;
            let b = bit % (s.len() * 8);
            s[b / 8] ^= 1 << (b % 8);
        }
        Mutation::SigDrop => {
            m.signatures.pop();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_single_mutation_is_rejected(mu in mutation(), inter in 2usize..5, seed in 0u64..4) {
        let net = Net::new(9, 100 + seed);
        let p = &*net.p;
        let path: Vec<NodeId> = (0..=inter as u32).map(NodeId).collect();
        let dest = NodeId(6);
        let mut m = net.flood(&path, dest, 5, 10, &[]);
        apply(&mut m, &mu);
        let res = destination_verify(p, dest, &m, &net.dir, None);
        prop_assert!(res.is_err(), "{mu:?} accepted");
    }

    #[test]
    fn honest_paths_always_accepted(inter in 0usize..7, lifetime in 7u32..20, seq in 0u64..1000) {
        let net = Net::new(9, 7);
        let p = &*net.p;
        let path: Vec<NodeId> = (0..=inter as u32).map(NodeId).collect();
        let dest = NodeId(8);
        let m = net.flood(&path, dest, seq, lifetime, &[]);
        let h = destination_verify(p, dest, &m, &net.dir, None).unwrap();
        let r = make_rrep(p, dest, net.sk(dest), &m, h).unwrap();
        let mut t = RoutingTable::default();
        prop_assert!(source_verify(p, path[0], lifetime, &r, &net.dir, &mut t, 0).is_ok());
    }

    #[test]
    fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = RouteRequest::decode_body(&bytes);
        let _ = RouteReply::decode_body(&bytes);
    }
}
