use std::collections::BTreeMap;

use manet_core::crypto::{CryptoProvider, PublicKey, TestDouble};
use manet_core::routing::{destination_verify, forward_rreq, make_rreq, Rejection, RouterConfig, SeqCache};
use manet_core::NodeId;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// A relay that repeats frames bit for bit, lifetime included, looks exactly
/// like a direct link. The scheme cannot see it; this pins that limitation.
#[test]
fn transparent_repeater_is_not_detected() {
    let p = TestDouble;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let keys: Vec<_> = (0..4).map(|_| p.generate_keypair(&mut rng)).collect();
    let dir: BTreeMap<NodeId, PublicKey> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| (NodeId(i as u32 + 1), k.public.clone()))
        .collect();
    let (s, a, b, d) = (NodeId(1), NodeId(2), NodeId(3), NodeId(4));
    let cfg = RouterConfig::default();
    let r = make_rreq(&p, &keys[0].private, s, d, 1, 8).unwrap();
    let r = forward_rreq(&p, a, &keys[1].private, &r, &dir, &mut SeqCache::default(), &cfg).unwrap();
    let repeated = r.clone();
    let r = forward_rreq(&p, b, &keys[2].private, &repeated, &dir, &mut SeqCache::default(), &cfg).unwrap();
    assert!(destination_verify(&p, d, &r, &dir, None).is_ok());
}

/// The same relay decrementing the lifetime, as any hop would, is caught.
#[test]
fn decrementing_relay_is_detected() {
    let p = TestDouble;
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let keys: Vec<_> = (0..4).map(|_| p.generate_keypair(&mut rng)).collect();
    let dir: BTreeMap<NodeId, PublicKey> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| (NodeId(i as u32 + 1), k.public.clone()))
        .collect();
    let (s, a, b, d) = (NodeId(1), NodeId(2), NodeId(3), NodeId(4));
    let cfg = RouterConfig::default();
    let r = make_rreq(&p, &keys[0].private, s, d, 1, 8).unwrap();
    let mut r = forward_rreq(&p, a, &keys[1].private, &r, &dir, &mut SeqCache::default(), &cfg).unwrap();
    r.lifetime -= 1;
    let r = forward_rreq(&p, b, &keys[2].private, &r, &dir, &mut SeqCache::default(), &cfg).unwrap();
    assert_eq!(destination_verify(&p, d, &r, &dir, None), Err(Rejection::ChainMismatch));
}
