//! Field-level message tampering.

use rand::{Rng, RngCore};

use super::scenario::{Field, Mutation};
use crate::crypto::{Digest, Signature};
use crate::ids::NodeId;
use crate::routing::{RouteReply, RouteRequest};
use crate::wire::Message;

/// A node identifier that no scenario declares.
pub const PHANTOM: NodeId = NodeId(0xFFFF_FF00);

fn mutate_u64(v: u64, m: Mutation) -> u64 {
    match m {
        Mutation::Flip => v ^ 1,
        Mutation::Inc => v.wrapping_add(1),
        Mutation::Dec => v.wrapping_sub(1),
        Mutation::Swap => v.swap_bytes(),
        Mutation::Drop => 0,
    }
}

fn mutate_node(n: NodeId, other: NodeId, m: Mutation) -> NodeId {
    match m {
        Mutation::Swap => other,
        Mutation::Drop => PHANTOM,
        _ => NodeId(mutate_u64(n.0 as u64, m) as u32),
    }
}

fn mutate_bytes(b: &mut Vec<u8>, m: Mutation, rng: &mut dyn RngCore) {
    if b.is_empty() {
        if m == Mutation::Inc {
            b.push(0);
        }
        return;
    }
    let i = rng.gen_range(0..b.len());
    match m {
        Mutation::Flip => b[i] ^= 1 << rng.gen_range(0..8),
        Mutation::Inc => b[i] = b[i].wrapping_add(1),
        Mutation::Dec => b[i] = b[i].wrapping_sub(1),
        Mutation::Swap => {
            let j = rng.gen_range(0..b.len());
            b.swap(i, j);
        }
        Mutation::Drop => {
            b.remove(i);
        }
    }
}

fn mutate_list<T: Clone>(v: &mut Vec<T>, m: Mutation, rng: &mut dyn RngCore, fresh: T, flip: impl Fn(&T) -> T) {
    match m {
        Mutation::Flip if !v.is_empty() => {
            let i = rng.gen_range(0..v.len());
            v[i] = flip(&v[i]);
        }
        Mutation::Inc => {
            let i = rng.gen_range(0..=v.len());
            v.insert(i, fresh);
        }
        Mutation::Dec => {
            v.pop();
        }
        Mutation::Swap if v.len() >= 2 => {
            let i = rng.gen_range(0..v.len());
            let mut j = rng.gen_range(0..v.len() - 1);
            if j >= i {
                j += 1;
            }
            v.swap(i, j);
        }
        Mutation::Drop if !v.is_empty() => {
            let i = rng.gen_range(0..v.len());
            v.remove(i);
        }
        _ => {}
    }
}

fn flip_sig(s: &Signature) -> Signature {
    let mut b = s.bytes.clone();
    if let Some(x) = b.last_mut() {
        *x ^= 1;
    } else {
        b.push(1);
    }
    Signature::new(b)
}

fn mutate_chain(c: &mut Digest, m: Mutation, rng: &mut dyn RngCore) {
    mutate_bytes(&mut c.0, m, rng);
}

/// Applies one mutation to one RREQ field. The result may equal the input
/// (for example swapping two equal entries); callers that need a change
/// compare.
pub fn mutate_rreq(r: &RouteRequest, field: Field, m: Mutation, rng: &mut dyn RngCore) -> RouteRequest {
    let mut r = r.clone();
    match field {
        Field::Source => r.source = mutate_node(r.source, r.dest, m),
        Field::Dest => r.dest = mutate_node(r.dest, r.source, m),
        Field::Seq => r.seq = mutate_u64(r.seq, m),
        Field::Lifetime => {
            r.lifetime = match m {
                Mutation::Swap => r.lifetime.swap_bytes(),
                _ => mutate_u64(r.lifetime as u64, m) as u32,
            }
        }
        Field::Route => mutate_list(&mut r.route, m, rng, PHANTOM, |n| NodeId(n.0 ^ 1)),
        Field::Chain | Field::Payload => mutate_chain(&mut r.chain, m, rng),
        Field::Sig => mutate_list(&mut r.signatures, m, rng, Signature::new(vec![0; 8]), flip_sig),
    }
    r
}

pub fn mutate_rrep(r: &RouteReply, field: Field, m: Mutation, rng: &mut dyn RngCore) -> RouteReply {
    let mut r = r.clone();
    match field {
        Field::Source => r.source = mutate_node(r.source, r.dest, m),
        Field::Dest => r.dest = mutate_node(r.dest, r.source, m),
        Field::Seq | Field::Lifetime => r.seq = mutate_u64(r.seq, m),
        Field::Route => mutate_list(&mut r.route, m, rng, PHANTOM, |n| NodeId(n.0 ^ 1)),
        Field::Chain | Field::Payload => mutate_chain(&mut r.chain, m, rng),
        Field::Sig => mutate_list(&mut r.signatures, m, rng, Signature::new(vec![0; 8]), flip_sig),
    }
    r
}

/// Tampers with any message. Routing messages are mutated field by field;
/// other messages have their ciphertext (`payload`) or signature (`sig`)
/// altered and are otherwise passed through unchanged.
pub fn mutate_message(msg: &Message, field: Field, m: Mutation, rng: &mut dyn RngCore) -> Message {
    match msg {
        Message::Rreq(r) => Message::Rreq(mutate_rreq(r, field, m, rng)),
        Message::Rrep(r) => Message::Rrep(mutate_rrep(r, field, m, rng)),
        _ => {
            let mut out = msg.clone();
            match field {
                Field::Payload => {
                    if let Some(b) = sealed_mut(&mut out) {
                        mutate_bytes(b, m, rng);
                    }
                }
                Field::Sig => {
                    if let Some(s) = sig_mut(&mut out) {
                        mutate_bytes(&mut s.bytes, m, rng);
                    }
                }
                _ => {}
            }
            out
        }
    }
}

fn sealed_mut(msg: &mut Message) -> Option<&mut Vec<u8>> {
    match msg {
        Message::Admit { sealed, .. }
        | Message::Nonce { sealed, .. }
        | Message::MemberSet { sealed, .. }
        | Message::Rekey { sealed, .. }
        | Message::Session1 { sealed, .. }
        | Message::Session2 { sealed, .. }
        | Message::Session3 { sealed, .. }
        | Message::Session4 { sealed, .. }
        | Message::GroupData { sealed, .. }
        | Message::Data { sealed, .. }
        | Message::RingRreq { sealed, .. }
        | Message::RingRrep { sealed, .. } => Some(sealed),
        _ => None,
    }
}

fn sig_mut(msg: &mut Message) -> Option<&mut Signature> {
    match msg {
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

/// Draws a mutation that changes `r`, trying up to 64 combinations.
pub fn random_rreq_mutation(r: &RouteRequest, rng: &mut dyn RngCore) -> Option<(Field, Mutation, RouteRequest)> {
    for _ in 0..64 {
        let f = Field::ALL[rng.gen_range(0..Field::ALL.len())];
        let m = Mutation::ALL[rng.gen_range(0..Mutation::ALL.len())];
        let out = mutate_rreq(r, f, m, rng);
        if out != *r {
            return Some((f, m, out));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{CryptoProvider, TestDouble};
    use crate::routing::make_rreq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rreq() -> RouteRequest {
        let p = TestDouble;
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = p.generate_keypair(&mut rng);
        let mut r = make_rreq(&p, &kp.private, NodeId(1), NodeId(5), 3, 8).unwrap();
        r.route.push(NodeId(2));
        r.signatures.push(Signature::new(vec![7; 8]));
        r
    }

    #[test]
    fn every_field_mutation_pair_can_change_a_request() {
        let r = rreq();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for f in Field::ALL {
            for m in Mutation::ALL {
                let changed = (0..16).any(|_| mutate_rreq(&r, f, m, &mut rng) != r);
                assert!(changed, "{f:?} {m:?}");
            }
        }
    }

    #[test]
    fn mutation_touches_only_its_field() {
        let r = rreq();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let out = mutate_rreq(&r, Field::Lifetime, Mutation::Dec, &mut rng);
        assert_eq!(out.lifetime, r.lifetime - 1);
        assert_eq!(
            (out.route.clone(), out.chain.clone()),
            (r.route.clone(), r.chain.clone())
        );
        let out = mutate_rreq(&r, Field::Route, Mutation::Swap, &mut rng);
        assert_eq!(out.route, vec![NodeId(2), NodeId(1)]);
    }

    #[test]
    fn generic_payload_mutation() {
        let msg = Message::GroupData {
            group: crate::ids::GroupId(1),
            sender: NodeId(1),
            wrap: crate::keymgmt::KeyId::Ring { round: 1 },
            sealed: vec![1, 2, 3],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let out = mutate_message(&msg, Field::Payload, Mutation::Flip, &mut rng);
        assert_ne!(out, msg);
        assert_eq!(mutate_message(&msg, Field::Seq, Mutation::Flip, &mut rng), msg);
    }

    #[test]
    fn random_mutation_always_changes() {
        let r = rreq();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (_, _, out) = random_rreq_mutation(&r, &mut rng).unwrap();
            assert_ne!(out, r);
        }
    }
}
