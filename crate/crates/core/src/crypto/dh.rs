//! Finite-field Diffie-Hellman and the serialized ring agreement used by
//! group leaders.
//!
//! The ring runs in two passes over leaders ordered by identifier. On the way
//! up, party `i` receives the partial values `g^(x_1..x_{i-1} / x_j)` for every
//! earlier `j` plus the running cardinal `g^(x_1..x_{i-1})`, raises every
//! partial to `x_i`, appends the received cardinal (which lacks only `x_i`) and
//! forwards the new cardinal. The last party raises the cardinal to get the
//! key, raises each partial once more and broadcasts them; party `j` finishes
//! by raising its own entry to `x_j`.

use num_bigint::BigUint;
use num_traits::One;
use rand::RngCore;

use super::arith::{is_probable_prime, random_between};
use super::{CryptoError, KeyKind, SymmetricKey};

/// RFC 3526 1536-bit MODP group prime.
const MODP_1536: &str = "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74\
020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437\
4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05\
98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB\
9ED529077096966D670C354E4ABC9804F1746C08CA237327FFFFFFFFFFFFFFFF";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DhGroup {
    pub generator: BigUint,
    pub modulus: BigUint,
}

impl DhGroup {
    /// Validates `modulus` prime and `1 < generator < modulus`.
    pub fn new(generator: BigUint, modulus: BigUint) -> Result<Self, CryptoError> {
        if modulus <= BigUint::one() {
            return Err(CryptoError::BadModulus);
        }
        if !is_probable_prime(&modulus) {
            return Err(CryptoError::NotPrime("modulus"));
        }
        if generator <= BigUint::one() || generator >= modulus {
            return Err(CryptoError::BadGenerator);
        }
        Ok(Self { generator, modulus })
    }

    /// The 1536-bit MODP group with generator 2.
    pub fn modp_1536() -> Self {
        Self {
            generator: BigUint::from(2u32),
            modulus: BigUint::parse_bytes(MODP_1536.as_bytes(), 16).unwrap(),
        }
    }

    pub fn random_secret(&self, rng: &mut dyn RngCore) -> BigUint {
        random_between(rng, &BigUint::one(), &(&self.modulus - 1u32))
    }

    /// `accumulated^own_secret mod p`.
    pub fn contribute(&self, own_secret: &BigUint, accumulated: &BigUint) -> Result<BigUint, CryptoError> {
        dh_contribute(&self.generator, &self.modulus, own_secret, accumulated)
    }
}

/// `accumulated^own_secret mod modulus`; rejects the degenerate values 0 and 1
/// and an out-of-range generator.
pub fn dh_contribute(
    generator: &BigUint,
    modulus: &BigUint,
    own_secret: &BigUint,
    accumulated: &BigUint,
) -> Result<BigUint, CryptoError> {
    if modulus <= &BigUint::one() {
        return Err(CryptoError::BadModulus);
    }
    if generator <= &BigUint::one() || generator >= modulus {
        return Err(CryptoError::BadGenerator);
    }
    let acc = accumulated % modulus;
    if acc <= BigUint::one() {
        return Err(CryptoError::Degenerate);
    }
    Ok(acc.modpow(own_secret, modulus))
}

/// Values carried by an upflow message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Upflow {
    pub partials: Vec<BigUint>,
    pub cardinal: BigUint,
}

impl Upflow {
    pub fn start(group: &DhGroup) -> Self {
        Self {
            partials: Vec::new(),
            cardinal: group.generator.clone(),
        }
    }
}

/// Step of a non-final party: returns the upflow to forward.
pub fn upflow_step(group: &DhGroup, secret: &BigUint, incoming: &Upflow) -> Result<Upflow, CryptoError> {
    let mut partials = incoming
        .partials
        .iter()
        .map(|p| group.contribute(secret, p))
        .collect::<Result<Vec<_>, _>>()?;
    partials.push(incoming.cardinal.clone());
    Ok(Upflow {
        partials,
        cardinal: group.contribute(secret, &incoming.cardinal)?,
    })
}

/// Step of the last party: returns its shared value and the broadcast list,
/// whose entry `j` lets party `j` finish.
pub fn final_step(
    group: &DhGroup,
    secret: &BigUint,
    incoming: &Upflow,
) -> Result<(BigUint, Vec<BigUint>), CryptoError> {
    let shared = group.contribute(secret, &incoming.cardinal)?;
    let broadcast = incoming
        .partials
        .iter()
        .map(|p| group.contribute(secret, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((shared, broadcast))
}

/// Party `index` finishing from the broadcast list.
pub fn finish(group: &DhGroup, secret: &BigUint, broadcast: &[BigUint], index: usize) -> Result<BigUint, CryptoError> {
    let entry = broadcast.get(index).ok_or(CryptoError::Degenerate)?;
    group.contribute(secret, entry)
}

/// Turns the shared group element into the leader-ring symmetric key.
pub fn ring_key(shared: &BigUint) -> SymmetricKey {
    SymmetricKey::derive(KeyKind::LeaderRing, &shared.to_bytes_be())
}

/// Runs the whole ring in-process; returns the shared value each party derives.
pub fn ring_values(group: &DhGroup, secrets: &[BigUint]) -> Result<Vec<BigUint>, CryptoError> {
    let Some((last, rest)) = secrets.split_last() else {
        return Ok(Vec::new());
    };
    let mut flow = Upflow::start(group);
    for s in rest {
        flow = upflow_step(group, s, &flow)?;
    }
    let (last_value, broadcast) = final_step(group, last, &flow)?;
    let mut out = rest
        .iter()
        .enumerate()
        .map(|(i, s)| finish(group, s, &broadcast, i))
        .collect::<Result<Vec<_>, _>>()?;
    out.push(last_value);
    Ok(out)
}

/// Ring agreement with fresh secrets; returns each party's key (all equal).
pub fn leader_ring_agree(
    group: &DhGroup,
    parties: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<SymmetricKey>, CryptoError> {
    let secrets: Vec<BigUint> = (0..parties).map(|_| group.random_secret(rng)).collect();
    Ok(ring_values(group, &secrets)?.iter().map(ring_key).collect())
}
