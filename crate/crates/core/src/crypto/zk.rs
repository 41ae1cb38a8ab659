//! Quadratic-residue challenge-response identification.
//!
//! The prover publishes `N = p*q` and `V = S^2 mod N`. One round:
//! the prover commits `X = R^2 mod N`, the verifier picks a challenge `c`,
//! the prover answers `Y = R * S^c mod N`, and the verifier accepts iff
//! `Y^2 = X * V^c (mod N)`.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::One;
use rand::RngCore;
use thiserror::Error;

use super::arith::{is_probable_prime, mod_inverse, random_below, random_between, random_prime};
use super::CryptoError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZkPublicParams {
    pub n: BigUint,
    pub v: BigUint,
}

/// The prover's secret record. Never serialised into messages.
#[derive(Clone, PartialEq, Eq)]
pub struct ZkSecret {
    pub s: BigUint,
    pub n: BigUint,
}

impl std::fmt::Debug for ZkSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ZkSecret(..)")
    }
}

/// Challenge distribution: uniform over `[0, 2^bits)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChallengeSpace {
    bits: u32,
}

impl Default for ChallengeSpace {
    fn default() -> Self {
        Self { bits: 64 }
    }
}

impl ChallengeSpace {
    /// `bits` in `1..=64`.
    pub fn new(bits: u32) -> Option<Self> {
        (1..=64).contains(&bits).then_some(Self { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> u64 {
        let v = rng.next_u64();
        if self.bits == 64 {
            v
        } else {
            v & ((1u64 << self.bits) - 1)
        }
    }
}

pub fn zk_setup(p: &BigUint, q: &BigUint, s: &BigUint) -> Result<(ZkPublicParams, ZkSecret), CryptoError> {
    if p == q {
        return Err(CryptoError::EqualPrimes);
    }
    if !is_probable_prime(p) {
        return Err(CryptoError::NotPrime("p"));
    }
    if !is_probable_prime(q) {
        return Err(CryptoError::NotPrime("q"));
    }
    let n = p * q;
    // gcd(S, N) > 1 would reveal a factor of N.
    if s <= &BigUint::one() || s >= &n || !s.gcd(&n).is_one() {
        return Err(CryptoError::SecretOutOfRange);
    }
    let v = s.modpow(&BigUint::from(2u32), &n);
    Ok((ZkPublicParams { n: n.clone(), v }, ZkSecret { s: s.clone(), n }))
}

/// Fresh prover parameters with two distinct `prime_bits`-bit primes.
pub fn zk_generate(rng: &mut dyn RngCore, prime_bits: u64) -> (ZkPublicParams, ZkSecret) {
    loop {
        let p = random_prime(rng, prime_bits);
        let q = random_prime(rng, prime_bits);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let s = random_between(rng, &BigUint::one(), &n);
        if let Ok(out) = zk_setup(&p, &q, &s) {
            return out;
        }
    }
}

/// `X = R^2 mod N` for an explicit ephemeral `R`.
pub fn zk_commit_with(r: &BigUint, n: &BigUint) -> BigUint {
    r.modpow(&BigUint::from(2u32), n)
}

/// Draws `1 < R < N` and returns `(X, R)`.
pub fn zk_commit(rng: &mut dyn RngCore, n: &BigUint) -> (BigUint, BigUint) {
    let r = random_between(rng, &BigUint::one(), n);
    (zk_commit_with(&r, n), r)
}

/// `Y = R * S^c mod N`.
pub fn zk_respond(r: &BigUint, s: &BigUint, c: u64, n: &BigUint) -> BigUint {
    (r * s.modpow(&BigUint::from(c), n)) % n
}

/// `Y^2 mod N == X * V^c mod N`.
pub fn zk_verify(x: &BigUint, v: &BigUint, c: u64, y: &BigUint, n: &BigUint) -> bool {
    if n <= &BigUint::one() {
        return false;
    }
    let lhs = y.modpow(&BigUint::from(2u32), n);
    let rhs = (x * v.modpow(&BigUint::from(c), n)) % n;
    lhs == rhs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ZkPhase {
    Committed,
    Challenged,
    Responded,
    Verified,
    Failed,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("zk session is {actual:?}, operation needs {needed:?}")]
pub struct ZkPhaseError {
    pub actual: ZkPhase,
    pub needed: ZkPhase,
}

/// Verifier-side record of one challenge-response round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZkSession {
    pub params: ZkPublicParams,
    pub x: BigUint,
    pub c: u64,
    pub y: BigUint,
    phase: ZkPhase,
}

impl ZkSession {
    pub fn committed(params: ZkPublicParams, x: BigUint) -> Self {
        Self {
            params,
            x,
            c: 0,
            y: BigUint::default(),
            phase: ZkPhase::Committed,
        }
    }

    pub fn phase(&self) -> ZkPhase {
        self.phase
    }

    fn expect(&self, needed: ZkPhase) -> Result<(), ZkPhaseError> {
        if self.phase == needed {
            Ok(())
        } else {
            Err(ZkPhaseError {
                actual: self.phase,
                needed,
            })
        }
    }

    pub fn challenge(&mut self, c: u64) -> Result<(), ZkPhaseError> {
        self.expect(ZkPhase::Committed)?;
        self.c = c;
        self.phase = ZkPhase::Challenged;
        Ok(())
    }

    pub fn respond(&mut self, y: BigUint) -> Result<(), ZkPhaseError> {
        self.expect(ZkPhase::Challenged)?;
        self.y = y;
        self.phase = ZkPhase::Responded;
        Ok(())
    }

    /// Runs the check and moves to `Verified` or `Failed`.
    pub fn verify(&mut self) -> Result<bool, ZkPhaseError> {
        self.expect(ZkPhase::Responded)?;
        let ok = zk_verify(&self.x, &self.params.v, self.c, &self.y, &self.params.n);
        self.phase = if ok { ZkPhase::Verified } else { ZkPhase::Failed };
        Ok(ok)
    }
}

/// A prover that does not know `S` but knows the public `(N, V)`.
///
/// It guesses the challenge `c'`, picks `Y` at random and commits
/// `X = Y^2 * V^(-c') mod N`, so it passes exactly when the verifier draws
/// `c = c'`.
#[derive(Clone, Debug)]
pub struct Impostor {
    pub guess: u64,
    pub x: BigUint,
    pub y: BigUint,
}

impl Impostor {
    pub fn commit(rng: &mut dyn RngCore, params: &ZkPublicParams, space: ChallengeSpace) -> Self {
        let guess = space.sample(rng);
        let y = random_between(rng, &BigUint::one(), &params.n);
        let x = match mod_inverse(&params.v, &params.n) {
            Some(v_inv) => {
                (y.modpow(&BigUint::from(2u32), &params.n) * v_inv.modpow(&BigUint::from(guess), &params.n)) % &params.n
            }
            None => random_below(rng, &params.n),
        };
        Self { guess, x, y }
    }

    pub fn respond(&self, _challenge: u64) -> BigUint {
        self.y.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn b(v: u64) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn setup_example() {
        let (params, secret) = zk_setup(&b(3), &b(7), &b(2)).unwrap();
        assert_eq!(params.n, b(21));
        assert_eq!(params.v, b(4));
        assert_eq!(secret.s, b(2));
    }

    #[test]
    fn setup_errors() {
        assert_eq!(zk_setup(&b(7), &b(7), &b(2)), Err(CryptoError::EqualPrimes));
        assert_eq!(zk_setup(&b(3), &b(7), &b(1)), Err(CryptoError::SecretOutOfRange));
        assert_eq!(zk_setup(&b(3), &b(7), &b(21)), Err(CryptoError::SecretOutOfRange));
        assert_eq!(zk_setup(&b(4), &b(7), &b(2)), Err(CryptoError::NotPrime("p")));
        assert_eq!(zk_setup(&b(3), &b(9), &b(2)), Err(CryptoError::NotPrime("q")));
    }

    #[test]
    fn commit_examples() {
        assert_eq!(zk_commit_with(&b(5), &b(21)), b(4));
        assert_eq!(zk_commit_with(&b(20), &b(21)), b(1));
    }

    #[test]
    fn commit_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let (x, r) = zk_commit(&mut rng, &b(21));
            assert!(r > b(1) && r < b(21));
            assert_eq!(x, (&r * &r) % b(21));
        }
    }

    #[test]
    fn respond_examples() {
        assert_eq!(zk_respond(&b(5), &b(2), 0, &b(21)), b(5));
        assert_eq!(zk_respond(&b(5), &b(2), 1, &b(21)), b(10));
        assert_eq!(zk_respond(&b(5), &b(2), 3, &b(21)), b(19));
    }

    #[test]
    fn verify_examples() {
        assert!(zk_verify(&b(4), &b(4), 1, &b(10), &b(21)));
        assert!(zk_verify(&b(4), &b(4), 3, &b(19), &b(21)));
        // 81 mod 21 = 18, X*V = 16.
        assert!(!zk_verify(&b(4), &b(4), 1, &b(9), &b(21)));
        // 11^2 = 121 = 5*21 + 16, so Y = 11 also satisfies the c = 1 relation.
        assert!(zk_verify(&b(4), &b(4), 1, &b(11), &b(21)));
    }

    #[test]
    fn session_phases_only_move_forward() {
        let (params, secret) = zk_setup(&b(3), &b(7), &b(2)).unwrap();
        let mut s = ZkSession::committed(params, b(4));
        assert!(s.respond(b(10)).is_err());
        assert!(s.verify().is_err());
        s.challenge(1).unwrap();
        assert!(s.challenge(1).is_err());
        s.respond(zk_respond(&b(5), &secret.s, 1, &secret.n)).unwrap();
        assert!(s.verify().unwrap());
        assert_eq!(s.phase(), ZkPhase::Verified);
        assert!(s.verify().is_err());
    }

    #[test]
    fn failed_session() {
        let (params, _) = zk_setup(&b(3), &b(7), &b(2)).unwrap();
        let mut s = ZkSession::committed(params, b(4));
        s.challenge(1).unwrap();
        s.respond(b(9)).unwrap();
        assert!(!s.verify().unwrap());
        assert_eq!(s.phase(), ZkPhase::Failed);
    }

    #[test]
    fn challenge_space_bounds() {
        assert!(ChallengeSpace::new(0).is_none());
        assert!(ChallengeSpace::new(65).is_none());
        let one = ChallengeSpace::new(1).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert!((0..200).all(|_| one.sample(&mut rng) <= 1));
    }
}
