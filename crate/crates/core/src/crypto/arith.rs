//! Arbitrary-precision modular arithmetic helpers.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use rand::RngCore;

use super::CryptoError;

/// `base^exp mod modulus`. Fails for `modulus <= 1`.
pub fn mod_pow(base: &BigUint, exp: &BigUint, modulus: &BigUint) -> Result<BigUint, CryptoError> {
    if modulus <= &BigUint::one() {
        return Err(CryptoError::BadModulus);
    }
    Ok(base.modpow(exp, modulus))
}

/// Multiplicative inverse of `a` modulo `m`, if it exists.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let m_int = BigInt::from(m.clone());
    let e = BigInt::from(a.clone()).extended_gcd(&m_int);
    if !e.gcd.is_one() {
        return None;
    }
    let mut x = e.x % &m_int;
    if x.is_negative() {
        x += &m_int;
    }
    x.to_biguint()
}

/// Uniform integer in `[0, bound)`, by rejection sampling on the bit length.
pub fn random_below(rng: &mut dyn RngCore, bound: &BigUint) -> BigUint {
    assert!(!bound.is_zero(), "empty range");
    let bits = bound.bits();
    let bytes = bits.div_ceil(8) as usize;
    let excess = (bytes as u64) * 8 - bits;
    let mut buf = vec![0u8; bytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xff >> excess;
        let v = BigUint::from_bytes_be(&buf);
        if &v < bound {
            return v;
        }
    }
}

/// Uniform integer in the open interval `(low, high)`.
pub fn random_between(rng: &mut dyn RngCore, low: &BigUint, high: &BigUint) -> BigUint {
    let span = high - low - 1u32;
    low + 1u32 + random_below(rng, &span)
}

const SMALL_PRIMES: [u32; 15] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47];

/// Miller-Rabin with the first 15 prime bases.
///
/// Deterministic for every `n < 3.3 * 10^24`, which covers all primes the
/// simulator generates; a strong probable-prime test above that.
pub fn is_probable_prime(n: &BigUint) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'bases: for &a in &SMALL_PRIMES {
        let mut x = BigUint::from(a).modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'bases;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits (top bit set).
pub fn random_prime(rng: &mut dyn RngCore, bits: u64) -> BigUint {
    assert!(bits >= 3, "prime too small");
    let bytes = bits.div_ceil(8) as usize;
    let excess = (bytes as u64) * 8 - bits;
    let mut buf = vec![0u8; bytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xff >> excess;
        buf[0] |= 0x80 >> excess;
        *buf.last_mut().unwrap() |= 1;
        let candidate = BigUint::from_bytes_be(&buf);
        if is_probable_prime(&candidate) {
            return candidate;
        }
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
    fn mod_pow_examples() {
        assert_eq!(mod_pow(&b(5), &b(0), &b(21)).unwrap(), b(1));
        assert_eq!(mod_pow(&b(5), &b(2), &b(21)).unwrap(), b(4));
        assert_eq!(mod_pow(&b(2), &b(3), &b(21)).unwrap(), b(8));
    }

    #[test]
    fn mod_pow_rejects_small_modulus() {
        assert_eq!(mod_pow(&b(5), &b(2), &b(1)), Err(CryptoError::BadModulus));
        assert_eq!(mod_pow(&b(5), &b(2), &b(0)), Err(CryptoError::BadModulus));
    }

    #[test]
    fn primality_matches_trial_division() {
        fn trial(n: u64) -> bool {
            n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d))
        }
        for n in 0..5000u64 {
            assert_eq!(is_probable_prime(&b(n)), trial(n), "n = {n}");
        }
        // Strong pseudoprime to bases 2, 3, 5, 7.
        assert!(!is_probable_prime(&b(3_215_031_751)));
        assert!(is_probable_prime(&b(0xffff_ffff_ffff_fa43)));
    }

    #[test]
    fn inverse() {
        assert_eq!(mod_inverse(&b(4), &b(21)), Some(b(16)));
        assert_eq!(mod_inverse(&b(3), &b(21)), None);
    }

    #[test]
    fn random_prime_has_requested_size() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for bits in [8u64, 17, 32, 61] {
            let p = random_prime(&mut rng, bits);
            assert_eq!(p.bits(), bits);
            assert!(is_probable_prime(&p));
        }
    }

    #[test]
    fn random_between_is_open_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..500 {
            let v = random_between(&mut rng, &b(1), &b(4));
            assert!(v == b(2) || v == b(3));
        }
    }
}
