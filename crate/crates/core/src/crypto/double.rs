use rand::RngCore;
use sha2::{Digest as _, Sha256};

use super::{
    CryptoError, CryptoProvider, Digest, KeyPair, PrivateKey, ProviderKind, PublicKey, Signature, SymmetricKey,
};

/// Safe prime `P = 2Q + 1` just below 2^64.
const P: u64 = 0xffff_ffff_ffff_fa43;
/// Prime order of the quadratic-residue subgroup.
const Q: u64 = (P - 1) / 2;
/// 4 = 2^2 is a quadratic residue other than 1, so it generates the order-Q subgroup.
const G: u64 = 4;

const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const DIGEST_LEN: usize = 16;

/// Deterministic, fast provider for simulation and tests.
///
/// * `hash`: SHA-256 truncated to 128 bits.
/// * signatures: Schnorr over the order-`Q` subgroup mod `P`, with the nonce
///   derived from the private key and message.
/// * `pk_encrypt`: hashed ElGamal key encapsulation wrapping a symmetric
///   ciphertext, so payload length is unbounded.
/// * `sym_encrypt`: SHA-256 counter-mode keystream, 128-bit SHA-256 tag over
///   nonce and ciphertext.
#[derive(Clone, Copy, Debug, Default)]
pub struct TestDouble;

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

fn hash_to_scalar(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_be_bytes());
        h.update(p);
    }
    let d = h.finalize();
    let v = u64::from_be_bytes(d[..8].try_into().unwrap()) % Q;
    if v == 0 {
        1
    } else {
        v
    }
}

fn read_u64(bytes: &[u8]) -> Option<u64> {
    bytes.try_into().ok().map(u64::from_be_bytes)
}

fn private_scalar(k: &PrivateKey) -> Result<u64, CryptoError> {
    match read_u64(&k.0) {
        Some(x) if x > 0 && x < Q => Ok(x),
        _ => Err(CryptoError::MalformedKey),
    }
}

fn public_element(k: &PublicKey) -> Option<u64> {
    read_u64(&k.0).filter(|&y| y > 1 && y < P)
}

fn keystream_xor(key: &[u8; 32], nonce: &[u8], data: &mut [u8]) {
    for (i, chunk) in data.chunks_mut(32).enumerate() {
        let mut h = Sha256::new();
        h.update(b"td-stream");
        h.update(key);
        h.update(nonce);
        h.update((i as u64).to_be_bytes());
        let block = h.finalize();
        for (b, k) in chunk.iter_mut().zip(block.iter()) {
            *b ^= k;
        }
    }
}

fn tag(key: &[u8; 32], nonce: &[u8], body: &[u8]) -> [u8; TAG_LEN] {
    let mut h = Sha256::new();
    h.update(b"td-tag");
    h.update(key);
    h.update(nonce);
    h.update(body);
    h.finalize()[..TAG_LEN].try_into().unwrap()
}

fn kem_key(shared: u64, ephemeral: u64, recipient: u64) -> SymmetricKey {
    let mut m = Vec::with_capacity(24);
    m.extend_from_slice(&shared.to_be_bytes());
    m.extend_from_slice(&ephemeral.to_be_bytes());
    m.extend_from_slice(&recipient.to_be_bytes());
    SymmetricKey::derive(super::KeyKind::Session, &m)
}

fn random_scalar(rng: &mut dyn RngCore) -> u64 {
    loop {
        let v = rng.next_u64() >> 1;
        if v > 0 && v < Q {
            return v;
        }
    }
}

impl CryptoProvider for TestDouble {
    fn kind(&self) -> ProviderKind {
        ProviderKind::TestDouble
    }

    fn digest_len(&self) -> usize {
        DIGEST_LEN
    }

    fn hash(&self, data: &[u8]) -> Digest {
        Digest(Sha256::digest(data)[..DIGEST_LEN].to_vec())
    }

    fn generate_keypair(&self, rng: &mut dyn RngCore) -> KeyPair {
        let x = random_scalar(rng);
        let y = pow_mod(G, x, P);
        KeyPair {
            public: PublicKey(y.to_be_bytes().to_vec()),
            private: PrivateKey(x.to_be_bytes().to_vec()),
        }
    }

    fn sign(&self, private: &PrivateKey, data: &[u8]) -> Result<Signature, CryptoError> {
        let x = private_scalar(private)?;
        let y = pow_mod(G, x, P);
        let k = hash_to_scalar(&[b"td-nonce", &x.to_be_bytes(), data]);
        let r = pow_mod(G, k, P);
        let e = hash_to_scalar(&[b"td-chal", &r.to_be_bytes(), &y.to_be_bytes(), data]);
        let s = ((k as u128 + mul_mod(x, e, Q) as u128) % Q as u128) as u64;
        let mut bytes = r.to_be_bytes().to_vec();
        bytes.extend_from_slice(&s.to_be_bytes());
        Ok(Signature::new(bytes))
    }

    fn verify(&self, public: &PublicKey, data: &[u8], sig: &Signature) -> bool {
        let Some(y) = public_element(public) else {
            return false;
        };
        if sig.bytes.len() != 16 {
            return false;
        }
        let r = read_u64(&sig.bytes[..8]).unwrap();
        let s = read_u64(&sig.bytes[8..]).unwrap();
        if r == 0 || r >= P || s >= Q {
            return false;
        }
        let e = hash_to_scalar(&[b"td-chal", &r.to_be_bytes(), &y.to_be_bytes(), data]);
        pow_mod(G, s, P) == mul_mod(r, pow_mod(y, e, P), P)
    }

    fn pk_encrypt(&self, public: &PublicKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Result<Vec<u8>, CryptoError> {
        let y = public_element(public).ok_or(CryptoError::MalformedKey)?;
        let k = random_scalar(rng);
        let eph = pow_mod(G, k, P);
        let shared = pow_mod(y, k, P);
        let key = kem_key(shared, eph, y);
        let mut out = eph.to_be_bytes().to_vec();
        out.extend(self.sym_encrypt(&key, plaintext, rng));
        Ok(out)
    }

    fn pk_decrypt(&self, private: &PrivateKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let x = private_scalar(private)?;
        if ciphertext.len() < 8 {
            return Err(CryptoError::Malformed);
        }
        let eph = read_u64(&ciphertext[..8]).unwrap();
        if eph <= 1 || eph >= P {
            return Err(CryptoError::Malformed);
        }
        let shared = pow_mod(eph, x, P);
        let key = kem_key(shared, eph, pow_mod(G, x, P));
        self.sym_decrypt(&key, &ciphertext[8..])
    }

    fn sym_encrypt(&self, key: &SymmetricKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let mut body = plaintext.to_vec();
        keystream_xor(&key.bytes, &nonce, &mut body);
        let t = tag(&key.bytes, &nonce, &body);
        let mut out = Vec::with_capacity(NONCE_LEN + body.len() + TAG_LEN);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&body);
        out.extend_from_slice(&t);
        out
    }

    fn sym_decrypt(&self, key: &SymmetricKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < NONCE_LEN + TAG_LEN {
            return Err(CryptoError::Malformed);
        }
        let (nonce, rest) = ciphertext.split_at(NONCE_LEN);
        let (body, t) = rest.split_at(rest.len() - TAG_LEN);
        if tag(&key.bytes, nonce, body) != t {
            return Err(CryptoError::Authentication);
        }
        let mut pt = body.to_vec();
        keystream_xor(&key.bytes, nonce, &mut pt);
        Ok(pt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_constants() {
        assert_eq!(P, 2 * Q + 1);
        assert_eq!(pow_mod(G, Q, P), 1);
        assert_ne!(G % P, 1);
    }

    #[test]
    fn pow_mod_small() {
        assert_eq!(pow_mod(5, 2, 21), 4);
        assert_eq!(pow_mod(2, 3, 21), 8);
        assert_eq!(pow_mod(5, 0, 21), 1);
    }
}
