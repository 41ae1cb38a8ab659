use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::RngCore;
use sha2::{Digest as _, Sha256};
use x25519_dalek::{PublicKey as XPublic, StaticSecret};

use super::{
    CryptoError, CryptoProvider, Digest, KeyKind, KeyPair, PrivateKey, ProviderKind, PublicKey, Signature, SymmetricKey,
};

const NONCE_LEN: usize = 12;

/// SHA-256, Ed25519, and X25519/ChaCha20-Poly1305.
///
/// Key layout: public = Ed25519 verifying key || X25519 public key,
/// private = Ed25519 seed || X25519 secret (32 bytes each).
#[derive(Clone, Copy, Debug, Default)]
pub struct RealCrypto;

fn split32(bytes: &[u8]) -> Option<([u8; 32], [u8; 32])> {
    if bytes.len() != 64 {
        return None;
    }
    Some((bytes[..32].try_into().unwrap(), bytes[32..].try_into().unwrap()))
}

fn kem_key(shared: &[u8], eph: &[u8], recipient: &[u8]) -> SymmetricKey {
    let mut m = Vec::with_capacity(96);
    m.extend_from_slice(shared);
    m.extend_from_slice(eph);
    m.extend_from_slice(recipient);
    SymmetricKey::derive(KeyKind::Session, &m)
}

fn seal(key: &SymmetricKey, nonce: &[u8; NONCE_LEN], pt: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.bytes));
    cipher
        .encrypt(Nonce::from_slice(nonce), pt)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers")
}

impl CryptoProvider for RealCrypto {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Real
    }

    fn digest_len(&self) -> usize {
        32
    }

    fn hash(&self, data: &[u8]) -> Digest {
        Digest(Sha256::digest(data).to_vec())
    }

    fn generate_keypair(&self, rng: &mut dyn RngCore) -> KeyPair {
        let mut seed = [0u8; 32];
        let mut xs = [0u8; 32];
        rng.fill_bytes(&mut seed);
        rng.fill_bytes(&mut xs);
        let sk = SigningKey::from_bytes(&seed);
        let xsec = StaticSecret::from(xs);
        let xpub = XPublic::from(&xsec);
        let mut public = sk.verifying_key().to_bytes().to_vec();
        public.extend_from_slice(xpub.as_bytes());
        let mut private = seed.to_vec();
        private.extend_from_slice(&xs);
        KeyPair {
            public: PublicKey(public),
            private: PrivateKey(private),
        }
    }

    fn sign(&self, private: &PrivateKey, data: &[u8]) -> Result<Signature, CryptoError> {
        let (seed, _) = split32(&private.0).ok_or(CryptoError::MalformedKey)?;
        let sk = SigningKey::from_bytes(&seed);
        Ok(Signature::new(sk.sign(data).to_bytes().to_vec()))
    }

    fn verify(&self, public: &PublicKey, data: &[u8], sig: &Signature) -> bool {
        let Some((ed, _)) = split32(&public.0) else {
            return false;
        };
        let Ok(vk) = VerifyingKey::from_bytes(&ed) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(&sig.bytes) else {
            return false;
        };
        vk.verify_strict(data, &sig).is_ok()
    }

    fn pk_encrypt(&self, public: &PublicKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Result<Vec<u8>, CryptoError> {
        let (_, xpub) = split32(&public.0).ok_or(CryptoError::MalformedKey)?;
        let mut eph = [0u8; 32];
        rng.fill_bytes(&mut eph);
        let eph = StaticSecret::from(eph);
        let eph_pub = XPublic::from(&eph);
        let shared = eph.diffie_hellman(&XPublic::from(xpub));
        let key = kem_key(shared.as_bytes(), eph_pub.as_bytes(), &xpub);
        // Fresh key per message, so a fixed nonce is safe.
        let mut out = eph_pub.as_bytes().to_vec();
        out.extend(seal(&key, &[0u8; NONCE_LEN], plaintext));
        Ok(out)
    }

    fn pk_decrypt(&self, private: &PrivateKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let (_, xs) = split32(&private.0).ok_or(CryptoError::MalformedKey)?;
        if ciphertext.len() < 32 + 16 {
            return Err(CryptoError::Malformed);
        }
        let eph_pub: [u8; 32] = ciphertext[..32].try_into().unwrap();
        let xsec = StaticSecret::from(xs);
        let own_pub = XPublic::from(&xsec);
        let shared = xsec.diffie_hellman(&XPublic::from(eph_pub));
        let key = kem_key(shared.as_bytes(), &eph_pub, own_pub.as_bytes());
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.bytes));
        cipher
            .decrypt(Nonce::from_slice(&[0u8; NONCE_LEN]), &ciphertext[32..])
            .map_err(|_| CryptoError::Authentication)
    }

    fn sym_encrypt(&self, key: &SymmetricKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let mut out = nonce.to_vec();
        out.extend(seal(key, &nonce, plaintext));
        out
    }

    fn sym_decrypt(&self, key: &SymmetricKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < NONCE_LEN + 16 {
            return Err(CryptoError::Malformed);
        }
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.bytes));
        cipher
            .decrypt(Nonce::from_slice(&ciphertext[..NONCE_LEN]), &ciphertext[NONCE_LEN..])
            .map_err(|_| CryptoError::Authentication)
    }
}
