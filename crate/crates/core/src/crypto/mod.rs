//! Cryptographic primitives behind a provider interface.
//!
//! Two providers implement [`CryptoProvider`]:
//!
//! * [`TestDouble`] – deterministic and fast. Schnorr signatures and hashed
//!   ElGamal over a 64-bit safe-prime group, a SHA-256 keystream with a
//!   truncated SHA-256 tag for symmetric encryption, and a 128-bit truncated
//!   SHA-256 digest. Sound enough that forgeries never occur in tests, far too
//!   small for real use.
//! * [`RealCrypto`] – SHA-256, Ed25519, X25519 + ChaCha20-Poly1305 hybrid
//!   public-key encryption, ChaCha20-Poly1305 symmetric encryption.
//!
//! Every randomised operation takes its random source explicitly, so a run
//! seeded from one RNG is bit-reproducible under either provider.

pub mod arith;
pub mod dh;
mod double;
pub mod encoding;
mod real;
pub mod zk;

use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use sha2::{Digest as _, Sha256, Sha512};
use thiserror::Error;

pub use double::TestDouble;
pub use real::RealCrypto;

/// Length of every symmetric key, in bytes.
pub const SYM_KEY_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed key material")]
    MalformedKey,
    #[error("malformed ciphertext")]
    Malformed,
    #[error("authentication failed")]
    Authentication,
    #[error("modulus must be greater than one")]
    BadModulus,
    #[error("{0} is not prime")]
    NotPrime(&'static str),
    #[error("p and q must be distinct")]
    EqualPrimes,
    #[error("secret out of range")]
    SecretOutOfRange,
    #[error("degenerate group element")]
    Degenerate,
    #[error("generator out of range")]
    BadGenerator,
}

/// A hash output. Length is fixed per provider.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub Vec<u8>);

impl Digest {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub Vec<u8>);

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrivateKey(pub Vec<u8>);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0))
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Signature {
    pub bytes: Vec<u8>,
    /// Claimed signer; not covered by the signature and not transmitted.
    pub signer_hint: Option<crate::NodeId>,
}

impl Signature {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self {
            bytes,
            signer_hint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyKind {
    Group,
    Member,
    LeaderRing,
    Session,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SymmetricKey {
    pub bytes: [u8; SYM_KEY_LEN],
    pub kind: KeyKind,
}

impl SymmetricKey {
    pub fn new(kind: KeyKind, bytes: [u8; SYM_KEY_LEN]) -> Self {
        Self { bytes, kind }
    }

    pub fn random(kind: KeyKind, rng: &mut dyn RngCore) -> Self {
        let mut bytes = [0u8; SYM_KEY_LEN];
        rng.fill_bytes(&mut bytes);
        Self { bytes, kind }
    }

    /// Builds a key from arbitrary-length material by hashing it.
    pub fn derive(kind: KeyKind, material: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(b"manet-kdf");
        h.update(material);
        Self {
            bytes: h.finalize().into(),
            kind,
        }
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymmetricKey({:?}, {}..)", self.kind, hex::encode(&self.bytes[..4]))
    }
}

/// Hash function a leader selects for member-key derivation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HashFn {
    #[default]
    Sha256,
    Sha512,
}

impl HashFn {
    pub fn digest(self, data: &[u8]) -> Vec<u8> {
        match self {
            HashFn::Sha256 => Sha256::digest(data).to_vec(),
            HashFn::Sha512 => Sha512::digest(data).to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ProviderKind {
    #[default]
    TestDouble,
    Real,
}

impl ProviderKind {
    pub fn name(self) -> &'static str {
        match self {
            ProviderKind::TestDouble => "test",
            ProviderKind::Real => "real",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "test" | "test_double" => Some(ProviderKind::TestDouble),
            "real" | "real_crypto" => Some(ProviderKind::Real),
            _ => None,
        }
    }

    pub fn build(self) -> Arc<dyn CryptoProvider> {
        match self {
            ProviderKind::TestDouble => Arc::new(TestDouble),
            ProviderKind::Real => Arc::new(RealCrypto),
        }
    }
}

/// Primitive operations used by every protocol in the crate.
///
/// Implementations hold no state; all randomness comes from the `rng`
/// argument.
pub trait CryptoProvider: Send + Sync + fmt::Debug {
    fn kind(&self) -> ProviderKind;

    fn digest_len(&self) -> usize;

    fn hash(&self, data: &[u8]) -> Digest;

    fn generate_keypair(&self, rng: &mut dyn RngCore) -> KeyPair;

    fn sign(&self, private: &PrivateKey, data: &[u8]) -> Result<Signature, CryptoError>;

    /// Malformed keys or signatures verify as `false`.
    fn verify(&self, public: &PublicKey, data: &[u8], sig: &Signature) -> bool;

    fn pk_encrypt(&self, public: &PublicKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Result<Vec<u8>, CryptoError>;

    fn pk_decrypt(&self, private: &PrivateKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError>;

    fn sym_encrypt(&self, key: &SymmetricKey, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8>;

    /// Distinguishes [`CryptoError::Malformed`] (structurally invalid input)
    /// from [`CryptoError::Authentication`] (wrong key or tampering).
    fn sym_decrypt(&self, key: &SymmetricKey, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError>;
}
