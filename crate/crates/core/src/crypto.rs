//! Hashing, signatures and seeded randomness shared by every party.
//!
//! PCR and measurement-log hashing is SHA-1 ([`hash160`]). Certificate and
//! message bodies are signed with Ed25519 over a SHA-256 digest of their
//! canonical JSON encoding ([`signing_digest`]).

use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha1::Sha1;
use sha2::{Digest as _, Sha256};

/// Identifier recorded for the signature scheme in use.
pub const SCHEME_ID: &str = "ed25519";
/// Identifier recorded in certificates for the body digest.
pub const BODY_HASH_ID: &str = "sha256";

macro_rules! hex_newtype_serde {
    ($ty:ident, $len:expr) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.0))
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
                let arr: [u8; $len] = bytes
                    .try_into()
                    .map_err(|_| serde::de::Error::custom(concat!("expected ", stringify!($len), " bytes")))?;
                Ok($ty(arr))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }

        impl fmt::Debug for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($ty), hex::encode(self.0))
            }
        }
    };
}

/// A 160-bit digest: the width of a PCR.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest160(pub [u8; 20]);

hex_newtype_serde!(Digest160, 20);

impl Digest160 {
    pub const ZERO: Digest160 = Digest160([0u8; 20]);

    pub fn as_bytes(&self) -> &[u8; 20] {
        &self.0
    }
}

/// SHA-1 of `data`.
pub fn hash160(data: &[u8]) -> Digest160 {
    Digest160(Sha1::digest(data).into())
}

/// SHA-256 of `data`; used for body digests and key fingerprints.
pub fn hash256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Digest that gets signed for a structured body: SHA-256 over a domain tag
/// and the canonical JSON encoding of `body`.
pub fn signing_digest<T: Serialize + ?Sized>(tag: &str, body: &T) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    hasher.update([0u8]);
    // Struct fields serialize in declaration order and all maps are BTreeMaps,
    // so the encoding is canonical.
    hasher.update(serde_json::to_vec(body).expect("serializable body"));
    hasher.finalize().into()
}

/// Seedable deterministic generator. Every bit of randomness in a run flows
/// through one of these.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng { seed, inner: ChaCha20Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fill(&mut self, buf: &mut [u8]) {
        self.inner.fill_bytes(buf);
    }

    pub fn bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        self.fill(&mut out);
        out
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Hex token of `n` random bytes, for nonces and identifiers.
    pub fn token(&mut self, n: usize) -> String {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf);
        hex::encode(buf)
    }
}

/// Ed25519 public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; 32]);

hex_newtype_serde!(PublicKey, 32);

impl PublicKey {
    /// Short stable fingerprint: first 16 bytes of SHA-256 over the key, hex.
    pub fn fingerprint(&self) -> String {
        hex::encode(&hash256(&self.0)[..16])
    }
}

/// Signature bytes. Kept as an arbitrary byte vector so malformed input can
/// be represented and rejected by [`verify`] instead of failing to parse.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(pub Vec<u8>);

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map(Signature).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(&self.0))
    }
}

/// A signing key pair. The private half is not exposed outside the crate.
#[derive(Clone)]
pub struct KeyPair {
    public: PublicKey,
    signing: SigningKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public).field("scheme_id", &SCHEME_ID).finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn scheme_id(&self) -> &'static str {
        SCHEME_ID
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes().to_vec())
    }

    pub(crate) fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(&bytes);
        KeyPair { public: PublicKey(signing.verifying_key().to_bytes()), signing }
    }
}

/// Fresh key pair drawn from `rng`.
pub fn keygen(rng: &mut Rng) -> KeyPair {
    KeyPair::from_secret_bytes(rng.bytes::<32>())
}

/// True iff `sig` is a valid signature by `public` over exactly `message`.
/// Malformed keys or signatures yield `false`.
pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let Ok(bytes) = <[u8; 64]>::try_from(sig.0.as_slice()) else {
        return false;
    };
    key.verify(message, &ed25519_dalek::Signature::from_bytes(&bytes)).is_ok()
}

/// Sign a structured body under a domain tag.
pub fn sign_body<T: Serialize + ?Sized>(key: &KeyPair, tag: &str, body: &T) -> Signature {
    key.sign(&signing_digest(tag, body))
}

pub fn verify_body<T: Serialize + ?Sized>(public: &PublicKey, tag: &str, body: &T, sig: &Signature) -> bool {
    verify(public, &signing_digest(tag, body), sig)
}

/// Serde helper for byte vectors encoded as hex strings.
pub mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha1_empty_string() {
        assert_eq!(hash160(b"").to_string(), "da39a3ee5e6b4b0d3255bfef95601890afd80709");
        assert_eq!(hash160(b"abc"), hash160(b"abc"));
    }

    #[test]
    fn sign_verify_round_trip() {
        let mut rng = Rng::from_seed(1);
        let kp = keygen(&mut rng);
        let sig = kp.sign(b"m");
        assert!(verify(&kp.public(), b"m", &sig));
        assert!(!verify(&kp.public(), b"m'", &sig));
    }

    #[test]
    fn signature_does_not_verify_under_other_key() {
        let mut rng = Rng::from_seed(2);
        let a = keygen(&mut rng);
        let b = keygen(&mut rng);
        assert_ne!(a.public(), b.public());
        assert!(!verify(&b.public(), b"m", &a.sign(b"m")));
    }

    #[test]
    fn malformed_signature_is_false() {
        let mut rng = Rng::from_seed(3);
        let kp = keygen(&mut rng);
        assert!(!verify(&kp.public(), b"m", &Signature(vec![1, 2, 3])));
        assert!(!verify(&kp.public(), b"m", &Signature(vec![0; 64])));
        assert!(!verify(&PublicKey([0xff; 32]), b"m", &kp.sign(b"m")));
    }

    #[test]
    fn keygen_is_seed_deterministic() {
        let run = || {
            let mut rng = Rng::from_seed(42);
            (keygen(&mut rng).public(), keygen(&mut rng).public())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1);
    }

    #[test]
    fn body_signatures_bind_tag() {
        let mut rng = Rng::from_seed(4);
        let kp = keygen(&mut rng);
        let sig = sign_body(&kp, "a", &("x", 1));
        assert!(verify_body(&kp.public(), "a", &("x", 1), &sig));
        assert!(!verify_body(&kp.public(), "b", &("x", 1), &sig));
        assert!(!verify_body(&kp.public(), "a", &("x", 2), &sig));
    }
}
