//! Keys, signatures and digests.
//!
//! Signing is Ed25519 (via `ring`), hashing is SHA-256. The rest of the
//! crate only relies on the generic contract: a keypair signs, the public
//! key verifies deterministically, and the address is derived from the
//! public key (see [`crate::identity::derive_address`]).

use ring::signature::{self, Ed25519KeyPair, KeyPair as _};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SEED_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const HASH_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("system entropy source failed")]
    EntropyFailure,
    #[error("malformed key bytes")]
    InvalidKey,
    #[error("malformed hex value: {0}")]
    InvalidHex(&'static str),
}

/// 32-byte SHA-256 digest. Displayed as lowercase `0x`-prefixed hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hash32(pub [u8; HASH_LEN]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0u8; HASH_LEN]);

    pub fn as_bytes(&self) -> &[u8; HASH_LEN] {
        &self.0
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let raw = decode_prefixed_hex(s, HASH_LEN).ok_or(CryptoError::InvalidHex("hash"))?;
        Ok(Hash32(raw.try_into().unwrap()))
    }
}

impl std::fmt::Display for Hash32 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl std::fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Hash32({self})")
    }
}

impl std::str::FromStr for Hash32 {
    type Err = CryptoError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

impl Serialize for Hash32 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hash32::from_hex(&s).map_err(D::Error::custom)
    }
}

/// SHA-256 of `data`.
pub fn sha256(data: &[u8]) -> Hash32 {
    let digest = Sha256::digest(data);
    Hash32(digest.into())
}

/// Ed25519 public key bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey(pub [u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let raw: [u8; PUBLIC_KEY_LEN] = bytes.try_into().map_err(|_| CryptoError::InvalidKey)?;
        Ok(PublicKey(raw))
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let raw =
            decode_prefixed_hex(s, PUBLIC_KEY_LEN).ok_or(CryptoError::InvalidHex("public key"))?;
        Ok(PublicKey(raw.try_into().unwrap()))
    }
}

impl std::fmt::Display for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl std::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKey({self})")
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PublicKey::from_hex(&s).map_err(D::Error::custom)
    }
}

/// Detached Ed25519 signature.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let raw: [u8; SIGNATURE_LEN] = bytes.try_into().map_err(|_| CryptoError::InvalidKey)?;
        Ok(Signature(raw))
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let raw =
            decode_prefixed_hex(s, SIGNATURE_LEN).ok_or(CryptoError::InvalidHex("signature"))?;
        Ok(Signature(raw.try_into().unwrap()))
    }
}

impl std::fmt::Display for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl std::fmt::Debug for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Signature({self})")
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Signature::from_hex(&s).map_err(D::Error::custom)
    }
}

/// An Ed25519 keypair held as its 32-byte seed plus the derived public key.
#[derive(Clone)]
pub struct KeyPair {
    seed: [u8; SEED_LEN],
    public: PublicKey,
}

impl KeyPair {
    /// Generates a fresh keypair from the system entropy source.
    pub fn generate() -> Result<Self, CryptoError> {
        let rng = ring::rand::SystemRandom::new();
        let mut seed = [0u8; SEED_LEN];
        ring::rand::SecureRandom::fill(&rng, &mut seed)
            .map_err(|_| CryptoError::EntropyFailure)?;
        Self::from_seed(seed)
    }

    /// Rebuilds the keypair from a stored seed.
    pub fn from_seed(seed: [u8; SEED_LEN]) -> Result<Self, CryptoError> {
        let pair =
            Ed25519KeyPair::from_seed_unchecked(&seed).map_err(|_| CryptoError::InvalidKey)?;
        let public = PublicKey::from_bytes(pair.public_key().as_ref())?;
        Ok(KeyPair { seed, public })
    }

    pub fn public_key(&self) -> PublicKey {
        self.public
    }

    pub fn seed(&self) -> &[u8; SEED_LEN] {
        &self.seed
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        // from_seed validated at construction, so this cannot fail.
        let pair = Ed25519KeyPair::from_seed_unchecked(&self.seed).expect("seed checked");
        let sig = pair.sign(message);
        Signature::from_bytes(sig.as_ref()).expect("ed25519 signature length")
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Never print the seed.
        write!(f, "KeyPair(public: {})", self.public)
    }
}

/// Deterministic signature verification.
pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    let key = signature::UnparsedPublicKey::new(&signature::ED25519, public.as_bytes().as_slice());
    key.verify(message, sig.as_bytes()).is_ok()
}

/// Decodes `0x`-prefixed (or bare) lowercase/uppercase hex of an exact byte
/// length.
pub fn decode_prefixed_hex(s: &str, expect_len: usize) -> Option<Vec<u8>> {
    let body = s.strip_prefix("0x").unwrap_or(s);
    let raw = hex::decode(body).ok()?;
    if raw.len() == expect_len {
        Some(raw)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_keys_are_distinct() {
        let a = KeyPair::generate().unwrap();
        let b = KeyPair::generate().unwrap();
        assert_ne!(a.public_key(), b.public_key());
    }

    #[test]
    fn sign_verify_roundtrip() {
        let kp = KeyPair::generate().unwrap();
        let sig = kp.sign(b"message");
        assert!(verify(&kp.public_key(), b"message", &sig));
        assert!(!verify(&kp.public_key(), b"other message", &sig));
    }

    #[test]
    fn signature_bound_to_key() {
        let a = KeyPair::generate().unwrap();
        let b = KeyPair::generate().unwrap();
        let sig = a.sign(b"message");
        assert!(!verify(&b.public_key(), b"message", &sig));
    }

    #[test]
    fn seed_roundtrip_is_stable() {
        let kp = KeyPair::generate().unwrap();
        let again = KeyPair::from_seed(*kp.seed()).unwrap();
        assert_eq!(kp.public_key(), again.public_key());
    }

    #[test]
    fn hash_hex_roundtrip() {
        let h = sha256(b"abc");
        let parsed = Hash32::from_hex(&h.to_string()).unwrap();
        assert_eq!(h, parsed);
        // Known SHA-256 vector.
        assert_eq!(
            h.to_string(),
            "0xba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn wrong_length_hex_rejected() {
        assert!(Hash32::from_hex("0xabcd").is_err());
        assert!(PublicKey::from_hex("0x").is_err());
    }
}
