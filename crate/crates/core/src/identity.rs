//! Entity identity: addresses, virtual identities (VIDs) and the domain
//! owner's profile database.
//!
//! Every participant owns a keypair; the 20-byte account address is derived
//! from the public key and doubles as the entity's VID. The domain owner
//! keeps a local profile database keyed by VID, and every mutation of that
//! database is authenticated against the owner key.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::codec::Writer;
use crate::crypto::{self, decode_prefixed_hex, sha256, PublicKey, Signature};

pub const ADDRESS_LEN: usize = 20;

/// Domain separation tag for profile registration signatures.
const PROFILE_SIGN_TAG: &[u8] = b"blendcac.profile.v1";
/// Domain separation tag for profile status updates.
const STATUS_SIGN_TAG: &[u8] = b"blendcac.status.v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("malformed key bytes")]
    InvalidKey,
    #[error("entity already registered: {0}")]
    AlreadyRegistered(Vid),
    #[error("mutation not signed by the domain owner")]
    Unauthorized,
    #[error("profile not found: {0}")]
    NotFound(Vid),
    #[error("malformed profile data: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// 20-byte account address: the last 20 bytes of SHA-256 of the public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub [u8; ADDRESS_LEN]);

impl Address {
    /// Reserved target of contract-deployment transactions.
    pub const ZERO: Address = Address([0u8; ADDRESS_LEN]);

    pub fn as_bytes(&self) -> &[u8; ADDRESS_LEN] {
        &self.0
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let raw = decode_prefixed_hex(s, ADDRESS_LEN).ok_or(IdentityError::InvalidKey)?;
        Ok(Address(raw.try_into().unwrap()))
    }
}

impl std::fmt::Display for Address {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl std::fmt::Debug for Address {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Address({self})")
    }
}

impl std::str::FromStr for Address {
    type Err = IdentityError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Address::from_hex(&s).map_err(D::Error::custom)
    }
}

/// Derives the account address from a public key: the last 20 bytes of
/// `SHA-256(public_key)`. Pure and stable across processes.
pub fn derive_address(public_key: &PublicKey) -> Address {
    let digest = sha256(public_key.as_bytes());
    let mut out = [0u8; ADDRESS_LEN];
    out.copy_from_slice(&digest.as_bytes()[crypto::HASH_LEN - ADDRESS_LEN..]);
    Address(out)
}

/// Same derivation from raw key bytes; rejects inputs of the wrong shape.
pub fn derive_address_from_bytes(public_key: &[u8]) -> Result<Address, IdentityError> {
    let pk = PublicKey::from_bytes(public_key).map_err(|_| IdentityError::InvalidKey)?;
    Ok(derive_address(&pk))
}

/// Virtual identity of a registered entity, represented by its address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vid(pub Address);

impl Vid {
    pub fn address(&self) -> Address {
        self.0
    }
}

impl std::fmt::Display for Vid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::fmt::Debug for Vid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Vid({})", self.0)
    }
}

impl std::str::FromStr for Vid {
    type Err = IdentityError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Vid(Address::from_hex(s)?))
    }
}

impl From<Address> for Vid {
    fn from(a: Address) -> Self {
        Vid(a)
    }
}

/// Registered entities are either people or devices. `Reserved` keeps the
/// encoding open for future kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Human,
    Device,
    Reserved,
}

impl EntityKind {
    fn tag(&self) -> u8 {
        match self {
            EntityKind::Human => 1,
            EntityKind::Device => 2,
            EntityKind::Reserved => 255,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityStatus {
    Active,
    Suspended,
}

impl EntityStatus {
    fn tag(&self) -> u8 {
        match self {
            EntityStatus::Active => 1,
            EntityStatus::Suspended => 2,
        }
    }
}

/// Profile record for one registered entity, keyed by its VID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityProfile {
    pub vid: Vid,
    pub kind: EntityKind,
    pub display_name: String,
    /// Milliseconds since the Unix epoch.
    pub registered_at: u64,
    pub status: EntityStatus,
}

impl EntityProfile {
    /// Canonical bytes signed by the domain owner on registration.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(PROFILE_SIGN_TAG)
            .fixed(self.vid.address().as_bytes())
            .u8(self.kind.tag())
            .string(&self.display_name)
            .u64(self.registered_at)
            .u8(self.status.tag());
        w.finish()
    }
}

/// Canonical bytes signed by the domain owner for a status change.
pub fn status_update_bytes(vid: &Vid, status: EntityStatus) -> Vec<u8> {
    let mut w = Writer::new();
    w.fixed(STATUS_SIGN_TAG)
        .fixed(vid.address().as_bytes())
        .u8(status.tag());
    w.finish()
}

/// The domain owner's local profile database: a single-file JSON store,
/// one record per VID. All writes are authenticated against the owner key;
/// reads are plain lookups.
#[derive(Debug, Clone)]
pub struct ProfileDb {
    owner: PublicKey,
    profiles: BTreeMap<Vid, EntityProfile>,
}

impl ProfileDb {
    pub fn new(owner: PublicKey) -> Self {
        Self {
            owner,
            profiles: BTreeMap::new(),
        }
    }

    pub fn owner_key(&self) -> &PublicKey {
        &self.owner
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Registers a profile signed by the domain owner. The VID becomes the
    /// primary key; re-registration is rejected.
    pub fn register_entity(
        &mut self,
        owner_signature: &Signature,
        profile: EntityProfile,
    ) -> Result<Vid, IdentityError> {
        if !crypto::verify(&self.owner, &profile.canonical_bytes(), owner_signature) {
            return Err(IdentityError::Unauthorized);
        }
        let vid = profile.vid;
        if self.profiles.contains_key(&vid) {
            return Err(IdentityError::AlreadyRegistered(vid));
        }
        self.profiles.insert(vid, profile);
        Ok(vid)
    }

    /// Flips an entity's status; authenticated like every other mutation.
    pub fn set_status(
        &mut self,
        owner_signature: &Signature,
        vid: Vid,
        status: EntityStatus,
    ) -> Result<(), IdentityError> {
        if !crypto::verify(&self.owner, &status_update_bytes(&vid, status), owner_signature) {
            return Err(IdentityError::Unauthorized);
        }
        match self.profiles.get_mut(&vid) {
            Some(p) => {
                p.status = status;
                Ok(())
            }
            None => Err(IdentityError::NotFound(vid)),
        }
    }

    pub fn lookup_profile(&self, vid: &Vid) -> Option<&EntityProfile> {
        self.profiles.get(vid)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &EntityProfile> {
        self.profiles.values()
    }

    /// Exports all profiles as a JSON array, the interchange format of the
    /// store file itself.
    pub fn export_json(&self) -> String {
        let all: Vec<&EntityProfile> = self.profiles.values().collect();
        serde_json::to_string_pretty(&all).expect("profiles serialize")
    }

    /// Imports a JSON array of profiles. Trusted path: the file is the
    /// owner's own store, so records are not re-signed; duplicates are
    /// rejected.
    pub fn import_json(owner: PublicKey, json: &str) -> Result<Self, IdentityError> {
        let records: Vec<EntityProfile> =
            serde_json::from_str(json).map_err(|e| IdentityError::Malformed(e.to_string()))?;
        let mut profiles = BTreeMap::new();
        for p in records {
            if profiles.insert(p.vid, p.clone()).is_some() {
                return Err(IdentityError::Malformed(format!(
                    "duplicate vid in import: {}",
                    p.vid
                )));
            }
        }
        Ok(Self { owner, profiles })
    }

    pub fn save(&self, path: &Path) -> Result<(), IdentityError> {
        std::fs::write(path, self.export_json()).map_err(|e| IdentityError::Io(e.to_string()))
    }

    pub fn load(owner: PublicKey, path: &Path) -> Result<Self, IdentityError> {
        let text = std::fs::read_to_string(path).map_err(|e| IdentityError::Io(e.to_string()))?;
        Self::import_json(owner, &text)
    }
}
