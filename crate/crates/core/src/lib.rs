//! Decentralized capability-based access control on a simulated block
//! ledger.
//!
//! The crate is organized along the protocol roles:
//!
//! * [`identity`]: keys, addresses, VIDs and the domain owner's profile
//!   database.
//! * [`ledger`]: the simulated append-only chain: signed transactions,
//!   interval sealing, verification, longest-chain sync and contract
//!   hosting.
//! * [`capcontract`]: the capability-token contract and its wire format.
//! * [`authz`]: the policy decision point (owner) and the enforcement
//!   point (service provider) with its block-synchronized token cache.
//! * [`baselines`]: RBAC and ABAC comparison engines with a line-oriented
//!   policy store.
//!
//! Everything hashed, signed or persisted uses the canonical encoding in
//! [`codec`]; `docs/wire-format.md` in the repository pins it bit-exactly.

pub mod authz;
pub mod baselines;
pub mod capcontract;
pub mod codec;
pub mod crypto;
pub mod identity;
pub mod ledger;

pub use authz::{
    verify_authorization, AccessRequest, Decision, DomainOwner, Outcome, PolicyOutcome,
    PolicyRule, Reason, ServiceProvider, StageTimings,
};
pub use capcontract::{
    compute_icap_id, AccessRight, AccessRightSet, CapabilityToken, ContextSet, ContractCall,
    ContractKind, RevocationMode,
};
pub use crypto::{Hash32, KeyPair, PublicKey, Signature};
pub use identity::{derive_address, Address, EntityKind, EntityProfile, ProfileDb, Vid};
pub use ledger::{verify_chain, Block, Chain, LedgerError, LedgerRpc, Node, SignedTransaction};
