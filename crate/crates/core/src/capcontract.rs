//! The capability-token contract: token structure, identifier derivation,
//! and the issue / delegate / revoke state machine executed by the ledger.
//!
//! A token binds a subject VID to an object VID with an access-right set
//! (`rights`), context constraints (`context`) and a delegation grant
//! (`delegation`). The token id is a one-way hash over the fields fixed at
//! issue time; the delegatee queue mutates freely without touching the id,
//! while owner-side revocation deliberately rewrites hashed fields so the
//! token stops validating for everyone holding it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{sha256, Hash32};
use crate::identity::{Address, Vid};

/// Domain separation tag for token-id derivation.
const ICAP_ID_TAG: &[u8] = b"blendcac.icap.v1";

pub const SECONDS_PER_DAY: u32 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error("sender is not the contract owner")]
    NotOwner,
    #[error("subject already holds a token in this contract")]
    SubjectAlreadyHasToken,
    #[error("no token for this subject")]
    NoToken,
    #[error("token is disabled")]
    TokenDisabled,
    #[error("delegation depth exhausted (remaining depth {remaining})")]
    DepthExhausted { remaining: u32 },
    #[error("target is already a delegatee")]
    DuplicateDelegatee,
    #[error("a token cannot be delegated to its own subject")]
    SelfDelegation,
    #[error("target is not a delegatee of this token")]
    NotADelegatee,
    #[error("call not supported by this contract")]
    CallNotSupported,
    #[error("malformed contract call: {0}")]
    Codec(#[from] CodecError),
}

/// Atomic access right. The discriminant doubles as the canonical wire tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AccessRight {
    Read,
    Write,
    Execute,
}

impl AccessRight {
    pub fn tag(self) -> u8 {
        match self {
            AccessRight::Read => 1,
            AccessRight::Write => 2,
            AccessRight::Execute => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, CodecError> {
        match tag {
            1 => Ok(AccessRight::Read),
            2 => Ok(AccessRight::Write),
            3 => Ok(AccessRight::Execute),
            _ => Err(CodecError::BadValue("unknown access right")),
        }
    }

    /// Single-letter form used by the baseline store files and the CLI.
    pub fn letter(self) -> char {
        match self {
            AccessRight::Read => 'R',
            AccessRight::Write => 'W',
            AccessRight::Execute => 'X',
        }
    }
}

impl std::str::FromStr for AccessRight {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "R" | "READ" => Ok(AccessRight::Read),
            "W" | "WRITE" => Ok(AccessRight::Write),
            "X" | "EXECUTE" => Ok(AccessRight::Execute),
            _ => Err(CodecError::BadValue("unknown access right")),
        }
    }
}

impl std::fmt::Display for AccessRight {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AccessRight::Read => write!(f, "READ"),
            AccessRight::Write => write!(f, "WRITE"),
            AccessRight::Execute => write!(f, "EXECUTE"),
        }
    }
}

/// AR: set of permitted actions. The empty set permits nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccessRightSet(pub BTreeSet<AccessRight>);

impl AccessRightSet {
    pub fn new<I: IntoIterator<Item = AccessRight>>(rights: I) -> Self {
        AccessRightSet(rights.into_iter().collect())
    }

    pub fn empty() -> Self {
        AccessRightSet(BTreeSet::new())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, right: AccessRight) -> bool {
        self.0.contains(&right)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = AccessRight> + '_ {
        self.0.iter().copied()
    }

    /// Parses the compact `R|W|X` run used in store files, e.g. `RW`.
    pub fn parse_compact(s: &str) -> Result<Self, CodecError> {
        let mut set = BTreeSet::new();
        for c in s.chars() {
            let right = match c.to_ascii_uppercase() {
                'R' => AccessRight::Read,
                'W' => AccessRight::Write,
                'X' => AccessRight::Execute,
                _ => return Err(CodecError::BadValue("unknown access right letter")),
            };
            if !set.insert(right) {
                return Err(CodecError::BadValue("duplicate access right letter"));
            }
        }
        Ok(AccessRightSet(set))
    }

    pub fn to_compact(&self) -> String {
        self.0.iter().map(|r| r.letter()).collect()
    }

    fn encode(&self, w: &mut Writer) {
        w.u32(self.0.len() as u32);
        for r in &self.0 {
            w.u8(r.tag());
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.list_len()?;
        let mut set = BTreeSet::new();
        let mut last = 0u8;
        for _ in 0..n {
            let tag = r.u8()?;
            if tag <= last {
                return Err(CodecError::BadValue("rights not in canonical order"));
            }
            last = tag;
            set.insert(AccessRight::from_tag(tag)?);
        }
        Ok(AccessRightSet(set))
    }
}

impl FromIterator<AccessRight> for AccessRightSet {
    fn from_iter<I: IntoIterator<Item = AccessRight>>(iter: I) -> Self {
        AccessRightSet(iter.into_iter().collect())
    }
}

/// Time of day as seconds since local midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeOfDay(u32);

impl TimeOfDay {
    pub fn new(seconds: u32) -> Result<Self, CodecError> {
        if seconds < SECONDS_PER_DAY {
            Ok(TimeOfDay(seconds))
        } else {
            Err(CodecError::BadValue("time of day out of range"))
        }
    }

    pub fn from_hms(h: u32, m: u32, s: u32) -> Result<Self, CodecError> {
        if h >= 24 || m >= 60 || s >= 60 {
            return Err(CodecError::BadValue("time of day out of range"));
        }
        Ok(TimeOfDay(h * 3600 + m * 60 + s))
    }

    pub fn seconds(&self) -> u32 {
        self.0
    }
}

impl std::str::FromStr for TimeOfDay {
    type Err = CodecError;

    /// Accepts `HH:MM` or `HH:MM:SS`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 2 && parts.len() != 3 {
            return Err(CodecError::BadValue("expected HH:MM or HH:MM:SS"));
        }
        let mut nums = [0u32; 3];
        for (i, p) in parts.iter().enumerate() {
            if p.is_empty() || p.len() > 2 || !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(CodecError::BadValue("expected HH:MM or HH:MM:SS"));
            }
            nums[i] = p.parse().map_err(|_| CodecError::BadValue("bad number"))?;
        }
        TimeOfDay::from_hms(nums[0], nums[1], nums[2])
    }
}

impl std::fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:02}:{:02}:{:02}",
            self.0 / 3600,
            (self.0 % 3600) / 60,
            self.0 % 60
        )
    }
}

impl Serialize for TimeOfDay {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TimeOfDay {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// One context constraint. A `TimeWindow` whose start is later than its end
/// spans midnight (e.g. 22:00-06:00).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContextConstraint {
    TimeWindow { start: TimeOfDay, end: TimeOfDay },
    LocationTag { tag: String },
    PredicateRef { id: String },
}

impl ContextConstraint {
    fn wire_tag(&self) -> u8 {
        match self {
            ContextConstraint::TimeWindow { .. } => 1,
            ContextConstraint::LocationTag { .. } => 2,
            ContextConstraint::PredicateRef { .. } => 3,
        }
    }

    fn encode(&self, w: &mut Writer) {
        w.u8(self.wire_tag());
        match self {
            ContextConstraint::TimeWindow { start, end } => {
                w.u32(start.seconds()).u32(end.seconds());
            }
            ContextConstraint::LocationTag { tag } => {
                w.string(tag);
            }
            ContextConstraint::PredicateRef { id } => {
                w.string(id);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            1 => Ok(ContextConstraint::TimeWindow {
                start: TimeOfDay::new(r.u32()?)?,
                end: TimeOfDay::new(r.u32()?)?,
            }),
            2 => Ok(ContextConstraint::LocationTag { tag: r.string()? }),
            3 => Ok(ContextConstraint::PredicateRef { id: r.string()? }),
            t => Err(CodecError::BadOpcode(t)),
        }
    }
}

/// Whether a time falls inside the window, honoring midnight wrap-around.
pub fn time_in_window(t: TimeOfDay, start: TimeOfDay, end: TimeOfDay) -> bool {
    if start <= end {
        start <= t && t <= end
    } else {
        t >= start || t <= end
    }
}

/// C: set of context constraints. The empty set means the access-right
/// validation applies no context condition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextSet(pub BTreeSet<ContextConstraint>);

impl ContextSet {
    pub fn new<I: IntoIterator<Item = ContextConstraint>>(constraints: I) -> Self {
        ContextSet(constraints.into_iter().collect())
    }

    pub fn empty() -> Self {
        ContextSet(BTreeSet::new())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ContextConstraint> {
        self.0.iter()
    }

    fn encode(&self, w: &mut Writer) {
        w.u32(self.0.len() as u32);
        for c in &self.0 {
            c.encode(w);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.list_len()?;
        let mut set = BTreeSet::new();
        let mut last: Option<ContextConstraint> = None;
        for _ in 0..n {
            let c = ContextConstraint::decode(r)?;
            if let Some(prev) = &last {
                if prev >= &c {
                    return Err(CodecError::BadValue("context not in canonical order"));
                }
            }
            last = Some(c.clone());
            set.insert(c);
        }
        Ok(ContextSet(set))
    }
}

/// D: the delegation grant. `depth` caps the number of delegation
/// operations; `delegatee` is the ordered queue of delegated addresses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelegationSet {
    pub depth: u32,
    pub delegatee: Vec<Address>,
}

impl DelegationSet {
    pub fn new(depth: u32) -> Self {
        DelegationSet {
            depth,
            delegatee: Vec::new(),
        }
    }

    pub fn remaining(&self) -> u32 {
        self.depth.saturating_sub(self.delegatee.len() as u32)
    }
}

/// The identity-based capability token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityToken {
    pub id: Hash32,
    pub issuer: Address,
    pub subject: Vid,
    pub object: Vid,
    pub delegation: DelegationSet,
    pub rights: AccessRightSet,
    pub context: ContextSet,
    /// Block height the issuing transaction was sealed at.
    pub issued_at: u64,
    pub enabled: bool,
}

impl CapabilityToken {
    /// Recomputes the id over the current field values. Matches the stored
    /// id only while the hashed fields are untouched; owner revocation
    /// rewrites `delegation.depth` or `rights` and breaks the equality on
    /// purpose.
    pub fn recompute_id(&self) -> Hash32 {
        compute_icap_id(
            &self.issuer,
            &self.subject,
            &self.object,
            self.delegation.depth,
            &self.rights,
            &self.context,
            self.issued_at,
        )
    }

    /// Full canonical encoding, used for state snapshots.
    pub fn encode(&self, w: &mut Writer) {
        w.fixed(self.id.as_bytes())
            .fixed(self.issuer.as_bytes())
            .fixed(self.subject.address().as_bytes())
            .fixed(self.object.address().as_bytes())
            .u32(self.delegation.depth);
        w.u32(self.delegation.delegatee.len() as u32);
        for d in &self.delegation.delegatee {
            w.fixed(d.as_bytes());
        }
        self.rights.encode(w);
        self.context.encode(w);
        w.u64(self.issued_at).u8(self.enabled as u8);
    }
}

/// The one-way hash of the capability: id over (issuer, subject, object,
/// delegation depth, rights, context, issue height). The mutable delegatee
/// queue is excluded so delegation never changes the id.
pub fn compute_icap_id(
    issuer: &Address,
    subject: &Vid,
    object: &Vid,
    depth: u32,
    rights: &AccessRightSet,
    context: &ContextSet,
    issued_at: u64,
) -> Hash32 {
    let mut w = Writer::new();
    w.fixed(ICAP_ID_TAG)
        .fixed(issuer.as_bytes())
        .fixed(subject.address().as_bytes())
        .fixed(object.address().as_bytes())
        .u32(depth);
    rights.encode(&mut w);
    context.encode(&mut w);
    w.u64(issued_at);
    sha256(&w.finish())
}

/// Hosted contract kinds. The ledger routes calls by kind; the
/// role/attribute contracts carry the baseline models' payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContractKind {
    Capability,
    Role,
    Attribute,
}

impl ContractKind {
    pub fn tag(self) -> u8 {
        match self {
            ContractKind::Capability => 1,
            ContractKind::Role => 2,
            ContractKind::Attribute => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, CodecError> {
        match tag {
            1 => Ok(ContractKind::Capability),
            2 => Ok(ContractKind::Role),
            3 => Ok(ContractKind::Attribute),
            _ => Err(CodecError::BadValue("unknown contract kind")),
        }
    }
}

/// How the owner revokes a whole token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevocationMode {
    /// Set the delegation depth to zero and clear the delegatee queue.
    ZeroDepth,
    /// Clear the access-right set.
    ClearRights,
    /// Flip the enabled flag off.
    Disable,
}

impl RevocationMode {
    pub fn tag(self) -> u8 {
        match self {
            RevocationMode::ZeroDepth => 1,
            RevocationMode::ClearRights => 2,
            RevocationMode::Disable => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, CodecError> {
        match tag {
            1 => Ok(RevocationMode::ZeroDepth),
            2 => Ok(RevocationMode::ClearRights),
            3 => Ok(RevocationMode::Disable),
            _ => Err(CodecError::BadValue("unknown revocation mode")),
        }
    }
}

impl std::str::FromStr for RevocationMode {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero_depth" | "zero-depth" => Ok(RevocationMode::ZeroDepth),
            "clear_rights" | "clear-rights" => Ok(RevocationMode::ClearRights),
            "disable" => Ok(RevocationMode::Disable),
            _ => Err(CodecError::BadValue("unknown revocation mode")),
        }
    }
}

impl std::fmt::Display for RevocationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RevocationMode::ZeroDepth => write!(f, "zero_depth"),
            RevocationMode::ClearRights => write!(f, "clear_rights"),
            RevocationMode::Disable => write!(f, "disable"),
        }
    }
}

pub const OP_ISSUE: u8 = 0x01;
pub const OP_DELEGATE: u8 = 0x02;
pub const OP_REVOKE_DELEGATION: u8 = 0x03;
pub const OP_REVOKE_TOKEN: u8 = 0x04;
pub const OP_DEPLOY: u8 = 0x05;
pub const OP_GRANT_ROLE: u8 = 0x06;
pub const OP_REVOKE_ROLE: u8 = 0x07;
pub const OP_SET_ATTRIBUTE: u8 = 0x08;
pub const OP_CLEAR_ATTRIBUTE: u8 = 0x09;

/// Decoded form of a transaction's contract-call payload. On the wire this
/// is a 1-byte opcode followed by the call's fields in canonical encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContractCall {
    Issue {
        subject: Vid,
        object: Vid,
        depth: u32,
        rights: AccessRightSet,
        context: ContextSet,
    },
    Delegate {
        target: Address,
    },
    RevokeDelegation {
        subject: Address,
        target: Address,
    },
    RevokeToken {
        subject: Address,
        mode: RevocationMode,
    },
    Deploy {
        kind: ContractKind,
    },
    GrantRole {
        user: Address,
        role: String,
    },
    RevokeRole {
        user: Address,
        role: String,
    },
    SetAttribute {
        user: Address,
        name: String,
        value: String,
    },
    ClearAttribute {
        user: Address,
        name: String,
    },
}

impl ContractCall {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            ContractCall::Issue {
                subject,
                object,
                depth,
                rights,
                context,
            } => {
                w.u8(OP_ISSUE)
                    .fixed(subject.address().as_bytes())
                    .fixed(object.address().as_bytes())
                    .u32(*depth);
                rights.encode(&mut w);
                context.encode(&mut w);
            }
            ContractCall::Delegate { target } => {
                w.u8(OP_DELEGATE).fixed(target.as_bytes());
            }
            ContractCall::RevokeDelegation { subject, target } => {
                w.u8(OP_REVOKE_DELEGATION)
                    .fixed(subject.as_bytes())
                    .fixed(target.as_bytes());
            }
            ContractCall::RevokeToken { subject, mode } => {
                w.u8(OP_REVOKE_TOKEN).fixed(subject.as_bytes()).u8(mode.tag());
            }
            ContractCall::Deploy { kind } => {
                w.u8(OP_DEPLOY).u8(kind.tag());
            }
            ContractCall::GrantRole { user, role } => {
                w.u8(OP_GRANT_ROLE).fixed(user.as_bytes()).string(role);
            }
            ContractCall::RevokeRole { user, role } => {
                w.u8(OP_REVOKE_ROLE).fixed(user.as_bytes()).string(role);
            }
            ContractCall::SetAttribute { user, name, value } => {
                w.u8(OP_SET_ATTRIBUTE)
                    .fixed(user.as_bytes())
                    .string(name)
                    .string(value);
            }
            ContractCall::ClearAttribute { user, name } => {
                w.u8(OP_CLEAR_ATTRIBUTE).fixed(user.as_bytes()).string(name);
            }
        }
        w.finish()
    }

    pub fn decode(data: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(data);
        let call = match r.u8()? {
            OP_ISSUE => ContractCall::Issue {
                subject: Vid(Address(r.fixed()?)),
                object: Vid(Address(r.fixed()?)),
                depth: r.u32()?,
                rights: AccessRightSet::decode(&mut r)?,
                context: ContextSet::decode(&mut r)?,
            },
            OP_DELEGATE => ContractCall::Delegate {
                target: Address(r.fixed()?),
            },
            OP_REVOKE_DELEGATION => ContractCall::RevokeDelegation {
                subject: Address(r.fixed()?),
                target: Address(r.fixed()?),
            },
            OP_REVOKE_TOKEN => ContractCall::RevokeToken {
                subject: Address(r.fixed()?),
                mode: RevocationMode::from_tag(r.u8()?)?,
            },
            OP_DEPLOY => ContractCall::Deploy {
                kind: ContractKind::from_tag(r.u8()?)?,
            },
            OP_GRANT_ROLE => ContractCall::GrantRole {
                user: Address(r.fixed()?),
                role: r.string()?,
            },
            OP_REVOKE_ROLE => ContractCall::RevokeRole {
                user: Address(r.fixed()?),
                role: r.string()?,
            },
            OP_SET_ATTRIBUTE => ContractCall::SetAttribute {
                user: Address(r.fixed()?),
                name: r.string()?,
                value: r.string()?,
            },
            OP_CLEAR_ATTRIBUTE => ContractCall::ClearAttribute {
                user: Address(r.fixed()?),
                name: r.string()?,
            },
            op => return Err(CodecError::BadOpcode(op)),
        };
        r.finish()?;
        Ok(call)
    }
}

/// What a successfully applied call did, surfaced through transaction
/// receipts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallOutcome {
    Deployed { address: Address, kind: ContractKind },
    TokenIssued { id: Hash32 },
    Delegated { id: Hash32, delegatee_count: u32 },
    DelegationRevoked { id: Hash32 },
    TokenRevoked { id: Hash32, mode: RevocationMode },
    RoleGranted,
    RoleRevoked,
    AttributeSet,
    AttributeCleared,
}

/// A token resolved for a requester, with a marker when access flows
/// through a delegation rather than direct subjecthood.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueriedToken {
    pub token: CapabilityToken,
    /// `Some(subject)` when the requester holds the token as a delegatee.
    pub delegated_via: Option<Vid>,
}

/// The capability pool of one deployed contract: at most one token per
/// subject, plus the inverse delegatee index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractState {
    pub owner: Address,
    pub tokens: BTreeMap<Address, CapabilityToken>,
    pub delegatee_index: BTreeMap<Address, BTreeSet<Hash32>>,
}

impl ContractState {
    pub fn new(owner: Address) -> Self {
        ContractState {
            owner,
            tokens: BTreeMap::new(),
            delegatee_index: BTreeMap::new(),
        }
    }

    /// Routes one decoded call. `height` is the height of the block being
    /// sealed.
    pub fn apply(
        &mut self,
        sender: Address,
        call: &ContractCall,
        height: u64,
    ) -> Result<CallOutcome, ContractError> {
        match call {
            ContractCall::Issue {
                subject,
                object,
                depth,
                rights,
                context,
            } => {
                let id = self.issue_token(
                    sender,
                    *subject,
                    *object,
                    *depth,
                    rights.clone(),
                    context.clone(),
                    height,
                )?;
                Ok(CallOutcome::TokenIssued { id })
            }
            ContractCall::Delegate { target } => {
                let (id, count) = self.delegate(sender, *target)?;
                Ok(CallOutcome::Delegated {
                    id,
                    delegatee_count: count,
                })
            }
            ContractCall::RevokeDelegation { subject, target } => {
                let id = self.revoke_delegation(sender, *subject, *target)?;
                Ok(CallOutcome::DelegationRevoked { id })
            }
            ContractCall::RevokeToken { subject, mode } => {
                let id = self.revoke_token(sender, *subject, *mode)?;
                Ok(CallOutcome::TokenRevoked { id, mode: *mode })
            }
            _ => Err(ContractError::CallNotSupported),
        }
    }

    /// Mints a new token for `subject`. Owner-only; one token per subject.
    #[allow(clippy::too_many_arguments)]
    pub fn issue_token(
        &mut self,
        sender: Address,
        subject: Vid,
        object: Vid,
        depth: u32,
        rights: AccessRightSet,
        context: ContextSet,
        height: u64,
    ) -> Result<Hash32, ContractError> {
        if sender != self.owner {
            return Err(ContractError::NotOwner);
        }
        if self.tokens.contains_key(&subject.address()) {
            return Err(ContractError::SubjectAlreadyHasToken);
        }
        let id = compute_icap_id(&self.owner, &subject, &object, depth, &rights, &context, height);
        let token = CapabilityToken {
            id,
            issuer: self.owner,
            subject,
            object,
            delegation: DelegationSet::new(depth),
            rights,
            context,
            issued_at: height,
            enabled: true,
        };
        self.tokens.insert(subject.address(), token);
        Ok(id)
    }

    /// Appends `target` to the sender's delegatee queue while the depth
    /// allows another delegation operation.
    pub fn delegate(
        &mut self,
        sender: Address,
        target: Address,
    ) -> Result<(Hash32, u32), ContractError> {
        let token = self.tokens.get_mut(&sender).ok_or(ContractError::NoToken)?;
        if !token.enabled {
            return Err(ContractError::TokenDisabled);
        }
        if token.delegation.delegatee.len() as u32 >= token.delegation.depth {
            return Err(ContractError::DepthExhausted {
                remaining: token.delegation.remaining(),
            });
        }
        if target == token.subject.address() {
            return Err(ContractError::SelfDelegation);
        }
        if token.delegation.delegatee.contains(&target) {
            return Err(ContractError::DuplicateDelegatee);
        }
        token.delegation.delegatee.push(target);
        let id = token.id;
        let count = token.delegation.delegatee.len() as u32;
        self.delegatee_index.entry(target).or_default().insert(id);
        Ok((id, count))
    }

    /// Owner removes `target` from `subject`'s delegatee queue; the
    /// remaining order is preserved.
    pub fn revoke_delegation(
        &mut self,
        sender: Address,
        subject: Address,
        target: Address,
    ) -> Result<Hash32, ContractError> {
        if sender != self.owner {
            return Err(ContractError::NotOwner);
        }
        let token = self.tokens.get_mut(&subject).ok_or(ContractError::NoToken)?;
        let pos = token
            .delegation
            .delegatee
            .iter()
            .position(|a| *a == target)
            .ok_or(ContractError::NotADelegatee)?;
        token.delegation.delegatee.remove(pos);
        let id = token.id;
        Self::unindex(&mut self.delegatee_index, target, id);
        Ok(id)
    }

    /// Owner revokes the whole token. Depth/rights modes rewrite hashed
    /// fields, so the token stops validating; disable flips the flag.
    pub fn revoke_token(
        &mut self,
        sender: Address,
        subject: Address,
        mode: RevocationMode,
    ) -> Result<Hash32, ContractError> {
        if sender != self.owner {
            return Err(ContractError::NotOwner);
        }
        let token = self.tokens.get_mut(&subject).ok_or(ContractError::NoToken)?;
        let id = token.id;
        match mode {
            RevocationMode::ZeroDepth => {
                token.delegation.depth = 0;
                let cleared = std::mem::take(&mut token.delegation.delegatee);
                for target in cleared {
                    Self::unindex(&mut self.delegatee_index, target, id);
                }
            }
            RevocationMode::ClearRights => {
                token.rights = AccessRightSet::empty();
            }
            RevocationMode::Disable => {
                token.enabled = false;
            }
        }
        Ok(id)
    }

    fn unindex(
        index: &mut BTreeMap<Address, BTreeSet<Hash32>>,
        target: Address,
        id: Hash32,
    ) {
        if let Some(set) = index.get_mut(&target) {
            set.remove(&id);
            if set.is_empty() {
                index.remove(&target);
            }
        }
    }

    /// Resolves the token visible to `requester`: their own token when they
    /// are a subject, else the first token (in subject-address order) that
    /// lists them as a delegatee.
    pub fn query_token(&self, requester: &Address) -> Option<QueriedToken> {
        if let Some(token) = self.tokens.get(requester) {
            return Some(QueriedToken {
                token: token.clone(),
                delegated_via: None,
            });
        }
        if !self.delegatee_index.contains_key(requester) {
            return None;
        }
        for token in self.tokens.values() {
            if token.delegation.delegatee.contains(requester) {
                return Some(QueriedToken {
                    token: token.clone(),
                    delegated_via: Some(token.subject),
                });
            }
        }
        None
    }

    /// Recomputes the delegatee index from the token pool and compares;
    /// used as the inversion-coherence check.
    pub fn index_is_coherent(&self) -> bool {
        let mut expected: BTreeMap<Address, BTreeSet<Hash32>> = BTreeMap::new();
        for token in self.tokens.values() {
            for d in &token.delegation.delegatee {
                expected.entry(*d).or_default().insert(token.id);
            }
        }
        expected == self.delegatee_index
    }

    /// Canonical encoding of the pool; the delegatee index is derived state
    /// and is not encoded.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(self.owner.as_bytes());
        w.u32(self.tokens.len() as u32);
        for (addr, token) in &self.tokens {
            w.fixed(addr.as_bytes());
            token.encode(&mut w);
        }
        w.finish()
    }
}
