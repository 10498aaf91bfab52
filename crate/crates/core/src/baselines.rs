//! RBAC and ABAC comparison engines.
//!
//! Both baselines store their authorization representation on the ledger
//! (user-role pairs or user attributes, through the same transaction
//! machinery as capability tokens) and resolve permissions by searching a
//! locally loaded store during verification. The store search is a table
//! scan by design: the point of the comparison is that baseline
//! verification cost tracks store size while the capability path touches
//! only the token. Every check reports how many store entries it examined.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::capcontract::{AccessRight, AccessRightSet, CallOutcome, ContractCall, ContractError};
use crate::codec::Writer;
use crate::identity::{Address, Vid};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at line {line}: {message}")]
pub struct StoreParseError {
    pub line: usize,
    pub message: String,
}

impl StoreParseError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        StoreParseError {
            line,
            message: message.into(),
        }
    }
}

/// One user-role pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleAssignment {
    pub user: Address,
    pub role: String,
}

/// Rights a role holds on one object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolePermission {
    pub role: String,
    pub object: Vid,
    pub rights: AccessRightSet,
}

/// Attribute set of one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeAssignment {
    pub user: Address,
    pub attributes: BTreeMap<String, String>,
}

/// Rights granted on one object to any user whose attributes cover the
/// required set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRule {
    pub rule_id: u32,
    pub required_attributes: BTreeMap<String, String>,
    pub object: Vid,
    pub rights: AccessRightSet,
}

/// Line-oriented store of role/permission and attribute/rule tables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BaselineStore {
    pub roles: Vec<RoleAssignment>,
    pub perms: Vec<RolePermission>,
    pub attrs: Vec<AttributeAssignment>,
    pub rules: Vec<AttributeRule>,
}

impl BaselineStore {
    pub fn len(&self) -> usize {
        self.roles.len() + self.perms.len() + self.attrs.len() + self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses the store format: one record per line, `#` comments.
    ///
    /// ```text
    /// role <user> <role>
    /// perm <role> <object> <R|W|X>+
    /// attr <user> <name>=<value>
    /// rule <id> <name>=<value>[,<name>=<value>...] <object> <R|W|X>+
    /// ```
    pub fn parse(text: &str) -> Result<Self, StoreParseError> {
        let mut store = BaselineStore::default();
        let mut seen_rule_ids = BTreeSet::new();
        let mut seen_role_pairs = BTreeSet::new();
        let mut seen_perm_pairs = BTreeSet::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "role" => {
                    if fields.len() != 3 {
                        return Err(StoreParseError::new(line_no, "expected: role <user> <role>"));
                    }
                    let user = Address::from_hex(fields[1])
                        .map_err(|e| StoreParseError::new(line_no, e.to_string()))?;
                    if !seen_role_pairs.insert((user, fields[2].to_string())) {
                        return Err(StoreParseError::new(line_no, "duplicate user-role pair"));
                    }
                    store.roles.push(RoleAssignment {
                        user,
                        role: fields[2].to_string(),
                    });
                }
                "perm" => {
                    if fields.len() != 4 {
                        return Err(StoreParseError::new(
                            line_no,
                            "expected: perm <role> <object> <rights>",
                        ));
                    }
                    let object = Vid(Address::from_hex(fields[2])
                        .map_err(|e| StoreParseError::new(line_no, e.to_string()))?);
                    let rights = AccessRightSet::parse_compact(fields[3])
                        .map_err(|e| StoreParseError::new(line_no, e.to_string()))?;
                    if !seen_perm_pairs.insert((fields[1].to_string(), object)) {
                        return Err(StoreParseError::new(line_no, "duplicate (role, object) pair"));
                    }
                    store.perms.push(RolePermission {
                        role: fields[1].to_string(),
                        object,
                        rights,
                    });
                }
                "attr" => {
                    if fields.len() != 3 {
                        return Err(StoreParseError::new(
                            line_no,
                            "expected: attr <user> <name>=<value>",
                        ));
                    }
                    let user = Address::from_hex(fields[1])
                        .map_err(|e| StoreParseError::new(line_no, e.to_string()))?;
                    let (name, value) = split_attr(fields[2])
                        .ok_or_else(|| StoreParseError::new(line_no, "expected <name>=<value>"))?;
                    let entry = store.attrs.iter_mut().find(|a| a.user == user);
                    match entry {
                        Some(a) => {
                            if a.attributes.insert(name.clone(), value).is_some() {
                                return Err(StoreParseError::new(
                                    line_no,
                                    format!("duplicate attribute name '{name}' for user"),
                                ));
                            }
                        }
                        None => {
                            store.attrs.push(AttributeAssignment {
                                user,
                                attributes: BTreeMap::from([(name, value)]),
                            });
                        }
                    }
                }
                "rule" => {
                    if fields.len() != 5 {
                        return Err(StoreParseError::new(
                            line_no,
                            "expected: rule <id> <attrs> <object> <rights>",
                        ));
                    }
                    let rule_id: u32 = fields[1]
                        .parse()
                        .map_err(|_| StoreParseError::new(line_no, "bad rule id"))?;
                    if !seen_rule_ids.insert(rule_id) {
                        return Err(StoreParseError::new(line_no, format!("duplicate rule_id {rule_id}")));
                    }
                    let mut required = BTreeMap::new();
                    for pair in fields[2].split(',') {
                        let (name, value) = split_attr(pair)
                            .ok_or_else(|| StoreParseError::new(line_no, "expected <name>=<value>"))?;
                        if required.insert(name, value).is_some() {
                            return Err(StoreParseError::new(line_no, "duplicate attribute in rule"));
                        }
                    }
                    let object = Vid(Address::from_hex(fields[3])
                        .map_err(|e| StoreParseError::new(line_no, e.to_string()))?);
                    let rights = AccessRightSet::parse_compact(fields[4])
                        .map_err(|e| StoreParseError::new(line_no, e.to_string()))?;
                    store.rules.push(AttributeRule {
                        rule_id,
                        required_attributes: required,
                        object,
                        rights,
                    });
                }
                other => {
                    return Err(StoreParseError::new(
                        line_no,
                        format!("unknown record type '{other}'"),
                    ));
                }
            }
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, StoreParseError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StoreParseError::new(0, format!("cannot read store file: {e}")))?;
        Self::parse(&text)
    }

    /// Renders back to the line format; `parse` of the output reproduces
    /// the store.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.roles {
            out.push_str(&format!("role {} {}\n", r.user, r.role));
        }
        for p in &self.perms {
            out.push_str(&format!("perm {} {} {}\n", p.role, p.object, p.rights.to_compact()));
        }
        for a in &self.attrs {
            for (name, value) in &a.attributes {
                out.push_str(&format!("attr {} {}={}\n", a.user, name, value));
            }
        }
        for r in &self.rules {
            let attrs: Vec<String> = r
                .required_attributes
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            out.push_str(&format!(
                "rule {} {} {} {}\n",
                r.rule_id,
                attrs.join(","),
                r.object,
                r.rights.to_compact()
            ));
        }
        out
    }
}

fn split_attr(s: &str) -> Option<(String, String)> {
    let (name, value) = s.split_once('=')?;
    if name.is_empty() || value.is_empty() {
        return None;
    }
    Some((name.to_string(), value.to_string()))
}

/// Grant/deny plus the number of store entries the search examined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineVerdict {
    pub granted: bool,
    pub entries_scanned: u64,
}

/// RBAC check against roles resolved elsewhere (normally from the
/// role-bearing contract state).
pub fn rbac_check_with_roles(
    roles: &BTreeSet<String>,
    object: &Vid,
    action: AccessRight,
    store: &BaselineStore,
) -> BaselineVerdict {
    let mut scanned = 0u64;
    for perm in &store.perms {
        scanned += 1;
        if roles.contains(&perm.role) && perm.object == *object && perm.rights.contains(action) {
            return BaselineVerdict {
                granted: true,
                entries_scanned: scanned,
            };
        }
    }
    BaselineVerdict {
        granted: false,
        entries_scanned: scanned,
    }
}

/// RBAC check resolving the user's roles from the store's own role table.
pub fn rbac_check(
    user: &Address,
    object: &Vid,
    action: AccessRight,
    store: &BaselineStore,
) -> BaselineVerdict {
    let mut scanned = 0u64;
    let mut roles = BTreeSet::new();
    for r in &store.roles {
        scanned += 1;
        if r.user == *user {
            roles.insert(r.role.clone());
        }
    }
    let verdict = rbac_check_with_roles(&roles, object, action, store);
    BaselineVerdict {
        granted: verdict.granted,
        entries_scanned: scanned + verdict.entries_scanned,
    }
}

/// ABAC check against attributes resolved elsewhere. Combination is
/// permit-overrides: any satisfied rule covering the action grants.
pub fn abac_check_with_attributes(
    attributes: &BTreeMap<String, String>,
    object: &Vid,
    action: AccessRight,
    store: &BaselineStore,
) -> BaselineVerdict {
    let mut scanned = 0u64;
    for rule in &store.rules {
        scanned += 1;
        if rule.object != *object || !rule.rights.contains(action) {
            continue;
        }
        let satisfied = rule
            .required_attributes
            .iter()
            .all(|(k, v)| attributes.get(k) == Some(v));
        if satisfied {
            return BaselineVerdict {
                granted: true,
                entries_scanned: scanned,
            };
        }
    }
    BaselineVerdict {
        granted: false,
        entries_scanned: scanned,
    }
}

/// ABAC check resolving the user's attributes from the store.
pub fn abac_check(
    user: &Address,
    object: &Vid,
    action: AccessRight,
    store: &BaselineStore,
) -> BaselineVerdict {
    let mut scanned = 0u64;
    let mut attributes = BTreeMap::new();
    for a in &store.attrs {
        scanned += 1;
        if a.user == *user {
            attributes = a.attributes.clone();
        }
    }
    let verdict = abac_check_with_attributes(&attributes, object, action, store);
    BaselineVerdict {
        granted: verdict.granted,
        entries_scanned: scanned + verdict.entries_scanned,
    }
}

/// Ledger-hosted role table: user address to role set. Same transaction
/// machinery as the capability contract, role payload instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleContractState {
    pub owner: Address,
    pub roles: BTreeMap<Address, BTreeSet<String>>,
}

impl RoleContractState {
    pub fn new(owner: Address) -> Self {
        RoleContractState {
            owner,
            roles: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, sender: Address, call: &ContractCall) -> Result<CallOutcome, ContractError> {
        if sender != self.owner {
            return Err(ContractError::NotOwner);
        }
        match call {
            ContractCall::GrantRole { user, role } => {
                self.roles.entry(*user).or_default().insert(role.clone());
                Ok(CallOutcome::RoleGranted)
            }
            ContractCall::RevokeRole { user, role } => {
                if let Some(set) = self.roles.get_mut(user) {
                    set.remove(role);
                    if set.is_empty() {
                        self.roles.remove(user);
                    }
                }
                Ok(CallOutcome::RoleRevoked)
            }
            _ => Err(ContractError::CallNotSupported),
        }
    }

    pub fn roles_of(&self, user: &Address) -> BTreeSet<String> {
        self.roles.get(user).cloned().unwrap_or_default()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(self.owner.as_bytes());
        w.u32(self.roles.len() as u32);
        for (user, roles) in &self.roles {
            w.fixed(user.as_bytes());
            w.u32(roles.len() as u32);
            for role in roles {
                w.string(role);
            }
        }
        w.finish()
    }
}

/// Ledger-hosted attribute table: user address to attribute map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeContractState {
    pub owner: Address,
    pub attributes: BTreeMap<Address, BTreeMap<String, String>>,
}

impl AttributeContractState {
    pub fn new(owner: Address) -> Self {
        AttributeContractState {
            owner,
            attributes: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, sender: Address, call: &ContractCall) -> Result<CallOutcome, ContractError> {
        if sender != self.owner {
            return Err(ContractError::NotOwner);
        }
        match call {
            ContractCall::SetAttribute { user, name, value } => {
                self.attributes
                    .entry(*user)
                    .or_default()
                    .insert(name.clone(), value.clone());
                Ok(CallOutcome::AttributeSet)
            }
            ContractCall::ClearAttribute { user, name } => {
                if let Some(map) = self.attributes.get_mut(user) {
                    map.remove(name);
                    if map.is_empty() {
                        self.attributes.remove(user);
                    }
                }
                Ok(CallOutcome::AttributeCleared)
            }
            _ => Err(ContractError::CallNotSupported),
        }
    }

    pub fn attributes_of(&self, user: &Address) -> BTreeMap<String, String> {
        self.attributes.get(user).cloned().unwrap_or_default()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(self.owner.as_bytes());
        w.u32(self.attributes.len() as u32);
        for (user, attrs) in &self.attributes {
            w.fixed(user.as_bytes());
            w.u32(attrs.len() as u32);
            for (name, value) in attrs {
                w.string(name);
                w.string(value);
            }
        }
        w.finish()
    }
}
