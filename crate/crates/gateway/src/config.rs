//! Config-file and policy-file parsing for the CLI.
//!
//! Config files are plain `key=value` lines with `#` comments; flags given
//! on the command line override file values. Policy files hold one rule
//! per line for the owner's decision engine.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};

use blendcac::authz::{PolicyRule, SubjectMatch};
use blendcac::capcontract::{ContextConstraint, ContextSet};
use blendcac::{AccessRightSet, Address, EntityKind, Vid};

/// Parses `key=value` lines. Later lines override earlier ones.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key=value", idx + 1);
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            bail!("config line {}: empty key", idx + 1);
        }
        map.insert(key.to_string(), value.to_string());
    }
    Ok(map)
}

/// Parses one `time:HH:MM-HH:MM`, `loc:tag` or `pred:id` context argument.
pub fn parse_context_arg(arg: &str) -> Result<ContextConstraint> {
    if let Some(window) = arg.strip_prefix("time:") {
        let Some((start, end)) = window.split_once('-') else {
            bail!("time window must be time:HH:MM-HH:MM");
        };
        return Ok(ContextConstraint::TimeWindow {
            start: start.parse().map_err(|e| anyhow::anyhow!("bad start time: {e}"))?,
            end: end.parse().map_err(|e| anyhow::anyhow!("bad end time: {e}"))?,
        });
    }
    if let Some(tag) = arg.strip_prefix("loc:") {
        if tag.is_empty() {
            bail!("empty location tag");
        }
        return Ok(ContextConstraint::LocationTag { tag: tag.to_string() });
    }
    if let Some(id) = arg.strip_prefix("pred:") {
        if id.is_empty() {
            bail!("empty predicate id");
        }
        return Ok(ContextConstraint::PredicateRef { id: id.to_string() });
    }
    bail!("context must start with time:, loc: or pred:");
}

/// Policy file: one rule per line, `#` comments.
///
/// ```text
/// rule <id> <priority> <vid:0x..|kind:device|kind:human> <object> <rights|-> <depth> [time:..-..] [loc:..] [pred:..]
/// ```
pub fn parse_policy_rules(text: &str) -> Result<Vec<PolicyRule>> {
    let mut rules = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 7 || fields[0] != "rule" {
            bail!("policy line {line_no}: expected 'rule <id> <priority> <subject> <object> <rights> <depth> [context...]'");
        }
        let rule_id: u32 = fields[1]
            .parse()
            .with_context(|| format!("policy line {line_no}: bad rule id"))?;
        let priority: i32 = fields[2]
            .parse()
            .with_context(|| format!("policy line {line_no}: bad priority"))?;
        let subject_match = parse_subject_match(fields[3])
            .with_context(|| format!("policy line {line_no}"))?;
        let object = Vid(Address::from_hex(fields[4])
            .map_err(|e| anyhow::anyhow!("policy line {line_no}: {e}"))?);
        let grant_rights = if fields[5] == "-" {
            AccessRightSet::empty()
        } else {
            AccessRightSet::parse_compact(fields[5])
                .map_err(|e| anyhow::anyhow!("policy line {line_no}: {e}"))?
        };
        let grant_depth: u32 = fields[6]
            .parse()
            .with_context(|| format!("policy line {line_no}: bad depth"))?;
        let mut constraints = Vec::new();
        for arg in &fields[7..] {
            constraints
                .push(parse_context_arg(arg).with_context(|| format!("policy line {line_no}"))?);
        }
        rules.push(PolicyRule {
            rule_id,
            subject_match,
            object,
            grant_rights,
            grant_context: ContextSet::new(constraints),
            grant_depth,
            priority,
        });
    }
    Ok(rules)
}

fn parse_subject_match(s: &str) -> Result<SubjectMatch> {
    if let Some(vid) = s.strip_prefix("vid:") {
        return Ok(SubjectMatch::Vid(Vid(Address::from_hex(vid).map_err(|e| {
            anyhow::anyhow!("bad vid: {e}")
        })?)));
    }
    if let Some(kind) = s.strip_prefix("kind:") {
        let kind = match kind {
            "device" => EntityKind::Device,
            "human" => EntityKind::Human,
            other => bail!("unknown entity kind '{other}'"),
        };
        return Ok(SubjectMatch::Kind(kind));
    }
    // bare 0x-address counts as a vid match
    if s.starts_with("0x") {
        return Ok(SubjectMatch::Vid(Vid(
            Address::from_hex(s).map_err(|e| anyhow::anyhow!("bad vid: {e}"))?
        )));
    }
    bail!("subject must be vid:0x.., kind:device or kind:human");
}
