//! Codified policies: versioned rule lists rendered into the context window.
//!
//! Rules are opaque lines here. Their meaning is left to the model (context
//! level) and to behavior certificates (function level).

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boundary::{validate_block_text, Namespace, TaggedSegment};
use crate::integrity::{RECORD_SEP, UNIT_SEP};
use crate::textfile;

pub const POLICY_EXTENSION: &str = ".a2as-policy.txt";

const DIGEST_DOMAIN: &[u8] = b"a2as-policy-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PolicyDocument {
    pub id: String,
    pub version: String,
    pub rules: Vec<String>,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("missing `{0}` header")]
    MissingHeader(&'static str),
    #[error("unknown header `{0}`")]
    UnknownHeader(String),
    #[error("missing `---` separator after headers")]
    MissingSeparator,
    #[error("policy has no rules")]
    NoRules,
    #[error("invalid version {0:?}: expected semantic version")]
    Version(String),
    #[error("rule {index}: {reason}")]
    Rule { index: usize, reason: String },
    #[error("{0}")]
    Syntax(String),
    #[error("cannot read policy: {0}")]
    Io(String),
}

impl PolicyDocument {
    /// Builds a policy from parts, validating every field and computing the
    /// digest.
    pub fn new(id: impl Into<String>, version: impl Into<String>, rules: Vec<String>) -> Result<Self, PolicyError> {
        let id = id.into();
        let version = version.into();
        if id.trim().is_empty() {
            return Err(PolicyError::MissingHeader("id"));
        }
        if id.bytes().any(|b| b == UNIT_SEP || b == RECORD_SEP) {
            return Err(PolicyError::Syntax("id contains a separator byte".into()));
        }
        semver::Version::parse(&version).map_err(|_| PolicyError::Version(version.clone()))?;
        if rules.is_empty() {
            return Err(PolicyError::NoRules);
        }
        for (index, rule) in rules.iter().enumerate() {
            let reason = if rule.trim().is_empty() {
                Some("empty rule".to_string())
            } else if rule.contains(['\n', '\r']) {
                Some("rules are single lines".to_string())
            } else if rule.bytes().any(|b| b == UNIT_SEP || b == RECORD_SEP) {
                Some("rule contains a separator byte".to_string())
            } else {
                validate_block_text(rule).err().map(|e| e.to_string())
            };
            if let Some(reason) = reason {
                return Err(PolicyError::Rule { index, reason });
            }
        }
        let digest = digest_of(&id, &version, &rules);
        Ok(Self {
            id,
            version,
            rules,
            digest,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::Io(e.to_string()))?;
        parse_policy(&text)
    }

    /// Serializes back to the file format.
    pub fn to_text(&self) -> String {
        textfile::join(&[("id", &self.id), ("version", &self.version)], &self.rules)
    }

    /// Recomputes the digest and compares it with the stored one.
    pub fn digest_matches(&self) -> bool {
        digest_of(&self.id, &self.version, &self.rules) == self.digest
    }
}

fn digest_of(id: &str, version: &str, rules: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(DIGEST_DOMAIN);
    hasher.update([UNIT_SEP]);
    hasher.update(id.as_bytes());
    hasher.update([UNIT_SEP]);
    hasher.update(version.as_bytes());
    hasher.update([UNIT_SEP]);
    for (i, rule) in rules.iter().enumerate() {
        if i > 0 {
            hasher.update([RECORD_SEP]);
        }
        hasher.update(rule.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Parses the `id:` / `version:` / `---` / rules file format.
pub fn parse_policy(text: &str) -> Result<PolicyDocument, PolicyError> {
    let parsed = textfile::split(text).map_err(PolicyError::Syntax)?;
    if !parsed.has_separator {
        return Err(PolicyError::MissingSeparator);
    }
    if let Some(key) = parsed.headers.keys().find(|k| !matches!(k.as_str(), "id" | "version")) {
        return Err(PolicyError::UnknownHeader(key.clone()));
    }
    let id = parsed.headers.get("id").ok_or(PolicyError::MissingHeader("id"))?;
    let version = parsed
        .headers
        .get("version")
        .ok_or(PolicyError::MissingHeader("version"))?;
    PolicyDocument::new(id.clone(), version.clone(), parsed.lines)
}

pub fn policy_digest(policy: &PolicyDocument) -> &str {
    &policy.digest
}

pub fn policy_segment(policy: &PolicyDocument) -> TaggedSegment {
    TaggedSegment::block(Namespace::Policy, &policy.rules.join("\n"))
}

/// `<a2as:policy>`, one rule per line, `</a2as:policy>`.
pub fn render_policy(policy: &PolicyDocument) -> String {
    policy_segment(policy).render()
}
