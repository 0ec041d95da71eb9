//! Authenticated prompts.
//!
//! Every untrusted message is MACed over a canonical encoding of its origin,
//! metadata, content and (optionally) the digest of the active policy. The
//! first 8 hex chars go into the boundary tag; the full 64-hex MAC goes into
//! the audit log.
//!
//! Canonical encoding (US = 0x1F, RS = 0x1E):
//!
//! ```text
//! "v1" US kind US source_id US k1=v1 RS k2=v2 ... US policy_digest US content
//! ```
//!
//! Metadata pairs are sorted by key. Separator bytes are rejected in every
//! field except the trailing content, and `=` is rejected in keys.

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::boundary::{is_hash8, unescape_tags, Hash8, Namespace, TaggedSegment};
use crate::context::{ContextWindow, Message, RuntimeConfig};

pub const UNIT_SEP: u8 = 0x1f;
pub const RECORD_SEP: u8 = 0x1e;
const FORMAT_VERSION: &[u8] = b"v1";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    HmacSha256,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSignature {
    pub key_id: String,
    pub algorithm: Algorithm,
    pub hash8: Hash8,
    pub hash_full: String,
    /// What the MAC covers, for audit readers.
    pub covered: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CanonicalizationError {
    #[error("{field} contains a separator byte")]
    Separator { field: String },
    #[error("metadata key {0:?} contains '='")]
    EqualsInKey(String),
    #[error("policy digest must be 64 lowercase hex chars")]
    PolicyDigest,
}

pub fn is_hex64(text: &str) -> bool {
    text.len() == 64 && text.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn has_sep(text: &str) -> bool {
    text.bytes().any(|b| b == UNIT_SEP || b == RECORD_SEP)
}

pub fn canonicalize(message: &Message, policy_digest: Option<&str>) -> Result<Vec<u8>, CanonicalizationError> {
    if has_sep(&message.origin.source_id) {
        return Err(CanonicalizationError::Separator {
            field: "origin.source_id".into(),
        });
    }
    for (k, v) in &message.metadata {
        if has_sep(k) || has_sep(v) {
            return Err(CanonicalizationError::Separator {
                field: format!("metadata[{k}]"),
            });
        }
        if k.contains('=') {
            return Err(CanonicalizationError::EqualsInKey(k.clone()));
        }
    }
    if let Some(d) = policy_digest {
        if !is_hex64(d) {
            return Err(CanonicalizationError::PolicyDigest);
        }
    }

    let mut out = Vec::with_capacity(message.content.len() + 64);
    out.extend_from_slice(FORMAT_VERSION);
    out.push(UNIT_SEP);
    out.extend_from_slice(message.origin.kind.as_str().as_bytes());
    out.push(UNIT_SEP);
    out.extend_from_slice(message.origin.source_id.as_bytes());
    out.push(UNIT_SEP);
    // BTreeMap iteration is already sorted by key.
    for (i, (k, v)) in message.metadata.iter().enumerate() {
        if i > 0 {
            out.push(RECORD_SEP);
        }
        out.extend_from_slice(k.as_bytes());
        out.push(b'=');
        out.extend_from_slice(v.as_bytes());
    }
    out.push(UNIT_SEP);
    out.extend_from_slice(policy_digest.unwrap_or("").as_bytes());
    out.push(UNIT_SEP);
    out.extend_from_slice(message.content.as_bytes());
    Ok(out)
}

pub(crate) fn hmac_sha256(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

pub fn compute_signature(
    message: &Message,
    config: &RuntimeConfig,
    policy_digest: Option<&str>,
) -> Result<PromptSignature, CanonicalizationError> {
    let bytes = canonicalize(message, policy_digest)?;
    let full = hex::encode(hmac_sha256(config.signing_key.as_bytes(), &bytes));
    let hash8 = Hash8::parse(&full[..8]).expect("hex prefix is a valid hash8");
    let meta_keys: Vec<&str> = message.metadata.keys().map(String::as_str).collect();
    let covered = format!(
        "origin={} source_id={:?} metadata=[{}] policy={} content={}B",
        message.origin.kind,
        message.origin.source_id,
        meta_keys.join(","),
        policy_digest.map(|d| &d[..12]).unwrap_or("none"),
        message.content.len()
    );
    Ok(PromptSignature {
        key_id: config.key_id.clone(),
        algorithm: Algorithm::HmacSha256,
        hash8,
        hash_full: full,
        covered,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentVerdict {
    Valid,
    Corrupted,
    Unsigned,
    Malformed,
}

impl SegmentVerdict {
    /// Corrupted and malformed segments both reject the context.
    pub fn rejects(self) -> bool {
        matches!(self, SegmentVerdict::Corrupted | SegmentVerdict::Malformed)
    }
}

fn ct_eq(a: &str, b: &str) -> bool {
    a.len() == b.len() && bool::from(a.as_bytes().ct_eq(b.as_bytes()))
}

/// Checks a rendered segment against the trusted record of the message it
/// was produced from. Origin and metadata come from `original`; content comes
/// from the segment itself, so tampering with either side shows up.
pub fn verify_segment(
    segment: &TaggedSegment,
    original: &Message,
    config: &RuntimeConfig,
    policy_digest: Option<&str>,
    logged_full: Option<&str>,
) -> SegmentVerdict {
    let Some(hash8) = segment.hash8.as_deref() else {
        return SegmentVerdict::Unsigned;
    };
    if !is_hash8(hash8) {
        return SegmentVerdict::Malformed;
    }
    if Namespace::for_origin(original.origin.kind) != Some(segment.namespace) {
        return SegmentVerdict::Corrupted;
    }
    let Ok(content) = unescape_tags(&segment.content) else {
        return SegmentVerdict::Corrupted;
    };
    let candidate = Message {
        content,
        ..original.clone()
    };
    let Ok(sig) = compute_signature(&candidate, config, policy_digest) else {
        return SegmentVerdict::Corrupted;
    };
    let mut ok = ct_eq(sig.hash8.as_str(), hash8);
    if let Some(full) = logged_full {
        ok &= ct_eq(&sig.hash_full, full);
    }
    if ok {
        SegmentVerdict::Valid
    } else {
        SegmentVerdict::Corrupted
    }
}

/// Trusted records of the untrusted messages that went into a context, in
/// order, optionally with the full MACs from the audit log.
#[derive(Debug, Clone, Default)]
pub struct MessageStore {
    entries: Vec<(Message, Option<String>)>,
}

impl MessageStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps the untrusted messages of a transcript, in order.
    pub fn from_transcript<'a>(messages: impl IntoIterator<Item = &'a Message>) -> Self {
        Self {
            entries: messages
                .into_iter()
                .filter(|m| !m.is_trusted())
                .map(|m| (m.clone(), None))
                .collect(),
        }
    }

    pub fn push(&mut self, message: Message, logged_full: Option<String>) {
        self.entries.push((message, logged_full));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub index: usize,
    pub verdict: SegmentVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overall {
    Valid,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// One entry per untrusted-namespace segment, `index` counting those
    /// segments in window order.
    pub verdicts: Vec<SegmentReport>,
    /// Signed originals with no segment left in the window.
    pub missing: usize,
    pub overall: Overall,
}

impl VerificationReport {
    pub fn is_valid(&self) -> bool {
        self.overall == Overall::Valid
    }

    pub fn count(&self, verdict: SegmentVerdict) -> usize {
        self.verdicts.iter().filter(|v| v.verdict == verdict).count()
    }
}

pub fn verify_context(
    window: &ContextWindow,
    originals: &MessageStore,
    config: &RuntimeConfig,
    policy_digest: Option<&str>,
) -> VerificationReport {
    let mut verdicts = Vec::new();
    let mut next = originals.entries.iter();
    let untrusted = window
        .segments()
        .filter(|s| matches!(s.namespace, Namespace::User | Namespace::Tool | Namespace::Agent));
    for (index, segment) in untrusted.enumerate() {
        let verdict = if segment.hash8.is_none() {
            SegmentVerdict::Unsigned
        } else {
            match next.next() {
                Some((original, full)) => {
                    verify_segment(segment, original, config, policy_digest, full.as_deref())
                }
                None => SegmentVerdict::Corrupted,
            }
        };
        verdicts.push(SegmentReport { index, verdict });
    }
    let missing = next.count();
    let rejected = missing > 0 || verdicts.iter().any(|v| v.verdict.rejects());
    VerificationReport {
        verdicts,
        missing,
        overall: if rejected {
            Overall::Rejected
        } else {
            Overall::Valid
        },
    }
}
