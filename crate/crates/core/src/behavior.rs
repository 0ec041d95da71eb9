//! Behavior certificates: declared agent permissions, their signatures, and
//! the default-deny evaluation of every action an agent attempts.
//!
//! A certificate document looks like:
//!
//! ```json
//! {
//!   "agent_id": "agent-email-reporter-v1",
//!   "permissions": {
//!     "email": { "provider": "gmail" },
//!     "files": { "write": "./out/email_report.json" },
//!     "functions": [
//!       { "name": "call:email.list_messages", "critical": true },
//!       { "name": "call:email.read_message", "critical": true }
//!     ]
//!   }
//! }
//! ```
//!
//! plus optional `issuer`, `issued_at`, `expires_at` and `signature`. Unknown
//! fields are rejected. A single-string `read`/`write` is read as a
//! one-element list.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, Utc};
use ed25519_dalek::{Signer, Verifier};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::context::{ApprovalMode, MacKey, RuntimeConfig};
use crate::integrity::hmac_sha256;

pub const CERT_EXTENSION: &str = ".a2as-cert.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorCertificate {
    pub agent_id: String,
    pub permissions: PermissionSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issuer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issued_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expires_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<SignatureEnvelope>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermissionSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<EmailScope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<FilePermissions>,
    #[serde(default)]
    pub functions: Vec<FunctionPermission>,
    /// Host patterns the agent may reach. Not part of the original schema.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub network: Vec<String>,
}

/// Scopes the email tool the agent talks to. The tool host checks that the
/// tool identifies with this provider; it does not gate function calls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmailScope {
    pub provider: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilePermissions {
    #[serde(default, deserialize_with = "one_or_many", skip_serializing_if = "Vec::is_empty")]
    pub read: Vec<String>,
    #[serde(default, deserialize_with = "one_or_many", skip_serializing_if = "Vec::is_empty")]
    pub write: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionPermission {
    pub name: String,
    #[serde(default)]
    pub critical: bool,
}

impl FunctionPermission {
    pub fn new(name: impl Into<String>, critical: bool) -> Self {
        Self {
            name: name.into(),
            critical,
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignatureAlgorithm {
    #[serde(rename = "ed25519")]
    Ed25519,
    #[serde(rename = "hmac-sha256")]
    HmacSha256,
}

impl fmt::Display for SignatureAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignatureAlgorithm::Ed25519 => "ed25519",
            SignatureAlgorithm::HmacSha256 => "hmac-sha256",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureEnvelope {
    pub algorithm: SignatureAlgorithm,
    pub key_id: String,
    /// Lowercase hex.
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CertificateError {
    #[error("certificate field `{field}`: {reason}")]
    Parse { field: String, reason: String },
    #[error("unknown key id `{0}`")]
    UnknownKey(String),
    #[error("bad key material: {0}")]
    Key(String),
    #[error("{0}")]
    Io(String),
}

fn parse_err(field: impl Into<String>, reason: impl Into<String>) -> CertificateError {
    CertificateError::Parse {
        field: field.into(),
        reason: reason.into(),
    }
}

fn field_from_serde_message(msg: &str) -> String {
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_owned();
            }
        }
    }
    "document".to_owned()
}

/// Strict parse of a certificate document.
pub fn parse_certificate(document: &str) -> Result<BehaviorCertificate, CertificateError> {
    let cert: BehaviorCertificate = serde_json::from_str(document)
        .map_err(|e| parse_err(field_from_serde_message(&e.to_string()), e.to_string()))?;
    cert.validate()?;
    Ok(cert)
}

impl BehaviorCertificate {
    pub fn new(agent_id: impl Into<String>, permissions: PermissionSet) -> Self {
        Self {
            agent_id: agent_id.into(),
            permissions,
            issuer: None,
            issued_at: None,
            expires_at: None,
            signature: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, CertificateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CertificateError::Io(format!("{}: {e}", path.display())))?;
        parse_certificate(&text)
    }

    pub fn validate(&self) -> Result<(), CertificateError> {
        if self.agent_id.trim().is_empty() {
            return Err(parse_err("agent_id", "must be non-empty"));
        }
        if let (Some(issued), Some(expires)) = (self.issued_at, self.expires_at) {
            if expires <= issued {
                return Err(parse_err("expires_at", "must be later than issued_at"));
            }
        }
        if self.permissions.functions.iter().any(|f| f.name.trim().is_empty()) {
            return Err(parse_err("functions", "function names must be non-empty"));
        }
        if let Some(files) = &self.permissions.files {
            for (field, patterns) in [("files.read", &files.read), ("files.write", &files.write)] {
                for p in patterns {
                    if p.is_empty() {
                        return Err(parse_err(field, "empty path pattern"));
                    }
                    if lexical_normalize(Path::new(p)).is_err() {
                        return Err(parse_err(field, format!("pattern {p:?} has `..` after normalization")));
                    }
                }
            }
        }
        if self.permissions.network.iter().any(|h| h.trim().is_empty()) {
            return Err(parse_err("network", "empty host pattern"));
        }
        Ok(())
    }

    /// Sorted-key, whitespace-free JSON of the whole certificate.
    pub fn to_canonical_json(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("certificate serializes"))
    }

    /// The bytes a signature covers: canonical JSON of every field except
    /// `signature`.
    pub fn signing_payload(&self) -> Vec<u8> {
        let mut unsigned = self.clone();
        unsigned.signature = None;
        unsigned.to_canonical_json().into_bytes()
    }

    pub fn function(&self, name: &str) -> Option<&FunctionPermission> {
        self.permissions.functions.iter().find(|f| f.name == name)
    }
}

/// JSON with object keys sorted at every level and no insignificant
/// whitespace.
pub fn canonical_json(value: &Value) -> String {
    fn write(value: &Value, out: &mut String) {
        match value {
            Value::Object(map) => {
                let sorted: BTreeMap<&String, &Value> = map.iter().collect();
                out.push('{');
                for (i, (k, v)) in sorted.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    write(v, out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(v, out);
                }
                out.push(']');
            }
            scalar => out.push_str(&scalar.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

pub fn lint_certificate(cert: &BehaviorCertificate) -> Vec<Finding> {
    let mut findings = Vec::new();
    let warn = |message: String| Finding {
        severity: Severity::Warning,
        message,
    };

    if cert.expires_at.is_none() {
        findings.push(warn("no expiry set".into()));
    }
    if let Some(files) = &cert.permissions.files {
        for pattern in &files.write {
            let first = Path::new(pattern)
                .components()
                .find(|c| matches!(c, Component::Normal(_)));
            if first.is_some_and(|c| c.as_os_str().to_string_lossy().contains('*')) {
                findings.push(warn(format!("write pattern {pattern:?} has a wildcard at the root")));
            }
        }
    }
    if cert.permissions.functions.is_empty() {
        findings.push(warn("no functions declared".into()));
    }
    let mut seen = HashSet::new();
    let mut reported = HashSet::new();
    for f in &cert.permissions.functions {
        if !seen.insert(f.name.as_str()) && reported.insert(f.name.as_str()) {
            findings.push(Finding {
                severity: Severity::Error,
                message: format!("duplicate function name {:?}", f.name),
            });
        }
    }
    findings
}

/// Key used to sign certificates.
pub enum CertSigner {
    Hmac { key_id: String, key: MacKey },
    Ed25519 { key_id: String, key: ed25519_dalek::SigningKey },
}

impl CertSigner {
    pub fn key_id(&self) -> &str {
        match self {
            CertSigner::Hmac { key_id, .. } | CertSigner::Ed25519 { key_id, .. } => key_id,
        }
    }

    pub fn ed25519_from_hex(key_id: impl Into<String>, seed_hex: &str) -> Result<Self, CertificateError> {
        let bytes: [u8; 32] = hex::decode(seed_hex.trim())
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| CertificateError::Key("ed25519 secret must be 32 hex-encoded bytes".into()))?;
        Ok(CertSigner::Ed25519 {
            key_id: key_id.into(),
            key: ed25519_dalek::SigningKey::from_bytes(&bytes),
        })
    }
}

pub fn sign_certificate(cert: &BehaviorCertificate, signer: &CertSigner) -> BehaviorCertificate {
    let payload = cert.signing_payload();
    let (algorithm, value) = match signer {
        CertSigner::Hmac { key, .. } => (
            SignatureAlgorithm::HmacSha256,
            hex::encode(hmac_sha256(key.as_bytes(), &payload)),
        ),
        CertSigner::Ed25519 { key, .. } => (
            SignatureAlgorithm::Ed25519,
            hex::encode(key.sign(&payload).to_bytes()),
        ),
    };
    let mut signed = cert.clone();
    signed.signature = Some(SignatureEnvelope {
        algorithm,
        key_id: signer.key_id().to_owned(),
        value,
    });
    signed
}

#[derive(Clone)]
pub enum TrustedKey {
    Hmac(MacKey),
    Ed25519(ed25519_dalek::VerifyingKey),
}

impl fmt::Debug for TrustedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrustedKey::Hmac(_) => f.write_str("Hmac(<redacted>)"),
            TrustedKey::Ed25519(k) => write!(f, "Ed25519({})", hex::encode(k.as_bytes())),
        }
    }
}

/// Verification keys indexed by key id.
///
/// On disk: a directory with `<key_id>.hmac` (hex MAC key) and
/// `<key_id>.ed25519` (hex public key) files. Other files are ignored.
#[derive(Debug, Clone, Default)]
pub struct TrustStore {
    keys: HashMap<String, TrustedKey>,
}

impl TrustStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key_id: impl Into<String>, key: TrustedKey) {
        self.keys.insert(key_id.into(), key);
    }

    pub fn get(&self, key_id: &str) -> Option<&TrustedKey> {
        self.keys.get(key_id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn load_dir(dir: &Path) -> Result<Self, CertificateError> {
        let mut store = Self::new();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| CertificateError::Io(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| CertificateError::Io(e.to_string()))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let read = || {
                std::fs::read_to_string(&path).map_err(|e| CertificateError::Io(format!("{}: {e}", path.display())))
            };
            if let Some(id) = name.strip_suffix(".hmac") {
                let key = MacKey::from_hex(&read()?).map_err(|e| CertificateError::Key(format!("{name}: {e}")))?;
                store.insert(id, TrustedKey::Hmac(key));
            } else if let Some(id) = name.strip_suffix(".ed25519") {
                let bytes: [u8; 32] = hex::decode(read()?.trim())
                    .ok()
                    .and_then(|b| b.try_into().ok())
                    .ok_or_else(|| CertificateError::Key(format!("{name}: expected 32 hex-encoded bytes")))?;
                let key = ed25519_dalek::VerifyingKey::from_bytes(&bytes)
                    .map_err(|e| CertificateError::Key(format!("{name}: {e}")))?;
                store.insert(id, TrustedKey::Ed25519(key));
            }
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertVerdict {
    Valid,
    Invalid,
    Unsigned,
}

pub fn verify_certificate(cert: &BehaviorCertificate, store: &TrustStore) -> Result<CertVerdict, CertificateError> {
    let Some(sig) = &cert.signature else {
        return Ok(CertVerdict::Unsigned);
    };
    let key = store
        .get(&sig.key_id)
        .ok_or_else(|| CertificateError::UnknownKey(sig.key_id.clone()))?;
    let Ok(value) = hex::decode(&sig.value) else {
        return Ok(CertVerdict::Invalid);
    };
    let payload = cert.signing_payload();
    let ok = match (key, sig.algorithm) {
        (TrustedKey::Hmac(k), SignatureAlgorithm::HmacSha256) => {
            bool::from(hmac_sha256(k.as_bytes(), &payload).as_slice().ct_eq(&value))
        }
        (TrustedKey::Ed25519(k), SignatureAlgorithm::Ed25519) => ed25519_dalek::Signature::from_slice(&value)
            .map(|s| k.verify(&payload, &s).is_ok())
            .unwrap_or(false),
        _ => false,
    };
    Ok(if ok { CertVerdict::Valid } else { CertVerdict::Invalid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    FunctionCall,
    FileRead,
    FileWrite,
    Network,
    #[serde(other)]
    Unknown,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextFlags {
    #[serde(default)]
    pub has_authenticated_prompt: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approval_token: Option<String>,
    /// hash8 of the context segment the action was derived from, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_segment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRequest {
    pub kind: ActionKind,
    /// Function name, path or host depending on `kind`.
    pub name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub args: BTreeMap<String, String>,
    #[serde(default)]
    pub context_flags: ContextFlags,
}

impl ActionRequest {
    pub fn new(kind: ActionKind, name: impl Into<String>) -> Self {
        Self {
            kind,
            name: name.into(),
            args: BTreeMap::new(),
            context_flags: ContextFlags::default(),
        }
    }

    pub fn call(name: impl Into<String>) -> Self {
        Self::new(ActionKind::FunctionCall, name)
    }

    pub fn read(path: impl Into<String>) -> Self {
        Self::new(ActionKind::FileRead, path)
    }

    pub fn write(path: impl Into<String>) -> Self {
        Self::new(ActionKind::FileWrite, path)
    }

    pub fn network(host: impl Into<String>) -> Self {
        Self::new(ActionKind::Network, host)
    }

    pub fn with_arg(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.args.insert(key.into(), value.into());
        self
    }

    pub fn with_approval_token(mut self, token: impl Into<String>) -> Self {
        self.context_flags.approval_token = Some(token.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Deny,
    RequireApproval,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Allow => "allow",
            Verdict::Deny => "deny",
            Verdict::RequireApproval => "require_approval",
        })
    }
}

/// Which permission entry produced a decision.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RuleRef {
    Function(String),
    FileRead(String),
    FileWrite(String),
    Network(String),
    DefaultDeny,
    /// The certificate itself (expired, not yet valid).
    Certificate,
    NoCertificate,
    EnforcementDisabled,
}

impl fmt::Display for RuleRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleRef::Function(n) => write!(f, "functions[{n}]"),
            RuleRef::FileRead(p) => write!(f, "files.read[{p}]"),
            RuleRef::FileWrite(p) => write!(f, "files.write[{p}]"),
            RuleRef::Network(h) => write!(f, "network[{h}]"),
            RuleRef::DefaultDeny => f.write_str("default-deny"),
            RuleRef::Certificate => f.write_str("certificate"),
            RuleRef::NoCertificate => f.write_str("no-certificate"),
            RuleRef::EnforcementDisabled => f.write_str("enforcement-disabled"),
        }
    }
}

impl Serialize for RuleRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub reason: String,
    pub matched_rule: RuleRef,
    /// Set for critical functions; the audit record is marked accordingly.
    pub elevated: bool,
}

impl Decision {
    fn new(verdict: Verdict, reason: impl Into<String>, matched_rule: RuleRef) -> Self {
        Self {
            verdict,
            reason: reason.into(),
            matched_rule,
            elevated: false,
        }
    }

    pub fn deny(reason: impl Into<String>, matched_rule: RuleRef) -> Self {
        Self::new(Verdict::Deny, reason, matched_rule)
    }

    pub fn allow(reason: impl Into<String>, matched_rule: RuleRef) -> Self {
        Self::new(Verdict::Allow, reason, matched_rule)
    }

    pub fn is_allowed(&self) -> bool {
        self.verdict == Verdict::Allow
    }
}

/// Default-deny evaluation of one action against a certificate.
///
/// Pure: no filesystem, network or wall-clock access. `now` is only used for
/// the validity window of the certificate.
pub fn evaluate_action(
    cert: &BehaviorCertificate,
    action: &ActionRequest,
    config: &RuntimeConfig,
    now: DateTime<Utc>,
) -> Decision {
    if action.name.is_empty() {
        return Decision::deny("empty action name", RuleRef::DefaultDeny);
    }
    if cert.expires_at.is_some_and(|exp| now >= exp) {
        return Decision::deny("certificate expired", RuleRef::Certificate);
    }
    if cert.issued_at.is_some_and(|iss| now < iss) {
        return Decision::deny("certificate not yet valid", RuleRef::Certificate);
    }

    match action.kind {
        ActionKind::FunctionCall => evaluate_function(cert, action, config),
        ActionKind::FileRead | ActionKind::FileWrite => evaluate_file(cert, action, config),
        ActionKind::Network => {
            let matched = cert
                .permissions
                .network
                .iter()
                .find(|pattern| host_matches(pattern, &action.name));
            match matched {
                Some(p) => Decision::allow("declared network host", RuleRef::Network(p.clone())),
                None => Decision::deny(format!("host {:?} not declared", action.name), RuleRef::DefaultDeny),
            }
        }
        ActionKind::Unknown => Decision::deny("unknown kind", RuleRef::DefaultDeny),
    }
}

fn evaluate_function(cert: &BehaviorCertificate, action: &ActionRequest, config: &RuntimeConfig) -> Decision {
    let Some(f) = cert.function(&action.name) else {
        return Decision::deny(format!("function {:?} not declared", action.name), RuleRef::DefaultDeny);
    };
    let rule = RuleRef::Function(f.name.clone());
    if !f.critical {
        return Decision::allow("declared function", rule);
    }
    let has_token = action
        .context_flags
        .approval_token
        .as_deref()
        .is_some_and(|t| !t.is_empty());
    let mut decision = match config.approval_mode {
        ApprovalMode::Token if has_token => Decision::allow("critical function approved by token", rule),
        ApprovalMode::Token => Decision::new(
            Verdict::RequireApproval,
            "critical function requires an approval token",
            rule,
        ),
        ApprovalMode::Interactive => Decision::new(
            Verdict::RequireApproval,
            "critical function requires interactive approval",
            rule,
        ),
        ApprovalMode::Deny => Decision::deny("critical functions are refused in deny approval mode", rule),
    };
    decision.elevated = true;
    decision
}

fn evaluate_file(cert: &BehaviorCertificate, action: &ActionRequest, config: &RuntimeConfig) -> Decision {
    let target = match normalize_path(&action.name, &config.workdir) {
        Ok(p) => p,
        Err(e) => return Decision::deny(e.to_string(), RuleRef::DefaultDeny),
    };
    let files = cert.permissions.files.as_ref();
    let (patterns, write) = match action.kind {
        ActionKind::FileWrite => (files.map(|f| f.write.as_slice()).unwrap_or_default(), true),
        _ => (files.map(|f| f.read.as_slice()).unwrap_or_default(), false),
    };
    for pattern in patterns {
        let Ok(resolved) = normalize_path(pattern, &config.workdir) else {
            continue;
        };
        if path_matches(&resolved, &target) {
            let rule = if write {
                RuleRef::FileWrite(pattern.clone())
            } else {
                RuleRef::FileRead(pattern.clone())
            };
            return Decision::allow("declared file path", rule);
        }
    }
    let op = if write { "write" } else { "read" };
    Decision::deny(format!("{op} of {:?} not declared", action.name), RuleRef::DefaultDeny)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("path {0:?} escapes its root")]
    EscapesRoot(String),
}

fn lexical_normalize(path: &Path) -> Result<PathBuf, PathError> {
    let mut out: Vec<Component<'_>> = Vec::new();
    let mut floor = 0;
    for c in path.components() {
        match c {
            Component::Prefix(_) | Component::RootDir => {
                out.push(c);
                floor = out.len();
            }
            Component::CurDir => {}
            Component::ParentDir => {
                if out.len() <= floor {
                    return Err(PathError::EscapesRoot(path.display().to_string()));
                }
                out.pop();
            }
            Component::Normal(_) => out.push(c),
        }
    }
    Ok(out.iter().collect())
}

/// Resolves `.` and `..` lexically. Relative paths are joined onto `workdir`
/// and may not climb out of it. Never touches the filesystem.
pub fn normalize_path(path: &str, workdir: &Path) -> Result<PathBuf, PathError> {
    let p = Path::new(path);
    if p.is_absolute() {
        return lexical_normalize(p);
    }
    let base = lexical_normalize(workdir)?;
    let rel = lexical_normalize(p).map_err(|_| PathError::EscapesRoot(path.to_owned()))?;
    Ok(base.join(rel))
}

/// Segment-wise match where `*` matches any run of characters inside one
/// segment.
fn path_matches(pattern: &Path, target: &Path) -> bool {
    let p: Vec<_> = pattern.components().collect();
    let t: Vec<_> = target.components().collect();
    p.len() == t.len()
        && p.iter().zip(&t).all(|(pc, tc)| {
            let (ps, ts) = (pc.as_os_str().to_string_lossy(), tc.as_os_str().to_string_lossy());
            if ps.contains('*') {
                wildcard_match(&ps, &ts)
            } else {
                ps == ts
            }
        })
}

fn wildcard_match(pattern: &str, text: &str) -> bool {
    let (p, t): (Vec<char>, Vec<char>) = (pattern.chars().collect(), text.chars().collect());
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Host match on dot-separated labels; a `*` label matches exactly one label.
fn host_matches(pattern: &str, host: &str) -> bool {
    let p: Vec<&str> = pattern.split('.').collect();
    let h: Vec<&str> = host.split('.').collect();
    p.len() == h.len() && p.iter().zip(&h).all(|(a, b)| *a == "*" || a.eq_ignore_ascii_case(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::MacKey;
    use chrono::TimeZone;

    pub(crate) const EMAIL_REPORTER: &str = r#"{
      "agent_id": "agent-email-reporter-v1",
      "permissions": {
        "email": { "provider": "gmail" },
        "files": { "write": "./out/email_report.json" },
        "functions": [
          { "name": "call:email.list_messages", "critical": true },
          { "name": "call:email.read_message", "critical": true }
        ]
      }
    }"#;

    fn config() -> RuntimeConfig {
        RuntimeConfig::new("k", MacKey::new(vec![7u8; 32]).unwrap()).with_workdir("/srv/agent")
    }

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 6, 1, 12, 0, 0).unwrap()
    }

    #[test]
    fn parses_email_reporter_certificate() {
        let cert = parse_certificate(EMAIL_REPORTER).unwrap();
        assert_eq!(cert.agent_id, "agent-email-reporter-v1");
        assert_eq!(cert.permissions.functions.iter().filter(|f| f.critical).count(), 2);
        let files = cert.permissions.files.as_ref().unwrap();
        assert_eq!(files.write, vec!["./out/email_report.json"]);
        assert!(files.read.is_empty());
        assert_eq!(cert.permissions.email.as_ref().unwrap().provider, "gmail");
    }

    #[test]
    fn parse_failures() {
        let err = parse_certificate(r#"{"permissions": {}}"#).unwrap_err();
        assert!(matches!(err, CertificateError::Parse { ref field, .. } if field == "agent_id"));
        let err = parse_certificate(r#"{"agent_id": "a", "permissions": {}, "superpowers": true}"#).unwrap_err();
        assert!(matches!(err, CertificateError::Parse { ref field, .. } if field == "superpowers"));
        let err = parse_certificate(r#"{"agent_id": "a", "permissions": {"files": {"read": "../x"}}}"#).unwrap_err();
        assert!(matches!(err, CertificateError::Parse { ref field, .. } if field == "files.read"));
        let err = parse_certificate(
            r#"{"agent_id": "a", "permissions": {}, "issued_at": "2025-01-02T00:00:00Z", "expires_at": "2025-01-01T00:00:00Z"}"#,
        )
        .unwrap_err();
        assert!(matches!(err, CertificateError::Parse { ref field, .. } if field == "expires_at"));
        assert!(parse_certificate(r#"{"agent_id": " ", "permissions": {}}"#).is_err());
    }

    #[test]
    fn lint_rules() {
        let cert = parse_certificate(EMAIL_REPORTER).unwrap();
        let findings = lint_certificate(&cert);
        assert_eq!(
            findings,
            vec![Finding {
                severity: Severity::Warning,
                message: "no expiry set".into()
            }]
        );

        let mut empty = cert.clone();
        empty.permissions.functions.clear();
        assert!(lint_certificate(&empty)
            .iter()
            .any(|f| f.message == "no functions declared" && f.severity == Severity::Warning));

        let mut dup = cert.clone();
        dup.permissions.functions.push(FunctionPermission::new("call:email.read_message", false));
        assert!(lint_certificate(&dup).iter().any(|f| f.severity == Severity::Error));

        let mut wild = cert;
        wild.permissions.files.as_mut().unwrap().write = vec!["./*".into()];
        assert_eq!(lint_certificate(&wild).len(), 2);
    }

    #[test]
    fn sign_verify_hmac_and_ed25519() {
        let cert = parse_certificate(EMAIL_REPORTER).unwrap();
        let mut store = TrustStore::new();
        let mac = MacKey::new(vec![3u8; 32]).unwrap();
        store.insert("org-hmac", TrustedKey::Hmac(mac.clone()));
        let ed = ed25519_dalek::SigningKey::from_bytes(&[9u8; 32]);
        store.insert("org-ed", TrustedKey::Ed25519(ed.verifying_key()));

        assert_eq!(verify_certificate(&cert, &store).unwrap(), CertVerdict::Unsigned);

        for signer in [
            CertSigner::Hmac {
                key_id: "org-hmac".into(),
                key: mac.clone(),
            },
            CertSigner::Ed25519 {
                key_id: "org-ed".into(),
                key: ed.clone(),
            },
        ] {
            let signed = sign_certificate(&cert, &signer);
            assert_eq!(verify_certificate(&signed, &store).unwrap(), CertVerdict::Valid);
            let reparsed = parse_certificate(&signed.to_canonical_json()).unwrap();
            assert_eq!(verify_certificate(&reparsed, &store).unwrap(), CertVerdict::Valid);

            let mut tampered = signed.clone();
            tampered.agent_id.push('x');
            assert_eq!(verify_certificate(&tampered, &store).unwrap(), CertVerdict::Invalid);
        }

        let mut unknown = sign_certificate(
            &cert,
            &CertSigner::Hmac {
                key_id: "nobody".into(),
                key: mac,
            },
        );
        assert_eq!(
            verify_certificate(&unknown, &store).unwrap_err(),
            CertificateError::UnknownKey("nobody".into())
        );
        // Algorithm swapped on a known key id.
        unknown.signature.as_mut().unwrap().key_id = "org-ed".into();
        assert_eq!(verify_certificate(&unknown, &store).unwrap(), CertVerdict::Invalid);
    }

    #[test]
    fn single_field_mutations_invalidate() {
        let mut cert = parse_certificate(EMAIL_REPORTER).unwrap();
        cert.issuer = Some("acme-secops".into());
        cert.issued_at = Some(Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap());
        cert.expires_at = Some(Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap());
        cert.permissions.network = vec!["api.gmail.com".into()];
        cert.permissions.files.as_mut().unwrap().read = vec!["./in/*".into()];
        let key = MacKey::new(vec![5u8; 32]).unwrap();
        let mut store = TrustStore::new();
        store.insert("k", TrustedKey::Hmac(key.clone()));
        let signed = sign_certificate(&cert, &CertSigner::Hmac { key_id: "k".into(), key });

        type Mutation = Box<dyn Fn(&mut BehaviorCertificate)>;
        let mutations: Vec<(&str, Mutation)> = vec![
            ("agent_id", Box::new(|c| c.agent_id = "agent-evil".into())),
            ("issuer", Box::new(|c| c.issuer = Some("mallory".into()))),
            ("issued_at", Box::new(|c| c.issued_at = Some(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()))),
            ("expires_at", Box::new(|c| c.expires_at = None)),
            ("email", Box::new(|c| c.permissions.email = Some(EmailScope { provider: "outlook".into() }))),
            ("files.read", Box::new(|c| c.permissions.files.as_mut().unwrap().read.push("./etc".into()))),
            ("files.write", Box::new(|c| c.permissions.files.as_mut().unwrap().write = vec!["./*".into()])),
            ("functions.name", Box::new(|c| c.permissions.functions[0].name = "call:email.send_message".into())),
            ("functions.critical", Box::new(|c| c.permissions.functions[1].critical = false)),
            ("functions.add", Box::new(|c| c.permissions.functions.push(FunctionPermission::new("call:x", false)))),
            ("network", Box::new(|c| c.permissions.network.push("evil.example".into()))),
        ];
        assert_eq!(verify_certificate(&signed, &store).unwrap(), CertVerdict::Valid);
        for (name, mutate) in mutations {
            let mut m = signed.clone();
            mutate(&mut m);
            assert_eq!(verify_certificate(&m, &store).unwrap(), CertVerdict::Invalid, "{name}");
        }
    }

    #[test]
    fn email_reporter_enforcement() {
        let cert = parse_certificate(EMAIL_REPORTER).unwrap();
        let cfg = config();

        let d = evaluate_action(&cert, &ActionRequest::call("call:email.list_messages"), &cfg, now());
        assert_eq!(d.verdict, Verdict::RequireApproval);
        assert!(d.elevated);

        let d = evaluate_action(
            &cert,
            &ActionRequest::call("call:email.list_messages").with_approval_token("T-1"),
            &cfg,
            now(),
        );
        assert_eq!(d.verdict, Verdict::Allow);

        let d = evaluate_action(&cert, &ActionRequest::call("call:email.send_message"), &cfg, now());
        assert_eq!(d.verdict, Verdict::Deny);
        assert_eq!(d.matched_rule.to_string(), "default-deny");

        let d = evaluate_action(&cert, &ActionRequest::write("./out/email_report.json"), &cfg, now());
        assert_eq!(d.verdict, Verdict::Allow);
        assert_eq!(d.matched_rule.to_string(), "files.write[./out/email_report.json]");

        let d = evaluate_action(&cert, &ActionRequest::write("./out/../../etc/passwd"), &cfg, now());
        assert_eq!(d.verdict, Verdict::Deny);

        let d = evaluate_action(&cert, &ActionRequest::read("./out/email_report.json"), &cfg, now());
        assert_eq!(d.verdict, Verdict::Deny, "write does not imply read");

        let d = evaluate_action(&cert, &ActionRequest::new(ActionKind::Unknown, "x"), &cfg, now());
        assert_eq!((d.verdict, d.reason.as_str()), (Verdict::Deny, "unknown kind"));
    }

    #[test]
    fn approval_modes() {
        let cert = parse_certificate(EMAIL_REPORTER).unwrap();
        let with_token = ActionRequest::call("call:email.read_message").with_approval_token("ok");
        let interactive = config().with_approval_mode(ApprovalMode::Interactive);
        assert_eq!(
            evaluate_action(&cert, &with_token, &interactive, now()).verdict,
            Verdict::RequireApproval
        );
        let deny = config().with_approval_mode(ApprovalMode::Deny);
        assert_eq!(evaluate_action(&cert, &with_token, &deny, now()).verdict, Verdict::Deny);
        let empty_token = ActionRequest::call("call:email.read_message").with_approval_token("");
        assert_eq!(
            evaluate_action(&cert, &empty_token, &config(), now()).verdict,
            Verdict::RequireApproval
        );
    }

    #[test]
    fn validity_window_uses_injected_clock() {
        let mut cert = parse_certificate(EMAIL_REPORTER).unwrap();
        cert.issued_at = Some(Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap());
        cert.expires_at = Some(Utc.with_ymd_and_hms(2025, 2, 1, 0, 0, 0).unwrap());
        let a = ActionRequest::write("./out/email_report.json");
        let d = evaluate_action(&cert, &a, &config(), now());
        assert_eq!((d.verdict, d.reason.as_str()), (Verdict::Deny, "certificate expired"));
        let early = Utc.with_ymd_and_hms(2024, 12, 31, 0, 0, 0).unwrap();
        assert_eq!(evaluate_action(&cert, &a, &config(), early).verdict, Verdict::Deny);
        let inside = Utc.with_ymd_and_hms(2025, 1, 15, 0, 0, 0).unwrap();
        assert_eq!(evaluate_action(&cert, &a, &config(), inside).verdict, Verdict::Allow);
    }

    #[test]
    fn normalize_examples() {
        let wd = Path::new("/srv/agent");
        assert_eq!(
            normalize_path("./out/email_report.json", wd).unwrap(),
            PathBuf::from("/srv/agent/out/email_report.json")
        );
        assert_eq!(normalize_path("./a/../b", wd).unwrap(), PathBuf::from("/srv/agent/b"));
        assert!(matches!(normalize_path("../secret", wd), Err(PathError::EscapesRoot(_))));
        assert_eq!(normalize_path("/etc/../tmp/x", wd).unwrap(), PathBuf::from("/tmp/x"));
        assert!(normalize_path("/..", wd).is_err());
    }

    #[test]
    fn globbing_is_segment_level() {
        let mut cert = BehaviorCertificate::new("a", PermissionSet::default());
        cert.permissions.files = Some(FilePermissions {
            read: vec!["./logs/*.log".into()],
            write: vec![],
        });
        cert.permissions.network = vec!["*.corp.example".into()];
        let cfg = config();
        let allow = |a: ActionRequest| evaluate_action(&cert, &a, &cfg, now()).verdict;
        assert_eq!(allow(ActionRequest::read("./logs/app.log")), Verdict::Allow);
        assert_eq!(allow(ActionRequest::read("logs/app.log")), Verdict::Allow);
        assert_eq!(allow(ActionRequest::read("./logs/sub/app.log")), Verdict::Deny);
        assert_eq!(allow(ActionRequest::read("./logs/app.txt")), Verdict::Deny);
        assert_eq!(allow(ActionRequest::read("/srv/agent/logs/x.log")), Verdict::Allow);
        assert_eq!(allow(ActionRequest::network("crm.corp.example")), Verdict::Allow);
        assert_eq!(allow(ActionRequest::network("a.crm.corp.example")), Verdict::Deny);
        assert_eq!(allow(ActionRequest::network("attacker.example")), Verdict::Deny);
    }

    #[test]
    fn wildcard() {
        assert!(wildcard_match("*", ""));
        assert!(wildcard_match("a*c", "abbbc"));
        assert!(wildcard_match("*.log", "x.log"));
        assert!(!wildcard_match("*.log", "x.lo"));
        assert!(wildcard_match("a**", "a"));
    }

    #[test]
    fn action_kind_from_json() {
        let a: ActionRequest = serde_json::from_str(r#"{"kind": "teleport", "name": "x"}"#).unwrap();
        assert_eq!(a.kind, ActionKind::Unknown);
        let a: ActionRequest =
            serde_json::from_str(r#"{"kind": "function_call", "name": "call:x", "context_flags": {"approval_token": "t"}}"#)
                .unwrap();
        assert_eq!(a.context_flags.approval_token.as_deref(), Some("t"));
    }
}
