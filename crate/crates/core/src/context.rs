//! Core domain types: origins, messages, the ordered context window and the
//! runtime configuration shared by every other module.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::TaggedSegment;

/// Environment variable holding the hex-encoded MAC key.
pub const KEY_ENV: &str = "A2AS_KEY";

/// Minimum accepted MAC key length in bytes.
pub const MIN_KEY_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginKind {
    User,
    Tool,
    Agent,
    System,
    Assistant,
}

impl OriginKind {
    pub const ALL: [OriginKind; 5] = [
        OriginKind::User,
        OriginKind::Tool,
        OriginKind::Agent,
        OriginKind::System,
        OriginKind::Assistant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OriginKind::User => "user",
            OriginKind::Tool => "tool",
            OriginKind::Agent => "agent",
            OriginKind::System => "system",
            OriginKind::Assistant => "assistant",
        }
    }
}

impl fmt::Display for OriginKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustLevel {
    Trusted,
    Untrusted,
}

/// Where a piece of context content came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Origin {
    pub kind: OriginKind,
    /// Tool name, peer-agent id, etc. Empty for plain user/system turns.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source_id: String,
}

impl Origin {
    pub fn new(kind: OriginKind, source_id: impl Into<String>) -> Self {
        Self {
            kind,
            source_id: source_id.into(),
        }
    }

    pub fn user() -> Self {
        Self::new(OriginKind::User, "")
    }

    pub fn system() -> Self {
        Self::new(OriginKind::System, "")
    }

    pub fn assistant() -> Self {
        Self::new(OriginKind::Assistant, "")
    }

    pub fn tool(name: impl Into<String>) -> Self {
        Self::new(OriginKind::Tool, name)
    }

    pub fn agent(id: impl Into<String>) -> Self {
        Self::new(OriginKind::Agent, id)
    }

    pub fn trust(&self) -> TrustLevel {
        classify_trust(self)
    }

    pub fn is_trusted(&self) -> bool {
        self.trust() == TrustLevel::Trusted
    }
}

/// System and assistant turns are trusted; everything arriving from users,
/// tools or peer agents is not.
pub fn classify_trust(origin: &Origin) -> TrustLevel {
    match origin.kind {
        OriginKind::System | OriginKind::Assistant => TrustLevel::Trusted,
        OriginKind::User | OriginKind::Tool | OriginKind::Agent => TrustLevel::Untrusted,
    }
}

/// Sensitivity label attached to a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Trusted,
    Untrusted,
    Confidential,
    Financial,
    Personal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Trusted => "trusted",
            Label::Untrusted => "untrusted",
            Label::Confidential => "confidential",
            Label::Financial => "financial",
            Label::Personal => "personal",
        }
    }
}

/// One unit of context content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Message {
    pub origin: Origin,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl Message {
    pub fn new(origin: Origin, content: impl Into<String>) -> Self {
        Self {
            origin,
            content: content.into(),
            metadata: BTreeMap::new(),
            label: None,
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Origin::user(), content)
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Origin::system(), content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Origin::assistant(), content)
    }

    pub fn tool(name: impl Into<String>, content: impl Into<String>) -> Self {
        Self::new(Origin::tool(name), content)
    }

    pub fn agent(id: impl Into<String>, content: impl Into<String>) -> Self {
        Self::new(Origin::agent(id), content)
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn is_trusted(&self) -> bool {
        self.origin.is_trusted()
    }

    /// Checks the structural invariants: metadata keys are non-empty.
    pub fn validate(&self) -> Result<(), ContextError> {
        if self.metadata.keys().any(String::is_empty) {
            return Err(ContextError::EmptyMetadataKey);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContextEntry {
    /// A trusted turn (or an unattributed raw span recovered by parsing).
    Raw { origin: Option<Origin>, text: String },
    Segment(TaggedSegment),
}

impl ContextEntry {
    pub fn rendered(&self) -> String {
        match self {
            ContextEntry::Raw { text, .. } => text.clone(),
            ContextEntry::Segment(seg) => seg.render(),
        }
    }
}

/// Ordered rendered turns. Untrusted content only ever enters as a
/// [`TaggedSegment`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextWindow {
    entries: Vec<ContextEntry>,
}

impl ContextWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_trusted(&mut self, message: &Message) -> Result<(), ContextError> {
        if !message.is_trusted() {
            return Err(ContextError::UntrustedRaw(message.origin.kind));
        }
        self.entries.push(ContextEntry::Raw {
            origin: Some(message.origin.clone()),
            text: message.content.clone(),
        });
        Ok(())
    }

    pub fn push_segment(&mut self, segment: TaggedSegment) {
        self.entries.push(ContextEntry::Segment(segment));
    }

    /// Adds a raw span with no attributed origin, as recovered by
    /// [`crate::boundary::parse_context`].
    pub fn push_span(&mut self, text: impl Into<String>) {
        self.entries.push(ContextEntry::Raw {
            origin: None,
            text: text.into(),
        });
    }

    pub fn entries(&self) -> &[ContextEntry] {
        &self.entries
    }

    pub fn segments(&self) -> impl Iterator<Item = &TaggedSegment> {
        self.entries.iter().filter_map(|e| match e {
            ContextEntry::Segment(s) => Some(s),
            ContextEntry::Raw { .. } => None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Concatenation of every entry's rendered form.
    pub fn render(&self) -> String {
        self.entries.iter().map(ContextEntry::rendered).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    PerPromptTemplate,
    SystemPrompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalMode {
    /// A human must approve each critical action; tokens are not honored.
    Interactive,
    /// A supplied approval token satisfies the approval requirement.
    #[default]
    Token,
    /// Critical actions are refused outright.
    Deny,
}

/// MAC key material. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct MacKey(Vec<u8>);

impl MacKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, ConfigError> {
        let bytes = bytes.into();
        if bytes.len() < MIN_KEY_LEN {
            return Err(ConfigError::KeyTooShort(bytes.len()));
        }
        Ok(Self(bytes))
    }

    pub fn from_hex(text: &str) -> Result<Self, ConfigError> {
        let bytes = hex::decode(text.trim()).map_err(|_| ConfigError::InvalidKeyHex)?;
        Self::new(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacKey(<{} bytes redacted>)", self.0.len())
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub key_id: String,
    pub signing_key: MacKey,
    pub defense_placement: Placement,
    pub policy_placement: Placement,
    pub approval_mode: ApprovalMode,
    pub workdir: PathBuf,
    /// When false and no certificate is loaded, actions are let through.
    /// Only meant for demonstrating what enforcement prevents.
    pub enforcement: bool,
}

impl RuntimeConfig {
    pub fn new(key_id: impl Into<String>, signing_key: MacKey) -> Self {
        Self {
            key_id: key_id.into(),
            signing_key,
            defense_placement: Placement::default(),
            policy_placement: Placement::default(),
            approval_mode: ApprovalMode::default(),
            workdir: PathBuf::from("/workdir"),
            enforcement: true,
        }
    }

    pub fn with_workdir(mut self, workdir: impl Into<PathBuf>) -> Self {
        self.workdir = workdir.into();
        self
    }

    pub fn with_placements(mut self, defense: Placement, policy: Placement) -> Self {
        self.defense_placement = defense;
        self.policy_placement = policy;
        self
    }

    pub fn with_approval_mode(mut self, mode: ApprovalMode) -> Self {
        self.approval_mode = mode;
        self
    }

    /// Parses a TOML config. `env_key` is the hex key from the environment,
    /// used when the file carries no `signing_key`.
    pub fn from_toml_str(text: &str, env_key: Option<&str>) -> Result<Self, ConfigError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Toml(e.to_string()))?;
        let key = match (file.signing_key.as_deref(), env_key) {
            (Some(hex), _) => MacKey::from_hex(hex)?,
            (None, Some(hex)) => MacKey::from_hex(hex)?,
            (None, None) => return Err(ConfigError::MissingKey),
        };
        Ok(Self {
            key_id: file.key_id,
            signing_key: key,
            defense_placement: file.defense_placement,
            policy_placement: file.policy_placement,
            approval_mode: file.approval_mode,
            workdir: file.workdir.unwrap_or_else(|| PathBuf::from(".")),
            enforcement: file.enforcement,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        let env_key = std::env::var(KEY_ENV).ok();
        Self::from_toml_str(&text, env_key.as_deref())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    key_id: String,
    #[serde(default)]
    signing_key: Option<String>,
    #[serde(default)]
    defense_placement: Placement,
    #[serde(default)]
    policy_placement: Placement,
    #[serde(default)]
    approval_mode: ApprovalMode,
    #[serde(default)]
    workdir: Option<PathBuf>,
    #[serde(default = "default_true")]
    enforcement: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("{0} content must be wrapped in a boundary segment")]
    UntrustedRaw(OriginKind),
    #[error("metadata keys must be non-empty")]
    EmptyMetadataKey,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("signing key must be at least {MIN_KEY_LEN} bytes, got {0}")]
    KeyTooShort(usize),
    #[error("signing key is not valid hex")]
    InvalidKeyHex,
    #[error("no signing key configured (set signing_key or {KEY_ENV})")]
    MissingKey,
    #[error("invalid config: {0}")]
    Toml(String),
    #[error("cannot read config: {0}")]
    Io(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trust_classification() {
        assert_eq!(classify_trust(&Origin::system()), TrustLevel::Trusted);
        assert_eq!(classify_trust(&Origin::assistant()), TrustLevel::Trusted);
        assert_eq!(classify_trust(&Origin::tool("email")), TrustLevel::Untrusted);
        assert_eq!(classify_trust(&Origin::user()), TrustLevel::Untrusted);
        assert_eq!(classify_trust(&Origin::agent("peer")), TrustLevel::Untrusted);
    }

    #[test]
    fn window_rejects_untrusted_raw() {
        let mut window = ContextWindow::new();
        assert_eq!(
            window.push_trusted(&Message::tool("email", "hi")),
            Err(ContextError::UntrustedRaw(OriginKind::Tool))
        );
        window.push_trusted(&Message::system("sys")).unwrap();
        assert_eq!(window.len(), 1);
    }

    #[test]
    fn short_key_rejected() {
        assert_eq!(MacKey::new(vec![0u8; 15]), Err(ConfigError::KeyTooShort(15)));
        assert!(MacKey::new(vec![0u8; 16]).is_ok());
    }

    #[test]
    fn key_never_printed() {
        let key = MacKey::from_hex("00112233445566778899aabbccddeeff").unwrap();
        let cfg = RuntimeConfig::new("k", key);
        let dbg = format!("{cfg:?}");
        assert!(!dbg.contains("00112233"));
        assert!(dbg.contains("redacted"));
    }

    #[test]
    fn config_from_toml_with_env_fallback() {
        let text = r#"
            key_id = "deploy-1"
            defense_placement = "system_prompt"
            approval_mode = "deny"
            workdir = "/srv/agent"
        "#;
        let cfg = RuntimeConfig::from_toml_str(text, Some("000102030405060708090a0b0c0d0e0f")).unwrap();
        assert_eq!(cfg.key_id, "deploy-1");
        assert_eq!(cfg.defense_placement, Placement::SystemPrompt);
        assert_eq!(cfg.policy_placement, Placement::PerPromptTemplate);
        assert_eq!(cfg.approval_mode, ApprovalMode::Deny);
        assert!(cfg.enforcement);
        assert_eq!(
            RuntimeConfig::from_toml_str(text, None).unwrap_err(),
            ConfigError::MissingKey
        );
        assert!(matches!(
            RuntimeConfig::from_toml_str("key_id = \"x\"\nbogus = 1", Some("00")),
            Err(ConfigError::Toml(_))
        ));
    }

    #[test]
    fn message_json_shape() {
        let m: Message = serde_json::from_str(
            r#"{"origin":{"kind":"tool","source_id":"email"},"content":"x","metadata":{"id":"7"}}"#,
        )
        .unwrap();
        assert_eq!(m.origin, Origin::tool("email"));
        assert_eq!(m.metadata["id"], "7");
        assert!(m.validate().is_ok());
        assert!(Message::user("x").with_metadata("", "v").validate().is_err());
    }
}
