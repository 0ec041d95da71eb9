//! Runtime security layer for LLM-agent pipelines.
//!
//! Untrusted inputs are wrapped in `a2as:*` boundary tags carrying a MAC-derived
//! integrity hash, context-wide defense and policy blocks are embedded into the
//! prompt, and every action an agent attempts is gated against a signed
//! behavior certificate. All enforcement events land in a hash-chained audit log.
//!
//! Module map:
//!
//! - [`context`]: messages, origins, trust classification, runtime config
//! - [`boundary`]: tag grammar, escaping, wrapping and context parsing
//! - [`integrity`]: canonical prompt encoding, HMAC signatures, verification
//! - [`behavior`]: behavior certificates (parse, lint, sign, enforce)
//! - [`defense`]: in-context defense profiles
//! - [`policy`]: versioned policy documents
//! - [`pipeline`]: request instrumentation, action gating, audit, telemetry
//! - [`harness`]: deterministic mock-agent scenarios

pub mod behavior;
pub mod boundary;
pub mod context;
pub mod defense;
pub mod harness;
pub mod integrity;
pub mod pipeline;
pub mod policy;

pub(crate) mod textfile;

pub use behavior::{
    ActionKind, ActionRequest, BehaviorCertificate, Decision, PermissionSet, TrustStore, Verdict,
};
pub use boundary::{ContextPart, Namespace, TaggedSegment};
pub use context::{ContextWindow, Message, Origin, OriginKind, RuntimeConfig, TrustLevel};
pub use defense::DefenseProfile;
pub use integrity::{PromptSignature, VerificationReport};
pub use pipeline::{AuditLog, AuditRecord, InstrumentedPrompt, Runtime};
pub use policy::PolicyDocument;
