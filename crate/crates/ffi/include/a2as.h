/*
 * Strings are NUL-terminated UTF-8. Strings returned through `char **`
 * outputs are owned by the caller and released with a2as_string_free().
 * Handles are released with their matching *_free() exactly once.
 * On any status other than A2AS_STATUS_OK, a2as_last_error() describes
 * the failure on the calling thread.
 */

#ifndef A2AS_H
#define A2AS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stdint.h>

typedef enum A2asApprovalMode {
  A2AS_APPROVAL_MODE_INTERACTIVE = 0,
  A2AS_APPROVAL_MODE_TOKEN = 1,
  A2AS_APPROVAL_MODE_DENY = 2,
} A2asApprovalMode;

// Status codes. 0 to 3 match the exit codes of the `a2as` CLI.
typedef enum A2asStatus {
  A2AS_STATUS_OK = 0,
  // Verification ran and rejected its input.
  A2AS_STATUS_VERIFY_FAILED = 1,
  // Bad key, clock or other configuration input.
  A2AS_STATUS_USAGE = 2,
  // Input text could not be parsed or was refused.
  A2AS_STATUS_PARSE = 3,
  A2AS_STATUS_NULL_ARGUMENT = 4,
  // A Rust panic was caught at the boundary.
  A2AS_STATUS_INTERNAL = 5,
} A2asStatus;

typedef enum A2asVerdict {
  A2AS_VERDICT_ALLOW = 0,
  A2AS_VERDICT_DENY = 1,
  A2AS_VERDICT_REQUIRE_APPROVAL = 2,
} A2asVerdict;

typedef struct A2asCertificate A2asCertificate;

// Runtime with its audit log. Not thread-safe; callers serialize access.
typedef struct A2asRuntime A2asRuntime;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *a2as_last_error(void);

// Library version, static storage.
const char *a2as_version(void);

void a2as_string_free(char *s);

// Creates a runtime keyed with `key_hex` (at least 16 bytes). `key_id` may
// be NULL, which names the key `ffi`.
enum A2asStatus a2as_runtime_new(const char *key_hex, const char *key_id, struct A2asRuntime **out);

void a2as_runtime_free(struct A2asRuntime *rt);

// Pins the clock to an RFC 3339 time; NULL returns to the system clock.
enum A2asStatus a2as_runtime_set_clock(struct A2asRuntime *rt, const char *rfc3339);

// `mode` is an `A2asApprovalMode` value; anything else is a usage error.
enum A2asStatus a2as_runtime_set_approval_mode(struct A2asRuntime *rt, uint32_t mode);

// Directory that relative certificate and action paths resolve against.
enum A2asStatus a2as_runtime_set_workdir(struct A2asRuntime *rt, const char *path);

enum A2asStatus a2as_certificate_parse(const char *json, struct A2asCertificate **out);

void a2as_certificate_free(struct A2asCertificate *cert);

// Instruments a JSON transcript. `cert` and `policy_text` may be NULL;
// `with_defense` adds the default defense block. Either output may be NULL:
// `out_rendered` receives the prompt text, `out_json` the structured form.
enum A2asStatus a2as_instrument(struct A2asRuntime *rt,
                                const char *transcript_json,
                                const struct A2asCertificate *cert,
                                const char *policy_text,
                                bool with_defense,
                                char **out_rendered,
                                char **out_json);

// Gates one JSON action. Returns OK whatever the verdict; the verdict goes
// to `out_verdict` and the full decision to `out_decision_json` (nullable).
// A NULL `cert` denies everything while enforcement is on.
enum A2asStatus a2as_gate_action(struct A2asRuntime *rt,
                                 const char *action_json,
                                 const struct A2asCertificate *cert,
                                 enum A2asVerdict *out_verdict,
                                 char **out_decision_json);

// Verifies a rendered context against the JSON transcript it came from.
// OK when every segment verifies, VERIFY_FAILED otherwise, including when
// the rendering no longer parses. The report goes to `out_report_json`
// (nullable) in both cases.
enum A2asStatus a2as_verify_context(struct A2asRuntime *rt,
                                    const char *rendered,
                                    const char *originals_json,
                                    const char *policy_text,
                                    char **out_report_json);

// Neutralizes boundary tags in untrusted text.
enum A2asStatus a2as_escape(const char *text, char **out);

enum A2asStatus a2as_unescape(const char *text, char **out);

// The runtime's audit log as JSON lines.
enum A2asStatus a2as_audit_export(struct A2asRuntime *rt, char **out_jsonl);

// Checks a JSON-lines audit log. On VERIFY_FAILED the first broken seq is
// written to `out_broken_seq` (nullable).
enum A2asStatus a2as_audit_verify(const char *jsonl, uint64_t *out_broken_seq);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* A2AS_H */
