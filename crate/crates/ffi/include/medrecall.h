#ifndef MEDRECALL_H
#define MEDRECALL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MrStatus {
  MR_STATUS_OK = 0,
  MR_STATUS_NULL_ARGUMENT = 1,
  MR_STATUS_INVALID_UTF8 = 2,
  MR_STATUS_INVALID_ARGUMENT = 3,
  MR_STATUS_CONFIG = 4,
  MR_STATUS_MISSING_PREREQUISITE = 5,
  MR_STATUS_NUMERICAL = 6,
  MR_STATUS_IO = 7,
  MR_STATUS_FAILED = 8,
  MR_STATUS_PANIC = 9,
} MrStatus;

// Resolved run configuration.
typedef struct MrConfig MrConfig;

// Loaded generator, knowledge graph and retriever, ready to answer histories.
typedef struct MrResponder MrResponder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mr_version(void);

// Message of the most recent failure on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *mr_last_error(void);

// # Safety
// `s` must be NULL or a string returned by this library, freed once.
void mr_string_free(char *s);

// Parses a TOML configuration. Semantic checks such as the required seed
// run when the configuration is used.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum MrStatus mr_config_from_toml(const char *toml, struct MrConfig **out);

// Reads a TOML configuration file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MrStatus mr_config_load(const char *path, struct MrConfig **out);

// # Safety
// `cfg` must be a live handle from this library.
enum MrStatus mr_config_set_seed(struct MrConfig *cfg, uint64_t seed);

// Serializes the configuration back to TOML.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum MrStatus mr_config_to_toml(const struct MrConfig *cfg, char **out);

// # Safety
// `cfg` must be NULL or a handle from this library, freed once.
void mr_config_free(struct MrConfig *cfg);

// Runs a pipeline command by its command-line name (`synth`, `train`, ...).
// The one-line summary is stored in `summary` when it is not NULL.
//
// # Safety
// `cfg` must be a live handle; `name` a NUL-terminated string; `summary`
// NULL or writable.
enum MrStatus mr_run_command(const struct MrConfig *cfg, const char *name, char **summary);

// Loads the trained generator (and retriever when the run uses knowledge).
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum MrStatus mr_responder_load(const struct MrConfig *cfg, struct MrResponder **out);

// Decodes the next doctor turn for a history of `n_turns` lines, each
// prefixed with `patient:` or `doctor:`. `nonce` selects the sampling
// stream. `recall` may be NULL.
//
// # Safety
// `responder` must be a live handle; `turns` must point to `n_turns`
// NUL-terminated strings; `response` must be writable.
enum MrStatus mr_responder_respond(const struct MrResponder *responder,
                                   const char *const *turns,
                                   size_t n_turns,
                                   uint64_t nonce,
                                   char **response,
                                   char **recall);

// # Safety
// `responder` must be NULL or a handle from this library, freed once.
void mr_responder_free(struct MrResponder *responder);

// Corpus BLEU-`order` of `n` candidate/reference pairs.
//
// # Safety
// `candidates` and `references` must each point to `n` NUL-terminated
// strings; `out` must be writable.
enum MrStatus mr_bleu(const char *const *candidates,
                      const char *const *references,
                      size_t n,
                      uint32_t order,
                      double *out);

// Distinct-bigram ratio over `n` candidates.
//
// # Safety
// `candidates` must point to `n` NUL-terminated strings; `out` must be
// writable.
enum MrStatus mr_distinct2(const char *const *candidates, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEDRECALL_H */
