/* C API for the JPS experiment engine. Everything the CLI can do goes
 * through here: opaque handles, integer status codes, no C++ types.
 * All functions are thread-compatible (distinct contexts may be used from
 * distinct threads); a single context must not be shared concurrently. */
#ifndef JPS_H
#define JPS_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define JPS_API __declspec(dllexport)
#else
#define JPS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as process exit codes. */
typedef enum jps_status {
    JPS_OK = 0,
    JPS_USAGE = 1,      /* bad call: NULL handle, missing argument */
    JPS_CONFIG = 2,     /* invalid config or argument values */
    JPS_PROVENANCE = 3, /* mask/checkpoint from a different world */
    JPS_NUMERIC = 4,    /* failed gradient check, divergence, degenerate math */
    JPS_IO = 5,         /* unreadable/unwritable files */
    JPS_INTERNAL = 6    /* everything else; indicates a bug */
} jps_status;

typedef struct jps_ctx jps_ctx;       /* owns the last-error message */
typedef struct jps_config jps_config; /* parsed + validated experiment config */

JPS_API const char* jps_version(void);

JPS_API jps_ctx* jps_ctx_new(void);
JPS_API void jps_ctx_free(jps_ctx* ctx);

/* Message for the most recent failing call on this context; empty string
 * after a success. The pointer stays valid until the next call on ctx. */
JPS_API const char* jps_last_error(const jps_ctx* ctx);

JPS_API jps_status jps_config_load(jps_ctx* ctx, const char* path, jps_config** out);
JPS_API jps_status jps_config_parse(jps_ctx* ctx, const char* json_text, jps_config** out);
JPS_API void jps_config_free(jps_config* cfg);
JPS_API uint64_t jps_config_hash(const jps_config* cfg);

/* Subcommands. Outputs land under the config's output_dir; see the README
 * for file formats. Optional scalar arguments are passed as pointers and
 * may be NULL (meaning: use the config/default). */
JPS_API jps_status jps_gradcheck(jps_ctx* ctx, const jps_config* cfg);

JPS_API jps_status jps_select(jps_ctx* ctx, const jps_config* cfg, const char* selector,
                              const double* rho, const int* L, const int* target,
                              const char* out_path);

/* mask_path NULL: full leave-one-domain-out protocol. Otherwise train the
 * single cell the saved mask pins down. */
JPS_API jps_status jps_train(jps_ctx* ctx, const jps_config* cfg, const char* mask_path);

/* selectors/rho_grid NULL (with count 0): the built-in defaults. */
JPS_API jps_status jps_ablate(jps_ctx* ctx, const jps_config* cfg,
                              const char* const* selectors, size_t n_selectors,
                              const double* rho_grid, size_t n_rhos);

JPS_API jps_status jps_diagnose(jps_ctx* ctx, const jps_config* cfg, const char* mask_path);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* JPS_H */
