#include "jps.h"

#include <new>
#include <string>
#include <utility>
#include <vector>

#include "jps/errors.hpp"
#include "jps/experiment.hpp"

struct jps_ctx {
    std::string last_error;
};

struct jps_config {
    jps::ExperimentConfig cfg;
};

namespace {

/// Every API call funnels through here: run the body, translate the error
/// taxonomy to status codes, stash the message on the context.
template <typename F>
jps_status wrapped(jps_ctx* ctx, F&& body) {
    if (ctx == nullptr) return JPS_USAGE;
    try {
        body();
        ctx->last_error.clear();
        return JPS_OK;
    } catch (const jps::ValidationError& e) {
        ctx->last_error = e.what();
        return JPS_CONFIG;
    } catch (const jps::ProvenanceError& e) {
        ctx->last_error = e.what();
        return JPS_PROVENANCE;
    } catch (const jps::NumericError& e) {
        ctx->last_error = e.what();
        return JPS_NUMERIC;
    } catch (const jps::IoError& e) {
        ctx->last_error = e.what();
        return JPS_IO;
    } catch (const std::exception& e) {
        ctx->last_error = e.what();
        return JPS_INTERNAL;
    } catch (...) {
        ctx->last_error = "unknown error";
        return JPS_INTERNAL;
    }
}

jps_status usage(jps_ctx* ctx, const char* message) {
    if (ctx != nullptr) ctx->last_error = message;
    return JPS_USAGE;
}

}  // namespace

extern "C" {

const char* jps_version(void) { return jps::artifact_version(); }

jps_ctx* jps_ctx_new(void) { return new (std::nothrow) jps_ctx{}; }

void jps_ctx_free(jps_ctx* ctx) { delete ctx; }

const char* jps_last_error(const jps_ctx* ctx) {
    return ctx == nullptr ? "" : ctx->last_error.c_str();
}

jps_status jps_config_load(jps_ctx* ctx, const char* path, jps_config** out) {
    if (path == nullptr || out == nullptr) return usage(ctx, "jps_config_load: NULL argument");
    *out = nullptr;
    return wrapped(ctx, [&] { *out = new jps_config{jps::load_config(path)}; });
}

jps_status jps_config_parse(jps_ctx* ctx, const char* json_text, jps_config** out) {
    if (json_text == nullptr || out == nullptr)
        return usage(ctx, "jps_config_parse: NULL argument");
    *out = nullptr;
    return wrapped(ctx, [&] { *out = new jps_config{jps::parse_config(json_text)}; });
}

void jps_config_free(jps_config* cfg) { delete cfg; }

uint64_t jps_config_hash(const jps_config* cfg) {
    return cfg == nullptr ? 0 : cfg->cfg.config_hash();
}

jps_status jps_gradcheck(jps_ctx* ctx, const jps_config* cfg) {
    if (cfg == nullptr) return usage(ctx, "jps_gradcheck: NULL config");
    return wrapped(ctx, [&] { jps::cmd_gradcheck(cfg->cfg); });
}

jps_status jps_select(jps_ctx* ctx, const jps_config* cfg, const char* selector, const double* rho,
                      const int* L, const int* target, const char* out_path) {
    if (cfg == nullptr) return usage(ctx, "jps_select: NULL config");
    return wrapped(ctx, [&] {
        jps::SelectOverrides ov;
        if (selector != nullptr) ov.selector = jps::selector_from_name(selector);
        if (rho != nullptr) ov.rho = *rho;
        if (L != nullptr) ov.L = *L;
        if (target != nullptr) ov.target = *target;
        if (out_path != nullptr) ov.out_path = std::string(out_path);
        jps::cmd_select(cfg->cfg, ov);
    });
}

jps_status jps_train(jps_ctx* ctx, const jps_config* cfg, const char* mask_path) {
    if (cfg == nullptr) return usage(ctx, "jps_train: NULL config");
    return wrapped(ctx, [&] {
        jps::cmd_train(cfg->cfg, mask_path == nullptr ? std::string() : std::string(mask_path));
    });
}

jps_status jps_ablate(jps_ctx* ctx, const jps_config* cfg, const char* const* selectors,
                      size_t n_selectors, const double* rho_grid, size_t n_rhos) {
    if (cfg == nullptr) return usage(ctx, "jps_ablate: NULL config");
    if ((selectors == nullptr) != (n_selectors == 0))
        return usage(ctx, "jps_ablate: selectors pointer/count mismatch");
    if ((rho_grid == nullptr) != (n_rhos == 0))
        return usage(ctx, "jps_ablate: rho_grid pointer/count mismatch");
    return wrapped(ctx, [&] {
        std::vector<jps::SelectorKind> sel;
        for (size_t i = 0; i < n_selectors; ++i)
            sel.push_back(jps::selector_from_name(selectors[i]));
        std::vector<double> grid(rho_grid, rho_grid + n_rhos);
        jps::cmd_ablate(cfg->cfg, std::move(sel), std::move(grid));
    });
}

jps_status jps_diagnose(jps_ctx* ctx, const jps_config* cfg, const char* mask_path) {
    if (cfg == nullptr) return usage(ctx, "jps_diagnose: NULL config");
    return wrapped(ctx, [&] {
        jps::cmd_diagnose(cfg->cfg, mask_path == nullptr ? std::string() : std::string(mask_path));
    });
}

}  // extern "C"
