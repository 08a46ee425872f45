// CLI driver. Deliberately knows nothing about the engine beyond jps.h:
// it parses flags, forwards them through the C API, and turns status codes
// into exit codes.
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "jps.h"

int main(int argc, char** argv) {
    CLI::App app{"jps: joint parameter selection on a synthetic multi-domain benchmark"};
    app.set_version_flag("--version", jps_version());
    app.require_subcommand(1);

    std::string config_path;

    CLI::App* cmd_gradcheck = app.add_subcommand("gradcheck", "finite-difference check of backward()");
    CLI::App* cmd_select = app.add_subcommand("select", "build and save an update mask");
    CLI::App* cmd_train = app.add_subcommand("train", "leave-one-domain-out fine-tuning");
    CLI::App* cmd_ablate = app.add_subcommand("ablate", "rho x selector sweep");
    CLI::App* cmd_diagnose = app.add_subcommand("diagnose", "bound terms and mask structure");
    for (CLI::App* c : {cmd_gradcheck, cmd_select, cmd_train, cmd_ablate, cmd_diagnose})
        c->add_option("--config", config_path, "experiment config JSON")
            ->required()
            ->check(CLI::ExistingFile);

    std::string selector, out_path, mask_path;
    double rho = 0.0;
    int L = 0, target = 0;
    CLI::Option* opt_selector = cmd_select->add_option("--selector", selector,
                                                       "jps|direct|without_variance|random|full|head_only");
    CLI::Option* opt_rho = cmd_select->add_option("--rho", rho, "sparsity in (0, 1]");
    CLI::Option* opt_L = cmd_select->add_option("--L", L, "eligible blocks (last L)");
    CLI::Option* opt_target = cmd_select->add_option("--target", target, "held-out domain id");
    cmd_select->add_option("--out", out_path, "mask output path");

    cmd_train->add_option("--mask", mask_path, "train the single cell this mask pins down")
        ->check(CLI::ExistingFile);
    cmd_diagnose->add_option("--mask", mask_path, "diagnose this mask instead of the default one")
        ->check(CLI::ExistingFile);

    std::vector<std::string> selectors;
    std::vector<double> rho_grid;
    cmd_ablate->add_option("--selectors", selectors, "selector names (default: jps without_variance direct)");
    cmd_ablate->add_option("--rho-grid", rho_grid, "rho values (default: the paper's search list)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the error message
        return code == 0 ? 0 : JPS_USAGE;
    }

    jps_ctx* ctx = jps_ctx_new();
    if (ctx == nullptr) {
        std::fprintf(stderr, "error: out of memory\n");
        return JPS_INTERNAL;
    }
    jps_config* cfg = nullptr;
    jps_status st = jps_config_load(ctx, config_path.c_str(), &cfg);
    if (st == JPS_OK) {
        if (cmd_gradcheck->parsed()) {
            st = jps_gradcheck(ctx, cfg);
        } else if (cmd_select->parsed()) {
            st = jps_select(ctx, cfg, opt_selector->count() ? selector.c_str() : nullptr,
                            opt_rho->count() ? &rho : nullptr, opt_L->count() ? &L : nullptr,
                            opt_target->count() ? &target : nullptr,
                            out_path.empty() ? nullptr : out_path.c_str());
        } else if (cmd_train->parsed()) {
            st = jps_train(ctx, cfg, mask_path.empty() ? nullptr : mask_path.c_str());
        } else if (cmd_ablate->parsed()) {
            std::vector<const char*> sel_ptrs;
            for (const std::string& s : selectors) sel_ptrs.push_back(s.c_str());
            st = jps_ablate(ctx, cfg, sel_ptrs.empty() ? nullptr : sel_ptrs.data(),
                            sel_ptrs.size(), rho_grid.empty() ? nullptr : rho_grid.data(),
                            rho_grid.size());
        } else if (cmd_diagnose->parsed()) {
            st = jps_diagnose(ctx, cfg, mask_path.empty() ? nullptr : mask_path.c_str());
        }
    }
    if (st != JPS_OK) std::fprintf(stderr, "error: %s\n", jps_last_error(ctx));
    jps_config_free(cfg);
    jps_ctx_free(ctx);
    return st;
}
