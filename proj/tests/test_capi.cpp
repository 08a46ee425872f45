#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <jps.h>

#include "jps/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct CtxGuard {
    jps_ctx* ctx;
    CtxGuard() : ctx(jps_ctx_new()) { REQUIRE(ctx != nullptr); }
    ~CtxGuard() { jps_ctx_free(ctx); }
};

struct CfgGuard {
    jps_config* cfg = nullptr;
    ~CfgGuard() { jps_config_free(cfg); }
};

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("jps-capi-" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

// Same shape as the experiment-suite tiny config; all subcommands run in ms.
jps::ExperimentConfig tiny_exp(const std::string& out_dir) {
    jps::ExperimentConfig c;
    c.model.num_blocks = 1;
    c.model.d_model = 4;
    c.model.num_tokens = 2;
    c.model.mlp_hidden = 6;
    c.model.num_classes = 3;
    c.data.num_domains = 3;
    c.data.num_classes = 3;
    c.data.invariant_dims = 4;
    c.data.spurious_dims = 2;
    c.data.noise_dims = 2;
    c.data.samples_per_class_per_domain = 20;
    c.data.source_gammas = {0.9, 0.5};
    c.data.seed = 11;
    c.train.rho = 0.2;
    c.train.L = 1;
    c.train.steps = 6;
    c.train.batch_size = 8;
    c.train.eval_every = 3;
    c.pretrain.steps = 5;
    c.pretrain.batch_size = 16;
    c.output_dir = out_dir;
    c.seeds = {1, 2};
    return c;
}

std::string write_config(const TempDir& dir, const jps::ExperimentConfig& c,
                         const std::string& name = "config.json") {
    const std::string path = (dir.path / name).string();
    std::ofstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    f << jps::dump_config(c);
    return path;
}

}  // namespace

TEST_SUITE_BEGIN("capi");

TEST_CASE("version string matches the library constant") {
    REQUIRE(jps_version() != nullptr);
    CHECK(std::strcmp(jps_version(), jps::artifact_version()) == 0);
}

TEST_CASE("NULL arguments are usage errors, never crashes") {
    CtxGuard g;
    jps_config* out = nullptr;

    CHECK(jps_config_load(g.ctx, nullptr, &out) == JPS_USAGE);
    CHECK(jps_config_load(g.ctx, "x.json", nullptr) == JPS_USAGE);
    CHECK(jps_config_parse(g.ctx, nullptr, &out) == JPS_USAGE);
    CHECK(jps_gradcheck(g.ctx, nullptr) == JPS_USAGE);
    CHECK(jps_select(g.ctx, nullptr, nullptr, nullptr, nullptr, nullptr, nullptr) == JPS_USAGE);
    CHECK(jps_train(g.ctx, nullptr, nullptr) == JPS_USAGE);
    CHECK(jps_ablate(g.ctx, nullptr, nullptr, 0, nullptr, 0) == JPS_USAGE);
    CHECK(jps_diagnose(g.ctx, nullptr, nullptr) == JPS_USAGE);
    CHECK(std::strlen(jps_last_error(g.ctx)) > 0);

    // Calls with no context still return a status instead of dereferencing.
    CHECK(jps_config_parse(nullptr, "{}", &out) == JPS_USAGE);
    CHECK(std::strcmp(jps_last_error(nullptr), "") == 0);
    CHECK(jps_config_hash(nullptr) == 0);
    jps_ctx_free(nullptr);
    jps_config_free(nullptr);
}

TEST_CASE("parse success clears last_error and hash matches the C++ config") {
    CtxGuard g;
    TempDir dir("parse");
    const jps::ExperimentConfig c = tiny_exp(dir.str());

    CfgGuard cfg;
    REQUIRE(jps_config_parse(g.ctx, jps::dump_config(c).c_str(), &cfg.cfg) == JPS_OK);
    REQUIRE(cfg.cfg != nullptr);
    CHECK(std::strcmp(jps_last_error(g.ctx), "") == 0);
    CHECK(jps_config_hash(cfg.cfg) == c.config_hash());
    CHECK(jps_config_hash(cfg.cfg) != 0);
}

TEST_CASE("config errors map to JPS_CONFIG with a message") {
    CtxGuard g;
    jps_config* out = nullptr;

    CHECK(jps_config_parse(g.ctx, "not json", &out) == JPS_CONFIG);
    CHECK(out == nullptr);
    CHECK(std::strlen(jps_last_error(g.ctx)) > 0);

    CHECK(jps_config_parse(g.ctx, R"({"modle":{}})", &out) == JPS_CONFIG);
    CHECK(out == nullptr);

    CHECK(jps_config_parse(g.ctx, R"({"train":{"rho":0.0}})", &out) == JPS_CONFIG);
    CHECK(out == nullptr);
}

TEST_CASE("loading a missing config file is an IO error") {
    CtxGuard g;
    jps_config* out = nullptr;
    CHECK(jps_config_load(g.ctx, "/nonexistent/jps-capi/none.json", &out) == JPS_IO);
    CHECK(out == nullptr);
    CHECK(std::strlen(jps_last_error(g.ctx)) > 0);
}

TEST_CASE("gradcheck returns OK, and NUMERIC under the sabotage hook") {
    CtxGuard g;
    TempDir dir("gradcheck");
    CfgGuard cfg;
    const std::string path = write_config(dir, tiny_exp(dir.str()));
    REQUIRE(jps_config_load(g.ctx, path.c_str(), &cfg.cfg) == JPS_OK);

    CHECK(jps_gradcheck(g.ctx, cfg.cfg) == JPS_OK);
    CHECK(fs::exists(dir.path / "gradcheck.json"));

    setenv("JPS_TEST_SABOTAGE_GRAD", "1", 1);
    const jps_status st = jps_gradcheck(g.ctx, cfg.cfg);
    unsetenv("JPS_TEST_SABOTAGE_GRAD");
    CHECK(st == JPS_NUMERIC);
    CHECK(std::strlen(jps_last_error(g.ctx)) > 0);
}

TEST_CASE("select writes a mask file; overrides and bad names are validated") {
    CtxGuard g;
    TempDir dir("select");
    CfgGuard cfg;
    const std::string path = write_config(dir, tiny_exp(dir.str()));
    REQUIRE(jps_config_load(g.ctx, path.c_str(), &cfg.cfg) == JPS_OK);

    const double rho = 0.3;
    const std::string out = (dir.path / "m.json").string();
    REQUIRE(jps_select(g.ctx, cfg.cfg, "jps", &rho, nullptr, nullptr, out.c_str()) == JPS_OK);
    CHECK(fs::exists(out));

    CHECK(jps_select(g.ctx, cfg.cfg, "bogus", nullptr, nullptr, nullptr, nullptr) == JPS_CONFIG);
    const int bad_target = 7;
    CHECK(jps_select(g.ctx, cfg.cfg, nullptr, nullptr, nullptr, &bad_target, nullptr) ==
          JPS_CONFIG);
}

TEST_CASE("train rejects a mask from a different world as PROVENANCE") {
    CtxGuard g;
    TempDir dir("provenance");
    CfgGuard cfg_a;
    CfgGuard cfg_b;
    jps::ExperimentConfig a = tiny_exp((dir.path / "a").string());
    jps::ExperimentConfig b = a;
    b.data.seed = 12;
    b.output_dir = (dir.path / "b").string();
    REQUIRE(jps_config_parse(g.ctx, jps::dump_config(a).c_str(), &cfg_a.cfg) == JPS_OK);
    REQUIRE(jps_config_parse(g.ctx, jps::dump_config(b).c_str(), &cfg_b.cfg) == JPS_OK);

    const std::string mask = (dir.path / "mask.json").string();
    REQUIRE(jps_select(g.ctx, cfg_a.cfg, nullptr, nullptr, nullptr, nullptr, mask.c_str()) ==
            JPS_OK);
    CHECK(jps_train(g.ctx, cfg_b.cfg, mask.c_str()) == JPS_PROVENANCE);
    CHECK(std::strlen(jps_last_error(g.ctx)) > 0);

    // Same world accepts it.
    CHECK(jps_train(g.ctx, cfg_a.cfg, mask.c_str()) == JPS_OK);
    CHECK(fs::exists(dir.path / "a" / "report.json"));
}

TEST_CASE("ablate validates the pointer/count pairing") {
    CtxGuard g;
    TempDir dir("ablate");
    CfgGuard cfg;
    const std::string path = write_config(dir, tiny_exp(dir.str()));
    REQUIRE(jps_config_load(g.ctx, path.c_str(), &cfg.cfg) == JPS_OK);

    CHECK(jps_ablate(g.ctx, cfg.cfg, nullptr, 2, nullptr, 0) == JPS_USAGE);
    const double grid[1] = {0.1};
    CHECK(jps_ablate(g.ctx, cfg.cfg, nullptr, 0, grid, 0) == JPS_USAGE);

    const char* sel[1] = {"random"};
    REQUIRE(jps_ablate(g.ctx, cfg.cfg, sel, 1, grid, 1) == JPS_OK);
    CHECK(fs::exists(dir.path / "ablate.csv"));
}

TEST_CASE("diagnose runs through the C surface") {
    CtxGuard g;
    TempDir dir("diagnose");
    CfgGuard cfg;
    jps::ExperimentConfig c = tiny_exp(dir.str());
    c.train.rho = 0.3;
    const std::string path = write_config(dir, c);
    REQUIRE(jps_config_load(g.ctx, path.c_str(), &cfg.cfg) == JPS_OK);

    REQUIRE(jps_diagnose(g.ctx, cfg.cfg, nullptr) == JPS_OK);
    CHECK(fs::exists(dir.path / "diagnostics.json"));
    CHECK(std::strcmp(jps_last_error(g.ctx), "") == 0);
}

TEST_SUITE_END();
