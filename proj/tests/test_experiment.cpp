#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "jps/errors.hpp"
#include "jps/experiment.hpp"

using namespace jps;
namespace fs = std::filesystem;

namespace {

/// Small-but-real config: every subcommand finishes in milliseconds on it.
ExperimentConfig tiny_exp(const std::string& out_dir) {
    ExperimentConfig c;
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

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("jps-test-" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

bool same_entry(const RunEntry& a, const RunEntry& b) {
    return a.seed == b.seed && a.target_domain == b.target_domain && a.selector == b.selector &&
           a.rho == b.rho && a.L == b.L && a.best_val_acc == b.best_val_acc &&
           a.target_acc_at_best_val == b.target_acc_at_best_val &&
           a.tunable_backbone_params == b.tunable_backbone_params &&
           a.stage_counts.per_domain_k == b.stage_counts.per_domain_k &&
           a.stage_counts.step1_count == b.stage_counts.step1_count &&
           a.stage_counts.step2_count == b.stage_counts.step2_count &&
           a.degraded_empty == b.degraded_empty;
}

}  // namespace

TEST_SUITE_BEGIN("experiment");

TEST_CASE("empty JSON object parses to the default config") {
    const ExperimentConfig c = parse_config("{}");
    const ExperimentConfig d;
    CHECK(dump_config(c) == dump_config(d));
    CHECK(c.config_hash() == d.config_hash());
}

TEST_CASE("config serialization round-trips losslessly") {
    TempDir tmp("cfg-roundtrip");
    ExperimentConfig c = tiny_exp(tmp.str());
    c.train.selector = SelectorKind::Direct;
    c.train.optimizer = Optimizer::sgd;
    c.train.rho = 0.013;
    c.train.dropout_rate = 0.1;
    c.data.target_gamma = -0.75;
    c.data.noise_scale = 1.25;
    c.diagnostics.beta = 2.5;
    c.diagnostics.proxy_enabled = false;
    c.workers = 3;
    c.emit_wall_time = true;
    c.seeds = {42, 7, 9000000000000000001ull};  // above 2^62: u64 must survive JSON

    const std::string text = dump_config(c);
    const ExperimentConfig back = parse_config(text);
    CHECK(dump_config(back) == text);
    CHECK(back.config_hash() == c.config_hash());
    CHECK(back.seeds == c.seeds);
    CHECK(back.train.selector == SelectorKind::Direct);
    CHECK(back.train.optimizer == Optimizer::sgd);
    CHECK(back.emit_wall_time);
}

TEST_CASE("unknown config keys are rejected, not ignored") {
    CHECK_THROWS_AS((void)parse_config(R"({"modle": {}})"), ValidationError);
    CHECK_THROWS_AS((void)parse_config(R"({"train": {"rhoo": 0.1}})"), ValidationError);
    CHECK_THROWS_AS((void)parse_config(R"({"data": {"n_domains": 3}})"), ValidationError);
    CHECK_THROWS_AS((void)parse_config(R"({"diagnostics": {"betta": 1.0}})"), ValidationError);
}

TEST_CASE("malformed JSON and malformed values are config errors") {
    CHECK_THROWS_AS((void)parse_config("not json at all"), ValidationError);
    CHECK_THROWS_AS((void)parse_config("[1,2,3]"), ValidationError);
    CHECK_THROWS_AS((void)parse_config(R"({"train": {"selector": "jsp"}})"), ValidationError);
    CHECK_THROWS_AS((void)parse_config(R"({"train": {"optimizer": "adamw"}})"), ValidationError);
    CHECK_THROWS_AS((void)parse_config(R"({"train": {"rho": "small"}})"), ValidationError);
}

TEST_CASE("cross-field validation catches inconsistent sections") {
    TempDir tmp("cfg-xfield");
    ExperimentConfig c = tiny_exp(tmp.str());

    ExperimentConfig bad = c;
    bad.data.noise_dims = 3;  // 4+2+3 != 2*4
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    bad = c;
    bad.data.num_classes = 4;
    bad.model.num_classes = 5;
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    bad = c;
    bad.train.L = 2;  // model has 1 block
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    bad = c;
    bad.train.L = 0;  // jps selector needs an eligible space
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad.train.selector = SelectorKind::HeadOnly;
    CHECK_NOTHROW(bad.validate());

    bad = c;
    bad.seeds.clear();
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    bad = c;
    bad.workers = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    bad = c;
    bad.diagnostics.beta = 0.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    bad = c;
    bad.pretrain.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("config_hash covers semantics and ignores plumbing") {
    TempDir tmp("cfg-hash");
    const ExperimentConfig c = tiny_exp(tmp.str());

    ExperimentConfig moved = c;
    moved.output_dir = tmp.str() + "/elsewhere";
    moved.workers = 7;
    moved.emit_wall_time = true;
    CHECK(moved.config_hash() == c.config_hash());

    ExperimentConfig changed = c;
    changed.train.rho = 0.19;
    CHECK(changed.config_hash() != c.config_hash());
    changed = c;
    changed.data.seed = 12;
    CHECK(changed.config_hash() != c.config_hash());
    changed = c;
    changed.seeds = {1, 3};
    CHECK(changed.config_hash() != c.config_hash());
    changed = c;
    changed.pretrain.steps = 6;
    CHECK(changed.config_hash() != c.config_hash());
}

TEST_CASE("load_config distinguishes missing files from bad content") {
    TempDir tmp("cfg-load");
    CHECK_THROWS_AS((void)load_config(tmp.str() + "/nope.json"), IoError);
    const std::string path = tmp.str() + "/bad.json";
    std::ofstream(path) << "{broken";
    CHECK_THROWS_AS((void)load_config(path), ValidationError);
}

TEST_CASE("caching provider: hit, miss, and corrupt-entry recovery") {
    TempDir tmp("cache");
    ExperimentConfig c = tiny_exp(tmp.str());
    const Theta0Provider prov = caching_provider(c);
    const BenchmarkSpec sspec = spec_for_seed(c.data, c.seeds.front());
    const std::uint64_t init_seed = pretrain_seed_for(c.seeds.front());

    const ParamStore first = prov(sspec, init_seed);  // miss: pretrains + writes
    const fs::path cache(cache_dir_for(c));
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cache)) files.push_back(e.path());
    REQUIRE(files.size() == 1);

    const ParamStore second = prov(sspec, init_seed);  // hit: loads the checkpoint
    CHECK(second.content_hash() == first.content_hash());
    CHECK(second.has_theta0());

    std::ofstream(files[0], std::ios::binary) << "corrupt";
    const ParamStore third = prov(sspec, init_seed);  // recomputed and rewritten
    CHECK(third.content_hash() == first.content_hash());
    CHECK(slurp(files[0].string()).size() > 100);

    // A different pretrain budget must key a different entry.
    ExperimentConfig longer = c;
    longer.pretrain.steps = c.pretrain.steps + 1;
    const ParamStore fourth = caching_provider(longer)(sspec, init_seed);
    CHECK(fourth.content_hash() != first.content_hash());
    std::size_t count = 0;
    for (const auto& e : fs::directory_iterator(cache)) {
        (void)e;
        ++count;
    }
    CHECK(count == 2);
}

TEST_CASE("JPS_CACHE_DIR overrides the cache location") {
    TempDir tmp("cache-env");
    ExperimentConfig c = tiny_exp(tmp.str());
    CHECK(cache_dir_for(c) == c.output_dir + "/cache");
    setenv("JPS_CACHE_DIR", (tmp.str() + "/shared").c_str(), 1);
    CHECK(cache_dir_for(c) == tmp.str() + "/shared");
    unsetenv("JPS_CACHE_DIR");
}

TEST_CASE("run_sweep reproduces lodo_run cells bit for bit") {
    TempDir tmp("sweep-oracle");
    ExperimentConfig c = tiny_exp(tmp.str());
    const Theta0Provider prov = caching_provider(c);

    for (SelectorKind sel : {SelectorKind::JPS, SelectorKind::Direct, SelectorKind::Random,
                             SelectorKind::Full, SelectorKind::HeadOnly}) {
        CAPTURE(selector_name(sel));
        ExperimentConfig cs = c;
        cs.train.selector = sel;
        const std::vector<SweepCell> cells = run_sweep(cs, {sel}, {cs.train.rho}, prov);
        const RunReport ref =
            lodo_run(cs.data, cs.model, cs.train, cs.pretrain, cs.seeds, prov);
        REQUIRE(cells.size() == ref.entries.size());
        for (std::size_t i = 0; i < cells.size(); ++i)
            CHECK(same_entry(cells[i].entry, ref.entries[i]));
    }
}

TEST_CASE("run_sweep results do not depend on the worker count") {
    TempDir tmp("sweep-workers");
    ExperimentConfig c = tiny_exp(tmp.str());
    const Theta0Provider prov = caching_provider(c);
    const std::vector<SelectorKind> sels = {SelectorKind::JPS, SelectorKind::Direct};
    const std::vector<double> rhos = {0.2, 0.05};

    const std::vector<SweepCell> serial = run_sweep(c, sels, rhos, prov);
    ExperimentConfig cp = c;
    cp.workers = 3;
    const std::vector<SweepCell> parallel = run_sweep(cp, sels, rhos, prov);
    REQUIRE(serial.size() == parallel.size());
    for (std::size_t i = 0; i < serial.size(); ++i) {
        CHECK(same_entry(serial[i].entry, parallel[i].entry));
        CHECK(serial[i].stats.reduction_pct_step1 == parallel[i].stats.reduction_pct_step1);
        CHECK(serial[i].stats.reduction_pct_step2 == parallel[i].stats.reduction_pct_step2);
    }
}

TEST_CASE("run_sweep argument validation") {
    TempDir tmp("sweep-args");
    const ExperimentConfig c = tiny_exp(tmp.str());
    const Theta0Provider prov = caching_provider(c);
    CHECK_THROWS_AS((void)run_sweep(c, {}, {0.1}, prov), ValidationError);
    CHECK_THROWS_AS((void)run_sweep(c, {SelectorKind::JPS}, {}, prov), ValidationError);
    CHECK_THROWS_AS((void)run_sweep(c, {SelectorKind::JPS}, {0.0}, prov), ValidationError);
    CHECK_THROWS_AS((void)run_sweep(c, {SelectorKind::JPS}, {1.5}, prov), ValidationError);
}

TEST_CASE("cmd_gradcheck passes on the tiny config and writes its report") {
    TempDir tmp("gradcheck");
    const ExperimentConfig c = tiny_exp(tmp.str());
    const GradcheckOutcome out = cmd_gradcheck(c);
    CHECK(out.report.passed);
    CHECK(out.report.max_rel_err < 1e-5);
    const nlohmann::json j = nlohmann::json::parse(slurp(out.report_path));
    CHECK(j.at("passed").get<bool>());
    CHECK(j.at("coords_checked").get<std::size_t>() == out.report.coords_checked);
    CHECK(j.at("artifact_version").get<std::string>() == artifact_version());
    CHECK(j.at("worst_param_id").get<std::string>() == out.report.worst_param_id);
}

TEST_CASE("cmd_select writes byte-identical masks on rerun and validates flags") {
    TempDir tmp("select");
    const ExperimentConfig c = tiny_exp(tmp.str());

    const std::string p1 = cmd_select(c);
    const std::string bytes = slurp(p1);
    fs::remove(p1);
    const std::string p2 = cmd_select(c);
    CHECK(slurp(p2) == bytes);

    const Mask m = load_mask(p2);
    CHECK(m.kind == SelectorKind::JPS);
    CHECK(m.target_domain == c.data.num_domains - 1);
    CHECK(m.seed == c.seeds.front());

    SelectOverrides ov;
    ov.L = 5;
    CHECK_THROWS_AS((void)cmd_select(c, ov), ValidationError);
    ov = {};
    ov.target = 3;
    CHECK_THROWS_AS((void)cmd_select(c, ov), ValidationError);
    ov = {};
    ov.rho = 0.0;
    CHECK_THROWS_AS((void)cmd_select(c, ov), ValidationError);

    ov = {};
    ov.selector = SelectorKind::Random;
    ov.rho = 1.0;
    ov.target = 0;
    ov.out_path = tmp.str() + "/sub/dir/random.json";
    const std::string p3 = cmd_select(c, ov);
    const Mask r = load_mask(p3);
    CHECK(r.kind == SelectorKind::Random);
    CHECK(r.target_domain == 0);
    // rho = 1.0 keeps every eligible coordinate
    CHECK(r.selected.size() == eligible_space(c.model, c.train.L).total);
}

TEST_CASE("cmd_train with a mask reruns exactly the cell the mask pins down") {
    TempDir tmp("train-mask");
    const ExperimentConfig c = tiny_exp(tmp.str());
    const std::string mask_path = cmd_select(c);

    const TrainOutcome single = cmd_train(c, mask_path);
    REQUIRE(single.report.entries.size() == 1);

    const std::vector<SweepCell> cells =
        run_sweep(c, {SelectorKind::JPS}, {c.train.rho}, caching_provider(c));
    // seeds.front() at the default target = last domain
    const RunEntry& ref = cells[static_cast<std::size_t>(c.data.num_domains) - 1].entry;
    CHECK(same_entry(single.report.entries[0], ref));
}

TEST_CASE("cmd_train rejects masks from a different world") {
    TempDir tmp("train-foreign");
    const ExperimentConfig c = tiny_exp(tmp.str());
    ExperimentConfig other = c;
    other.data.seed = c.data.seed + 1;
    other.output_dir = tmp.str() + "/other";
    const std::string foreign = cmd_select(other);
    CHECK_THROWS_AS((void)cmd_train(c, foreign), ProvenanceError);
    // A deleted file is an IO problem, not a provenance one.
    fs::remove(foreign);
    CHECK_THROWS_AS((void)cmd_train(c, foreign), IoError);
}

TEST_CASE("cmd_train full protocol: schema, row count, byte-identical rerun") {
    TempDir tmp("train-full");
    const ExperimentConfig c = tiny_exp(tmp.str());
    const TrainOutcome out = cmd_train(c);
    REQUIRE(out.report.entries.size() ==
            c.seeds.size() * static_cast<std::size_t>(c.data.num_domains));

    const std::string csv = slurp(out.csv_path);
    const std::string json_text = slurp(out.json_path);
    CHECK(csv.find("seed,target_domain,selector,rho,L,best_val_acc,target_acc,"
                   "tunable_params,step1_count,step2_count,wall_time_s\n") != std::string::npos);
    CHECK(csv.find("# artifact_version=") == 0);

    const nlohmann::json j = nlohmann::json::parse(json_text);
    CHECK(j.at("entries").size() == out.report.entries.size());
    CHECK(j.at("aggregate").at("runs").get<std::size_t>() == out.report.entries.size());
    CHECK(j.at("config").at("data").at("seed").get<std::uint64_t>() == c.data.seed);

    // wall_time_s stays 0 by default so reruns are byte-identical
    for (const auto& e : j.at("entries")) CHECK(e.at("wall_time_s").get<double>() == 0.0);
    (void)cmd_train(c);
    CHECK(slurp(out.csv_path) == csv);
    CHECK(slurp(out.json_path) == json_text);
}

TEST_CASE("emit_wall_time fills per-entry timings without touching results") {
    TempDir tmp("train-wall");
    ExperimentConfig c = tiny_exp(tmp.str());
    c.seeds = {1};
    const TrainOutcome cold = cmd_train(c);
    c.emit_wall_time = true;
    const TrainOutcome timed = cmd_train(c);
    REQUIRE(cold.report.entries.size() == timed.report.entries.size());
    for (std::size_t i = 0; i < cold.report.entries.size(); ++i) {
        CHECK(cold.report.entries[i].wall_time_s == 0.0);
        CHECK(timed.report.entries[i].wall_time_s > 0.0);
        RunEntry a = cold.report.entries[i];
        RunEntry b = timed.report.entries[i];
        b.wall_time_s = a.wall_time_s = 0.0;
        CHECK(same_entry(a, b));
    }
}

TEST_CASE("cmd_ablate: sorted rows, aggregate block, deterministic bytes") {
    TempDir tmp("ablate");
    ExperimentConfig c = tiny_exp(tmp.str());
    c.seeds = {1, 2};
    const std::string path =
        cmd_ablate(c, {SelectorKind::Direct, SelectorKind::JPS}, {0.2, 0.05});
    const std::string csv = slurp(path);

    std::vector<std::string> rows, aggs;
    std::size_t at = 0;
    while (at < csv.size()) {
        const std::size_t nl = csv.find('\n', at);
        const std::string line = csv.substr(at, nl - at);
        at = nl + 1;
        if (line.rfind("# aggregate", 0) == 0)
            aggs.push_back(line);
        else if (line.rfind("#", 0) != 0 && line.rfind("seed,", 0) != 0)
            rows.push_back(line);
    }
    // 2 selectors x 2 rhos x 2 seeds x 3 targets
    CHECK(rows.size() == 24);
    CHECK(aggs.size() == 4);
    CHECK(aggs[0].find("selector=direct rho=0.05") != std::string::npos);
    CHECK(aggs[3].find("selector=jps rho=0.2") != std::string::npos);

    // (selector, rho, seed, target) must be non-decreasing down the file
    auto key = [](const std::string& line) {
        std::vector<std::string> f;
        std::size_t p = 0;
        while (p <= line.size()) {
            const std::size_t q = line.find(',', p);
            f.push_back(line.substr(p, q - p));
            if (q == std::string::npos) break;
            p = q + 1;
        }
        return std::make_tuple(f[2], std::stod(f[3]), std::stoull(f[0]), std::stoi(f[1]));
    };
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(key(rows[i - 1]) < key(rows[i]));

    (void)cmd_ablate(c, {SelectorKind::Direct, SelectorKind::JPS}, {0.2, 0.05});
    CHECK(slurp(path) == csv);
}

TEST_CASE("cmd_diagnose emits the full diagnostics document") {
    TempDir tmp("diagnose");
    ExperimentConfig c = tiny_exp(tmp.str());
    c.train.rho = 0.3;  // leave step1 enough coordinates on the tiny model
    const std::string mask_path = cmd_select(c);
    const std::string path = cmd_diagnose(c, mask_path);
    const nlohmann::json j = nlohmann::json::parse(slurp(path));

    CHECK(j.at("artifact_version").get<std::string>() == artifact_version());
    CHECK(j.at("mask").at("selector").get<std::string>() == "jps");
    CHECK(j.at("bound_terms").at("k1").get<double>() > 0.0);
    CHECK(j.at("bound_terms").at("c_min_per_domain").size() == 2);  // N-1 source domains
    CHECK(j.at("proxy_distances").size() == 3);                     // one per domain
    for (const auto& p : j.at("proxy_distances")) {
        const double v = p.at("value").get<double>();
        CHECK(v >= 0.0);
        CHECK(v <= 2.0);
    }
    CHECK(j.at("per_layer_rank").size() == 1);
    CHECK(j.at("mask_stats").at("reduction_pct_step2").get<double>() >= 0.0);

    // n = pooled source train rows: 2 source domains x 60 rows x 80%
    CHECK(j.at("bound_terms").at("n").get<std::size_t>() == 96);

    const std::string bytes = slurp(path);
    fs::remove(path);
    (void)cmd_diagnose(c, mask_path);
    CHECK(slurp(path) == bytes);

    // default-mask diagnosis (no file) reconstructs the same cell
    fs::remove(path);
    (void)cmd_diagnose(c);
    CHECK(slurp(path) == bytes);
}

TEST_CASE("cmd_diagnose refuses empty masks and foreign masks") {
    TempDir tmp("diagnose-bad");
    ExperimentConfig c = tiny_exp(tmp.str());

    SelectOverrides ov;
    ov.selector = SelectorKind::HeadOnly;
    ov.out_path = tmp.str() + "/head.json";
    const std::string head_mask = cmd_select(c, ov);
    CHECK_THROWS_AS((void)cmd_diagnose(c, head_mask), ValidationError);

    ExperimentConfig other = c;
    other.data.seed = c.data.seed + 5;
    other.output_dir = tmp.str() + "/other";
    const std::string foreign = cmd_select(other);
    CHECK_THROWS_AS((void)cmd_diagnose(c, foreign), ProvenanceError);
}

TEST_SUITE_END();
