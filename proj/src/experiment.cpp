#include "jps/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "jps/errors.hpp"

namespace jps {

const char* artifact_version() { return "0.1.0"; }

namespace {

std::string format_double(double x) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    if (ec != std::errc()) throw IoError("double formatting failed");
    return std::string(buf, p);
}

std::string u64_hex(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                const char* section) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* a : allowed)
            if (it.key() == a) {
                known = true;
                break;
            }
        if (!known)
            throw ValidationError(std::string("config: unknown key '") + it.key() + "' in " +
                                  section);
    }
}

nlohmann::json model_json(const ModelConfig& m) {
    return nlohmann::json{{"num_blocks", m.num_blocks},   {"d_model", m.d_model},
                          {"num_tokens", m.num_tokens},   {"mlp_hidden", m.mlp_hidden},
                          {"num_classes", m.num_classes}, {"dropout_rate", m.dropout_rate}};
}

nlohmann::json data_json(const BenchmarkSpec& d) {
    return nlohmann::json{{"num_domains", d.num_domains},
                          {"num_classes", d.num_classes},
                          {"invariant_dims", d.invariant_dims},
                          {"spurious_dims", d.spurious_dims},
                          {"noise_dims", d.noise_dims},
                          {"samples_per_class_per_domain", d.samples_per_class_per_domain},
                          {"source_gammas", d.source_gammas},
                          {"target_gamma", d.target_gamma},
                          {"noise_scale", d.noise_scale},
                          {"seed", d.seed}};
}

nlohmann::json train_json(const TrainConfig& t) {
    return nlohmann::json{{"selector", selector_name(t.selector)},
                          {"rho", t.rho},
                          {"L", t.L},
                          {"lr", t.lr},
                          {"dropout_rate", t.dropout_rate},
                          {"steps", t.steps},
                          {"batch_size", t.batch_size},
                          {"val_multiplier", t.val_multiplier},
                          {"optimizer", optimizer_name(t.optimizer)},
                          {"weight_decay", t.weight_decay},
                          {"eval_every", t.eval_every}};
}

nlohmann::json pretrain_json(const PretrainConfig& p) {
    return nlohmann::json{{"steps", p.steps}, {"lr", p.lr}, {"batch_size", p.batch_size}};
}

nlohmann::json config_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["model"] = model_json(c.model);
    j["data"] = data_json(c.data);
    j["train"] = train_json(c.train);
    j["pretrain"] = pretrain_json(c.pretrain);
    j["diagnostics"] = {{"beta", c.diagnostics.beta}, {"proxy_enabled", c.diagnostics.proxy_enabled}};
    j["output_dir"] = c.output_dir;
    j["seeds"] = c.seeds;
    j["workers"] = c.workers;
    j["emit_wall_time"] = c.emit_wall_time;
    return j;
}

void parse_model(const nlohmann::json& j, ModelConfig& m) {
    check_keys(j, {"num_blocks", "d_model", "num_tokens", "mlp_hidden", "num_classes",
                   "dropout_rate"},
               "model");
    m.num_blocks = j.value("num_blocks", m.num_blocks);
    m.d_model = j.value("d_model", m.d_model);
    m.num_tokens = j.value("num_tokens", m.num_tokens);
    m.mlp_hidden = j.value("mlp_hidden", m.mlp_hidden);
    m.num_classes = j.value("num_classes", m.num_classes);
    m.dropout_rate = j.value("dropout_rate", m.dropout_rate);
}

void parse_data(const nlohmann::json& j, BenchmarkSpec& d) {
    check_keys(j, {"num_domains", "num_classes", "invariant_dims", "spurious_dims", "noise_dims",
                   "samples_per_class_per_domain", "source_gammas", "target_gamma", "noise_scale",
                   "seed"},
               "data");
    d.num_domains = j.value("num_domains", d.num_domains);
    d.num_classes = j.value("num_classes", d.num_classes);
    d.invariant_dims = j.value("invariant_dims", d.invariant_dims);
    d.spurious_dims = j.value("spurious_dims", d.spurious_dims);
    d.noise_dims = j.value("noise_dims", d.noise_dims);
    d.samples_per_class_per_domain =
        j.value("samples_per_class_per_domain", d.samples_per_class_per_domain);
    d.source_gammas = j.value("source_gammas", d.source_gammas);
    d.target_gamma = j.value("target_gamma", d.target_gamma);
    d.noise_scale = j.value("noise_scale", d.noise_scale);
    d.seed = j.value("seed", d.seed);
}

void parse_train(const nlohmann::json& j, TrainConfig& t) {
    check_keys(j, {"selector", "rho", "L", "lr", "dropout_rate", "steps", "batch_size",
                   "val_multiplier", "optimizer", "weight_decay", "eval_every"},
               "train");
    if (j.contains("selector")) t.selector = selector_from_name(j.at("selector").get<std::string>());
    t.rho = j.value("rho", t.rho);
    t.L = j.value("L", t.L);
    t.lr = j.value("lr", t.lr);
    t.dropout_rate = j.value("dropout_rate", t.dropout_rate);
    t.steps = j.value("steps", t.steps);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.val_multiplier = j.value("val_multiplier", t.val_multiplier);
    if (j.contains("optimizer")) t.optimizer = optimizer_from_name(j.at("optimizer").get<std::string>());
    t.weight_decay = j.value("weight_decay", t.weight_decay);
    t.eval_every = j.value("eval_every", t.eval_every);
}

void parse_pretrain(const nlohmann::json& j, PretrainConfig& p) {
    check_keys(j, {"steps", "lr", "batch_size"}, "pretrain");
    p.steps = j.value("steps", p.steps);
    p.lr = j.value("lr", p.lr);
    p.batch_size = j.value("batch_size", p.batch_size);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << text;
    if (!f.good()) throw IoError("write failed: " + path);
}

void make_dirs(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void ensure_parent_dir(const std::string& path) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) make_dirs(p.parent_path().string());
}

}  // namespace

void ExperimentConfig::validate() const {
    model.validate();
    data.validate();
    train.validate();
    if (data.feature_dim() != model.input_dim())
        throw ValidationError(
            "config: data dims must fill the token grid "
            "(invariant+spurious+noise == num_tokens*d_model)");
    if (data.num_classes != model.num_classes)
        throw ValidationError("config: data.num_classes must equal model.num_classes");
    if (train.L > model.num_blocks)
        throw ValidationError("config: train.L exceeds model.num_blocks");
    if (train.selector != SelectorKind::HeadOnly && model.num_blocks > 0 && train.L < 1)
        throw ValidationError("config: backbone selectors need train.L >= 1");
    if (seeds.empty()) throw ValidationError("config: seeds must be nonempty");
    if (workers < 1) throw ValidationError("config: workers must be >= 1");
    if (output_dir.empty()) throw ValidationError("config: output_dir must be nonempty");
    if (pretrain.steps < 0) throw ValidationError("config: pretrain.steps must be >= 0");
    if (pretrain.lr <= 0.0) throw ValidationError("config: pretrain.lr must be positive");
    if (pretrain.batch_size <= 0) throw ValidationError("config: pretrain.batch_size must be positive");
    if (diagnostics.beta <= 0.0) throw ValidationError("config: diagnostics.beta must be positive");
}

std::uint64_t ExperimentConfig::config_hash() const {
    nlohmann::json j = config_json(*this);
    j.erase("output_dir");
    j.erase("workers");
    j.erase("emit_wall_time");
    return fnv1a(j.dump());
}

std::string dump_config(const ExperimentConfig& cfg) { return config_json(cfg).dump(2) + "\n"; }

ExperimentConfig parse_config(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const std::exception& e) {
        throw ValidationError(std::string("config: not valid JSON: ") + e.what());
    }
    ExperimentConfig c;
    try {
        if (!j.is_object()) throw ValidationError("config: top level must be a JSON object");
        check_keys(j, {"model", "data", "train", "pretrain", "diagnostics", "output_dir", "seeds",
                       "workers", "emit_wall_time"},
                   "top level");
        if (j.contains("model")) parse_model(j.at("model"), c.model);
        if (j.contains("data")) parse_data(j.at("data"), c.data);
        if (j.contains("train")) parse_train(j.at("train"), c.train);
        if (j.contains("pretrain")) parse_pretrain(j.at("pretrain"), c.pretrain);
        if (j.contains("diagnostics")) {
            const nlohmann::json& d = j.at("diagnostics");
            check_keys(d, {"beta", "proxy_enabled"}, "diagnostics");
            c.diagnostics.beta = d.value("beta", c.diagnostics.beta);
            c.diagnostics.proxy_enabled = d.value("proxy_enabled", c.diagnostics.proxy_enabled);
        }
        c.output_dir = j.value("output_dir", c.output_dir);
        c.seeds = j.value("seeds", c.seeds);
        c.workers = j.value("workers", c.workers);
        c.emit_wall_time = j.value("emit_wall_time", c.emit_wall_time);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw IoError("read failed: " + path);
    return parse_config(text);
}

std::string cache_dir_for(const ExperimentConfig& cfg) {
    if (const char* env = std::getenv("JPS_CACHE_DIR"); env != nullptr && env[0] != '\0')
        return env;
    return cfg.output_dir + "/cache";
}

Theta0Provider caching_provider(const ExperimentConfig& cfg) {
    const std::string dir = cache_dir_for(cfg);
    const ModelConfig model = cfg.model;
    const PretrainConfig pre = cfg.pretrain;
    return [dir, model, pre](const BenchmarkSpec& spec, std::uint64_t init_seed) -> ParamStore {
        // Key covers everything that determines theta0; the filename is just
        // where the keyed entry lives.
        nlohmann::json kj;
        kj["model"] = model_json(model);
        kj["pretrain"] = pretrain_json(pre);
        std::uint64_t key = fnv1a(kj.dump());
        key = hash_combine(key, spec.content_hash());
        key = hash_combine(key, init_seed);
        const std::string path = dir + "/theta0-" + u64_hex(key) + ".json";
        if (std::filesystem::exists(path)) {
            try {
                auto loaded = load_checkpoint(path);
                if (loaded.second == model && loaded.first.has_theta0())
                    return std::move(loaded.first);
            } catch (const Error&) {
                // unreadable or foreign entry: recompute and overwrite below
            }
        }
        ParamStore ps = pretrain_theta0(model, spec, pre.steps, pre.lr, init_seed, pre.batch_size);
        make_dirs(dir);
        const std::string tmp = path + ".tmp";
        save_checkpoint(ps, model, tmp);
        std::error_code ec;
        std::filesystem::rename(tmp, path, ec);
        if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
        return ps;
    };
}

const std::vector<double>& default_rho_grid() {
    static const std::vector<double> grid = {0.2, 0.1, 0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001};
    return grid;
}

namespace {

Mask dummy_head_only_mask(double rho, SeededRng mrng, std::uint64_t seed, std::uint64_t whash,
                          int target) {
    GradSnapshot dummy;
    dummy.domains = 1;
    dummy.coords = 1;
    dummy.G = Tensor({1, 1}, {0.0});
    return build_mask(SelectorKind::HeadOnly, dummy, rho, 0, mrng, seed, whash, target);
}

/// Everything a single (seed, target) cell is built from, reconstructed with
/// the same derivations lodo_run uses. `bind` (if given) is provenance-checked
/// against the world hash before any further work.
struct CellWorld {
    BenchmarkSpec sspec;
    DomainDataset ds;
    ParamStore theta0;
    std::uint64_t whash = 0;
    LodoSplit split;
    SeededRng cell{0};
    GradSnapshot g;
    bool has_g = false;
};

CellWorld make_cell_world(const ExperimentConfig& cfg, const Theta0Provider& prov,
                          std::uint64_t seed, int target, int L, bool want_g,
                          const Mask* bind = nullptr) {
    CellWorld w;
    w.sspec = spec_for_seed(cfg.data, seed);
    w.ds = generate(w.sspec);
    w.theta0 = prov(w.sspec, pretrain_seed_for(seed));
    w.whash = world_hash(w.ds, w.theta0);
    if (bind != nullptr) require_mask_provenance(*bind, w.whash);
    w.cell = cell_rng_for(seed, target);
    w.split = leave_one_out_splits(w.ds, target, cfg.train.val_multiplier, cfg.train.batch_size,
                                   w.cell);
    if (want_g && cfg.model.num_blocks > 0 && L >= 1) {
        std::vector<Batch> vbatches;
        for (int e : w.split.source_domains)
            vbatches.push_back(
                make_batch(w.ds, cfg.model, e, w.split.val_jps_idx[static_cast<std::size_t>(e)]));
        w.g = domain_gradients(w.theta0, cfg.model, vbatches, L);
        w.has_g = true;
    }
    return w;
}

std::string entries_csv(const std::vector<RunEntry>& entries, std::uint64_t chash) {
    std::string s = "# artifact_version=" + std::string(artifact_version()) +
                    " config_hash=" + u64_hex(chash) + "\n";
    s += "seed,target_domain,selector,rho,L,best_val_acc,target_acc,tunable_params,"
         "step1_count,step2_count,wall_time_s\n";
    for (const RunEntry& e : entries) {
        s += std::to_string(e.seed) + "," + std::to_string(e.target_domain) + "," +
             selector_name(e.selector) + "," + format_double(e.rho) + "," + std::to_string(e.L) +
             "," + format_double(e.best_val_acc) + "," + format_double(e.target_acc_at_best_val) +
             "," + std::to_string(e.tunable_backbone_params) + "," +
             std::to_string(e.stage_counts.step1_count) + "," +
             std::to_string(e.stage_counts.step2_count) + "," + format_double(e.wall_time_s) +
             "\n";
    }
    return s;
}

nlohmann::json entry_json(const RunEntry& e) {
    return nlohmann::json{{"seed", e.seed},
                          {"target_domain", e.target_domain},
                          {"selector", selector_name(e.selector)},
                          {"rho", e.rho},
                          {"L", e.L},
                          {"best_val_acc", e.best_val_acc},
                          {"target_acc_at_best_val", e.target_acc_at_best_val},
                          {"tunable_backbone_params", e.tunable_backbone_params},
                          {"per_domain_k", e.stage_counts.per_domain_k},
                          {"step1_count", e.stage_counts.step1_count},
                          {"step2_count", e.stage_counts.step2_count},
                          {"degraded_empty", e.degraded_empty},
                          {"wall_time_s", e.wall_time_s}};
}

}  // namespace

std::vector<SweepCell> run_sweep(const ExperimentConfig& cfg,
                                 const std::vector<SelectorKind>& selectors,
                                 const std::vector<double>& rhos,
                                 const Theta0Provider& provider) {
    cfg.validate();
    if (selectors.empty()) throw ValidationError("sweep: need at least one selector");
    if (rhos.empty()) throw ValidationError("sweep: need at least one rho");
    for (double r : rhos)
        if (!(r > 0.0 && r <= 1.0)) throw ValidationError("sweep: rho must be in (0, 1]");
    for (SelectorKind s : selectors)
        if (s != SelectorKind::HeadOnly && cfg.model.num_blocks > 0 && cfg.train.L < 1)
            throw ValidationError("sweep: backbone selectors need train.L >= 1");
    const Theta0Provider prov = provider ? provider : caching_provider(cfg);

    const int targets = cfg.data.num_domains;
    const std::size_t per_group = selectors.size() * rhos.size();
    std::vector<SweepCell> out(cfg.seeds.size() * static_cast<std::size_t>(targets) * per_group);

    const bool backbone = cfg.model.num_blocks > 0;
    std::size_t m_total = 0;
    if (backbone && cfg.train.L >= 1) m_total = eligible_space(cfg.model, cfg.train.L).total;
    const bool need_g = backbone && std::any_of(selectors.begin(), selectors.end(),
                                                [](SelectorKind s) {
                                                    return s != SelectorKind::HeadOnly;
                                                });

    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
        const std::uint64_t seed = cfg.seeds[si];
        const BenchmarkSpec sspec = spec_for_seed(cfg.data, seed);
        const DomainDataset ds = generate(sspec);
        const ParamStore theta0 = prov(sspec, pretrain_seed_for(seed));
        const std::uint64_t whash = world_hash(ds, theta0);
        for (int target = 0; target < targets; ++target) {
            SeededRng split_rng = cell_rng_for(seed, target);
            const LodoSplit split = leave_one_out_splits(ds, target, cfg.train.val_multiplier,
                                                         cfg.train.batch_size, split_rng);
            // split_rng has consumed the split draws, exactly as in lodo_run.
            const SeededRng cell = split_rng;
            GradSnapshot g;
            if (need_g) {
                std::vector<Batch> vbatches;
                for (int e : split.source_domains)
                    vbatches.push_back(make_batch(ds, cfg.model, e,
                                                  split.val_jps_idx[static_cast<std::size_t>(e)]));
                g = domain_gradients(theta0, cfg.model, vbatches, cfg.train.L);
            }

            const std::size_t group_base =
                (si * static_cast<std::size_t>(targets) + static_cast<std::size_t>(target)) *
                per_group;
            auto run_cell = [&](std::size_t ci) {
                const SelectorKind sel = selectors[ci / rhos.size()];
                const double rho = rhos[ci % rhos.size()];
                Mask mask;
                if (sel == SelectorKind::HeadOnly || !backbone) {
                    mask = dummy_head_only_mask(rho, cell.derive("random-mask"), seed, whash,
                                                target);
                } else {
                    SeededRng mrng = cell.derive("random-mask");
                    mask = build_mask(sel, g, rho, cfg.train.L, mrng, seed, whash, target);
                }
                TrainConfig cell_cfg = cfg.train;
                cell_cfg.selector = sel;
                cell_cfg.rho = rho;
                cell_cfg.seed = seed;
                const auto t0 = std::chrono::steady_clock::now();
                SweepCell sc;
                sc.entry = train(theta0, cfg.model, cell_cfg, ds, split, mask, cell);
                if (cfg.emit_wall_time)
                    sc.entry.wall_time_s =
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                            .count();
                if (mask.stage_counts.per_domain_k > 0)
                    sc.stats = mask_stats(mask, m_total);
                else
                    sc.stats = MaskStats{mask.stage_counts, 0.0, 0.0};
                out[group_base + ci] = std::move(sc);
            };

            if (cfg.workers <= 1 || per_group == 1) {
                for (std::size_t ci = 0; ci < per_group; ++ci) run_cell(ci);
            } else {
                std::atomic<std::size_t> next{0};
                std::exception_ptr first_error = nullptr;
                std::mutex err_mutex;
                auto work = [&]() {
                    for (;;) {
                        const std::size_t ci = next.fetch_add(1);
                        if (ci >= per_group) return;
                        try {
                            run_cell(ci);
                        } catch (...) {
                            std::lock_guard<std::mutex> lk(err_mutex);
                            if (!first_error) first_error = std::current_exception();
                            return;
                        }
                    }
                };
                const std::size_t nthreads =
                    std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), per_group);
                std::vector<std::thread> pool;
                pool.reserve(nthreads);
                for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(work);
                for (auto& th : pool) th.join();
                if (first_error) std::rethrow_exception(first_error);
            }
        }
    }
    return out;
}

GradcheckOutcome cmd_gradcheck(const ExperimentConfig& cfg) {
    cfg.validate();
    make_dirs(cfg.output_dir);
    const BenchmarkSpec sspec = spec_for_seed(cfg.data, cfg.seeds.front());
    const DomainDataset ds = generate(sspec);
    ParamStore params = init_params(cfg.model, pretrain_seed_for(cfg.seeds.front()));
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < std::min<std::size_t>(8, ds.domain_size(0)); ++i)
        rows.push_back(i);
    const Batch batch = make_batch(ds, cfg.model, 0, rows);
    constexpr double kTol = 1e-5;
    const FiniteDiffReport rep = finite_diff_check(params, cfg.model, batch, 1e-4, kTol);

    nlohmann::json j;
    j["artifact_version"] = artifact_version();
    j["config_hash"] = u64_hex(cfg.config_hash());
    j["tolerance"] = kTol;
    j["max_rel_err"] = rep.max_rel_err;
    j["worst_param_id"] = rep.worst_param_id;
    j["worst_offset"] = rep.worst_offset;
    j["worst_analytic"] = rep.worst_analytic;
    j["worst_numeric"] = rep.worst_numeric;
    j["coords_checked"] = rep.coords_checked;
    j["passed"] = rep.passed;
    const std::string path = cfg.output_dir + "/gradcheck.json";
    write_text(path, j.dump(2) + "\n");
    std::cout << "gradcheck: coords=" << rep.coords_checked
              << " max_rel_err=" << format_double(rep.max_rel_err) << " worst=" << rep.worst_param_id
              << " -> " << path << "\n";
    if (!rep.passed)
        throw NumericError("gradient check failed: max_rel_err=" + format_double(rep.max_rel_err) +
                           " at " + rep.worst_param_id);
    return {rep, path};
}

std::string cmd_select(const ExperimentConfig& cfg, const SelectOverrides& ov) {
    cfg.validate();
    ExperimentConfig ecfg = cfg;
    if (ov.selector) ecfg.train.selector = *ov.selector;
    if (ov.rho) ecfg.train.rho = *ov.rho;
    if (ov.L) ecfg.train.L = *ov.L;
    ecfg.validate();  // re-check rho range, L vs num_blocks, selector/L pairing
    const TrainConfig& t = ecfg.train;
    const int target = ov.target.value_or(cfg.data.num_domains - 1);
    if (target < 0 || target >= cfg.data.num_domains)
        throw ValidationError("select: target out of range");
    const std::uint64_t seed = cfg.seeds.front();
    const bool backbone = t.selector != SelectorKind::HeadOnly && cfg.model.num_blocks > 0;
    const CellWorld w = make_cell_world(ecfg, caching_provider(cfg), seed, target, t.L, backbone);
    Mask mask;
    if (!backbone) {
        mask = dummy_head_only_mask(t.rho, w.cell.derive("random-mask"), seed, w.whash, target);
    } else {
        SeededRng mrng = w.cell.derive("random-mask");
        mask = build_mask(t.selector, w.g, t.rho, t.L, mrng, seed, w.whash, target);
    }
    const std::string out = ov.out_path.value_or(cfg.output_dir + "/mask.json");
    ensure_parent_dir(out);
    save_mask(mask, out);
    std::cout << "select: " << selector_name(mask.kind) << " rho=" << format_double(mask.rho)
              << " L=" << mask.L << " target=" << mask.target_domain
              << " selected=" << mask.selected.size() << " -> " << out << "\n";
    return out;
}

TrainOutcome cmd_train(const ExperimentConfig& cfg, const std::string& mask_path) {
    cfg.validate();
    make_dirs(cfg.output_dir);
    const Theta0Provider prov = caching_provider(cfg);
    RunReport report;
    if (mask_path.empty()) {
        report = lodo_run(cfg.data, cfg.model, cfg.train, cfg.pretrain, cfg.seeds, prov,
                          cfg.emit_wall_time);
    } else {
        const Mask mask = load_mask(mask_path);
        // The mask pins the cell: its seed, target and selector identity beat
        // whatever the config's train section says.
        const CellWorld w = make_cell_world(cfg, prov, mask.seed, mask.target_domain, mask.L,
                                            /*want_g=*/false, &mask);
        TrainConfig cell_cfg = cfg.train;
        cell_cfg.selector = mask.kind;
        cell_cfg.rho = mask.rho;
        cell_cfg.L = mask.L;
        cell_cfg.seed = mask.seed;
        const auto t0 = std::chrono::steady_clock::now();
        RunEntry entry = train(w.theta0, cfg.model, cell_cfg, w.ds, w.split, mask, w.cell);
        if (cfg.emit_wall_time)
            entry.wall_time_s =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.entries.push_back(std::move(entry));
        aggregate_report(report);
    }

    const std::uint64_t chash = cfg.config_hash();
    nlohmann::json j;
    j["artifact_version"] = artifact_version();
    j["config_hash"] = u64_hex(chash);
    j["config"] = config_json(cfg);
    nlohmann::json entries = nlohmann::json::array();
    for (const RunEntry& e : report.entries) entries.push_back(entry_json(e));
    j["entries"] = entries;
    j["aggregate"] = {{"runs", report.entries.size()},
                      {"mean_target_acc", report.mean_target_acc},
                      {"std_target_acc", report.std_target_acc},
                      {"mean_val_acc", report.mean_val_acc},
                      {"std_val_acc", report.std_val_acc}};
    TrainOutcome out;
    out.report = std::move(report);
    out.json_path = cfg.output_dir + "/report.json";
    out.csv_path = cfg.output_dir + "/report.csv";
    write_text(out.json_path, j.dump(2) + "\n");
    write_text(out.csv_path, entries_csv(out.report.entries, chash));
    std::cout << "train: runs=" << out.report.entries.size()
              << " mean_target_acc=" << format_double(out.report.mean_target_acc)
              << " std=" << format_double(out.report.std_target_acc) << " -> " << out.csv_path
              << "\n";
    return out;
}

std::string cmd_ablate(const ExperimentConfig& cfg, std::vector<SelectorKind> selectors,
                       std::vector<double> rho_grid) {
    cfg.validate();
    make_dirs(cfg.output_dir);
    if (selectors.empty())
        selectors = {SelectorKind::JPS, SelectorKind::WithoutVariance, SelectorKind::Direct};
    if (rho_grid.empty()) rho_grid = default_rho_grid();
    const std::vector<SweepCell> cells = run_sweep(cfg, selectors, rho_grid, caching_provider(cfg));

    std::vector<std::size_t> order(cells.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const RunEntry& x = cells[a].entry;
        const RunEntry& y = cells[b].entry;
        const std::string xs = selector_name(x.selector);
        const std::string ys = selector_name(y.selector);
        if (xs != ys) return xs < ys;
        if (x.rho != y.rho) return x.rho < y.rho;
        if (x.seed != y.seed) return x.seed < y.seed;
        return x.target_domain < y.target_domain;
    });
    std::vector<RunEntry> sorted;
    sorted.reserve(cells.size());
    for (std::size_t i : order) sorted.push_back(cells[i].entry);

    const std::uint64_t chash = cfg.config_hash();
    std::string csv = entries_csv(sorted, chash);
    // Aggregate block: one '#' line per (selector, rho) in row order.
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t jend = i;
        double st = 0.0, sv = 0.0;
        while (jend < sorted.size() && sorted[jend].selector == sorted[i].selector &&
               sorted[jend].rho == sorted[i].rho) {
            st += sorted[jend].target_acc_at_best_val;
            sv += sorted[jend].best_val_acc;
            ++jend;
        }
        const double n = static_cast<double>(jend - i);
        const double mt = st / n, mv = sv / n;
        double vt = 0.0, vv = 0.0;
        for (std::size_t k = i; k < jend; ++k) {
            vt += (sorted[k].target_acc_at_best_val - mt) * (sorted[k].target_acc_at_best_val - mt);
            vv += (sorted[k].best_val_acc - mv) * (sorted[k].best_val_acc - mv);
        }
        csv += "# aggregate selector=" + std::string(selector_name(sorted[i].selector)) +
               " rho=" + format_double(sorted[i].rho) + " n=" + std::to_string(jend - i) +
               " mean_target_acc=" + format_double(mt) +
               " std_target_acc=" + format_double(std::sqrt(vt / n)) +
               " mean_val_acc=" + format_double(mv) +
               " std_val_acc=" + format_double(std::sqrt(vv / n)) + "\n";
        i = jend;
    }
    const std::string path = cfg.output_dir + "/ablate.csv";
    write_text(path, csv);
    std::cout << "ablate: cells=" << cells.size() << " selectors=" << selectors.size()
              << " rhos=" << rho_grid.size() << " -> " << path << "\n";
    return path;
}

std::string cmd_diagnose(const ExperimentConfig& cfg, const std::string& mask_path) {
    cfg.validate();
    make_dirs(cfg.output_dir);
    const Theta0Provider prov = caching_provider(cfg);

    Mask mask;
    CellWorld w;
    if (mask_path.empty()) {
        // Diagnose the mask cmd_select would build with no overrides.
        const TrainConfig& t = cfg.train;
        const int target = cfg.data.num_domains - 1;
        const std::uint64_t seed = cfg.seeds.front();
        const bool backbone = t.selector != SelectorKind::HeadOnly && cfg.model.num_blocks > 0;
        w = make_cell_world(cfg, prov, seed, target, t.L, backbone);
        if (!backbone) {
            mask = dummy_head_only_mask(t.rho, w.cell.derive("random-mask"), seed, w.whash, target);
        } else {
            SeededRng mrng = w.cell.derive("random-mask");
            mask = build_mask(t.selector, w.g, t.rho, t.L, mrng, seed, w.whash, target);
        }
    } else {
        mask = load_mask(mask_path);
        w = make_cell_world(cfg, prov, mask.seed, mask.target_domain, mask.L, /*want_g=*/true,
                            &mask);
    }
    if (mask.selected.empty())
        throw ValidationError("diagnose: mask selects no backbone coordinates");
    if (!w.has_g) throw ValidationError("diagnose: no eligible space to diagnose against");

    const EligibleSpace space = eligible_space(cfg.model, mask.L);
    std::size_t n_train = 0;
    for (int e : w.split.source_domains)
        n_train += w.split.train_idx[static_cast<std::size_t>(e)].size();

    BoundTerms bt = bound_terms(w.g, mask, cfg.diagnostics.beta, n_train, mask.rho);

    nlohmann::json proxies = nlohmann::json::array();
    if (cfg.diagnostics.proxy_enabled) {
        const int N = w.ds.num_domains();
        std::vector<Tensor> feats(static_cast<std::size_t>(N));
        for (int e = 0; e < N; ++e) {
            std::vector<std::size_t> rows(w.ds.domain_size(e));
            for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = r;
            feats[static_cast<std::size_t>(e)] =
                forward_features(w.theta0, cfg.model, make_batch(w.ds, cfg.model, e, rows));
        }
        const std::size_t d = static_cast<std::size_t>(cfg.model.d_model);
        const SeededRng proxy_rng = w.cell.derive("proxy");
        for (int i = 0; i < N; ++i) {
            // Domain i against the pooled sources other than i (the target
            // compares against all sources).
            std::size_t rows_other = 0;
            for (int e : w.split.source_domains)
                if (e != i) rows_other += feats[static_cast<std::size_t>(e)].dim(0);
            Tensor other({rows_other, d});
            std::size_t at = 0;
            for (int e : w.split.source_domains) {
                if (e == i) continue;
                const Tensor& fe = feats[static_cast<std::size_t>(e)];
                std::copy(fe.data(), fe.data() + fe.size(), other.data() + at);
                at += fe.size();
            }
            const ProxyResult pr =
                a_distance_proxy(feats[static_cast<std::size_t>(i)], other,
                                 proxy_rng.derive(static_cast<std::uint64_t>(i)));
            bt.a_distance_proxy.push_back(pr.value);
            proxies.push_back({{"domain", i},
                               {"is_target", i == mask.target_domain},
                               {"value", pr.value},
                               {"degenerate", pr.degenerate}});
        }
    }

    const MaskStats stats = mask_stats(mask, space.total);
    const std::vector<LayerRank> ranks = mask_rank_report(mask, cfg.model);
    const std::vector<std::size_t> step1 = importance_select(w.g, mask.rho);

    nlohmann::json j;
    j["artifact_version"] = artifact_version();
    j["config_hash"] = u64_hex(cfg.config_hash());
    j["mask"] = {{"selector", selector_name(mask.kind)},
                 {"rho", mask.rho},
                 {"L", mask.L},
                 {"seed", mask.seed},
                 {"target_domain", mask.target_domain},
                 {"selected_count", mask.selected.size()},
                 {"per_domain_k", mask.stage_counts.per_domain_k},
                 {"step1_count", mask.stage_counts.step1_count},
                 {"step2_count", mask.stage_counts.step2_count},
                 {"degraded_empty", mask.degraded_empty}};
    j["mask_stats"] = {{"reduction_pct_step1", stats.reduction_pct_step1},
                       {"reduction_pct_step2", stats.reduction_pct_step2}};
    j["bound_terms"] = {{"beta", bt.beta},
                        {"n", bt.n},
                        {"rho", bt.rho},
                        {"c_min_per_domain", bt.c_min_per_domain},
                        {"c_min_pooled", bt.c_min_pooled},
                        {"k1", bt.k1},
                        {"k2_first_term", bt.k2_first_term}};
    j["proxy_distances"] = proxies;
    nlohmann::json rank_arr = nlohmann::json::array();
    for (const LayerRank& r : ranks)
        rank_arr.push_back({{"block_index", r.block_index},
                            {"selected_count", r.selected_count},
                            {"weight_selected", r.weight_selected},
                            {"rank", r.rank}});
    j["per_layer_rank"] = rank_arr;
    j["jps_step1_empty"] = step1.empty();
    if (!step1.empty()) {
        const CminComparison cmp = jps_vs_direct_cmin(w.g, mask.rho);
        j["jps_vs_direct"] = {{"jps_min_per_domain", cmp.jps_min_per_domain},
                              {"direct_min_per_domain", cmp.direct_min_per_domain}};
        j["mbar_agreement"] = mbar_agreement(w.g, step1);
    } else {
        j["jps_vs_direct"] = nullptr;
        j["mbar_agreement"] = nullptr;
    }

    const std::string path = cfg.output_dir + "/diagnostics.json";
    write_text(path, j.dump(2) + "\n");
    std::cout << "diagnose: k1=" << format_double(bt.k1)
              << " k2_first=" << format_double(bt.k2_first_term)
              << " c_min_pooled=" << format_double(bt.c_min_pooled) << " -> " << path << "\n";
    return path;
}

}  // namespace jps
