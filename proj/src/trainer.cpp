#include "jps/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <set>

#include "jps/errors.hpp"

namespace jps {

const char* optimizer_name(Optimizer o) {
    return o == Optimizer::sgd ? "sgd" : "adam";
}

Optimizer optimizer_from_name(const std::string& name) {
    if (name == "sgd") return Optimizer::sgd;
    if (name == "adam") return Optimizer::adam;
    throw ValidationError("unknown optimizer: " + name);
}

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ValidationError("lr must be positive");
    if (steps < 0) throw ValidationError("steps must be >= 0");
    if (batch_size <= 0) throw ValidationError("batch_size must be positive");
    if (val_multiplier != 10 && val_multiplier != 20 && val_multiplier != 50)
        throw ValidationError("val_multiplier must be one of {10, 20, 50}");
    if (weight_decay != 0.0) throw ValidationError("weight_decay is fixed at 0");
    if (eval_every <= 0) throw ValidationError("eval_every must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw ValidationError("dropout_rate must be in [0,1)");
    if (rho <= 0.0 || rho > 1.0) throw ValidationError("rho must be in (0, 1]");
    if (L < 0) throw ValidationError("L must be >= 0");
}

TunableSet tunable_set(const ParamStore& params, const ModelConfig& cfg,
                       const EligibleSpace& space, const Mask& mask) {
    (void)cfg;
    TunableSet t;
    for (std::size_t j : mask.selected) {
        auto [pi, off] = space.locate(j);
        t.coords.emplace_back(params.index_of(space.param_ids[pi]), off);
    }
    t.backbone_count = t.coords.size();
    for (const char* id : {"head.weight", "head.bias"}) {
        const std::size_t ei = params.index_of(id);
        for (std::size_t off = 0; off < params.entry(ei).tensor.size(); ++off)
            t.coords.emplace_back(ei, off);
    }
    return t;
}

OptState make_opt_state(Optimizer kind, std::size_t tunable_count) {
    OptState s;
    s.kind = kind;
    if (kind == Optimizer::adam) {
        s.m.assign(tunable_count, 0.0);
        s.v.assign(tunable_count, 0.0);
    }
    return s;
}

void masked_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
                 const TunableSet& tunable, OptState& state, const TrainConfig& cfg) {
    if (state.kind == Optimizer::adam && state.m.size() != tunable.coords.size())
        throw ValidationError("masked_step: optimizer state does not match tunable set");
    ++state.step_count;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    for (std::size_t c = 0; c < tunable.coords.size(); ++c) {
        const auto [ei, off] = tunable.coords[c];
        ParamEntry& e = params.entry(ei);
        if (off >= e.tensor.size()) throw ValidationError("masked_step: coordinate out of range");
        const double g = grads.at(e.param_id)[off];
        if (state.kind == Optimizer::sgd) {
            e.tensor[off] -= cfg.lr * g;
        } else {
            state.m[c] = b1 * state.m[c] + (1.0 - b1) * g;
            state.v[c] = b2 * state.v[c] + (1.0 - b2) * g * g;
            const double mhat = state.m[c] / bc1;
            const double vhat = state.v[c] / bc2;
            e.tensor[off] -= cfg.lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

double evaluate(const ParamStore& params, const ModelConfig& cfg, const Batch& batch) {
    if (batch.size() == 0) throw ValidationError("evaluate: empty split");
    Tensor logits = forward(params, cfg, batch, /*train_mode=*/false);
    std::size_t correct = 0;
    const auto C = static_cast<std::size_t>(cfg.num_classes);
    for (std::size_t r = 0; r < batch.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (logits.at2(r, c) > logits.at2(r, best)) best = c;
        correct += static_cast<int>(best) == batch.labels[r];
    }
    return static_cast<double>(correct) / static_cast<double>(batch.size());
}

namespace {

struct PooledIndex {
    int domain;
    std::size_t row;
};

Batch gather_pooled(const DomainDataset& ds, const ModelConfig& cfg,
                    const std::vector<PooledIndex>& rows) {
    if (rows.empty()) throw ValidationError("empty pooled row set");
    const auto d = static_cast<std::size_t>(ds.spec.feature_dim());
    Batch b;
    b.inputs = Tensor({rows.size(), static_cast<std::size_t>(cfg.num_tokens),
                       static_cast<std::size_t>(cfg.d_model)});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto eu = static_cast<std::size_t>(rows[i].domain);
        std::memcpy(b.inputs.data() + i * d, ds.features[eu].data() + rows[i].row * d,
                    d * sizeof(double));
        b.labels.push_back(ds.labels[eu][rows[i].row]);
        b.domain_ids.push_back(rows[i].domain);
    }
    return b;
}

}  // namespace

RunEntry train(const ParamStore& theta0, const ModelConfig& cfg, const TrainConfig& tcfg,
               const DomainDataset& ds, const LodoSplit& split, const Mask& mask,
               SeededRng cell_rng) {
    tcfg.validate();
    if (!theta0.has_theta0()) throw ValidationError("train: theta0 not snapshotted");
    require_mask_provenance(mask, world_hash(ds, theta0));
    if (mask.target_domain != split.target_domain)
        throw ProvenanceError("mask was built for a different target domain");

    ModelConfig run_cfg = cfg;
    run_cfg.dropout_rate = tcfg.dropout_rate;

    ParamStore params = theta0;
    // Fresh head per run; same rng stream regardless of selector, so cells
    // with different masks remain paired.
    {
        SeededRng head_rng = cell_rng.derive("head-init");
        const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
        Tensor& hw = params.get_mut("head.weight");
        for (std::size_t i = 0; i < hw.size(); ++i) hw[i] = scale * head_rng.next_gaussian();
        params.get_mut("head.bias").fill(0.0);
    }

    EligibleSpace space;
    if (mask.L > 0 && cfg.num_blocks > 0) {
        space = eligible_space(cfg, mask.L);
    } else if (!mask.selected.empty()) {
        throw ValidationError("train: mask has coordinates but no eligible space");
    }
    const TunableSet tunable = tunable_set(params, cfg, space, mask);
    OptState opt = make_opt_state(tcfg.optimizer, tunable.coords.size());

    // Pooled source-train sampling pool, deterministic order.
    std::vector<PooledIndex> pool;
    std::vector<PooledIndex> val_rows;
    for (int e : split.source_domains) {
        const auto eu = static_cast<std::size_t>(e);
        for (std::size_t r : split.train_idx[eu]) pool.push_back({e, r});
        for (std::size_t r : split.val_model_idx[eu]) val_rows.push_back({e, r});
    }
    if (pool.empty() || val_rows.empty()) throw ValidationError("train: empty source splits");
    std::vector<PooledIndex> target_rows;
    for (std::size_t r = 0; r < ds.domain_size(split.target_domain); ++r)
        target_rows.push_back({split.target_domain, r});

    const Batch val_batch = gather_pooled(ds, run_cfg, val_rows);
    const Batch target_batch = gather_pooled(ds, run_cfg, target_rows);

    SeededRng batch_rng = cell_rng.derive("batches");
    SeededRng drop_rng = cell_rng.derive("dropout");

    // Best-validation checkpoint = values of the tunable coordinates only
    // (frozen ones cannot change).
    auto snapshot_tunable = [&]() {
        std::vector<double> snap(tunable.coords.size());
        for (std::size_t c = 0; c < tunable.coords.size(); ++c) {
            const auto [ei, off] = tunable.coords[c];
            snap[c] = params.entry(ei).tensor[off];
        }
        return snap;
    };

    double best_val = evaluate(params, run_cfg, val_batch);
    std::vector<double> best_snap = snapshot_tunable();

    for (int step = 0; step < tcfg.steps; ++step) {
        Batch mb;
        {
            std::vector<PooledIndex> rows(static_cast<std::size_t>(tcfg.batch_size));
            for (auto& r : rows) r = pool[batch_rng.next_below(pool.size())];
            mb = gather_pooled(ds, run_cfg, rows);
        }
        BackwardResult res =
            backward(params, run_cfg, mb, /*train_mode=*/true,
                     run_cfg.dropout_rate > 0.0 ? &drop_rng : nullptr);
        if (!std::isfinite(res.loss_value)) throw NumericError("training diverged (NaN loss)");
        masked_step(params, res.grads, tunable, opt, tcfg);

        if ((step + 1) % tcfg.eval_every == 0 || step + 1 == tcfg.steps) {
            const double val = evaluate(params, run_cfg, val_batch);
            if (val > best_val) {  // strict: ties keep the earliest checkpoint
                best_val = val;
                best_snap = snapshot_tunable();
            }
        }
    }

    // Restore the best checkpoint before the target evaluation.
    for (std::size_t c = 0; c < tunable.coords.size(); ++c) {
        const auto [ei, off] = tunable.coords[c];
        params.entry(ei).tensor[off] = best_snap[c];
    }

    // Frozen-coordinate audit: everything outside mask ∪ head must be
    // bitwise-equal to theta0.
    {
        std::vector<std::set<std::size_t>> touched(params.size());
        for (const auto& [ei, off] : tunable.coords) touched[ei].insert(off);
        for (std::size_t ei = 0; ei < params.size(); ++ei) {
            const Tensor& live = params.entry(ei).tensor;
            const Tensor& frozen = theta0.theta0(ei);
            for (std::size_t off = 0; off < live.size(); ++off) {
                if (touched[ei].count(off)) continue;
                if (std::memcmp(live.data() + off, frozen.data() + off, sizeof(double)) != 0)
                    throw Error("frozen coordinate drifted from theta0: " +
                                params.entry(ei).param_id);
            }
        }
    }

    RunEntry entry;
    entry.seed = tcfg.seed;
    entry.target_domain = split.target_domain;
    entry.selector = mask.kind;
    entry.rho = mask.rho;
    entry.L = mask.L;
    entry.best_val_acc = best_val;
    entry.target_acc_at_best_val = evaluate(params, run_cfg, target_batch);
    entry.tunable_backbone_params = mask.selected.size();
    entry.stage_counts = mask.stage_counts;
    entry.degraded_empty = mask.degraded_empty;
    return entry;
}

void aggregate_report(RunReport& report) {
    const std::size_t n = report.entries.size();
    if (n == 0) throw ValidationError("aggregate_report: no entries");
    double st = 0.0, sv = 0.0;
    for (const auto& e : report.entries) {
        st += e.target_acc_at_best_val;
        sv += e.best_val_acc;
    }
    report.mean_target_acc = st / static_cast<double>(n);
    report.mean_val_acc = sv / static_cast<double>(n);
    double vt = 0.0, vv = 0.0;
    for (const auto& e : report.entries) {
        vt += (e.target_acc_at_best_val - report.mean_target_acc) *
              (e.target_acc_at_best_val - report.mean_target_acc);
        vv += (e.best_val_acc - report.mean_val_acc) * (e.best_val_acc - report.mean_val_acc);
    }
    report.std_target_acc = std::sqrt(vt / static_cast<double>(n));
    report.std_val_acc = std::sqrt(vv / static_cast<double>(n));
}

BenchmarkSpec spec_for_seed(const BenchmarkSpec& base, std::uint64_t seed) {
    BenchmarkSpec s = base;
    s.seed = hash_combine(base.seed, hash_combine(fnv1a("world"), seed));
    return s;
}

std::uint64_t pretrain_seed_for(std::uint64_t seed) {
    return hash_combine(fnv1a("pretrain-init"), seed);
}

SeededRng cell_rng_for(std::uint64_t seed, int target) {
    // Selector and rho deliberately excluded: cells with the same (seed,
    // target) share data order and head init, making comparisons paired.
    return SeededRng(seed).derive(
        hash_combine(fnv1a("cell"), static_cast<std::uint64_t>(target)));
}

std::uint64_t world_hash(const DomainDataset& ds, const ParamStore& theta0) {
    return hash_combine(ds.content_hash(), theta0.content_hash());
}

RunReport lodo_run(const BenchmarkSpec& spec, const ModelConfig& cfg, const TrainConfig& tcfg,
                   const PretrainConfig& pcfg, const std::vector<std::uint64_t>& seeds,
                   const Theta0Provider& provider, bool emit_wall_time) {
    if (seeds.empty()) throw ValidationError("lodo_run: need at least one seed");
    tcfg.validate();
    Theta0Provider prov = provider;
    if (!prov) {
        prov = [&cfg, &pcfg](const BenchmarkSpec& s, std::uint64_t init_seed) {
            return pretrain_theta0(cfg, s, pcfg.steps, pcfg.lr, init_seed, pcfg.batch_size);
        };
    }
    RunReport report;
    for (std::uint64_t seed : seeds) {
        const BenchmarkSpec sspec = spec_for_seed(spec, seed);
        const DomainDataset ds = generate(sspec);
        const ParamStore theta0 = prov(sspec, pretrain_seed_for(seed));
        const std::uint64_t whash = world_hash(ds, theta0);
        for (int target = 0; target < spec.num_domains; ++target) {
            SeededRng cell = cell_rng_for(seed, target);
            LodoSplit split =
                leave_one_out_splits(ds, target, tcfg.val_multiplier, tcfg.batch_size, cell);
            Mask mask;
            if (tcfg.selector == SelectorKind::HeadOnly || cfg.num_blocks == 0) {
                GradSnapshot dummy;
                dummy.domains = 1;
                dummy.coords = 1;
                dummy.G = Tensor({1, 1}, {0.0});
                SeededRng mrng = cell.derive("random-mask");
                mask = build_mask(SelectorKind::HeadOnly, dummy, tcfg.rho, 0, mrng, seed,
                                  whash, target);
            } else {
                std::vector<Batch> vbatches;
                for (int e : split.source_domains)
                    vbatches.push_back(
                        make_batch(ds, cfg, e, split.val_jps_idx[static_cast<std::size_t>(e)]));
                GradSnapshot g = domain_gradients(theta0, cfg, vbatches, tcfg.L);
                SeededRng mrng = cell.derive("random-mask");
                mask = build_mask(tcfg.selector, g, tcfg.rho, tcfg.L, mrng, seed, whash, target);
            }
            TrainConfig cell_cfg = tcfg;
            cell_cfg.seed = seed;
            const auto t0 = std::chrono::steady_clock::now();
            RunEntry entry = train(theta0, cfg, cell_cfg, ds, split, mask, cell);
            if (emit_wall_time)
                entry.wall_time_s =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            report.entries.push_back(std::move(entry));
        }
    }
    aggregate_report(report);
    return report;
}

}  // namespace jps
