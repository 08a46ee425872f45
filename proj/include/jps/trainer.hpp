#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jps/data.hpp"
#include "jps/model.hpp"
#include "jps/selection.hpp"

namespace jps {

enum class Optimizer { sgd, adam };

const char* optimizer_name(Optimizer o);
Optimizer optimizer_from_name(const std::string& name);

struct TrainConfig {
    SelectorKind selector = SelectorKind::JPS;
    double rho = 0.05;
    int L = 2;
    double lr = 0.01;
    double dropout_rate = 0.0;
    int steps = 400;
    int batch_size = 32;
    int val_multiplier = 10;  // val_jps batches per domain; one of {10, 20, 50}
    Optimizer optimizer = Optimizer::adam;
    double weight_decay = 0.0;  // fixed at 0
    int eval_every = 40;
    std::uint64_t seed = 0;

    void validate() const;
};

/// The coordinates an optimizer may touch: every mask coordinate plus the
/// whole classifier head. Stored as (param entry index, offset) pairs.
struct TunableSet {
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    std::size_t backbone_count = 0;  // |mask.selected|; the rest is head
};

TunableSet tunable_set(const ParamStore& params, const ModelConfig& cfg,
                       const EligibleSpace& space, const Mask& mask);

/// Optimizer state exists only for tunable coordinates — frozen coordinates
/// have no moments anywhere.
struct OptState {
    Optimizer kind = Optimizer::adam;
    std::vector<double> m, v;  // sized |tunable| for adam, empty for sgd
    long step_count = 0;
};

OptState make_opt_state(Optimizer kind, std::size_t tunable_count);

/// One optimizer step over exactly the tunable coordinates; everything else
/// is untouched (bitwise).
void masked_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
                 const TunableSet& tunable, OptState& state, const TrainConfig& cfg);

/// Argmax-of-logits accuracy, dropout off.
double evaluate(const ParamStore& params, const ModelConfig& cfg, const Batch& batch);

struct RunEntry {
    std::uint64_t seed = 0;
    int target_domain = -1;
    SelectorKind selector = SelectorKind::JPS;
    double rho = 0.0;
    int L = 0;
    double best_val_acc = 0.0;
    double target_acc_at_best_val = 0.0;
    std::size_t tunable_backbone_params = 0;  // == |mask.selected|
    StageCounts stage_counts;
    bool degraded_empty = false;
    double wall_time_s = 0.0;  // 0 unless timing emission is enabled
};

/// Fine-tune theta0 under the mask on pooled source-train minibatches.
/// Evaluates on pooled val_model_select every eval_every steps (and before
/// the first step); reports target accuracy at the earliest best-validation
/// checkpoint. Verifies afterwards that every frozen coordinate is
/// bitwise-equal to theta0. The classifier head is freshly initialized.
RunEntry train(const ParamStore& theta0, const ModelConfig& cfg, const TrainConfig& tcfg,
               const DomainDataset& ds, const LodoSplit& split, const Mask& mask,
               SeededRng cell_rng);

struct RunReport {
    std::vector<RunEntry> entries;  // seed-major, then target ascending
    double mean_target_acc = 0.0;
    double std_target_acc = 0.0;
    double mean_val_acc = 0.0;
    double std_val_acc = 0.0;
};

void aggregate_report(RunReport& report);

struct PretrainConfig {
    int steps = 600;
    double lr = 0.01;
    int batch_size = 64;
};

/// Supplies theta0 for (spec-with-effective-seed, pretrain seed); the
/// default provider pretrains from scratch, the CLI layer substitutes a
/// caching one.
using Theta0Provider =
    std::function<ParamStore(const BenchmarkSpec& spec, std::uint64_t init_seed)>;

/// Effective per-run-seed derivations, shared by every code path that needs
/// to reconstruct a cell (lodo_run, cmd_select, cmd_train --mask, ...).
BenchmarkSpec spec_for_seed(const BenchmarkSpec& base, std::uint64_t seed);
std::uint64_t pretrain_seed_for(std::uint64_t seed);
SeededRng cell_rng_for(std::uint64_t seed, int target);
std::uint64_t world_hash(const DomainDataset& ds, const ParamStore& theta0);

/// Full leave-one-domain-out protocol: every seed x every target. The mask
/// is built inside each cell from that cell's gradient snapshot; cell RNG
/// depends on (seed, target) only, so different selectors see identical
/// data, theta0, head init and batch order. wall_time_s stays 0 unless
/// emit_wall_time is set (the default keeps reruns byte-identical).
RunReport lodo_run(const BenchmarkSpec& spec, const ModelConfig& cfg, const TrainConfig& tcfg,
                   const PretrainConfig& pcfg, const std::vector<std::uint64_t>& seeds,
                   const Theta0Provider& provider = {}, bool emit_wall_time = false);

}  // namespace jps
