#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "jps/tensor.hpp"

namespace jps {

/// Mini transformer hyperparameters. Activation is fixed GELU; the per-block
/// layout is LN -> single-head attention (+res) -> LN -> fc1 -> GELU ->
/// dropout -> fc2 (+res). num_blocks may be 0 (pure linear probe).
struct ModelConfig {
    int num_blocks = 2;      // B
    int d_model = 16;
    int num_tokens = 2;      // T; input feature dim = T * d_model
    int mlp_hidden = 32;
    int num_classes = 5;     // C
    double dropout_rate = 0.0;

    int input_dim() const { return num_tokens * d_model; }
    void validate() const;  // throws ValidationError
    bool operator==(const ModelConfig&) const = default;
};

enum class ParamRole { attention, mlp_fc1, mlp_fc2, layernorm, embedding, classifier_head };

const char* role_name(ParamRole role);
ParamRole role_from_name(const std::string& name);

struct ParamEntry {
    std::string param_id;
    int layer_index;  // 0-based block index; -1 for pos_emb / head
    ParamRole role;
    Tensor tensor;
};

/// Ordered registry of named parameters plus the frozen snapshot theta0.
/// Entry order is the canonical parameter order everywhere (flattening,
/// checkpoints, gradient maps iterate it).
class ParamStore {
public:
    void add(std::string param_id, int layer_index, ParamRole role, Tensor t);

    std::size_t size() const { return entries_.size(); }
    const ParamEntry& entry(std::size_t i) const { return entries_[i]; }
    ParamEntry& entry(std::size_t i) { return entries_[i]; }
    std::size_t index_of(const std::string& param_id) const;  // throws ValidationError
    bool has(const std::string& param_id) const;
    const Tensor& get(const std::string& param_id) const;
    Tensor& get_mut(const std::string& param_id);

    /// Freeze the current live tensors as theta0.
    void snapshot_theta0();
    bool has_theta0() const { return !theta0_.empty(); }
    const Tensor& theta0(std::size_t i) const;
    const Tensor& theta0(const std::string& param_id) const;

    std::size_t total_coords() const;
    /// FNV-1a over (param_id, shape, raw f64 bytes) of the live tensors.
    std::uint64_t content_hash() const;

private:
    std::vector<ParamEntry> entries_;
    std::vector<Tensor> theta0_;
    std::map<std::string, std::size_t> index_;
};

struct Batch {
    Tensor inputs;                // {batch, T, d_model}
    std::vector<int> labels;      // in [0, C)
    std::vector<int> domain_ids;  // same length as labels

    std::size_t size() const { return labels.size(); }
};

/// Fresh random initialization. Weight draws are keyed per param_id, so the
/// values do not depend on registration order. pos_emb starts at zero,
/// LN at (gamma=1, beta=0), biases at zero. theta0 is NOT snapshotted.
ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Logits [batch x C]. train_mode enables dropout (rng required if
/// dropout_rate > 0).
Tensor forward(const ParamStore& params, const ModelConfig& cfg, const Batch& batch,
               bool train_mode = false, SeededRng* dropout_rng = nullptr);

/// Pooled penultimate representation [batch x d_model]: the head's input.
/// Always eval-mode.
Tensor forward_features(const ParamStore& params, const ModelConfig& cfg, const Batch& batch);

/// Mean softmax cross-entropy of logits against labels.
double loss(const Tensor& logits, const std::vector<int>& labels);

struct BackwardResult {
    double loss_value;
    std::map<std::string, Tensor> grads;  // param_id -> gradient, every param
};

/// Exact reverse-mode gradient of the mean loss w.r.t. every parameter,
/// frozen ones included (freezing is the optimizer's business, not autodiff's).
BackwardResult backward(const ParamStore& params, const ModelConfig& cfg, const Batch& batch,
                        bool train_mode = false, SeededRng* dropout_rng = nullptr);

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    std::string worst_param_id;
    std::size_t worst_offset = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
    bool passed = false;  // max_rel_err <= tol
};

/// Central-difference check of backward() over every coordinate.
/// rel err = |a - b| / max(|a|, |b|, 1e-8). Mutates params transiently but
/// restores them bitwise.
FiniteDiffReport finite_diff_check(ParamStore& params, const ModelConfig& cfg, const Batch& batch,
                                   double h = 1e-4, double tol = 1e-5);

/// The eligible coordinate space: fc1 weight+bias of the last L blocks, in
/// a stable documented order (ascending block; weight row-major, then bias).
struct EligibleSpace {
    int L = 0;
    std::vector<std::string> param_ids;   // 2L entries
    std::vector<std::size_t> param_sizes; // aligned with param_ids
    std::vector<std::size_t> offsets;     // prefix sums; offsets[i] = start of param i
    std::size_t total = 0;                // m

    /// Coordinate j -> (index into param_ids, offset within that tensor).
    std::pair<std::size_t, std::size_t> locate(std::size_t j) const;
};

/// Throws ValidationError unless 1 <= L <= num_blocks.
EligibleSpace eligible_space(const ModelConfig& cfg, int L);

/// Gather live values of the eligible coordinates into a flat vector.
std::vector<double> flatten_eligible(const ParamStore& params, const EligibleSpace& space);
/// Inverse scatter; lengths must match.
void unflatten_eligible(ParamStore& params, const EligibleSpace& space,
                        const std::vector<double>& flat);

/// Checkpoint: JSON {config, entries:[{param_id, layer_index, role, shape,
/// data}]} with data base64-encoded little-endian f64. Bit-exact round-trip.
void save_checkpoint(const ParamStore& params, const ModelConfig& cfg, const std::string& path);
std::pair<ParamStore, ModelConfig> load_checkpoint(const std::string& path);  // theta0 = loaded

std::string base64_encode(const unsigned char* data, std::size_t len);
std::vector<unsigned char> base64_decode(const std::string& s);

}  // namespace jps
