#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jps/model.hpp"
#include "jps/tensor.hpp"

namespace jps {

/// Synthetic multi-domain benchmark. Per class c and domain e:
///   invariant dims ~ N(mu_c, s^2)        -- identical across domains
///   spurious dims  ~ N(gamma_e * v_c, s^2) -- correlation strength/sign per domain
///   noise dims     ~ N(0, noise_scale^2 * sigma_e^2)
/// Sources get positive gammas, the last domain a negative one, so a model
/// that leans on the spurious dims is anti-correlated on that domain.
struct BenchmarkSpec {
    int num_domains = 4;
    int num_classes = 5;
    int invariant_dims = 16;
    int spurious_dims = 8;
    int noise_dims = 8;
    int samples_per_class_per_domain = 200;
    std::vector<double> source_gammas = {0.9, 0.6, 0.3};  // N-1 entries in (0,1]
    double target_gamma = -1.0;
    double noise_scale = 1.0;
    std::uint64_t seed = 0;

    int feature_dim() const { return invariant_dims + spurious_dims + noise_dims; }
    /// source_gammas followed by target_gamma; index = domain id.
    std::vector<double> domain_gammas() const;
    void validate() const;
    std::uint64_t content_hash() const;
};

/// Class/domain-level draws shared by every sample; pure function of the
/// spec seed, exposed so tests can evaluate the closed-form Bayes rule.
struct GenerativeParams {
    std::vector<std::vector<double>> mu;       // C x d_inv class means
    std::vector<std::vector<double>> v;        // C x d_spu spurious directions
    std::vector<double> sigma_e;               // N noise multipliers in [0.5, 1.5]
};

GenerativeParams generative_params(const BenchmarkSpec& spec);

enum class SplitTag { train, val_model_select };

const char* split_tag_name(SplitTag t);

struct DomainDataset {
    BenchmarkSpec spec;
    std::vector<Tensor> features;             // per domain, {n_e, d}
    std::vector<std::vector<int>> labels;     // per domain
    std::vector<std::vector<SplitTag>> tags;  // per domain, stratified 80/20

    int num_domains() const { return static_cast<int>(features.size()); }
    std::size_t domain_size(int e) const { return labels[static_cast<std::size_t>(e)].size(); }
    std::uint64_t content_hash() const;
};

DomainDataset generate(const BenchmarkSpec& spec);

/// One leave-one-domain-out split. Index vectors are positions within each
/// source domain's arrays; the target domain is held out entirely.
/// val_jps is drawn from the train side only (per source domain) and is the
/// data selection gradients are computed on.
struct LodoSplit {
    int target_domain = -1;
    std::vector<int> source_domains;                  // ascending
    std::vector<std::vector<std::size_t>> train_idx;      // indexed by domain id
    std::vector<std::vector<std::size_t>> val_model_idx;  // "
    std::vector<std::vector<std::size_t>> val_jps_idx;    // subset of train_idx
};

/// val_jps size per source domain = min(val_multiplier * batch_size, train
/// size of that domain). rng drives only the val_jps resample.
LodoSplit leave_one_out_splits(const DomainDataset& ds, int target, int val_multiplier,
                               int batch_size, SeededRng& rng);

/// Assemble a Batch (inputs reshaped to {n, T, d_model}) from rows of one
/// domain. Requires spec.feature_dim() == cfg.input_dim().
Batch make_batch(const DomainDataset& ds, const ModelConfig& cfg, int domain,
                 const std::vector<std::size_t>& rows);

/// "Pre-training": train the full model on the meta-distribution where the
/// spurious correlation gamma is redrawn uniformly in [-1, 1] per minibatch,
/// making spurious dims useless on average. Returns the store with theta0
/// snapshotted. Throws NumericError if the loss goes non-finite.
ParamStore pretrain_theta0(const ModelConfig& cfg, const BenchmarkSpec& spec, int steps,
                           double lr, std::uint64_t seed, int batch_size = 64);

/// Closed-form Bayes rule on the invariant dims only (true class means and
/// shared isotropic covariance); accuracy over one domain's rows.
double bayes_oracle_accuracy(const DomainDataset& ds, int domain);

/// CSV per domain: dir/domain_<e>.csv with header
/// feature_0..feature_{d-1},label,domain_id,split_tag. Doubles use
/// shortest round-trip formatting. If split is given, rows in its
/// val_jps_idx are tagged "val_jps" (they remain train rows on import).
void export_csv(const DomainDataset& ds, const std::string& dir,
                const LodoSplit* split = nullptr);
DomainDataset import_csv(const BenchmarkSpec& spec, const std::string& dir);

}  // namespace jps
