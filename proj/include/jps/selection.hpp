#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jps/data.hpp"
#include "jps/model.hpp"
#include "jps/tensor.hpp"

namespace jps {

/// Per-domain validation gradients at theta0, restricted to the eligible
/// coordinate space. Row i is domain i's flat gradient.
struct GradSnapshot {
    int domains = 0;       // N
    std::size_t coords = 0;  // m
    Tensor G;              // {N, m}

    double at(int i, std::size_t j) const {
        return G.at2(static_cast<std::size_t>(i), j);
    }
};

enum class SelectorKind { JPS, Direct, WithoutVariance, Random, Full, HeadOnly };

const char* selector_name(SelectorKind kind);
SelectorKind selector_from_name(const std::string& name);  // ValidationError on unknown

struct StageCounts {
    std::size_t per_domain_k = 0;  // [m rho] (m for Full, 0 for HeadOnly)
    std::size_t step1_count = 0;
    std::size_t step2_count = 0;
};

/// Immutable once built. selected indexes the eligible space of
/// eligible_space(cfg, L); dataset_hash binds the mask to the exact
/// (dataset, theta0) pair it was computed from.
struct Mask {
    std::vector<std::size_t> selected;  // sorted, unique, in [0, m)
    double rho = 0.0;
    int L = 0;
    SelectorKind kind = SelectorKind::JPS;
    StageCounts stage_counts;
    std::uint64_t seed = 0;
    std::uint64_t dataset_hash = 0;
    int target_domain = -1;
    bool degraded_empty = false;  // step1 came out empty; trains head only
};

/// [m rho] as round-half-up with a floor of 1.
std::size_t round_half_up_k(std::size_t m, double rho);

/// Each domain's top-k coordinate set by |G|, ties broken toward the lower
/// index; each returned set is sorted.
std::vector<std::vector<std::size_t>> per_domain_topk(const GradSnapshot& g, std::size_t k);

/// Importance Selection Operator: intersection of the per-domain top-[m rho]
/// sets. Sorted result.
std::vector<std::size_t> importance_select(const GradSnapshot& g, double rho);

/// Cross-domain gradient variance sigma_j = sum_i (G_ij - mean_i G_ij)^2 for
/// every coordinate.
std::vector<double> grad_variance(const GradSnapshot& g);

struct VarianceResult {
    std::vector<std::size_t> selected;
    bool warned = false;  // step1 was empty
};

/// Variance Selection Operator: keep j in step1 with sigma_j <= mean of
/// sigma over step1. Empty step1 degrades to an empty result with a warning
/// flag instead of erroring.
VarianceResult variance_select(const GradSnapshot& g, const std::vector<std::size_t>& step1);

/// Brute force of Prop 3.3's printed criterion:
///   select j iff sum_{j'} prod_i I(|G_i^j| >= |G_i^{j'}|) >= m - [m rho]
/// strict=true uses >= m - [m rho] + 1 (the variant that actually respects
/// the stated cardinality bound). O(m^2 N); m capped.
std::vector<std::size_t> oracle_m_hat(const GradSnapshot& g, double rho, bool strict,
                                      std::size_t size_cap = 256);

/// Brute force of Prop 3.4's printed criterion:
///   select j iff P_j <= (1/m) sum_{j'} P_{j'},  P_j = sum_{i != i'} G_i^j G_{i'}^j
/// (ordered pairs). Requires N >= 2.
std::vector<std::size_t> oracle_m_bar(const GradSnapshot& g);

/// P_j for every coordinate (the pairwise-product statistic above).
std::vector<double> pairwise_products(const GradSnapshot& g);

/// Full-batch mean gradient per source-domain val_jps set, restricted to the
/// eligible space. Batches are accumulated in fixed-size chunks.
GradSnapshot domain_gradients(const ParamStore& theta0, const ModelConfig& cfg,
                              const std::vector<Batch>& domain_batches, int L);

Mask build_mask(SelectorKind kind, const GradSnapshot& g, double rho, int L, SeededRng& rng,
                std::uint64_t seed, std::uint64_t dataset_hash, int target_domain);

struct MaskStats {
    StageCounts counts;
    double reduction_pct_step1 = 0.0;  // 1 - step1/k
    double reduction_pct_step2 = 0.0;  // 1 - step2/step1 (0 when step1 == 0)
};

MaskStats mask_stats(const Mask& mask, std::size_t m);  // ValidationError if per_domain_k == 0

/// Mask file round-trip. JSON object; see README for the schema.
void save_mask(const Mask& mask, const std::string& path);
Mask load_mask(const std::string& path);

/// ProvenanceError unless the mask's dataset_hash matches.
void require_mask_provenance(const Mask& mask, std::uint64_t expected_hash);

}  // namespace jps
