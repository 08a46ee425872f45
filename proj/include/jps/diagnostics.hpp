#pragma once

#include <cstdint>
#include <vector>

#include "jps/model.hpp"
#include "jps/selection.hpp"
#include "jps/tensor.hpp"

namespace jps {

/// Every measurable quantity from the stability bound, evaluated on one
/// gradient snapshot + mask. beta is a config input; the terms are relative
/// diagnostics across selectors, never absolute guarantees.
struct BoundTerms {
    double beta = 1.0;
    std::size_t n = 0;  // source sample count behind the snapshot
    double rho = 0.0;
    std::vector<double> c_min_per_domain;
    double c_min_pooled = 0.0;
    double k1 = 0.0;
    double k2_first_term = 0.0;
    std::vector<double> a_distance_proxy;  // per source domain; filled by caller
};

/// min |G_i^j| over the mask's coordinates, one value per domain.
std::vector<double> c_min_per_domain(const GradSnapshot& g, const Mask& mask);

/// Same minimum over the pooled-average gradient (1/N) sum_i G_i.
double c_min_pooled(const GradSnapshot& g, const Mask& mask);

/// k1 = beta^2 / ((c_min + 2(1 - rho)) * n). NumericError on a nonpositive
/// denominator (the rho=1, zero-gradient degenerate case).
double k1_term(double beta, double c_min_pooled, double rho, std::size_t n);

/// Mean over domains of the k1 formula at each domain's c_min.
double k2_first_term(double beta, const std::vector<double>& c_min_per_domain, double rho,
                     std::size_t n);

/// c_min/k1/k2 assembled in one call; the proxy array is left empty.
BoundTerms bound_terms(const GradSnapshot& g, const Mask& mask, double beta, std::size_t n,
                       double rho);

/// Per-domain C_min of the JPS step-1 mask vs the Direct mask at the same
/// rho: the mechanism behind the selection proposition, measured.
struct CminComparison {
    std::vector<double> jps_min_per_domain;
    std::vector<double> direct_min_per_domain;
};

CminComparison jps_vs_direct_cmin(const GradSnapshot& g, double rho);

struct ProxyResult {
    double value = 0.0;      // in [0, 2]
    bool degenerate = false;  // all-zero-variance features; value forced to 0
};

/// Discriminator-based A-distance stand-in between two feature sets
/// (rows = samples): balance by subsampling, split 50/50, standardize by
/// train stats, fit a linear logistic discriminator by deterministic
/// full-batch GD, read 2*(2*test_acc - 1). The reading is averaged over
/// re-splits and calibrated against a permutation null (same estimator,
/// domain labels shuffled) so identical distributions score ~0 at finite n;
/// the result is clipped to [0, 2]. ValidationError if either side has
/// < 20 samples.
ProxyResult a_distance_proxy(const Tensor& feats_a, const Tensor& feats_b, SeededRng rng);

/// Rank structure of the mask, per eligible block: the selected fc1.weight
/// coordinates as a 0/1 matrix of the layer's weight shape, with its exact
/// binary rank.
struct LayerRank {
    int block_index = 0;
    std::size_t selected_count = 0;  // weight + bias coords selected in this block
    std::size_t weight_selected = 0;
    int rank = 0;
};

std::vector<LayerRank> mask_rank_report(const Mask& mask, const ModelConfig& cfg);

/// Fraction of step-1 coordinates on which variance_select and the printed
/// pairwise-product criterion make the same keep/drop call. Diagnostic for
/// how far the two step-2 readings actually diverge.
double mbar_agreement(const GradSnapshot& g, const std::vector<std::size_t>& step1);

}  // namespace jps
