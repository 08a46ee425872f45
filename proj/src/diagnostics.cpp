#include "jps/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "jps/errors.hpp"

namespace jps {

namespace {

void check_mask_nonempty(const Mask& mask) {
    if (mask.selected.empty()) throw ValidationError("c_min needs a nonempty mask");
}

std::vector<double> per_domain_min(const GradSnapshot& g, const std::vector<std::size_t>& sel) {
    std::vector<double> out;
    for (int i = 0; i < g.domains; ++i) {
        double mn = std::numeric_limits<double>::infinity();
        for (std::size_t j : sel) {
            if (j >= g.coords) throw ValidationError("mask coordinate out of snapshot range");
            mn = std::min(mn, std::abs(g.at(i, j)));
        }
        out.push_back(mn);
    }
    return out;
}

double single_k_term(double beta, double c_min, double rho, std::size_t n) {
    if (beta <= 0.0) throw ValidationError("beta must be positive");
    if (rho <= 0.0 || rho > 1.0) throw ValidationError("rho must be in (0, 1]");
    if (n == 0) throw ValidationError("n must be positive");
    if (c_min < 0.0) throw ValidationError("c_min must be >= 0");
    const double denom = (c_min + 2.0 * (1.0 - rho)) * static_cast<double>(n);
    if (denom <= 0.0)
        throw NumericError("k-term denominator is zero (rho = 1 with zero gradient)");
    return beta * beta / denom;
}

}  // namespace

std::vector<double> c_min_per_domain(const GradSnapshot& g, const Mask& mask) {
    check_mask_nonempty(mask);
    return per_domain_min(g, mask.selected);
}

double c_min_pooled(const GradSnapshot& g, const Mask& mask) {
    check_mask_nonempty(mask);
    double mn = std::numeric_limits<double>::infinity();
    for (std::size_t j : mask.selected) {
        if (j >= g.coords) throw ValidationError("mask coordinate out of snapshot range");
        double mean = 0.0;
        for (int i = 0; i < g.domains; ++i) mean += g.at(i, j);
        mean /= g.domains;
        mn = std::min(mn, std::abs(mean));
    }
    return mn;
}

double k1_term(double beta, double c_min_pooled, double rho, std::size_t n) {
    return single_k_term(beta, c_min_pooled, rho, n);
}

double k2_first_term(double beta, const std::vector<double>& c_min_per_domain, double rho,
                     std::size_t n) {
    if (c_min_per_domain.empty()) throw ValidationError("k2 needs at least one domain");
    double sum = 0.0;
    for (double c : c_min_per_domain) sum += single_k_term(beta, c, rho, n);
    return sum / static_cast<double>(c_min_per_domain.size());
}

BoundTerms bound_terms(const GradSnapshot& g, const Mask& mask, double beta, std::size_t n,
                       double rho) {
    BoundTerms t;
    t.beta = beta;
    t.n = n;
    t.rho = rho;
    t.c_min_per_domain = c_min_per_domain(g, mask);
    t.c_min_pooled = c_min_pooled(g, mask);
    t.k1 = k1_term(beta, t.c_min_pooled, rho, n);
    t.k2_first_term = k2_first_term(beta, t.c_min_per_domain, rho, n);
    return t;
}

CminComparison jps_vs_direct_cmin(const GradSnapshot& g, double rho) {
    std::vector<std::size_t> jps_sel = importance_select(g, rho);
    if (jps_sel.empty())
        throw ValidationError("jps_vs_direct_cmin: step-1 intersection is empty");

    // Direct: top-k of the per-coordinate sums of |G|.
    const std::size_t k = round_half_up_k(g.coords, rho);
    GradSnapshot sums;
    sums.domains = 1;
    sums.coords = g.coords;
    sums.G = Tensor({1, g.coords});
    for (std::size_t j = 0; j < g.coords; ++j) {
        double s = 0.0;
        for (int i = 0; i < g.domains; ++i) s += std::abs(g.at(i, j));
        sums.G.at2(0, j) = s;
    }
    std::vector<std::size_t> direct_sel = per_domain_topk(sums, k)[0];

    CminComparison cmp;
    cmp.jps_min_per_domain = per_domain_min(g, jps_sel);
    cmp.direct_min_per_domain = per_domain_min(g, direct_sel);
    return cmp;
}

namespace {

// One balanced 50/50 split: fit a ridge-damped logistic discriminator on
// the train halves (standardized by train stats), score the test halves.
// Returns -1 when every feature has zero train variance.
double split_accuracy(const Tensor& a, const Tensor& b, SeededRng& rng) {
    const std::size_t d = a.dim(1);
    const std::size_t n = std::min(a.dim(0), b.dim(0));  // balance by subsampling
    const std::vector<std::size_t> oa = rand_perm(rng, a.dim(0));
    const std::vector<std::size_t> ob = rand_perm(rng, b.dim(0));
    const std::size_t n_train = n / 2;
    const std::size_t n_test = n - n_train;
    auto row = [&](int side, std::size_t r) {
        return side == 0 ? a.data() + oa[r] * d : b.data() + ob[r] * d;
    };

    // Standardize by train statistics (both sides pooled).
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (std::size_t r = 0; r < n_train; ++r)
        for (std::size_t f = 0; f < d; ++f) mean[f] += row(0, r)[f] + row(1, r)[f];
    for (auto& m : mean) m /= static_cast<double>(2 * n_train);
    for (std::size_t r = 0; r < n_train; ++r)
        for (std::size_t f = 0; f < d; ++f) {
            const double ea = row(0, r)[f] - mean[f];
            const double eb = row(1, r)[f] - mean[f];
            var[f] += ea * ea + eb * eb;
        }
    bool any_var = false;
    std::vector<double> scale(d, 1.0);
    for (std::size_t f = 0; f < d; ++f) {
        var[f] /= static_cast<double>(2 * n_train);
        if (var[f] > 1e-24) {
            scale[f] = 1.0 / std::sqrt(var[f]);
            any_var = true;
        }
    }
    if (!any_var) return -1.0;

    // Full-batch GD on L2-regularized logistic loss; labels a=1, b=0.
    // The ridge term damps the pure-noise directions that otherwise lift
    // test accuracy off chance on identical distributions.
    std::vector<double> w(d, 0.0);
    double bias = 0.0;
    const double lr = 0.5, lambda = 0.05;
    for (int it = 0; it < 200; ++it) {
        std::vector<double> gw(d, 0.0);
        double gb = 0.0;
        for (std::size_t r = 0; r < n_train; ++r) {
            for (int side = 0; side < 2; ++side) {
                const double* x = row(side, r);
                double z = bias;
                for (std::size_t f = 0; f < d; ++f) z += w[f] * (x[f] - mean[f]) * scale[f];
                const double p = 1.0 / (1.0 + std::exp(-z));
                const double err = p - (side == 0 ? 1.0 : 0.0);
                for (std::size_t f = 0; f < d; ++f) gw[f] += err * (x[f] - mean[f]) * scale[f];
                gb += err;
            }
        }
        const double inv = 1.0 / static_cast<double>(2 * n_train);
        for (std::size_t f = 0; f < d; ++f)
            w[f] -= lr * (gw[f] * inv + lambda * w[f]);
        bias -= lr * gb * inv;
    }

    std::size_t correct = 0;
    for (std::size_t r = n_train; r < n; ++r) {
        for (int side = 0; side < 2; ++side) {
            const double* x = row(side, r);
            double z = bias;
            for (std::size_t f = 0; f < d; ++f) z += w[f] * (x[f] - mean[f]) * scale[f];
            correct += (z >= 0.0) == (side == 0);
        }
    }
    return static_cast<double>(correct) / static_cast<double>(2 * n_test);
}

// A single split's test accuracy carries +-0.05-scale binomial noise at the
// sample counts we see; averaging independent re-splits tightens the
// estimate enough for the self-distance to sit reliably near zero.
constexpr int kProxySplits = 10;

}  // namespace

ProxyResult a_distance_proxy(const Tensor& feats_a, const Tensor& feats_b, SeededRng rng) {
    if (feats_a.ndim() != 2 || feats_b.ndim() != 2)
        throw DimensionError("a_distance_proxy expects 2-D feature tensors");
    if (feats_a.dim(1) != feats_b.dim(1))
        throw DimensionError("a_distance_proxy: feature dims differ");
    if (feats_a.dim(0) < 20 || feats_b.dim(0) < 20)
        throw ValidationError("a_distance_proxy needs >= 20 samples per side");

    // Any two finite samples of the same distribution sit O(sqrt(d/n))
    // apart in empirical mean, and an honest discriminator detects that
    // gap. Calibrate it away with a permutation null: the same statistic
    // with domain labels destroyed, subtracted from the raw reading.
    const std::size_t d = feats_a.dim(1);
    const std::size_t n = std::min(feats_a.dim(0), feats_b.dim(0));
    double raw_sum = 0.0, null_sum = 0.0;
    for (int s = 0; s < kProxySplits; ++s) {
        const double acc = split_accuracy(feats_a, feats_b, rng);
        if (acc < 0.0) return {0.0, true};
        raw_sum += acc;

        Tensor pooled({2 * n, d});
        const std::vector<std::size_t> oa = rand_perm(rng, feats_a.dim(0));
        const std::vector<std::size_t> ob = rand_perm(rng, feats_b.dim(0));
        for (std::size_t r = 0; r < n; ++r) {
            std::copy(feats_a.data() + oa[r] * d, feats_a.data() + (oa[r] + 1) * d,
                      pooled.data() + r * d);
            std::copy(feats_b.data() + ob[r] * d, feats_b.data() + (ob[r] + 1) * d,
                      pooled.data() + (n + r) * d);
        }
        const std::vector<std::size_t> assign = rand_perm(rng, 2 * n);
        Tensor pa({n, d}), pb({n, d});
        for (std::size_t r = 0; r < n; ++r) {
            std::copy(pooled.data() + assign[r] * d, pooled.data() + (assign[r] + 1) * d,
                      pa.data() + r * d);
            std::copy(pooled.data() + assign[n + r] * d,
                      pooled.data() + (assign[n + r] + 1) * d, pb.data() + r * d);
        }
        null_sum += split_accuracy(pa, pb, rng);
    }
    const double raw = raw_sum / kProxySplits;
    const double null_acc = null_sum / kProxySplits;
    return {std::clamp(2.0 * (2.0 * raw - 1.0) - 2.0 * (2.0 * null_acc - 1.0), 0.0, 2.0),
            false};
}

std::vector<LayerRank> mask_rank_report(const Mask& mask, const ModelConfig& cfg) {
    cfg.validate();
    std::vector<LayerRank> report;
    if (mask.L <= 0) return report;
    const EligibleSpace space = eligible_space(cfg, mask.L);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto h = static_cast<std::size_t>(cfg.mlp_hidden);

    // Space order is (fc1.weight, fc1.bias) per block, oldest eligible first.
    const std::size_t per_block = d * h + h;
    for (int b = 0; b < mask.L; ++b) {
        LayerRank lr;
        lr.block_index = cfg.num_blocks - mask.L + b;
        Tensor wmat({d, h});
        const std::size_t base = static_cast<std::size_t>(b) * per_block;
        for (std::size_t j : mask.selected) {
            if (j < base || j >= base + per_block) continue;
            ++lr.selected_count;
            const std::size_t off = j - base;
            if (off < d * h) {
                ++lr.weight_selected;
                wmat[off] = 1.0;
            }
        }
        lr.rank = binary_matrix_rank(wmat);
        report.push_back(lr);
    }
    return report;
}

double mbar_agreement(const GradSnapshot& g, const std::vector<std::size_t>& step1) {
    if (step1.empty()) throw ValidationError("mbar_agreement needs a nonempty step-1 set");
    const VarianceResult vs = variance_select(g, step1);
    const std::vector<std::size_t> mb = oracle_m_bar(g);
    const std::set<std::size_t> vset(vs.selected.begin(), vs.selected.end());
    const std::set<std::size_t> mset(mb.begin(), mb.end());
    std::size_t agree = 0;
    for (std::size_t j : step1) agree += vset.count(j) == mset.count(j);
    return static_cast<double>(agree) / static_cast<double>(step1.size());
}

}  // namespace jps
