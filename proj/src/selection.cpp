#include "jps/selection.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "jps/errors.hpp"

namespace jps {

const char* selector_name(SelectorKind kind) {
    switch (kind) {
        case SelectorKind::JPS: return "jps";
        case SelectorKind::Direct: return "direct";
        case SelectorKind::WithoutVariance: return "without_variance";
        case SelectorKind::Random: return "random";
        case SelectorKind::Full: return "full";
        case SelectorKind::HeadOnly: return "head_only";
    }
    throw ValidationError("unknown SelectorKind");
}

SelectorKind selector_from_name(const std::string& name) {
    if (name == "jps") return SelectorKind::JPS;
    if (name == "direct") return SelectorKind::Direct;
    if (name == "without_variance") return SelectorKind::WithoutVariance;
    if (name == "random") return SelectorKind::Random;
    if (name == "full") return SelectorKind::Full;
    if (name == "head_only") return SelectorKind::HeadOnly;
    throw ValidationError("unknown selector name: " + name);
}

std::size_t round_half_up_k(std::size_t m, double rho) {
    if (m == 0) throw ValidationError("round_half_up_k: m must be positive");
    if (rho <= 0.0 || rho > 1.0) throw ValidationError("rho must be in (0, 1]");
    const auto k = static_cast<std::size_t>(
        std::floor(static_cast<double>(m) * rho + 0.5));
    return std::max<std::size_t>(1, k);
}

namespace {

void check_snapshot(const GradSnapshot& g) {
    if (g.domains < 1) throw ValidationError("GradSnapshot needs at least one domain");
    if (g.coords == 0) throw ValidationError("GradSnapshot has no coordinates");
    if (g.G.ndim() != 2 || g.G.dim(0) != static_cast<std::size_t>(g.domains) ||
        g.G.dim(1) != g.coords)
        throw DimensionError("GradSnapshot G shape mismatch");
    if (!g.G.all_finite()) throw NumericError("GradSnapshot has non-finite entries");
}

std::vector<std::size_t> topk_one_domain(const GradSnapshot& g, int i, std::size_t k) {
    std::vector<std::size_t> idx(g.coords);
    for (std::size_t j = 0; j < g.coords; ++j) idx[j] = j;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const double va = std::abs(g.at(i, a)), vb = std::abs(g.at(i, b));
        if (va != vb) return va > vb;
        return a < b;  // deterministic tie-break toward the lower index
    });
    idx.resize(std::min(k, g.coords));
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace

std::vector<std::vector<std::size_t>> per_domain_topk(const GradSnapshot& g, std::size_t k) {
    check_snapshot(g);
    std::vector<std::vector<std::size_t>> out;
    out.reserve(static_cast<std::size_t>(g.domains));
    for (int i = 0; i < g.domains; ++i) out.push_back(topk_one_domain(g, i, k));
    return out;
}

std::vector<std::size_t> importance_select(const GradSnapshot& g, double rho) {
    check_snapshot(g);
    const std::size_t k = round_half_up_k(g.coords, rho);
    std::vector<std::size_t> hits(g.coords, 0);
    for (int i = 0; i < g.domains; ++i)
        for (std::size_t j : topk_one_domain(g, i, k)) ++hits[j];
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < g.coords; ++j)
        if (hits[j] == static_cast<std::size_t>(g.domains)) out.push_back(j);
    return out;
}

std::vector<double> grad_variance(const GradSnapshot& g) {
    check_snapshot(g);
    std::vector<double> sigma(g.coords, 0.0);
    for (std::size_t j = 0; j < g.coords; ++j) {
        double mean = 0.0;
        for (int i = 0; i < g.domains; ++i) mean += g.at(i, j);
        mean /= static_cast<double>(g.domains);
        double s = 0.0;
        for (int i = 0; i < g.domains; ++i) {
            const double d = g.at(i, j) - mean;
            s += d * d;
        }
        sigma[j] = s;
    }
    return sigma;
}

VarianceResult variance_select(const GradSnapshot& g, const std::vector<std::size_t>& step1) {
    check_snapshot(g);
    VarianceResult res;
    if (step1.empty()) {
        res.warned = true;
        return res;
    }
    const std::vector<double> sigma = grad_variance(g);
    double threshold = 0.0;
    for (std::size_t j : step1) {
        if (j >= g.coords) throw ValidationError("variance_select: step1 index out of range");
        threshold += sigma[j];
    }
    threshold /= static_cast<double>(step1.size());
    for (std::size_t j : step1)
        if (sigma[j] <= threshold) res.selected.push_back(j);
    return res;
}

std::vector<std::size_t> oracle_m_hat(const GradSnapshot& g, double rho, bool strict,
                                      std::size_t size_cap) {
    check_snapshot(g);
    if (g.coords > size_cap) throw ValidationError("oracle_m_hat: m exceeds the size cap");
    const std::size_t m = g.coords;
    const std::size_t k = round_half_up_k(m, rho);
    // Threshold of the printed formula; strict closes its off-by-one.
    const std::size_t need = strict ? (m - k + 1) : (m - k);
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < m; ++j) {
        std::size_t dominated = 0;
        for (std::size_t jp = 0; jp < m; ++jp) {
            bool all = true;
            for (int i = 0; i < g.domains && all; ++i)
                all = std::abs(g.at(i, j)) >= std::abs(g.at(i, jp));
            dominated += all ? 1 : 0;
        }
        if (dominated >= need) out.push_back(j);
    }
    return out;
}

std::vector<double> pairwise_products(const GradSnapshot& g) {
    check_snapshot(g);
    std::vector<double> p(g.coords, 0.0);
    for (std::size_t j = 0; j < g.coords; ++j) {
        // Ordered pairs i != i': (sum_i G)^2 - sum_i G^2, computed literally
        // for small N to stay faithful to the printed double sum.
        double s = 0.0;
        for (int i = 0; i < g.domains; ++i)
            for (int ip = 0; ip < g.domains; ++ip) {
                if (i == ip) continue;
                s += g.at(i, j) * g.at(ip, j);
            }
        p[j] = s;
    }
    return p;
}

std::vector<std::size_t> oracle_m_bar(const GradSnapshot& g) {
    check_snapshot(g);
    if (g.domains < 2) throw ValidationError("oracle_m_bar requires N >= 2");
    const std::vector<double> p = pairwise_products(g);
    double mean = 0.0;
    for (double x : p) mean += x;
    mean /= static_cast<double>(g.coords);
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < g.coords; ++j)
        if (p[j] <= mean) out.push_back(j);
    return out;
}

GradSnapshot domain_gradients(const ParamStore& theta0, const ModelConfig& cfg,
                              const std::vector<Batch>& domain_batches, int L) {
    const EligibleSpace space = eligible_space(cfg, L);
    if (domain_batches.empty()) throw ValidationError("domain_gradients: no domains");
    GradSnapshot g;
    g.domains = static_cast<int>(domain_batches.size());
    g.coords = space.total;
    g.G = Tensor({domain_batches.size(), space.total});

    constexpr std::size_t kChunk = 256;
    for (std::size_t i = 0; i < domain_batches.size(); ++i) {
        const Batch& full = domain_batches[i];
        const std::size_t n = full.size();
        if (n == 0) throw ValidationError("domain_gradients: empty validation set");
        const std::size_t row_sz = static_cast<std::size_t>(cfg.num_tokens) *
                                   static_cast<std::size_t>(cfg.d_model);
        std::vector<double> acc(space.total, 0.0);
        for (std::size_t start = 0; start < n; start += kChunk) {
            const std::size_t cnt = std::min(kChunk, n - start);
            Batch chunk;
            chunk.inputs = Tensor({cnt, static_cast<std::size_t>(cfg.num_tokens),
                                   static_cast<std::size_t>(cfg.d_model)});
            std::copy(full.inputs.data() + start * row_sz,
                      full.inputs.data() + (start + cnt) * row_sz, chunk.inputs.data());
            chunk.labels.assign(full.labels.begin() + static_cast<std::ptrdiff_t>(start),
                                full.labels.begin() + static_cast<std::ptrdiff_t>(start + cnt));
            chunk.domain_ids.assign(full.domain_ids.begin() + static_cast<std::ptrdiff_t>(start),
                                    full.domain_ids.begin() + static_cast<std::ptrdiff_t>(start + cnt));
            BackwardResult res = backward(theta0, cfg, chunk, /*train_mode=*/false);
            // backward() returns the mean-loss gradient over the chunk;
            // re-weight so the total is the mean over the full set.
            const double w = static_cast<double>(cnt) / static_cast<double>(n);
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < space.param_ids.size(); ++pi) {
                const Tensor& gp = res.grads.at(space.param_ids[pi]);
                for (std::size_t c = 0; c < gp.size(); ++c) acc[off + c] += w * gp[c];
                off += gp.size();
            }
        }
        for (std::size_t j = 0; j < space.total; ++j) g.G.at2(i, j) = acc[j];
    }
    if (!g.G.all_finite()) throw NumericError("domain_gradients produced non-finite values");
    return g;
}

Mask build_mask(SelectorKind kind, const GradSnapshot& g, double rho, int L, SeededRng& rng,
                std::uint64_t seed, std::uint64_t dataset_hash, int target_domain) {
    check_snapshot(g);
    Mask mask;
    mask.rho = rho;
    mask.L = L;
    mask.kind = kind;
    mask.seed = seed;
    mask.dataset_hash = dataset_hash;
    mask.target_domain = target_domain;

    if (kind == SelectorKind::HeadOnly) {
        mask.stage_counts = StageCounts{0, 0, 0};
        return mask;
    }
    if (kind == SelectorKind::Full) {
        mask.selected.resize(g.coords);
        for (std::size_t j = 0; j < g.coords; ++j) mask.selected[j] = j;
        mask.stage_counts = StageCounts{g.coords, g.coords, g.coords};
        return mask;
    }

    const std::size_t k = round_half_up_k(g.coords, rho);
    switch (kind) {
        case SelectorKind::JPS: {
            std::vector<std::size_t> step1 = importance_select(g, rho);
            VarianceResult v = variance_select(g, step1);
            mask.selected = std::move(v.selected);
            mask.degraded_empty = v.warned;
            mask.stage_counts = StageCounts{k, step1.size(), mask.selected.size()};
            break;
        }
        case SelectorKind::WithoutVariance: {
            mask.selected = importance_select(g, rho);
            mask.degraded_empty = mask.selected.empty();
            mask.stage_counts = StageCounts{k, mask.selected.size(), mask.selected.size()};
            break;
        }
        case SelectorKind::Direct: {
            // Top-k of the per-coordinate sum of |G| across domains.
            GradSnapshot sums;
            sums.domains = 1;
            sums.coords = g.coords;
            sums.G = Tensor({1, g.coords});
            for (std::size_t j = 0; j < g.coords; ++j) {
                double s = 0.0;
                for (int i = 0; i < g.domains; ++i) s += std::abs(g.at(i, j));
                sums.G.at2(0, j) = s;
            }
            mask.selected = per_domain_topk(sums, k)[0];
            mask.stage_counts = StageCounts{k, mask.selected.size(), mask.selected.size()};
            break;
        }
        case SelectorKind::Random: {
            std::vector<std::size_t> perm = rand_perm(rng, g.coords);
            perm.resize(k);
            std::sort(perm.begin(), perm.end());
            mask.selected = std::move(perm);
            mask.stage_counts = StageCounts{k, k, k};
            break;
        }
        default:
            throw ValidationError("build_mask: unhandled selector kind");
    }
    return mask;
}

MaskStats mask_stats(const Mask& mask, std::size_t m) {
    if (mask.stage_counts.per_domain_k == 0)
        throw ValidationError("mask_stats undefined for per_domain_k = 0");
    for (std::size_t j : mask.selected)
        if (j >= m) throw ValidationError("mask_stats: selected index out of range");
    MaskStats st;
    st.counts = mask.stage_counts;
    st.reduction_pct_step1 =
        1.0 - static_cast<double>(st.counts.step1_count) /
                  static_cast<double>(st.counts.per_domain_k);
    st.reduction_pct_step2 =
        st.counts.step1_count == 0
            ? 0.0
            : 1.0 - static_cast<double>(st.counts.step2_count) /
                        static_cast<double>(st.counts.step1_count);
    return st;
}

namespace {

constexpr const char* kCoordMapVersion = "fc1-lastL-v1";

std::string u64_hex(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t parse_u64_hex(const std::string& s) {
    if (s.size() < 3 || s[0] != '0' || s[1] != 'x') throw IoError("bad hex u64: " + s);
    return std::stoull(s.substr(2), nullptr, 16);
}

}  // namespace

void save_mask(const Mask& mask, const std::string& path) {
    nlohmann::json j;
    j["rho"] = mask.rho;
    j["L"] = mask.L;
    j["selector_kind"] = selector_name(mask.kind);
    j["coordinate_index_map_version"] = kCoordMapVersion;
    j["selected"] = mask.selected;
    j["stage_counts"] = {{"per_domain_k", mask.stage_counts.per_domain_k},
                         {"step1_count", mask.stage_counts.step1_count},
                         {"step2_count", mask.stage_counts.step2_count}};
    j["seed"] = u64_hex(mask.seed);
    j["dataset_hash"] = u64_hex(mask.dataset_hash);
    j["target_domain"] = mask.target_domain;
    j["degraded_empty"] = mask.degraded_empty;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open mask for writing: " + path);
    f << j.dump(2) << "\n";
    if (!f.good()) throw IoError("mask write failed: " + path);
}

Mask load_mask(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open mask: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw IoError(std::string("mask parse error: ") + e.what());
    }
    if (j.at("coordinate_index_map_version").get<std::string>() != kCoordMapVersion)
        throw ProvenanceError("mask uses an unknown coordinate index map version");
    Mask mask;
    mask.rho = j.at("rho").get<double>();
    mask.L = j.at("L").get<int>();
    mask.kind = selector_from_name(j.at("selector_kind").get<std::string>());
    mask.selected = j.at("selected").get<std::vector<std::size_t>>();
    mask.stage_counts.per_domain_k = j.at("stage_counts").at("per_domain_k").get<std::size_t>();
    mask.stage_counts.step1_count = j.at("stage_counts").at("step1_count").get<std::size_t>();
    mask.stage_counts.step2_count = j.at("stage_counts").at("step2_count").get<std::size_t>();
    mask.seed = parse_u64_hex(j.at("seed").get<std::string>());
    mask.dataset_hash = parse_u64_hex(j.at("dataset_hash").get<std::string>());
    mask.target_domain = j.at("target_domain").get<int>();
    mask.degraded_empty = j.at("degraded_empty").get<bool>();
    // A readable file whose fields contradict each other has been edited
    // since it was produced; that's a provenance problem, not an IO one.
    if (!std::is_sorted(mask.selected.begin(), mask.selected.end()) ||
        std::adjacent_find(mask.selected.begin(), mask.selected.end()) != mask.selected.end())
        throw ProvenanceError("mask selected set must be sorted and unique");
    if (mask.selected.size() != mask.stage_counts.step2_count)
        throw ProvenanceError("mask stage_counts inconsistent with selected set");
    return mask;
}

void require_mask_provenance(const Mask& mask, std::uint64_t expected_hash) {
    if (mask.dataset_hash != expected_hash)
        throw ProvenanceError(
            "mask was built for a different model/dataset/seed (hash mismatch)");
}

}  // namespace jps
