#include "jps/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "jps/errors.hpp"

namespace jps {

namespace {

// Generative constants. Within-class std is 1; class separation and
// spurious strength are chosen so that the spurious signal is the stronger
// one (a plain ERM fit prefers it) while the invariant signal alone still
// supports high Bayes accuracy.
constexpr double kWithinStd = 1.0;
constexpr double kMuScale = 0.55;
constexpr double kSpuScale = 1.6;

}  // namespace

std::vector<double> BenchmarkSpec::domain_gammas() const {
    std::vector<double> g = source_gammas;
    g.push_back(target_gamma);
    return g;
}

void BenchmarkSpec::validate() const {
    if (num_domains < 2) throw ValidationError("num_domains must be >= 2");
    if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
    if (invariant_dims <= 0) throw ValidationError("invariant_dims must be positive");
    if (spurious_dims < 0 || noise_dims < 0)
        throw ValidationError("spurious_dims/noise_dims must be >= 0");
    if (samples_per_class_per_domain < 5)
        throw ValidationError("samples_per_class_per_domain must be >= 5");
    if (static_cast<int>(source_gammas.size()) != num_domains - 1)
        throw ValidationError("source_gammas must have num_domains - 1 entries");
    if (noise_scale < 0.0) throw ValidationError("noise_scale must be >= 0");
    // The spurious-correlation flip is the point of the benchmark: sources
    // positive, target negative.
    if (target_gamma < -1.0 || target_gamma >= 0.0)
        throw ValidationError("target_gamma must lie in [-1, 0)");
    for (double g : source_gammas)
        if (g <= 0.0 || g > 1.0)
            throw ValidationError("source_gammas must lie in (0, 1]");
}

std::uint64_t BenchmarkSpec::content_hash() const {
    std::uint64_t h = fnv1a("benchmarkspec-v1", 17);
    auto mix = [&h](const void* p, std::size_t n) { h = fnv1a(p, n, h); };
    mix(&num_domains, sizeof(num_domains));
    mix(&num_classes, sizeof(num_classes));
    mix(&invariant_dims, sizeof(invariant_dims));
    mix(&spurious_dims, sizeof(spurious_dims));
    mix(&noise_dims, sizeof(noise_dims));
    mix(&samples_per_class_per_domain, sizeof(samples_per_class_per_domain));
    for (double g : source_gammas) mix(&g, sizeof(g));
    mix(&target_gamma, sizeof(target_gamma));
    mix(&noise_scale, sizeof(noise_scale));
    mix(&seed, sizeof(seed));
    return h;
}

GenerativeParams generative_params(const BenchmarkSpec& spec) {
    spec.validate();
    GenerativeParams gp;
    SeededRng root(spec.seed);
    SeededRng mu_rng = root.derive("genparams.mu");
    SeededRng v_rng = root.derive("genparams.v");
    SeededRng sig_rng = root.derive("genparams.sigma");
    gp.mu.resize(static_cast<std::size_t>(spec.num_classes));
    gp.v.resize(static_cast<std::size_t>(spec.num_classes));
    for (int c = 0; c < spec.num_classes; ++c) {
        auto& mu = gp.mu[static_cast<std::size_t>(c)];
        mu.resize(static_cast<std::size_t>(spec.invariant_dims));
        for (double& x : mu) x = kMuScale * mu_rng.next_gaussian();
        auto& v = gp.v[static_cast<std::size_t>(c)];
        v.resize(static_cast<std::size_t>(spec.spurious_dims));
        for (double& x : v) x = kSpuScale * v_rng.next_gaussian();
    }
    gp.sigma_e.resize(static_cast<std::size_t>(spec.num_domains));
    for (double& s : gp.sigma_e) s = 0.5 + sig_rng.next_double();
    return gp;
}

const char* split_tag_name(SplitTag t) {
    return t == SplitTag::train ? "train" : "val_model_select";
}

std::uint64_t DomainDataset::content_hash() const {
    std::uint64_t h = spec.content_hash();
    for (int e = 0; e < num_domains(); ++e) {
        const auto ei = static_cast<std::size_t>(e);
        h = fnv1a(features[ei].data(), features[ei].size() * sizeof(double), h);
        h = fnv1a(labels[ei].data(), labels[ei].size() * sizeof(int), h);
        for (SplitTag t : tags[ei]) {
            const auto b = static_cast<unsigned char>(t);
            h = fnv1a(&b, 1, h);
        }
    }
    return h;
}

namespace {

void fill_sample(double* row, const BenchmarkSpec& spec, const GenerativeParams& gp, int c,
                 double gamma, double sigma_e, SeededRng& rng) {
    const auto cu = static_cast<std::size_t>(c);
    std::size_t j = 0;
    for (int k = 0; k < spec.invariant_dims; ++k, ++j)
        row[j] = gp.mu[cu][static_cast<std::size_t>(k)] + kWithinStd * rng.next_gaussian();
    for (int k = 0; k < spec.spurious_dims; ++k, ++j)
        row[j] = gamma * gp.v[cu][static_cast<std::size_t>(k)] + kWithinStd * rng.next_gaussian();
    for (int k = 0; k < spec.noise_dims; ++k, ++j)
        row[j] = spec.noise_scale * sigma_e * rng.next_gaussian();
}

}  // namespace

DomainDataset generate(const BenchmarkSpec& spec) {
    spec.validate();
    const GenerativeParams gp = generative_params(spec);
    const std::vector<double> gammas = spec.domain_gammas();
    const auto d = static_cast<std::size_t>(spec.feature_dim());
    const int per_class = spec.samples_per_class_per_domain;
    const std::size_t n_dom = static_cast<std::size_t>(spec.num_classes) *
                              static_cast<std::size_t>(per_class);

    DomainDataset ds;
    ds.spec = spec;
    SeededRng root(spec.seed);
    for (int e = 0; e < spec.num_domains; ++e) {
        SeededRng drng = root.derive(hash_combine(fnv1a("domain-data"), static_cast<std::uint64_t>(e)));
        SeededRng srng = root.derive(hash_combine(fnv1a("domain-split"), static_cast<std::uint64_t>(e)));
        Tensor feats({n_dom, d});
        std::vector<int> labs(n_dom);
        std::vector<SplitTag> tg(n_dom, SplitTag::train);
        std::size_t r = 0;
        for (int c = 0; c < spec.num_classes; ++c) {
            // Stratified 80/20 within each class keeps both splits balanced.
            const int n_train = static_cast<int>(std::lround(0.8 * per_class));
            std::vector<std::size_t> order = rand_perm(srng, static_cast<std::size_t>(per_class));
            for (int s = 0; s < per_class; ++s, ++r) {
                fill_sample(feats.data() + r * d, spec, gp, c, gammas[static_cast<std::size_t>(e)],
                            gp.sigma_e[static_cast<std::size_t>(e)], drng);
                labs[r] = c;
            }
            for (int s = 0; s < per_class; ++s) {
                const std::size_t row = r - static_cast<std::size_t>(per_class) + order[static_cast<std::size_t>(s)];
                tg[row] = s < n_train ? SplitTag::train : SplitTag::val_model_select;
            }
        }
        ds.features.push_back(std::move(feats));
        ds.labels.push_back(std::move(labs));
        ds.tags.push_back(std::move(tg));
    }
    return ds;
}

LodoSplit leave_one_out_splits(const DomainDataset& ds, int target, int val_multiplier,
                               int batch_size, SeededRng& rng) {
    if (target < 0 || target >= ds.num_domains())
        throw ValidationError("target domain index out of range");
    if (val_multiplier <= 0 || batch_size <= 0)
        throw ValidationError("val_multiplier and batch_size must be positive");
    LodoSplit split;
    split.target_domain = target;
    split.train_idx.resize(static_cast<std::size_t>(ds.num_domains()));
    split.val_model_idx.resize(static_cast<std::size_t>(ds.num_domains()));
    split.val_jps_idx.resize(static_cast<std::size_t>(ds.num_domains()));
    for (int e = 0; e < ds.num_domains(); ++e) {
        if (e == target) continue;
        split.source_domains.push_back(e);
        const auto eu = static_cast<std::size_t>(e);
        for (std::size_t i = 0; i < ds.domain_size(e); ++i) {
            if (ds.tags[eu][i] == SplitTag::train)
                split.train_idx[eu].push_back(i);
            else
                split.val_model_idx[eu].push_back(i);
        }
        // Resample val_jps from the train side only (never the model-selection
        // or target data).
        SeededRng vrng = rng.derive(hash_combine(fnv1a("val-jps"), static_cast<std::uint64_t>(e)));
        const std::size_t want = static_cast<std::size_t>(val_multiplier) *
                                 static_cast<std::size_t>(batch_size);
        const std::size_t take = std::min(want, split.train_idx[eu].size());
        std::vector<std::size_t> order = rand_perm(vrng, split.train_idx[eu].size());
        for (std::size_t i = 0; i < take; ++i)
            split.val_jps_idx[eu].push_back(split.train_idx[eu][order[i]]);
        std::sort(split.val_jps_idx[eu].begin(), split.val_jps_idx[eu].end());
    }
    return split;
}

Batch make_batch(const DomainDataset& ds, const ModelConfig& cfg, int domain,
                 const std::vector<std::size_t>& rows) {
    if (domain < 0 || domain >= ds.num_domains())
        throw ValidationError("make_batch: domain out of range");
    if (ds.spec.feature_dim() != cfg.input_dim())
        throw DimensionError("make_batch: feature_dim != T * d_model");
    if (rows.empty()) throw ValidationError("make_batch: empty row set");
    const auto eu = static_cast<std::size_t>(domain);
    const auto d = static_cast<std::size_t>(ds.spec.feature_dim());
    Batch b;
    b.inputs = Tensor({rows.size(), static_cast<std::size_t>(cfg.num_tokens),
                       static_cast<std::size_t>(cfg.d_model)});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= ds.domain_size(domain))
            throw ValidationError("make_batch: row index out of range");
        std::memcpy(b.inputs.data() + i * d, ds.features[eu].data() + rows[i] * d,
                    d * sizeof(double));
        b.labels.push_back(ds.labels[eu][rows[i]]);
        b.domain_ids.push_back(domain);
    }
    return b;
}

ParamStore pretrain_theta0(const ModelConfig& cfg, const BenchmarkSpec& spec, int steps,
                           double lr, std::uint64_t seed, int batch_size) {
    cfg.validate();
    spec.validate();
    if (steps < 0) throw ValidationError("pretrain steps must be >= 0");
    if (lr <= 0.0) throw ValidationError("pretrain lr must be positive");
    if (batch_size <= 0) throw ValidationError("pretrain batch_size must be positive");
    if (spec.feature_dim() != cfg.input_dim())
        throw DimensionError("pretrain: feature_dim != T * d_model");

    ParamStore ps = init_params(cfg, seed);
    const GenerativeParams gp = generative_params(spec);
    SeededRng root(hash_combine(seed, fnv1a("pretrain")));
    SeededRng sample_rng = root.derive("samples");
    SeededRng drop_rng = root.derive("dropout");

    // Plain unmasked Adam over all parameters.
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<Tensor> m_state, v_state;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        m_state.push_back(Tensor::zeros(ps.entry(i).tensor.shape()));
        v_state.push_back(Tensor::zeros(ps.entry(i).tensor.shape()));
    }

    const auto d = static_cast<std::size_t>(spec.feature_dim());
    for (int step = 0; step < steps; ++step) {
        // Fresh minibatch from the meta-distribution: one gamma and one noise
        // level per batch, uniform labels.
        const double gamma = 2.0 * sample_rng.next_double() - 1.0;
        const double sigma_e = 0.5 + sample_rng.next_double();
        Batch b;
        b.inputs = Tensor({static_cast<std::size_t>(batch_size),
                           static_cast<std::size_t>(cfg.num_tokens),
                           static_cast<std::size_t>(cfg.d_model)});
        for (int i = 0; i < batch_size; ++i) {
            const int c = static_cast<int>(sample_rng.next_below(
                static_cast<std::uint64_t>(spec.num_classes)));
            fill_sample(b.inputs.data() + static_cast<std::size_t>(i) * d, spec, gp, c, gamma,
                        sigma_e, sample_rng);
            b.labels.push_back(c);
            b.domain_ids.push_back(-1);
        }
        BackwardResult res = backward(ps, cfg, b, /*train_mode=*/true,
                                      cfg.dropout_rate > 0.0 ? &drop_rng : nullptr);
        if (!std::isfinite(res.loss_value)) throw NumericError("pretraining diverged");
        const double t = static_cast<double>(step + 1);
        const double bc1 = 1.0 - std::pow(b1, t);
        const double bc2 = 1.0 - std::pow(b2, t);
        for (std::size_t pi = 0; pi < ps.size(); ++pi) {
            auto& e = ps.entry(pi);
            const Tensor& g = res.grads.at(e.param_id);
            for (std::size_t j = 0; j < e.tensor.size(); ++j) {
                m_state[pi][j] = b1 * m_state[pi][j] + (1.0 - b1) * g[j];
                v_state[pi][j] = b2 * v_state[pi][j] + (1.0 - b2) * g[j] * g[j];
                const double mhat = m_state[pi][j] / bc1;
                const double vhat = v_state[pi][j] / bc2;
                e.tensor[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
    ps.snapshot_theta0();
    return ps;
}

double bayes_oracle_accuracy(const DomainDataset& ds, int domain) {
    if (domain < 0 || domain >= ds.num_domains())
        throw ValidationError("bayes_oracle_accuracy: domain out of range");
    const GenerativeParams gp = generative_params(ds.spec);
    const auto eu = static_cast<std::size_t>(domain);
    const auto d = static_cast<std::size_t>(ds.spec.feature_dim());
    const auto d_inv = static_cast<std::size_t>(ds.spec.invariant_dims);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.domain_size(domain); ++i) {
        const double* row = ds.features[eu].data() + i * d;
        // Equal-covariance Gaussian classes: argmax_c <x, mu_c> - |mu_c|^2/2.
        int best = 0;
        double best_score = -1e300;
        for (int c = 0; c < ds.spec.num_classes; ++c) {
            const auto& mu = gp.mu[static_cast<std::size_t>(c)];
            double s = 0.0, norm2 = 0.0;
            for (std::size_t k = 0; k < d_inv; ++k) {
                s += row[k] * mu[k];
                norm2 += mu[k] * mu[k];
            }
            const double score = s - 0.5 * norm2;
            if (score > best_score) {
                best_score = score;
                best = c;
            }
        }
        correct += best == ds.labels[eu][i];
    }
    return static_cast<double>(correct) / static_cast<double>(ds.domain_size(domain));
}

namespace {

std::string format_double(double x) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    if (ec != std::errc()) throw IoError("double formatting failed");
    return std::string(buf, p);
}

double parse_double(std::string_view s) {
    double x = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
    if (ec != std::errc() || p != s.data() + s.size())
        throw IoError("CSV: bad double field '" + std::string(s) + "'");
    return x;
}

}  // namespace

void export_csv(const DomainDataset& ds, const std::string& dir, const LodoSplit* split) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
    const auto d = static_cast<std::size_t>(ds.spec.feature_dim());
    for (int e = 0; e < ds.num_domains(); ++e) {
        const auto eu = static_cast<std::size_t>(e);
        const std::string path = dir + "/domain_" + std::to_string(e) + ".csv";
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open for writing: " + path);
        for (std::size_t k = 0; k < d; ++k) f << "feature_" << k << ",";
        f << "label,domain_id,split_tag\n";
        for (std::size_t i = 0; i < ds.domain_size(e); ++i) {
            for (std::size_t k = 0; k < d; ++k) f << format_double(ds.features[eu][i * d + k]) << ",";
            const char* tag = split_tag_name(ds.tags[eu][i]);
            if (split != nullptr && e != split->target_domain &&
                std::binary_search(split->val_jps_idx[eu].begin(), split->val_jps_idx[eu].end(), i))
                tag = "val_jps";
            f << ds.labels[eu][i] << "," << e << "," << tag << "\n";
        }
        if (!f.good()) throw IoError("write failed: " + path);
    }
}

DomainDataset import_csv(const BenchmarkSpec& spec, const std::string& dir) {
    spec.validate();
    DomainDataset ds;
    ds.spec = spec;
    const auto d = static_cast<std::size_t>(spec.feature_dim());
    for (int e = 0; e < spec.num_domains; ++e) {
        const std::string path = dir + "/domain_" + std::to_string(e) + ".csv";
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open: " + path);
        std::string line;
        if (!std::getline(f, line)) throw IoError("empty CSV: " + path);
        std::vector<double> feats;
        std::vector<int> labs;
        std::vector<SplitTag> tags;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            std::vector<std::string_view> fields;
            std::size_t start = 0;
            for (std::size_t i = 0; i <= line.size(); ++i) {
                if (i == line.size() || line[i] == ',') {
                    fields.emplace_back(line.data() + start, i - start);
                    start = i + 1;
                }
            }
            if (fields.size() != d + 3) throw IoError("CSV: wrong field count in " + path);
            for (std::size_t k = 0; k < d; ++k) feats.push_back(parse_double(fields[k]));
            labs.push_back(static_cast<int>(parse_double(fields[d])));
            const int dom = static_cast<int>(parse_double(fields[d + 1]));
            if (dom != e) throw IoError("CSV: domain_id mismatch in " + path);
            const std::string_view tag = fields[d + 2];
            if (tag == "train" || tag == "val_jps")
                tags.push_back(SplitTag::train);  // val_jps rows are train rows
            else if (tag == "val_model_select")
                tags.push_back(SplitTag::val_model_select);
            else
                throw IoError("CSV: unknown split_tag in " + path);
        }
        const std::size_t n = labs.size();
        if (n == 0) throw IoError("CSV: no rows in " + path);
        ds.features.push_back(Tensor({n, d}, std::move(feats)));
        ds.labels.push_back(std::move(labs));
        ds.tags.push_back(std::move(tags));
    }
    return ds;
}

}  // namespace jps
