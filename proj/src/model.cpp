#include "jps/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "jps/autodiff.hpp"
#include "jps/errors.hpp"

namespace jps {

void ModelConfig::validate() const {
    if (num_blocks < 0) throw ValidationError("num_blocks must be >= 0");
    if (d_model <= 0) throw ValidationError("d_model must be positive");
    if (num_tokens <= 0) throw ValidationError("num_tokens must be positive");
    if (mlp_hidden <= 0) throw ValidationError("mlp_hidden must be positive");
    if (num_classes <= 0) throw ValidationError("num_classes must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw ValidationError("dropout_rate must be in [0,1)");
}

const char* role_name(ParamRole role) {
    switch (role) {
        case ParamRole::attention: return "attention";
        case ParamRole::mlp_fc1: return "mlp_fc1";
        case ParamRole::mlp_fc2: return "mlp_fc2";
        case ParamRole::layernorm: return "layernorm";
        case ParamRole::embedding: return "embedding";
        case ParamRole::classifier_head: return "classifier_head";
    }
    throw ValidationError("unknown ParamRole");
}

ParamRole role_from_name(const std::string& name) {
    if (name == "attention") return ParamRole::attention;
    if (name == "mlp_fc1") return ParamRole::mlp_fc1;
    if (name == "mlp_fc2") return ParamRole::mlp_fc2;
    if (name == "layernorm") return ParamRole::layernorm;
    if (name == "embedding") return ParamRole::embedding;
    if (name == "classifier_head") return ParamRole::classifier_head;
    throw ValidationError("unknown role name: " + name);
}

void ParamStore::add(std::string param_id, int layer_index, ParamRole role, Tensor t) {
    if (index_.count(param_id)) throw ValidationError("duplicate param_id: " + param_id);
    index_[param_id] = entries_.size();
    entries_.push_back(ParamEntry{std::move(param_id), layer_index, role, std::move(t)});
}

std::size_t ParamStore::index_of(const std::string& param_id) const {
    auto it = index_.find(param_id);
    if (it == index_.end()) throw ValidationError("unknown param_id: " + param_id);
    return it->second;
}

bool ParamStore::has(const std::string& param_id) const { return index_.count(param_id) > 0; }

const Tensor& ParamStore::get(const std::string& param_id) const {
    return entries_[index_of(param_id)].tensor;
}

Tensor& ParamStore::get_mut(const std::string& param_id) {
    return entries_[index_of(param_id)].tensor;
}

void ParamStore::snapshot_theta0() {
    theta0_.clear();
    theta0_.reserve(entries_.size());
    for (const auto& e : entries_) theta0_.push_back(e.tensor);
}

const Tensor& ParamStore::theta0(std::size_t i) const {
    if (theta0_.size() != entries_.size()) throw ValidationError("theta0 not snapshotted");
    return theta0_[i];
}

const Tensor& ParamStore::theta0(const std::string& param_id) const {
    return theta0(index_of(param_id));
}

std::size_t ParamStore::total_coords() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
}

std::uint64_t ParamStore::content_hash() const {
    std::uint64_t h = fnv1a("paramstore-v1", 13);
    for (const auto& e : entries_) {
        h = fnv1a(e.param_id, h);
        for (std::size_t d : e.tensor.shape()) h = fnv1a(&d, sizeof(d), h);
        h = fnv1a(e.tensor.data(), e.tensor.size() * sizeof(double), h);
    }
    return h;
}

namespace {

std::string block_id(int b, const char* rest) {
    return "blocks." + std::to_string(b) + "." + rest;
}

Tensor scaled_randn(SeededRng rng, std::vector<std::size_t> shape, double scale) {
    Tensor t = randn(rng, std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] *= scale;
    return t;
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore ps;
    SeededRng root(seed);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto hidden = static_cast<std::size_t>(cfg.mlp_hidden);
    const auto C = static_cast<std::size_t>(cfg.num_classes);
    const auto T = static_cast<std::size_t>(cfg.num_tokens);
    // Each tensor draws from a stream keyed by its param_id, so values are
    // independent of registration order.
    auto w = [&](const std::string& id, std::vector<std::size_t> shape, double scale) {
        return scaled_randn(root.derive(fnv1a(id)), std::move(shape), scale);
    };
    const double ws = 1.0 / std::sqrt(static_cast<double>(d));

    ps.add("pos_emb", -1, ParamRole::embedding, Tensor::zeros({T, d}));
    for (int b = 0; b < cfg.num_blocks; ++b) {
        Tensor ones({d});
        ones.fill(1.0);
        ps.add(block_id(b, "ln1.gamma"), b, ParamRole::layernorm, ones);
        ps.add(block_id(b, "ln1.beta"), b, ParamRole::layernorm, Tensor::zeros({d}));
        for (const char* nm : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            ps.add(block_id(b, nm), b, ParamRole::attention, w(block_id(b, nm), {d, d}, ws));
        // No key bias: softmax is invariant to a per-query constant shift of the
        // scores, so a key bias would have an identically zero gradient.
        for (const char* nm : {"attn.bq", "attn.bv", "attn.bo"})
            ps.add(block_id(b, nm), b, ParamRole::attention, Tensor::zeros({d}));
        Tensor ones2({d});
        ones2.fill(1.0);
        ps.add(block_id(b, "ln2.gamma"), b, ParamRole::layernorm, ones2);
        ps.add(block_id(b, "ln2.beta"), b, ParamRole::layernorm, Tensor::zeros({d}));
        ps.add(block_id(b, "fc1.weight"), b, ParamRole::mlp_fc1,
               w(block_id(b, "fc1.weight"), {d, hidden}, ws));
        ps.add(block_id(b, "fc1.bias"), b, ParamRole::mlp_fc1, Tensor::zeros({hidden}));
        ps.add(block_id(b, "fc2.weight"), b, ParamRole::mlp_fc2,
               w(block_id(b, "fc2.weight"), {hidden, d}, 1.0 / std::sqrt(static_cast<double>(hidden))));
        ps.add(block_id(b, "fc2.bias"), b, ParamRole::mlp_fc2, Tensor::zeros({d}));
    }
    ps.add("head.weight", -1, ParamRole::classifier_head, w("head.weight", {d, C}, ws));
    ps.add("head.bias", -1, ParamRole::classifier_head, Tensor::zeros({C}));
    return ps;
}

namespace {

struct GraphOut {
    ad::Var loss_var;
    ad::Var logits_var;
    ad::Var pooled_var;
    std::map<std::string, ad::Var> param_vars;
};

// Build the full forward graph on the tape. Shared by forward()/backward().
GraphOut build_graph(ad::Tape& tape, const ParamStore& params, const ModelConfig& cfg,
                     const Batch& batch, bool train_mode, SeededRng* dropout_rng,
                     bool with_loss) {
    cfg.validate();
    const auto T = static_cast<std::size_t>(cfg.num_tokens);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t n = batch.size();
    if (n == 0) throw ValidationError("empty batch");
    if (batch.inputs.size() != n * T * d)
        throw DimensionError("batch inputs do not match {batch, T, d_model}");
    const bool use_dropout = train_mode && cfg.dropout_rate > 0.0;
    if (use_dropout && dropout_rng == nullptr)
        throw ValidationError("train-mode forward with dropout requires an rng");

    GraphOut out;
    auto pvar = [&](const std::string& id) {
        ad::Var v = tape.leaf(params.get(id));
        out.param_vars.emplace(id, v);
        return v;
    };

    Tensor x2d({n * T, d}, batch.inputs.vec());
    ad::Var x = tape.leaf(std::move(x2d));
    x = tape.add_tile_rows(x, pvar("pos_emb"), T);

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (int b = 0; b < cfg.num_blocks; ++b) {
        ad::Var h1 = tape.layer_norm(x, pvar(block_id(b, "ln1.gamma")),
                                     pvar(block_id(b, "ln1.beta")));
        ad::Var q = tape.add_rowvec(tape.matmul(h1, pvar(block_id(b, "attn.wq"))),
                                    pvar(block_id(b, "attn.bq")));
        ad::Var k = tape.matmul(h1, pvar(block_id(b, "attn.wk")));
        ad::Var v = tape.add_rowvec(tape.matmul(h1, pvar(block_id(b, "attn.wv"))),
                                    pvar(block_id(b, "attn.bv")));
        ad::Var scores = tape.scale(tape.batched_qkt(q, k, T), inv_sqrt_d);
        ad::Var attn = tape.softmax_rows(scores);
        ad::Var o = tape.batched_av(attn, v, T);
        o = tape.add_rowvec(tape.matmul(o, pvar(block_id(b, "attn.wo"))),
                            pvar(block_id(b, "attn.bo")));
        x = tape.add(x, o);

        ad::Var h2 = tape.layer_norm(x, pvar(block_id(b, "ln2.gamma")),
                                     pvar(block_id(b, "ln2.beta")));
        ad::Var f = tape.add_rowvec(tape.matmul(h2, pvar(block_id(b, "fc1.weight"))),
                                    pvar(block_id(b, "fc1.bias")));
        f = tape.gelu(f);
        if (use_dropout) f = tape.dropout(f, cfg.dropout_rate, *dropout_rng);
        f = tape.add_rowvec(tape.matmul(f, pvar(block_id(b, "fc2.weight"))),
                            pvar(block_id(b, "fc2.bias")));
        x = tape.add(x, f);
    }

    ad::Var pooled = tape.mean_pool_rows(x, T);
    out.pooled_var = pooled;
    out.logits_var = tape.add_rowvec(tape.matmul(pooled, pvar("head.weight")),
                                     pvar("head.bias"));
    if (with_loss) out.loss_var = tape.cross_entropy(out.logits_var, batch.labels);
    return out;
}

}  // namespace

Tensor forward(const ParamStore& params, const ModelConfig& cfg, const Batch& batch,
               bool train_mode, SeededRng* dropout_rng) {
    ad::Tape tape;
    GraphOut g = build_graph(tape, params, cfg, batch, train_mode, dropout_rng, false);
    return tape.value(g.logits_var);
}

Tensor forward_features(const ParamStore& params, const ModelConfig& cfg, const Batch& batch) {
    ad::Tape tape;
    GraphOut g = build_graph(tape, params, cfg, batch, false, nullptr, false);
    return tape.value(g.pooled_var);
}

double loss(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2 || logits.dim(0) != labels.size())
        throw DimensionError("loss: logits/labels mismatch");
    const std::size_t R = logits.dim(0), C = logits.dim(1);
    double total = 0.0;
    for (std::size_t r = 0; r < R; ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw ValidationError("loss: label out of range");
        double mx = logits.at2(r, 0);
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, logits.at2(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(logits.at2(r, c) - mx);
        total += mx + std::log(z) - logits.at2(r, static_cast<std::size_t>(y));
    }
    return total / static_cast<double>(R);
}

BackwardResult backward(const ParamStore& params, const ModelConfig& cfg, const Batch& batch,
                        bool train_mode, SeededRng* dropout_rng) {
    ad::Tape tape;
    GraphOut g = build_graph(tape, params, cfg, batch, train_mode, dropout_rng, true);
    tape.backward(g.loss_var);
    BackwardResult res;
    res.loss_value = tape.value(g.loss_var)[0];
    for (const auto& [id, var] : g.param_vars) res.grads.emplace(id, tape.grad(var));
    if (!std::isfinite(res.loss_value)) throw NumericError("backward: non-finite loss");
    return res;
}

FiniteDiffReport finite_diff_check(ParamStore& params, const ModelConfig& cfg, const Batch& batch,
                                   double h, double tol) {
    BackwardResult analytic = backward(params, cfg, batch, /*train_mode=*/false);
    // Negative-control hook: corrupt one analytic entry so the check must fail.
    if (std::getenv("JPS_TEST_SABOTAGE_GRAD") != nullptr) {
        Tensor& g = analytic.grads.at("head.bias");
        g[0] += 0.5 * (1.0 + std::abs(g[0]));
    }
    FiniteDiffReport rep;
    for (std::size_t ei = 0; ei < params.size(); ++ei) {
        ParamEntry& e = params.entry(ei);
        const Tensor& ga = analytic.grads.at(e.param_id);
        for (std::size_t i = 0; i < e.tensor.size(); ++i) {
            const double orig = e.tensor[i];
            e.tensor[i] = orig + h;
            const double lp = loss(forward(params, cfg, batch), batch.labels);
            e.tensor[i] = orig - h;
            const double lm = loss(forward(params, cfg, batch), batch.labels);
            e.tensor[i] = orig;
            const double num = (lp - lm) / (2.0 * h);
            const double ana = ga[i];
            const double rel =
                std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param_id = e.param_id;
                rep.worst_offset = i;
                rep.worst_analytic = ana;
                rep.worst_numeric = num;
            }
            ++rep.coords_checked;
        }
    }
    rep.passed = rep.max_rel_err <= tol;
    return rep;
}

std::pair<std::size_t, std::size_t> EligibleSpace::locate(std::size_t j) const {
    if (j >= total) throw ValidationError("eligible coordinate out of range");
    std::size_t i = 0;
    while (i + 1 < param_ids.size() && offsets[i + 1] <= j) ++i;
    return {i, j - offsets[i]};
}

EligibleSpace eligible_space(const ModelConfig& cfg, int L) {
    cfg.validate();
    if (L < 1 || L > cfg.num_blocks)
        throw ValidationError("L must satisfy 1 <= L <= num_blocks");
    EligibleSpace s;
    s.L = L;
    for (int b = cfg.num_blocks - L; b < cfg.num_blocks; ++b) {
        s.param_ids.push_back(block_id(b, "fc1.weight"));
        s.param_sizes.push_back(static_cast<std::size_t>(cfg.d_model) *
                                static_cast<std::size_t>(cfg.mlp_hidden));
        s.param_ids.push_back(block_id(b, "fc1.bias"));
        s.param_sizes.push_back(static_cast<std::size_t>(cfg.mlp_hidden));
    }
    s.offsets.resize(s.param_ids.size());
    std::size_t off = 0;
    for (std::size_t i = 0; i < s.param_ids.size(); ++i) {
        s.offsets[i] = off;
        off += s.param_sizes[i];
    }
    s.total = off;
    return s;
}

std::vector<double> flatten_eligible(const ParamStore& params, const EligibleSpace& space) {
    std::vector<double> flat;
    flat.reserve(space.total);
    for (std::size_t i = 0; i < space.param_ids.size(); ++i) {
        const Tensor& t = params.get(space.param_ids[i]);
        if (t.size() != space.param_sizes[i])
            throw DimensionError("flatten_eligible: space does not match params");
        flat.insert(flat.end(), t.vec().begin(), t.vec().end());
    }
    return flat;
}

void unflatten_eligible(ParamStore& params, const EligibleSpace& space,
                        const std::vector<double>& flat) {
    if (flat.size() != space.total)
        throw DimensionError("unflatten_eligible: length mismatch");
    std::size_t off = 0;
    for (std::size_t i = 0; i < space.param_ids.size(); ++i) {
        Tensor& t = params.get_mut(space.param_ids[i]);
        if (t.size() != space.param_sizes[i])
            throw DimensionError("unflatten_eligible: space does not match params");
        std::copy(flat.begin() + off, flat.begin() + off + t.size(), t.vec().begin());
        off += t.size();
    }
}

namespace {

constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

std::string base64_encode(const unsigned char* data, std::size_t len) {
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (std::size_t i = 0; i < len; i += 3) {
        unsigned int v = data[i] << 16;
        if (i + 1 < len) v |= data[i + 1] << 8;
        if (i + 2 < len) v |= data[i + 2];
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(i + 1 < len ? kB64Alphabet[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < len ? kB64Alphabet[v & 63] : '=');
    }
    return out;
}

std::vector<unsigned char> base64_decode(const std::string& s) {
    if (s.size() % 4 != 0) throw IoError("base64: length not a multiple of 4");
    auto decode_char = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        if (c == '=') return -1;
        throw IoError("base64: invalid character");
    };
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    for (std::size_t i = 0; i < s.size(); i += 4) {
        int c0 = decode_char(s[i]), c1 = decode_char(s[i + 1]);
        int c2 = decode_char(s[i + 2]), c3 = decode_char(s[i + 3]);
        if (c0 < 0 || c1 < 0) throw IoError("base64: malformed padding");
        unsigned int v = (static_cast<unsigned>(c0) << 18) | (static_cast<unsigned>(c1) << 12);
        out.push_back((v >> 16) & 0xff);
        if (c2 >= 0) {
            v |= static_cast<unsigned>(c2) << 6;
            out.push_back((v >> 8) & 0xff);
        }
        if (c3 >= 0) {
            if (c2 < 0) throw IoError("base64: malformed padding");
            v |= static_cast<unsigned>(c3);
            out.push_back(v & 0xff);
        }
    }
    return out;
}

namespace {

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"num_blocks", cfg.num_blocks},   {"d_model", cfg.d_model},
                          {"num_tokens", cfg.num_tokens},   {"mlp_hidden", cfg.mlp_hidden},
                          {"num_classes", cfg.num_classes}, {"dropout_rate", cfg.dropout_rate}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.num_blocks = j.at("num_blocks").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.num_tokens = j.at("num_tokens").get<int>();
    cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.dropout_rate = j.at("dropout_rate").get<double>();
    cfg.validate();
    return cfg;
}

}  // namespace

void save_checkpoint(const ParamStore& params, const ModelConfig& cfg, const std::string& path) {
    nlohmann::json j;
    j["config"] = config_to_json(cfg);
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const ParamEntry& e = params.entry(i);
        nlohmann::json je;
        je["param_id"] = e.param_id;
        je["layer_index"] = e.layer_index;
        je["role"] = role_name(e.role);
        je["shape"] = e.tensor.shape();
        // f64 bytes as stored; this toolchain is little-endian.
        je["data"] = base64_encode(
            reinterpret_cast<const unsigned char*>(e.tensor.data()),
            e.tensor.size() * sizeof(double));
        entries.push_back(std::move(je));
    }
    j["entries"] = std::move(entries);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f << j.dump(2) << "\n";
    if (!f.good()) throw IoError("checkpoint write failed: " + path);
}

std::pair<ParamStore, ModelConfig> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw IoError(std::string("checkpoint parse error: ") + e.what());
    }
    ModelConfig cfg = config_from_json(j.at("config"));
    ParamStore ps;
    for (const auto& je : j.at("entries")) {
        std::vector<std::size_t> shape = je.at("shape").get<std::vector<std::size_t>>();
        std::vector<unsigned char> bytes = base64_decode(je.at("data").get<std::string>());
        if (bytes.size() != shape_product(shape) * sizeof(double))
            throw IoError("checkpoint tensor byte length mismatch");
        std::vector<double> data(shape_product(shape));
        std::memcpy(data.data(), bytes.data(), bytes.size());
        ps.add(je.at("param_id").get<std::string>(), je.at("layer_index").get<int>(),
               role_from_name(je.at("role").get<std::string>()),
               Tensor(std::move(shape), std::move(data)));
    }
    ps.snapshot_theta0();
    return {std::move(ps), cfg};
}

}  // namespace jps
