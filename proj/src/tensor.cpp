#include "jps/tensor.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include <cmath>
#include <cstring>
#include <numbers>
#include <utility>

namespace jps {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_product(shape_)) {
        throw DimensionError("tensor data size does not match shape product");
    }
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::fill(double v) {
    for (double& x : data_) x = v;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) {
        throw DimensionError("matmul expects 2-D tensors");
    }
    const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
    if (b.dim(0) != q) {
        throw DimensionError("matmul inner dimensions disagree");
    }
    Tensor out({p, r});
    const double* ap = a.data();
    const double* bp = b.data();
    double* op = out.data();
    // ikj order: for each out row, accumulate scaled rows of b. Per output
    // element this sums a[i][k]*b[k][j] in increasing k, the same order as
    // the textbook ijk triple loop, so results match it bitwise.
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t k = 0; k < q; ++k) {
            const double aik = ap[i * q + k];
            const double* brow = bp + k * r;
            double* orow = op + i * r;
            for (std::size_t j = 0; j < r; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

int binary_matrix_rank(const Tensor& m) {
    if (m.ndim() != 2) throw DimensionError("binary_matrix_rank expects a 2-D tensor");
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    using Int = boost::multiprecision::cpp_int;
    std::vector<std::vector<Int>> a(rows, std::vector<Int>(cols));
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const double v = m.at2(i, j);
            if (v != 0.0 && v != 1.0) {
                throw ValidationError("binary_matrix_rank requires entries exactly 0.0 or 1.0");
            }
            a[i][j] = (v == 1.0) ? 1 : 0;
        }
    }
    // Fraction-free Gaussian elimination (Bareiss). Exact over the integers,
    // so the result is the true rank over Q with no epsilon threshold.
    std::size_t rank = 0;
    Int prev = 1;
    for (std::size_t col = 0; col < cols && rank < rows; ++col) {
        std::size_t pivot = rank;
        while (pivot < rows && a[pivot][col] == 0) ++pivot;
        if (pivot == rows) continue;
        std::swap(a[pivot], a[rank]);
        for (std::size_t i = rank + 1; i < rows; ++i) {
            for (std::size_t j = col + 1; j < cols; ++j) {
                a[i][j] = (a[rank][col] * a[i][j] - a[i][col] * a[rank][j]) / prev;
            }
            a[i][col] = 0;
        }
        prev = a[rank][col];
        ++rank;
    }
    return static_cast<int>(rank);
}

namespace {

// splitmix64 finalizer: bijective mixer with good avalanche.
std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace

std::uint64_t SeededRng::next_u64() {
    // Counter mode: output i of stream s is mix(mix(mix(seed) ^ s') ^ i')
    // where the inner mixes decorrelate nearby seeds/streams.
    const std::uint64_t k = mix64(mix64(mix64(seed_) ^ stream_) ^ counter_);
    ++counter_;
    return k;
}

double SeededRng::next_double() {
    // 53 random bits into [0, 1).
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t SeededRng::next_below(std::uint64_t n) {
    if (n == 0) throw ValidationError("next_below requires n > 0");
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

double SeededRng::next_gaussian() {
    // Box-Muller, cosine branch only: exactly two uniforms per draw, no
    // cached spare, so the draw count is a deterministic function of calls.
    double u1 = next_double();
    const double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;  // guard log(0)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

SeededRng SeededRng::derive(std::uint64_t stream_id) const {
    return SeededRng(seed_, mix64(stream_ ^ mix64(stream_id)));
}

SeededRng SeededRng::derive(const char* tag) const {
    return derive(fnv1a(tag, std::strlen(tag)));
}

Tensor randn(SeededRng& rng, std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.next_gaussian();
    return t;
}

std::vector<std::size_t> rand_perm(SeededRng& rng, std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.next_below(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

std::uint64_t fnv1a(const void* bytes, std::size_t len, std::uint64_t basis) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = basis;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t basis) {
    return fnv1a(s.data(), s.size(), basis);
}

std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ mix64(b));
}

}  // namespace jps
