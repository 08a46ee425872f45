#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "jps/errors.hpp"

namespace jps {

/// Dense row-major f64 tensor. The numeric substrate for everything else;
/// all math in this project runs on doubles, no mixed precision.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-D accessors; bounds unchecked in release paths.
    double& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    void fill(double v);

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

/// Standard matrix product [p×q]·[q×r] with fixed row-major accumulation
/// order, so results are bitwise reproducible.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Exact rank of a 0/1 matrix over the rationals, computed by fraction-free
/// (Bareiss) elimination on arbitrary-precision integers. Tolerance-free by
/// construction; equals the numeric SVD rank for binary matrices.
int binary_matrix_rank(const Tensor& mask_matrix);

/// Counter-based deterministic RNG. The output stream is a pure function of
/// (seed, stream, draw index), so derived streams are independent and runs
/// can be parallelized without shared RNG state.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0)
        : seed_(seed), stream_(stream) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double next_double();
    /// Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n);
    /// Standard normal via Box-Muller; consumes two uniforms per draw.
    double next_gaussian();

    /// Independent stream keyed off this generator's seed. Does not consume
    /// state from the parent.
    SeededRng derive(std::uint64_t stream_id) const;
    SeededRng derive(const char* tag) const;

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
};

Tensor randn(SeededRng& rng, std::vector<std::size_t> shape);

/// Uniform random permutation of [0, n) (Fisher-Yates).
std::vector<std::size_t> rand_perm(SeededRng& rng, std::size_t n);

/// FNV-1a, used for content hashes (cache keys, provenance). Not
/// cryptographic.
std::uint64_t fnv1a(const void* bytes, std::size_t len, std::uint64_t basis = 14695981039346656037ull);
std::uint64_t fnv1a(const std::string& s, std::uint64_t basis = 14695981039346656037ull);
std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b);

}  // namespace jps
