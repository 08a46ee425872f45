#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "jps/tensor.hpp"

namespace jps::ad {

/// Handle into a Tape. Cheap to copy; only meaningful with the tape that
/// issued it.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const { return id != static_cast<std::size_t>(-1); }
};

/// Reverse-mode tape over 2-D tensors. Nodes are appended in evaluation
/// order (which is topological by construction), so backward() is a single
/// reverse sweep. One tape per forward pass; not reusable.
///
/// Attention ops work on row-packed token matrices: a batch of n samples
/// with T tokens each is a [n*T, d] tensor whose row b*T+t is token t of
/// sample b. This keeps every op a plain 2-D kernel.
class Tape {
public:
    Var leaf(Tensor value);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
    std::size_t size() const { return nodes_.size(); }

    // a + b, same shape.
    Var add(Var a, Var b);
    // a [R,C] + row vector b (C entries, any shape) broadcast over rows.
    Var add_rowvec(Var a, Var b);
    // a [n*T, d] + p (T*d entries) tiled over the n samples (pos embedding).
    Var add_tile_rows(Var a, Var p, std::size_t T);
    Var scale(Var a, double s);
    Var matmul(Var a, Var b);
    // scores[b*T+i][j] = <q row b*T+i, k row b*T+j>; per-sample q·kᵀ.
    Var batched_qkt(Var q, Var k, std::size_t T);
    // out row b*T+i = Σ_j attn[b*T+i][j] · v row b*T+j; per-sample attn·v.
    Var batched_av(Var attn, Var v, std::size_t T);
    Var softmax_rows(Var a);
    // Per-row layer norm over the last dimension; gamma/beta have C entries.
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
    // Exact (erf) GELU.
    Var gelu(Var a);
    // Inverted dropout; call only in train mode with rate > 0.
    Var dropout(Var a, double rate, SeededRng& rng);
    // [n*T, d] -> [n, d], mean over each sample's T token rows.
    Var mean_pool_rows(Var a, std::size_t T);
    // Mean softmax cross-entropy against integer labels; scalar output.
    Var cross_entropy(Var logits, const std::vector<int>& labels);
    // Scalar <w, a> with a fixed weight tensor (same element count as a).
    Var weighted_sum(Var a, Tensor w);

    /// Seed d(root)/d(root) = 1 and sweep the tape in reverse. Root must be
    /// scalar (size 1). Gradients accumulate into every node, leaves
    /// included; read them via grad().
    void backward(Var root);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&)> back;  // empty for leaves
    };
    std::vector<Node> nodes_;

    Var push(Tensor value, std::function<void(Tape&)> back);
    Tensor& grad_mut(std::size_t id) { return nodes_[id].grad; }
    const Tensor& val_grad(std::size_t id) const { return nodes_[id].grad; }
    const Tensor& val(std::size_t id) const { return nodes_[id].value; }
};

}  // namespace jps::ad
