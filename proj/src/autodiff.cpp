#include "jps/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "jps/errors.hpp"

namespace jps::ad {

namespace {

void require_2d(const Tensor& t, const char* what) {
    if (t.ndim() != 2) throw DimensionError(std::string(what) + " expects a 2-D tensor");
}

}  // namespace

Var Tape::push(Tensor value, std::function<void(Tape&)> back) {
    Node n;
    n.grad = Tensor::zeros(value.shape());
    n.value = std::move(value);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) { return push(std::move(value), {}); }

Var Tape::add(Var a, Var b) {
    const Tensor& av = val(a.id);
    const Tensor& bv = val(b.id);
    if (!av.same_shape(bv)) throw DimensionError("add shape mismatch");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    const std::size_t o = nodes_.size(), ai = a.id, bi = b.id;
    return push(std::move(out), [o, ai, bi](Tape& t) {
        const Tensor& g = t.val_grad(o);
        Tensor& ga = t.grad_mut(ai);
        Tensor& gb = t.grad_mut(bi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

Var Tape::add_rowvec(Var a, Var b) {
    const Tensor& av = val(a.id);
    const Tensor& bv = val(b.id);
    require_2d(av, "add_rowvec");
    const std::size_t R = av.dim(0), C = av.dim(1);
    if (bv.size() != C) throw DimensionError("add_rowvec vector length mismatch");
    Tensor out({R, C});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) out.at2(r, c) = av.at2(r, c) + bv[c];
    const std::size_t o = nodes_.size(), ai = a.id, bi = b.id;
    return push(std::move(out), [o, ai, bi, R, C](Tape& t) {
        const Tensor& g = t.val_grad(o);
        Tensor& ga = t.grad_mut(ai);
        Tensor& gb = t.grad_mut(bi);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                ga[r * C + c] += g[r * C + c];
                gb[c] += g[r * C + c];
            }
    });
}

Var Tape::add_tile_rows(Var a, Var p, std::size_t T) {
    const Tensor& av = val(a.id);
    const Tensor& pv = val(p.id);
    require_2d(av, "add_tile_rows");
    const std::size_t R = av.dim(0), C = av.dim(1);
    if (T == 0 || R % T != 0) throw DimensionError("add_tile_rows: rows not divisible by T");
    if (pv.size() != T * C) throw DimensionError("add_tile_rows: embedding size mismatch");
    Tensor out({R, C});
    for (std::size_t r = 0; r < R; ++r) {
        const std::size_t t0 = r % T;
        for (std::size_t c = 0; c < C; ++c) out.at2(r, c) = av.at2(r, c) + pv[t0 * C + c];
    }
    const std::size_t o = nodes_.size(), ai = a.id, pi = p.id;
    return push(std::move(out), [o, ai, pi, T, R, C](Tape& t) {
        const Tensor& g = t.val_grad(o);
        Tensor& ga = t.grad_mut(ai);
        Tensor& gp = t.grad_mut(pi);
        for (std::size_t r = 0; r < R; ++r) {
            const std::size_t t0 = r % T;
            for (std::size_t c = 0; c < C; ++c) {
                ga[r * C + c] += g[r * C + c];
                gp[t0 * C + c] += g[r * C + c];
            }
        }
    });
}

Var Tape::scale(Var a, double s) {
    const Tensor& av = val(a.id);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    const std::size_t o = nodes_.size(), ai = a.id;
    return push(std::move(out), [o, ai, s](Tape& t) {
        const Tensor& g = t.val_grad(o);
        Tensor& ga = t.grad_mut(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

Var Tape::matmul(Var a, Var b) {
    const Tensor& av = val(a.id);
    const Tensor& bv = val(b.id);
    Tensor out = jps::matmul(av, bv);
    const std::size_t o = nodes_.size(), ai = a.id, bi = b.id;
    const std::size_t P = av.dim(0), Q = av.dim(1), R = bv.dim(1);
    return push(std::move(out), [o, ai, bi, P, Q, R](Tape& t) {
        const Tensor& g = t.val_grad(o);      // [P,R]
        const Tensor& av2 = t.val(ai);        // [P,Q]
        const Tensor& bv2 = t.val(bi);        // [Q,R]
        Tensor& ga = t.grad_mut(ai);
        Tensor& gb = t.grad_mut(bi);
        // dA = G·Bᵀ ; dB = Aᵀ·G
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t r = 0; r < R; ++r) {
                const double gpr = g[p * R + r];
                if (gpr == 0.0) continue;
                for (std::size_t q = 0; q < Q; ++q) {
                    ga[p * Q + q] += gpr * bv2[q * R + r];
                    gb[q * R + r] += av2[p * Q + q] * gpr;
                }
            }
    });
}

Var Tape::batched_qkt(Var q, Var k, std::size_t T) {
    const Tensor& qv = val(q.id);
    const Tensor& kv = val(k.id);
    require_2d(qv, "batched_qkt");
    const std::size_t R = qv.dim(0), D = qv.dim(1);
    if (!qv.same_shape(kv)) throw DimensionError("batched_qkt shape mismatch");
    if (T == 0 || R % T != 0) throw DimensionError("batched_qkt: rows not divisible by T");
    const std::size_t n = R / T;
    Tensor out({R, T});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = 0; j < T; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < D; ++c)
                    s += qv.at2(b * T + i, c) * kv.at2(b * T + j, c);
                out.at2(b * T + i, j) = s;
            }
    const std::size_t o = nodes_.size(), qi = q.id, ki = k.id;
    return push(std::move(out), [o, qi, ki, T, n, D](Tape& t) {
        const Tensor& g = t.val_grad(o);  // [n*T, T]
        const Tensor& qv2 = t.val(qi);
        const Tensor& kv2 = t.val(ki);
        Tensor& gq = t.grad_mut(qi);
        Tensor& gk = t.grad_mut(ki);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t j = 0; j < T; ++j) {
                    const double gij = g[(b * T + i) * T + j];
                    if (gij == 0.0) continue;
                    for (std::size_t c = 0; c < D; ++c) {
                        gq[(b * T + i) * D + c] += gij * kv2[(b * T + j) * D + c];
                        gk[(b * T + j) * D + c] += gij * qv2[(b * T + i) * D + c];
                    }
                }
    });
}

Var Tape::batched_av(Var attn, Var v, std::size_t T) {
    const Tensor& av = val(attn.id);
    const Tensor& vv = val(v.id);
    require_2d(av, "batched_av");
    require_2d(vv, "batched_av");
    const std::size_t R = av.dim(0);
    if (av.dim(1) != T || R % T != 0 || vv.dim(0) != R)
        throw DimensionError("batched_av shape mismatch");
    const std::size_t n = R / T, D = vv.dim(1);
    Tensor out({R, D});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = 0; j < T; ++j) {
                const double w = av.at2(b * T + i, j);
                for (std::size_t c = 0; c < D; ++c)
                    out.at2(b * T + i, c) += w * vv.at2(b * T + j, c);
            }
    const std::size_t o = nodes_.size(), ai = attn.id, vi = v.id;
    return push(std::move(out), [o, ai, vi, T, n, D](Tape& t) {
        const Tensor& g = t.val_grad(o);  // [n*T, D]
        const Tensor& av2 = t.val(ai);
        const Tensor& vv2 = t.val(vi);
        Tensor& ga = t.grad_mut(ai);
        Tensor& gv = t.grad_mut(vi);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < T; ++i)
                for (std::size_t j = 0; j < T; ++j) {
                    double s = 0.0;
                    const double w = av2[(b * T + i) * T + j];
                    for (std::size_t c = 0; c < D; ++c) {
                        const double go = g[(b * T + i) * D + c];
                        s += go * vv2[(b * T + j) * D + c];
                        gv[(b * T + j) * D + c] += w * go;
                    }
                    ga[(b * T + i) * T + j] += s;
                }
    });
}

Var Tape::softmax_rows(Var a) {
    const Tensor& av = val(a.id);
    require_2d(av, "softmax_rows");
    const std::size_t R = av.dim(0), C = av.dim(1);
    Tensor out({R, C});
    for (std::size_t r = 0; r < R; ++r) {
        double mx = av.at2(r, 0);
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, av.at2(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double e = std::exp(av.at2(r, c) - mx);
            out.at2(r, c) = e;
            z += e;
        }
        for (std::size_t c = 0; c < C; ++c) out.at2(r, c) /= z;
    }
    const std::size_t o = nodes_.size(), ai = a.id;
    return push(std::move(out), [o, ai, R, C](Tape& t) {
        const Tensor& g = t.val_grad(o);
        const Tensor& y = t.val(o);
        Tensor& ga = t.grad_mut(ai);
        for (std::size_t r = 0; r < R; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < C; ++c) dot += g[r * C + c] * y[r * C + c];
            for (std::size_t c = 0; c < C; ++c)
                ga[r * C + c] += y[r * C + c] * (g[r * C + c] - dot);
        }
    });
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& xv = val(x.id);
    const Tensor& gv = val(gamma.id);
    const Tensor& bv = val(beta.id);
    require_2d(xv, "layer_norm");
    const std::size_t R = xv.dim(0), C = xv.dim(1);
    if (gv.size() != C || bv.size() != C) throw DimensionError("layer_norm gamma/beta size mismatch");
    Tensor out({R, C});
    // Keep the normalized activations and 1/std around for backward.
    auto xhat = std::make_shared<Tensor>(Tensor::zeros({R, C}));
    auto istd = std::make_shared<std::vector<double>>(R);
    for (std::size_t r = 0; r < R; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < C; ++c) mu += xv.at2(r, c);
        mu /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double d = xv.at2(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<double>(C);
        const double is = 1.0 / std::sqrt(var + eps);
        (*istd)[r] = is;
        for (std::size_t c = 0; c < C; ++c) {
            const double xh = (xv.at2(r, c) - mu) * is;
            xhat->at2(r, c) = xh;
            out.at2(r, c) = gv[c] * xh + bv[c];
        }
    }
    const std::size_t o = nodes_.size(), xi = x.id, gi = gamma.id, bi = beta.id;
    return push(std::move(out), [o, xi, gi, bi, R, C, xhat, istd](Tape& t) {
        const Tensor& g = t.val_grad(o);
        const Tensor& gv2 = t.val(gi);
        Tensor& gx = t.grad_mut(xi);
        Tensor& gg = t.grad_mut(gi);
        Tensor& gb = t.grad_mut(bi);
        for (std::size_t r = 0; r < R; ++r) {
            // dxhat = g ⊙ gamma; dx = istd·(dxhat − mean(dxhat) − xhat·mean(dxhat⊙xhat))
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const double dxh = g[r * C + c] * gv2[c];
                m1 += dxh;
                m2 += dxh * xhat->at2(r, c);
            }
            m1 /= static_cast<double>(C);
            m2 /= static_cast<double>(C);
            for (std::size_t c = 0; c < C; ++c) {
                const double go = g[r * C + c];
                const double xh = xhat->at2(r, c);
                gg[c] += go * xh;
                gb[c] += go;
                gx[r * C + c] += (*istd)[r] * (go * gv2[c] - m1 - xh * m2);
            }
        }
    });
}

Var Tape::gelu(Var a) {
    const Tensor& av = val(a.id);
    Tensor out(av.shape());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * inv_sqrt2));
    const std::size_t o = nodes_.size(), ai = a.id;
    return push(std::move(out), [o, ai](Tape& t) {
        const Tensor& g = t.val_grad(o);
        const Tensor& xv = t.val(ai);
        Tensor& ga = t.grad_mut(ai);
        constexpr double is2 = 0.7071067811865475244;
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = xv[i];
            const double d =
                0.5 * (1.0 + std::erf(x * is2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
            ga[i] += g[i] * d;
        }
    });
}

Var Tape::dropout(Var a, double rate, SeededRng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ValidationError("dropout rate must be in [0,1)");
    const Tensor& av = val(a.id);
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(av.size());
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double m = (rng.next_double() >= rate) ? (1.0 / keep) : 0.0;
        (*mask)[i] = m;
        out[i] = av[i] * m;
    }
    const std::size_t o = nodes_.size(), ai = a.id;
    return push(std::move(out), [o, ai, mask](Tape& t) {
        const Tensor& g = t.val_grad(o);
        Tensor& ga = t.grad_mut(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*mask)[i];
    });
}

Var Tape::mean_pool_rows(Var a, std::size_t T) {
    const Tensor& av = val(a.id);
    require_2d(av, "mean_pool_rows");
    const std::size_t R = av.dim(0), C = av.dim(1);
    if (T == 0 || R % T != 0) throw DimensionError("mean_pool_rows: rows not divisible by T");
    const std::size_t n = R / T;
    Tensor out({n, C});
    const double invT = 1.0 / static_cast<double>(T);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t t0 = 0; t0 < T; ++t0)
            for (std::size_t c = 0; c < C; ++c)
                out.at2(b, c) += av.at2(b * T + t0, c) * invT;
    const std::size_t o = nodes_.size(), ai = a.id;
    return push(std::move(out), [o, ai, T, n, C, invT](Tape& t) {
        const Tensor& g = t.val_grad(o);
        Tensor& ga = t.grad_mut(ai);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t t0 = 0; t0 < T; ++t0)
                for (std::size_t c = 0; c < C; ++c)
                    ga[(b * T + t0) * C + c] += g[b * C + c] * invT;
    });
}

Var Tape::cross_entropy(Var logits, const std::vector<int>& labels) {
    const Tensor& lv = val(logits.id);
    require_2d(lv, "cross_entropy");
    const std::size_t R = lv.dim(0), C = lv.dim(1);
    if (labels.size() != R) throw DimensionError("cross_entropy label count mismatch");
    auto probs = std::make_shared<Tensor>(Tensor::zeros({R, C}));
    double total = 0.0;
    for (std::size_t r = 0; r < R; ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw ValidationError("cross_entropy label out of range");
        double mx = lv.at2(r, 0);
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, lv.at2(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(lv.at2(r, c) - mx);
        const double lse = mx + std::log(z);
        total += lse - lv.at2(r, static_cast<std::size_t>(y));
        for (std::size_t c = 0; c < C; ++c)
            probs->at2(r, c) = std::exp(lv.at2(r, c) - lse);
    }
    Tensor out({1}, {total / static_cast<double>(R)});
    const std::size_t o = nodes_.size(), li = logits.id;
    auto labs = std::make_shared<std::vector<int>>(labels);
    return push(std::move(out), [o, li, R, C, probs, labs](Tape& t) {
        const double gs = t.val_grad(o)[0];
        Tensor& gl = t.grad_mut(li);
        const double invR = 1.0 / static_cast<double>(R);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const double onehot = (static_cast<std::size_t>((*labs)[r]) == c) ? 1.0 : 0.0;
                gl[r * C + c] += gs * invR * (probs->at2(r, c) - onehot);
            }
    });
}

Var Tape::weighted_sum(Var a, Tensor w) {
    const Tensor& av = val(a.id);
    if (w.size() != av.size()) throw DimensionError("weighted_sum size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * av[i];
    auto wp = std::make_shared<Tensor>(std::move(w));
    const std::size_t o = nodes_.size(), ai = a.id;
    return push(Tensor({1}, {s}), [o, ai, wp](Tape& t) {
        const double gs = t.val_grad(o)[0];
        Tensor& ga = t.grad_mut(ai);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gs * (*wp)[i];
    });
}

void Tape::backward(Var root) {
    Node& r = nodes_.at(root.id);
    if (r.value.size() != 1) throw DimensionError("backward root must be scalar");
    r.grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (nodes_[i].back) nodes_[i].back(*this);
    }
}

}  // namespace jps::ad
