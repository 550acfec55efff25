#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "patchcast/errors.hpp"
#include "patchcast/tensor.hpp"

namespace patchcast::nn {

// One recorded value in the computation graph. Gradients are accumulated
// into `grad` during the reverse sweep.
struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    std::function<void()> backward;  // empty for leaves
};

enum class Mask { None, Causal };

// Records every executed op so that exact gradients of a scalar loss can be
// propagated to all leaves. Nodes live for the lifetime of the tape; op
// closures capture raw node pointers.
class Tape {
public:
    Node* leaf(Tensor value, bool requires_grad) {
        return make(std::move(value), requires_grad);
    }

    Node* constant(Tensor value) { return make(std::move(value), false); }

    // y = x W^T + b, applied to the last axis. W: k_out x k_in, b: k_out.
    Node* linear(Node* x, Node* w, Node* b) {
        const std::size_t k_in = w->val.dim(1);
        const std::size_t k_out = w->val.dim(0);
        if (x->val.shape().back() != k_in)
            throw ShapeError("linear: input width " + std::to_string(x->val.shape().back()) +
                             " != weight k_in " + std::to_string(k_in));
        if (b && b->val.numel() != k_out) throw ShapeError("linear: bias width mismatch");
        const std::size_t rows = x->val.numel() / k_in;

        auto out_shape = x->val.shape();
        out_shape.back() = k_out;
        Tensor y(out_shape);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = x->val.data() + r * k_in;
            double* yr = y.data() + r * k_out;
            for (std::size_t o = 0; o < k_out; ++o) {
                const double* wo = w->val.data() + o * k_in;
                double acc = b ? b->val[o] : 0.0;
                for (std::size_t i = 0; i < k_in; ++i) acc += xr[i] * wo[i];
                yr[o] = acc;
            }
        }
        Node* out = make(std::move(y), x->requires_grad || w->requires_grad ||
                                           (b && b->requires_grad));
        if (!out->requires_grad) return out;
        out->backward = [x, w, b, out, rows, k_in, k_out] {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gy = out->grad.data() + r * k_out;
                const double* xr = x->val.data() + r * k_in;
                if (x->requires_grad) {
                    double* gx = x->grad.data() + r * k_in;
                    for (std::size_t o = 0; o < k_out; ++o) {
                        const double* wo = w->val.data() + o * k_in;
                        const double g = gy[o];
                        for (std::size_t i = 0; i < k_in; ++i) gx[i] += g * wo[i];
                    }
                }
                if (w->requires_grad) {
                    for (std::size_t o = 0; o < k_out; ++o) {
                        double* gw = w->grad.data() + o * k_in;
                        const double g = gy[o];
                        for (std::size_t i = 0; i < k_in; ++i) gw[i] += g * xr[i];
                    }
                }
                if (b && b->requires_grad)
                    for (std::size_t o = 0; o < k_out; ++o) b->grad[o] += gy[o];
            }
        };
        return out;
    }

    Node* add(Node* a, Node* b) {
        if (!a->val.same_shape(b->val)) throw ShapeError("add: shape mismatch");
        Tensor y = a->val;
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b->val[i];
        Node* out = make(std::move(y), a->requires_grad || b->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [a, b, out] {
            for (std::size_t i = 0; i < out->grad.numel(); ++i) {
                if (a->requires_grad) a->grad[i] += out->grad[i];
                if (b->requires_grad) b->grad[i] += out->grad[i];
            }
        };
        return out;
    }

    // x: B x T x k, table: T_max x k with T <= T_max; adds table[t] to x[b,t].
    Node* add_positional(Node* x, Node* table) {
        if (x->val.rank() != 3 || table->val.rank() != 2 ||
            x->val.dim(2) != table->val.dim(1) || x->val.dim(1) > table->val.dim(0))
            throw ShapeError("add_positional: table too short or width mismatch");
        const std::size_t B = x->val.dim(0), T = x->val.dim(1), k = x->val.dim(2);
        Tensor y = x->val;
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t c = 0; c < k; ++c) y.at3(bi, t, c) += table->val.at2(t, c);
        Node* out = make(std::move(y), x->requires_grad || table->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [x, table, out, B, T, k] {
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t c = 0; c < k; ++c) {
                        const double g = out->grad.at3(bi, t, c);
                        if (x->requires_grad) x->grad.at3(bi, t, c) += g;
                        if (table->requires_grad) table->grad.at2(t, c) += g;
                    }
        };
        return out;
    }

    Node* relu(Node* x) {
        Tensor y = x->val;
        for (auto& v : y.vec()) v = v > 0.0 ? v : 0.0;
        Node* out = make(std::move(y), x->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [x, out] {
            for (std::size_t i = 0; i < out->grad.numel(); ++i)
                if (x->val[i] > 0.0) x->grad[i] += out->grad[i];
        };
        return out;
    }

    // exact (erf-based) GELU
    Node* gelu(Node* x) {
        Tensor y = x->val;
        for (auto& v : y.vec()) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
        Node* out = make(std::move(y), x->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [x, out] {
            for (std::size_t i = 0; i < out->grad.numel(); ++i) {
                const double v = x->val[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
                const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
                x->grad[i] += out->grad[i] * (cdf + v * pdf);
            }
        };
        return out;
    }

    // y = expm1(x), used to map log1p-scale forecasts back to demand units
    Node* expm1(Node* x) {
        Tensor y = x->val;
        for (auto& v : y.vec()) v = std::expm1(v);
        Node* out = make(std::move(y), x->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [x, out] {
            for (std::size_t i = 0; i < out->grad.numel(); ++i)
                x->grad[i] += out->grad[i] * std::exp(x->val[i]);
        };
        return out;
    }

    // Normalizes the last axis to zero mean / unit variance (eps = 1e-5),
    // then applies scale gamma and shift beta.
    Node* layer_norm(Node* x, Node* gamma, Node* beta, double eps = 1e-5) {
        const std::size_t k = x->val.shape().back();
        if (gamma->val.numel() != k || beta->val.numel() != k)
            throw ShapeError("layer_norm: gamma/beta width mismatch");
        const std::size_t rows = x->val.numel() / k;
        Tensor y(x->val.shape());
        auto xhat = std::make_shared<Tensor>(x->val.shape());
        auto inv_std = std::make_shared<std::vector<double>>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = x->val.data() + r * k;
            double mu = 0.0;
            for (std::size_t i = 0; i < k; ++i) mu += xr[i];
            mu /= static_cast<double>(k);
            double var = 0.0;
            for (std::size_t i = 0; i < k; ++i) var += (xr[i] - mu) * (xr[i] - mu);
            var /= static_cast<double>(k);
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[r] = is;
            for (std::size_t i = 0; i < k; ++i) {
                const double xh = (xr[i] - mu) * is;
                (*xhat)[r * k + i] = xh;
                y[r * k + i] = gamma->val[i] * xh + beta->val[i];
            }
        }
        Node* out = make(std::move(y), x->requires_grad || gamma->requires_grad ||
                                           beta->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [x, gamma, beta, out, xhat, inv_std, rows, k] {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gy = out->grad.data() + r * k;
                const double* xh = xhat->data() + r * k;
                if (gamma->requires_grad || beta->requires_grad)
                    for (std::size_t i = 0; i < k; ++i) {
                        if (gamma->requires_grad) gamma->grad[i] += gy[i] * xh[i];
                        if (beta->requires_grad) beta->grad[i] += gy[i];
                    }
                if (x->requires_grad) {
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (std::size_t i = 0; i < k; ++i) {
                        const double g = gy[i] * gamma->val[i];
                        sum_g += g;
                        sum_gx += g * xh[i];
                    }
                    const double inv_k = 1.0 / static_cast<double>(k);
                    for (std::size_t i = 0; i < k; ++i) {
                        const double g = gy[i] * gamma->val[i];
                        x->grad[r * k + i] +=
                            (*inv_std)[r] * (g - inv_k * sum_g - xh[i] * inv_k * sum_gx);
                    }
                }
            }
        };
        return out;
    }

    // Fused multi-head scaled dot-product attention over already-projected
    // Q, K, V (each B x p x d, d divisible by heads). Causal masking forbids
    // key index > query index and requires p_q == p_kv.
    Node* attention(Node* q, Node* k, Node* v, std::size_t heads, Mask mask) {
        if (q->val.rank() != 3 || k->val.rank() != 3 || v->val.rank() != 3)
            throw ShapeError("attention: expected rank-3 inputs");
        const std::size_t B = q->val.dim(0), pq = q->val.dim(1), d = q->val.dim(2);
        const std::size_t pk = k->val.dim(1);
        if (k->val.dim(0) != B || v->val.dim(0) != B || v->val.dim(1) != pk ||
            k->val.dim(2) != d || v->val.dim(2) != d)
            throw ShapeError("attention: Q/K/V shape mismatch");
        if (d % heads != 0) throw ConfigError("attention: d not divisible by heads");
        if (mask == Mask::Causal && pq != pk)
            throw ShapeError("attention: causal mask requires square scores");
        const std::size_t dk = d / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

        auto probs = std::make_shared<Tensor>(std::vector<std::size_t>{B, heads, pq, pk});
        Tensor y({B, pq, d});
        std::vector<double> row(pk);
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * dk;
                for (std::size_t i = 0; i < pq; ++i) {
                    const std::size_t limit = (mask == Mask::Causal) ? i + 1 : pk;
                    double max_s = -1e300;
                    for (std::size_t j = 0; j < limit; ++j) {
                        double s = 0.0;
                        const double* qr = q->val.data() + (bi * pq + i) * d + off;
                        const double* kr = k->val.data() + (bi * pk + j) * d + off;
                        for (std::size_t c = 0; c < dk; ++c) s += qr[c] * kr[c];
                        row[j] = s * scale;
                        max_s = std::max(max_s, row[j]);
                    }
                    double denom = 0.0;
                    for (std::size_t j = 0; j < limit; ++j) {
                        row[j] = std::exp(row[j] - max_s);
                        denom += row[j];
                    }
                    double* pr = probs->data() + ((bi * heads + h) * pq + i) * pk;
                    for (std::size_t j = 0; j < pk; ++j)
                        pr[j] = (j < limit) ? row[j] / denom : 0.0;
                    double* yr = y.data() + (bi * pq + i) * d + off;
                    for (std::size_t c = 0; c < dk; ++c) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < limit; ++j)
                            acc += pr[j] * v->val[(bi * pk + j) * d + off + c];
                        yr[c] = acc;
                    }
                }
            }
        Node* out = make(std::move(y), q->requires_grad || k->requires_grad ||
                                           v->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [q, k, v, out, probs, B, pq, pk, d, dk, heads, scale] {
            std::vector<double> dA(pk), dS(pk);
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = h * dk;
                    for (std::size_t i = 0; i < pq; ++i) {
                        const double* pr = probs->data() + ((bi * heads + h) * pq + i) * pk;
                        const double* gy = out->grad.data() + (bi * pq + i) * d + off;
                        // dV and dA
                        for (std::size_t j = 0; j < pk; ++j) {
                            double acc = 0.0;
                            const double* vr = v->val.data() + (bi * pk + j) * d + off;
                            double* gv = v->grad.data() + (bi * pk + j) * d + off;
                            for (std::size_t c = 0; c < dk; ++c) {
                                acc += gy[c] * vr[c];
                                if (v->requires_grad) gv[c] += pr[j] * gy[c];
                            }
                            dA[j] = acc;
                        }
                        // softmax backward
                        double dot = 0.0;
                        for (std::size_t j = 0; j < pk; ++j) dot += dA[j] * pr[j];
                        for (std::size_t j = 0; j < pk; ++j) dS[j] = pr[j] * (dA[j] - dot);
                        // dQ, dK
                        const double* qr = q->val.data() + (bi * pq + i) * d + off;
                        double* gq = q->grad.data() + (bi * pq + i) * d + off;
                        for (std::size_t j = 0; j < pk; ++j) {
                            if (dS[j] == 0.0) continue;
                            const double g = dS[j] * scale;
                            const double* kr = k->val.data() + (bi * pk + j) * d + off;
                            double* gk = k->grad.data() + (bi * pk + j) * d + off;
                            for (std::size_t c = 0; c < dk; ++c) {
                                if (q->requires_grad) gq[c] += g * kr[c];
                                if (k->requires_grad) gk[c] += g * qr[c];
                            }
                        }
                    }
                }
        };
        return out;
    }

    // Dilated causal 1-D convolution. x: B x C x d_in, weight: k_c x d_in x
    // d_out, bias: d_out. Output time t sees inputs at t, t-dil, ...,
    // t-(k_c-1)*dil with out-of-range taps reading zero.
    Node* conv1d_causal(Node* x, Node* w, Node* b, std::size_t dilation) {
        if (x->val.rank() != 3 || w->val.rank() != 3)
            throw ShapeError("conv1d: expected rank-3 input and weight");
        const std::size_t B = x->val.dim(0), C = x->val.dim(1), din = x->val.dim(2);
        const std::size_t kc = w->val.dim(0), dout = w->val.dim(2);
        if (w->val.dim(1) != din) throw ShapeError("conv1d: channel mismatch");
        if (dilation < 1) throw ConfigError("conv1d: dilation must be >= 1");
        Tensor y({B, C, dout});
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t t = 0; t < C; ++t)
                for (std::size_t o = 0; o < dout; ++o) {
                    double acc = b ? b->val[o] : 0.0;
                    for (std::size_t j = 0; j < kc; ++j) {
                        const std::size_t back = (kc - 1 - j) * dilation;
                        if (back > t) continue;
                        const std::size_t src = t - back;
                        for (std::size_t i = 0; i < din; ++i)
                            acc += x->val.at3(bi, src, i) * w->val.at3(j, i, o);
                    }
                    y.at3(bi, t, o) = acc;
                }
        Node* out = make(std::move(y), x->requires_grad || w->requires_grad ||
                                           (b && b->requires_grad));
        if (!out->requires_grad) return out;
        out->backward = [x, w, b, out, B, C, din, dout, kc, dilation] {
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t t = 0; t < C; ++t)
                    for (std::size_t o = 0; o < dout; ++o) {
                        const double g = out->grad.at3(bi, t, o);
                        if (g == 0.0) continue;
                        if (b && b->requires_grad) b->grad[o] += g;
                        for (std::size_t j = 0; j < kc; ++j) {
                            const std::size_t back = (kc - 1 - j) * dilation;
                            if (back > t) continue;
                            const std::size_t src = t - back;
                            for (std::size_t i = 0; i < din; ++i) {
                                if (w->requires_grad)
                                    w->grad.at3(j, i, o) += g * x->val.at3(bi, src, i);
                                if (x->requires_grad)
                                    x->grad.at3(bi, src, i) += g * w->val.at3(j, i, o);
                            }
                        }
                    }
        };
        return out;
    }

    // free-view reshape
    Node* reshape(Node* x, std::vector<std::size_t> shape) {
        Tensor y = x->val.reshaped(std::move(shape));
        Node* out = make(std::move(y), x->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [x, out] {
            for (std::size_t i = 0; i < out->grad.numel(); ++i) x->grad[i] += out->grad[i];
        };
        return out;
    }

    // concatenate along the last axis; leading shapes must agree
    Node* concat_last(Node* a, Node* b) {
        auto sa = a->val.shape(), sb = b->val.shape();
        if (sa.size() != sb.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i + 1 < sa.size(); ++i)
            if (sa[i] != sb[i]) throw ShapeError("concat: leading shape mismatch");
        const std::size_t ka = sa.back(), kb = sb.back();
        const std::size_t rows = a->val.numel() / ka;
        auto out_shape = sa;
        out_shape.back() = ka + kb;
        Tensor y(out_shape);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < ka; ++i) y[r * (ka + kb) + i] = a->val[r * ka + i];
            for (std::size_t i = 0; i < kb; ++i)
                y[r * (ka + kb) + ka + i] = b->val[r * kb + i];
        }
        Node* out = make(std::move(y), a->requires_grad || b->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [a, b, out, rows, ka, kb] {
            for (std::size_t r = 0; r < rows; ++r) {
                if (a->requires_grad)
                    for (std::size_t i = 0; i < ka; ++i)
                        a->grad[r * ka + i] += out->grad[r * (ka + kb) + i];
                if (b->requires_grad)
                    for (std::size_t i = 0; i < kb; ++i)
                        b->grad[r * kb + i] += out->grad[r * (ka + kb) + ka + i];
            }
        };
        return out;
    }

    // x: B x p x k -> B x C x k, position t' taking patch min(t'/stride, p-1)
    Node* expand_patches(Node* x, std::size_t C, std::size_t stride) {
        if (x->val.rank() != 3) throw ShapeError("expand_patches: expected rank-3 input");
        const std::size_t B = x->val.dim(0), p = x->val.dim(1), k = x->val.dim(2);
        Tensor y({B, C, k});
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t t = 0; t < C; ++t) {
                const std::size_t j = std::min(t / stride, p - 1);
                for (std::size_t c = 0; c < k; ++c) y.at3(bi, t, c) = x->val.at3(bi, j, c);
            }
        Node* out = make(std::move(y), x->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [x, out, B, C, p, k, stride] {
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t t = 0; t < C; ++t) {
                    const std::size_t j = std::min(t / stride, p - 1);
                    for (std::size_t c = 0; c < k; ++c)
                        x->grad.at3(bi, j, c) += out->grad.at3(bi, t, c);
                }
        };
        return out;
    }

    // x: B x T x k -> B x k, picking one time index
    Node* select_time(Node* x, std::size_t t) {
        if (x->val.rank() != 3 || t >= x->val.dim(1))
            throw ShapeError("select_time: index out of range");
        const std::size_t B = x->val.dim(0), k = x->val.dim(2);
        Tensor y({B, k});
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t c = 0; c < k; ++c) y.at2(bi, c) = x->val.at3(bi, t, c);
        Node* out = make(std::move(y), x->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [x, out, B, k, t] {
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t c = 0; c < k; ++c)
                    x->grad.at3(bi, t, c) += out->grad.at2(bi, c);
        };
        return out;
    }

    // token lookup: table V x d, ids flattened length n -> n x d
    Node* embed_tokens(Node* table, const std::vector<std::size_t>& ids) {
        const std::size_t V = table->val.dim(0), d = table->val.dim(1);
        Tensor y({ids.size(), d});
        for (std::size_t r = 0; r < ids.size(); ++r) {
            if (ids[r] >= V) throw ConfigError("embed_tokens: id out of range");
            for (std::size_t c = 0; c < d; ++c) y.at2(r, c) = table->val.at2(ids[r], c);
        }
        Node* out = make(std::move(y), table->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [table, out, ids, d] {
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (std::size_t c = 0; c < d; ++c)
                    table->grad.at2(ids[r], c) += out->grad.at2(r, c);
        };
        return out;
    }

    // mean softmax cross entropy of logits (n x V) against integer targets
    Node* softmax_xent(Node* logits, const std::vector<std::size_t>& targets) {
        const std::size_t n = logits->val.dim(0), V = logits->val.dim(1);
        if (targets.size() != n) throw ShapeError("softmax_xent: target count mismatch");
        auto probs = std::make_shared<Tensor>(std::vector<std::size_t>{n, V});
        double loss = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            const double* lr = logits->val.data() + r * V;
            double mx = lr[0];
            for (std::size_t c = 1; c < V; ++c) mx = std::max(mx, lr[c]);
            double denom = 0.0;
            for (std::size_t c = 0; c < V; ++c) denom += std::exp(lr[c] - mx);
            for (std::size_t c = 0; c < V; ++c)
                probs->at2(r, c) = std::exp(lr[c] - mx) / denom;
            loss -= std::log(std::max(probs->at2(r, targets[r]), 1e-300));
        }
        loss /= static_cast<double>(n);
        Node* out = make(Tensor({1}, {loss}), logits->requires_grad);
        if (!out->requires_grad) return out;
        out->backward = [logits, out, probs, targets, n, V] {
            const double g = out->grad[0] / static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < V; ++c)
                    logits->grad.at2(r, c) +=
                        g * (probs->at2(r, c) - (c == targets[r] ? 1.0 : 0.0));
        };
        return out;
    }

    // Summed pinball loss over a forecast grid. pred and labels are B x H x
    // |Q| and B x H; quantile q applies to the last axis.
    Node* quantile_loss_sum(Node* pred, const Tensor& labels,
                            const std::vector<double>& quantiles) {
        const std::size_t B = pred->val.dim(0), H = pred->val.dim(1), Q = pred->val.dim(2);
        if (labels.rank() != 2 || labels.dim(0) != B || labels.dim(1) != H)
            throw ShapeError("quantile_loss_sum: label shape mismatch");
        if (quantiles.size() != Q) throw ShapeError("quantile_loss_sum: quantile count mismatch");
        double loss = 0.0;
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t h = 0; h < H; ++h) {
                const double y = labels.at2(bi, h);
                for (std::size_t qi = 0; qi < Q; ++qi) {
                    const double yhat = pred->val.at3(bi, h, qi);
                    const double ind = y < yhat ? 1.0 : 0.0;
                    loss += (quantiles[qi] - ind) * (y - yhat);
                }
            }
        Node* out = make(Tensor({1}, {loss}), pred->requires_grad);
        if (!out->requires_grad) return out;
        Tensor lab = labels;
        out->backward = [pred, out, lab, quantiles, B, H, Q] {
            const double g = out->grad[0];
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t h = 0; h < H; ++h) {
                    const double y = lab.at2(bi, h);
                    for (std::size_t qi = 0; qi < Q; ++qi) {
                        const double yhat = pred->val.at3(bi, h, qi);
                        // subgradient 0 at y == yhat
                        if (y == yhat) continue;
                        const double ind = y < yhat ? 1.0 : 0.0;
                        pred->grad.at3(bi, h, qi) += g * (ind - quantiles[qi]);
                    }
                }
        };
        return out;
    }

    // Reverse sweep from a scalar loss node.
    void backward(Node* loss) {
        if (loss->val.numel() != 1) throw ShapeError("backward: loss must be scalar");
        loss->grad.fill(0.0);
        loss->grad[0] = 1.0;
        bool seen = false;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node* n = it->get();
            if (n == loss) seen = true;
            if (!seen || !n->requires_grad || !n->backward) continue;
            n->backward();
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    Node* make(Tensor value, bool requires_grad) {
        auto node = std::make_unique<Node>();
        node->val = std::move(value);
        node->requires_grad = requires_grad;
        node->grad = Tensor(node->val.shape());
        nodes_.push_back(std::move(node));
        return nodes_.back().get();
    }

    std::deque<std::unique_ptr<Node>> nodes_;
};

}  // namespace patchcast::nn
