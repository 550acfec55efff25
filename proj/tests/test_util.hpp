#pragma once

// Shared helpers for the test suite: deterministic tensor builders and a
// central-difference gradient checker for tape-built graphs.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "patchcast/autograd.hpp"
#include "patchcast/layers.hpp"
#include "patchcast/params.hpp"
#include "patchcast/rng.hpp"
#include "patchcast/tensor.hpp"

namespace testutil {

using patchcast::Rng;
using patchcast::Tensor;
namespace nn = patchcast::nn;

// scalar = sum_i c_i * y_i with fixed random coefficients, realized as a
// 1 x numel linear map so the reduction itself is part of the graph
inline nn::Node* weighted_sum(nn::Tape& tape, nn::Node* y, const Tensor& coeffs) {
    nn::Node* flat = tape.reshape(y, {1, y->val.numel()});
    nn::Node* w = tape.constant(coeffs.reshaped({1, coeffs.numel()}));
    return tape.linear(flat, w, nullptr);
}

// Central finite differences against the tape's analytic gradients. `build`
// maps (tape, leaves) to a scalar node and must be a pure function of the
// leaf values. Returns the worst relative error across all input elements.
template <typename Build>
double gradcheck(const std::vector<Tensor>& inputs, Build build, double h = 1e-4) {
    nn::Tape tape;
    std::vector<nn::Node*> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    nn::Node* loss = build(tape, leaves);
    if (loss->val.numel() != 1) throw std::runtime_error("gradcheck: non-scalar loss");
    tape.backward(loss);

    auto value_at = [&](const std::vector<Tensor>& xs) {
        nn::Tape t2;
        std::vector<nn::Node*> ls;
        for (const auto& x : xs) ls.push_back(t2.leaf(x, false));
        return build(t2, ls)->val[0];
    };

    double worst = 0.0;
    std::vector<Tensor> xs = inputs;
    for (std::size_t ti = 0; ti < xs.size(); ++ti)
        for (std::size_t i = 0; i < xs[ti].numel(); ++i) {
            const double orig = xs[ti][i];
            xs[ti][i] = orig + h;
            const double fp = value_at(xs);
            xs[ti][i] = orig - h;
            const double fm = value_at(xs);
            xs[ti][i] = orig;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = leaves[ti]->grad[i];
            const double rel =
                std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            worst = std::max(worst, rel);
        }
    return worst;
}

// Same check, but driven through a ParamStore + Leaves binding so layer and
// model classes can be exercised exactly as training does. `fwd` maps
// (tape, leaves) to a scalar node; every trainable tensor is perturbed.
template <typename Fwd>
double gradcheck_params(patchcast::nn::ParamStore& ps, Fwd fwd, double h = 1e-4) {
    nn::Tape tape;
    nn::Leaves lv(tape, ps);
    nn::Node* loss = fwd(tape, lv);
    if (loss->val.numel() != 1) throw std::runtime_error("gradcheck_params: non-scalar loss");
    tape.backward(loss);
    const auto grads = lv.grads();

    auto value = [&]() {
        nn::Tape t;
        nn::Leaves l(t, ps);
        return fwd(t, l)->val[0];
    };

    double worst = 0.0;
    for (const auto& [name, g] : grads) {
        Tensor& w = ps.at(name);
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const double orig = w[i];
            w[i] = orig + h;
            const double fp = value();
            w[i] = orig - h;
            const double fm = value();
            w[i] = orig;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = g[i];
            const double rel =
                std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

inline double min_abs(const Tensor& t) {
    double m = 1e300;
    for (double v : t.vec()) m = std::min(m, std::abs(v));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// fresh scratch directory under the system temp root
inline std::string scratch_dir(const std::string& tag) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / ("patchcast_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

}  // namespace testutil
