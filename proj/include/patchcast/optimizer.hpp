#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "patchcast/errors.hpp"
#include "patchcast/params.hpp"
#include "patchcast/tensor.hpp"

namespace patchcast::train {

// pinball loss: (tau - 1{y < yhat})(y - yhat); subgradient 0 at y == yhat
inline double quantile_loss(double y, double yhat, double tau) {
    const double ind = y < yhat ? 1.0 : 0.0;
    return (tau - ind) * (y - yhat);
}

// sum over batch rows, horizons, and quantiles
inline double batch_loss(const Tensor& grid, const Tensor& labels,
                         const std::vector<double>& quantiles) {
    if (grid.rank() != 3 || labels.rank() != 2 || grid.dim(0) != labels.dim(0) ||
        grid.dim(1) != labels.dim(1) || grid.dim(2) != quantiles.size())
        throw ShapeError("batch_loss: grid/labels/quantile shapes disagree");
    double total = 0.0;
    for (std::size_t b = 0; b < grid.dim(0); ++b)
        for (std::size_t h = 0; h < grid.dim(1); ++h)
            for (std::size_t q = 0; q < quantiles.size(); ++q)
                total += quantile_loss(labels.at2(b, h), grid.at3(b, h, q), quantiles[q]);
    return total;
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // global-norm clip; <= 0 disables
};

struct AdamState {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    std::size_t step = 0;
};

// Standard Adam with bias correction over the trainable tensors named in
// `grads`. Non-trainable tensors are never touched. Optional global-norm
// clipping is applied to the whole gradient set before the moment update.
inline void adam_step(nn::ParamStore& ps, std::map<std::string, Tensor>& grads,
                      AdamState& state, const AdamConfig& cfg) {
    // gradients of frozen tensors may have been computed; discard them here
    for (auto it = grads.begin(); it != grads.end();)
        it = ps.trainable(it->first) ? std::next(it) : grads.erase(it);
    for (const auto& [name, g] : grads)
        if (!g.all_finite()) throw TrainingError("NaN gradient in tensor " + name);
    if (cfg.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& [name, g] : grads)
            for (double v : g.vec()) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) {
            const double scale = cfg.clip_norm / norm;
            for (auto& [name, g] : grads)
                for (double& v : g.vec()) v *= scale;
        }
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (auto& [name, g] : grads) {
        Tensor& w = ps.at(name);
        auto& m = state.m.try_emplace(name, Tensor(w.shape())).first->second;
        auto& v = state.v.try_emplace(name, Tensor(w.shape())).first->second;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

}  // namespace patchcast::train
