#pragma once

#include <cstddef>
#include <string>

#include "patchcast/autograd.hpp"
#include "patchcast/layers.hpp"
#include "patchcast/tensor.hpp"

namespace patchcast {

struct PatchConfig {
    std::size_t window = 12;
    std::size_t stride = 6;
    // Pads with the series' initial values instead of zeros. Off by default;
    // the block definition pads with zeros.
    bool repeat_pad = false;

    void validate() const {
        if (stride < 1 || stride > window)
            throw ConfigError("patch config requires 1 <= stride <= window");
    }
};

// p = floor((C + s - w)/s) + 1
inline std::size_t num_patches(std::size_t C, const PatchConfig& cfg) {
    cfg.validate();
    if (C + cfg.stride < cfg.window)
        throw ShapeError("context too short: C + s < w");
    return (C + cfg.stride - cfg.window) / cfg.stride + 1;
}

// B x p x w(d+m) patches; each row is one window flattened time-major then
// feature-major, features ordered time-varying first, statics last.
struct PatchedTensor {
    Tensor patches;
    std::size_t p = 0;
    std::size_t B = 0, C = 0, d = 0, m = 0;
};

// Concat statics onto every time step, left-pad the time axis by `stride`
// positions, cut strided windows of length `window`, and flatten each.
inline PatchedTensor multivariate_patch(const Tensor& time_feats, const Tensor& statics,
                                        const PatchConfig& cfg) {
    if (time_feats.rank() != 3) throw ShapeError("multivariate_patch: time_feats must be B x C x d");
    if (statics.rank() != 2) throw ShapeError("multivariate_patch: statics must be B x m");
    const std::size_t B = time_feats.dim(0), C = time_feats.dim(1), d = time_feats.dim(2);
    const std::size_t m = statics.dim(1);
    if (statics.dim(0) != B) throw ShapeError("multivariate_patch: batch mismatch");
    const std::size_t p = num_patches(C, cfg);
    const std::size_t w = cfg.window, s = cfg.stride, width = d + m;

    PatchedTensor out;
    out.p = p;
    out.B = B;
    out.C = C;
    out.d = d;
    out.m = m;
    out.patches = Tensor({B, p, w * width});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < p; ++j)
            for (std::size_t t = 0; t < w; ++t) {
                const std::size_t q = j * s + t;  // padded position
                double* row = out.patches.data() + (b * p + j) * (w * width) + t * width;
                if (q < s && !cfg.repeat_pad) continue;  // zero padding
                const std::size_t src = q < s ? 0 : q - s;
                for (std::size_t f = 0; f < d; ++f) row[f] = time_feats.at3(b, src, f);
                for (std::size_t f = 0; f < m; ++f) row[d + f] = statics.at2(b, f);
            }
    return out;
}

// Expands B x p x k patch values back to series length C: position t'
// receives the value of the last patch whose padded window covers it,
// i.e. patch min(floor(t'/s), p-1).
inline Tensor expand_to_series(const Tensor& values, std::size_t C, const PatchConfig& cfg) {
    if (values.rank() != 3) throw ShapeError("expand_to_series: expected B x p x k");
    const std::size_t B = values.dim(0), p = values.dim(1), k = values.dim(2);
    if (p != num_patches(C, cfg))
        throw ShapeError("expand_to_series: patch count inconsistent with (C, cfg)");
    Tensor out({B, C, k});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < C; ++t) {
            const std::size_t j = std::min(t / cfg.stride, p - 1);
            for (std::size_t c = 0; c < k; ++c) out.at3(b, t, c) = values.at3(b, j, c);
        }
    return out;
}

namespace nn {

// Applies the adapter independently per patch position: B x p x w(d+m) ->
// B x p x d_llm.
inline Node* embed_patches(Tape& tape, Leaves& lv, const PatchedTensor& pt,
                           const AdapterBlock& adapter) {
    if (pt.patches.shape().back() != adapter.in)
        throw ShapeError("embed_patches: adapter input width " + std::to_string(adapter.in) +
                         " != patch width " + std::to_string(pt.patches.shape().back()));
    Node* x = tape.constant(pt.patches);
    return adapter.forward(tape, lv, x);
}

}  // namespace nn
}  // namespace patchcast
