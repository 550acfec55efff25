#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "patchcast/autograd.hpp"
#include "patchcast/params.hpp"
#include "patchcast/rng.hpp"

namespace patchcast::nn {

constexpr double kInitStddev = 0.02;

// Per-forward binding of parameter tensors to graph leaves. Frozen tensors
// enter the graph with requires_grad=false, so their gradients are never
// materialized (and by construction never applied).
class Leaves {
public:
    Leaves(Tape& tape, ParamStore& ps) : tape_(tape), ps_(ps) {}

    Node* operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Node* n = tape_.leaf(ps_.at(name), ps_.trainable(name));
        bound_[name] = n;
        return n;
    }

    // gradients of every trainable tensor touched this pass
    std::map<std::string, Tensor> grads() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, node] : bound_)
            if (node->requires_grad) out[name] = node->grad;
        return out;
    }

    Tape& tape() { return tape_; }

private:
    Tape& tape_;
    ParamStore& ps_;
    std::map<std::string, Node*> bound_;
};

inline void ensure(ParamStore& ps, const std::string& name, Rng& rng,
                   std::vector<std::size_t> shape, double stddev) {
    if (ps.has(name)) return;
    ps.add(name, stddev == 0.0 ? Tensor::zeros(std::move(shape))
                               : Tensor::randn(std::move(shape), rng, stddev));
}

inline void ensure_const(ParamStore& ps, const std::string& name,
                         std::vector<std::size_t> shape, double value) {
    if (ps.has(name)) return;
    ps.add(name, Tensor::full(std::move(shape), value));
}

// ---------------------------------------------------------------------------

struct LinearLayer {
    std::string prefix;
    std::size_t in = 0, out = 0;

    LinearLayer() = default;
    LinearLayer(ParamStore& ps, Rng& rng, std::string prefix_, std::size_t in_,
                std::size_t out_)
        : prefix(std::move(prefix_)), in(in_), out(out_) {
        // fan-in-scaled init keeps output variance O(1) regardless of depth
        ensure(ps, prefix + ".w", rng, {out, in}, 1.0 / std::sqrt(double(in_)));
        ensure(ps, prefix + ".b", rng, {out}, 0.0);
    }

    Node* forward(Tape& tape, Leaves& lv, Node* x) const {
        return tape.linear(x, lv(prefix + ".w"), lv(prefix + ".b"));
    }
};

enum class Act { ReLU, GELU };

struct Mlp2 {
    std::string prefix;
    Act act = Act::ReLU;
    LinearLayer fc1, fc2;

    Mlp2() = default;
    Mlp2(ParamStore& ps, Rng& rng, std::string prefix_, std::size_t in,
         std::size_t hidden, std::size_t out, Act act_)
        : prefix(std::move(prefix_)),
          act(act_),
          fc1(ps, rng, prefix + ".fc1", in, hidden),
          fc2(ps, rng, prefix + ".fc2", hidden, out) {}

    Node* forward(Tape& tape, Leaves& lv, Node* x) const {
        Node* h = fc1.forward(tape, lv, x);
        h = act == Act::ReLU ? tape.relu(h) : tape.gelu(h);
        return fc2.forward(tape, lv, h);
    }
};

enum class AdapterKind { Linear, MLP2 };

inline const char* to_string(AdapterKind k) {
    return k == AdapterKind::Linear ? "linear" : "mlp2";
}

inline AdapterKind adapter_kind_from(const std::string& s) {
    if (s == "linear") return AdapterKind::Linear;
    if (s == "mlp2") return AdapterKind::MLP2;
    throw ConfigError("unknown adapter kind: " + s);
}

// Linear or 2-layer MLP map between patch space and backbone hidden space.
// Adapters and output blocks use ReLU.
struct AdapterBlock {
    AdapterKind kind = AdapterKind::Linear;
    std::size_t in = 0, out = 0;
    LinearLayer lin;
    Mlp2 mlp;

    AdapterBlock() = default;
    AdapterBlock(ParamStore& ps, Rng& rng, const std::string& prefix, AdapterKind kind_,
                 std::size_t in_, std::size_t hidden, std::size_t out_)
        : kind(kind_), in(in_), out(out_) {
        if (kind == AdapterKind::Linear)
            lin = LinearLayer(ps, rng, prefix, in, out);
        else
            mlp = Mlp2(ps, rng, prefix, in, hidden, out, Act::ReLU);
    }

    Node* forward(Tape& tape, Leaves& lv, Node* x) const {
        return kind == AdapterKind::Linear ? lin.forward(tape, lv, x)
                                           : mlp.forward(tape, lv, x);
    }
};

struct LayerNormLayer {
    std::string prefix;
    LayerNormLayer() = default;
    LayerNormLayer(ParamStore& ps, std::string prefix_, std::size_t k)
        : prefix(std::move(prefix_)) {
        ensure_const(ps, prefix + ".gamma", {k}, 1.0);
        ensure_const(ps, prefix + ".beta", {k}, 0.0);
    }
    Node* forward(Tape& tape, Leaves& lv, Node* x) const {
        return tape.layer_norm(x, lv(prefix + ".gamma"), lv(prefix + ".beta"));
    }
};

struct MhaLayer {
    std::string prefix;
    std::size_t d = 0, heads = 0;

    MhaLayer() = default;
    MhaLayer(ParamStore& ps, Rng& rng, std::string prefix_, std::size_t d_,
             std::size_t heads_)
        : prefix(std::move(prefix_)), d(d_), heads(heads_) {
        if (d % heads != 0) throw ConfigError("mha: d_llm not divisible by heads");
        for (const char* p : {".wq", ".wk", ".wv", ".wo"})
            ensure(ps, prefix + p, rng, {d, d}, kInitStddev);
        for (const char* p : {".bq", ".bk", ".bv", ".bo"})
            ensure(ps, prefix + p, rng, {d}, 0.0);
    }

    Node* forward(Tape& tape, Leaves& lv, Node* x_q, Node* x_kv, Mask mask) const {
        Node* q = tape.linear(x_q, lv(prefix + ".wq"), lv(prefix + ".bq"));
        Node* k = tape.linear(x_kv, lv(prefix + ".wk"), lv(prefix + ".bk"));
        Node* v = tape.linear(x_kv, lv(prefix + ".wv"), lv(prefix + ".bv"));
        Node* o = tape.attention(q, k, v, heads, mask);
        return tape.linear(o, lv(prefix + ".wo"), lv(prefix + ".bo"));
    }
};

// Pre-norm residual transformer block: x + MHA(LN(x)), optional cross-attention
// sublayer, then x + MLP(LN(x)). The block MLP uses GELU.
struct TransformerBlock {
    bool cross = false;
    Mask self_mask = Mask::None;
    LayerNormLayer ln1, ln_cross, ln2;
    MhaLayer self_attn, cross_attn;
    Mlp2 mlp;

    TransformerBlock() = default;
    TransformerBlock(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t d,
                     std::size_t heads, std::size_t d_ff, Mask self_mask_, bool cross_)
        : cross(cross_),
          self_mask(self_mask_),
          ln1(ps, prefix + ".ln1", d),
          self_attn(ps, rng, prefix + ".attn", d, heads) {
        if (cross) {
            ln_cross = LayerNormLayer(ps, prefix + ".ln_cross", d);
            cross_attn = MhaLayer(ps, rng, prefix + ".xattn", d, heads);
        }
        ln2 = LayerNormLayer(ps, prefix + ".ln2", d);
        mlp = Mlp2(ps, rng, prefix + ".mlp", d, d_ff, d, Act::GELU);
    }

    Node* forward(Tape& tape, Leaves& lv, Node* x, Node* context) const {
        if (cross && !context) throw ConfigError("transformer block: missing cross context");
        if (!cross && context) throw ConfigError("transformer block: unexpected context");
        Node* h = ln1.forward(tape, lv, x);
        x = tape.add(x, self_attn.forward(tape, lv, h, h, self_mask));
        if (cross) {
            Node* hc = ln_cross.forward(tape, lv, x);
            x = tape.add(x, cross_attn.forward(tape, lv, hc, context, Mask::None));
        }
        Node* h2 = ln2.forward(tape, lv, x);
        return tape.add(x, mlp.forward(tape, lv, h2));
    }
};

enum class StackKind { DecoderOnly, EncoderOnly, EncoderDecoder, DecoderOfEncDec };

inline const char* to_string(StackKind k) {
    switch (k) {
        case StackKind::DecoderOnly: return "decoder_only";
        case StackKind::EncoderOnly: return "encoder_only";
        case StackKind::EncoderDecoder: return "encoder_decoder";
        case StackKind::DecoderOfEncDec: return "decoder_of_enc_dec";
    }
    return "?";
}

inline StackKind stack_kind_from(const std::string& s) {
    if (s == "decoder_only") return StackKind::DecoderOnly;
    if (s == "encoder_only") return StackKind::EncoderOnly;
    if (s == "encoder_decoder") return StackKind::EncoderDecoder;
    if (s == "decoder_of_enc_dec") return StackKind::DecoderOfEncDec;
    throw ConfigError("unknown stack kind: " + s);
}

struct StackConfig {
    StackKind kind = StackKind::DecoderOnly;
    std::size_t layers = 2;
    std::size_t d_llm = 64;
    std::size_t heads = 4;
    std::size_t d_ff = 256;
    std::size_t p_max = 16;  // positional table length
};

// The backbone: positional table plus transformer blocks. All tensors are
// registered under "backbone.*". EncoderDecoder runs its encoder over the
// embedded patches and cross-attends from the decoder; DecoderOfEncDec keeps
// only the decoder stack and uses the embedded patches themselves as the
// cross-attention memory.
struct TransformerStack {
    StackConfig cfg;
    std::vector<TransformerBlock> enc_blocks;
    std::vector<TransformerBlock> dec_blocks;
    LayerNormLayer ln_f;

    TransformerStack() = default;
    TransformerStack(ParamStore& ps, Rng& rng, const StackConfig& cfg_) : cfg(cfg_) {
        ensure(ps, "backbone.pos", rng, {cfg.p_max, cfg.d_llm}, kInitStddev);
        const bool has_enc =
            cfg.kind == StackKind::EncoderOnly || cfg.kind == StackKind::EncoderDecoder;
        const bool has_dec = cfg.kind != StackKind::EncoderOnly;
        const bool dec_cross =
            cfg.kind == StackKind::EncoderDecoder || cfg.kind == StackKind::DecoderOfEncDec;
        for (std::size_t l = 0; has_enc && l < cfg.layers; ++l)
            enc_blocks.emplace_back(ps, rng, "backbone.enc" + std::to_string(l), cfg.d_llm,
                                    cfg.heads, cfg.d_ff, Mask::None, false);
        for (std::size_t l = 0; has_dec && l < cfg.layers; ++l)
            dec_blocks.emplace_back(ps, rng, "backbone.dec" + std::to_string(l), cfg.d_llm,
                                    cfg.heads, cfg.d_ff, Mask::Causal, dec_cross);
        // a 0-block stack is the identity (plus positional addition)
        if (cfg.layers > 0) ln_f = LayerNormLayer(ps, "backbone.ln_f", cfg.d_llm);
    }

    Node* forward(Tape& tape, Leaves& lv, Node* x) const {
        x = tape.add_positional(x, lv("backbone.pos"));
        if (cfg.layers == 0) return x;
        Node* memory = x;
        if (!enc_blocks.empty()) {
            Node* e = x;
            for (const auto& blk : enc_blocks) e = blk.forward(tape, lv, e, nullptr);
            memory = e;
        }
        if (cfg.kind == StackKind::EncoderOnly) return ln_f.forward(tape, lv, memory);
        Node* h = x;
        for (const auto& blk : dec_blocks)
            h = blk.forward(tape, lv, h, blk.cross ? memory : nullptr);
        return ln_f.forward(tape, lv, h);
    }
};

}  // namespace patchcast::nn
