#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchcast/autograd.hpp"
#include "patchcast/dataset.hpp"
#include "patchcast/layers.hpp"
#include "patchcast/optimizer.hpp"
#include "patchcast/params.hpp"
#include "patchcast/patching.hpp"

namespace patchcast::models {

using nn::AdapterKind;
using nn::FreezePolicy;
using nn::StackConfig;
using nn::StackKind;

struct ProblemDims {
    std::size_t context_length = 24;
    std::size_t n_time_feats = 6;   // without the appended target channel
    std::size_t n_statics = 4;
    std::size_t n_future_feats = 2;
    std::size_t n_horizons = 4;
    std::size_t n_quantiles = 2;
    bool log1p_target = true;

    static ProblemDims from(const data::PanelDataset& ds, const data::ForecastTask& task) {
        return {task.context_length, ds.n_time_feats(),     ds.n_statics(),
                ds.n_future_feats(), task.horizons.size(),  task.quantiles.size(),
                task.log1p_target};
    }

    // the target history is concatenated as one extra time channel
    std::size_t time_channels() const { return n_time_feats + 1; }
};

struct MqcnnConfig {
    std::size_t kernel = 2;
    std::size_t channels = 32;
    std::vector<std::size_t> dilations = {1, 2, 4, 8};
    std::size_t static_dim = 16;
    std::size_t global_hidden = 64;
    std::size_t head_hidden = 32;
};

enum class ModelKind { Fpt, MqcnnLite };

inline const char* to_string(ModelKind k) {
    return k == ModelKind::Fpt ? "fpt" : "mqcnn_lite";
}

struct ModelSpec {
    ModelKind kind = ModelKind::Fpt;
    std::optional<StackConfig> backbone;  // nullopt = null decoder
    AdapterKind adapter = AdapterKind::Linear;
    std::size_t adapter_hidden = 64;
    AdapterKind output = AdapterKind::Linear;
    std::size_t output_hidden = 64;
    FreezePolicy freeze = FreezePolicy::AllTrainable;
    bool use_future = true;
    // Linear-Only wiring: patch embeddings are expanded back to series
    // length before the output block.
    bool expand_to_series = false;
    PatchConfig patch;
    std::size_t d_llm = 64;
    MqcnnConfig mqcnn;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
    j = nlohmann::json{{"kind", to_string(s.kind)},
                       {"adapter", nn::to_string(s.adapter)},
                       {"adapter_hidden", s.adapter_hidden},
                       {"output", nn::to_string(s.output)},
                       {"output_hidden", s.output_hidden},
                       {"freeze", nn::to_string(s.freeze)},
                       {"use_future", s.use_future},
                       {"expand_to_series", s.expand_to_series},
                       {"patch_window", s.patch.window},
                       {"patch_stride", s.patch.stride},
                       {"patch_repeat_pad", s.patch.repeat_pad},
                       {"d_llm", s.d_llm},
                       {"mqcnn_kernel", s.mqcnn.kernel},
                       {"mqcnn_channels", s.mqcnn.channels},
                       {"mqcnn_dilations", s.mqcnn.dilations},
                       {"mqcnn_static_dim", s.mqcnn.static_dim},
                       {"mqcnn_global_hidden", s.mqcnn.global_hidden},
                       {"mqcnn_head_hidden", s.mqcnn.head_hidden}};
    if (s.backbone) {
        j["backbone"] = {{"kind", nn::to_string(s.backbone->kind)},
                         {"layers", s.backbone->layers},
                         {"d_llm", s.backbone->d_llm},
                         {"heads", s.backbone->heads},
                         {"d_ff", s.backbone->d_ff},
                         {"p_max", s.backbone->p_max}};
    } else {
        j["backbone"] = nullptr;
    }
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
    const ModelSpec defaults;
    s.kind = j.value("kind", std::string("fpt")) == "mqcnn_lite" ? ModelKind::MqcnnLite
                                                                 : ModelKind::Fpt;
    s.adapter = nn::adapter_kind_from(j.value("adapter", std::string("linear")));
    s.adapter_hidden = j.value("adapter_hidden", defaults.adapter_hidden);
    s.output = nn::adapter_kind_from(j.value("output", std::string("linear")));
    s.output_hidden = j.value("output_hidden", defaults.output_hidden);
    s.freeze = nn::freeze_policy_from(j.value("freeze", std::string("all_trainable")));
    s.use_future = j.value("use_future", defaults.use_future);
    s.expand_to_series = j.value("expand_to_series", defaults.expand_to_series);
    s.patch.window = j.value("patch_window", defaults.patch.window);
    s.patch.stride = j.value("patch_stride", defaults.patch.stride);
    s.patch.repeat_pad = j.value("patch_repeat_pad", defaults.patch.repeat_pad);
    s.d_llm = j.value("d_llm", defaults.d_llm);
    s.mqcnn.kernel = j.value("mqcnn_kernel", defaults.mqcnn.kernel);
    s.mqcnn.channels = j.value("mqcnn_channels", defaults.mqcnn.channels);
    s.mqcnn.dilations = j.value("mqcnn_dilations", defaults.mqcnn.dilations);
    s.mqcnn.static_dim = j.value("mqcnn_static_dim", defaults.mqcnn.static_dim);
    s.mqcnn.global_hidden = j.value("mqcnn_global_hidden", defaults.mqcnn.global_hidden);
    s.mqcnn.head_hidden = j.value("mqcnn_head_hidden", defaults.mqcnn.head_hidden);
    if (j.contains("backbone") && !j.at("backbone").is_null()) {
        const auto& b = j.at("backbone");
        StackConfig sc;
        sc.kind = nn::stack_kind_from(b.value("kind", std::string("decoder_only")));
        sc.layers = b.value("layers", sc.layers);
        sc.d_llm = b.value("d_llm", sc.d_llm);
        sc.heads = b.value("heads", sc.heads);
        sc.d_ff = b.value("d_ff", sc.d_ff);
        sc.p_max = b.value("p_max", sc.p_max);
        s.backbone = sc;
    } else {
        s.backbone = std::nullopt;
    }
}

// B x |H| x |Q| quantile forecasts in demand units. Quantile ordering within
// a cell is not enforced; crossings are flagged during evaluation.
struct ForecastGrid {
    Tensor values;
};

// A fully assembled forecaster: patching -> adapter -> (positional add,
// frozen or trainable backbone | expansion | nothing) -> output block, or the
// MQCNN-lite graph. Owns its parameters.
class Model {
public:
    Model(ModelSpec spec, ProblemDims dims, std::uint64_t seed,
          const nn::ParamStore* backbone_weights = nullptr)
        : spec_(std::move(spec)), dims_(dims) {
        Rng rng(derive_seed(seed, "model_init"));
        if (spec_.kind == ModelKind::MqcnnLite) {
            build_mqcnn(rng);
        } else {
            build_fpt(rng, backbone_weights);
        }
        nn::apply_freeze(ps_, spec_.freeze);
    }

    const ModelSpec& spec() const { return spec_; }
    const ProblemDims& dims() const { return dims_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

    // forecast grid node, raw demand units
    nn::Node* forward(nn::Tape& tape, nn::Leaves& lv, const data::SupervisedBatch& batch) const {
        nn::Node* grid = spec_.kind == ModelKind::MqcnnLite ? forward_mqcnn(tape, lv, batch)
                                                            : forward_fpt(tape, lv, batch);
        if (dims_.log1p_target) grid = tape.expm1(grid);
        return grid;
    }

    ForecastGrid forward_forecast(const data::SupervisedBatch& batch) const {
        nn::Tape tape;
        nn::Leaves lv(tape, const_cast<nn::ParamStore&>(ps_));
        nn::Node* grid = forward(tape, lv, batch);
        if (!grid->val.all_finite()) throw TrainingError("non-finite forecast grid");
        return {grid->val};
    }

    // summed quantile loss and gradients of every trainable tensor
    double loss_and_grads(const data::SupervisedBatch& batch,
                          const std::vector<double>& quantiles,
                          std::map<std::string, Tensor>& grads_out) {
        nn::Tape tape;
        nn::Leaves lv(tape, ps_);
        nn::Node* grid = forward(tape, lv, batch);
        nn::Node* loss = tape.quantile_loss_sum(grid, batch.labels, quantiles);
        tape.backward(loss);
        grads_out = lv.grads();
        return loss->val[0];
    }

private:
    void build_fpt(Rng& rng, const nn::ParamStore* backbone_weights) {
        spec_.patch.validate();
        const std::size_t patch_width = spec_.patch.window * (dims_.time_channels() + dims_.n_statics);
        const std::size_t p = num_patches(dims_.context_length, spec_.patch);
        if (backbone_weights) {
            if (!spec_.backbone)
                throw ConfigError("backbone weights supplied for a null-decoder spec");
            ps_.absorb(*backbone_weights, "");
        }
        adapter_ = nn::AdapterBlock(ps_, rng, "adapter", spec_.adapter, patch_width,
                                    spec_.adapter_hidden, spec_.d_llm);
        std::size_t flat = p * spec_.d_llm;
        if (spec_.backbone) {
            StackConfig sc = *spec_.backbone;
            if (sc.d_llm != spec_.d_llm)
                throw ConfigError("adapter output width != backbone hidden dimension");
            sc.p_max = std::max(sc.p_max, p);
            stack_ = nn::TransformerStack(ps_, rng, sc);
            if (ps_.at("backbone.pos").dim(0) < p)
                throw ConfigError("backbone positional table shorter than patch count");
        } else if (spec_.expand_to_series) {
            flat = dims_.context_length * spec_.d_llm;
        }
        if (spec_.use_future) flat += dims_.n_horizons * dims_.n_future_feats;
        output_ = nn::AdapterBlock(ps_, rng, "output", spec_.output, flat,
                                   spec_.output_hidden,
                                   dims_.n_horizons * dims_.n_quantiles);
    }

    void build_mqcnn(Rng& rng) {
        const auto& mc = spec_.mqcnn;
        if (mc.dilations.empty()) throw ConfigError("mqcnn: dilation schedule required");
        std::size_t in_ch = dims_.time_channels();
        for (std::size_t l = 0; l < mc.dilations.size(); ++l) {
            const std::string prefix = "mqcnn.conv" + std::to_string(l);
            nn::ensure(ps_, prefix + ".w", rng, {mc.kernel, in_ch, mc.channels},
                       nn::kInitStddev);
            nn::ensure(ps_, prefix + ".b", rng, {mc.channels}, 0.0);
            in_ch = mc.channels;
        }
        static_enc_ = nn::LinearLayer(ps_, rng, "mqcnn.static", dims_.n_statics,
                                      mc.static_dim);
        global_mlp_ = nn::Mlp2(ps_, rng, "mqcnn.global", mc.channels + mc.static_dim,
                               mc.global_hidden, mc.global_hidden, nn::Act::ReLU);
        const std::size_t head_in =
            mc.global_hidden + (spec_.use_future ? dims_.n_future_feats : 0);
        for (std::size_t h = 0; h < dims_.n_horizons; ++h)
            heads_.emplace_back(ps_, rng, "mqcnn.head" + std::to_string(h), head_in,
                                mc.head_hidden, dims_.n_quantiles, nn::Act::ReLU);
    }

    // B x C x (d+1) time input with the (scaled) target history appended
    Tensor time_input(const data::SupervisedBatch& batch) const {
        const std::size_t B = batch.batch_size(), C = dims_.context_length;
        const std::size_t d = dims_.n_time_feats;
        Tensor x({B, C, d + 1});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < C; ++t) {
                for (std::size_t f = 0; f < d; ++f)
                    x.at3(b, t, f) = batch.past_time_feats.at3(b, t, f);
                x.at3(b, t, d) = batch.past_target.at2(b, t);
            }
        return x;
    }

    nn::Node* forward_fpt(nn::Tape& tape, nn::Leaves& lv,
                          const data::SupervisedBatch& batch) const {
        const std::size_t B = batch.batch_size();
        const PatchedTensor pt = multivariate_patch(time_input(batch), batch.statics,
                                                    spec_.patch);
        nn::Node* h = nn::embed_patches(tape, lv, pt, adapter_);
        std::size_t flat = pt.p * spec_.d_llm;
        if (spec_.backbone) {
            h = stack_->forward(tape, lv, h);
        } else if (spec_.expand_to_series) {
            h = tape.expand_patches(h, dims_.context_length, spec_.patch.stride);
            flat = dims_.context_length * spec_.d_llm;
        }
        h = tape.reshape(h, {B, flat});
        if (spec_.use_future) {
            nn::Node* fut = tape.constant(batch.future_feats.reshaped(
                {B, dims_.n_horizons * dims_.n_future_feats}));
            h = tape.concat_last(h, fut);
        }
        nn::Node* out = output_.forward(tape, lv, h);
        return tape.reshape(out, {B, dims_.n_horizons, dims_.n_quantiles});
    }

    nn::Node* forward_mqcnn(nn::Tape& tape, nn::Leaves& lv,
                            const data::SupervisedBatch& batch) const {
        const std::size_t B = batch.batch_size();
        const auto& mc = spec_.mqcnn;
        nn::Node* h = tape.constant(time_input(batch));
        for (std::size_t l = 0; l < mc.dilations.size(); ++l) {
            const std::string prefix = "mqcnn.conv" + std::to_string(l);
            h = tape.conv1d_causal(h, lv(prefix + ".w"), lv(prefix + ".b"),
                                   mc.dilations[l]);
            h = tape.relu(h);
        }
        nn::Node* enc = tape.select_time(h, dims_.context_length - 1);
        nn::Node* st = tape.relu(
            static_enc_.forward(tape, lv, tape.constant(batch.statics)));
        nn::Node* global = global_mlp_.forward(tape, lv, tape.concat_last(enc, st));

        nn::Node* all = nullptr;
        for (std::size_t hz = 0; hz < dims_.n_horizons; ++hz) {
            nn::Node* in = global;
            if (spec_.use_future) {
                Tensor fut({B, dims_.n_future_feats});
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t f = 0; f < dims_.n_future_feats; ++f)
                        fut.at2(b, f) = batch.future_feats.at3(b, hz, f);
                in = tape.concat_last(global, tape.constant(fut));
            }
            nn::Node* head = heads_[hz].forward(tape, lv, in);
            all = all ? tape.concat_last(all, head) : head;
        }
        return tape.reshape(all, {B, dims_.n_horizons, dims_.n_quantiles});
    }

    ModelSpec spec_;
    ProblemDims dims_;
    nn::ParamStore ps_;
    nn::AdapterBlock adapter_, output_;
    std::optional<nn::TransformerStack> stack_;
    nn::LinearLayer static_enc_;
    nn::Mlp2 global_mlp_;
    std::vector<nn::Mlp2> heads_;
};

inline Model build_model(const ModelSpec& spec, const ProblemDims& dims, std::uint64_t seed,
                         const nn::ParamStore* backbone_weights = nullptr) {
    return Model(spec, dims, seed, backbone_weights);
}

inline Model build_mqcnn_lite(const MqcnnConfig& cfg, const ProblemDims& dims,
                              std::uint64_t seed, bool use_future = true) {
    ModelSpec spec;
    spec.kind = ModelKind::MqcnnLite;
    spec.mqcnn = cfg;
    spec.use_future = use_future;
    spec.freeze = FreezePolicy::AllTrainable;
    return Model(spec, dims, seed);
}

// ---------------------------------------------------------------------------
// Toy pretraining: next-token prediction over synthetic order-2 Markov
// sequences, with a temporary token embedding and softmax head that are
// discarded afterwards. Produces the frozen backbone tensors.

enum class ChainKind { Random, Repeat };

struct ToyLmConfig {
    std::size_t vocab = 8;
    std::size_t seq_len = 16;
    std::size_t markov_order = 2;
    std::uint64_t transition_seed = 1;
    std::size_t steps = 300;
    double learning_rate = 3e-3;
    std::size_t batch_size = 16;
    ChainKind chain = ChainKind::Random;

    void validate() const {
        if (vocab < 2 || seq_len < 2)
            throw ConfigError("toy LM requires vocab >= 2 and sequence length >= 2");
    }
};

struct PretrainResult {
    nn::ParamStore backbone;  // backbone.* tensors only
    double final_xent = 0.0;
    double next_token_accuracy = 0.0;
    double unigram_entropy = 0.0;
};

namespace detail {

class MarkovChain {
public:
    MarkovChain(const ToyLmConfig& cfg) : cfg_(cfg) {
        if (cfg.chain == ChainKind::Repeat) return;
        Rng rng(cfg.transition_seed);
        const std::size_t states = cfg.vocab * cfg.vocab;
        table_.resize(states * cfg.vocab);
        for (std::size_t s = 0; s < states; ++s) {
            double total = 0.0;
            for (std::size_t v = 0; v < cfg.vocab; ++v) {
                table_[s * cfg.vocab + v] = std::exp(3.0 * rng.normal());
                total += table_[s * cfg.vocab + v];
            }
            for (std::size_t v = 0; v < cfg.vocab; ++v) table_[s * cfg.vocab + v] /= total;
        }
    }

    std::vector<std::size_t> sample(Rng& rng) const {
        std::vector<std::size_t> seq(cfg_.seq_len);
        seq[0] = rng.below(cfg_.vocab);
        seq[1] = cfg_.chain == ChainKind::Repeat ? seq[0] : rng.below(cfg_.vocab);
        for (std::size_t t = 2; t < cfg_.seq_len; ++t) {
            if (cfg_.chain == ChainKind::Repeat) {
                seq[t] = seq[t - 1];
                continue;
            }
            const std::size_t s = seq[t - 2] * cfg_.vocab + seq[t - 1];
            const double u = rng.uniform();
            double acc = 0.0;
            std::size_t pick = cfg_.vocab - 1;
            for (std::size_t v = 0; v < cfg_.vocab; ++v) {
                acc += table_[s * cfg_.vocab + v];
                if (u < acc) {
                    pick = v;
                    break;
                }
            }
            seq[t] = pick;
        }
        return seq;
    }

private:
    ToyLmConfig cfg_;
    std::vector<double> table_;
};

}  // namespace detail

inline PretrainResult pretrain_toy_lm(const ToyLmConfig& cfg, const StackConfig& stack_spec,
                                      std::uint64_t seed) {
    cfg.validate();
    if (stack_spec.kind != StackKind::DecoderOnly &&
        stack_spec.kind != StackKind::EncoderDecoder)
        throw ConfigError("toy pretraining supports decoder-only or encoder-decoder stacks");
    StackConfig sc = stack_spec;
    sc.p_max = std::max(sc.p_max, cfg.seq_len);

    Rng init_rng(derive_seed(seed, "pretrain_init"));
    nn::ParamStore ps;
    nn::TransformerStack stack(ps, init_rng, sc);
    nn::ensure(ps, "pretrain.embed", init_rng, {cfg.vocab, sc.d_llm}, nn::kInitStddev);
    nn::ensure(ps, "pretrain.head.w", init_rng, {cfg.vocab, sc.d_llm}, nn::kInitStddev);
    nn::ensure(ps, "pretrain.head.b", init_rng, {cfg.vocab}, 0.0);
    nn::apply_freeze(ps, FreezePolicy::AllTrainable);

    const detail::MarkovChain chain(cfg);
    Rng data_rng(derive_seed(seed, "pretrain_data"));

    auto run_batch = [&](Rng& rng, bool update, train::AdamState* state,
                         const train::AdamConfig* acfg, double* accuracy) {
        const std::size_t S = cfg.seq_len;
        std::vector<std::size_t> inputs, targets;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const auto seq = chain.sample(rng);
            for (std::size_t t = 0; t + 1 < S; ++t) {
                inputs.push_back(seq[t]);
                targets.push_back(seq[t + 1]);
            }
        }
        nn::Tape tape;
        nn::Leaves lv(tape, ps);
        nn::Node* emb = tape.embed_tokens(lv("pretrain.embed"), inputs);
        emb = tape.reshape(emb, {cfg.batch_size, S - 1, sc.d_llm});
        nn::Node* h = stack.forward(tape, lv, emb);
        h = tape.reshape(h, {cfg.batch_size * (S - 1), sc.d_llm});
        nn::Node* logits = tape.linear(h, lv("pretrain.head.w"), lv("pretrain.head.b"));
        nn::Node* loss = tape.softmax_xent(logits, targets);
        if (!std::isfinite(loss->val[0]))
            throw TrainingError("toy pretraining diverged: non-finite loss");
        if (update) {
            tape.backward(loss);
            auto grads = lv.grads();
            train::adam_step(ps, grads, *state, *acfg);
        }
        if (accuracy) {
            std::size_t correct = 0;
            const std::size_t V = cfg.vocab;
            for (std::size_t r = 0; r < targets.size(); ++r) {
                std::size_t best = 0;
                for (std::size_t v = 1; v < V; ++v)
                    if (logits->val.at2(r, v) > logits->val.at2(r, best)) best = v;
                if (best == targets[r]) ++correct;
            }
            *accuracy = static_cast<double>(correct) / static_cast<double>(targets.size());
        }
        return loss->val[0];
    };

    train::AdamConfig acfg;
    acfg.lr = cfg.learning_rate;
    train::AdamState state;
    for (std::size_t step = 0; step < cfg.steps; ++step)
        run_batch(data_rng, true, &state, &acfg, nullptr);

    // held-out evaluation batch, plus the unigram baseline on its targets
    Rng eval_rng(derive_seed(seed, "pretrain_eval"));
    PretrainResult result;
    result.final_xent = run_batch(eval_rng, false, nullptr, nullptr,
                                  &result.next_token_accuracy);
    {
        Rng uni_rng(derive_seed(seed, "pretrain_eval"));
        std::vector<double> counts(cfg.vocab, 0.0);
        double total = 0.0;
        for (std::size_t b = 0; b < cfg.batch_size; ++b)
            for (std::size_t v : chain.sample(uni_rng)) {
                counts[v] += 1.0;
                total += 1.0;
            }
        double ent = 0.0;
        for (double c : counts)
            if (c > 0.0) ent -= (c / total) * std::log(c / total);
        result.unigram_entropy = ent;
    }
    if (result.final_xent >= result.unigram_entropy)
        throw TrainingError("toy pretraining failed to beat the unigram baseline");

    for (const auto& name : ps.names())
        if (name.rfind("backbone.", 0) == 0) result.backbone.add(name, ps.at(name));
    return result;
}

}  // namespace patchcast::models
