#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "patchcast/dataset.hpp"
#include "patchcast/models.hpp"
#include "patchcast/optimizer.hpp"
#include "patchcast/training.hpp"
#include "test_util.hpp"

using patchcast::ConfigError;
using patchcast::Rng;
using patchcast::Tensor;
namespace data = patchcast::data;
namespace models = patchcast::models;
namespace nn = patchcast::nn;
namespace train = patchcast::train;

namespace {

data::SupervisedBatch small_batch(std::uint64_t seed, std::size_t B, std::size_t C,
                                  std::size_t d, std::size_t m, std::size_t H,
                                  std::size_t df) {
    Rng rng(seed);
    data::SupervisedBatch b;
    b.past_target = Tensor::randn({B, C}, rng, 0.5);
    b.past_time_feats = Tensor::randn({B, C, d}, rng, 0.5);
    b.statics = Tensor::randn({B, m}, rng, 0.5);
    b.future_feats = Tensor::randn({B, H, df}, rng, 0.5);
    b.labels = Tensor::full({B, H}, 10.0);  // far from the forecasts: no kink
    for (std::size_t r = 0; r < B; ++r) {
        b.row_series.push_back(r);
        b.row_fcd.push_back(C);
    }
    return b;
}

models::ProblemDims tiny_dims() {
    models::ProblemDims dims;
    dims.context_length = 6;
    dims.n_time_feats = 2;
    dims.n_statics = 1;
    dims.n_future_feats = 1;
    dims.n_horizons = 2;
    dims.n_quantiles = 2;
    dims.log1p_target = true;
    return dims;
}

models::ModelSpec tiny_fpt_spec(bool with_backbone) {
    models::ModelSpec spec;
    spec.patch.window = 4;
    spec.patch.stride = 2;
    spec.d_llm = 8;
    if (with_backbone) {
        nn::StackConfig sc;
        sc.layers = 1;
        sc.d_llm = 8;
        sc.heads = 2;
        sc.d_ff = 12;
        sc.p_max = 4;
        spec.backbone = sc;
    }
    return spec;
}

std::set<std::string> trainable_set(const models::Model& m) {
    std::set<std::string> out;
    for (const auto& n : m.params().trainable_names()) out.insert(n);
    return out;
}

}  // namespace

TEST_CASE("model spec JSON round-trips") {
    models::ModelSpec spec = tiny_fpt_spec(true);
    spec.adapter = nn::AdapterKind::MLP2;
    spec.freeze = nn::FreezePolicy::AdapterAndLayerNorms;
    spec.backbone->kind = nn::StackKind::EncoderDecoder;
    nlohmann::json j = spec;
    const auto back = j.get<models::ModelSpec>();
    REQUIRE(back.adapter == nn::AdapterKind::MLP2);
    REQUIRE(back.freeze == nn::FreezePolicy::AdapterAndLayerNorms);
    REQUIRE(back.backbone.has_value());
    REQUIRE(back.backbone->kind == nn::StackKind::EncoderDecoder);
    REQUIRE(back.patch.window == 4);
    REQUIRE(back.d_llm == 8);

    models::ModelSpec null_dec = tiny_fpt_spec(false);
    nlohmann::json j2 = null_dec;
    REQUIRE(j2.at("backbone").is_null());
    REQUIRE(!j2.get<models::ModelSpec>().backbone.has_value());
}

TEST_CASE("a zero-block backbone with zeroed positions equals the null decoder") {
    const auto dims = tiny_dims();
    models::ModelSpec with = tiny_fpt_spec(true);
    with.backbone->layers = 0;
    models::ModelSpec without = tiny_fpt_spec(false);

    models::Model a(with, dims, 11);
    models::Model b(without, dims, 11);
    a.params().at("backbone.pos").fill(0.0);
    // align the output blocks (their random init depends on draw order)
    for (const char* n : {"output.w", "output.b"}) b.params().at(n) = a.params().at(n);

    const auto batch = small_batch(1, 3, 6, 2, 1, 2, 1);
    REQUIRE(a.forward_forecast(batch).values == b.forward_forecast(batch).values);
}

TEST_CASE("all-zero weights forecast exactly zero demand") {
    const auto dims = tiny_dims();
    models::Model model(tiny_fpt_spec(true), dims, 3);
    for (const auto& n : model.params().names()) model.params().at(n).fill(0.0);
    const auto batch = small_batch(2, 2, 6, 2, 1, 2, 1);
    const auto grid = model.forward_forecast(batch);
    for (double v : grid.values.vec()) REQUIRE(v == 0.0);  // expm1(0) = 0
}

TEST_CASE("forecasts for duplicated rows are identical") {
    const auto dims = tiny_dims();
    models::Model model(tiny_fpt_spec(true), dims, 4);
    auto batch = small_batch(5, 2, 6, 2, 1, 2, 1);
    // copy row 0 onto row 1
    for (std::size_t c = 0; c < 6; ++c) {
        batch.past_target.at2(1, c) = batch.past_target.at2(0, c);
        for (std::size_t f = 0; f < 2; ++f)
            batch.past_time_feats.at3(1, c, f) = batch.past_time_feats.at3(0, c, f);
    }
    batch.statics.at2(1, 0) = batch.statics.at2(0, 0);
    for (std::size_t h = 0; h < 2; ++h)
        batch.future_feats.at3(1, h, 0) = batch.future_feats.at3(0, h, 0);
    const auto grid = model.forward_forecast(batch);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t q = 0; q < 2; ++q)
            REQUIRE(grid.values.at3(0, h, q) == grid.values.at3(1, h, q));
}

TEST_CASE("freeze policies nest strictly across the model") {
    const auto dims = tiny_dims();
    auto spec = tiny_fpt_spec(true);
    spec.freeze = nn::FreezePolicy::AdapterOnly;
    models::Model frozen(spec, dims, 5);
    spec.freeze = nn::FreezePolicy::AdapterAndLayerNorms;
    models::Model with_ln(spec, dims, 5);
    spec.freeze = nn::FreezePolicy::AllTrainable;
    models::Model open(spec, dims, 5);

    const auto a = trainable_set(frozen), b = trainable_set(with_ln), c = trainable_set(open);
    REQUIRE(std::includes(b.begin(), b.end(), a.begin(), a.end()));
    REQUIRE(std::includes(c.begin(), c.end(), b.begin(), b.end()));
    REQUIRE(a.size() < b.size());
    REQUIRE(b.size() < c.size());
    for (const auto& n : a) REQUIRE(n.rfind("backbone.", 0) != 0);
    for (const auto& n : b)
        if (n.rfind("backbone.", 0) == 0) REQUIRE(n.find(".ln") != std::string::npos);

    const auto counts = with_ln.params().parameter_count();
    std::size_t hand = 0;
    for (const auto& n : with_ln.params().trainable_names())
        hand += with_ln.params().at(n).numel();
    REQUIRE(counts.second == hand);
    REQUIRE(counts.second < counts.first);
}

TEST_CASE("stack kinds expose exactly their own layer norms") {
    const auto dims = tiny_dims();
    auto spec = tiny_fpt_spec(true);
    spec.freeze = nn::FreezePolicy::AdapterAndLayerNorms;

    auto ln_names = [&](nn::StackKind kind) {
        spec.backbone->kind = kind;
        models::Model m(spec, dims, 6);
        std::set<std::string> out;
        for (const auto& n : m.params().trainable_names())
            if (n.rfind("backbone.", 0) == 0) out.insert(n);
        return out;
    };
    const auto dec = ln_names(nn::StackKind::DecoderOnly);
    const auto enc = ln_names(nn::StackKind::EncoderOnly);
    const auto both = ln_names(nn::StackKind::EncoderDecoder);
    const auto dec_of = ln_names(nn::StackKind::DecoderOfEncDec);

    for (const auto& n : dec)
        REQUIRE((n.find(".dec") != std::string::npos ||
                 n.find(".ln_f") != std::string::npos));
    std::set<std::string> uni;
    uni.insert(enc.begin(), enc.end());
    uni.insert(dec_of.begin(), dec_of.end());
    REQUIRE(both == uni);  // enc-dec = encoder norms + cross-decoder norms
    REQUIRE(dec_of.count("backbone.dec0.ln_cross.gamma") == 1);
    REQUIRE(dec.count("backbone.dec0.ln_cross.gamma") == 0);
}

TEST_CASE("end-to-end FPT gradients match finite differences") {
    const auto dims = tiny_dims();
    auto spec = tiny_fpt_spec(true);
    spec.freeze = nn::FreezePolicy::AllTrainable;
    models::Model model(spec, dims, 7);
    const auto batch = small_batch(8, 2, 6, 2, 1, 2, 1);
    const std::vector<double> qs = {0.5, 0.9};

    std::map<std::string, Tensor> grads;
    model.loss_and_grads(batch, qs, grads);

    auto value = [&]() {
        nn::Tape tape;
        nn::Leaves lv(tape, model.params());
        return train::batch_loss(model.forward(tape, lv, batch)->val, batch.labels, qs);
    };
    const double h = 1e-5;
    double worst = 0.0;
    for (auto& [name, g] : grads) {
        Tensor& w = model.params().at(name);
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const double orig = w[i];
            w[i] = orig + h;
            const double fp = value();
            w[i] = orig - h;
            const double fm = value();
            w[i] = orig;
            const double num = (fp - fm) / (2.0 * h);
            const double rel = std::abs(g[i] - num) /
                               std::max({1.0, std::abs(g[i]), std::abs(num)});
            worst = std::max(worst, rel);
        }
    }
    REQUIRE(worst <= 1e-4);
}

TEST_CASE("mqcnn respects its dilated receptive field") {
    models::ProblemDims dims = tiny_dims();
    dims.context_length = 24;
    models::MqcnnConfig mc;
    mc.kernel = 2;
    mc.channels = 6;
    mc.dilations = {1, 2, 4, 8};  // receptive field 1 + 15 = 16
    models::Model model = models::build_mqcnn_lite(mc, dims, 8);
    auto batch = small_batch(9, 1, 24, 2, 1, 2, 1);
    const auto base = model.forward_forecast(batch);
    // positions more than 15 steps before the encoding time C-1 are invisible
    for (std::size_t t = 0; t + 16 <= 23; ++t) {
        auto bumped = batch;
        bumped.past_target.at2(0, t) += 5.0;
        bumped.past_time_feats.at3(0, t, 0) -= 5.0;
        const auto out = model.forward_forecast(bumped);
        REQUIRE(out.values == base.values);
    }
    // a position inside the receptive field does change the forecast
    auto bumped = batch;
    bumped.past_target.at2(0, 23) += 5.0;
    REQUIRE(!(model.forward_forecast(bumped).values == base.values));
}

TEST_CASE("kernel-1 mqcnn reads only the forecast creation time") {
    models::ProblemDims dims = tiny_dims();
    dims.context_length = 8;
    models::MqcnnConfig mc;
    mc.kernel = 1;
    mc.channels = 5;
    mc.dilations = {1, 1};
    models::Model model = models::build_mqcnn_lite(mc, dims, 9);
    auto batch = small_batch(10, 1, 8, 2, 1, 2, 1);
    const auto base = model.forward_forecast(batch);
    for (std::size_t t = 0; t < 7; ++t) {
        auto bumped = batch;
        bumped.past_target.at2(0, t) += 3.0;
        REQUIRE(model.forward_forecast(bumped).values == base.values);
    }
}

TEST_CASE("mqcnn gradients match finite differences") {
    models::ProblemDims dims = tiny_dims();
    dims.context_length = 8;
    models::MqcnnConfig mc;
    mc.kernel = 2;
    mc.channels = 4;
    mc.dilations = {1, 2};
    mc.static_dim = 3;
    mc.global_hidden = 5;
    mc.head_hidden = 4;
    models::Model model = models::build_mqcnn_lite(mc, dims, 12);
    const auto batch = small_batch(11, 2, 8, 2, 1, 2, 1);
    const std::vector<double> qs = {0.5, 0.9};
    std::map<std::string, Tensor> grads;
    model.loss_and_grads(batch, qs, grads);
    auto value = [&]() {
        nn::Tape tape;
        nn::Leaves lv(tape, model.params());
        return train::batch_loss(model.forward(tape, lv, batch)->val, batch.labels, qs);
    };
    const double h = 1e-5;
    double worst = 0.0;
    for (auto& [name, g] : grads) {
        Tensor& w = model.params().at(name);
        for (std::size_t i = 0; i < w.numel(); ++i) {
            const double orig = w[i];
            w[i] = orig + h;
            const double fp = value();
            w[i] = orig - h;
            const double fm = value();
            w[i] = orig;
            const double num = (fp - fm) / (2.0 * h);
            worst = std::max(worst, std::abs(g[i] - num) /
                                        std::max({1.0, std::abs(g[i]), std::abs(num)}));
        }
    }
    REQUIRE(worst <= 1e-4);
}

TEST_CASE("config errors: mismatched adapter and backbone widths") {
    const auto dims = tiny_dims();
    auto spec = tiny_fpt_spec(true);
    spec.d_llm = 6;  // backbone stays at 8
    REQUIRE_THROWS_AS(models::Model(spec, dims, 1), ConfigError);

    auto null_spec = tiny_fpt_spec(false);
    nn::ParamStore fake;
    REQUIRE_THROWS_AS(models::Model(null_spec, dims, 1, &fake), ConfigError);
}

TEST_CASE("toy pretraining learns the repeat chain almost perfectly") {
    models::ToyLmConfig cfg;
    cfg.vocab = 4;
    cfg.seq_len = 12;
    cfg.steps = 200;
    cfg.chain = models::ChainKind::Repeat;
    nn::StackConfig sc;
    sc.layers = 1;
    sc.d_llm = 16;
    sc.heads = 2;
    sc.d_ff = 32;
    const auto result = models::pretrain_toy_lm(cfg, sc, 21);
    REQUIRE(result.next_token_accuracy >= 0.99);
    REQUIRE(result.final_xent < result.unigram_entropy);
    for (const auto& n : result.backbone.names())
        REQUIRE(n.rfind("backbone.", 0) == 0);  // embed/head are discarded

    // the backbone wires into an FPT model and keeps its values
    models::ProblemDims dims = tiny_dims();
    models::ModelSpec spec = tiny_fpt_spec(true);
    spec.backbone->layers = 1;
    spec.backbone->d_llm = 16;
    spec.backbone->heads = 2;
    spec.backbone->d_ff = 32;
    spec.d_llm = 16;
    spec.freeze = nn::FreezePolicy::AdapterOnly;
    models::Model model(spec, dims, 22, &result.backbone);
    for (const auto& n : result.backbone.names())
        REQUIRE(model.params().at(n) == result.backbone.at(n));
}

TEST_CASE("frozen backbone tensors survive training bit-for-bit") {
    data::SyntheticConfig dcfg;
    dcfg.n_series = 3;
    dcfg.n_periods = 32;
    const auto ds = data::generate_panel(dcfg, 13);
    data::ForecastTask task;
    task.context_length = 6;
    task.horizons = {1};
    task.fcd_grid = {8, 12, 16, 20, 24};
    const auto [train_task, test_task] = data::split_by_fcd(task, 0.25);
    const auto dims = models::ProblemDims::from(ds, task);

    models::ToyLmConfig pcfg;
    pcfg.vocab = 4;
    pcfg.seq_len = 8;
    pcfg.steps = 60;
    pcfg.chain = models::ChainKind::Repeat;
    nn::StackConfig sc;
    sc.layers = 1;
    sc.d_llm = 8;
    sc.heads = 2;
    sc.d_ff = 12;
    const auto pre = models::pretrain_toy_lm(pcfg, sc, 31);

    for (auto policy : {nn::FreezePolicy::AdapterAndLayerNorms, nn::FreezePolicy::AdapterOnly}) {
        models::ModelSpec spec = tiny_fpt_spec(true);
        spec.backbone->layers = 1;
        spec.freeze = policy;
        models::Model model(spec, dims, 32, &pre.backbone);
        train::TrainConfig tc;
        tc.epochs = 2;
        train::train(model, ds, train_task, test_task, tc);
        for (const auto& n : pre.backbone.names()) {
            const bool ln_trainable = policy == nn::FreezePolicy::AdapterAndLayerNorms &&
                                      nn::is_backbone_layer_norm(n);
            if (!ln_trainable) REQUIRE(model.params().at(n) == pre.backbone.at(n));
        }
    }
}
