#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchcast/dataset.hpp"
#include "patchcast/errors.hpp"
#include "patchcast/models.hpp"
#include "patchcast/optimizer.hpp"

namespace patchcast::train {

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    AdamConfig adam;
    std::uint64_t seed = 0;
    std::size_t checkpoint_cadence = 1;  // epochs between checkpoints
    std::string checkpoint_dir;          // empty = keep no checkpoints

    void validate() const {
        if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
        if (!(adam.lr >= 0.0)) throw ConfigError("train config: learning rate must be >= 0");
    }
};

inline std::string quantile_label(double tau) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "P%02d", static_cast<int>(std::lround(tau * 100.0)));
    return buf;
}

// Per-quantile quantile-weighted errors, QWE_tau = sum ell_tau / sum |y|,
// with optional ratios against a named baseline report.
struct EvalReport {
    std::vector<double> quantiles;
    std::vector<double> qwe;                          // per quantile
    std::vector<std::vector<double>> qwe_by_horizon;  // [horizon][quantile]
    std::vector<std::size_t> horizons;
    double crossing_rate = 0.0;  // share of grid cells with quantile crossings
    std::string baseline_name;
    std::vector<double> ratio_to_baseline;  // empty when no baseline given

    double qwe_at(double tau) const {
        for (std::size_t i = 0; i < quantiles.size(); ++i)
            if (quantiles[i] == tau) return qwe[i];
        throw EvalError("quantile not present in report");
    }
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
    j = nlohmann::json{{"quantiles", r.quantiles},
                       {"qwe", r.qwe},
                       {"horizons", r.horizons},
                       {"qwe_by_horizon", r.qwe_by_horizon},
                       {"crossing_rate", r.crossing_rate}};
    if (!r.ratio_to_baseline.empty()) {
        j["baseline"] = r.baseline_name;
        j["ratio_to_baseline"] = r.ratio_to_baseline;
    }
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
    j.at("quantiles").get_to(r.quantiles);
    j.at("qwe").get_to(r.qwe);
    j.at("horizons").get_to(r.horizons);
    j.at("qwe_by_horizon").get_to(r.qwe_by_horizon);
    j.at("crossing_rate").get_to(r.crossing_rate);
    r.baseline_name = j.value("baseline", std::string());
    r.ratio_to_baseline = j.value("ratio_to_baseline", std::vector<double>{});
}

inline EvalReport evaluate(const models::Model& model, const data::PanelDataset& ds,
                           const data::ForecastTask& task,
                           const EvalReport* baseline = nullptr,
                           const std::string& baseline_name = "",
                           std::size_t batch_size = 64) {
    if (task.fcd_grid.empty()) throw EvalError("evaluate: empty test set");
    // fixed shuffle seed: evaluation is invariant to batch partitioning
    const auto batches = data::make_batches(ds, task, batch_size, 0);
    const std::size_t Q = task.quantiles.size(), H = task.horizons.size();
    std::vector<double> loss_sum(Q, 0.0);
    std::vector<std::vector<double>> loss_by_h(H, std::vector<double>(Q, 0.0));
    std::vector<double> abs_by_h(H, 0.0);
    double abs_sum = 0.0;
    std::size_t cells = 0, crossed = 0;
    for (const auto& batch : batches) {
        const auto grid = model.forward_forecast(batch);
        for (std::size_t b = 0; b < batch.batch_size(); ++b)
            for (std::size_t h = 0; h < H; ++h) {
                const double y = batch.labels.at2(b, h);
                abs_sum += std::abs(y);
                abs_by_h[h] += std::abs(y);
                ++cells;
                bool cross = false;
                for (std::size_t q = 0; q < Q; ++q) {
                    const double l =
                        quantile_loss(y, grid.values.at3(b, h, q), task.quantiles[q]);
                    loss_sum[q] += l;
                    loss_by_h[h][q] += l;
                    if (q > 0 && task.quantiles[q] > task.quantiles[q - 1] &&
                        grid.values.at3(b, h, q) < grid.values.at3(b, h, q - 1))
                        cross = true;
                }
                if (cross) ++crossed;
            }
    }
    if (cells == 0) throw EvalError("evaluate: empty test set");
    EvalReport report;
    report.quantiles = task.quantiles;
    report.horizons = task.horizons;
    report.crossing_rate = static_cast<double>(crossed) / static_cast<double>(cells);
    for (std::size_t q = 0; q < Q; ++q)
        report.qwe.push_back(abs_sum > 0.0 ? loss_sum[q] / abs_sum : loss_sum[q]);
    for (std::size_t h = 0; h < H; ++h) {
        std::vector<double> row;
        for (std::size_t q = 0; q < Q; ++q)
            row.push_back(abs_by_h[h] > 0.0 ? loss_by_h[h][q] / abs_by_h[h]
                                            : loss_by_h[h][q]);
        report.qwe_by_horizon.push_back(std::move(row));
    }
    if (baseline) {
        report.baseline_name = baseline_name;
        for (std::size_t q = 0; q < Q; ++q) {
            if (!(baseline->qwe[q] > 0.0))
                throw EvalError("evaluate: ratio undefined, baseline QWE is zero");
            report.ratio_to_baseline.push_back(report.qwe[q] / baseline->qwe[q]);
        }
    }
    return report;
}

struct TrainHistory {
    std::vector<double> train_loss;                  // per epoch, mean per cell
    std::vector<std::vector<double>> test_qwe;       // per epoch, per quantile
    std::vector<std::string> checkpoints;            // per epoch ("" if not kept)
    std::vector<double> quantiles;
};

inline void to_json(nlohmann::json& j, const TrainHistory& h) {
    j = nlohmann::json{{"train_loss", h.train_loss},
                       {"test_qwe", h.test_qwe},
                       {"checkpoints", h.checkpoints},
                       {"quantiles", h.quantiles}};
}

inline void from_json(const nlohmann::json& j, TrainHistory& h) {
    j.at("train_loss").get_to(h.train_loss);
    j.at("test_qwe").get_to(h.test_qwe);
    j.at("checkpoints").get_to(h.checkpoints);
    j.at("quantiles").get_to(h.quantiles);
}

// Deterministic training loop: per-epoch shuffles derive from cfg.seed, every
// `checkpoint_cadence` epochs the parameters go to
// <checkpoint_dir>/epoch_<k>.ptwf, and the history records test QWE per epoch.
inline TrainHistory train(models::Model& model, const data::PanelDataset& ds,
                          const data::ForecastTask& train_task,
                          const data::ForecastTask& test_task, const TrainConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    if (!cfg.checkpoint_dir.empty()) fs::create_directories(cfg.checkpoint_dir);

    TrainHistory history;
    history.quantiles = train_task.quantiles;
    AdamState state;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches = data::make_batches(
            ds, train_task, cfg.batch_size,
            derive_seed(cfg.seed, "epoch" + std::to_string(epoch)));
        double loss_sum = 0.0;
        std::size_t cells = 0;
        for (const auto& batch : batches) {
            std::map<std::string, Tensor> grads;
            const double loss = model.loss_and_grads(batch, train_task.quantiles, grads);
            if (!std::isfinite(loss))
                throw TrainingError("training aborted: non-finite loss at epoch " +
                                    std::to_string(epoch) +
                                    " (last good checkpoint retained)");
            adam_step(model.params(), grads, state, cfg.adam);
            loss_sum += loss;
            cells += batch.batch_size() * train_task.horizons.size() *
                     train_task.quantiles.size();
        }
        history.train_loss.push_back(loss_sum / static_cast<double>(cells));

        const EvalReport report = evaluate(model, ds, test_task, nullptr, "", cfg.batch_size);
        history.test_qwe.push_back(report.qwe);

        std::string ckpt;
        if (!cfg.checkpoint_dir.empty() && (epoch + 1) % cfg.checkpoint_cadence == 0) {
            ckpt = (fs::path(cfg.checkpoint_dir) /
                    ("epoch_" + std::to_string(epoch + 1) + ".ptwf"))
                       .string();
            model.params().save(ckpt);
        }
        history.checkpoints.push_back(ckpt);
    }
    return history;
}

}  // namespace patchcast::train
