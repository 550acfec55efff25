#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "patchcast/dataset.hpp"
#include "patchcast/errors.hpp"
#include "patchcast/htsr.hpp"
#include "patchcast/models.hpp"
#include "patchcast/svg.hpp"
#include "patchcast/training.hpp"

namespace patchcast::experiments {

inline std::size_t thread_budget() {
    if (const char* env = std::getenv("PATCHCAST_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
        throw ConfigError("PATCHCAST_THREADS must be a positive integer");
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

struct RunSpec {
    std::string name;
    models::ModelSpec model;
    train::TrainConfig train;
};

inline void to_json(nlohmann::json& j, const RunSpec& r) {
    j = nlohmann::json{{"name", r.name},
                       {"model", r.model},
                       {"epochs", r.train.epochs},
                       {"batch_size", r.train.batch_size},
                       {"learning_rate", r.train.adam.lr},
                       {"checkpoint_cadence", r.train.checkpoint_cadence}};
}

inline void from_json(const nlohmann::json& j, RunSpec& r) {
    j.at("name").get_to(r.name);
    j.at("model").get_to(r.model);
    r.train.epochs = j.value("epochs", r.train.epochs);
    r.train.batch_size = j.value("batch_size", r.train.batch_size);
    r.train.adam.lr = j.value("learning_rate", r.train.adam.lr);
    r.train.checkpoint_cadence = j.value("checkpoint_cadence", r.train.checkpoint_cadence);
}

// One dataset, one task, many (model, training) runs, one baseline for the
// ratio columns. All per-run randomness derives from the master seed and the
// run name, so adding a run never perturbs the others.
struct ExperimentSpec {
    std::string name = "suite";
    std::uint64_t master_seed = 7;
    data::SyntheticConfig dataset;
    std::size_t context_length = 24;
    std::vector<std::size_t> horizons = {1, 2, 4, 8};
    std::vector<double> quantiles = {0.5, 0.9};
    std::size_t fcd_step = 8;
    double holdout = 0.25;
    models::ToyLmConfig pretrain;
    nn::StackConfig pretrain_stack;
    std::vector<RunSpec> runs;
    std::string baseline;

    void validate() const {
        dataset.validate();
        if (runs.empty()) throw ConfigError("experiment: at least one run required");
        std::set<std::string> names;
        for (const auto& r : runs) {
            if (r.name.empty()) throw ConfigError("experiment: run names must be nonempty");
            if (!names.insert(r.name).second)
                throw ConfigError("experiment: duplicate run name " + r.name);
            r.train.validate();
        }
        if (!names.count(baseline))
            throw ConfigError("experiment: baseline run '" + baseline + "' not in spec");
    }

    data::ForecastTask task(const data::PanelDataset& ds) const {
        data::ForecastTask t;
        t.context_length = context_length;
        t.horizons = horizons;
        t.quantiles = quantiles;
        t.fcd_grid = data::ForecastTask::spaced_grid(context_length, ds.n_periods(),
                                                     horizons.back(), fcd_step);
        t.validate(ds);
        return t;
    }

    bool needs_backbone() const {
        for (const auto& r : runs)
            if (r.model.kind == models::ModelKind::Fpt && r.model.backbone) return true;
        return false;
    }
};

inline void to_json(nlohmann::json& j, const ExperimentSpec& s) {
    j = nlohmann::json{{"name", s.name},
                       {"master_seed", s.master_seed},
                       {"n_series", s.dataset.n_series},
                       {"n_periods", s.dataset.n_periods},
                       {"context_length", s.context_length},
                       {"horizons", s.horizons},
                       {"quantiles", s.quantiles},
                       {"fcd_step", s.fcd_step},
                       {"holdout", s.holdout},
                       {"pretrain_steps", s.pretrain.steps},
                       {"runs", s.runs},
                       {"baseline", s.baseline}};
}

inline void from_json(const nlohmann::json& j, ExperimentSpec& s) {
    s.name = j.value("name", s.name);
    s.master_seed = j.value("master_seed", s.master_seed);
    s.dataset.n_series = j.value("n_series", s.dataset.n_series);
    s.dataset.n_periods = j.value("n_periods", s.dataset.n_periods);
    s.context_length = j.value("context_length", s.context_length);
    s.horizons = j.value("horizons", s.horizons);
    s.quantiles = j.value("quantiles", s.quantiles);
    s.fcd_step = j.value("fcd_step", s.fcd_step);
    s.holdout = j.value("holdout", s.holdout);
    s.pretrain.steps = j.value("pretrain_steps", s.pretrain.steps);
    j.at("runs").get_to(s.runs);
    j.at("baseline").get_to(s.baseline);
}

// Per-epoch spectral summary pulled from the run's checkpoints.
struct EpochSpectrum {
    double alpha_metric = 0.0;
    double stable_rank = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochSpectrum& e) {
    j = nlohmann::json{{"alpha_metric", e.alpha_metric}, {"stable_rank", e.stable_rank}};
}

inline void from_json(const nlohmann::json& j, EpochSpectrum& e) {
    j.at("alpha_metric").get_to(e.alpha_metric);
    j.at("stable_rank").get_to(e.stable_rank);
}

struct RunResult {
    std::string name;
    bool ok = false;
    std::string error;  // set when the run aborted
    bool use_future = true;
    std::size_t epochs = 0;
    std::size_t total_params = 0;
    std::size_t trainable_params = 0;
    train::EvalReport eval;
    train::TrainHistory history;
    std::vector<EpochSpectrum> spectra;  // one per kept checkpoint

    double ratio(std::size_t q) const {
        if (q < eval.ratio_to_baseline.size()) return eval.ratio_to_baseline[q];
        throw EvalError("run result: missing baseline ratio");
    }
};

inline void to_json(nlohmann::json& j, const RunResult& r) {
    j = nlohmann::json{{"name", r.name},
                       {"ok", r.ok},
                       {"use_future", r.use_future},
                       {"epochs", r.epochs},
                       {"total_params", r.total_params},
                       {"trainable_params", r.trainable_params}};
    if (!r.ok) {
        j["error"] = r.error;
        return;
    }
    j["eval"] = r.eval;
    j["history"] = r.history;
    j["spectra"] = r.spectra;
}

struct ComparisonReport {
    std::string suite_name;
    std::uint64_t master_seed = 0;
    std::string baseline;
    std::vector<double> quantiles;
    std::vector<RunResult> runs;  // spec order

    const RunResult& run(const std::string& name) const {
        for (const auto& r : runs)
            if (r.name == name) return r;
        throw ConfigError("comparison report: unknown run " + name);
    }

    // run names ordered by ascending P50 ratio, then P90 ratio (failed runs
    // sort last)
    std::vector<std::string> ordering() const {
        std::vector<const RunResult*> ptrs;
        for (const auto& r : runs) ptrs.push_back(&r);
        std::stable_sort(ptrs.begin(), ptrs.end(), [](const RunResult* a, const RunResult* b) {
            if (a->ok != b->ok) return a->ok;
            if (!a->ok) return false;
            // fall back to raw QWE when ratios are absent (baseline failed)
            const auto key = [](const RunResult* r) {
                const auto& v = r->eval.ratio_to_baseline.empty() ? r->eval.qwe
                                                                  : r->eval.ratio_to_baseline;
                return std::pair<double, double>(v.empty() ? 0.0 : v[0],
                                                 v.size() > 1 ? v[1] : 0.0);
            };
            return key(a) < key(b);
        });
        std::vector<std::string> out;
        for (const auto* p : ptrs) out.push_back(p->name);
        return out;
    }
};

inline void to_json(nlohmann::json& j, const ComparisonReport& r) {
    j = nlohmann::json{{"suite", r.suite_name},
                       {"master_seed", r.master_seed},
                       {"baseline", r.baseline},
                       {"quantiles", r.quantiles},
                       {"runs", r.runs},
                       {"ordering", r.ordering()}};
}

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline void write_atomic(const std::string& path, const std::string& body) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
        if (!out) throw IoError("cannot open for writing: " + path);
        out << body;
    }
    std::remove(path.c_str());
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename into place: " + path);
}

}  // namespace detail

// Table-2-style comparison rows: architecture, future-info flag, epochs, and
// per-quantile error ratios against the baseline run.
inline std::string comparison_csv(const ComparisonReport& report) {
    std::string csv = "run,future_info,epochs,trainable_params";
    for (double q : report.quantiles)
        csv += "," + train::quantile_label(q) + "_ratio";
    csv += ",status\n";
    for (const auto& name : report.ordering()) {
        const RunResult& r = report.run(name);
        csv += r.name;
        csv += r.use_future ? ",yes" : ",no";
        csv += "," + std::to_string(r.epochs);
        csv += "," + std::to_string(r.trainable_params);
        for (std::size_t q = 0; q < report.quantiles.size(); ++q)
            csv += "," + (r.ok ? detail::fmt(r.ratio(q)) : std::string());
        csv += r.ok ? ",ok\n" : ",failed: " + r.error + "\n";
    }
    return csv;
}

// Per-epoch (test loss, alpha metric, stable rank) rows across all runs --
// the data behind the loss-colored-by-alpha figure.
inline std::string loss_by_alpha_csv(const ComparisonReport& report) {
    std::string csv = "run,epoch,test_p50_qwe,alpha_metric,stable_rank\n";
    for (const auto& r : report.runs) {
        if (!r.ok) continue;
        for (std::size_t e = 0; e < r.history.test_qwe.size(); ++e) {
            csv += r.name + "," + std::to_string(e + 1) + "," +
                   detail::fmt(r.history.test_qwe[e][0]);
            if (e < r.spectra.size())
                csv += "," + detail::fmt(r.spectra[e].alpha_metric) + "," +
                       detail::fmt(r.spectra[e].stable_rank);
            else
                csv += ",,";
            csv += "\n";
        }
    }
    return csv;
}

inline plot::LossColorPlotData loss_by_alpha_series(const RunResult& r) {
    plot::LossColorPlotData data;
    for (std::size_t e = 0; e < r.history.test_qwe.size() && e < r.spectra.size(); ++e) {
        data.loss.push_back(r.history.test_qwe[e][0]);
        data.color.push_back(r.spectra[e].alpha_metric);
    }
    return data;
}

// Executes one run against the shared panel/backbone. Throws on failure; the
// suite driver converts that into a failure annotation.
inline RunResult execute_run(const RunSpec& rs, const data::PanelDataset& ds,
                             const data::ForecastTask& train_task,
                             const data::ForecastTask& test_task,
                             const nn::ParamStore* backbone, std::uint64_t master_seed,
                             const std::string& out_dir) {
    namespace fs = std::filesystem;
    const std::uint64_t child_seed = derive_seed(master_seed, rs.name);
    RunResult result;
    result.name = rs.name;
    result.use_future = rs.model.use_future;
    result.epochs = rs.train.epochs;

    const models::ProblemDims dims = models::ProblemDims::from(ds, test_task);
    const nn::ParamStore* bw =
        rs.model.kind == models::ModelKind::Fpt && rs.model.backbone ? backbone : nullptr;
    models::Model model(rs.model, dims, child_seed, bw);
    const auto [total, trainable] = model.params().parameter_count();
    result.total_params = total;
    result.trainable_params = trainable;

    train::TrainConfig tc = rs.train;
    tc.seed = child_seed;
    tc.checkpoint_dir = (fs::path(out_dir) / rs.name).string();
    result.history = train::train(model, ds, train_task, test_task, tc);

    for (const auto& ckpt : result.history.checkpoints) {
        if (ckpt.empty()) continue;
        const nn::ParamStore snap = nn::ParamStore::load(ckpt);
        const htsr::EsdReport esd = htsr::diagnose(snap);
        result.spectra.push_back({esd.alpha_metric, esd.stable_rank});
        nlohmann::json j = esd;
        detail::write_atomic(ckpt + ".esd.json", j.dump(2));
    }

    result.eval = train::evaluate(model, ds, test_task);
    result.ok = true;
    return result;
}

// Runs the whole spec: one shared synthetic panel, one shared pretrained
// backbone, independent child-seeded runs (parallel up to PATCHCAST_THREADS),
// then baseline ratios and the joined report. A run that throws is recorded
// as failed; the suite still reports the others unless the baseline died.
inline ComparisonReport run_suite(const ExperimentSpec& spec, const std::string& out_dir) {
    spec.validate();
    std::filesystem::create_directories(out_dir);

    const data::PanelDataset ds =
        data::generate_panel(spec.dataset, derive_seed(spec.master_seed, "dataset"));
    const data::ForecastTask full_task = spec.task(ds);
    const auto [train_task, test_task] = data::split_by_fcd(full_task, spec.holdout);

    nn::ParamStore backbone;
    if (spec.needs_backbone()) {
        models::PretrainResult pre = models::pretrain_toy_lm(
            spec.pretrain, spec.pretrain_stack, derive_seed(spec.master_seed, "pretrain"));
        backbone = std::move(pre.backbone);
        backbone.save((std::filesystem::path(out_dir) / "backbone.ptwf").string());
    }

    ComparisonReport report;
    report.suite_name = spec.name;
    report.master_seed = spec.master_seed;
    report.baseline = spec.baseline;
    report.quantiles = spec.quantiles;
    report.runs.resize(spec.runs.size());

    const std::size_t workers = std::min(thread_budget(), spec.runs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t i = next.fetch_add(1); i < spec.runs.size(); i = next.fetch_add(1)) {
            try {
                report.runs[i] = execute_run(spec.runs[i], ds, train_task, test_task,
                                             &backbone, spec.master_seed, out_dir);
            } catch (const std::exception& e) {
                report.runs[i].name = spec.runs[i].name;
                report.runs[i].ok = false;
                report.runs[i].error = e.what();
            }
        }
    };
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    const RunResult& base = report.run(spec.baseline);
    if (base.ok) {
        for (auto& r : report.runs) {
            if (!r.ok) continue;
            r.eval.baseline_name = spec.baseline;
            r.eval.ratio_to_baseline.clear();
            for (std::size_t q = 0; q < r.eval.qwe.size(); ++q) {
                if (!(base.eval.qwe[q] > 0.0))
                    throw EvalError("suite: baseline QWE is zero, ratios undefined");
                r.eval.ratio_to_baseline.push_back(r.eval.qwe[q] / base.eval.qwe[q]);
            }
        }
    }

    nlohmann::json j = report;
    namespace fs = std::filesystem;
    detail::write_atomic((fs::path(out_dir) / "comparison.json").string(), j.dump(2));
    detail::write_atomic((fs::path(out_dir) / "comparison.csv").string(),
                         comparison_csv(report));
    detail::write_atomic((fs::path(out_dir) / "loss_by_alpha.csv").string(),
                         loss_by_alpha_csv(report));
    for (const auto& r : report.runs) {
        if (!r.ok || r.spectra.empty()) continue;
        plot::render_loss_by_color_svg(
            loss_by_alpha_series(r),
            (fs::path(out_dir) / (r.name + "_loss_by_alpha.svg")).string());
    }
    return report;
}

// The six-run comparison: two adapter-only baselines, the null-decoder
// wiring, two frozen-backbone-with-trainable-layer-norm variants, and the
// fully frozen backbone. All share the pretrained decoder-only backbone, the
// w=12/s=6 patching, and the future-information inputs.
inline ExperimentSpec canonical_suite(std::uint64_t master_seed = 7) {
    ExperimentSpec spec;
    spec.name = "canonical";
    spec.master_seed = master_seed;
    spec.baseline = "linear_only";
    spec.pretrain_stack.kind = nn::StackKind::DecoderOnly;

    models::ModelSpec base;
    base.kind = models::ModelKind::Fpt;
    base.patch.window = 12;
    base.patch.stride = 6;
    base.use_future = true;

    train::TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 64;
    tc.adam.lr = 2e-3;

    {
        models::ModelSpec m = base;
        m.backbone = std::nullopt;
        m.adapter = nn::AdapterKind::Linear;
        m.output = nn::AdapterKind::Linear;
        m.expand_to_series = true;
        spec.runs.push_back({"linear_only", m, tc});
    }
    {
        models::ModelSpec m = base;
        m.backbone = std::nullopt;
        m.adapter = nn::AdapterKind::MLP2;
        m.output = nn::AdapterKind::MLP2;
        m.expand_to_series = true;
        spec.runs.push_back({"mlp_only", m, tc});
    }
    {
        models::ModelSpec m = base;
        m.backbone = std::nullopt;  // adapter wired straight into the output
        m.adapter = nn::AdapterKind::Linear;
        m.output = nn::AdapterKind::Linear;
        spec.runs.push_back({"no_decoder", m, tc});
    }
    {
        models::ModelSpec m = base;
        m.backbone = nn::StackConfig{};
        m.adapter = nn::AdapterKind::Linear;
        m.output = nn::AdapterKind::Linear;
        m.freeze = nn::FreezePolicy::AdapterAndLayerNorms;
        spec.runs.push_back({"fpt_ln_linear", m, tc});
    }
    {
        models::ModelSpec m = base;
        m.backbone = nn::StackConfig{};
        m.adapter = nn::AdapterKind::MLP2;
        m.output = nn::AdapterKind::Linear;
        m.freeze = nn::FreezePolicy::AdapterAndLayerNorms;
        spec.runs.push_back({"fpt_ln_mlp", m, tc});
    }
    {
        models::ModelSpec m = base;
        m.backbone = nn::StackConfig{};
        m.adapter = nn::AdapterKind::Linear;
        m.output = nn::AdapterKind::Linear;
        m.freeze = nn::FreezePolicy::AdapterOnly;
        spec.runs.push_back({"fpt_frozen", m, tc});
    }
    return spec;
}

}  // namespace patchcast::experiments
