// patchcast CLI: synthetic panel generation, toy pretraining, adapter
// training, evaluation, spectral diagnostics, suite execution, and SVG plots.
//
// Exit codes: 0 success, 1 runtime failure, 2 validation failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "patchcast/dataset.hpp"
#include "patchcast/errors.hpp"
#include "patchcast/experiments.hpp"
#include "patchcast/htsr.hpp"
#include "patchcast/models.hpp"
#include "patchcast/svg.hpp"
#include "patchcast/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace patchcast;

namespace {

bool g_verbose = false;

void note(const std::string& msg) {
    if (g_verbose) std::cout << "[patchcast] " << msg << "\n";
}

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ParseError(path + ": malformed JSON");
    return j;
}

void write_atomic(const std::string& path, const std::string& body) {
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

void echo_config(const std::string& out_dir, const json& effective) {
    write_atomic((fs::path(out_dir) / "effective_config.json").string(),
                 effective.dump(2) + "\n");
}

// FNV-1a over the file bytes, hex-encoded
std::string file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::uint64_t h = 1469598103934665603ull;
    char buf[1 << 14];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!in) break;
    }
    char hex[20];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

struct CommonArgs {
    std::string config;
    std::string out = ".";
    std::uint64_t seed = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config, "JSON config file");
    cmd->add_option("--out", args.out, "output directory")->capture_default_str();
    cmd->add_option("--seed", args.seed, "master seed")->capture_default_str();
    cmd->add_flag("--verbose", g_verbose, "progress output");
}

// --- task / data plumbing shared by train and evaluate ----------------------

struct PipelineConfig {
    std::string data_dir;  // CSV panel; empty = synthesize
    data::SyntheticConfig dataset;
    std::uint64_t dataset_seed = 0;  // 0 = derive from the master seed
    std::size_t context_length = 24;
    std::vector<std::size_t> horizons = {1, 2, 4, 8};
    std::vector<double> quantiles = {0.5, 0.9};
    std::size_t fcd_step = 8;
    double holdout = 0.25;
    models::ModelSpec model;
    std::string backbone;  // .ptwf path, optional
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    std::size_t checkpoint_cadence = 1;
};

void from_json(const json& j, PipelineConfig& c) {
    c.data_dir = j.value("data_dir", c.data_dir);
    if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
    c.dataset_seed = j.value("dataset_seed", c.dataset_seed);
    c.context_length = j.value("context_length", c.context_length);
    c.horizons = j.value("horizons", c.horizons);
    c.quantiles = j.value("quantiles", c.quantiles);
    c.fcd_step = j.value("fcd_step", c.fcd_step);
    c.holdout = j.value("holdout", c.holdout);
    if (j.contains("model")) j.at("model").get_to(c.model);
    c.backbone = j.value("backbone", c.backbone);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.checkpoint_cadence = j.value("checkpoint_cadence", c.checkpoint_cadence);
}

void to_json(json& j, const PipelineConfig& c) {
    j = json{{"data_dir", c.data_dir},
             {"dataset", c.dataset},
             {"dataset_seed", c.dataset_seed},
             {"context_length", c.context_length},
             {"horizons", c.horizons},
             {"quantiles", c.quantiles},
             {"fcd_step", c.fcd_step},
             {"holdout", c.holdout},
             {"model", c.model},
             {"backbone", c.backbone},
             {"epochs", c.epochs},
             {"batch_size", c.batch_size},
             {"learning_rate", c.learning_rate},
             {"checkpoint_cadence", c.checkpoint_cadence}};
}

data::PanelDataset load_or_generate(const PipelineConfig& cfg, std::uint64_t master_seed) {
    if (!cfg.data_dir.empty()) {
        note("loading panel from " + cfg.data_dir);
        return data::load_panel_csv(data::PanelCsvPaths::in_dir(cfg.data_dir));
    }
    const std::uint64_t ds_seed =
        cfg.dataset_seed ? cfg.dataset_seed : derive_seed(master_seed, "dataset");
    note("generating synthetic panel, seed " + std::to_string(ds_seed));
    return data::generate_panel(cfg.dataset, ds_seed);
}

data::ForecastTask make_task(const PipelineConfig& cfg, const data::PanelDataset& ds) {
    data::ForecastTask t;
    t.context_length = cfg.context_length;
    t.horizons = cfg.horizons;
    t.quantiles = cfg.quantiles;
    t.fcd_grid = data::ForecastTask::spaced_grid(cfg.context_length, ds.n_periods(),
                                                 cfg.horizons.back(), cfg.fcd_step);
    t.validate(ds);
    return t;
}

// rebuild a model and overwrite its tensors from a weight file
models::Model restore_model(const models::ModelSpec& spec, const models::ProblemDims& dims,
                            std::uint64_t seed, const std::string& weights) {
    models::Model model(spec, dims, seed);
    const nn::ParamStore loaded = nn::ParamStore::load(weights);
    for (const auto& name : model.params().names())
        model.params().at(name) = loaded.at(name);
    return model;
}

// --- subcommands -------------------------------------------------------------

int cmd_generate(const CommonArgs& args, std::size_t series_override,
                 std::size_t periods_override) {
    data::SyntheticConfig cfg;
    if (!args.config.empty()) load_json(args.config).get_to(cfg);
    if (series_override) cfg.n_series = series_override;
    if (periods_override) cfg.n_periods = periods_override;
    cfg.validate();

    const data::PanelDataset ds = data::generate_panel(cfg, args.seed);
    fs::create_directories(args.out);
    data::save_panel_csv(ds, args.out);

    const auto paths = data::PanelCsvPaths::in_dir(args.out);
    std::uint64_t combined = 1469598103934665603ull;
    json files = json::object();
    for (const std::string& p : {paths.target, paths.time_features, paths.static_features,
                                 paths.future_features}) {
        if (!fs::exists(p)) continue;
        const std::string sum = file_checksum(p);
        files[fs::path(p).filename().string()] = sum;
        for (char c : sum) {
            combined ^= static_cast<unsigned char>(c);
            combined *= 1099511628211ull;
        }
    }
    char hex[20];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(combined));

    json manifest{{"config", cfg}, {"seed", args.seed}, {"checksum", hex}, {"files", files}};
    write_atomic((fs::path(args.out) / "manifest.json").string(), manifest.dump(2) + "\n");
    echo_config(args.out, json(cfg));
    std::cout << "generated " << ds.n_series() << " series x " << ds.n_periods()
              << " periods, checksum " << hex << "\n";
    return 0;
}

int cmd_pretrain(const CommonArgs& args) {
    models::ToyLmConfig cfg;
    nn::StackConfig stack;
    json effective;
    if (!args.config.empty()) {
        const json j = load_json(args.config);
        cfg.vocab = j.value("vocab", cfg.vocab);
        cfg.seq_len = j.value("seq_len", cfg.seq_len);
        cfg.steps = j.value("steps", cfg.steps);
        cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        stack.layers = j.value("layers", stack.layers);
        stack.d_llm = j.value("d_llm", stack.d_llm);
        stack.heads = j.value("heads", stack.heads);
        stack.d_ff = j.value("d_ff", stack.d_ff);
    }
    effective = json{{"vocab", cfg.vocab},     {"seq_len", cfg.seq_len},
                     {"steps", cfg.steps},     {"learning_rate", cfg.learning_rate},
                     {"batch_size", cfg.batch_size}, {"layers", stack.layers},
                     {"d_llm", stack.d_llm},   {"heads", stack.heads},
                     {"d_ff", stack.d_ff},     {"seed", args.seed}};

    note("pretraining toy backbone");
    const models::PretrainResult result = models::pretrain_toy_lm(cfg, stack, args.seed);
    fs::create_directories(args.out);
    result.backbone.save((fs::path(args.out) / "backbone.ptwf").string());
    json report{{"final_xent", result.final_xent},
                {"next_token_accuracy", result.next_token_accuracy},
                {"unigram_entropy", result.unigram_entropy}};
    write_atomic((fs::path(args.out) / "pretrain.json").string(), report.dump(2) + "\n");
    echo_config(args.out, effective);
    std::cout << "pretrained: xent " << result.final_xent << " (unigram "
              << result.unigram_entropy << "), accuracy " << result.next_token_accuracy
              << "\n";
    return 0;
}

int cmd_train(const CommonArgs& args, double lr_override, long epochs_override) {
    PipelineConfig cfg;
    if (!args.config.empty()) load_json(args.config).get_to(cfg);
    if (lr_override >= 0.0) cfg.learning_rate = lr_override;
    if (epochs_override >= 0) cfg.epochs = static_cast<std::size_t>(epochs_override);

    const data::PanelDataset ds = load_or_generate(cfg, args.seed);
    const data::ForecastTask task = make_task(cfg, ds);
    const auto [train_task, test_task] = data::split_by_fcd(task, cfg.holdout);

    nn::ParamStore backbone;
    const bool use_backbone = !cfg.backbone.empty();
    if (use_backbone) backbone = nn::ParamStore::load(cfg.backbone);
    if (cfg.model.backbone && !use_backbone)
        note("no pretrained backbone supplied; backbone weights are random-initialized");

    const models::ProblemDims dims = models::ProblemDims::from(ds, task);
    models::Model model(cfg.model, dims, args.seed, use_backbone ? &backbone : nullptr);

    train::TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.adam.lr = cfg.learning_rate;
    tc.seed = args.seed;
    tc.checkpoint_cadence = cfg.checkpoint_cadence;
    fs::create_directories(args.out);
    tc.checkpoint_dir = (fs::path(args.out) / "checkpoints").string();

    note("training " + std::to_string(cfg.epochs) + " epochs");
    const train::TrainHistory history = train::train(model, ds, train_task, test_task, tc);

    model.params().save((fs::path(args.out) / "model.ptwf").string());
    write_atomic((fs::path(args.out) / "history.json").string(),
                 json(history).dump(2) + "\n");
    echo_config(args.out, json(cfg));
    std::cout << "trained " << cfg.epochs << " epochs, final train loss "
              << history.train_loss.back() << ", final test P50 QWE "
              << history.test_qwe.back()[0] << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& weights,
                 const std::string& baseline_path) {
    if (args.config.empty()) throw ConfigError("evaluate: --config is required");
    PipelineConfig cfg;
    load_json(args.config).get_to(cfg);
    if (weights.empty()) throw ConfigError("evaluate: --weights is required");

    const data::PanelDataset ds = load_or_generate(cfg, args.seed);
    const data::ForecastTask task = make_task(cfg, ds);
    const auto [train_task, test_task] = data::split_by_fcd(task, cfg.holdout);
    (void)train_task;

    const models::ProblemDims dims = models::ProblemDims::from(ds, task);
    const models::Model model = restore_model(cfg.model, dims, args.seed, weights);

    train::EvalReport baseline;
    const bool has_baseline = !baseline_path.empty();
    if (has_baseline) load_json(baseline_path).get_to(baseline);
    const train::EvalReport report =
        train::evaluate(model, ds, test_task, has_baseline ? &baseline : nullptr,
                        has_baseline ? fs::path(baseline_path).stem().string() : "");

    fs::create_directories(args.out);
    write_atomic((fs::path(args.out) / "eval.json").string(), json(report).dump(2) + "\n");
    echo_config(args.out, json(cfg));
    for (std::size_t q = 0; q < report.quantiles.size(); ++q) {
        std::cout << train::quantile_label(report.quantiles[q]) << " QWE " << report.qwe[q];
        if (!report.ratio_to_baseline.empty())
            std::cout << " (ratio " << report.ratio_to_baseline[q] << ")";
        std::cout << "\n";
    }
    return 0;
}

std::string sanitize(const std::string& name) {
    std::string out = name;
    for (char& c : out)
        if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
    return out;
}

int cmd_diagnose(const CommonArgs& args, const std::string& weights,
                 const std::string& layer_filter, double ks_threshold) {
    if (weights.empty()) throw ConfigError("diagnose: --weights is required");
    const nn::ParamStore ps = nn::ParamStore::load(weights);
    htsr::DiagnoseConfig cfg;
    cfg.layer_filter = layer_filter;
    cfg.ks_threshold = ks_threshold;
    const htsr::EsdReport report = htsr::diagnose(ps, cfg);

    fs::create_directories(args.out);
    write_atomic((fs::path(args.out) / "esd.json").string(), json(report).dump(2) + "\n");
    for (const auto& layer : report.layers) {
        const std::string base = (fs::path(args.out) / sanitize(layer.layer)).string();
        htsr::write_ccdf_csv(htsr::ccdf(layer.esd), base + "_ccdf.csv");
        if (const htsr::PowerLawFit* fit = layer.best_fit())
            plot::render_ccdf_svg(plot::ccdf_plot_data(layer.esd, *fit), base + "_ccdf.svg");
    }
    echo_config(args.out, json{{"weights", weights},
                               {"layer_filter", layer_filter},
                               {"ks_threshold", ks_threshold}});
    std::cout << "alpha metric " << report.alpha_metric << " over "
              << report.alpha_layer_count << "/" << report.layers.size()
              << " layers, mean stable rank " << report.stable_rank << "\n";
    return 0;
}

int cmd_suite(const CommonArgs& args) {
    experiments::ExperimentSpec spec =
        experiments::canonical_suite(args.seed ? args.seed : 7);
    if (!args.config.empty()) load_json(args.config).get_to(spec);
    if (args.seed) spec.master_seed = args.seed;

    note("running suite '" + spec.name + "' with " + std::to_string(spec.runs.size()) +
         " runs");
    const experiments::ComparisonReport report = experiments::run_suite(spec, args.out);
    echo_config(args.out, json(spec));

    std::cout << "run,P50_ratio,P90_ratio\n";
    for (const auto& name : report.ordering()) {
        const auto& r = report.run(name);
        if (!r.ok) {
            std::cout << name << ",failed: " << r.error << "\n";
            continue;
        }
        std::cout << name;
        for (std::size_t q = 0; q < report.quantiles.size(); ++q)
            std::cout << "," << r.ratio(q);
        std::cout << "\n";
    }
    return 0;
}

int cmd_plot(const CommonArgs& args, const std::string& report_path) {
    if (report_path.empty()) throw ConfigError("plot: --report is required");
    const json j = load_json(report_path);
    fs::create_directories(args.out);
    if (j.contains("layers")) {  // spectral report
        htsr::EsdReport report;
        // reconstruct only what the plots need
        for (const auto& lj : j.at("layers")) {
            htsr::LayerDiagnostics d;
            d.layer = lj.at("layer").get<std::string>();
            d.esd.layer = d.layer;
            lj.at("eigenvalues").get_to(d.esd.eigenvalues);
            if (lj.contains("pl")) {
                htsr::PowerLawFit f;
                f.alpha = lj.at("pl").at("alpha").get<double>();
                f.lambda_min = lj.at("pl").at("lambda_min").get<double>();
                f.ks_distance = lj.at("pl").at("ks_distance").get<double>();
                d.pl = f;
            }
            report.layers.push_back(std::move(d));
        }
        std::size_t rendered = 0;
        for (const auto& layer : report.layers) {
            if (!layer.pl) continue;
            plot::render_ccdf_svg(
                plot::ccdf_plot_data(layer.esd, *layer.pl),
                (fs::path(args.out) / (sanitize(layer.layer) + "_ccdf.svg")).string());
            ++rendered;
        }
        std::cout << "rendered " << rendered << " CCDF plots\n";
        return 0;
    }
    if (j.contains("runs")) {  // comparison report
        experiments::ComparisonReport report;
        for (const auto& rj : j.at("runs")) {
            experiments::RunResult r;
            r.name = rj.at("name").get<std::string>();
            r.ok = rj.at("ok").get<bool>();
            if (r.ok) {
                rj.at("history").get_to(r.history);
                rj.at("spectra").get_to(r.spectra);
            }
            report.runs.push_back(std::move(r));
        }
        std::size_t rendered = 0;
        for (const auto& r : report.runs) {
            if (!r.ok || r.spectra.empty()) continue;
            plot::render_loss_by_color_svg(
                experiments::loss_by_alpha_series(r),
                (fs::path(args.out) / (sanitize(r.name) + "_loss_by_alpha.svg")).string());
            ++rendered;
        }
        std::cout << "rendered " << rendered << " loss plots\n";
        return 0;
    }
    throw ParseError(report_path + ": unrecognized report layout");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"patchcast: frozen-backbone quantile forecasting with spectral diagnostics"};
    app.require_subcommand(1);

    CommonArgs gen_args, pre_args, train_args, eval_args, diag_args, suite_args, plot_args;
    std::size_t gen_series = 0, gen_periods = 0;
    double train_lr = -1.0;
    long train_epochs = -1;
    std::string eval_weights, eval_baseline;
    std::string diag_weights, diag_filter;
    double diag_ks = 0.10;
    std::string plot_report;

    auto* gen = app.add_subcommand("generate", "synthesize a CSV demand panel");
    add_common(gen, gen_args);
    gen->add_option("--series", gen_series, "override series count");
    gen->add_option("--periods", gen_periods, "override period count");

    auto* pre = app.add_subcommand("pretrain", "pretrain the toy backbone");
    add_common(pre, pre_args);

    auto* trn = app.add_subcommand("train", "train a forecaster");
    add_common(trn, train_args);
    trn->add_option("--lr", train_lr, "override learning rate");
    trn->add_option("--epochs", train_epochs, "override epoch count");

    auto* evl = app.add_subcommand("evaluate", "evaluate a trained forecaster");
    add_common(evl, eval_args);
    evl->add_option("--weights", eval_weights, "model weight file (.ptwf)");
    evl->add_option("--baseline", eval_baseline, "baseline eval.json for ratio columns");

    auto* dia = app.add_subcommand("diagnose", "spectral diagnostics of a checkpoint");
    add_common(dia, diag_args);
    dia->add_option("--weights", diag_weights, "weight file (.ptwf)");
    dia->add_option("--layer-filter", diag_filter, "substring filter on layer names");
    dia->add_option("--ks-threshold", diag_ks, "KS inclusion threshold for the alpha metric")
        ->capture_default_str();

    auto* sut = app.add_subcommand("suite", "run a full comparison suite");
    add_common(sut, suite_args);

    auto* plt = app.add_subcommand("plot", "render SVG plots from a report");
    add_common(plt, plot_args);
    plt->add_option("--report", plot_report, "esd.json or comparison.json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_generate(gen_args, gen_series, gen_periods);
        if (pre->parsed()) return cmd_pretrain(pre_args);
        if (trn->parsed()) return cmd_train(train_args, train_lr, train_epochs);
        if (evl->parsed()) return cmd_evaluate(eval_args, eval_weights, eval_baseline);
        if (dia->parsed()) return cmd_diagnose(diag_args, diag_weights, diag_filter, diag_ks);
        if (sut->parsed()) return cmd_suite(suite_args);
        if (plt->parsed()) return cmd_plot(plot_args, plot_report);
    } catch (const ConfigError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
