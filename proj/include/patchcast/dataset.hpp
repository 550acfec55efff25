#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchcast/errors.hpp"
#include "patchcast/rng.hpp"
#include "patchcast/tensor.hpp"

namespace patchcast::data {

// The (Y, Xt, Xs, Xf) panel for N series over T periods.
struct PanelDataset {
    std::vector<std::string> series_ids;  // length N
    Tensor target;                        // N x T demand units
    Tensor time_features;                 // N x T x d
    Tensor static_features;               // N x m
    Tensor future_features;               // N x T x d_f (known in advance)
    std::vector<std::string> period_index;  // length T

    std::size_t n_series() const { return target.dim(0); }
    std::size_t n_periods() const { return target.dim(1); }
    std::size_t n_time_feats() const { return time_features.dim(2); }
    std::size_t n_statics() const { return static_features.dim(1); }
    std::size_t n_future_feats() const {
        return future_features.numel() == 0 ? 0 : future_features.dim(2);
    }

    void validate() const {
        const std::size_t N = n_series(), T = n_periods();
        if (series_ids.size() != N || period_index.size() != T)
            throw ConfigError("panel: id/period label counts disagree with tensors");
        if (time_features.dim(0) != N || time_features.dim(1) != T ||
            static_features.dim(0) != N)
            throw ConfigError("panel: tensor N/T mismatch");
        if (future_features.numel() != 0 &&
            (future_features.dim(0) != N || future_features.dim(1) != T))
            throw ConfigError("panel: future feature N/T mismatch");
        for (const Tensor* t : {&target, &time_features, &static_features, &future_features})
            if (!t->all_finite()) throw ConfigError("panel: non-finite values after ingestion");
    }
};

// ---------------------------------------------------------------------------
// Synthetic demand panel. Per series: lognormal base level x weekly
// seasonality x linear trend, plus promotion spikes driven by the first
// future-feature column, plus count noise. Deterministic in (config, seed).

struct SyntheticConfig {
    std::size_t n_series = 200;
    std::size_t n_periods = 160;
    std::size_t n_time_feats = 6;
    std::size_t n_statics = 4;
    std::size_t n_future_feats = 2;
    double base_mu = 2.0;          // log-scale mean of the base level
    double base_sigma = 0.7;       // log-scale spread across series
    double seasonal_amp = 0.3;     // max weekly seasonality amplitude
    double trend_max = 0.5;        // max relative trend over the full panel
    double promo_prob = 0.05;      // per-period promotion probability
    double promo_lift = 1.5;       // spike height relative to base level
    double noise = 1.0;            // 0 = exact mean, 1 = full count noise

    void validate() const {
        if (n_series < 1 || n_periods < 8 || n_time_feats < 1 || n_statics < 1)
            throw ConfigError("synthetic config requires N >= 1, T >= 8, d >= 1, m >= 1");
    }
};

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
    j = nlohmann::json{{"n_series", c.n_series},
                       {"n_periods", c.n_periods},
                       {"n_time_feats", c.n_time_feats},
                       {"n_statics", c.n_statics},
                       {"n_future_feats", c.n_future_feats},
                       {"base_mu", c.base_mu},
                       {"base_sigma", c.base_sigma},
                       {"seasonal_amp", c.seasonal_amp},
                       {"trend_max", c.trend_max},
                       {"promo_prob", c.promo_prob},
                       {"promo_lift", c.promo_lift},
                       {"noise", c.noise}};
}

inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
    c.n_series = j.value("n_series", c.n_series);
    c.n_periods = j.value("n_periods", c.n_periods);
    c.n_time_feats = j.value("n_time_feats", c.n_time_feats);
    c.n_statics = j.value("n_statics", c.n_statics);
    c.n_future_feats = j.value("n_future_feats", c.n_future_feats);
    c.base_mu = j.value("base_mu", c.base_mu);
    c.base_sigma = j.value("base_sigma", c.base_sigma);
    c.seasonal_amp = j.value("seasonal_amp", c.seasonal_amp);
    c.trend_max = j.value("trend_max", c.trend_max);
    c.promo_prob = j.value("promo_prob", c.promo_prob);
    c.promo_lift = j.value("promo_lift", c.promo_lift);
    c.noise = j.value("noise", c.noise);
}

// Deterministic mean demand for series parameters (base, amp, phase, slope)
// at period t, before promotions and noise.
inline double demand_mean(double base, double amp, double phase, double slope,
                          std::size_t t) {
    const double seas = 1.0 + amp * std::sin(2.0 * M_PI * static_cast<double>(t % 7) / 7.0 +
                                             phase);
    const double trend = 1.0 + slope * static_cast<double>(t);
    return base * seas * trend;
}

inline PanelDataset generate_panel(const SyntheticConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t N = cfg.n_series, T = cfg.n_periods;
    const std::size_t d = cfg.n_time_feats, m = cfg.n_statics, df = cfg.n_future_feats;

    Rng rng_series(derive_seed(seed, "series"));
    Rng rng_promo(derive_seed(seed, "promo"));
    Rng rng_noise(derive_seed(seed, "noise"));
    Rng rng_extra(derive_seed(seed, "extra_feats"));

    PanelDataset ds;
    ds.target = Tensor({N, T});
    ds.time_features = Tensor({N, T, d});
    ds.static_features = Tensor({N, m});
    ds.future_features = Tensor({N, T, std::max<std::size_t>(df, 1)});
    if (df == 0) ds.future_features = Tensor({N, T, 0});

    for (std::size_t i = 0; i < N; ++i) {
        ds.series_ids.push_back("s" + std::to_string(i));
        const double base = std::exp(cfg.base_mu + cfg.base_sigma * rng_series.normal());
        const double amp = cfg.seasonal_amp * rng_series.uniform();
        const double phase = 2.0 * M_PI * rng_series.uniform();
        const double slope =
            cfg.trend_max * (2.0 * rng_series.uniform() - 1.0) / static_cast<double>(T);
        const std::size_t n_cats = m > 1 ? m - 1 : 1;
        const std::size_t cat = rng_series.below(n_cats);

        // statics: category one-hots then log base level
        if (m > 1) ds.static_features.at2(i, cat) = 1.0;
        ds.static_features.at2(i, m - 1) = std::log(base);

        // planned promotions (future feature 0)
        std::vector<double> promo(T, 0.0);
        for (std::size_t t = 0; t < T; ++t)
            promo[t] = rng_promo.uniform() < cfg.promo_prob ? 1.0 : 0.0;

        for (std::size_t t = 0; t < T; ++t) {
            const double mean = demand_mean(base, amp, phase, slope, t) +
                                cfg.promo_lift * base * promo[t];
            const double drawn = static_cast<double>(rng_noise.poisson(mean));
            const double y = mean + cfg.noise * (drawn - mean);
            ds.target.at2(i, t) = y < 0.0 ? 0.0 : y;
        }

        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t f = 0; f < d; ++f) {
                double v = 0.0;
                switch (f) {
                    case 0: v = t > 0 ? std::log1p(ds.target.at2(i, t - 1)) : 0.0; break;
                    case 1: v = std::sin(2.0 * M_PI * static_cast<double>(t % 7) / 7.0); break;
                    case 2: v = std::cos(2.0 * M_PI * static_cast<double>(t % 7) / 7.0); break;
                    case 3: v = static_cast<double>(t) / static_cast<double>(T); break;
                    case 4: {  // trailing 4-period mean of log1p demand
                        double acc = 0.0;
                        std::size_t cnt = 0;
                        for (std::size_t k = 1; k <= 4 && k <= t; ++k, ++cnt)
                            acc += std::log1p(ds.target.at2(i, t - k));
                        v = cnt ? acc / static_cast<double>(cnt) : 0.0;
                        break;
                    }
                    case 5: v = promo[t]; break;
                    default: v = rng_extra.normal(); break;
                }
                ds.time_features.at3(i, t, f) = v;
            }
            if (df > 0) {
                ds.future_features.at3(i, t, 0) = promo[t];
                for (std::size_t f = 1; f < df; ++f)
                    ds.future_features.at3(i, t, f) = (t % 30) < 2 ? 1.0 : 0.0;
            }
        }
    }
    for (std::size_t t = 0; t < T; ++t) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "p%04zu", t);
        ds.period_index.emplace_back(buf);
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// CSV panel schema: target.csv (series_id,period,value), time_features.csv
// and future_features.csv (series_id,period,feature,value),
// static_features.csv (series_id,feature,value). UTF-8, '.' decimal.

struct PanelCsvPaths {
    std::string target;
    std::string time_features;
    std::string static_features;
    std::string future_features;  // may be empty

    static PanelCsvPaths in_dir(const std::string& dir) {
        namespace fs = std::filesystem;
        return {(fs::path(dir) / "target.csv").string(),
                (fs::path(dir) / "time_features.csv").string(),
                (fs::path(dir) / "static_features.csv").string(),
                (fs::path(dir) / "future_features.csv").string()};
    }
};

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct CsvRow {
    std::vector<std::string> fields;
    std::size_t line = 0;
};

inline std::vector<CsvRow> read_csv(const std::string& path, std::size_t n_cols,
                                    const std::string& expected_header) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path);
    std::vector<CsvRow> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        CsvRow row;
        row.line = lineno;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            row.fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (lineno == 1) {
            std::string joined;
            for (std::size_t i = 0; i < row.fields.size(); ++i)
                joined += (i ? "," : "") + row.fields[i];
            if (joined != expected_header)
                throw ParseError(path + ":1: unknown columns, expected header " +
                                 expected_header);
            continue;
        }
        if (row.fields.size() != n_cols)
            throw ParseError(path + ":" + std::to_string(lineno) + ": ragged row, expected " +
                             std::to_string(n_cols) + " fields");
        rows.push_back(std::move(row));
    }
    return rows;
}

// blank cell -> missing; non-numeric -> parse error
inline bool parse_value(const std::string& field, const std::string& path, std::size_t line,
                        double& out) {
    if (field.empty()) return false;
    const char* begin = field.data();
    const char* end = begin + field.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc{} || ptr != end)
        throw ParseError(path + ":" + std::to_string(line) + ": non-numeric cell '" + field +
                         "'");
    return true;
}

template <typename T>
std::size_t index_of(std::vector<T>& keys, std::map<T, std::size_t>& lookup, const T& key) {
    auto it = lookup.find(key);
    if (it != lookup.end()) return it->second;
    lookup[key] = keys.size();
    keys.push_back(key);
    return keys.size() - 1;
}

}  // namespace detail

inline void save_panel_csv(const PanelDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto paths = PanelCsvPaths::in_dir(dir);
    const std::size_t N = ds.n_series(), T = ds.n_periods();

    std::ofstream tf(paths.target, std::ios::trunc);
    tf << "series_id,period,value\n";
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t t = 0; t < T; ++t)
            tf << ds.series_ids[i] << ',' << ds.period_index[t] << ','
               << detail::fmt(ds.target.at2(i, t)) << '\n';

    std::ofstream xf(paths.time_features, std::ios::trunc);
    xf << "series_id,period,feature,value\n";
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t f = 0; f < ds.n_time_feats(); ++f)
                xf << ds.series_ids[i] << ',' << ds.period_index[t] << ",f" << f << ','
                   << detail::fmt(ds.time_features.at3(i, t, f)) << '\n';

    std::ofstream sf(paths.static_features, std::ios::trunc);
    sf << "series_id,feature,value\n";
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t f = 0; f < ds.n_statics(); ++f)
            sf << ds.series_ids[i] << ",g" << f << ','
               << detail::fmt(ds.static_features.at2(i, f)) << '\n';

    if (ds.n_future_feats() > 0) {
        std::ofstream ff(paths.future_features, std::ios::trunc);
        ff << "series_id,period,feature,value\n";
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t f = 0; f < ds.n_future_feats(); ++f)
                    ff << ds.series_ids[i] << ',' << ds.period_index[t] << ",h" << f << ','
                       << detail::fmt(ds.future_features.at3(i, t, f)) << '\n';
    }
}

// Loads the CSV panel. Missing cells (blank value or absent row) become 0.0
// with a per-feature missingness indicator appended to the owning tensor;
// missing target cells append one extra time feature named for the target.
inline PanelDataset load_panel_csv(const PanelCsvPaths& paths) {
    namespace fs = std::filesystem;
    std::vector<std::string> series, periods;
    std::map<std::string, std::size_t> series_ix, period_ix;

    const auto target_rows = detail::read_csv(paths.target, 3, "series_id,period,value");
    struct Cell {
        std::size_t i, t;
        double v;
        bool present;
    };
    std::vector<Cell> target_cells;
    for (const auto& row : target_rows) {
        const std::size_t i = detail::index_of(series, series_ix, row.fields[0]);
        const std::size_t t = detail::index_of(periods, period_ix, row.fields[1]);
        double v = 0.0;
        const bool present = detail::parse_value(row.fields[2], paths.target, row.line, v);
        target_cells.push_back({i, t, v, present});
    }
    const std::size_t N = series.size(), T = periods.size();
    if (N == 0 || T == 0) throw ParseError(paths.target + ": no data rows");

    Tensor Y({N, T});
    Tensor target_missing({N, T});
    target_missing.fill(1.0);  // absent rows count as missing
    bool any_target_missing = static_cast<std::size_t>(target_rows.size()) < N * T;
    for (const auto& c : target_cells) {
        Y.at2(c.i, c.t) = c.present ? c.v : 0.0;
        target_missing.at2(c.i, c.t) = c.present ? 0.0 : 1.0;
        any_target_missing |= !c.present;
    }

    auto load_long = [&](const std::string& path, bool by_period, Tensor& out,
                         std::vector<std::string>& feat_names, Tensor& missing,
                         bool& any_missing) {
        const std::string header =
            by_period ? "series_id,period,feature,value" : "series_id,feature,value";
        const auto rows = detail::read_csv(path, by_period ? 4 : 3, header);
        std::map<std::string, std::size_t> feat_ix;
        struct Item {
            std::size_t i, t, f;
            double v;
            bool present;
        };
        std::vector<Item> items;
        for (const auto& row : rows) {
            auto sit = series_ix.find(row.fields[0]);
            if (sit == series_ix.end())
                throw ParseError(path + ":" + std::to_string(row.line) +
                                 ": unknown series_id '" + row.fields[0] + "'");
            std::size_t t = 0;
            if (by_period) {
                auto pit = period_ix.find(row.fields[1]);
                if (pit == period_ix.end())
                    throw ParseError(path + ":" + std::to_string(row.line) +
                                     ": unknown period '" + row.fields[1] + "'");
                t = pit->second;
            }
            const std::size_t f =
                detail::index_of(feat_names, feat_ix, row.fields[by_period ? 2 : 1]);
            double v = 0.0;
            const bool present =
                detail::parse_value(row.fields.back(), path, row.line, v);
            items.push_back({sit->second, t, f, v, present});
        }
        const std::size_t F = feat_names.size();
        const std::size_t rows_per_feat = by_period ? N * T : N;
        out = by_period ? Tensor({N, T, F}) : Tensor({N, F});
        missing = Tensor(out.shape());
        missing.fill(1.0);
        any_missing = items.size() < rows_per_feat * F;
        for (const auto& it : items) {
            const std::size_t flat =
                by_period ? (it.i * T + it.t) * F + it.f : it.i * F + it.f;
            out[flat] = it.present ? it.v : 0.0;
            missing[flat] = it.present ? 0.0 : 1.0;
            any_missing |= !it.present;
        }
    };

    PanelDataset ds;
    ds.series_ids = series;
    ds.period_index = periods;
    ds.target = Y;

    std::vector<std::string> tf_names, sf_names, ff_names;
    Tensor xt, xs, xfu, xt_miss, xs_miss, xfu_miss;
    bool xt_any = false, xs_any = false, xfu_any = false;
    load_long(paths.time_features, true, xt, tf_names, xt_miss, xt_any);
    load_long(paths.static_features, false, xs, sf_names, xs_miss, xs_any);
    if (!paths.future_features.empty() && fs::exists(paths.future_features))
        load_long(paths.future_features, true, xfu, ff_names, xfu_miss, xfu_any);
    else
        xfu = Tensor({N, T, 0});

    // append missingness indicators where any cell was missing
    auto with_indicators = [&](const Tensor& base, const Tensor& miss, bool per_feature_any,
                               bool prepend_target, bool by_period) {
        const std::size_t F = by_period ? base.dim(2) : base.dim(1);
        std::vector<std::size_t> flagged;
        for (std::size_t f = 0; f < F && per_feature_any; ++f) {
            bool any = false;
            for (std::size_t r = 0; r < base.numel() / F && !any; ++r)
                any = miss[r * F + f] != 0.0;
            if (any) flagged.push_back(f);
        }
        const std::size_t extra = flagged.size() + (prepend_target ? 1 : 0);
        if (extra == 0) return base;
        auto shape = base.shape();
        shape.back() = F + extra;
        Tensor out(shape);
        const std::size_t rows = base.numel() / std::max<std::size_t>(F, 1);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t f = 0; f < F; ++f) out[r * (F + extra) + f] = base[r * F + f];
            std::size_t slot = F;
            for (std::size_t f : flagged) out[r * (F + extra) + slot++] = miss[r * F + f];
            if (prepend_target) out[r * (F + extra) + slot] = target_missing[r];
        }
        return out;
    };

    ds.time_features = with_indicators(xt, xt_miss, xt_any, any_target_missing, true);
    ds.static_features = with_indicators(xs, xs_miss, xs_any, false, false);
    ds.future_features = xfu.numel() == 0 && xfu.dim(2) == 0
                             ? xfu
                             : with_indicators(xfu, xfu_miss, xfu_any, false, true);
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------

struct ForecastTask {
    std::size_t context_length = 24;
    std::vector<std::size_t> horizons = {1, 2, 4, 8};
    std::vector<double> quantiles = {0.5, 0.9};
    std::vector<std::size_t> fcd_grid;
    bool log1p_target = true;
    bool standardize_features = true;

    void validate(const PanelDataset& ds) const {
        if (context_length < 1) throw ConfigError("task: context length must be >= 1");
        if (horizons.empty() || fcd_grid.empty())
            throw ConfigError("task: horizons and fcd_grid must be nonempty");
        for (std::size_t i = 0; i + 1 < horizons.size(); ++i)
            if (horizons[i] >= horizons[i + 1])
                throw ConfigError("task: horizons must be strictly increasing");
        if (horizons.front() < 1) throw ConfigError("task: horizons must be positive");
        for (double q : quantiles)
            if (!(q > 0.0 && q < 1.0)) throw ConfigError("task: quantiles must lie in (0,1)");
        const auto [min_fcd, max_fcd] =
            std::minmax_element(fcd_grid.begin(), fcd_grid.end());
        if (*min_fcd < context_length)
            throw ConfigError("task: min(fcd) must be >= context length");
        if (*max_fcd + horizons.back() >= ds.n_periods())
            throw ConfigError("task: max(fcd) + max(horizon) exceeds panel length");
    }

    // evenly spaced fcd grid covering the usable range
    static std::vector<std::size_t> spaced_grid(std::size_t C, std::size_t T,
                                                std::size_t max_h, std::size_t step) {
        std::vector<std::size_t> grid;
        for (std::size_t t = C; t + max_h < T; t += step) grid.push_back(t);
        return grid;
    }
};

inline void to_json(nlohmann::json& j, const ForecastTask& t) {
    j = nlohmann::json{{"context_length", t.context_length},
                       {"horizons", t.horizons},
                       {"quantiles", t.quantiles},
                       {"fcd_grid", t.fcd_grid},
                       {"log1p_target", t.log1p_target},
                       {"standardize_features", t.standardize_features}};
}

inline void from_json(const nlohmann::json& j, ForecastTask& t) {
    t.context_length = j.value("context_length", t.context_length);
    t.horizons = j.value("horizons", t.horizons);
    t.quantiles = j.value("quantiles", t.quantiles);
    t.fcd_grid = j.value("fcd_grid", t.fcd_grid);
    t.log1p_target = j.value("log1p_target", t.log1p_target);
    t.standardize_features = j.value("standardize_features", t.standardize_features);
}

// train task keeps the first (1 - holdout) share of the fcd grid, test task
// the rest; the union is the original grid and the sets are disjoint
inline std::pair<ForecastTask, ForecastTask> split_by_fcd(const ForecastTask& task,
                                                          double holdout = 0.25) {
    auto grid = task.fcd_grid;
    std::sort(grid.begin(), grid.end());
    const std::size_t n_test = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(holdout * static_cast<double>(grid.size()))));
    if (n_test >= grid.size()) throw ConfigError("split: holdout leaves no training fcds");
    ForecastTask train = task, test = task;
    train.fcd_grid.assign(grid.begin(), grid.end() - static_cast<std::ptrdiff_t>(n_test));
    test.fcd_grid.assign(grid.end() - static_cast<std::ptrdiff_t>(n_test), grid.end());
    return {train, test};
}

// One supervised minibatch. Past windows cover calendar indices
// [fcd - C, fcd); labels and future features sit at fcd + h for h in H.
struct SupervisedBatch {
    Tensor past_target;      // B x C (log1p-scaled when task.log1p_target)
    Tensor past_time_feats;  // B x C x d
    Tensor statics;          // B x m
    Tensor future_feats;     // B x |H| x d_f
    Tensor labels;           // B x |H|, raw demand units
    std::vector<std::size_t> row_series;  // bookkeeping: series index per row
    std::vector<std::size_t> row_fcd;     // bookkeeping: fcd per row

    std::size_t batch_size() const { return past_target.dim(0); }
};

// Per-series standardization statistics for the time features.
struct FeatureScaling {
    Tensor mean;  // N x d
    Tensor std;   // N x d
};

inline FeatureScaling compute_scaling(const PanelDataset& ds) {
    const std::size_t N = ds.n_series(), T = ds.n_periods(), d = ds.n_time_feats();
    FeatureScaling sc{Tensor({N, d}), Tensor({N, d})};
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t f = 0; f < d; ++f) {
            double mu = 0.0;
            for (std::size_t t = 0; t < T; ++t) mu += ds.time_features.at3(i, t, f);
            mu /= static_cast<double>(T);
            double var = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                const double dv = ds.time_features.at3(i, t, f) - mu;
                var += dv * dv;
            }
            var /= static_cast<double>(T);
            sc.mean.at2(i, f) = mu;
            sc.std.at2(i, f) = var > 1e-12 ? std::sqrt(var) : 1.0;
        }
    return sc;
}

// Emits every (series, fcd) pair exactly once per epoch; epoch order is fully
// determined by shuffle_seed.
inline std::vector<SupervisedBatch> make_batches(const PanelDataset& ds,
                                                 const ForecastTask& task,
                                                 std::size_t batch_size,
                                                 std::uint64_t shuffle_seed) {
    task.validate(ds);
    if (batch_size < 1) throw ConfigError("make_batches: batch size must be >= 1");
    const std::size_t N = ds.n_series(), C = task.context_length;
    const std::size_t d = ds.n_time_feats(), m = ds.n_statics(), df = ds.n_future_feats();
    const std::size_t H = task.horizons.size();

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t t : task.fcd_grid) pairs.emplace_back(i, t);
    Rng rng(shuffle_seed);
    for (std::size_t i = pairs.size(); i > 1; --i)
        std::swap(pairs[i - 1], pairs[rng.below(i)]);

    const FeatureScaling sc = compute_scaling(ds);
    std::vector<SupervisedBatch> batches;
    for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
        const std::size_t B = std::min(batch_size, pairs.size() - start);
        SupervisedBatch b;
        b.past_target = Tensor({B, C});
        b.past_time_feats = Tensor({B, C, d});
        b.statics = Tensor({B, m});
        b.future_feats = Tensor({B, H, df});
        b.labels = Tensor({B, H});
        for (std::size_t r = 0; r < B; ++r) {
            const auto [i, fcd] = pairs[start + r];
            b.row_series.push_back(i);
            b.row_fcd.push_back(fcd);
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t t = fcd - C + c;
                const double y = ds.target.at2(i, t);
                b.past_target.at2(r, c) = task.log1p_target ? std::log1p(y) : y;
                for (std::size_t f = 0; f < d; ++f) {
                    double v = ds.time_features.at3(i, t, f);
                    if (task.standardize_features)
                        v = (v - sc.mean.at2(i, f)) / sc.std.at2(i, f);
                    b.past_time_feats.at3(r, c, f) = v;
                }
            }
            for (std::size_t f = 0; f < m; ++f)
                b.statics.at2(r, f) = ds.static_features.at2(i, f);
            for (std::size_t h = 0; h < H; ++h) {
                const std::size_t t = fcd + task.horizons[h];
                b.labels.at2(r, h) = ds.target.at2(i, t);
                for (std::size_t f = 0; f < df; ++f)
                    b.future_feats.at3(r, h, f) = ds.future_features.at3(i, t, f);
            }
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace patchcast::data
