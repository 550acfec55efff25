#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "patchcast/errors.hpp"
#include "patchcast/params.hpp"
#include "patchcast/tensor.hpp"

namespace patchcast::htsr {

// Eigenvalues of the layer Gram matrix W^T W, sorted ascending.
struct Esd {
    std::string layer;
    std::vector<double> eigenvalues;
};

// Eigenvalues computed as squared singular values of W (numerically
// preferable to forming W^T W explicitly).
inline Esd gram_esd(const Tensor& w, const std::string& layer_name = "") {
    if (w.rank() != 2 || w.numel() == 0) throw DiagnosticsError("gram_esd: expected a nonempty matrix");
    if (!w.all_finite()) throw DiagnosticsError("gram_esd: non-finite entries in " + layer_name);
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> mat(w.data(), static_cast<Eigen::Index>(w.dim(0)),
                              static_cast<Eigen::Index>(w.dim(1)));
    Eigen::BDCSVD<Mat> svd(mat);
    Esd esd;
    esd.layer = layer_name;
    for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) {
        const double s = svd.singularValues()(i);
        esd.eigenvalues.push_back(s * s);
    }
    std::sort(esd.eigenvalues.begin(), esd.eigenvalues.end());
    return esd;
}

enum class TailFamily { PL, TPL };

struct PowerLawFit {
    double alpha = 0.0;
    double lambda_min = 0.0;
    double ks_distance = 1.0;
    TailFamily family = TailFamily::PL;
    double beta = 0.0;  // meaningful iff family == TPL
    std::size_t n_tail = 0;
};

inline void to_json(nlohmann::json& j, const PowerLawFit& f) {
    j = nlohmann::json{{"alpha", f.alpha},
                       {"lambda_min", f.lambda_min},
                       {"ks_distance", f.ks_distance},
                       {"family", f.family == TailFamily::PL ? "PL" : "TPL"},
                       {"n_tail", f.n_tail}};
    if (f.family == TailFamily::TPL) j["beta"] = f.beta;
}

constexpr std::size_t kMinTailPoints = 10;

namespace detail {

inline std::vector<double> positive_sorted(const Esd& esd) {
    std::vector<double> lam;
    for (double v : esd.eigenvalues)
        if (v > 0.0) lam.push_back(v);
    std::sort(lam.begin(), lam.end());
    return lam;
}

// candidate lower cutoffs: every distinct observed eigenvalue with at least
// kMinTailPoints points at or above it (Clauset-style search set)
inline std::vector<std::size_t> cutoff_candidates(const std::vector<double>& lam) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < lam.size(); ++i) {
        if (i > 0 && lam[i] == lam[i - 1]) continue;
        if (lam.size() - i < kMinTailPoints) break;
        idx.push_back(i);
    }
    return idx;
}

}  // namespace detail

// Maximum-likelihood power-law fit with the cutoff chosen by minimizing the
// KS distance between the tail's empirical CDF and the fitted PL CDF.
inline PowerLawFit fit_pl(const Esd& esd) {
    const auto lam = detail::positive_sorted(esd);
    if (lam.size() < kMinTailPoints)
        throw DiagnosticsError("fit_pl: fewer than " + std::to_string(kMinTailPoints) +
                               " positive eigenvalues");
    const auto candidates = detail::cutoff_candidates(lam);
    PowerLawFit best;
    bool found = false;
    for (std::size_t start : candidates) {
        const double lmin = lam[start];
        const std::size_t n = lam.size() - start;
        double log_sum = 0.0;
        for (std::size_t i = start; i < lam.size(); ++i) log_sum += std::log(lam[i] / lmin);
        if (log_sum <= 0.0) continue;  // degenerate tail (all values equal)
        const double alpha = 1.0 + static_cast<double>(n) / log_sum;
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double cdf = 1.0 - std::pow(lam[start + i] / lmin, 1.0 - alpha);
            const double lo = static_cast<double>(i) / static_cast<double>(n);
            const double hi = static_cast<double>(i + 1) / static_cast<double>(n);
            d = std::max(d, std::max(cdf - lo, hi - cdf));
        }
        if (!found || d < best.ks_distance) {
            found = true;
            best.alpha = alpha;
            best.lambda_min = lmin;
            best.ks_distance = d;
            best.family = TailFamily::PL;
            best.n_tail = n;
        }
    }
    if (!found) throw DiagnosticsError("fit_pl: no usable cutoff (degenerate spectrum)");
    return best;
}

struct TplGrid {
    std::vector<double> alpha_grid;
    std::vector<double> beta_scale_grid;  // beta = scale / mean(tail); must include 0
    std::size_t max_cutoffs = 32;

    static TplGrid standard() {
        TplGrid g;
        for (double a = 1.05; a <= 6.0 + 1e-9; a += 0.05) g.alpha_grid.push_back(a);
        g.beta_scale_grid = {0.0, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0};
        return g;
    }
};

namespace detail {

// trapezoid integration of lambda^-alpha * exp(-beta*lambda) on a log grid
// over [lmin, lhi], plus a PL-tail remainder estimate beyond lhi
struct TplNormalizer {
    double lmin, lhi;
    std::size_t n_grid = 512;
    std::vector<double> u, l;  // log grid and its exponentials
    double du = 0.0;

    TplNormalizer(double lmin_, double lhi_, std::size_t n_grid_ = 512)
        : lmin(lmin_), lhi(lhi_), n_grid(n_grid_) {
        const double ulo = std::log(lmin), uhi = std::log(lhi);
        du = (uhi - ulo) / static_cast<double>(n_grid - 1);
        for (std::size_t i = 0; i < n_grid; ++i) {
            u.push_back(ulo + du * static_cast<double>(i));
            l.push_back(std::exp(u.back()));
        }
    }

    // exp((1-alpha)*u) per grid point (the power-law factor of the log-space
    // integrand); the exponential factor exp(-beta*l) is cached separately so
    // a full (alpha, beta) grid costs one exp pass per axis, not per cell
    std::vector<double> power_factor(double alpha) const {
        std::vector<double> f(n_grid);
        for (std::size_t i = 0; i < n_grid; ++i) f[i] = std::exp((1.0 - alpha) * u[i]);
        return f;
    }
    std::vector<double> exp_factor(double beta) const {
        std::vector<double> f(n_grid);
        for (std::size_t i = 0; i < n_grid; ++i) f[i] = std::exp(-beta * l[i]);
        return f;
    }

    double integral_of(const std::vector<double>& pw, const std::vector<double>& eb,
                       double alpha, double beta,
                       std::vector<double>* cumulative = nullptr) const {
        double total = 0.0, prev = 0.0;
        for (std::size_t i = 0; i < n_grid; ++i) {
            const double f = pw[i] * eb[i];
            if (i > 0) total += 0.5 * (prev + f) * du;
            prev = f;
            if (cumulative) cumulative->push_back(total);
        }
        // remainder of the pure-PL envelope past lhi
        if (alpha > 1.0)
            total += std::pow(lhi, 1.0 - alpha) / (alpha - 1.0) * std::exp(-beta * lhi);
        return total;
    }

    double integral(double alpha, double beta,
                    std::vector<double>* cumulative = nullptr) const {
        return integral_of(power_factor(alpha), exp_factor(beta), alpha, beta, cumulative);
    }
};

}  // namespace detail

// Grid-search MLE for the exponentially truncated power law
// rho ~ K * lambda^-alpha * exp(-beta*lambda) on [lambda_min, inf). The beta
// grid includes 0, so TPL never fits worse than PL beyond grid resolution.
inline PowerLawFit fit_tpl(const Esd& esd, const TplGrid& grid = TplGrid::standard()) {
    const auto lam = detail::positive_sorted(esd);
    if (lam.size() < kMinTailPoints)
        throw DiagnosticsError("fit_tpl: fewer than " + std::to_string(kMinTailPoints) +
                               " positive eigenvalues");
    auto candidates = detail::cutoff_candidates(lam);
    if (candidates.empty()) throw DiagnosticsError("fit_tpl: no usable cutoff");
    if (candidates.size() > grid.max_cutoffs) {
        std::vector<std::size_t> thin;
        const double step = static_cast<double>(candidates.size() - 1) /
                            static_cast<double>(grid.max_cutoffs - 1);
        for (std::size_t i = 0; i < grid.max_cutoffs; ++i)
            thin.push_back(candidates[static_cast<std::size_t>(std::llround(
                step * static_cast<double>(i)))]);
        thin.erase(std::unique(thin.begin(), thin.end()), thin.end());
        candidates = thin;
    }

    PowerLawFit best;
    bool found = false;
    for (std::size_t start : candidates) {
        const double lmin = lam[start];
        const std::size_t n = lam.size() - start;
        double sum_log = 0.0, sum_lam = 0.0, mean_tail = 0.0;
        for (std::size_t i = start; i < lam.size(); ++i) {
            sum_log += std::log(lam[i]);
            sum_lam += lam[i];
        }
        mean_tail = sum_lam / static_cast<double>(n);
        detail::TplNormalizer norm(lmin, std::max(lam.back() * 10.0, lmin * 1e6));

        std::vector<std::vector<double>> eb;
        std::vector<double> betas;
        for (double scale : grid.beta_scale_grid) {
            betas.push_back(scale / mean_tail);
            eb.push_back(norm.exp_factor(betas.back()));
        }
        double best_ll = -1e300, a_hat = 0.0, b_hat = 0.0;
        for (double alpha : grid.alpha_grid) {
            const auto pw = norm.power_factor(alpha);
            for (std::size_t bi = 0; bi < betas.size(); ++bi) {
                const double z = norm.integral_of(pw, eb[bi], alpha, betas[bi]);
                if (!(z > 0.0) || !std::isfinite(z)) continue;
                const double ll = -static_cast<double>(n) * std::log(z) -
                                  alpha * sum_log - betas[bi] * sum_lam;
                if (ll > best_ll) {
                    best_ll = ll;
                    a_hat = alpha;
                    b_hat = betas[bi];
                }
            }
        }
        if (best_ll <= -1e299) continue;

        // KS distance of the chosen (alpha, beta) at this cutoff
        std::vector<double> cum;
        const std::vector<double>& pts = norm.l;
        const double z = norm.integral(a_hat, b_hat, &cum);
        double d = 0.0;
        std::size_t gi = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x = lam[start + i];
            while (gi + 1 < pts.size() && pts[gi + 1] <= x) ++gi;
            double c = cum[gi];
            if (gi + 1 < pts.size() && pts[gi + 1] > pts[gi])
                c += (cum[gi + 1] - cum[gi]) * (x - pts[gi]) / (pts[gi + 1] - pts[gi]);
            const double cdf = std::min(1.0, c / z);
            const double lo = static_cast<double>(i) / static_cast<double>(n);
            const double hi = static_cast<double>(i + 1) / static_cast<double>(n);
            d = std::max(d, std::max(cdf - lo, hi - cdf));
        }
        if (!found || d < best.ks_distance) {
            found = true;
            best.alpha = a_hat;
            best.beta = b_hat;
            best.lambda_min = lmin;
            best.ks_distance = d;
            best.family = TailFamily::TPL;
            best.n_tail = n;
        }
    }
    if (!found) throw DiagnosticsError("fit_tpl: no usable cutoff (degenerate spectrum)");
    return best;
}

// ||W||_F^2 / ||W||_2^2 for a single layer
inline double stable_rank(const Tensor& w) {
    if (w.rank() != 2 || w.numel() == 0)
        throw DiagnosticsError("stable_rank: expected a nonempty matrix");
    double fro2 = 0.0;
    for (double v : w.vec()) fro2 += v * v;
    if (fro2 == 0.0) throw DiagnosticsError("stable_rank: zero matrix");
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> mat(w.data(), static_cast<Eigen::Index>(w.dim(0)),
                              static_cast<Eigen::Index>(w.dim(1)));
    Eigen::BDCSVD<Mat> svd(mat);
    const double smax = svd.singularValues()(0);
    return fro2 / (smax * smax);
}

// Empirical CCDF points (lambda_(i), (n-i)/n) for sorted lambda, 1-based i.
inline std::vector<std::pair<double, double>> ccdf(const Esd& esd) {
    if (esd.eigenvalues.empty()) throw DiagnosticsError("ccdf: empty spectrum");
    auto lam = esd.eigenvalues;
    std::sort(lam.begin(), lam.end());
    const double n = static_cast<double>(lam.size());
    std::vector<std::pair<double, double>> out;
    for (std::size_t i = 0; i < lam.size(); ++i)
        out.emplace_back(lam[i], (n - static_cast<double>(i) - 1.0) / n);
    return out;
}

inline void write_ccdf_csv(const std::vector<std::pair<double, double>>& points,
                           const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "lambda,ccdf\n";
    for (const auto& [l, c] : points) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", l, c);
        out << buf;
    }
}

// Convexity candidates on the log-log CCDF: points whose discrete second
// difference of log(ccdf) vs log(lambda) exceeds a positive threshold.
// Qualitative surface only; no pass/fail semantics attached.
inline std::vector<double> ccdf_kink_candidates(const Esd& esd, double threshold = 0.5) {
    const auto pts = ccdf(esd);
    std::vector<double> lx, ly;
    for (const auto& [l, c] : pts)
        if (l > 0.0 && c > 0.0) {
            lx.push_back(std::log(l));
            ly.push_back(std::log(c));
        }
    std::vector<double> kinks;
    for (std::size_t i = 1; i + 1 < lx.size(); ++i) {
        const double h1 = lx[i] - lx[i - 1], h2 = lx[i + 1] - lx[i];
        if (h1 <= 0.0 || h2 <= 0.0) continue;
        const double d2 = ((ly[i + 1] - ly[i]) / h2 - (ly[i] - ly[i - 1]) / h1) /
                          (0.5 * (h1 + h2));
        if (d2 > threshold) kinks.push_back(std::exp(lx[i]));
    }
    return kinks;
}

// ---------------------------------------------------------------------------

struct LayerDiagnostics {
    std::string layer;
    Esd esd;
    std::optional<PowerLawFit> pl;
    std::optional<PowerLawFit> tpl;
    double stable_rank = 0.0;
    bool included = false;        // enters the model-level alpha metric
    bool alpha_unreliable = false;  // best alpha < 2
    std::vector<double> kink_candidates;

    const PowerLawFit* best_fit() const {
        if (pl && tpl) return tpl->ks_distance < pl->ks_distance ? &*tpl : &*pl;
        if (pl) return &*pl;
        if (tpl) return &*tpl;
        return nullptr;
    }
};

struct EsdReport {
    std::vector<LayerDiagnostics> layers;
    double alpha_metric = 0.0;          // mean alpha over included layers
    std::size_t alpha_layer_count = 0;  // layers passing the inclusion rule
    double stable_rank = 0.0;           // mean over all diagnosed layers
    double ks_threshold = 0.10;
};

inline void to_json(nlohmann::json& j, const LayerDiagnostics& d) {
    j = nlohmann::json{{"layer", d.layer},
                       {"eigenvalues", d.esd.eigenvalues},
                       {"stable_rank", d.stable_rank},
                       {"included", d.included},
                       {"alpha_unreliable", d.alpha_unreliable},
                       {"kink_candidates", d.kink_candidates}};
    if (d.pl) j["pl"] = *d.pl;
    if (d.tpl) j["tpl"] = *d.tpl;
}

inline void to_json(nlohmann::json& j, const EsdReport& r) {
    j = nlohmann::json{{"layers", r.layers},
                       {"alpha_metric", r.alpha_metric},
                       {"alpha_layer_count", r.alpha_layer_count},
                       {"stable_rank", r.stable_rank},
                       {"ks_threshold", r.ks_threshold}};
}

struct DiagnoseConfig {
    double ks_threshold = 0.10;  // (T)PL inclusion rule for the alpha metric
    std::string layer_filter;    // substring match on tensor names; empty = all
};

// conv kernels k_c x d_in x d_out reshape to (k_c * d_in) x d_out
inline Tensor as_matrix(const Tensor& t) {
    if (t.rank() == 2) return t;
    if (t.rank() == 3) return t.reshaped({t.dim(0) * t.dim(1), t.dim(2)});
    throw DiagnosticsError("as_matrix: unsupported tensor rank");
}

// Per-layer ESD, PL and TPL fits, and stable ranks over every >=2-D weight
// tensor in the checkpoint. The model alpha metric averages only layers
// whose better fit has KS distance <= ks_threshold.
inline EsdReport diagnose(const nn::ParamStore& checkpoint,
                          const DiagnoseConfig& cfg = {}) {
    EsdReport report;
    report.ks_threshold = cfg.ks_threshold;
    auto names = checkpoint.names();
    std::sort(names.begin(), names.end());
    double alpha_sum = 0.0, sr_sum = 0.0;
    for (const auto& name : names) {
        const Tensor& t = checkpoint.at(name);
        if (t.rank() < 2) continue;  // biases and norm vectors excluded
        if (!cfg.layer_filter.empty() && name.find(cfg.layer_filter) == std::string::npos)
            continue;
        const Tensor w = as_matrix(t);
        LayerDiagnostics d;
        d.layer = name;
        d.esd = gram_esd(w, name);
        d.stable_rank = stable_rank(w);
        try {
            d.pl = fit_pl(d.esd);
        } catch (const DiagnosticsError&) {
        }
        try {
            d.tpl = fit_tpl(d.esd);
        } catch (const DiagnosticsError&) {
        }
        d.kink_candidates = ccdf_kink_candidates(d.esd);
        if (const PowerLawFit* fit = d.best_fit()) {
            d.included = fit->ks_distance <= cfg.ks_threshold;
            d.alpha_unreliable = fit->alpha < 2.0;
        }
        if (d.included) {
            alpha_sum += d.best_fit()->alpha;
            ++report.alpha_layer_count;
        }
        sr_sum += d.stable_rank;
        report.layers.push_back(std::move(d));
    }
    if (report.layers.empty())
        throw DiagnosticsError("diagnose: no layer passes the filter");
    if (report.alpha_layer_count > 0)
        report.alpha_metric = alpha_sum / static_cast<double>(report.alpha_layer_count);
    report.stable_rank = sr_sum / static_cast<double>(report.layers.size());
    return report;
}

}  // namespace patchcast::htsr
