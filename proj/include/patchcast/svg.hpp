#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "patchcast/errors.hpp"
#include "patchcast/htsr.hpp"

namespace patchcast::plot {

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

// Plot-ready CCDF data: the empirical points, the fitted tail overlay (a
// straight line of slope -(alpha-1) on log-log axes), and the cutoff marker.
// Kept as numeric series so tests can assert on what gets rendered.
struct CcdfPlotData {
    Series empirical;  // (lambda, ccdf); the final zero-ccdf point included
    Series fit;        // overlay evaluated at tail lambdas
    double lambda_min = 0.0;
    double alpha = 0.0;

    // least-squares slope of the overlay in log-log coordinates
    double fit_loglog_slope() const {
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        std::size_t n = 0;
        for (const auto& [x, y] : fit.points) {
            if (!(x > 0.0) || !(y > 0.0)) continue;
            const double lx = std::log(x), ly = std::log(y);
            sx += lx;
            sy += ly;
            sxx += lx * lx;
            sxy += lx * ly;
            ++n;
        }
        if (n < 2) throw DiagnosticsError("fit overlay has fewer than 2 points");
        const double d = static_cast<double>(n) * sxx - sx * sx;
        return (static_cast<double>(n) * sxy - sx * sy) / d;
    }
};

inline CcdfPlotData ccdf_plot_data(const htsr::Esd& esd, const htsr::PowerLawFit& fit) {
    CcdfPlotData data;
    data.lambda_min = fit.lambda_min;
    data.alpha = fit.alpha;
    data.empirical.name = esd.layer.empty() ? "ccdf" : esd.layer;
    const auto pts = htsr::ccdf(esd);
    double ccdf_at_lmin = 1.0;
    for (const auto& [l, c] : pts) {
        data.empirical.points.emplace_back(l, c);
        if (l <= fit.lambda_min && c > 0.0) ccdf_at_lmin = c;
    }
    data.fit.name = "pl_fit";
    for (const auto& [l, c] : data.empirical.points) {
        if (l < fit.lambda_min || !(c > 0.0)) continue;
        // the exponential factor applies only for a TPL fit
        double y = ccdf_at_lmin * std::pow(l / fit.lambda_min, 1.0 - fit.alpha);
        if (fit.family == htsr::TailFamily::TPL)
            y *= std::exp(-fit.beta * (l - fit.lambda_min));
        if (y > 0.0) data.fit.points.emplace_back(l, y);
    }
    return data;
}

namespace detail {

constexpr double kWidth = 640.0, kHeight = 480.0;
constexpr double kMargin = 56.0;

struct LogAxes {
    double xlo, xhi, ylo, yhi;  // in log10

    double px(double x) const {
        return kMargin + (std::log10(x) - xlo) / (xhi - xlo) * (kWidth - 2 * kMargin);
    }
    double py(double y) const {
        return kHeight - kMargin -
               (std::log10(y) - ylo) / (yhi - ylo) * (kHeight - 2 * kMargin);
    }
};

struct LinAxes {
    double xlo, xhi, ylo, yhi;

    double px(double x) const {
        return kMargin + (x - xlo) / (xhi - xlo) * (kWidth - 2 * kMargin);
    }
    double py(double y) const {
        return kHeight - kMargin - (y - ylo) / (yhi - ylo) * (kHeight - 2 * kMargin);
    }
};

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

inline std::string svg_header(const std::string& title) {
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(kWidth) +
         "\" height=\"" + fmt(kHeight) + "\" viewBox=\"0 0 " + fmt(kWidth) + " " +
         fmt(kHeight) + "\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + fmt(kWidth / 2) +
         "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"14\">" +
         title + "</text>\n";
    return s;
}

inline std::string axes_frame() {
    return "<rect x=\"" + fmt(kMargin) + "\" y=\"" + fmt(kMargin) + "\" width=\"" +
           fmt(kWidth - 2 * kMargin) + "\" height=\"" + fmt(kHeight - 2 * kMargin) +
           "\" fill=\"none\" stroke=\"#444\"/>\n";
}

// blue -> red ramp used for the alpha / stable-rank color map
inline std::string ramp_color(double t) {
    t = std::clamp(t, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(40 + 200 * t));
    const int g = static_cast<int>(std::lround(60 + 60 * (1.0 - std::abs(2 * t - 1))));
    const int b = static_cast<int>(std::lround(240 - 200 * t));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
    return buf;
}

inline void write_file(const std::string& path, const std::string& body) {
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

// Log-log CCDF scatter with the fitted power-law overlay and a red vertical
// marker at lambda_min.
inline void render_ccdf_svg(const CcdfPlotData& data, const std::string& path) {
    double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
    for (const auto& [x, y] : data.empirical.points) {
        xlo = std::min(xlo, std::log10(x));
        xhi = std::max(xhi, std::log10(x));
        if (y > 0.0) {  // the final zero-ccdf point sits on the axis floor
            ylo = std::min(ylo, std::log10(y));
            yhi = std::max(yhi, std::log10(y));
        }
    }
    if (ylo > yhi) throw DiagnosticsError("render_ccdf_svg: no positive CCDF points");
    if (xhi - xlo < 1e-12) xhi = xlo + 1.0;
    if (yhi - ylo < 1e-12) yhi = ylo + 1.0;
    ylo -= 0.5;  // reserve the bottom band for zero-ccdf points
    detail::LogAxes ax{xlo, xhi, ylo, yhi};

    std::string s = detail::svg_header("CCDF " + data.empirical.name);
    s += detail::axes_frame();
    for (const auto& [x, y] : data.empirical.points) {
        const double cy =
            y > 0.0 ? ax.py(y) : detail::kHeight - detail::kMargin;
        s += "<circle cx=\"" + detail::fmt(ax.px(x)) + "\" cy=\"" +
             detail::fmt(cy) + "\" r=\"2.5\" fill=\"#1f77b4\"/>\n";
    }
    if (data.fit.points.size() >= 2) {
        std::string d = "M";
        for (const auto& [x, y] : data.fit.points)
            d += " " + detail::fmt(ax.px(x)) + " " + detail::fmt(ax.py(y));
        s += "<path d=\"" + d + "\" fill=\"none\" stroke=\"#2ca02c\" stroke-width=\"1.5\"/>\n";
    }
    if (data.lambda_min > 0.0) {
        const double x = ax.px(data.lambda_min);
        s += "<line x1=\"" + detail::fmt(x) + "\" y1=\"" + detail::fmt(detail::kMargin) +
             "\" x2=\"" + detail::fmt(x) + "\" y2=\"" +
             detail::fmt(detail::kHeight - detail::kMargin) +
             "\" stroke=\"red\" stroke-dasharray=\"4 3\"/>\n";
    }
    s += "<text x=\"" + detail::fmt(detail::kMargin) + "\" y=\"" +
         detail::fmt(detail::kHeight - 16.0) +
         "\" font-family=\"sans-serif\" font-size=\"11\">alpha = " +
         detail::fmt(data.alpha) + ", lambda_min = " + detail::fmt(data.lambda_min) +
         "</text>\n";
    s += "</svg>\n";
    detail::write_file(path, s);
}

// Loss-vs-epoch data with one color value per epoch (alpha metric or stable
// rank). Legend bounds are exactly the min/max of the color series.
struct LossColorPlotData {
    std::vector<double> loss;    // per epoch
    std::vector<double> color;   // per epoch, same length
    std::string color_label = "alpha";

    double color_min() const { return *std::min_element(color.begin(), color.end()); }
    double color_max() const { return *std::max_element(color.begin(), color.end()); }
};

inline void render_loss_by_color_svg(const LossColorPlotData& data,
                                     const std::string& path) {
    if (data.loss.empty() || data.loss.size() != data.color.size())
        throw DiagnosticsError("render_loss_by_color_svg: empty or mismatched series");
    double ylo = 1e300, yhi = -1e300;
    for (double v : data.loss) {
        ylo = std::min(ylo, v);
        yhi = std::max(yhi, v);
    }
    if (yhi - ylo < 1e-12) yhi = ylo + 1.0;
    detail::LinAxes ax{1.0, static_cast<double>(std::max<std::size_t>(data.loss.size(), 2)),
                       ylo, yhi};
    const double clo = data.color_min(), chi = data.color_max();

    std::string s = detail::svg_header("test loss by epoch (colored by " +
                                       data.color_label + ")");
    s += detail::axes_frame();
    std::string d = "M";
    for (std::size_t i = 0; i < data.loss.size(); ++i)
        d += " " + detail::fmt(ax.px(static_cast<double>(i + 1))) + " " +
             detail::fmt(ax.py(data.loss[i]));
    s += "<path d=\"" + d + "\" fill=\"none\" stroke=\"#999\" stroke-width=\"1\"/>\n";
    for (std::size_t i = 0; i < data.loss.size(); ++i) {
        const double t = chi > clo ? (data.color[i] - clo) / (chi - clo) : 0.5;
        s += "<circle cx=\"" + detail::fmt(ax.px(static_cast<double>(i + 1))) +
             "\" cy=\"" + detail::fmt(ax.py(data.loss[i])) + "\" r=\"4\" fill=\"" +
             detail::ramp_color(t) + "\"/>\n";
    }
    s += "<text x=\"" + detail::fmt(detail::kMargin) + "\" y=\"" +
         detail::fmt(detail::kHeight - 16.0) +
         "\" font-family=\"sans-serif\" font-size=\"11\">" + data.color_label +
         " range [" + detail::fmt(clo) + ", " + detail::fmt(chi) + "]</text>\n";
    s += "</svg>\n";
    detail::write_file(path, s);
}

}  // namespace patchcast::plot
