#pragma once

#include "memflow/common.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace memflow {

/// Minimal static SVG line plots; presentation only, no data transformation
/// beyond the optional log axis. Nonpositive values are dropped in log mode.
struct PlotSeries {
    std::string name;
    std::vector<double> y;
};

inline bool svg_line_plot(const std::filesystem::path& path, const std::string& title,
                          const std::vector<double>& x, const std::vector<PlotSeries>& series,
                          bool log_y = false) {
    if (x.empty() || series.empty()) return false;
    const double W = 760, H = 480, ml = 70, mr = 20, mt = 40, mb = 50;
    auto ty = [&](double v) { return log_y ? std::log10(v) : v; };

    double xmin = x.front(), xmax = x.back();
    for (double v : x) {
        xmin = std::min(xmin, v);
        xmax = std::max(xmax, v);
    }
    double ymin = 1e300, ymax = -1e300;
    for (const PlotSeries& s : series)
        for (std::size_t i = 0; i < s.y.size() && i < x.size(); ++i) {
            double v = s.y[i];
            if (!std::isfinite(v) || (log_y && v <= 0.0)) continue;
            ymin = std::min(ymin, ty(v));
            ymax = std::max(ymax, ty(v));
        }
    if (ymin > ymax) return false;
    if (xmax == xmin) xmax = xmin + 1.0;
    if (ymax == ymin) {
        ymax += 1.0;
        ymin -= 1.0;
    }
    auto px = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto py = [&](double v) { return H - mb - (v - ymin) / (ymax - ymin) * (H - mt - mb); };

    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    std::ofstream out(path);
    if (!out.good()) return false;
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
        << "' viewBox='0 0 " << W << " " << H << "'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << W / 2 << "' y='24' text-anchor='middle' font-size='16' "
        << "font-family='sans-serif'>" << title << "</text>\n";
    // axes
    out << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
        << "' stroke='black'/>\n";
    out << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
        << "' stroke='black'/>\n";
    for (int k = 0; k <= 5; ++k) {
        double fx = xmin + (xmax - xmin) * k / 5.0;
        double fy = ymin + (ymax - ymin) * k / 5.0;
        out << "<text x='" << px(fx) << "' y='" << H - mb + 18
            << "' text-anchor='middle' font-size='11' font-family='sans-serif'>" << fx
            << "</text>\n";
        out << "<text x='" << ml - 8 << "' y='" << py(fy) + 4
            << "' text-anchor='end' font-size='11' font-family='sans-serif'>"
            << (log_y ? "1e" + std::to_string(static_cast<int>(std::round(fy)))
                      : std::to_string(fy))
            << "</text>\n";
        out << "<line x1='" << ml << "' y1='" << py(fy) << "' x2='" << W - mr << "' y2='"
            << py(fy) << "' stroke='#dddddd'/>\n";
    }
    int ci = 0;
    for (const PlotSeries& s : series) {
        out << "<polyline fill='none' stroke='" << colors[ci % 5] << "' stroke-width='1.5' points='";
        for (std::size_t i = 0; i < s.y.size() && i < x.size(); ++i) {
            double v = s.y[i];
            if (!std::isfinite(v) || (log_y && v <= 0.0)) continue;
            out << px(x[i]) << "," << py(ty(v)) << " ";
        }
        out << "'/>\n";
        out << "<text x='" << W - mr - 8 << "' y='" << mt + 16 + 16 * ci
            << "' text-anchor='end' font-size='12' font-family='sans-serif' fill='"
            << colors[ci % 5] << "'>" << s.name << "</text>\n";
        ++ci;
    }
    out << "</svg>\n";
    return out.good();
}

}  // namespace memflow
