// SPDX-License-Identifier: Apache-2.0
#include "dclab/report.hpp"

#include "dclab/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

namespace dclab::report {

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

namespace {

constexpr double kW = 640, kH = 420;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 50;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string px(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// one CSV cell inside an XML comment: no commas, no "--"
std::string comment_safe(std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    for (std::size_t i; (i = s.find("--")) != std::string::npos;) s.replace(i, 2, "-_");
    return s;
}

struct Frame {
    double lx0, lx1, y0, y1;
    double sx(double x) const {
        return kLeft + (std::log10(x) - lx0) / (lx1 - lx0) * (kW - kLeft - kRight);
    }
    double sy(double y) const { return kH - kBottom - (y - y0) / (y1 - y0) * (kH - kTop - kBottom); }
};

}  // namespace

std::string render_svg(const Plot& plot) {
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    auto grow_y = [&](double y) {
        if (!std::isfinite(y)) return;
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
    };
    for (const auto& s : plot.series) {
        for (const auto& p : s.points) {
            require(p.x > 0, ErrorKind::DegenerateInput, "log-x plot needs positive x");
            xmin = std::min(xmin, p.x);
            xmax = std::max(xmax, p.x);
            grow_y(p.loss);
        }
    }
    require(std::isfinite(xmin), ErrorKind::DegenerateInput, "plot has no points");
    for (const auto& s : plot.series)
        if (s.law) {
            grow_y(s.law->E);
            grow_y(s.law->predict(xmin));
        }

    Frame f{std::log10(xmin), std::log10(xmax), ymin, ymax};
    if (f.lx1 - f.lx0 < 1e-9) {
        f.lx0 -= 0.5;
        f.lx1 += 0.5;
    }
    const double lpad = 0.06 * (f.lx1 - f.lx0);
    f.lx0 -= lpad;
    f.lx1 += lpad;
    if (f.y1 - f.y0 < 1e-9) {
        f.y0 -= 0.05;
        f.y1 += 0.05;
    }
    const double ypad = 0.08 * (f.y1 - f.y0);
    f.y0 -= ypad;
    f.y1 += ypad;

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
      << kW << ' ' << kH << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o << "<!-- data\nseries,x,loss\n";
    for (const auto& s : plot.series)
        for (const auto& p : s.points) o << comment_safe(s.label) << ',' << fmt(p.x) << ',' << fmt(p.loss) << '\n';
    for (const auto& s : plot.series)
        if (s.law)
            o << "law," << comment_safe(s.label) << ",A=" << fmt(s.law->A) << ",alpha=" << fmt(s.law->alpha)
              << ",E=" << fmt(s.law->E) << '\n';
    for (const auto& r : plot.references) o << "paper reference," << comment_safe(r.label) << ',' << fmt(r.value) << '\n';
    o << "-->\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << px(kLeft) << "\" y=\"22\" font-size=\"14\">" << escape(plot.title) << "</text>\n";

    // axes
    const double xa = kLeft, xb = kW - kRight, ya = kTop, yb = kH - kBottom;
    o << "<g class=\"axes\" stroke=\"black\" fill=\"none\">\n";
    o << "<line x1=\"" << px(xa) << "\" y1=\"" << px(yb) << "\" x2=\"" << px(xb) << "\" y2=\"" << px(yb) << "\"/>\n";
    o << "<line x1=\"" << px(xa) << "\" y1=\"" << px(ya) << "\" x2=\"" << px(xa) << "\" y2=\"" << px(yb) << "\"/>\n";
    o << "</g>\n";
    std::set<double> xticks;
    for (const auto& s : plot.series)
        for (const auto& p : s.points) xticks.insert(p.x);
    o << "<g class=\"ticks\">\n";
    for (double x : xticks) {
        const double X = f.sx(x);
        o << "<line x1=\"" << px(X) << "\" y1=\"" << px(yb) << "\" x2=\"" << px(X) << "\" y2=\"" << px(yb + 4)
          << "\" stroke=\"black\"/><text x=\"" << px(X) << "\" y=\"" << px(yb + 16) << "\" text-anchor=\"middle\">"
          << fmt(x) << "</text>\n";
    }
    for (int i = 0; i <= 4; ++i) {
        const double y = f.y0 + (f.y1 - f.y0) * i / 4.0;
        const double Y = f.sy(y);
        char lab[32];
        std::snprintf(lab, sizeof lab, "%.3f", y);
        o << "<line x1=\"" << px(xa - 4) << "\" y1=\"" << px(Y) << "\" x2=\"" << px(xa) << "\" y2=\"" << px(Y)
          << "\" stroke=\"black\"/><text x=\"" << px(xa - 6) << "\" y=\"" << px(Y + 4) << "\" text-anchor=\"end\">"
          << lab << "</text>\n";
    }
    o << "</g>\n";
    o << "<text x=\"" << px((xa + xb) / 2) << "\" y=\"" << px(kH - 12) << "\" text-anchor=\"middle\">"
      << escape(plot.x_label) << " (log scale)</text>\n";
    o << "<text x=\"16\" y=\"" << px((ya + yb) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << px((ya + yb) / 2) << ")\">" << escape(plot.y_label) << "</text>\n";

    double legend_y = kTop + 6;
    for (std::size_t si = 0; si < plot.series.size(); ++si) {
        const auto& s = plot.series[si];
        const char* color = kColors[si % std::size(kColors)];
        o << "<g class=\"series\" data-label=\"" << escape(s.label) << "\">\n";
        if (s.law) {
            o << "<polyline class=\"law\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            constexpr int kSamples = 64;
            for (int i = 0; i <= kSamples; ++i) {
                const double lx = f.lx0 + (f.lx1 - f.lx0) * i / kSamples;
                const double y = std::clamp(s.law->predict(std::pow(10.0, lx)), f.y0, f.y1);
                o << (i ? " " : "") << px(f.sx(std::pow(10.0, lx))) << ',' << px(f.sy(y));
            }
            o << "\"/>\n";
            if (s.law->E >= f.y0 && s.law->E <= f.y1)
                o << "<line class=\"asymptote\" x1=\"" << px(xa) << "\" y1=\"" << px(f.sy(s.law->E)) << "\" x2=\""
                  << px(xb) << "\" y2=\"" << px(f.sy(s.law->E)) << "\" stroke=\"" << color
                  << "\" stroke-dasharray=\"6,4\"/>\n";
        }
        for (const auto& p : s.points) {
            if (!std::isfinite(p.loss)) continue;
            o << "<circle class=\"point\" cx=\"" << px(f.sx(p.x)) << "\" cy=\"" << px(f.sy(p.loss))
              << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
        }
        o << "</g>\n";
        std::string legend = s.label;
        if (s.law) legend += " (E=" + fmt(s.law->E) + ")";
        o << "<text x=\"" << px(xb + 10) << "\" y=\"" << px(legend_y) << "\" fill=\"" << color << "\">"
          << escape(legend) << "</text>\n";
        legend_y += 16;
    }
    for (const auto& r : plot.references) {
        if (r.value < f.y0 || r.value > f.y1) continue;
        const double Y = f.sy(r.value);
        o << "<g class=\"reference\"><line x1=\"" << px(xa) << "\" y1=\"" << px(Y) << "\" x2=\"" << px(xb)
          << "\" y2=\"" << px(Y) << "\" stroke=\"gray\" stroke-dasharray=\"2,3\"/><text x=\"" << px(xb + 10)
          << "\" y=\"" << px(Y + 4) << "\" fill=\"gray\">paper reference: " << escape(r.label) << "</text></g>\n";
    }
    // references outside the plotted range are still listed
    for (const auto& r : plot.references) {
        if (r.value >= f.y0 && r.value <= f.y1) continue;
        o << "<text class=\"reference\" x=\"" << px(xb + 10) << "\" y=\"" << px(legend_y) << "\" fill=\"gray\">paper reference: "
          << escape(r.label) << " = " << fmt(r.value) << "</text>\n";
        legend_y += 16;
    }
    o << "</svg>\n";
    return o.str();
}

std::string efficiency_csv(const std::vector<EfficiencyRow>& rows) {
    std::ostringstream o;
    o << "recipe,baseline,D,loss,D_equivalent,efficiency\n";
    for (const auto& r : rows)
        o << r.recipe << ',' << r.baseline << ',' << fmt(r.d) << ',' << fmt(r.loss) << ',' << fmt(r.d_equiv) << ','
          << fmt(r.efficiency) << '\n';
    return o.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::Io, "cannot write " + path.string());
    os << text;
    if (!os) fail(ErrorKind::Io, "write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::Io, "cannot read " + path.string());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace dclab::report
