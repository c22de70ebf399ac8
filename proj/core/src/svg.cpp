#include "avm/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace avm {

namespace {
const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
}

SvgChart::SvgChart(std::string x_label, std::string y_label, int width, int height)
    : x_label_(std::move(x_label)), y_label_(std::move(y_label)), width_(width), height_(height) {}

void SvgChart::add_series(std::string label, std::vector<double> xs, std::vector<double> ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("svg: series size mismatch");
    series_.push_back({std::move(label), std::move(xs), std::move(ys)});
}

std::string SvgChart::render() const {
    const double ml = 64, mr = 120, mt = 24, mb = 48;
    const double pw = width_ - ml - mr, ph = height_ - mt - mb;

    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool any = false;
    for (const auto& s : series_)
        for (std::size_t i = 0; i < s.xs.size(); ++i) {
            if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
            if (!any) {
                xmin = xmax = s.xs[i];
                ymin = ymax = s.ys[i];
                any = true;
            } else {
                xmin = std::min(xmin, s.xs[i]);
                xmax = std::max(xmax, s.xs[i]);
                ymin = std::min(ymin, s.ys[i]);
                ymax = std::max(ymax, s.ys[i]);
            }
        }
    if (xmax - xmin < 1e-12) xmax = xmin + 1;
    const double ypad = (ymax - ymin < 1e-12) ? 0.5 : 0.08 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double y) { return mt + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };
    char buf[256];
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width_ << "\" height=\""
        << height_ << "\" viewBox=\"0 0 " << width_ << " " << height_ << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" "
                  "stroke=\"#444\"/>\n",
                  ml, mt, pw, ph);
    out << buf;

    // axis ticks
    for (int i = 0; i <= 4; ++i) {
        const double fx = xmin + (xmax - xmin) * i / 4.0;
        const double fy = ymin + (ymax - ymin) * i / 4.0;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"middle\" "
                      "fill=\"#333\">%g</text>\n",
                      px(fx), mt + ph + 16, fx);
        out << buf;
        std::snprintf(buf, sizeof buf,
                      "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\" "
                      "fill=\"#333\">%.3g</text>\n",
                      ml - 6, py(fy) + 4, fy);
        out << buf;
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/>\n",
                      ml, py(fy), ml + pw, py(fy));
        out << buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\" "
                  "fill=\"#111\">%s</text>\n",
                  ml + pw / 2, mt + ph + 36, x_label_.c_str());
    out << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\" "
                  "fill=\"#111\" transform=\"rotate(-90 14 %.1f)\">%s</text>\n",
                  14.0, mt + ph / 2, mt + ph / 2, y_label_.c_str());
    out << buf;

    for (std::size_t s = 0; s < series_.size(); ++s) {
        const auto& ser = series_[s];
        const char* color = kPalette[s % (sizeof kPalette / sizeof *kPalette)];
        std::string points;
        bool open = false;
        auto flush = [&]() {
            if (open && !points.empty()) {
                out << "<polyline fill=\"none\" stroke=\"" << color
                    << "\" stroke-width=\"1.8\" points=\"" << points << "\"/>\n";
            }
            points.clear();
            open = false;
        };
        for (std::size_t i = 0; i < ser.xs.size(); ++i) {
            if (!std::isfinite(ser.xs[i]) || !std::isfinite(ser.ys[i])) {
                flush();
                continue;
            }
            std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(ser.xs[i]), py(ser.ys[i]));
            points += buf;
            open = true;
            std::snprintf(buf, sizeof buf,
                          "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"2.5\" fill=\"%s\"/>\n",
                          px(ser.xs[i]), py(ser.ys[i]), color);
            out << buf;
        }
        flush();
        // legend
        const double ly = mt + 14 + 18.0 * static_cast<double>(s);
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" "
                      "stroke-width=\"2\"/><text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" "
                      "fill=\"#111\">%s</text>\n",
                      ml + pw + 10, ly, ml + pw + 30, ly, color, ml + pw + 36, ly + 4,
                      ser.label.c_str());
        out << buf;
    }
    out << "</svg>\n";
    return out.str();
}

void SvgChart::write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("svg: cannot write " + path);
    f << render();
}

}  // namespace avm
