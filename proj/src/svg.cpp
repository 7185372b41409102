#include "svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "io_util.hpp"

namespace saefin::svg {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string LineChart::render() const {
    const double margin_left = 70, margin_right = 20, margin_top = 40, margin_bottom = 50;
    const double plot_w = width - margin_left - margin_right;
    const double plot_h = height - margin_top - margin_bottom;

    double x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
    bool first = true;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (first) {
                x_min = x_max = s.x[i];
                y_min = y_max = s.y[i];
                first = false;
            }
            x_min = std::min(x_min, s.x[i]);
            x_max = std::max(x_max, s.x[i]);
            y_min = std::min(y_min, s.y[i]);
            y_max = std::max(y_max, s.y[i]);
        }
    }
    if (x_max == x_min) x_max = x_min + 1.0;
    if (y_max == y_min) y_max = y_min + 1.0;
    const double y_pad = 0.08 * (y_max - y_min);
    y_min -= y_pad;
    y_max += y_pad;

    auto px = [&](double x) {
        return margin_left + (x - x_min) / (x_max - x_min) * plot_w;
    };
    auto py = [&](double y) {
        return margin_top + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;
    };

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
           std::to_string(width) + "\" height=\"" + std::to_string(height) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + fmt(width / 2.0) + "\" y=\"22\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"15\">" + escape(title) + "</text>\n";

    // axes
    out += "<line x1=\"" + fmt(margin_left) + "\" y1=\"" + fmt(margin_top) +
           "\" x2=\"" + fmt(margin_left) + "\" y2=\"" + fmt(margin_top + plot_h) +
           "\" stroke=\"black\"/>\n";
    out += "<line x1=\"" + fmt(margin_left) + "\" y1=\"" + fmt(margin_top + plot_h) +
           "\" x2=\"" + fmt(margin_left + plot_w) + "\" y2=\"" +
           fmt(margin_top + plot_h) + "\" stroke=\"black\"/>\n";

    // ticks (5 per axis)
    for (int i = 0; i <= 4; ++i) {
        const double fx = x_min + (x_max - x_min) * i / 4.0;
        const double fy = y_min + (y_max - y_min) * i / 4.0;
        out += "<text x=\"" + fmt(px(fx)) + "\" y=\"" + fmt(margin_top + plot_h + 18) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
               fmt(fx) + "</text>\n";
        out += "<text x=\"" + fmt(margin_left - 8) + "\" y=\"" + fmt(py(fy) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
               fmt(fy) + "</text>\n";
        out += "<line x1=\"" + fmt(margin_left) + "\" y1=\"" + fmt(py(fy)) + "\" x2=\"" +
               fmt(margin_left + plot_w) + "\" y2=\"" + fmt(py(fy)) +
               "\" stroke=\"#dddddd\"/>\n";
    }

    out += "<text x=\"" + fmt(margin_left + plot_w / 2.0) + "\" y=\"" +
           fmt(height - 10.0) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"12\">" + escape(x_label) + "</text>\n";
    out += "<text x=\"16\" y=\"" + fmt(margin_top + plot_h / 2.0) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
           "transform=\"rotate(-90 16 " + fmt(margin_top + plot_h / 2.0) + ")\">" +
           escape(y_label) + "</text>\n";

    int legend_y = static_cast<int>(margin_top);
    for (const auto& s : series) {
        if (s.x.empty()) continue;
        std::string points;
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            points += fmt(px(s.x[i])) + "," + fmt(py(s.y[i]));
            if (i + 1 < s.x.size()) points += " ";
        }
        out += "<polyline points=\"" + points + "\" fill=\"none\" stroke=\"" + s.color +
               "\" stroke-width=\"2\"/>\n";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            out += "<circle cx=\"" + fmt(px(s.x[i])) + "\" cy=\"" + fmt(py(s.y[i])) +
                   "\" r=\"3\" fill=\"" + s.color + "\"/>\n";
        }
        out += "<text x=\"" + fmt(margin_left + plot_w - 4) + "\" y=\"" +
               fmt(legend_y + 12.0) + "\" text-anchor=\"end\" "
               "font-family=\"sans-serif\" font-size=\"11\" fill=\"" + s.color + "\">" +
               escape(s.name) + "</text>\n";
        legend_y += 16;
    }
    out += "</svg>\n";
    return out;
}

void LineChart::write(const std::filesystem::path& path) const {
    io::atomic_write(path, render());
}

}  // namespace saefin::svg
