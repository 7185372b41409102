// Minimal self-contained SVG line/bar charts for the experiment outputs.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace saefin::svg {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
    std::string color = "#1f77b4";
};

struct LineChart {
    std::string title;
    std::string x_label, y_label;
    std::vector<Series> series;
    int width = 640, height = 400;

    std::string render() const;
    void write(const std::filesystem::path& path) const;
};

}  // namespace saefin::svg
