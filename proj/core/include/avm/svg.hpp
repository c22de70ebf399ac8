#pragma once

#include <string>
#include <vector>

namespace avm {

// Hand-emitted polyline line chart; no plotting dependency. NaN samples
// break the line.
class SvgChart {
public:
    SvgChart(std::string x_label, std::string y_label, int width = 640, int height = 420);
    void add_series(std::string label, std::vector<double> xs, std::vector<double> ys);
    std::string render() const;
    void write(const std::string& path) const;

private:
    struct Series {
        std::string label;
        std::vector<double> xs, ys;
    };
    std::string x_label_, y_label_;
    int width_, height_;
    std::vector<Series> series_;
};

}  // namespace avm
