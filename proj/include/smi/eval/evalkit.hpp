#pragma once

#include "smi/core/types.hpp"
#include "smi/preprocess/preprocess.hpp"

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace smi::eval {

// Clamped cubic B-spline basis with breakpoints every `spacing` pixels on
// [0, n - 1]. A final interval shorter than spacing / 2 is merged into its
// neighbour.
struct BSplineBasis {
    std::vector<double> knots;  // full knot vector, end knots repeated 4 times
    std::size_t n_basis = 0;

    static BSplineBasis uniform(std::size_t n_pixels, std::size_t spacing);
    std::vector<double> breakpoints() const;
    // Values of the 4 non-zero basis functions at x and the index of the first.
    std::size_t evaluate(double x, double out[4]) const;
};

// Least-squares cubic spline through y (x = pixel index).
Spectrum bspline_fit(std::span<const double> y, std::size_t spacing = 32);

Spectrum pixel_median(const Matrix& flux, const std::vector<std::size_t>& rows);

// Per-pixel median over the sky fibers followed by the spline fit.
Spectrum supersky_baseline(const Plate& plate, const std::vector<std::size_t>& sky_fibers,
                           std::size_t spacing = 32);

struct ResidualStats {
    double bias = 0.0;
    double mae = 0.0;
    double rmse = 0.0;
};

// e = estimate - observed; bias = mean(e), mae = mean(|e|), rmse = sqrt(mean(e^2)).
ResidualStats residual_stats(std::span<const double> estimate, std::span<const double> observed);
ResidualStats combine(const std::vector<ResidualStats>& parts, const std::vector<std::size_t>& counts);

// Peak pixels of 3-sigma excesses over a 51 px running median.
std::vector<std::size_t> detect_lines_3sigma(std::span<const double> spectrum);

struct LineWindowResidual {
    std::size_t center = 0;
    std::size_t half_width = 7;
    bool valid = true;  // false when the window leaves the grid
    ResidualStats stats;
};

std::vector<LineWindowResidual> line_window_residuals(std::span<const double> estimate,
                                                      std::span<const double> observed,
                                                      const std::vector<std::size_t>& centers,
                                                      std::size_t half_width = 7);

// Residual statistics restricted to the merged 3-sigma line regions of `observed`.
ResidualStats line_region_residuals(std::span<const double> estimate, std::span<const double> observed);

struct Overlay {
    preprocess::Segment segment;
    std::vector<double> observed_x;
    std::vector<double> observed_y;
    std::vector<double> shared;
};

Overlay shared_inspection(std::span<const double> shared, std::span<const double> x, std::span<const double> y,
                          const preprocess::Segment& segment);

struct Histogram {
    double lo = 0.0;
    double hi = 0.0;
    std::vector<std::size_t> counts;
    double mean = 0.0;
    double std = 0.0;
};

constexpr std::size_t kHistogramBins = 81;

// Symmetric range +-5 rmse; values outside are clipped into the edge bins.
Histogram residual_histogram(std::span<const double> residuals, std::size_t bins = kHistogramBins);

struct MethodRow {
    std::string spec;  // spectrograph label, e.g. "03"
    std::string method;
    ResidualStats stats;
};

struct LineRow {
    std::size_t center = 0;
    std::size_t half_width = 7;
    std::vector<std::pair<std::string, ResidualStats>> per_method;
};

struct EvalReport {
    std::string plan_id;
    std::vector<MethodRow> rows;
    std::vector<std::pair<std::string, Histogram>> histograms;  // keyed by "<method>_<spec>"
    std::vector<LineRow> lines;
    std::vector<std::pair<std::string, Overlay>> overlays;

    void validate() const;
};

std::string format_spec(int spectrograph);
// "03 | 31.73 | 76.75 | 15.25 | 36.82": spec, baseline bias/rmse, SMI bias/rmse.
std::string render_table_row(const std::string& spec, const ResidualStats& baseline, const ResidualStats& smi);

void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
std::string histogram_svg(const std::vector<std::pair<std::string, Histogram>>& series, const std::string& title);
std::string overlay_svg(const Overlay& overlay, const std::string& title);
// report.csv, hist_*.svg, overlay_*.svg and lines.csv into dir.
void write_report(const std::filesystem::path& dir, const EvalReport& report);

}  // namespace smi::eval
