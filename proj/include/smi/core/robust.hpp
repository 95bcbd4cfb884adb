#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace smi {

constexpr double kMadToSigma = 1.4826;

double median(std::vector<double> values);
double mean(std::span<const double> values);
// Median absolute deviation about the median (unscaled).
double mad(std::span<const double> values);
double robust_sigma(std::span<const double> values);

// Odd-width sliding median; indices outside [0, n) are clamped to the edge.
std::vector<double> running_median(std::span<const double> x, std::size_t window);

struct LineRegion {
    std::size_t begin = 0;  // first flagged pixel
    std::size_t end = 0;    // one past the last flagged pixel
    std::size_t peak = 0;   // pixel of maximum excess
};

struct LineDetection {
    std::vector<LineRegion> regions;
    std::vector<std::uint8_t> flags;  // 1 where the excess is above threshold
    std::vector<double> continuum;
    double sigma = 0.0;

    std::vector<std::size_t> peaks() const;
};

// Flags pixels whose excess over a running-median continuum exceeds nsigma robust
// standard deviations (sigma = 1.4826 * MAD of the excess), then merges adjacent
// flags into regions.
LineDetection detect_excess(std::span<const double> x, double nsigma = 3.0, std::size_t window = 51);

}  // namespace smi
