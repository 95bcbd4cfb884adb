#include "smi/core/robust.hpp"

#include "smi/core/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace smi {

double median(std::vector<double> values) {
    if (values.empty()) throw EmptyInputError("median of empty sequence");
    const std::size_t mid = values.size() / 2;
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
    double m = values[mid];
    if (values.size() % 2 == 0) {
        const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
        m = 0.5 * (m + lower);
    }
    return m;
}

double mean(std::span<const double> values) {
    if (values.empty()) throw EmptyInputError("mean of empty sequence");
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double mad(std::span<const double> values) {
    const double m = median({values.begin(), values.end()});
    std::vector<double> dev(values.size());
    std::transform(values.begin(), values.end(), dev.begin(), [m](double v) { return std::abs(v - m); });
    return median(std::move(dev));
}

double robust_sigma(std::span<const double> values) { return kMadToSigma * mad(values); }

std::vector<double> running_median(std::span<const double> x, std::size_t window) {
    if (window % 2 == 0) throw ConfigError("running_median: window must be odd");
    const std::size_t n = x.size();
    std::vector<double> out(n);
    if (n == 0) return out;
    const auto half = static_cast<std::ptrdiff_t>(window / 2);
    const auto last = static_cast<std::ptrdiff_t>(n) - 1;
    std::vector<double> buf(window);
    for (std::ptrdiff_t j = 0; j <= last; ++j) {
        for (std::ptrdiff_t k = -half; k <= half; ++k) {
            buf[static_cast<std::size_t>(k + half)] = x[static_cast<std::size_t>(std::clamp(j + k, std::ptrdiff_t{0}, last))];
        }
        std::nth_element(buf.begin(), buf.begin() + half, buf.end());
        out[static_cast<std::size_t>(j)] = buf[static_cast<std::size_t>(half)];
    }
    return out;
}

std::vector<std::size_t> LineDetection::peaks() const {
    std::vector<std::size_t> out;
    out.reserve(regions.size());
    for (const auto& r : regions) out.push_back(r.peak);
    return out;
}

LineDetection detect_excess(std::span<const double> x, double nsigma, std::size_t window) {
    LineDetection det;
    const std::size_t n = x.size();
    det.flags.assign(n, 0);
    if (n == 0) return det;
    det.continuum = running_median(x, window);
    std::vector<double> excess(n);
    for (std::size_t i = 0; i < n; ++i) excess[i] = x[i] - det.continuum[i];
    det.sigma = robust_sigma(excess);
    const double threshold = nsigma * det.sigma;
    for (std::size_t i = 0; i < n; ++i) {
        det.flags[i] = (excess[i] > threshold && excess[i] > 0.0) ? 1 : 0;
    }
    std::size_t i = 0;
    while (i < n) {
        if (!det.flags[i]) {
            ++i;
            continue;
        }
        LineRegion r{i, i, i};
        while (i < n && det.flags[i]) {
            if (excess[i] > excess[r.peak]) r.peak = i;
            ++i;
        }
        r.end = i;
        det.regions.push_back(r);
    }
    return det;
}

}  // namespace smi
