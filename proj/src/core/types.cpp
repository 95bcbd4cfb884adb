#include "smi/core/types.hpp"

#include "smi/core/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace smi {

std::string_view to_string(Arm arm) { return arm == Arm::blue ? "blue" : "red"; }

std::string_view to_string(FiberRole role) {
    switch (role) {
        case FiberRole::target: return "target";
        case FiberRole::sky: return "sky";
        case FiberRole::faulty: return "faulty";
    }
    return "target";
}

Arm arm_from_string(std::string_view s) {
    if (s == "blue") return Arm::blue;
    if (s == "red") return Arm::red;
    throw ConfigError("unknown arm '" + std::string(s) + "'");
}

FiberRole role_from_string(std::string_view s) {
    if (s == "target") return FiberRole::target;
    if (s == "sky") return FiberRole::sky;
    if (s == "faulty") return FiberRole::faulty;
    throw FormatError("unknown fiber role '" + std::string(s) + "'");
}

void check_finite(std::span<const double> values, std::string_view what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw DomainError(std::string(what) + ": non-finite value at index " + std::to_string(i));
        }
    }
}

PixelGrid PixelGrid::linear(double lambda_lo, double lambda_hi, std::size_t n_pixels, Arm arm) {
    if (n_pixels < 2 || !(lambda_hi > lambda_lo)) {
        throw DomainError("PixelGrid::linear: empty or inverted wavelength range");
    }
    PixelGrid g;
    g.arm = arm;
    g.wavelength.resize(n_pixels);
    const double step = (lambda_hi - lambda_lo) / static_cast<double>(n_pixels - 1);
    for (std::size_t i = 0; i < n_pixels; ++i) {
        g.wavelength[i] = lambda_lo + step * static_cast<double>(i);
    }
    return g;
}

bool PixelGrid::covers(double lambda) const {
    return !wavelength.empty() && lambda >= wavelength.front() && lambda <= wavelength.back();
}

std::size_t PixelGrid::nearest_pixel(double lambda) const {
    if (wavelength.empty()) throw DomainError("nearest_pixel on empty grid");
    auto it = std::lower_bound(wavelength.begin(), wavelength.end(), lambda);
    if (it == wavelength.begin()) return 0;
    if (it == wavelength.end()) return wavelength.size() - 1;
    const auto hi = static_cast<std::size_t>(it - wavelength.begin());
    return (lambda - wavelength[hi - 1] <= wavelength[hi] - lambda) ? hi - 1 : hi;
}

double PixelGrid::dispersion(std::size_t i) const {
    const std::size_t n = wavelength.size();
    if (n < 2) return 1.0;
    const std::size_t lo = i == 0 ? 0 : i - 1;
    const std::size_t hi = std::min(n - 1, i + 1);
    return (wavelength[hi] - wavelength[lo]) / static_cast<double>(hi - lo);
}

void PixelGrid::validate() const {
    if (wavelength.size() < kMinPixels) {
        throw DomainError("PixelGrid: need at least 64 pixels, got " + std::to_string(wavelength.size()));
    }
    check_finite(wavelength, "PixelGrid wavelength");
    for (std::size_t i = 1; i < wavelength.size(); ++i) {
        if (!(wavelength[i] > wavelength[i - 1])) {
            throw DomainError("PixelGrid: wavelength not strictly increasing at " + std::to_string(i));
        }
    }
}

PixelGrid default_grid(Arm arm) {
    if (arm == Arm::blue) return PixelGrid::linear(3700.0, 5900.0, 2048, Arm::blue);
    return PixelGrid::linear(5700.0, 9200.0, 3072, Arm::red);
}

double angular_distance(double ra1, double dec1, double ra2, double dec2) {
    constexpr double deg = std::numbers::pi / 180.0;
    const double dra = (ra2 - ra1) * deg;
    const double ddec = (dec2 - dec1) * deg;
    const double a = std::sin(ddec / 2) * std::sin(ddec / 2) +
                     std::cos(dec1 * deg) * std::cos(dec2 * deg) * std::sin(dra / 2) * std::sin(dra / 2);
    return 2.0 * std::asin(std::min(1.0, std::sqrt(a))) / deg;
}

double angular_distance(const FiberMeta& a, const FiberMeta& b) {
    return angular_distance(a.ra, a.dec, b.ra, b.dec);
}

void SkyDecomposition::validate() const {
    const std::size_t n = object.size();
    if (continuum_common.size() != n || emission_shared.size() != n || emission_unique.size() != n) {
        throw ShapeError("SkyDecomposition: component lengths differ");
    }
    if (!(efficiency > 0.0)) throw DomainError("SkyDecomposition: efficiency must be > 0");
}

std::vector<std::size_t> Plate::fibers_with_role(FiberRole role) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fibers.size(); ++i) {
        if (fibers[i].role == role) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> Plate::usable_fibers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fibers.size(); ++i) {
        if (fibers[i].role != FiberRole::faulty) out.push_back(i);
    }
    return out;
}

void Plate::validate() const {
    grid.validate();
    if (flux.rows() != fibers.size()) {
        throw ShapeError("Plate: flux has " + std::to_string(flux.rows()) + " rows for " +
                         std::to_string(fibers.size()) + " fibers");
    }
    if (flux.cols() != grid.n_pixels()) throw ShapeError("Plate: flux width != n_pixels");
    check_finite(flux.data(), "Plate flux");
    if (truth) {
        if (truth->components.size() != fibers.size()) throw ShapeError("Plate: truth count != fiber count");
        for (const auto& c : truth->components) {
            c.validate();
            if (c.size() != grid.n_pixels()) throw ShapeError("Plate: truth length != n_pixels");
        }
    }
}

}  // namespace smi
