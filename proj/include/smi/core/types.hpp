#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace smi {

enum class Arm { blue, red };
enum class FiberRole { target, sky, faulty };

std::string_view to_string(Arm arm);
std::string_view to_string(FiberRole role);
Arm arm_from_string(std::string_view s);
FiberRole role_from_string(std::string_view s);

// Flux samples on a PixelGrid, arbitrary flux units.
using Spectrum = std::vector<double>;

void check_finite(std::span<const double> values, std::string_view what);

// Wavelength sampling of one spectrograph arm, in Angstrom.
struct PixelGrid {
    std::vector<double> wavelength;
    Arm arm = Arm::blue;

    static constexpr std::size_t kMinPixels = 64;

    static PixelGrid linear(double lambda_lo, double lambda_hi, std::size_t n_pixels, Arm arm);

    std::size_t n_pixels() const { return wavelength.size(); }
    bool covers(double lambda) const;
    // Index of the pixel whose wavelength is closest to lambda.
    std::size_t nearest_pixel(double lambda) const;
    // Local dispersion (A per pixel) around pixel i.
    double dispersion(std::size_t i) const;

    void validate() const;
};

PixelGrid default_grid(Arm arm);

struct FiberMeta {
    int id = 0;
    double ra = 0.0;   // degrees
    double dec = 0.0;  // degrees
    FiberRole role = FiberRole::target;
    int spectrograph = 1;
};

// Angular separation in degrees (haversine).
double angular_distance(double ra1, double dec1, double ra2, double dec2);
double angular_distance(const FiberMeta& a, const FiberMeta& b);

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Per-fiber components of an observed spectrum:
// O = (object + continuum_common + emission_shared + emission_unique) * efficiency
struct SkyDecomposition {
    Spectrum object;
    Spectrum continuum_common;
    Spectrum emission_shared;
    Spectrum emission_unique;
    double efficiency = 1.0;

    std::size_t size() const { return object.size(); }
    void validate() const;
};

// Ground truth that accompanies a synthetic plate.
struct PlateTruth {
    std::vector<SkyDecomposition> components;
    Matrix noise;  // additive noise realisation, [n_fibers x n_pixels]
};

// One observation of one spectrograph arm.
struct Plate {
    PixelGrid grid;
    std::vector<FiberMeta> fibers;
    Matrix flux;  // [n_fibers x n_pixels]
    std::optional<PlateTruth> truth;
    std::uint64_t seed = 0;
    std::string plan_id = "plate";

    std::size_t n_fibers() const { return fibers.size(); }
    std::size_t n_pixels() const { return grid.n_pixels(); }

    std::vector<std::size_t> fibers_with_role(FiberRole role) const;
    std::vector<std::size_t> usable_fibers() const;  // every non-faulty fiber

    void validate() const;
};

}  // namespace smi
