#pragma once

#include "smi/core/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace smi::synth {

struct LineCatalogEntry {
    double center = 0.0;       // Angstrom
    double width_sigma = 1.0;  // Angstrom
    double base_flux = 0.0;    // integrated flux (flux units x Angstrom)
    std::string species;
    // Variable lines carry no common part; their emission is entirely fiber specific.
    bool variable = false;
};

struct SynthConfig {
    std::uint64_t seed = 7;
    std::size_t n_fibers = 250;
    double sky_fraction = 0.2;
    double faulty_fraction = 0.03;
    double gradient_slope = 5.0;      // continuum flux units per degree of RA offset
    double unique_pos_jitter = 2.0;   // Angstrom, at the reference distance
    double unique_flux_jitter = 0.6;  // fraction of base flux, at the reference distance
    double noise_sigma = 2.0;
    double object_fraction = 0.9;     // fraction of target fibers that hold an object
    std::pair<double, double> dense_band{6700.0, 9180.0};
    std::optional<double> extinction;  // constant attenuation applied to objects
    double continuum_level = 100.0;
    double field_radius = 2.5;  // degrees
    double variable_line_fraction = 0.3;
    int n_spectrographs = 1;
    // Lines that exist in one fiber only, placed away from every stable line.
    std::size_t private_lines = 0;
    double private_line_flux = 400.0;
    double private_line_clearance = 10.0;  // pixels

    void validate() const;
};

// Forest line densities, lines per Angstrom.
constexpr double kSparseLineDensity = 1.0 / 150.0;
constexpr double kDenseLineDensity = 8.0 * kSparseLineDensity;
constexpr double kOxygen5577 = 5577.34;

std::vector<LineCatalogEntry> gen_line_catalog(const SynthConfig& cfg, const PixelGrid& grid);

// Gaussian emission line sampled on the grid, flux density (integrated flux / A).
void add_gaussian_line(std::span<double> out, const PixelGrid& grid, double center, double sigma,
                       double flux);

Plate gen_plate(const SynthConfig& cfg, const PixelGrid& grid);

// Pixel positions of the n strongest stable catalog lines, at least min_separation
// pixels apart, in ascending order.
std::vector<std::size_t> strongest_line_pixels(const std::vector<LineCatalogEntry>& catalog,
                                               const PixelGrid& grid, std::size_t n,
                                               std::size_t min_separation = 15);

// Pixels that carry object line features, derived from truth (for sky labels).
std::vector<std::uint8_t> object_line_mask(const Spectrum& object, double threshold);

}  // namespace smi::synth
