#pragma once

#include "smi/core/types.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace smi::ccd {

enum class FrameKind { bias, flat, arc, science };

std::string_view to_string(FrameKind kind);
FrameKind frame_kind_from_string(std::string_view s);

// Raw CCD image in ADU. Columns run along the dispersion axis, rows across fibers.
struct Frame {
    Matrix data;
    FrameKind kind = FrameKind::science;

    static constexpr std::size_t kMinSize = 64;

    std::size_t rows() const { return data.rows(); }
    std::size_t cols() const { return data.cols(); }
    void validate() const;
};

// File layout: "SMIF", u32 rows, u32 cols, u32 kind, then rows * cols f64, all little-endian.
void write_frame(const std::filesystem::path& path, const Frame& frame);
Frame read_frame(const std::filesystem::path& path);

// c0 + c1 x + c2 x^2 + ... in raw column (or pixel) units.
struct Polynomial {
    std::vector<double> coeffs;

    double operator()(double x) const;
    double derivative(double x) const;
    std::size_t degree() const { return coeffs.empty() ? 0 : coeffs.size() - 1; }
};

// Least-squares fit; needs more points than the degree.
Polynomial fit_polynomial(std::span<const double> x, std::span<const double> y, std::size_t degree);

struct TraceSolution {
    std::vector<Polynomial> centers;  // center row of each fiber as a function of column
    double half_width = 4.0;          // aperture covers rows within half_width of the rounded center
    std::vector<double> residual_rms; // centroid scatter about each fit, px

    std::size_t n_fibers() const { return centers.size(); }
    // Aperture rows [lo, hi) of a fiber at one column, clipped to the frame.
    std::pair<std::size_t, std::size_t> aperture(std::size_t fiber, std::size_t col, std::size_t rows) const;
    // Throws ContractError if traces cross or apertures overlap anywhere on the frame.
    void validate(std::size_t rows, std::size_t cols) const;
};

constexpr std::size_t kMaxSimulatedFibers = 16;

struct CcdConfig {
    std::size_t rows = 512;
    std::size_t cols = 512;
    std::uint64_t seed = 7;
    double bias_level = 500.0;
    double bias_gradient = 20.0;      // ADU across the columns
    double bias_pattern = 1.0;        // sigma of the fixed per-pixel bias pattern
    double noise_sigma = 1.0;         // read noise added to flat, arc and science frames
    double profile_sigma = 1.0;       // cross-dispersion Gaussian, px
    double trace_tilt = 0.01;         // px per column
    double trace_curvature = 4e-5;    // px per column^2 about the frame centre
    double flat_level = 1000.0;       // lamp flux per column per fiber
    double throughput_amplitude = 0.1;
    double arc_flux = 5000.0;         // integrated flux per arc line per fiber
    double arc_sigma = 1.2;           // along-dispersion line width, px
    double wavelength_curvature = 0.02;  // mid-frame departure from linear, fraction of the frame in px / 4
    double wavelength_jitter = 1.0;   // per-fiber zero-point shift, px

    void validate() const;
};

// Laboratory lamp lines for an arm, Angstrom, ascending.
std::vector<double> default_arc_catalog(Arm arm);

struct SimulatedFrames {
    Frame bias, flat, arc, science;
    TraceSolution traces;                      // injected
    std::vector<Polynomial> wavelength;        // injected lambda(column) per fiber
    std::vector<std::vector<double>> throughput;  // injected per fiber per column
    std::vector<double> arc_lines;             // catalog lines that fall on the frame
    Matrix injected;                           // science flux per fiber per column, before throughput
};

// Projects every fiber of a plate (at most 16) onto a frame along curved traces.
SimulatedFrames simulate_frames(const Plate& plate, const CcdConfig& cfg);

Frame subtract_bias(const Frame& frame, const Frame& bias);

// Per-fiber relative response: the aperture sum of a bias-subtracted flat at each
// column divided by its mean over columns, written into every aperture pixel.
// Pixels outside all apertures are 1.
Frame normalize_flat(const Frame& flat, const TraceSolution& traces);

struct FlatResult {
    Frame frame;
    std::vector<std::pair<std::size_t, std::size_t>> flagged;  // (row, col) set to 0
};

// Divides aperture pixels by the flat; off-aperture pixels are copied.
FlatResult flat_correct(const Frame& frame, const Frame& flat, const TraceSolution& traces, double eps = 1e-6);

struct TraceConfig {
    double half_width = 4.0;
    std::size_t step = 8;       // sampled column spacing
    std::size_t band = 2;       // columns averaged on each side of a sample
    double threshold = 0.1;     // ridge peak relative to the column maximum
    std::size_t max_degree = 3;
    double degree_tolerance = 0.01;  // px of rms a lower degree may give up
};

// Throws DetectionError (found, expected) when fewer resolvable ridges than fibers are seen.
TraceSolution trace_fibers(const Frame& flat, std::size_t n_fibers, const TraceConfig& cfg = {});

// Aperture sum at every column.
std::vector<double> extract_fiber(const Frame& frame, const TraceSolution& traces, std::size_t fiber);

struct WavelengthSolution {
    Polynomial map;  // lambda(column)
    std::vector<double> columns;
    std::vector<double> wavelengths;
    double rms_px = 0.0;  // fit residual in pixels via the local dispersion
};

// Throws CalibrationError with fewer than degree + 1 pairs.
WavelengthSolution fit_wavelength_solution(std::span<const double> columns, std::span<const double> wavelengths,
                                           std::size_t degree = 3);

// Centroids of emission peaks in a 1-D arc spectrum, ascending.
std::vector<double> find_arc_lines(std::span<const double> arc, double nsigma = 5.0);

// Matches detected arc centroids to catalog wavelengths and fits a cubic.
// Throws CalibrationError with fewer than 4 matched lines.
WavelengthSolution calibrate_wavelength(std::span<const double> arc, std::vector<double> catalog);

struct Extraction {
    Plate plate;
    std::vector<WavelengthSolution> solutions;
    Matrix raw;  // aperture sums per fiber per column
};

// Aperture extraction of the (bias-subtracted, flat-corrected) science and arc
// frames, per-fiber wavelength solutions, and linear resampling onto grid.
Extraction extract_and_wavecal(const Frame& science, const TraceSolution& traces, const Frame& arc,
                               const std::vector<double>& catalog, const PixelGrid& grid,
                               const std::vector<FiberMeta>& fibers);

struct ReduceResult {
    Extraction extraction;
    TraceSolution traces;
    std::vector<std::pair<std::size_t, std::size_t>> flagged;
};

// subtract_bias -> trace_fibers on the flat -> flat_correct -> extract_and_wavecal.
ReduceResult reduce_frames(const Frame& bias, const Frame& flat, const Frame& arc, const Frame& science,
                           const std::vector<double>& catalog, const PixelGrid& grid,
                           const std::vector<FiberMeta>& fibers, const TraceConfig& cfg = {});

}  // namespace smi::ccd
