#pragma once

#include "smi/core/types.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace smi::preprocess {

constexpr double kEfficiencyLine = 5577.34;  // OI airglow, Angstrom
constexpr std::size_t kEfficiencyHalfWidth = 7;
constexpr std::size_t kContinuumWindow = 51;
constexpr double kMinDetectedFraction = 0.9;

using PixelMask = std::vector<std::uint8_t>;

struct EfficiencyResult {
    Plate plate;                      // rows divided by their efficiency
    std::vector<double> efficiency;   // H per fiber
    std::vector<std::size_t> undetected;  // fibers left at H = 1
};

// Continuum-subtracted flux summed over the 5577 +-7 px window, per fiber.
std::vector<double> efficiency_window_integrals(const Plate& plate);

// Blue arm: H from the 5577 line relative to the median over non-faulty fibers.
EfficiencyResult normalize_efficiency(const Plate& plate);
// Any arm: divide by efficiencies measured elsewhere (the paired blue plate).
EfficiencyResult apply_efficiency(const Plate& plate, std::span<const double> efficiency);

// Running-median continuum f(i, .) of every fiber.
Matrix fiber_continua(const Plate& plate);
// S_l = mean of f(i, .) over the selected fibers (default: all non-faulty).
Spectrum common_continuum(const Plate& plate, std::optional<std::vector<std::size_t>> fibers = std::nullopt);
Spectrum common_continuum(const Matrix& continua, const std::vector<std::size_t>& fibers);

// Marks every pixel within `radius` of a set pixel.
PixelMask dilate(const PixelMask& mask, std::size_t radius);

// Plate-level emission-line pixels: 3-sigma excess of the per-pixel median over
// sky fibers (or over all non-faulty fibers when no sky fiber exists).
PixelMask plate_line_mask(const Plate& plate, std::size_t dilation = 3);

// Object feature pixels for target fibers without truth: 3-sigma deviations of
// the continuum-removed row from the continuum-removed median sky.
std::vector<PixelMask> classify_object_mask(const Plate& plate, const Matrix& continua);

// label_i = max(plate_i - f_i, 0), kept only on line pixels (per-fiber 3-sigma
// detections plus `line_mask`, dilated) and zeroed on object pixels.
Matrix make_sky_labels(const Plate& plate, const Matrix& continua, const std::vector<PixelMask>& object_mask,
                       const PixelMask& line_mask = {});

struct Segment {
    std::size_t start = 0;
    std::size_t end = 0;  // exclusive
    std::size_t count = 0;  // line pixels inside

    std::size_t length() const { return end - start; }
    bool operator==(const Segment&) const = default;
};

struct SegmentPlan {
    std::vector<Segment> segments;

    std::size_t n_pixels() const { return segments.empty() ? 0 : segments.back().end; }
    // Throws ContractError unless the segments exactly tile [0, n_pixels).
    void validate(std::size_t n_pixels) const;
    nlohmann::json to_json() const;
    static SegmentPlan from_json(const nlohmann::json& j);
};

struct SegmentationConfig {
    std::size_t min_length = 64;
    std::size_t max_length = 1024;
    std::size_t step = 32;
    double tolerance = 0.05;
};

// Left-to-right scan growing each segment until ln(length / max(count, 1))
// stabilizes. While the window holds no line pixel at all the ratio carries no
// information and growth continues, so line-free stretches reach max_length.
SegmentPlan segment_adaptive(const PixelMask& line_pixels, const SegmentationConfig& cfg = {});

// Line-pixel indicator used to drive segmentation: 3-sigma flags on the
// per-pixel median of the labels over the given fibers.
PixelMask label_line_pixels(const Matrix& labels, const std::vector<std::size_t>& fibers);

}  // namespace smi::preprocess
