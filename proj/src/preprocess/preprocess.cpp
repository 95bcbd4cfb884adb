#include "smi/preprocess/preprocess.hpp"

#include "smi/core/error.hpp"
#include "smi/core/robust.hpp"

#include <algorithm>
#include <cmath>

namespace smi::preprocess {

namespace {

std::pair<std::size_t, std::size_t> efficiency_window(const PixelGrid& grid) {
    if (!grid.covers(kEfficiencyLine)) {
        throw UnsupportedArmError("5577 A line outside the " + std::string(to_string(grid.arm)) +
                                  "-arm grid; supply efficiencies from the paired blue plate");
    }
    const std::size_t c = grid.nearest_pixel(kEfficiencyLine);
    const std::size_t lo = c >= kEfficiencyHalfWidth ? c - kEfficiencyHalfWidth : 0;
    const std::size_t hi = std::min(grid.n_pixels(), c + kEfficiencyHalfWidth + 1);
    return {lo, hi};
}

std::vector<double> row_excess(std::span<const double> row) {
    const auto cont = running_median(row, kContinuumWindow);
    std::vector<double> e(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) e[j] = row[j] - cont[j];
    return e;
}

Plate divide_rows(const Plate& plate, std::span<const double> h) {
    Plate out = plate;
    for (std::size_t i = 0; i < out.n_fibers(); ++i)
        for (auto& v : out.flux.row(i)) v /= h[i];
    return out;
}

double pixel_median(const Matrix& m, const std::vector<std::size_t>& rows, std::size_t col) {
    std::vector<double> v;
    v.reserve(rows.size());
    for (auto r : rows) v.push_back(m(r, col));
    return median(std::move(v));
}

}  // namespace

std::vector<double> efficiency_window_integrals(const Plate& plate) {
    const auto [lo, hi] = efficiency_window(plate.grid);
    std::vector<double> out(plate.n_fibers());
    for (std::size_t i = 0; i < plate.n_fibers(); ++i) {
        const auto e = row_excess(plate.flux.row(i));
        double s = 0.0;
        for (std::size_t j = lo; j < hi; ++j) s += e[j];
        out[i] = s;
    }
    return out;
}

EfficiencyResult normalize_efficiency(const Plate& plate) {
    plate.validate();
    const auto [lo, hi] = efficiency_window(plate.grid);
    const std::size_t n = plate.n_fibers();
    std::vector<double> integral(n);
    std::vector<bool> detected(n);
    std::size_t n_detected = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto e = row_excess(plate.flux.row(i));
        const double sigma = robust_sigma(e);
        double s = 0.0, peak = -INFINITY;
        for (std::size_t j = lo; j < hi; ++j) {
            s += e[j];
            peak = std::max(peak, e[j]);
        }
        integral[i] = s;
        detected[i] = s > 0.0 && peak > 3.0 * sigma;
        n_detected += detected[i];
    }
    const auto needed = static_cast<std::size_t>(std::ceil(kMinDetectedFraction * static_cast<double>(n)));
    if (n_detected < needed) {
        throw DetectionError("5577 A line detected in " + std::to_string(n_detected) + " of " + std::to_string(n) +
                                 " fibers",
                             n_detected, needed);
    }
    std::vector<double> reference;
    for (std::size_t i = 0; i < n; ++i)
        if (detected[i] && plate.fibers[i].role != FiberRole::faulty) reference.push_back(integral[i]);
    if (reference.empty()) throw EmptyInputError("no usable fiber carries the 5577 A line");
    const double ref = median(std::move(reference));

    EfficiencyResult out;
    out.efficiency.assign(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (detected[i]) {
            out.efficiency[i] = integral[i] / ref;
        } else {
            out.undetected.push_back(i);
        }
    }
    out.plate = divide_rows(plate, out.efficiency);
    return out;
}

EfficiencyResult apply_efficiency(const Plate& plate, std::span<const double> efficiency) {
    if (efficiency.size() != plate.n_fibers()) {
        throw ShapeError("efficiency vector has " + std::to_string(efficiency.size()) + " entries for " +
                         std::to_string(plate.n_fibers()) + " fibers");
    }
    for (double h : efficiency)
        if (!(h > 0.0) || !std::isfinite(h)) throw DomainError("efficiency must be positive and finite");
    EfficiencyResult out;
    out.efficiency.assign(efficiency.begin(), efficiency.end());
    out.plate = divide_rows(plate, efficiency);
    return out;
}

Matrix fiber_continua(const Plate& plate) {
    Matrix f(plate.n_fibers(), plate.n_pixels());
    for (std::size_t i = 0; i < plate.n_fibers(); ++i) {
        const auto rm = running_median(plate.flux.row(i), kContinuumWindow);
        std::copy(rm.begin(), rm.end(), f.row(i).begin());
    }
    return f;
}

Spectrum common_continuum(const Matrix& continua, const std::vector<std::size_t>& fibers) {
    if (fibers.empty()) throw EmptyInputError("common continuum needs at least one usable fiber");
    Spectrum s(continua.cols(), 0.0);
    for (auto i : fibers) {
        const auto row = continua.row(i);
        for (std::size_t j = 0; j < s.size(); ++j) s[j] += row[j];
    }
    for (auto& v : s) v /= static_cast<double>(fibers.size());
    return s;
}

Spectrum common_continuum(const Plate& plate, std::optional<std::vector<std::size_t>> fibers) {
    const auto sel = fibers ? *fibers : plate.usable_fibers();
    if (!fibers && sel.size() < 2) throw EmptyInputError("common continuum needs at least two non-faulty fibers");
    return common_continuum(fiber_continua(plate), sel);
}

PixelMask dilate(const PixelMask& mask, std::size_t radius) {
    PixelMask out(mask.size(), 0);
    const std::size_t n = mask.size();
    for (std::size_t j = 0; j < n; ++j) {
        if (!mask[j]) continue;
        const std::size_t lo = j >= radius ? j - radius : 0;
        const std::size_t hi = std::min(n, j + radius + 1);
        std::fill(out.begin() + static_cast<long>(lo), out.begin() + static_cast<long>(hi), 1);
    }
    return out;
}

PixelMask plate_line_mask(const Plate& plate, std::size_t dilation) {
    auto rows = plate.fibers_with_role(FiberRole::sky);
    if (rows.empty()) rows = plate.usable_fibers();
    if (rows.empty()) throw EmptyInputError("no usable fiber for line detection");
    std::vector<double> med(plate.n_pixels());
    for (std::size_t j = 0; j < med.size(); ++j) med[j] = pixel_median(plate.flux, rows, j);
    return dilate(detect_excess(med).flags, dilation);
}

std::vector<PixelMask> classify_object_mask(const Plate& plate, const Matrix& continua) {
    const std::size_t n = plate.n_fibers(), m = plate.n_pixels();
    std::vector<PixelMask> masks(n, PixelMask(m, 0));
    const auto sky = plate.fibers_with_role(FiberRole::sky);
    if (sky.empty()) return masks;
    Matrix excess(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) excess(i, j) = plate.flux(i, j) - continua(i, j);
    std::vector<double> sky_ref(m);
    for (std::size_t j = 0; j < m; ++j) sky_ref[j] = pixel_median(excess, sky, j);
    for (std::size_t i = 0; i < n; ++i) {
        if (plate.fibers[i].role != FiberRole::target) continue;
        std::vector<double> r(m);
        for (std::size_t j = 0; j < m; ++j) r[j] = excess(i, j) - sky_ref[j];
        const double thr = 3.0 * robust_sigma(r);
        PixelMask flag(m, 0);
        for (std::size_t j = 0; j < m; ++j) flag[j] = std::abs(r[j]) > thr ? 1 : 0;
        masks[i] = dilate(flag, 3);
    }
    return masks;
}

Matrix make_sky_labels(const Plate& plate, const Matrix& continua, const std::vector<PixelMask>& object_mask,
                       const PixelMask& line_mask) {
    const std::size_t n = plate.n_fibers(), m = plate.n_pixels();
    if (continua.rows() != n || continua.cols() != m) throw ShapeError("continua shape does not match plate");
    if (!object_mask.empty() && object_mask.size() != n) throw ShapeError("object mask needs one row per fiber");
    if (!line_mask.empty() && line_mask.size() != m) throw ShapeError("line mask length does not match grid");
    Matrix labels(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> e(m);
        for (std::size_t j = 0; j < m; ++j) e[j] = plate.flux(i, j) - continua(i, j);
        const double thr = 3.0 * robust_sigma(e);
        PixelMask flag(m, 0);
        for (std::size_t j = 0; j < m; ++j) flag[j] = (e[j] > thr && e[j] > 0.0) ? 1 : 0;
        auto keep = dilate(flag, 3);
        if (!line_mask.empty())
            for (std::size_t j = 0; j < m; ++j) keep[j] |= line_mask[j];
        for (std::size_t j = 0; j < m; ++j) {
            const bool object_pixel = !object_mask.empty() && !object_mask[i].empty() && object_mask[i][j];
            labels(i, j) = (keep[j] && !object_pixel) ? std::max(e[j], 0.0) : 0.0;
        }
    }
    return labels;
}

void SegmentPlan::validate(std::size_t n) const {
    if (segments.empty()) throw ContractError("segment plan is empty");
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto& seg = segments[s];
        if (seg.start != cursor || seg.end <= seg.start) {
            throw ContractError("segment " + std::to_string(s) + " [" + std::to_string(seg.start) + ", " +
                                std::to_string(seg.end) + ") breaks the partition at pixel " +
                                std::to_string(cursor));
        }
        cursor = seg.end;
    }
    if (cursor != n) {
        throw ContractError("segment plan covers " + std::to_string(cursor) + " of " + std::to_string(n) + " pixels");
    }
}

nlohmann::json SegmentPlan::to_json() const {
    auto j = nlohmann::json::array();
    for (const auto& s : segments) j.push_back({s.start, s.end, s.count});
    return j;
}

SegmentPlan SegmentPlan::from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw FormatError("segment plan must be a JSON array");
    SegmentPlan plan;
    for (const auto& e : j) {
        if (!e.is_array() || e.size() != 3) throw FormatError("segment entry must be [start, end, count]");
        plan.segments.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>(), e[2].get<std::size_t>()});
    }
    plan.validate(plan.n_pixels());
    return plan;
}

SegmentPlan segment_adaptive(const PixelMask& line_pixels, const SegmentationConfig& cfg) {
    if (cfg.min_length == 0 || cfg.step == 0 || cfg.max_length < cfg.min_length) {
        throw ConfigError("segmentation bounds must satisfy 0 < min_length <= max_length and step > 0");
    }
    const std::size_t n = line_pixels.size();
    if (n == 0) throw EmptyInputError("cannot segment an empty grid");
    std::vector<std::size_t> prefix(n + 1, 0);
    for (std::size_t j = 0; j < n; ++j) prefix[j + 1] = prefix[j] + (line_pixels[j] ? 1 : 0);
    auto count = [&](std::size_t a, std::size_t b) { return prefix[std::min(b, n)] - prefix[std::min(a, n)]; };
    auto ratio = [&](std::size_t p, std::size_t len) {
        return std::log(static_cast<double>(len) / static_cast<double>(std::max<std::size_t>(count(p, p + len), 1)));
    };

    SegmentPlan plan;
    std::size_t p = 0;
    while (p < n) {
        const std::size_t remaining = n - p;
        std::size_t len = cfg.min_length;
        while (len < cfg.max_length && len + cfg.step <= remaining) {
            const std::size_t next = len + cfg.step;
            if (count(p, p + next) == 0) {
                len = next;
                continue;
            }
            if (std::abs(ratio(p, next) - ratio(p, len)) < cfg.tolerance) break;
            len = next;
        }
        len = std::min(len, remaining);
        if (remaining - len < cfg.min_length) len = remaining;  // the last segment absorbs the tail
        plan.segments.push_back({p, p + len, count(p, p + len)});
        p += len;
    }
    return plan;
}

PixelMask label_line_pixels(const Matrix& labels, const std::vector<std::size_t>& fibers) {
    if (fibers.empty()) throw EmptyInputError("no fibers to aggregate labels over");
    std::vector<double> med(labels.cols());
    for (std::size_t j = 0; j < med.size(); ++j) med[j] = pixel_median(labels, fibers, j);
    return detect_excess(med).flags;
}

}  // namespace smi::preprocess
