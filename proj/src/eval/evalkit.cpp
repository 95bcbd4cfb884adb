#include "smi/eval/evalkit.hpp"

#include "smi/core/bundle.hpp"
#include "smi/core/error.hpp"
#include "smi/core/robust.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace smi::eval {

namespace {

std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

BSplineBasis BSplineBasis::uniform(std::size_t n_pixels, std::size_t spacing) {
    if (n_pixels < 4) throw DomainError("spline fit needs at least 4 pixels");
    if (spacing == 0) throw ConfigError("knot spacing must be positive");
    const double last = static_cast<double>(n_pixels - 1);
    std::vector<double> breaks;
    for (std::size_t b = 0; static_cast<double>(b) < last; b += spacing) breaks.push_back(static_cast<double>(b));
    if (breaks.size() > 1 && last - breaks.back() < 0.5 * static_cast<double>(spacing)) breaks.pop_back();
    breaks.push_back(last);

    BSplineBasis basis;
    basis.knots.assign(3, breaks.front());
    basis.knots.insert(basis.knots.end(), breaks.begin(), breaks.end());
    basis.knots.insert(basis.knots.end(), 3, breaks.back());
    basis.n_basis = basis.knots.size() - 4;
    return basis;
}

std::vector<double> BSplineBasis::breakpoints() const { return {knots.begin() + 3, knots.end() - 3}; }

std::size_t BSplineBasis::evaluate(double x, double out[4]) const {
    // Span index s with knots[s] <= x < knots[s + 1], clamped to the last interval.
    const std::size_t lo = 3, hi = knots.size() - 5;
    auto it = std::upper_bound(knots.begin() + static_cast<long>(lo), knots.begin() + static_cast<long>(hi + 1), x);
    std::size_t s = static_cast<std::size_t>(it - knots.begin()) - 1;
    s = std::clamp(s, lo, hi);
    // Cox-de Boor triangle for degree 3.
    double left[4], right[4];
    out[0] = 1.0;
    for (std::size_t j = 1; j <= 3; ++j) {
        left[j] = x - knots[s + 1 - j];
        right[j] = knots[s + j] - x;
        double saved = 0.0;
        for (std::size_t r = 0; r < j; ++r) {
            const double tmp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        out[j] = saved;
    }
    return s - 3;
}

Spectrum bspline_fit(std::span<const double> y, std::size_t spacing) {
    const auto basis = BSplineBasis::uniform(y.size(), spacing);
    const auto n = static_cast<Eigen::Index>(y.size());
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(basis.n_basis));
    std::vector<std::size_t> first(y.size());
    std::vector<std::array<double, 4>> vals(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        first[i] = basis.evaluate(static_cast<double>(i), vals[i].data());
        for (std::size_t k = 0; k < 4; ++k) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(first[i] + k)) = vals[i][k];
    }
    const Eigen::Map<const Eigen::VectorXd> rhs(y.data(), n);
    const Eigen::VectorXd coef = a.colPivHouseholderQr().solve(rhs);
    Spectrum out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        double v = 0.0;
        for (std::size_t k = 0; k < 4; ++k) v += vals[i][k] * coef(static_cast<Eigen::Index>(first[i] + k));
        out[i] = v;
    }
    return out;
}

Spectrum pixel_median(const Matrix& flux, const std::vector<std::size_t>& rows) {
    if (rows.empty()) throw EmptyInputError("pixel median over no rows");
    Spectrum out(flux.cols());
    std::vector<double> column(rows.size());
    for (std::size_t j = 0; j < flux.cols(); ++j) {
        for (std::size_t k = 0; k < rows.size(); ++k) column[k] = flux(rows[k], j);
        out[j] = median(column);
    }
    return out;
}

Spectrum supersky_baseline(const Plate& plate, const std::vector<std::size_t>& sky_fibers, std::size_t spacing) {
    if (sky_fibers.size() < 3) {
        throw EmptyInputError("super-sky baseline needs at least 3 sky fibers, got " +
                              std::to_string(sky_fibers.size()));
    }
    return bspline_fit(pixel_median(plate.flux, sky_fibers), spacing);
}

ResidualStats residual_stats(std::span<const double> estimate, std::span<const double> observed) {
    if (estimate.size() != observed.size()) throw ShapeError("residual_stats: length mismatch");
    if (estimate.empty()) throw EmptyInputError("residual_stats of empty input");
    double s = 0.0, a = 0.0, q = 0.0;
    for (std::size_t i = 0; i < estimate.size(); ++i) {
        const double e = estimate[i] - observed[i];
        s += e;
        a += std::abs(e);
        q += e * e;
    }
    const double n = static_cast<double>(estimate.size());
    return {s / n, a / n, std::sqrt(q / n)};
}

ResidualStats combine(const std::vector<ResidualStats>& parts, const std::vector<std::size_t>& counts) {
    if (parts.size() != counts.size() || parts.empty()) throw ShapeError("combine: mismatched inputs");
    double n = 0.0, s = 0.0, a = 0.0, q = 0.0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const double c = static_cast<double>(counts[k]);
        n += c;
        s += c * parts[k].bias;
        a += c * parts[k].mae;
        q += c * parts[k].rmse * parts[k].rmse;
    }
    if (n == 0.0) throw EmptyInputError("combine over zero samples");
    return {s / n, a / n, std::sqrt(q / n)};
}

std::vector<std::size_t> detect_lines_3sigma(std::span<const double> spectrum) {
    if (spectrum.size() < 128) throw DomainError("line detection needs at least 128 pixels");
    return detect_excess(spectrum, 3.0, 51).peaks();
}

std::vector<LineWindowResidual> line_window_residuals(std::span<const double> estimate,
                                                      std::span<const double> observed,
                                                      const std::vector<std::size_t>& centers,
                                                      std::size_t half_width) {
    if (estimate.size() != observed.size()) throw ShapeError("line_window_residuals: length mismatch");
    std::vector<LineWindowResidual> out;
    for (auto c : centers) {
        LineWindowResidual r;
        r.center = c;
        r.half_width = half_width;
        if (c < half_width || c + half_width >= estimate.size()) {
            r.valid = false;
        } else {
            r.stats = residual_stats(estimate.subspan(c - half_width, 2 * half_width + 1),
                                     observed.subspan(c - half_width, 2 * half_width + 1));
        }
        out.push_back(r);
    }
    return out;
}

ResidualStats line_region_residuals(std::span<const double> estimate, std::span<const double> observed) {
    const auto det = detect_excess(observed, 3.0, 51);
    std::vector<double> e, o;
    for (const auto& r : det.regions)
        for (std::size_t j = r.begin; j < r.end; ++j) {
            e.push_back(estimate[j]);
            o.push_back(observed[j]);
        }
    if (e.empty()) return {};
    return residual_stats(e, o);
}

Overlay shared_inspection(std::span<const double> shared, std::span<const double> x, std::span<const double> y,
                          const preprocess::Segment& segment) {
    const std::size_t len = segment.length();
    if (x.size() < segment.end || y.size() < segment.end) throw ShapeError("overlay spectra shorter than segment");
    Overlay o;
    o.segment = segment;
    o.observed_x.assign(x.begin() + static_cast<long>(segment.start), x.begin() + static_cast<long>(segment.end));
    o.observed_y.assign(y.begin() + static_cast<long>(segment.start), y.begin() + static_cast<long>(segment.end));
    if (shared.size() == len) {
        o.shared.assign(shared.begin(), shared.end());
    } else if (shared.size() >= segment.end) {
        o.shared.assign(shared.begin() + static_cast<long>(segment.start), shared.begin() + static_cast<long>(segment.end));
    } else {
        throw ShapeError("shared representation does not cover the segment");
    }
    return o;
}

Histogram residual_histogram(std::span<const double> residuals, std::size_t bins) {
    if (residuals.empty()) throw EmptyInputError("histogram of empty residuals");
    if (bins == 0) throw ConfigError("histogram needs at least one bin");
    Histogram h;
    double s = 0.0, q = 0.0;
    for (double v : residuals) {
        s += v;
        q += v * v;
    }
    const double n = static_cast<double>(residuals.size());
    h.mean = s / n;
    h.std = std::sqrt(std::max(0.0, q / n - h.mean * h.mean));
    const double rmse = std::sqrt(q / n);
    const double half = rmse > 0.0 ? 5.0 * rmse : 1.0;
    h.lo = -half;
    h.hi = half;
    h.counts.assign(bins, 0);
    const double width = (h.hi - h.lo) / static_cast<double>(bins);
    for (double v : residuals) {
        auto b = static_cast<long>(std::floor((v - h.lo) / width));
        b = std::clamp(b, 0L, static_cast<long>(bins) - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

void EvalReport::validate() const {
    for (const auto& r : rows) {
        const auto& s = r.stats;
        if (!(s.rmse >= 0.0) || s.rmse + 1e-12 < std::abs(s.bias) || s.mae + 1e-12 < std::abs(s.bias)) {
            throw ContractError("report row " + r.spec + "/" + r.method + " violates rmse >= |bias|, mae >= |bias|");
        }
    }
}

std::string format_spec(int spectrograph) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%02d", spectrograph);
    return buf;
}

std::string render_table_row(const std::string& spec, const ResidualStats& baseline, const ResidualStats& smi) {
    return spec + " | " + fixed2(baseline.bias) + " | " + fixed2(baseline.rmse) + " | " + fixed2(smi.bias) + " | " +
           fixed2(smi.rmse);
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
    std::ostringstream out;
    out << "planid,spec,method,bias,mae,rmse\n";
    for (const auto& r : report.rows) {
        out << report.plan_id << ',' << r.spec << ',' << r.method << ',' << num(r.stats.bias) << ','
            << num(r.stats.mae) << ',' << num(r.stats.rmse) << '\n';
    }
    io::write_text(path, out.str());
}

std::string histogram_svg(const std::vector<std::pair<std::string, Histogram>>& series, const std::string& title) {
    constexpr double W = 640, H = 400, ml = 50, mr = 20, mt = 40, mb = 40;
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
    double lo = 0.0, hi = 0.0;
    std::size_t peak = 1;
    for (const auto& [_, h] : series) {
        lo = std::min(lo, h.lo);
        hi = std::max(hi, h.hi);
        for (auto c : h.counts) peak = std::max(peak, c);
    }
    if (hi <= lo) hi = lo + 1.0;
    auto px = [&](double v) { return ml + (v - lo) / (hi - lo) * (W - ml - mr); };
    auto py = [&](double c) { return H - mb - c / static_cast<double>(peak) * (H - mt - mb); };
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
      << title << "</text>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb
      << "\" stroke=\"black\"/>\n";
    std::size_t k = 0;
    for (const auto& [name, h] : series) {
        const double bw = (h.hi - h.lo) / static_cast<double>(h.counts.size());
        s << "<polyline fill=\"none\" stroke=\"" << colors[k % 4] << "\" points=\"";
        for (std::size_t b = 0; b < h.counts.size(); ++b) {
            const double x0 = h.lo + bw * static_cast<double>(b);
            const double y = static_cast<double>(h.counts[b]);
            s << num(px(x0)) << ',' << num(py(y)) << ' ' << num(px(x0 + bw)) << ',' << num(py(y)) << ' ';
        }
        s << "\"/>\n<text x=\"" << W - mr - 200 << "\" y=\"" << mt + 16 * static_cast<double>(k + 1)
          << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << colors[k % 4] << "\">" << name
          << " mean=" << num(h.mean) << " std=" << num(h.std) << "</text>\n";
        ++k;
    }
    s << "</svg>\n";
    return s.str();
}

std::string overlay_svg(const Overlay& overlay, const std::string& title) {
    constexpr double W = 720, H = 360, ml = 50, mr = 20, mt = 40, mb = 30;
    const std::vector<std::pair<const std::vector<double>*, const char*>> lines{
        {&overlay.observed_x, "#1f77b4"}, {&overlay.observed_y, "#2ca02c"}, {&overlay.shared, "#d62728"}};
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& [v, _] : lines)
        for (double x : *v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    if (!std::isfinite(lo) || hi <= lo) {
        lo = std::isfinite(lo) ? lo - 1.0 : 0.0;
        hi = lo + 2.0;
    }
    const double n = static_cast<double>(std::max<std::size_t>(overlay.segment.length(), 2) - 1);
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
      << title << " [" << overlay.segment.start << ", " << overlay.segment.end << ")</text>\n";
    for (const auto& [v, color] : lines) {
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
        for (std::size_t j = 0; j < v->size(); ++j) {
            const double x = ml + static_cast<double>(j) / n * (W - ml - mr);
            const double y = H - mb - ((*v)[j] - lo) / (hi - lo) * (H - mt - mb);
            s << num(x) << ',' << num(y) << ' ';
        }
        s << "\"/>\n";
    }
    s << "</svg>\n";
    return s.str();
}

void write_report(const std::filesystem::path& dir, const EvalReport& report) {
    report.validate();
    std::filesystem::create_directories(dir);
    write_report_csv(dir / "report.csv", report);

    std::map<std::string, std::vector<std::pair<std::string, Histogram>>> by_spec;
    for (const auto& [key, h] : report.histograms) {
        const auto cut = key.rfind('_');
        by_spec[cut == std::string::npos ? key : key.substr(cut + 1)].emplace_back(key.substr(0, cut), h);
    }
    for (const auto& [spec, series] : by_spec) {
        io::write_text(dir / ("hist_" + spec + ".svg"), histogram_svg(series, "residuals, spectrograph " + spec));
    }
    for (const auto& [key, o] : report.overlays) {
        io::write_text(dir / ("overlay_" + key + ".svg"), overlay_svg(o, "shared representation " + key));
    }
    if (!report.lines.empty()) {
        std::ostringstream out;
        out << "pixel,half_width,method,bias,mae,rmse\n";
        for (const auto& l : report.lines)
            for (const auto& [method, st] : l.per_method)
                out << l.center << ',' << l.half_width << ',' << method << ',' << num(st.bias) << ',' << num(st.mae)
                    << ',' << num(st.rmse) << '\n';
        io::write_text(dir / "lines.csv", out.str());
    }
}

}  // namespace smi::eval
