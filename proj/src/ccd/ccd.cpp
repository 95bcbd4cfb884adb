#include "smi/ccd/ccd.hpp"

#include "smi/core/error.hpp"
#include "smi/core/rng.hpp"
#include "smi/core/robust.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <string>

namespace smi::ccd {

namespace fs = std::filesystem;

namespace {

constexpr std::array<char, 4> kFrameMagic{'S', 'M', 'I', 'F'};

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    T out = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) out |= ((v >> (8 * i)) & 0xffU) << (8 * (sizeof(T) - 1 - i));
    return out;
}

void put_u32(std::vector<char>& buf, std::uint32_t v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf.insert(buf.end(), p, p + 4);
}

std::uint32_t get_u32(const char* p) {
    std::uint32_t v = 0;
    std::memcpy(&v, p, 4);
    return to_little(v);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// Flux fraction of a unit Gaussian centred at c that falls in pixel k.
double pixel_fraction(double k, double c, double sigma) {
    return normal_cdf((k + 0.5 - c) / sigma) - normal_cdf((k - 0.5 - c) / sigma);
}

void require_same_shape(const Frame& a, const Frame& b, const std::string& what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(what + ": frames differ in shape (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")");
    }
}

double interpolate(const std::vector<double>& xs, std::span<const double> ys, double x) {
    if (x <= xs.front()) return ys.front();
    if (x >= xs.back()) return ys.back();
    const auto it = std::upper_bound(xs.begin(), xs.end(), x);
    const auto k = static_cast<std::size_t>(it - xs.begin());
    const double t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    return ys[k - 1] + t * (ys[k] - ys[k - 1]);
}

// Column at which a monotone wavelength map reaches lambda.
double invert(const Polynomial& p, double lambda, double lo, double hi) {
    for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
        const double mid = 0.5 * (lo + hi);
        (p(mid) < lambda ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

// Flux-weighted centroid over [center - w, center + w], recentred once.
double centroid(std::span<const double> v, std::size_t peak, std::size_t w, double background) {
    double c = static_cast<double>(peak);
    for (int pass = 0; pass < 2; ++pass) {
        const auto mid = static_cast<long>(std::lround(c));
        const long lo = std::max<long>(0, mid - static_cast<long>(w));
        const long hi = std::min<long>(static_cast<long>(v.size()) - 1, mid + static_cast<long>(w));
        double s = 0.0, sy = 0.0;
        for (long k = lo; k <= hi; ++k) {
            const double f = std::max(0.0, v[static_cast<std::size_t>(k)] - background);
            s += f;
            sy += f * static_cast<double>(k);
        }
        if (s <= 0.0) break;
        c = sy / s;
    }
    return c;
}

struct Match {
    std::vector<double> columns, wavelengths;
    double rss = 0.0;
};

// One-to-one nearest matches of predicted wavelengths within a tolerance in pixels.
template <typename Predict, typename Dispersion>
Match match_lines(const std::vector<double>& detected, const std::vector<double>& catalog, Predict predict,
                  Dispersion dispersion, double tol_px) {
    std::map<std::size_t, std::pair<std::size_t, double>> by_catalog;  // catalog index -> (detected index, err px)
    for (std::size_t i = 0; i < detected.size(); ++i) {
        const double pred = predict(detected[i]);
        const double disp = std::abs(dispersion(detected[i]));
        if (!(disp > 0.0)) continue;
        const auto it = std::lower_bound(catalog.begin(), catalog.end(), pred);
        std::size_t best = catalog.size();
        double best_err = tol_px;
        for (auto cand : {it, it == catalog.begin() ? it : it - 1}) {
            if (cand == catalog.end()) continue;
            const double err = std::abs(*cand - pred) / disp;
            if (err <= best_err) {
                best_err = err;
                best = static_cast<std::size_t>(cand - catalog.begin());
            }
        }
        if (best == catalog.size()) continue;
        const auto prev = by_catalog.find(best);
        if (prev == by_catalog.end() || best_err < prev->second.second) by_catalog[best] = {i, best_err};
    }
    std::vector<std::pair<double, double>> pairs;
    Match m;
    for (const auto& [k, v] : by_catalog) {
        pairs.emplace_back(detected[v.first], catalog[k]);
        m.rss += v.second * v.second;
    }
    std::sort(pairs.begin(), pairs.end());
    for (const auto& [c, l] : pairs) {
        m.columns.push_back(c);
        m.wavelengths.push_back(l);
    }
    return m;
}

}  // namespace

std::string_view to_string(FrameKind kind) {
    switch (kind) {
        case FrameKind::bias: return "bias";
        case FrameKind::flat: return "flat";
        case FrameKind::arc: return "arc";
        case FrameKind::science: return "science";
    }
    return "unknown";
}

FrameKind frame_kind_from_string(std::string_view s) {
    for (auto k : {FrameKind::bias, FrameKind::flat, FrameKind::arc, FrameKind::science}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unknown frame kind: " + std::string(s));
}

void Frame::validate() const {
    if (rows() < kMinSize || cols() < kMinSize) {
        throw ShapeError("frame must be at least " + std::to_string(kMinSize) + "x" + std::to_string(kMinSize));
    }
    check_finite(data.data(), "frame");
}

void write_frame(const fs::path& path, const Frame& frame) {
    frame.validate();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::vector<char> buf(kFrameMagic.begin(), kFrameMagic.end());
    put_u32(buf, static_cast<std::uint32_t>(frame.rows()));
    put_u32(buf, static_cast<std::uint32_t>(frame.cols()));
    put_u32(buf, static_cast<std::uint32_t>(frame.kind));
    const std::size_t header = buf.size();
    buf.resize(header + 8 * frame.data.data().size());
    for (std::size_t i = 0; i < frame.data.data().size(); ++i) {
        const auto le = to_little(std::bit_cast<std::uint64_t>(frame.data.data()[i]));
        std::memcpy(buf.data() + header + 8 * i, &le, 8);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

Frame read_frame(const fs::path& path) {
    if (!fs::exists(path)) throw MissingArtifactError(path.string());
    const auto size = static_cast<std::size_t>(fs::file_size(path));
    std::vector<char> buf(size);
    std::ifstream in(path, std::ios::binary);
    in.read(buf.data(), static_cast<std::streamsize>(size));
    if (size < 16 || !std::equal(kFrameMagic.begin(), kFrameMagic.end(), buf.begin())) {
        throw FormatError(path.string() + ": not an SMIF frame");
    }
    const std::size_t rows = get_u32(buf.data() + 4), cols = get_u32(buf.data() + 8);
    const std::uint32_t kind = get_u32(buf.data() + 12);
    if (kind > static_cast<std::uint32_t>(FrameKind::science)) throw FormatError(path.string() + ": bad frame kind");
    if (size != 16 + 8 * rows * cols) throw FormatError(path.string() + ": size does not match the header");
    Frame f{Matrix(rows, cols), static_cast<FrameKind>(kind)};
    for (std::size_t i = 0; i < rows * cols; ++i) {
        std::uint64_t le = 0;
        std::memcpy(&le, buf.data() + 16 + 8 * i, 8);
        f.data.data()[i] = std::bit_cast<double>(to_little(le));
    }
    f.validate();
    return f;
}

double Polynomial::operator()(double x) const {
    double v = 0.0;
    for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) v = v * x + *it;
    return v;
}

double Polynomial::derivative(double x) const {
    double v = 0.0;
    for (std::size_t k = coeffs.size(); k-- > 1;) v = v * x + static_cast<double>(k) * coeffs[k];
    return v;
}

Polynomial fit_polynomial(std::span<const double> x, std::span<const double> y, std::size_t degree) {
    if (x.size() != y.size()) throw ShapeError("fit_polynomial: x and y differ in length");
    if (x.size() < degree + 1) {
        throw ContractError("fit_polynomial: degree " + std::to_string(degree) + " needs at least " +
                            std::to_string(degree + 1) + " points");
    }
    double s = 0.0;
    for (double v : x) s = std::max(s, std::abs(v));
    if (s == 0.0) s = 1.0;
    Eigen::MatrixXd a(x.size(), degree + 1);
    Eigen::VectorXd b(y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double t = 1.0;
        for (std::size_t k = 0; k <= degree; ++k) {
            a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = t;
            t *= x[i] / s;
        }
        b(static_cast<Eigen::Index>(i)) = y[i];
    }
    const Eigen::VectorXd c = a.colPivHouseholderQr().solve(b);
    Polynomial p;
    double sk = 1.0;
    for (std::size_t k = 0; k <= degree; ++k) {
        p.coeffs.push_back(c(static_cast<Eigen::Index>(k)) / sk);
        sk *= s;
    }
    return p;
}

std::pair<std::size_t, std::size_t> TraceSolution::aperture(std::size_t fiber, std::size_t col,
                                                            std::size_t rows) const {
    const long c = std::lround(centers.at(fiber)(static_cast<double>(col)));
    const long w = static_cast<long>(std::floor(half_width));
    const long lo = std::clamp<long>(c - w, 0, static_cast<long>(rows));
    const long hi = std::clamp<long>(c + w + 1, 0, static_cast<long>(rows));
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

void TraceSolution::validate(std::size_t rows, std::size_t cols) const {
    if (!(half_width >= 0.0)) throw ContractError("trace aperture half-width must be >= 0");
    for (std::size_t x = 0; x < cols; ++x) {
        for (std::size_t f = 0; f < n_fibers(); ++f) {
            const double c = centers[f](static_cast<double>(x));
            if (!(c >= 0.0 && c <= static_cast<double>(rows) - 1.0)) {
                throw ContractError("trace " + std::to_string(f) + " leaves the frame at column " + std::to_string(x));
            }
            if (f == 0) continue;
            if (!(c > centers[f - 1](static_cast<double>(x))) || aperture(f, x, rows).first < aperture(f - 1, x, rows).second) {
                throw ContractError("traces " + std::to_string(f - 1) + " and " + std::to_string(f) +
                                    " cross or overlap at column " + std::to_string(x));
            }
        }
    }
}

void CcdConfig::validate() const {
    if (rows < Frame::kMinSize || cols < Frame::kMinSize) throw ConfigError("CcdConfig: frame must be at least 64x64");
    if (!(profile_sigma > 0.0) || !(arc_sigma > 0.0)) throw ConfigError("CcdConfig: widths must be > 0");
    if (!(noise_sigma >= 0.0) || !(bias_pattern >= 0.0)) throw ConfigError("CcdConfig: noise levels must be >= 0");
    if (!(flat_level > 0.0) || !(arc_flux > 0.0)) throw ConfigError("CcdConfig: lamp levels must be > 0");
    if (!(throughput_amplitude >= 0.0 && throughput_amplitude < 1.0)) {
        throw ConfigError("CcdConfig: throughput_amplitude in [0, 1)");
    }
    if (!(wavelength_curvature >= 0.0 && wavelength_curvature < 0.5)) {
        throw ConfigError("CcdConfig: wavelength_curvature in [0, 0.5)");
    }
    if (!(wavelength_jitter >= 0.0)) throw ConfigError("CcdConfig: wavelength_jitter must be >= 0");
}

std::vector<double> default_arc_catalog(Arm arm) {
    if (arm == Arm::blue) {
        // Hg, Cd and He lamp lines.
        return {3888.65, 4046.56, 4358.33, 4471.48, 4678.16, 4713.15,
                4799.91, 4921.93, 5015.68, 5085.82, 5460.74, 5769.60};
    }
    // Ne and Ar lamp lines.
    return {5852.49, 6143.06, 6402.25, 6506.53, 6678.28, 6929.47, 7032.41, 7173.94,
            7438.90, 7635.11, 7948.18, 8115.31, 8424.65, 8521.44, 9122.97};
}

SimulatedFrames simulate_frames(const Plate& plate, const CcdConfig& cfg) {
    cfg.validate();
    plate.validate();
    const std::size_t nf = plate.n_fibers();
    if (nf == 0) throw EmptyInputError("simulate_frames: plate has no fibers");
    if (nf > kMaxSimulatedFibers) {
        throw CapacityError("simulate_frames supports at most " + std::to_string(kMaxSimulatedFibers) +
                            " fibers, got " + std::to_string(nf));
    }
    const std::size_t rows = cfg.rows, cols = cfg.cols;
    const double spacing = static_cast<double>(rows) / static_cast<double>(nf + 1);
    const double reach = 6.0 * cfg.profile_sigma + 1.0;
    if (spacing < 2.0 * reach) {
        throw CapacityError("simulate_frames: " + std::to_string(nf) + " fibers do not fit on " +
                            std::to_string(rows) + " rows");
    }

    SimulatedFrames sim;
    const double h = 0.5 * static_cast<double>(cols - 1);
    const double n = static_cast<double>(cols - 1);
    const double lam_lo = plate.grid.wavelength.front(), lam_hi = plate.grid.wavelength.back();
    const double inset = 0.015 * (lam_hi - lam_lo);
    const double disp = (lam_hi - lam_lo - 2.0 * inset) / n;
    const double q = cfg.wavelength_curvature;
    sim.traces.half_width = 4.0;
    auto geo_rng = make_stream(cfg.seed, "ccd-geometry");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t f = 0; f < nf; ++f) {
        const double y0 = spacing * static_cast<double>(f + 1);
        Polynomial trace{{y0 - cfg.trace_tilt * h + cfg.trace_curvature * h * h,
                          cfg.trace_tilt - 2.0 * cfg.trace_curvature * h, cfg.trace_curvature}};
        for (double x : {0.0, h, n}) {
            const double c = trace(x);
            if (c < reach || c > static_cast<double>(rows - 1) - reach) {
                throw ConfigError("simulate_frames: trace " + std::to_string(f) + " leaves the frame");
            }
        }
        sim.traces.centers.push_back(trace);
        sim.traces.residual_rms.push_back(0.0);

        const double shift = cfg.wavelength_jitter * (2.0 * unit(geo_rng) - 1.0);
        // Quadratic departure vanishes at both frame ends and peaks mid-frame at q * n / 4 px.
        sim.wavelength.push_back(Polynomial{{lam_lo + inset + disp * shift, disp * (1.0 - q), q * disp / n}});

        std::vector<double> t(cols);
        const double amp = cfg.throughput_amplitude * (0.5 + 0.5 * unit(geo_rng));
        const double phase = 2.0 * std::numbers::pi * unit(geo_rng);
        const double cycles = static_cast<double>(1 + f % 3);
        for (std::size_t x = 0; x < cols; ++x) {
            t[x] = 1.0 + amp * std::sin(2.0 * std::numbers::pi * cycles * static_cast<double>(x) /
                                            static_cast<double>(cols) + phase);
        }
        sim.throughput.push_back(std::move(t));
    }
    double cover_lo = -INFINITY, cover_hi = INFINITY;
    for (const auto& w : sim.wavelength) {
        if (w(0.0) < lam_lo || w(n) > lam_hi) throw ConfigError("simulate_frames: wavelength map leaves the plate grid");
        cover_lo = std::max(cover_lo, w(0.0));
        cover_hi = std::min(cover_hi, w(n));
    }
    const auto catalog = default_arc_catalog(plate.grid.arm);
    for (double l : catalog)
        if (l > cover_lo && l < cover_hi) sim.arc_lines.push_back(l);

    sim.injected = Matrix(nf, cols);
    Matrix arc1d(nf, cols);
    for (std::size_t f = 0; f < nf; ++f) {
        const auto& w = sim.wavelength[f];
        for (std::size_t x = 0; x < cols; ++x) {
            sim.injected(f, x) = interpolate(plate.grid.wavelength, plate.flux.row(f), w(static_cast<double>(x)));
        }
        for (double l : catalog) {
            if (l <= w(0.0) || l >= w(n)) continue;
            const double xl = invert(w, l, 0.0, n);
            const auto lo = static_cast<std::size_t>(std::max(0.0, std::floor(xl - 6.0 * cfg.arc_sigma)));
            const auto hi = static_cast<std::size_t>(std::min(n, std::ceil(xl + 6.0 * cfg.arc_sigma)));
            for (std::size_t x = lo; x <= hi; ++x) {
                arc1d(f, x) += cfg.arc_flux * pixel_fraction(static_cast<double>(x), xl, cfg.arc_sigma);
            }
        }
    }

    sim.bias = Frame{Matrix(rows, cols), FrameKind::bias};
    auto bias_rng = make_stream(cfg.seed, "ccd-bias");
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t y = 0; y < rows; ++y)
        for (std::size_t x = 0; x < cols; ++x) {
            sim.bias.data(y, x) = cfg.bias_level + cfg.bias_gradient * static_cast<double>(x) / n +
                                  cfg.bias_pattern * gauss(bias_rng);
        }

    const auto render = [&](FrameKind kind, const std::function<double(std::size_t, std::size_t)>& amplitude) {
        Frame fr{sim.bias.data, kind};
        for (std::size_t f = 0; f < nf; ++f) {
            for (std::size_t x = 0; x < cols; ++x) {
                const double a = amplitude(f, x) * sim.throughput[f][x];
                if (a == 0.0) continue;
                const double c = sim.traces.centers[f](static_cast<double>(x));
                const auto lo = static_cast<std::size_t>(std::floor(c - reach));
                const auto hi = static_cast<std::size_t>(std::ceil(c + reach));
                for (std::size_t y = lo; y <= hi; ++y) {
                    fr.data(y, x) += a * pixel_fraction(static_cast<double>(y), c, cfg.profile_sigma);
                }
            }
        }
        if (cfg.noise_sigma > 0.0) {
            auto rng = make_stream(cfg.seed, "ccd-noise", static_cast<std::uint64_t>(kind));
            for (auto& v : fr.data.data()) v += cfg.noise_sigma * gauss(rng);
        }
        return fr;
    };
    sim.flat = render(FrameKind::flat, [&](std::size_t, std::size_t) { return cfg.flat_level; });
    sim.arc = render(FrameKind::arc, [&](std::size_t f, std::size_t x) { return arc1d(f, x); });
    sim.science = render(FrameKind::science, [&](std::size_t f, std::size_t x) { return sim.injected(f, x); });
    return sim;
}

Frame subtract_bias(const Frame& frame, const Frame& bias) {
    require_same_shape(frame, bias, "subtract_bias");
    Frame out = frame;
    for (std::size_t i = 0; i < out.data.data().size(); ++i) out.data.data()[i] -= bias.data.data()[i];
    return out;
}

Frame normalize_flat(const Frame& flat, const TraceSolution& traces) {
    Frame out{Matrix(flat.rows(), flat.cols(), 1.0), FrameKind::flat};
    for (std::size_t f = 0; f < traces.n_fibers(); ++f) {
        std::vector<double> sum(flat.cols(), 0.0);
        for (std::size_t x = 0; x < flat.cols(); ++x) {
            const auto [lo, hi] = traces.aperture(f, x, flat.rows());
            for (std::size_t y = lo; y < hi; ++y) sum[x] += flat.data(y, x);
        }
        const double m = mean(sum);
        for (std::size_t x = 0; x < flat.cols(); ++x) {
            const auto [lo, hi] = traces.aperture(f, x, flat.rows());
            for (std::size_t y = lo; y < hi; ++y) out.data(y, x) = m > 0.0 ? sum[x] / m : 0.0;
        }
    }
    return out;
}

FlatResult flat_correct(const Frame& frame, const Frame& flat, const TraceSolution& traces, double eps) {
    require_same_shape(frame, flat, "flat_correct");
    FlatResult res{frame, {}};
    std::vector<std::uint8_t> done(frame.rows() * frame.cols(), 0);
    for (std::size_t f = 0; f < traces.n_fibers(); ++f) {
        for (std::size_t x = 0; x < frame.cols(); ++x) {
            const auto [lo, hi] = traces.aperture(f, x, frame.rows());
            for (std::size_t y = lo; y < hi; ++y) {
                auto& seen = done[y * frame.cols() + x];
                if (seen) continue;
                seen = 1;
                const double v = flat.data(y, x);
                if (!(v > eps)) {
                    res.frame.data(y, x) = 0.0;
                    res.flagged.emplace_back(y, x);
                } else {
                    res.frame.data(y, x) = frame.data(y, x) / v;
                }
            }
        }
    }
    std::sort(res.flagged.begin(), res.flagged.end());
    return res;
}

TraceSolution trace_fibers(const Frame& flat, std::size_t n_fibers, const TraceConfig& cfg) {
    flat.validate();
    if (n_fibers == 0) throw ConfigError("trace_fibers: n_fibers must be > 0");
    if (cfg.step == 0) throw ConfigError("trace_fibers: step must be > 0");
    const std::size_t rows = flat.rows(), cols = flat.cols();
    const auto w = static_cast<std::size_t>(std::floor(cfg.half_width));
    const std::size_t min_sep = 2 * w + 1;

    std::vector<double> xs;
    std::vector<std::vector<double>> ys(n_fibers);
    std::map<std::size_t, std::size_t> bad_counts;
    std::size_t sampled = 0;
    std::vector<double> p(rows);
    for (std::size_t x = cfg.band; x + cfg.band < cols; x += cfg.step) {
        ++sampled;
        for (std::size_t y = 0; y < rows; ++y) {
            double s = 0.0;
            for (std::size_t k = x - cfg.band; k <= x + cfg.band; ++k) s += flat.data(y, k);
            p[y] = s / static_cast<double>(2 * cfg.band + 1);
        }
        const double top = *std::max_element(p.begin(), p.end());
        std::vector<std::size_t> peaks;
        if (top > 0.0) {
            for (std::size_t y = 1; y + 1 < rows; ++y) {
                if (p[y] <= cfg.threshold * top || p[y] < p[y - 1] || p[y] <= p[y + 1]) continue;
                // Ridges closer than one aperture are not resolvable as separate fibers.
                if (!peaks.empty() && y - peaks.back() < min_sep) {
                    if (p[y] > p[peaks.back()]) peaks.back() = y;
                    continue;
                }
                peaks.push_back(y);
            }
        }
        if (peaks.size() != n_fibers) {
            ++bad_counts[peaks.size()];
            continue;
        }
        xs.push_back(static_cast<double>(x));
        for (std::size_t f = 0; f < n_fibers; ++f) ys[f].push_back(centroid(p, peaks[f], w, 0.0));
    }
    if (xs.size() < std::max<std::size_t>(cfg.max_degree + 2, (sampled + 1) / 2)) {
        std::size_t found = 0, most = 0;
        for (const auto& [count, times] : bad_counts) {
            if (times > most) {
                most = times;
                found = count;
            }
        }
        throw DetectionError("trace_fibers: found " + std::to_string(found) + " resolvable ridges, expected " +
                                 std::to_string(n_fibers),
                             found, n_fibers);
    }

    TraceSolution sol;
    sol.half_width = cfg.half_width;
    for (std::size_t f = 0; f < n_fibers; ++f) {
        std::vector<Polynomial> fits;
        std::vector<double> rms;
        for (std::size_t d = 0; d <= cfg.max_degree; ++d) {
            fits.push_back(fit_polynomial(xs, ys[f], d));
            double se = 0.0;
            for (std::size_t k = 0; k < xs.size(); ++k) se += std::pow(fits.back()(xs[k]) - ys[f][k], 2);
            rms.push_back(std::sqrt(se / static_cast<double>(xs.size())));
        }
        std::size_t d = 0;
        while (rms[d] > rms[cfg.max_degree] + cfg.degree_tolerance) ++d;
        sol.centers.push_back(fits[d]);
        sol.residual_rms.push_back(rms[d]);
    }
    sol.validate(rows, cols);
    return sol;
}

std::vector<double> extract_fiber(const Frame& frame, const TraceSolution& traces, std::size_t fiber) {
    if (fiber >= traces.n_fibers()) throw ContractError("extract_fiber: fiber index out of range");
    std::vector<double> out(frame.cols(), 0.0);
    for (std::size_t x = 0; x < frame.cols(); ++x) {
        const auto [lo, hi] = traces.aperture(fiber, x, frame.rows());
        for (std::size_t y = lo; y < hi; ++y) out[x] += frame.data(y, x);
    }
    return out;
}

WavelengthSolution fit_wavelength_solution(std::span<const double> columns, std::span<const double> wavelengths,
                                           std::size_t degree) {
    if (columns.size() != wavelengths.size()) throw ShapeError("wavelength solution: columns and wavelengths differ");
    if (columns.size() < degree + 1) {
        throw CalibrationError("wavelength solution needs at least " + std::to_string(degree + 1) +
                               " arc lines, got " + std::to_string(columns.size()));
    }
    std::vector<std::pair<double, double>> pairs;
    for (std::size_t i = 0; i < columns.size(); ++i) pairs.emplace_back(columns[i], wavelengths[i]);
    std::sort(pairs.begin(), pairs.end());
    WavelengthSolution sol;
    for (const auto& [c, l] : pairs) {
        sol.columns.push_back(c);
        sol.wavelengths.push_back(l);
    }
    sol.map = fit_polynomial(sol.columns, sol.wavelengths, degree);
    double se = 0.0;
    for (std::size_t i = 0; i < sol.columns.size(); ++i) {
        const double d = sol.map.derivative(sol.columns[i]);
        if (!(d > 0.0)) throw CalibrationError("wavelength solution is not increasing at an arc line");
        se += std::pow((sol.map(sol.columns[i]) - sol.wavelengths[i]) / d, 2);
    }
    sol.rms_px = std::sqrt(se / static_cast<double>(sol.columns.size()));
    return sol;
}

std::vector<double> find_arc_lines(std::span<const double> arc, double nsigma) {
    const std::size_t n = arc.size();
    if (n < 8) return {};
    const double bg = median(std::vector<double>(arc.begin(), arc.end()));
    std::vector<double> excess(n);
    for (std::size_t i = 0; i < n; ++i) excess[i] = arc[i] - bg;
    const double top = *std::max_element(excess.begin(), excess.end());
    const double threshold = std::max(nsigma * robust_sigma(excess), 0.01 * top);
    if (!(top > 0.0)) return {};
    constexpr std::size_t kWindow = 3;
    std::vector<std::size_t> peaks;
    for (std::size_t i = kWindow; i + kWindow < n; ++i) {
        if (excess[i] <= threshold || excess[i] < excess[i - 1] || excess[i] <= excess[i + 1]) continue;
        if (!peaks.empty() && i - peaks.back() <= kWindow) {
            if (excess[i] > excess[peaks.back()]) peaks.back() = i;
            continue;
        }
        peaks.push_back(i);
    }
    std::vector<double> out;
    for (auto p : peaks) out.push_back(centroid(arc, p, kWindow, bg));
    return out;
}

WavelengthSolution calibrate_wavelength(std::span<const double> arc, std::vector<double> catalog) {
    std::sort(catalog.begin(), catalog.end());
    catalog.erase(std::unique(catalog.begin(), catalog.end()), catalog.end());
    const auto detected = find_arc_lines(arc);
    if (detected.size() < 4 || catalog.size() < 4) {
        throw CalibrationError("wavelength calibration needs at least 4 arc lines, detected " +
                               std::to_string(detected.size()));
    }
    // Linear hypotheses from every pair of detections and every pair of catalog lines.
    Match best;
    for (std::size_t i = 0; i < detected.size(); ++i)
        for (std::size_t j = i + 1; j < detected.size(); ++j)
            for (std::size_t k = 0; k < catalog.size(); ++k)
                for (std::size_t l = k + 1; l < catalog.size(); ++l) {
                    const double disp = (catalog[l] - catalog[k]) / (detected[j] - detected[i]);
                    const double zero = catalog[k] - disp * detected[i];
                    auto m = match_lines(
                        detected, catalog, [&](double c) { return zero + disp * c; }, [&](double) { return disp; },
                        3.0);
                    if (m.columns.size() > best.columns.size() ||
                        (m.columns.size() == best.columns.size() && m.rss < best.rss)) {
                        best = std::move(m);
                    }
                }
    for (int pass = 0; pass < 3 && best.columns.size() >= 2; ++pass) {
        const auto fit = fit_polynomial(best.columns, best.wavelengths, std::min<std::size_t>(3, best.columns.size() - 1));
        best = match_lines(detected, catalog, fit, [&](double c) { return fit.derivative(c); }, 1.5);
    }
    if (best.columns.size() < 4) {
        throw CalibrationError("wavelength calibration matched only " + std::to_string(best.columns.size()) +
                               " arc lines, need 4");
    }
    return fit_wavelength_solution(best.columns, best.wavelengths, 3);
}

Extraction extract_and_wavecal(const Frame& science, const TraceSolution& traces, const Frame& arc,
                               const std::vector<double>& catalog, const PixelGrid& grid,
                               const std::vector<FiberMeta>& fibers) {
    require_same_shape(science, arc, "extract_and_wavecal");
    grid.validate();
    const std::size_t nf = traces.n_fibers(), cols = science.cols();
    if (!fibers.empty() && fibers.size() != nf) {
        throw ShapeError("extract_and_wavecal: " + std::to_string(fibers.size()) + " fiber records for " +
                         std::to_string(nf) + " traces");
    }
    Extraction ex;
    ex.raw = Matrix(nf, cols);
    ex.plate.grid = grid;
    ex.plate.flux = Matrix(nf, grid.n_pixels());
    ex.plate.plan_id = "ccd";
    for (std::size_t f = 0; f < nf; ++f) {
        FiberMeta meta;
        meta.id = static_cast<int>(f);
        ex.plate.fibers.push_back(fibers.empty() ? meta : fibers[f]);

        const auto flux = extract_fiber(science, traces, f);
        std::copy(flux.begin(), flux.end(), ex.raw.row(f).begin());
        const auto arc1d = extract_fiber(arc, traces, f);
        auto sol = calibrate_wavelength(arc1d, catalog);
        std::vector<double> lam(cols);
        for (std::size_t x = 0; x < cols; ++x) lam[x] = sol.map(static_cast<double>(x));
        for (std::size_t x = 1; x < cols; ++x) {
            if (!(lam[x] > lam[x - 1])) {
                throw CalibrationError("fiber " + std::to_string(f) + ": wavelength solution is not monotone");
            }
        }
        for (std::size_t j = 0; j < grid.n_pixels(); ++j) {
            ex.plate.flux(f, j) = interpolate(lam, flux, grid.wavelength[j]);
        }
        ex.solutions.push_back(std::move(sol));
    }
    return ex;
}

ReduceResult reduce_frames(const Frame& bias, const Frame& flat, const Frame& arc, const Frame& science,
                           const std::vector<double>& catalog, const PixelGrid& grid,
                           const std::vector<FiberMeta>& fibers, const TraceConfig& cfg) {
    for (const auto* f : {&bias, &flat, &arc, &science}) f->validate();
    const auto flat_b = subtract_bias(flat, bias);
    ReduceResult res;
    res.traces = trace_fibers(flat_b, fibers.size(), cfg);
    const auto norm = normalize_flat(flat_b, res.traces);
    auto sci = flat_correct(subtract_bias(science, bias), norm, res.traces);
    auto arc_c = flat_correct(subtract_bias(arc, bias), norm, res.traces);
    res.flagged = sci.flagged;
    res.flagged.insert(res.flagged.end(), arc_c.flagged.begin(), arc_c.flagged.end());
    std::sort(res.flagged.begin(), res.flagged.end());
    res.flagged.erase(std::unique(res.flagged.begin(), res.flagged.end()), res.flagged.end());
    res.extraction = extract_and_wavecal(sci.frame, res.traces, arc_c.frame, catalog, grid, fibers);
    return res;
}

}  // namespace smi::ccd
