#include "smi/core/error.hpp"
#include "smi/core/rng.hpp"
#include "smi/eval/evalkit.hpp"

#include <Eigen/Dense>
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

using namespace smi;
using namespace smi::eval;

namespace {

// Least-squares cubic spline written as independent cubic pieces (local
// coordinate u in [0, 1] per interval) tied together by value, slope and
// curvature continuity, solved through the KKT system.
std::vector<double> spline_oracle(const std::vector<double>& y, const std::vector<double>& breaks) {
    const std::size_t m = breaks.size() - 1;  // pieces
    const auto nc = static_cast<Eigen::Index>(4 * m);
    const auto nk = static_cast<Eigen::Index>(3 * (m - 1));
    auto piece_of = [&](double x) {
        std::size_t k = static_cast<std::size_t>(std::upper_bound(breaks.begin(), breaks.end(), x) - breaks.begin());
        return std::min(k == 0 ? 0 : k - 1, m - 1);
    };
    Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(nc, nc);
    Eigen::VectorXd aty = Eigen::VectorXd::Zero(nc);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double x = static_cast<double>(i);
        const std::size_t k = piece_of(x);
        const double u = (x - breaks[k]) / (breaks[k + 1] - breaks[k]);
        const double row[4] = {1.0, u, u * u, u * u * u};
        for (int a = 0; a < 4; ++a) {
            aty(static_cast<Eigen::Index>(4 * k) + a) += row[a] * y[i];
            for (int b = 0; b < 4; ++b) ata(static_cast<Eigen::Index>(4 * k) + a, static_cast<Eigen::Index>(4 * k) + b) += row[a] * row[b];
        }
    }
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(nk, nc);
    for (std::size_t k = 0; k + 1 < m; ++k) {
        const double h0 = breaks[k + 1] - breaks[k], h1 = breaks[k + 2] - breaks[k + 1];
        const auto r = static_cast<Eigen::Index>(3 * k);
        const auto L = static_cast<Eigen::Index>(4 * k), R = static_cast<Eigen::Index>(4 * (k + 1));
        // value: p_k(1) = p_{k+1}(0)
        for (int a = 0; a < 4; ++a) c(r, L + a) = 1.0;
        c(r, R) = -1.0;
        // slope
        c(r + 1, L + 1) = 1.0 / h0;
        c(r + 1, L + 2) = 2.0 / h0;
        c(r + 1, L + 3) = 3.0 / h0;
        c(r + 1, R + 1) = -1.0 / h1;
        // curvature
        c(r + 2, L + 2) = 2.0 / (h0 * h0);
        c(r + 2, L + 3) = 6.0 / (h0 * h0);
        c(r + 2, R + 2) = -2.0 / (h1 * h1);
    }
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(nc + nk, nc + nk);
    kkt.topLeftCorner(nc, nc) = ata;
    kkt.topRightCorner(nc, nk) = c.transpose();
    kkt.bottomLeftCorner(nk, nc) = c;
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nc + nk);
    rhs.head(nc) = aty;
    const Eigen::VectorXd sol = kkt.fullPivLu().solve(rhs);
    std::vector<double> out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double x = static_cast<double>(i);
        const std::size_t k = piece_of(x);
        const double u = (x - breaks[k]) / (breaks[k + 1] - breaks[k]);
        const auto b = static_cast<Eigen::Index>(4 * k);
        out[i] = sol(b) + u * (sol(b + 1) + u * (sol(b + 2) + u * sol(b + 3)));
    }
    return out;
}

std::vector<double> gauss_noise(std::size_t n, double sigma, std::uint64_t seed, const char* tag = "eval-noise") {
    auto rng = make_stream(seed, tag);
    std::normal_distribution<double> g(0.0, sigma);
    std::vector<double> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

Plate sky_plate(std::size_t n_sky, std::size_t n_pix) {
    Plate p;
    p.grid = PixelGrid::linear(4000.0, 4000.0 + static_cast<double>(n_pix), n_pix, Arm::blue);
    p.flux = Matrix(n_sky, n_pix);
    for (std::size_t i = 0; i < n_sky; ++i) p.fibers.push_back({static_cast<int>(i), 0, 0, FiberRole::sky, 1});
    return p;
}

}  // namespace

TEST_CASE("B-spline basis is a partition of unity") {
    const auto basis = BSplineBasis::uniform(300, 32);
    for (double x = 0.0; x <= 299.0; x += 0.37) {
        double v[4];
        basis.evaluate(x, v);
        CHECK(v[0] + v[1] + v[2] + v[3] == doctest::Approx(1.0).epsilon(1e-14));
        for (double b : v) CHECK(b >= -1e-15);
    }
}

TEST_CASE("bspline_fit matches a constrained piecewise-cubic oracle") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const std::size_t n = 500 + 97 * seed;
        auto y = gauss_noise(n, 5.0, seed);
        for (std::size_t i = 0; i < n; ++i) y[i] += 100.0 + 20.0 * std::sin(static_cast<double>(i) / 40.0);
        const auto fit = bspline_fit(y, 32);
        const auto ref = spline_oracle(y, BSplineBasis::uniform(n, 32).breakpoints());
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(fit[i] - ref[i]) <= 1e-9 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST_CASE("supersky_baseline") {
    SUBCASE("identical smooth sky fibers are reproduced") {
        auto p = sky_plate(5, 400);
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 400; ++j) {
                const double x = static_cast<double>(j) / 400.0;
                p.flux(i, j) = 50.0 + 30.0 * x - 12.0 * x * x + 4.0 * x * x * x;
            }
        const auto base = supersky_baseline(p, {0, 1, 2, 3, 4});
        for (std::size_t j = 0; j < 400; ++j) CHECK(std::abs(base[j] - p.flux(0, j)) <= 1e-6);
    }
    SUBCASE("median rejects one outlier fiber among 9") {
        auto p = sky_plate(9, 300);
        const auto shape = gauss_noise(300, 3.0, 77);
        for (std::size_t i = 0; i < 9; ++i)
            for (std::size_t j = 0; j < 300; ++j) p.flux(i, j) = 80.0 + shape[j];
        std::vector<std::size_t> all(9);
        std::iota(all.begin(), all.end(), 0);
        const auto clean = supersky_baseline(p, all);
        for (std::size_t j = 0; j < 300; ++j) p.flux(8, j) += 1e4;
        const auto dirty = supersky_baseline(p, all);
        for (std::size_t j = 0; j < 300; ++j) CHECK(std::abs(dirty[j] - clean[j]) <= 1e-6);
    }
    SUBCASE("random sky set equals median + spline oracle") {
        auto p = sky_plate(11, 640);
        for (std::size_t i = 0; i < 11; ++i) {
            const auto row = gauss_noise(640, 4.0, 100 + i);
            for (std::size_t j = 0; j < 640; ++j) p.flux(i, j) = 60.0 + row[j];
        }
        std::vector<std::size_t> rows{0, 2, 3, 5, 7, 8, 10};
        std::vector<double> med(640);
        for (std::size_t j = 0; j < 640; ++j) {
            std::vector<double> col;
            for (auto r : rows) col.push_back(p.flux(r, j));
            std::sort(col.begin(), col.end());
            med[j] = col[3];
        }
        const auto ref = spline_oracle(med, BSplineBasis::uniform(640, 32).breakpoints());
        const auto base = supersky_baseline(p, rows);
        for (std::size_t j = 0; j < 640; ++j) CHECK(std::abs(base[j] - ref[j]) <= 1e-9 * std::abs(ref[j]));
    }
    CHECK_THROWS_AS(supersky_baseline(sky_plate(2, 100), {0, 1}), EmptyInputError);
}

TEST_CASE("residual_stats closed forms") {
    const std::vector<double> a{1.0, 2.0, 3.0};
    const auto zero = residual_stats(a, a);
    CHECK(zero.bias == 0.0);
    CHECK(zero.mae == 0.0);
    CHECK(zero.rmse == 0.0);
    const auto s = residual_stats(std::vector<double>{1.0, -1.0, 3.0}, std::vector<double>{0.0, 0.0, 0.0});
    CHECK(s.bias == doctest::Approx(1.0));
    CHECK(s.mae == doctest::Approx(5.0 / 3.0));
    CHECK(s.rmse == doctest::Approx(std::sqrt(11.0 / 3.0)));
    CHECK(s.rmse == doctest::Approx(1.9149).epsilon(1e-4));
    CHECK_THROWS_AS(residual_stats(std::vector<double>{}, std::vector<double>{}), EmptyInputError);
    CHECK_THROWS_AS(residual_stats(a, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("residual_stats ordering invariants on random inputs") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const auto e = gauss_noise(50, 3.0, seed);
        auto o = gauss_noise(50, 1.0, seed + 1000, "obs");
        for (auto& v : o) v += 0.5 * static_cast<double>(seed % 7);
        const auto s = residual_stats(e, o);
        CHECK(s.rmse >= 0.0);
        CHECK(s.rmse + 1e-12 >= std::abs(s.bias));
        CHECK(s.mae + 1e-12 >= std::abs(s.bias));
    }
}

TEST_CASE("render_table_row reproduces the published row shape") {
    CHECK(render_table_row(format_spec(3), {31.73, 40.0, 76.75}, {15.25, 20.0, 36.82}) ==
          "03 | 31.73 | 76.75 | 15.25 | 36.82");
    CHECK(render_table_row(format_spec(4), {-0.61, 50.0, 72.99}, {0.21, 30.0, 44.70}) ==
          "04 | -0.61 | 72.99 | 0.21 | 44.70");
}

TEST_CASE("detect_lines_3sigma") {
    CHECK(detect_lines_3sigma(std::vector<double>(1024, 5.0)).empty());
    auto x = gauss_noise(1024, 1.0, 3);
    for (auto& v : x) v += 50.0;
    x[500] += 10.0;
    const auto peaks = detect_lines_3sigma(x);
    CHECK(std::find(peaks.begin(), peaks.end(), 500u) != peaks.end());
    CHECK_THROWS_AS(detect_lines_3sigma(std::vector<double>(100, 0.0)), DomainError);
}

TEST_CASE("detect_lines_3sigma false positives on pure noise stay near the binomial expectation") {
    // One-sided 3-sigma tail: 4096 * 0.00135 = 5.5 expected. The running median
    // absorbs a little of the noise, so the MAD sigma runs ~4% low and the
    // measured mean is nearer 7.
    std::size_t within = 0;
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const auto n = detect_lines_3sigma(gauss_noise(4096, 1.0, 500 + seed)).size();
        within += n <= 15;
        total += static_cast<double>(n);
    }
    CHECK(detect_lines_3sigma(gauss_noise(4096, 1.0, 500)).size() <= 15);
    CHECK(within >= 198);
    CHECK(total / 200.0 <= 9.0);
}

TEST_CASE("detect_lines_3sigma recall for SNR >= 5 lines over 1000 trials") {
    auto rng = make_stream(2024, "recall");
    std::uniform_real_distribution<double> pos(40.0, 470.0), snr(5.0, 12.0);
    std::size_t found = 0;
    for (int t = 0; t < 1000; ++t) {
        auto x = gauss_noise(512, 1.0, 10'000 + static_cast<std::uint64_t>(t));
        const double c = pos(rng), amp = snr(rng);
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double d = (static_cast<double>(j) - c) / 1.5;
            x[j] += 20.0 + amp * std::exp(-0.5 * d * d);
        }
        const auto peaks = detect_lines_3sigma(x);
        found += std::any_of(peaks.begin(), peaks.end(), [&](std::size_t p) { return std::abs(double(p) - c) <= 2.0; });
    }
    CHECK(static_cast<double>(found) / 1000.0 >= 0.95);
}

TEST_CASE("line_window_residuals") {
    const std::vector<std::size_t> centers{6506, 7032, 7245, 7438, 8377};
    std::vector<double> a(9000, 1.0);
    const auto same = line_window_residuals(a, a, centers);
    REQUIRE(same.size() == 5);
    for (const auto& r : same) {
        CHECK(r.valid);
        CHECK(r.stats.rmse == 0.0);
        CHECK(r.stats.bias == 0.0);
    }

    std::vector<double> obs(9000, 0.0), est(9000, 0.0);
    for (std::size_t j = 0; j < 9000; ++j) {
        const double d = (static_cast<double>(j) - 7032.0) / 1.5;
        obs[j] = 100.0 * std::exp(-0.5 * d * d);
    }
    for (std::size_t j = 1; j < 9000; ++j) est[j] = obs[j - 1];
    double q = 0.0, s = 0.0;
    for (std::size_t j = 7032 - 7; j <= 7032 + 7; ++j) {
        q += (est[j] - obs[j]) * (est[j] - obs[j]);
        s += est[j] - obs[j];
    }
    const auto r = line_window_residuals(est, obs, {7032})[0];
    CHECK(r.stats.rmse == doctest::Approx(std::sqrt(q / 15.0)).epsilon(1e-14));
    CHECK(r.stats.bias == doctest::Approx(s / 15.0).epsilon(1e-12));

    const auto edge = line_window_residuals(est, obs, {3, 8995});
    CHECK_FALSE(edge[0].valid);
    CHECK_FALSE(edge[1].valid);
}

TEST_CASE("histogram binning") {
    const auto x = gauss_noise(5000, 2.0, 8);
    const auto h = residual_histogram(x);
    CHECK(h.counts.size() == 81);
    CHECK(std::accumulate(h.counts.begin(), h.counts.end(), std::size_t{0}) == 5000);
    double q = 0.0;
    for (double v : x) q += v * v;
    CHECK(h.hi == doctest::Approx(5.0 * std::sqrt(q / 5000.0)));
    CHECK(h.lo == -h.hi);
    // Centre bins dominate for Gaussian residuals.
    CHECK(h.counts[40] > h.counts[0]);
}

TEST_CASE("shared_inspection extracts aligned segment data; empty segment is flat") {
    std::vector<double> x(300), y(300), shared(300, 0.0);
    for (std::size_t j = 0; j < 300; ++j) {
        x[j] = static_cast<double>(j);
        y[j] = 2.0 * static_cast<double>(j);
    }
    const preprocess::Segment seg{100, 164, 0};
    const auto o = shared_inspection(shared, x, y, seg);
    CHECK(o.observed_x.size() == 64);
    CHECK(o.observed_x.front() == 100.0);
    CHECK(o.observed_y.back() == 326.0);
    CHECK(std::all_of(o.shared.begin(), o.shared.end(), [](double v) { return v == 0.0; }));
    CHECK(shared_inspection(std::vector<double>(64, 1.0), x, y, seg).shared.size() == 64);
}

TEST_CASE("report writing") {
    EvalReport r;
    r.plan_id = "synth-7";
    r.rows = {{"01", "baseline", {1.0, 2.0, 3.0}}, {"01", "smi", {0.5, 1.0, 1.5}}};
    r.histograms = {{"baseline_01", residual_histogram(gauss_noise(100, 1.0, 1))},
                    {"smi_01", residual_histogram(gauss_noise(100, 0.5, 2))}};
    r.overlays = {{"seg0", shared_inspection(std::vector<double>(64, 0.0), std::vector<double>(64, 1.0),
                                             std::vector<double>(64, 2.0), {0, 64, 0})}};
    const auto dir = std::filesystem::temp_directory_path() / "smi_eval_report";
    std::filesystem::remove_all(dir);
    write_report(dir, r);
    std::ifstream in(dir / "report.csv");
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "planid,spec,method,bias,mae,rmse");
    CHECK(row == "synth-7,01,baseline,1,2,3");
    CHECK(std::filesystem::exists(dir / "hist_01.svg"));
    CHECK(std::filesystem::exists(dir / "overlay_seg0.svg"));
    std::filesystem::remove_all(dir);

    EvalReport bad;
    bad.rows = {{"01", "x", {5.0, 6.0, 1.0}}};
    CHECK_THROWS_AS(bad.validate(), ContractError);
}
