#include "smi/core/bundle.hpp"
#include "smi/core/error.hpp"
#include "smi/core/rng.hpp"
#include "smi/core/robust.hpp"
#include "smi/core/spectral_model.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

using namespace smi;

namespace {

SkyDecomposition random_decomposition(std::size_t n, std::uint64_t seed) {
    auto rng = make_stream(seed, "test-decomp");
    std::uniform_real_distribution<double> u(-50.0, 200.0);
    SkyDecomposition d;
    for (auto* s : {&d.object, &d.continuum_common, &d.emission_shared, &d.emission_unique}) {
        s->resize(n);
        for (auto& v : *s) v = u(rng);
    }
    d.efficiency = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    return d;
}

SkyDecomposition constant_decomposition(std::size_t n, double o, double l, double sm, double so, double h) {
    return {Spectrum(n, o), Spectrum(n, l), Spectrum(n, sm), Spectrum(n, so), h};
}

}  // namespace

TEST_CASE("compose_observed: zero components give a zero spectrum") {
    const auto out = compose_observed(constant_decomposition(128, 0, 0, 0, 0, 1.0));
    CHECK(std::all_of(out.begin(), out.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("compose_observed: efficiency scales the sky") {
    const auto out = compose_observed(constant_decomposition(128, 0.0, 0.25, 0.5, 0.25, 2.0));
    CHECK(std::all_of(out.begin(), out.end(), [](double v) { return v == doctest::Approx(2.0).epsilon(1e-15); }));
}

TEST_CASE("compose_observed matches a straight-line elementwise oracle") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto d = random_decomposition(257, seed);
        const auto out = compose_observed(d);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double sum = d.object[i] + d.continuum_common[i] + d.emission_shared[i] + d.emission_unique[i];
            CHECK(std::abs(out[i] - d.efficiency * sum) <= 1e-12 * std::max(1.0, std::abs(out[i])));
        }
    }
}

TEST_CASE("compose_observed rejects malformed decompositions") {
    auto d = constant_decomposition(64, 1, 1, 1, 1, 1.0);
    d.emission_unique.pop_back();
    CHECK_THROWS_AS(compose_observed(d), ShapeError);
    auto e = constant_decomposition(64, 1, 1, 1, 1, 0.0);
    CHECK_THROWS_AS(compose_observed(e), DomainError);
    e.efficiency = -1.0;
    CHECK_THROWS_AS(compose_observed(e), DomainError);
}

TEST_CASE("split_sky") {
    SUBCASE("continuum only") {
        const auto [common, unique] = split_sky(constant_decomposition(64, 0, 1, 0, 0, 1));
        CHECK(std::all_of(common.begin(), common.end(), [](double v) { return v == 1.0; }));
        CHECK(std::all_of(unique.begin(), unique.end(), [](double v) { return v == 0.0; }));
    }
    SUBCASE("emission identity") {
        auto d = random_decomposition(64, 3);
        std::fill(d.continuum_common.begin(), d.continuum_common.end(), 0.0);
        const auto [common, unique] = split_sky(d);
        CHECK(common == d.emission_shared);
        CHECK(unique == d.emission_unique);
    }
    SUBCASE("total sky is conserved") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto d = random_decomposition(300, seed + 100);
            const auto [common, unique] = split_sky(d);
            for (std::size_t i = 0; i < common.size(); ++i) {
                const double total = d.continuum_common[i] + d.emission_shared[i] + d.emission_unique[i];
                CHECK(std::abs(common[i] + unique[i] - total) <= 1e-12 * std::max(1.0, std::abs(total)));
            }
        }
    }
}

TEST_CASE("PixelGrid validation") {
    CHECK_NOTHROW(PixelGrid::linear(4000, 5000, 64, Arm::blue).validate());
    CHECK_THROWS_AS(PixelGrid::linear(4000, 5000, 63, Arm::blue).validate(), DomainError);
    auto g = PixelGrid::linear(4000, 5000, 100, Arm::blue);
    g.wavelength[50] = g.wavelength[49];
    CHECK_THROWS_AS(g.validate(), DomainError);
    const auto grid = default_grid(Arm::blue);
    CHECK(grid.covers(5577.34));
    CHECK(grid.wavelength[grid.nearest_pixel(5000.0)] == doctest::Approx(5000.0).epsilon(1e-3));
}

TEST_CASE("running_median equals a brute-force clamped window median") {
    auto rng = make_stream(11, "rm");
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> x(400);
    for (auto& v : x) v = g(rng);
    const auto fast = running_median(x, 51);
    const auto n = static_cast<long>(x.size());
    for (long j = 0; j < n; ++j) {
        std::vector<double> w;
        for (long k = j - 25; k <= j + 25; ++k) w.push_back(x[static_cast<std::size_t>(std::clamp(k, 0L, n - 1))]);
        std::sort(w.begin(), w.end());
        CHECK(fast[static_cast<std::size_t>(j)] == w[25]);
    }
    CHECK_THROWS_AS(running_median(x, 50), ConfigError);
}

TEST_CASE("detect_excess finds a spike and nothing on a flat spectrum") {
    std::vector<double> flat(512, 7.0);
    CHECK(detect_excess(flat).regions.empty());
    auto rng = make_stream(5, "spike");
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> x(512);
    for (auto& v : x) v = 100.0 + g(rng);
    x[200] += 20.0;
    const auto det = detect_excess(x);
    const auto peaks = det.peaks();
    CHECK(std::find(peaks.begin(), peaks.end(), 200u) != peaks.end());
}

TEST_CASE("plate bundle round trip is exact") {
    Plate plate;
    plate.grid = PixelGrid::linear(4000.0, 4100.0, 64, Arm::red);
    plate.seed = 99;
    plate.plan_id = "unit";
    plate.fibers = {{1, 10.0, 20.0, FiberRole::sky, 3}, {2, 10.5, 20.1, FiberRole::faulty, 4}};
    plate.flux = Matrix(2, 64);
    PlateTruth truth;
    truth.noise = Matrix(2, 64);
    for (std::size_t i = 0; i < 2; ++i) {
        auto d = random_decomposition(64, i);
        for (std::size_t j = 0; j < 64; ++j) truth.noise(i, j) = 0.1 * static_cast<double>(j);
        const auto o = compose_observed(d);
        for (std::size_t j = 0; j < 64; ++j) plate.flux(i, j) = o[j] + truth.noise(i, j);
        truth.components.push_back(std::move(d));
    }
    plate.truth = std::move(truth);

    const auto dir = std::filesystem::temp_directory_path() / "smi_test_bundle";
    std::filesystem::remove_all(dir);
    io::write_plate(dir, plate);
    const auto back = io::read_plate(dir);
    CHECK(back.flux == plate.flux);
    CHECK(back.grid.wavelength == plate.grid.wavelength);
    CHECK(back.grid.arm == Arm::red);
    CHECK(back.fibers[1].role == FiberRole::faulty);
    CHECK(back.fibers[0].spectrograph == 3);
    REQUIRE(back.truth);
    CHECK(back.truth->components[1].emission_unique == plate.truth->components[1].emission_unique);
    CHECK(back.truth->components[0].efficiency == plate.truth->components[0].efficiency);
    CHECK(std::filesystem::file_size(dir / "flux.f64") == 2 * 64 * 8);
    CHECK_THROWS_AS(io::read_plate(dir / "nope"), MissingArtifactError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("f64 files are little-endian") {
    const auto path = std::filesystem::temp_directory_path() / "smi_le.f64";
    io::write_f64(path, std::vector<double>{1.0});
    std::ifstream in(path, std::ios::binary);
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    // 1.0 = 0x3FF0000000000000
    CHECK(b[7] == 0x3F);
    CHECK(b[6] == 0xF0);
    CHECK(b[0] == 0x00);
    std::filesystem::remove(path);
}
