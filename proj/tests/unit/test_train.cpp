#include "smi/core/error.hpp"
#include "smi/synth/synthplate.hpp"
#include "smi/train/train.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

using namespace smi;
using namespace smi::train;

namespace {

namespace fs = std::filesystem;

PixelGrid small_grid() { return PixelGrid::linear(5300.0, 5900.0, 600, Arm::blue); }

synth::SynthConfig small_synth(std::uint64_t seed = 11) {
    synth::SynthConfig sc;
    sc.seed = seed;
    sc.n_fibers = 120;
    sc.sky_fraction = 0.25;
    return sc;
}

TrainConfig small_train(std::size_t steps = 40) {
    TrainConfig cfg;
    cfg.pretrain_steps = cfg.shared_steps = cfg.unique_steps = steps;
    cfg.deterministic = true;
    return cfg;
}

struct Fixture {
    Plate plate;
    TrainConfig cfg;
    Reduction red;
    TrainContext ctx;
};

Fixture make_fixture(const synth::SynthConfig& sc, const TrainConfig& cfg) {
    Fixture f;
    f.plate = synth::gen_plate(sc, small_grid());
    f.cfg = cfg;
    f.red = reduce(f.plate, cfg);
    f.ctx = make_context(f.red, f.plate, cfg);
    return f;
}

bool same_values(const ModelParams& a, const ModelParams& b) {
    if (a.size() != b.size()) return false;
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first) return false;
        const auto da = ia->second.data(), db = ib->second.data();
        if (!std::equal(da.begin(), da.end(), db.begin(), db.end())) return false;
    }
    return true;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
    return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(from), v.begin() + static_cast<std::ptrdiff_t>(to),
                           0.0) /
           static_cast<double>(to - from);
}

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("smi_test_train_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("PairingPlan: k nearest neighbours, no self pairing, normalized weights") {
    const auto plate = synth::gen_plate(small_synth(), small_grid());
    const auto candidates = plate.usable_fibers();
    const auto plan = PairingPlan::build(plate, candidates, 4);
    CHECK_NOTHROW(plan.validate());
    for (auto i : candidates) {
        REQUIRE(plan.neighbors[i].size() == 4);
        double total = 0.0;
        std::vector<double> d;
        for (std::size_t n = 0; n < 4; ++n) {
            CHECK(plan.neighbors[i][n] != i);
            CHECK(plan.weights[i][n] > 0.0);
            total += plan.weights[i][n];
            d.push_back(angular_distance(plate.fibers[i], plate.fibers[plan.neighbors[i][n]]));
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        // Brute force: no other candidate is strictly closer than the farthest chosen one.
        const double far = *std::max_element(d.begin(), d.end());
        std::size_t closer = 0;
        for (auto j : candidates)
            if (j != i && angular_distance(plate.fibers[i], plate.fibers[j]) < far) ++closer;
        CHECK(closer <= 3);
        for (std::size_t a = 0; a < 4; ++a)
            for (std::size_t b = 0; b < 4; ++b)
                if (d[a] < d[b]) CHECK(plan.weights[i][a] >= plan.weights[i][b]);
    }
    for (const auto& fiber : plate.fibers_with_role(FiberRole::faulty)) CHECK(plan.neighbors[fiber].empty());
}

TEST_CASE("PairingPlan errors") {
    const auto plate = synth::gen_plate(small_synth(), small_grid());
    CHECK_THROWS_AS(PairingPlan::build(plate, {0, 1, 2}, 4), ConfigError);

    PairingPlan bad;
    bad.neighbors = {{0}, {}};
    bad.weights = {{1.0}, {}};
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad.neighbors = {{1, 2}, {}};
    bad.weights = {{0.5, 0.4}, {}};
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad.weights = {{1.0, 0.0}, {}};
    CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("split_fibers holds out every third sky fiber by id") {
    const auto plate = synth::gen_plate(small_synth(), small_grid());
    const auto split = split_fibers(plate, 3);
    auto sky = plate.fibers_with_role(FiberRole::sky);
    std::sort(sky.begin(), sky.end(), [&](auto a, auto b) { return plate.fibers[a].id < plate.fibers[b].id; });
    std::vector<std::size_t> held;
    for (std::size_t n = 2; n < sky.size(); n += 3) held.push_back(sky[n]);
    std::sort(held.begin(), held.end());
    CHECK(split.heldout_sky == held);
    CHECK(split.train_sky.size() + split.heldout_sky.size() == sky.size());
    for (auto i : split.training) {
        CHECK(plate.fibers[i].role != FiberRole::faulty);
        CHECK(!std::binary_search(held.begin(), held.end(), i));
    }
    CHECK(split.training.size() == plate.usable_fibers().size() - held.size());
}

TEST_CASE("TrainConfig validation and json round trip") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.alpha = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.alpha = 0.3;
    cfg.beta = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.beta = 0.0;
    cfg.seed = 99;
    cfg.k_neighbors = 6;
    cfg.encoder.calibration_mode = net::CalibrationMode::feature;
    const auto back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.alpha == 0.3);
    CHECK(back.seed == 99);
    CHECK(back.encoder.calibration_mode == net::CalibrationMode::feature);
    auto j = cfg.to_json();
    j["alpha"] = -2.0;
    CHECK_THROWS_AS(TrainConfig::from_json(j), ConfigError);
}

TEST_CASE("fit_readout is monotone and recovers a monotone map") {
    Matrix rep(4, 200), lab(4, 200);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 200; ++j) {
            const double v = -1.0 + 0.01 * static_cast<double>(j) + 0.001 * static_cast<double>(r);
            rep(r, j) = v;
            lab(r, j) = std::max(0.0, v) * std::max(0.0, v);
        }
    const auto ro = fit_readout(rep, lab, {0, 1, 2, 3}, 100);
    CHECK(std::is_sorted(ro.x.begin(), ro.x.end()));
    CHECK(std::is_sorted(ro.y.begin(), ro.y.end()));
    for (double v : {-0.5, 0.2, 0.5, 0.9}) CHECK(ro(v) == doctest::Approx(std::max(0.0, v) * std::max(0.0, v)).epsilon(0.02).scale(1.0));
    CHECK(ro(-10.0) == ro.y.front());
    CHECK(ro(10.0) == ro.y.back());

    // A decreasing relation pools into one flat level at the mean label.
    Matrix down(1, 50), dl(1, 50);
    for (std::size_t j = 0; j < 50; ++j) {
        down(0, j) = static_cast<double>(j);
        dl(0, j) = 50.0 - static_cast<double>(j);
    }
    const auto flat = fit_readout(down, dl, {0}, 10);
    CHECK(flat.y.size() == 1);
    CHECK(flat(3.0) == doctest::Approx(25.5));
    CHECK_THROWS_AS(fit_readout(down, dl, {}, 10), EmptyInputError);
}

TEST_CASE("compose_sky: exact scaling with efficiency and shape errors") {
    const Spectrum cont{100.0, 101.5, 99.25}, shared{0.0, 12.5, 3.0}, unique{0.5, 0.0, 1.75};
    const auto one = compose_sky(cont, shared, unique, 1.0);
    const auto two = compose_sky(cont, shared, unique, 2.0);
    for (std::size_t j = 0; j < one.size(); ++j) {
        CHECK(one[j] == cont[j] + shared[j] + unique[j]);
        CHECK(two[j] == 2.0 * one[j]);
    }
    CHECK_THROWS_AS(compose_sky(cont, shared, Spectrum{1.0}, 1.0), ShapeError);
    CHECK_THROWS_AS(compose_sky(cont, shared, unique, 0.0), DomainError);
}

TEST_CASE("reduce: labels, scales and references per segment") {
    const auto f = make_fixture(small_synth(), small_train());
    const auto& red = f.red;
    CHECK(red.scales.size() == red.plan.segments.size());
    CHECK(red.references.size() == red.plan.segments.size());
    for (std::size_t s = 0; s < red.scales.size(); ++s) {
        CHECK(red.scales[s] > 0.0);
        for (auto r : red.references[s]) CHECK(r < red.plan.segments[s].length());
    }
    for (double v : red.labels.data()) CHECK(v >= 0.0);
    for (double v : red.local_continuum.data()) CHECK(std::isfinite(v));
    const auto d = segment_data(red, 0);
    CHECK(d.x.cols() == red.plan.segments[0].length());
    CHECK(d.x.rows() == f.plate.n_fibers());
}

TEST_CASE("stage errors: missing models and untrained segments") {
    const auto f = make_fixture(small_synth(), small_train(2));
    const auto seg = segment_data(f.red, 0);
    CHECK_THROWS_AS(train_shared(seg, ModelParams{}, f.ctx), InitializationError);
    CHECK_THROWS_AS(train_unique(seg, SharedModels{}, f.ctx), InitializationError);

    PlateModel empty;
    CHECK_THROWS_AS(train_all(empty, f.red, f.ctx), InitializationError);

    PlateModel model;
    pretrain_all(model, f.red, f.ctx);
    try {
        estimate_sky(model, f.red);
        FAIL("expected UntrainedSegmentError");
    } catch (const UntrainedSegmentError& e) {
        CHECK(e.segment() == 0);
        CHECK(std::string(e.what()).find("segment 0") != std::string::npos);
    }

    auto small_batch = f.ctx;
    small_batch.cfg.batch = 8;
    CHECK_THROWS_AS(pretrain_segment(seg, small_batch), ConfigError);

    const auto dir = scratch_dir("missing_pre");
    CHECK_THROWS_AS(load_pretrained(dir, f.cfg, f.red.plan.segments.size()), InitializationError);
    CHECK_THROWS_AS(load_trained(dir, f.cfg, f.red), MissingArtifactError);
    fs::remove_all(dir);
}

TEST_CASE("identical inputs keep both branches bitwise equal") {
    auto f = make_fixture(small_synth(), small_train(30));
    auto seg = segment_data(f.red, 0);
    for (std::size_t i = 1; i < seg.x.rows(); ++i) {
        std::copy(seg.x.row(0).begin(), seg.x.row(0).end(), seg.x.row(i).begin());
        std::copy(seg.labels.row(0).begin(), seg.labels.row(0).end(), seg.labels.row(i).begin());
    }
    const auto pre = pretrain_segment(seg, f.ctx);
    const auto shared = train_shared(seg, pre.encoder, f.ctx);
    CHECK(same_values(shared.encoder_x, shared.encoder_y));
    CHECK(same_values(shared.critic_x, shared.critic_y));
    const auto sx = represent(shared.encoder_x, seg.x, seg.references, f.cfg.encoder);
    const auto sy = represent(shared.encoder_y, seg.x, seg.references, f.cfg.encoder);
    CHECK(sx == sy);

    const auto unique = train_unique(seg, shared, f.ctx);
    CHECK(same_values(unique.encoder_x, unique.encoder_y));
    const auto ex = represent(unique.encoder_x, seg.x, seg.references, f.cfg.encoder);
    const auto ey = represent(unique.encoder_y, seg.x, seg.references, f.cfg.encoder);
    CHECK(ex == ey);
    const auto ro = fit_readout(ex, seg.labels, f.ctx.readout);
    const auto sky_x = segment_sky(seg, sx, ro, ex, ro, f.ctx.readout);
    const auto sky_y = segment_sky(seg, sy, ro, ey, ro, f.ctx.readout);
    CHECK(sky_x.unique == sky_y.unique);
}

TEST_CASE("stage 2 starts bitwise from the stage 1 models") {
    auto cfg = small_train(20);
    const auto f = make_fixture(small_synth(), cfg);
    const auto seg = segment_data(f.red, 0);
    const auto pre = pretrain_segment(seg, f.ctx);
    const auto shared = train_shared(seg, pre.encoder, f.ctx);
    auto ctx = f.ctx;
    ctx.cfg.unique_steps = 0;
    const auto unique = train_unique(seg, shared, ctx);
    CHECK(same_values(unique.encoder_x, shared.encoder_x));
    CHECK(same_values(unique.encoder_y, shared.encoder_y));
    CHECK(same_values(unique.critic_x, shared.critic_x));
    CHECK(same_values(unique.critic_y, shared.critic_y));
    CHECK(unique.critic_e.size() > 0);

    ctx.cfg.shared_steps = 0;
    const auto untouched = train_shared(seg, pre.encoder, ctx);
    CHECK(same_values(untouched.encoder_x, pre.encoder));
    CHECK(same_values(untouched.encoder_y, pre.encoder));
}

TEST_CASE("fixed seed in deterministic mode reproduces every trace exactly") {
    const auto f = make_fixture(small_synth(), small_train(25));
    PlateModel a, b;
    pretrain_all(a, f.red, f.ctx);
    train_all(a, f.red, f.ctx);
    pretrain_all(b, f.red, f.ctx);
    train_all(b, f.red, f.ctx);
    REQUIRE(a.segments.size() == b.segments.size());
    for (std::size_t s = 0; s < a.segments.size(); ++s) {
        CHECK(a.segments[s].pre.trace == b.segments[s].pre.trace);
        CHECK(a.segments[s].shared.trace == b.segments[s].shared.trace);
        CHECK(a.segments[s].unique.trace == b.segments[s].unique.trace);
        CHECK(a.segments[s].unique.redundancy == b.segments[s].unique.redundancy);
    }
    CHECK(a.shared_sky == b.shared_sky);
    CHECK(a.unique_sky == b.unique_sky);

    // Worker threads change scheduling only, never results.
    auto ctx = f.ctx;
    ctx.cfg.deterministic = false;
    PlateModel c;
    pretrain_all(c, f.red, ctx);
    train_all(c, f.red, ctx);
    CHECK(c.shared_sky == a.shared_sky);
    CHECK(c.unique_sky == a.unique_sky);

    // A saved model reloads to the same estimate.
    const auto dir = scratch_dir("roundtrip");
    save_pretrained(dir, a);
    save_trained(dir, a);
    const auto pre = load_pretrained(dir, f.cfg, f.red.plan.segments.size());
    CHECK(same_values(pre.segments[0].pre.encoder, a.segments[0].pre.encoder));
    const auto back = load_trained(dir, f.cfg, f.red);
    CHECK(estimate_sky(back, f.red) == estimate_sky(a, f.red));
    fs::remove_all(dir);
}

TEST_CASE("a segment never reads pixels outside itself") {
    const auto f = make_fixture(small_synth(), small_train(20));
    REQUIRE(f.red.plan.segments.size() >= 2);
    const std::size_t s = 1;
    const auto& seg = f.red.plan.segments[s];
    Reduction poisoned = f.red;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < poisoned.normalized.n_fibers(); ++i)
        for (std::size_t c = 0; c < poisoned.normalized.n_pixels(); ++c) {
            if (c >= seg.start && c < seg.end) continue;
            poisoned.normalized.flux(i, c) = nan;
            poisoned.continua(i, c) = nan;
            poisoned.labels(i, c) = nan;
        }
    const auto clean = segment_data(f.red, s);
    const auto dirty = segment_data(poisoned, s);
    CHECK(dirty.x == clean.x);
    CHECK(dirty.labels == clean.labels);

    const auto pre_c = pretrain_segment(clean, f.ctx);
    const auto pre_d = pretrain_segment(dirty, f.ctx);
    CHECK(pre_d.trace == pre_c.trace);
    const auto sh_c = train_shared(clean, pre_c.encoder, f.ctx);
    const auto sh_d = train_shared(dirty, pre_d.encoder, f.ctx);
    CHECK(sh_d.trace == sh_c.trace);
    for (double v : sh_d.trace) CHECK(std::isfinite(v));
    const auto un_d = train_unique(dirty, sh_d, f.ctx);
    for (double v : un_d.trace) CHECK(std::isfinite(v));
}

TEST_CASE("final shared objective is not below the initial one on 90% of seeds") {
    auto cfg = small_train(60);
    cfg.pretrain_steps = 30;
    const auto f = make_fixture(small_synth(), cfg);
    const auto seg = segment_data(f.red, 0);
    std::size_t ok = 0;
    const std::size_t seeds = 10;
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
        auto ctx = f.ctx;
        ctx.cfg.seed = seed;
        const auto pre = pretrain_segment(seg, ctx);
        const auto shared = train_shared(seg, pre.encoder, ctx);
        const auto& t = shared.trace;
        const double first = mean_of(t, 0, 10), last = mean_of(t, t.size() - 10, t.size());
        MESSAGE("seed " << seed << ": " << first << " -> " << last);
        if (last >= first) ++ok;
    }
    CHECK(ok * 10 >= seeds * 9);
}

TEST_CASE("a very large alpha forces SX and SY together across distinct fibers") {
    auto cfg = small_train(1000);
    cfg.pretrain_steps = 30;
    cfg.alpha = 1e6;
    const auto f = make_fixture(small_synth(), cfg);
    for (std::size_t s = 0; s < f.red.plan.segments.size(); ++s) {
        const auto seg = segment_data(f.red, s);
        const auto pre = pretrain_segment(seg, f.ctx);
        const auto shared = train_shared(seg, pre.encoder, f.ctx);
        const auto sx = represent(shared.encoder_x, seg.x, seg.references, cfg.encoder);
        const auto sy = represent(shared.encoder_y, seg.x, seg.references, cfg.encoder);
        double l1 = 0.0;
        std::size_t n = 0;
        for (auto a : f.ctx.training)
            for (auto p : f.ctx.pairing.neighbors[a]) {
                for (std::size_t j = 0; j < seg.x.cols(); ++j) l1 += std::abs(sx(a, j) - sy(p, j));
                n += seg.x.cols();
            }
        MESSAGE("segment " << s << ": mean |SX - SY| = " << l1 / static_cast<double>(n));
        CHECK(l1 / static_cast<double>(n) <= 1e-3);
    }
}

TEST_CASE("removing the redundancy penalty raises the redundancy bound") {
    auto cfg = small_train(100);
    cfg.unique_steps = 300;
    const auto f = make_fixture(small_synth(), cfg);
    const auto seg = segment_data(f.red, 0);
    const auto pre = pretrain_segment(seg, f.ctx);
    const auto shared = train_shared(seg, pre.encoder, f.ctx);

    // Final critic on every training fiber paired with its nearest neighbour.
    std::vector<std::size_t> anchors, partners;
    for (auto a : f.ctx.training) {
        anchors.push_back(a);
        partners.push_back(f.ctx.pairing.neighbors[a][0]);
    }
    std::vector<std::size_t> perm(anchors.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::rotate(perm.begin(), perm.begin() + 1, perm.end());
    const auto gather = [&](const Matrix& m, const std::vector<std::size_t>& rows) {
        std::vector<double> v;
        for (auto r : rows) v.insert(v.end(), m.row(r).begin(), m.row(r).end());
        return ad::Tensor::constant({rows.size(), m.cols()}, std::move(v));
    };
    const auto run = [&](double beta) {
        auto ctx = f.ctx;
        ctx.cfg.beta = beta;
        const auto u = train_unique(seg, shared, ctx);
        const auto ex = represent(u.encoder_x, seg.x, seg.references, cfg.encoder);
        const auto ey = represent(u.encoder_y, seg.x, seg.references, cfg.encoder);
        const double bound = net::dv_bound(u.critic_e, gather(ex, anchors), gather(ey, partners), perm).item();
        const std::size_t n = u.redundancy.size();
        return std::pair{bound, mean_of(u.redundancy, n - 30, n)};
    };
    const auto [bound_with, tail_with] = run(0.1);
    const auto [bound_without, tail_without] = run(0.0);
    MESSAGE("redundancy bound: beta=0.1 " << bound_with << " (trace " << tail_with << "), beta=0 " << bound_without
                                          << " (trace " << tail_without << ")");
    CHECK(bound_without > bound_with);
    CHECK(tail_without > tail_with);
}

TEST_CASE("a plate without unique sky gives a unique estimate at the noise floor") {
    auto sc = small_synth(5);
    sc.variable_line_fraction = 0.0;
    const auto f = make_fixture(sc, small_train(TrainConfig{}.shared_steps));
    PlateModel model;
    pretrain_all(model, f.red, f.ctx);
    train_all(model, f.red, f.ctx);
    double total = 0.0;
    std::size_t n = 0;
    for (auto i : f.red.split.heldout_sky) {
        REQUIRE(f.plate.truth->components[i].emission_unique ==
                Spectrum(f.plate.n_pixels(), 0.0));
        for (double v : model.unique_sky.row(i)) total += std::abs(v);
        n += f.plate.n_pixels();
    }
    MESSAGE("mean |S_o| = " << total / static_cast<double>(n));
    CHECK(total / static_cast<double>(n) <= 2.0 * sc.noise_sigma);
}

TEST_CASE("a flat plate without unique sky reproduces the mean sky") {
    auto sc = small_synth(5);
    sc.variable_line_fraction = 0.0;
    sc.gradient_slope = 0.0;
    const auto f = make_fixture(sc, small_train(TrainConfig{}.shared_steps));
    PlateModel model;
    pretrain_all(model, f.red, f.ctx);
    train_all(model, f.red, f.ctx);
    const auto sky = estimate_sky(model, f.red);
    const auto& train_sky = f.red.split.train_sky;
    const std::size_t np = f.plate.n_pixels();
    Spectrum mean_sky(np, 0.0);
    for (auto r : train_sky)
        for (std::size_t j = 0; j < np; ++j) mean_sky[j] += f.red.normalized.flux(r, j);
    for (auto& v : mean_sky) v /= static_cast<double>(train_sky.size());
    double worst = 0.0;
    for (auto i : f.red.split.heldout_sky) {
        double se = 0.0;
        for (std::size_t j = 0; j < np; ++j) {
            const double d = sky(i, j) - mean_sky[j] * f.red.efficiency[i];
            se += d * d;
        }
        worst = std::max(worst, std::sqrt(se / static_cast<double>(np)));
    }
    MESSAGE("worst held-out RMS against the mean sky = " << worst);
    CHECK(worst <= 2.0 * sc.noise_sigma);
}
