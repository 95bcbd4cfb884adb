#include "smi/ad/ops.hpp"
#include "smi/ad/params.hpp"
#include "smi/core/error.hpp"
#include "smi/core/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace smi;
using namespace smi::ad;

namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed, double s = 1.0) {
    auto rng = make_stream(seed, "ad-test");
    std::normal_distribution<double> g(0.0, s);
    std::vector<double> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

// Direct transcription of y[b,o,t] = bias[o] + sum_c sum_k w[o,c,k] x[b,c,t+k-K/2].
std::vector<double> conv_oracle(const std::vector<double>& x, const std::vector<double>& w,
                                const std::vector<double>& bias, std::size_t B, std::size_t Ci, std::size_t Co,
                                std::size_t L, std::size_t K) {
    std::vector<double> y(B * Co * L);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < Co; ++o)
            for (std::size_t t = 0; t < L; ++t) {
                double acc = bias[o];
                for (std::size_t c = 0; c < Ci; ++c)
                    for (std::size_t k = 0; k < K; ++k) {
                        const long src = static_cast<long>(t + k) - static_cast<long>(K / 2);
                        if (src < 0 || src >= static_cast<long>(L)) continue;
                        acc += w[(o * Ci + c) * K + k] * x[(b * Ci + c) * L + static_cast<std::size_t>(src)];
                    }
                y[(b * Co + o) * L + t] = acc;
            }
    return y;
}

}  // namespace

TEST_CASE("conv1d: identity and zero kernels") {
    const auto xv = randn(40, 1);
    const auto x = Tensor::constant({1, 1, 40}, xv);
    const auto id = conv1d(x, Tensor::constant({1, 1, 3}, {0, 1, 0}));
    for (std::size_t i = 0; i < 40; ++i) CHECK(id.data()[i] == xv[i]);
    const auto z = conv1d(x, Tensor::constant({1, 1, 5}, std::vector<double>(5, 0.0)));
    for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("conv1d matches a nested-loop oracle") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const std::size_t B = 3, Ci = 4, Co = 5, L = 37, K = 2 * (seed % 4) + 3;
        const auto xv = randn(B * Ci * L, seed);
        const auto wv = randn(Co * Ci * K, seed + 100);
        const auto bv = randn(Co, seed + 200);
        const auto y = conv1d(Tensor::constant({B, Ci, L}, xv), Tensor::constant({Co, Ci, K}, wv),
                              Tensor::constant({Co}, bv));
        const auto ref = conv_oracle(xv, wv, bv, B, Ci, Co, L, K);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.data()[i] - ref[i]) <= 1e-12);
    }
}

TEST_CASE("conv1d rejects even or oversized kernels") {
    const auto x = Tensor::zeros({1, 1, 10});
    CHECK_THROWS_AS(conv1d(x, Tensor::zeros({1, 1, 4})), ConfigError);
    CHECK_THROWS_AS(conv1d(x, Tensor::zeros({1, 1, 11})), ConfigError);
}

TEST_CASE("kl_div closed forms and validation") {
    const auto p = Tensor::constant({2}, {0.5, 0.5});
    const auto q = Tensor::constant({2}, {0.25, 0.75});
    CHECK(kl_div(p, q).item() == doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)).epsilon(1e-14));
    CHECK(kl_div(p, q).item() == doctest::Approx(0.14384).epsilon(1e-4));
    CHECK(kl_div(q, q).item() == 0.0);
    const auto with_zero = Tensor::constant({3}, {0.0, 0.5, 0.5});
    CHECK(std::isfinite(kl_div(with_zero, Tensor::constant({3}, {0.2, 0.4, 0.4})).item()));
    CHECK_THROWS_AS(kl_div(Tensor::constant({2}, {0.6, 0.6}), q), DomainError);
    CHECK_THROWS_AS(kl_div(Tensor::constant({2}, {-0.5, 1.5}), q), DomainError);
}

TEST_CASE("log_mean_exp is stable and exact on constants") {
    CHECK(log_mean_exp(Tensor::constant({4}, std::vector<double>(4, 3.5))).item() == doctest::Approx(3.5).epsilon(1e-15));
    const auto big = log_mean_exp(Tensor::constant({3}, {1e6, 1e6, -1e6})).item();
    CHECK(std::isfinite(big));
    CHECK(big == doctest::Approx(1e6 + std::log(2.0 / 3.0)));
    const auto neg = log_mean_exp(Tensor::constant({2}, {-1e6, -1e6})).item();
    CHECK(neg == doctest::Approx(-1e6));
}

TEST_CASE("backward: trivial gradients") {
    auto x = Tensor::parameter({5}, {1, 2, 3, 4, 5});
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
    auto y = Tensor::parameter({1}, {3.0});
    backward(mul(y, y));
    CHECK(y.grad()[0] == 6.0);
    CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("grad_check of a linear function is exact") {
    ModelParams p(3);
    p.add_glorot("w", {6}, 6, 1);
    const auto c = Tensor::constant({6}, randn(6, 9));
    const auto r = grad_check([&] { return sum(mul(p.at("w"), c)); }, p);
    CHECK(r.checked == 6);
    CHECK(r.max_rel_error <= 1e-10);
}

TEST_CASE("every exported op passes grad_check") {
    ModelParams p(11);
    p.add("a", Tensor::parameter({3, 4}, randn(12, 1)));
    p.add("b", Tensor::parameter({3, 4}, randn(12, 2)));
    p.add("w", Tensor::parameter({4, 2}, randn(8, 3)));
    p.add("bias", Tensor::parameter({2}, randn(2, 4)));
    p.add("pos", Tensor::parameter({3, 4}, {0.3, 1.2, 2.0, 0.7, 0.9, 1.5, 0.4, 0.8, 1.1, 2.2, 0.6, 1.3}));
    p.add("k", Tensor::parameter({2, 1, 3}, randn(6, 5)));
    p.add("kb", Tensor::parameter({2}, randn(2, 6)));
    const std::vector<std::size_t> perm{2, 0, 1};
    const std::vector<std::size_t> src{1, 0, 3, 2, 3, 3, 0, 1, 2, 0, 1, 2};

    const std::vector<std::pair<const char*, std::function<Tensor()>>> cases{
        {"add", [&] { return sum(square(add(p.at("a"), p.at("b")))); }},
        {"sub", [&] { return sum(square(sub(p.at("a"), p.at("b")))); }},
        {"mul", [&] { return sum(mul(p.at("a"), p.at("b"))); }},
        {"scale", [&] { return sum(square(scale(p.at("a"), -2.5))); }},
        {"add_scalar", [&] { return sum(square(add_scalar(p.at("a"), 0.75))); }},
        {"softplus", [&] { return sum(softplus(p.at("a"))); }},
        {"exp", [&] { return sum(exp(p.at("a"))); }},
        {"log", [&] { return sum(log(p.at("pos"))); }},
        {"mean", [&] { return mean(square(p.at("a"))); }},
        {"log_mean_exp", [&] { return log_mean_exp(p.at("a")); }},
        {"l1", [&] { return l1_distance(p.at("a"), p.at("b")); }},
        {"kl", [&] { return kl_div(softmax_rows(p.at("a")), softmax_rows(p.at("b"))); }},
        {"softmax", [&] { return sum(mul(softmax_rows(p.at("a")), p.at("b"))); }},
        {"reshape", [&] { return sum(mul(reshape(p.at("a"), {4, 3}), reshape(p.at("b"), {4, 3}))); }},
        {"matmul", [&] { return sum(square(matmul(p.at("a"), p.at("w")))); }},
        {"dense", [&] { return sum(square(dense(p.at("a"), p.at("w"), p.at("bias")))); }},
        {"concat", [&] { return sum(square(concat_cols(p.at("a"), p.at("b")))); }},
        {"gather_rows", [&] { return sum(mul(gather_rows(p.at("a"), perm), p.at("b"))); }},
        {"gather_positions",
         [&] { return sum(mul(reshape(gather_positions(reshape(p.at("a"), {3, 1, 4}), src), {3, 4}), p.at("b"))); }},
        {"gather_columns", [&] { return sum(square(gather_columns(p.at("a"), {1, 0, 0, 3, 2, 3}))); }},
        {"conv1d", [&] { return sum(square(conv1d(reshape(p.at("a"), {3, 1, 4}), p.at("k"), p.at("kb")))); }},
        {"relu", [&] { return sum(mul(relu(p.at("a")), p.at("b"))); }},
    };
    for (const auto& [name, f] : cases) {
        INFO(name);
        const auto r = grad_check(f, p);
        CHECK(r.checked > 0);
        CHECK(r.max_rel_error <= 1e-4);
    }
}

TEST_CASE("grad_check reports coordinates that sit on a relu kink") {
    ModelParams p;
    p.add("x", Tensor::parameter({3}, {0.0, 1.0, -1.0}));
    const auto r = grad_check([&] { return sum(relu(p.at("x"))); }, p);
    REQUIRE(r.excluded.size() == 1);
    CHECK(r.excluded[0].first == "x");
    CHECK(r.excluded[0].second == 0);
    CHECK(r.checked == 2);
}

TEST_CASE("conv + relu + dense net passes grad_check away from kinks") {
    ModelParams p(21);
    const std::size_t B = 4, L = 24, C = 8;
    p.add_glorot("k1", {C, 1, 5}, 5, C * 5);
    p.add_zeros("b1", {C});
    p.add_glorot("w", {C * L, 1}, C * L, 1);
    p.add_zeros("b", {1});
    const auto x = Tensor::constant({B, 1, L}, randn(B * L, 4));
    auto f = [&] {
        auto h = relu(conv1d(x, p.at("k1"), p.at("b1")));
        return mean(softplus(dense(reshape(h, {B, C * L}), p.at("w"), p.at("b"))));
    };
    const auto r = grad_check(f, p);
    CHECK(r.checked > 200);
    CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("Adam") {
    ModelParams p(5);
    p.add_glorot("w", {10}, 10, 1);
    const std::vector<double> before(p.at("w").data().begin(), p.at("w").data().end());
    Adam frozen(AdamConfig{.lr = 0.0});
    backward(sum(square(p.at("w"))));
    frozen.step(p);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(p.at("w").data()[i] == before[i]);

    // Minimizing a quadratic moves toward zero.
    Adam opt(AdamConfig{.lr = 0.05});
    for (int it = 0; it < 300; ++it) {
        p.zero_grad();
        backward(sum(square(p.at("w"))));
        opt.step(p);
    }
    for (double v : p.at("w").data()) CHECK(std::abs(v) < 0.05);
}

TEST_CASE("first Adam step moves each coordinate by lr against the gradient sign") {
    ModelParams p;
    p.add("w", Tensor::parameter({3}, {1.0, -2.0, 0.5}));
    backward(sum(mul(p.at("w"), Tensor::constant({3}, {4.0, -1.0, 0.0}))));
    Adam opt(AdamConfig{.lr = 0.1});
    opt.step(p);
    CHECK(p.at("w").data()[0] == doctest::Approx(0.9).epsilon(1e-9));
    CHECK(p.at("w").data()[1] == doctest::Approx(-1.9).epsilon(1e-9));
    CHECK(p.at("w").data()[2] == 0.5);
}

TEST_CASE("initialization is deterministic and bounded") {
    ModelParams a(17), b(17), c(18);
    a.add_glorot("w", {20, 30}, 20, 30);
    b.add_glorot("w", {20, 30}, 20, 30);
    c.add_glorot("w", {20, 30}, 20, 30);
    const double limit = std::sqrt(6.0 / 50.0);
    for (std::size_t i = 0; i < 600; ++i) {
        CHECK(a.at("w").data()[i] == b.at("w").data()[i]);
        CHECK(std::abs(a.at("w").data()[i]) <= limit);
    }
    CHECK(a.at("w").data()[0] != c.at("w").data()[0]);
    CHECK_THROWS_AS(a.add_zeros("w", {1}), ConfigError);
}

TEST_CASE("checkpoint round trip is bit exact") {
    ModelParams p(2);
    p.add_glorot("enc.k1", {8, 1, 5}, 5, 40);
    p.add_zeros("enc.b1", {8});
    p.add_glorot("head", {3, 7}, 3, 7);
    const auto path = std::filesystem::temp_directory_path() / "smi_ckpt_test.bin";
    save_checkpoint(path, p);
    const auto q = load_checkpoint(path);
    REQUIRE(q.size() == 3);
    auto it = q.begin();
    for (const auto& [name, t] : p) {
        CHECK(it->first == name);
        CHECK(it->second.shape() == t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(it->second.data()[i] == t.data()[i]);
        ++it;
    }
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_checkpoint(path), MissingArtifactError);
}
