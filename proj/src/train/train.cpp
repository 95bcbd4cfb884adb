#include "smi/train/train.hpp"

#include "smi/core/bundle.hpp"
#include "smi/core/error.hpp"
#include "smi/core/rng.hpp"
#include "smi/core/robust.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

namespace smi::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
    return splitmix64(splitmix64(seed ^ hash_tag(tag)) + splitmix64(index));
}

ad::Tensor rows_tensor(const Matrix& m, const std::vector<std::size_t>& rows) {
    std::vector<double> v;
    v.reserve(rows.size() * m.cols());
    for (auto r : rows) {
        const auto row = m.row(r);
        v.insert(v.end(), row.begin(), row.end());
    }
    return ad::Tensor::constant({rows.size(), m.cols()}, std::move(v));
}

std::vector<std::size_t> sample_uniform(const std::vector<std::size_t>& pool, std::size_t n, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::vector<std::size_t> out(n);
    for (auto& v : out) v = pool[pick(rng)];
    return out;
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    std::shuffle(p.begin(), p.end(), rng);
    return p;
}

std::size_t odd_window(std::size_t len, std::size_t wanted) {
    std::size_t w = std::min(wanted, len);
    if (w % 2 == 0) --w;
    return std::max<std::size_t>(w, 1);
}

std::string segment_dir_name(std::size_t s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "seg%02zu", s);
    return buf;
}

net::PeakLists batch_refs(const SegmentData& seg, std::size_t n) { return net::PeakLists(n, seg.references); }

void require_batch(const TrainContext& ctx) {
    if (ctx.cfg.batch < net::kMinDvBatch) {
        throw ConfigError("batch must be at least " + std::to_string(net::kMinDvBatch));
    }
    if (ctx.training.empty()) throw EmptyInputError("no training fibers");
}

struct PairBatch {
    std::vector<std::size_t> anchors;
    std::vector<std::size_t> partners;
};

PairBatch sample_pairs(const TrainContext& ctx, Rng& rng) {
    PairBatch b;
    b.anchors = sample_uniform(ctx.training, ctx.cfg.batch, rng);
    for (auto a : b.anchors) {
        const auto& nb = ctx.pairing.neighbors.at(a);
        if (nb.empty()) throw ContractError("fiber " + std::to_string(a) + " has no pairing partner");
        const auto& w = ctx.pairing.weights[a];
        std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
        b.partners.push_back(nb[pick(rng)]);
    }
    return b;
}

json encoder_json(const net::EncoderConfig& e) {
    return {{"channels", e.channels},
            {"kernel", e.kernel},
            {"blocks", e.blocks},
            {"calibrate", e.calibrate},
            {"calibration_mode", e.calibration_mode == net::CalibrationMode::input ? "input" : "feature"},
            {"window", e.calibration.window},
            {"max_shift", e.calibration.max_shift},
            {"nsigma", e.calibration.nsigma},
            {"median_window", e.calibration.median_window}};
}

net::EncoderConfig encoder_from_json(const json& j) {
    net::EncoderConfig e;
    e.channels = j.value("channels", e.channels);
    e.kernel = j.value("kernel", e.kernel);
    e.blocks = j.value("blocks", e.blocks);
    e.calibrate = j.value("calibrate", e.calibrate);
    const std::string mode = j.value("calibration_mode", std::string("input"));
    if (mode != "input" && mode != "feature") throw ConfigError("unknown calibration_mode: " + mode);
    e.calibration_mode = mode == "input" ? net::CalibrationMode::input : net::CalibrationMode::feature;
    e.calibration.window = j.value("window", e.calibration.window);
    e.calibration.max_shift = j.value("max_shift", e.calibration.max_shift);
    e.calibration.nsigma = j.value("nsigma", e.calibration.nsigma);
    e.calibration.median_window = j.value("median_window", e.calibration.median_window);
    return e;
}

json readout_json(const Readout& r) { return {{"x", r.x}, {"y", r.y}}; }
Readout readout_from_json(const json& j) {
    Readout r{j.at("x").get<std::vector<double>>(), j.at("y").get<std::vector<double>>()};
    if (r.x.size() != r.y.size() || !std::is_sorted(r.x.begin(), r.x.end())) throw FormatError("malformed readout");
    return r;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("alpha and beta must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (batch < net::kMinDvBatch) throw ConfigError("batch must be at least " + std::to_string(net::kMinDvBatch));
    if (k_neighbors < 1) throw ConfigError("k_neighbors must be >= 1");
    if (continuum_neighbors < 1) throw ConfigError("continuum_neighbors must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (holdout_every < 2) throw ConfigError("holdout_every must be >= 2");
    if (encoder.kernel % 2 == 0 || encoder.channels == 0 || encoder.blocks == 0) {
        throw ConfigError("encoder needs an odd kernel, channels >= 1 and blocks >= 1");
    }
    if (statnet.width == 0) throw ConfigError("statnet width must be >= 1");
}

json TrainConfig::to_json() const {
    return {{"alpha", alpha},
            {"beta", beta},
            {"lr", lr},
            {"pretrain_steps", pretrain_steps},
            {"shared_steps", shared_steps},
            {"unique_steps", unique_steps},
            {"batch", batch},
            {"seed", seed},
            {"k_neighbors", k_neighbors},
            {"continuum_neighbors", continuum_neighbors},
            {"temperature", temperature},
            {"holdout_every", holdout_every},
            {"deterministic", deterministic},
            {"encoder", encoder_json(encoder)},
            {"statnet_width", statnet.width}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    try {
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        c.lr = j.value("lr", c.lr);
        c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
        c.shared_steps = j.value("shared_steps", c.shared_steps);
        c.unique_steps = j.value("unique_steps", c.unique_steps);
        c.batch = j.value("batch", c.batch);
        c.seed = j.value("seed", c.seed);
        c.k_neighbors = j.value("k_neighbors", c.k_neighbors);
        c.continuum_neighbors = j.value("continuum_neighbors", c.continuum_neighbors);
        c.temperature = j.value("temperature", c.temperature);
        c.holdout_every = j.value("holdout_every", c.holdout_every);
        c.deterministic = j.value("deterministic", c.deterministic);
        if (j.contains("encoder")) c.encoder = encoder_from_json(j.at("encoder"));
        c.statnet.width = j.value("statnet_width", c.statnet.width);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad training config: ") + e.what());
    }
    c.validate();
    return c;
}

PairingPlan PairingPlan::build(const Plate& plate, const std::vector<std::size_t>& candidates, std::size_t k) {
    if (candidates.size() < k + 1) {
        throw ConfigError("pairing needs at least k + 1 = " + std::to_string(k + 1) + " candidate fibers");
    }
    PairingPlan plan;
    plan.neighbors.resize(plate.n_fibers());
    plan.weights.resize(plate.n_fibers());
    for (auto i : candidates) {
        std::vector<std::pair<double, std::size_t>> d;
        for (auto j : candidates) {
            if (j != i) d.emplace_back(angular_distance(plate.fibers[i], plate.fibers[j]), j);
        }
        std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
        double total = 0.0;
        for (std::size_t n = 0; n < k; ++n) {
            // Coincident fibers get the weight of a 1e-6 degree separation.
            const double w = 1.0 / std::max(d[n].first, 1e-6);
            plan.neighbors[i].push_back(d[n].second);
            plan.weights[i].push_back(w);
            total += w;
        }
        for (auto& w : plan.weights[i]) w /= total;
    }
    return plan;
}

void PairingPlan::validate() const {
    if (neighbors.size() != weights.size()) throw ContractError("pairing plan: neighbour and weight tables differ");
    for (std::size_t i = 0; i < neighbors.size(); ++i) {
        if (neighbors[i].size() != weights[i].size()) throw ContractError("pairing plan: ragged row");
        if (neighbors[i].empty()) continue;
        double total = 0.0;
        for (std::size_t n = 0; n < neighbors[i].size(); ++n) {
            if (neighbors[i][n] == i) throw ContractError("pairing plan: fiber paired with itself");
            if (!(weights[i][n] > 0.0)) throw ContractError("pairing plan: non-positive weight");
            total += weights[i][n];
        }
        if (std::abs(total - 1.0) > 1e-12) throw ContractError("pairing plan: weights not normalized");
    }
}

FiberSplit split_fibers(const Plate& plate, std::size_t holdout_every) {
    std::vector<std::size_t> sky = plate.fibers_with_role(FiberRole::sky);
    std::stable_sort(sky.begin(), sky.end(),
                     [&](std::size_t a, std::size_t b) { return plate.fibers[a].id < plate.fibers[b].id; });
    FiberSplit split;
    std::vector<std::uint8_t> held(plate.n_fibers(), 0);
    for (std::size_t n = 0; n < sky.size(); ++n) {
        if (n % holdout_every == holdout_every - 1) {
            split.heldout_sky.push_back(sky[n]);
            held[sky[n]] = 1;
        } else {
            split.train_sky.push_back(sky[n]);
        }
    }
    std::sort(split.train_sky.begin(), split.train_sky.end());
    std::sort(split.heldout_sky.begin(), split.heldout_sky.end());
    for (auto i : plate.usable_fibers()) {
        if (!held[i]) split.training.push_back(i);
    }
    return split;
}

Reduction reduce(const Plate& plate, const TrainConfig& cfg, const std::optional<std::vector<double>>& efficiency) {
    cfg.validate();
    plate.validate();
    Reduction red;
    auto eff = efficiency ? preprocess::apply_efficiency(plate, *efficiency) : preprocess::normalize_efficiency(plate);
    red.normalized = std::move(eff.plate);
    red.efficiency = std::move(eff.efficiency);
    red.undetected = std::move(eff.undetected);
    const Plate& p = red.normalized;
    const std::size_t nf = p.n_fibers(), np = p.n_pixels();

    red.split = split_fibers(p, cfg.holdout_every);
    if (red.split.train_sky.size() < 3) throw EmptyInputError("fewer than 3 training sky fibers");

    red.continua = preprocess::fiber_continua(p);
    red.labels = preprocess::make_sky_labels(p, red.continua, preprocess::classify_object_mask(p, red.continua),
                                             preprocess::plate_line_mask(p));

    // S_l(i): mean continuum of the nearest training sky fibers other than i.
    red.local_continuum = Matrix(nf, np);
    for (std::size_t i = 0; i < nf; ++i) {
        std::vector<std::pair<double, std::size_t>> d;
        for (auto j : red.split.train_sky) {
            if (j != i) d.emplace_back(angular_distance(p.fibers[i], p.fibers[j]), j);
        }
        const std::size_t n = std::min(cfg.continuum_neighbors, d.size());
        std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n), d.end());
        std::vector<std::size_t> near;
        for (std::size_t k = 0; k < n; ++k) near.push_back(d[k].second);
        const auto sl = preprocess::common_continuum(red.continua, near);
        std::copy(sl.begin(), sl.end(), red.local_continuum.row(i).begin());
    }

    red.plan = preprocess::segment_adaptive(preprocess::label_line_pixels(red.labels, red.split.train_sky));
    red.plan.validate(np);

    const auto& rows = red.split.train_sky;
    for (const auto& seg : red.plan.segments) {
        const std::size_t len = seg.length();
        std::vector<double> med_label(len), med_excess(len), col(rows.size());
        for (std::size_t j = 0; j < len; ++j) {
            for (std::size_t r = 0; r < rows.size(); ++r) col[r] = red.labels(rows[r], seg.start + j);
            med_label[j] = median(col);
            for (std::size_t r = 0; r < rows.size(); ++r) {
                col[r] = p.flux(rows[r], seg.start + j) - red.continua(rows[r], seg.start + j);
            }
            med_excess[j] = median(col);
        }
        std::vector<double> noise;
        for (auto r : rows) {
            std::vector<double> excess(len);
            for (std::size_t j = 0; j < len; ++j) excess[j] = p.flux(r, seg.start + j) - red.continua(r, seg.start + j);
            noise.push_back(robust_sigma(excess));
        }
        double scale = std::max(*std::max_element(med_label.begin(), med_label.end()), 3.0 * median(noise));
        if (!(scale > 0.0)) scale = 1.0;
        red.scales.push_back(scale);
        red.references.push_back(detect_excess(med_excess, 3.0, odd_window(len, preprocess::kContinuumWindow)).peaks());
    }
    return red;
}

void write_reduction(const fs::path& dir, const Reduction& red) {
    io::write_f64(dir / "efficiency.f64", red.efficiency);
    io::write_matrix(dir / "continuum.f64", red.local_continuum);
    io::write_matrix(dir / "labels.f64", red.labels);
    json seg = red.plan.to_json();
    io::write_json(dir / "segments.json", seg);
}

SegmentData segment_data(const Reduction& red, std::size_t s) {
    const auto& seg = red.plan.segments.at(s);
    const std::size_t nf = red.normalized.n_fibers(), len = seg.length();
    SegmentData d;
    d.index = s;
    d.scale = red.scales.at(s);
    d.references = red.references.at(s);
    d.x = Matrix(nf, len);
    d.labels = Matrix(nf, len);
    for (std::size_t i = 0; i < nf; ++i) {
        for (std::size_t j = 0; j < len; ++j) {
            const std::size_t c = seg.start + j;
            d.x(i, j) = (red.normalized.flux(i, c) - red.continua(i, c)) / d.scale;
            d.labels(i, j) = red.labels(i, c) / d.scale;
        }
    }
    return d;
}

TrainContext make_context(const Reduction& red, const Plate& plate, const TrainConfig& cfg) {
    TrainContext ctx;
    ctx.cfg = cfg;
    ctx.training = red.split.training;
    ctx.readout = red.split.train_sky;
    ctx.pairing = PairingPlan::build(plate, ctx.training, cfg.k_neighbors);
    return ctx;
}

PretrainResult pretrain_segment(const SegmentData& seg, const TrainContext& ctx) {
    require_batch(ctx);
    const auto& cfg = ctx.cfg;
    PretrainResult res;
    res.encoder = ModelParams(derive_seed(cfg.seed, "encoder", seg.index));
    net::init_encoder(res.encoder, cfg.encoder);
    ad::Adam opt(ad::AdamConfig{.lr = cfg.lr});
    auto rng = make_stream(cfg.seed, "pretrain-batch", seg.index);
    const auto refs = batch_refs(seg, cfg.batch);
    for (std::size_t step = 0; step < cfg.pretrain_steps; ++step) {
        const auto rows = sample_uniform(ctx.training, cfg.batch, rng);
        const auto r = net::pretrain_step(res.encoder, opt, rows_tensor(seg.x, rows), rows_tensor(seg.labels, rows),
                                          refs, cfg.encoder, cfg.temperature);
        res.skipped_rows += r.skipped;
        res.trace.push_back(r.loss);
    }
    return res;
}

SharedModels train_shared(const SegmentData& seg, const ModelParams& pretrained, const TrainContext& ctx) {
    if (pretrained.size() == 0) {
        throw InitializationError("segment " + std::to_string(seg.index) + ": no pretrained encoder");
    }
    require_batch(ctx);
    const auto& cfg = ctx.cfg;
    const std::size_t len = seg.x.cols();
    SharedModels m;
    // Both branches start from the same pretrained encoder and the same critic.
    m.encoder_x = pretrained.clone();
    m.encoder_y = pretrained.clone();
    m.critic_x = ModelParams(derive_seed(cfg.seed, "critic-shared", seg.index));
    net::init_statnet(m.critic_x, len, len, cfg.statnet);
    m.critic_y = m.critic_x.clone();

    ad::Adam opt_ex(ad::AdamConfig{.lr = cfg.lr}), opt_ey(ad::AdamConfig{.lr = cfg.lr});
    ad::Adam opt_cx(ad::AdamConfig{.lr = cfg.lr}), opt_cy(ad::AdamConfig{.lr = cfg.lr});
    auto rng = make_stream(cfg.seed, "shared-batch", seg.index);
    const auto refs = batch_refs(seg, cfg.batch);
    const double per_value = 1.0 / static_cast<double>(cfg.batch * len);
    for (std::size_t step = 0; step < cfg.shared_steps; ++step) {
        const auto pairs = sample_pairs(ctx, rng);
        const auto perm = permutation(cfg.batch, rng);
        const auto x = rows_tensor(seg.x, pairs.anchors);
        const auto y = rows_tensor(seg.x, pairs.partners);
        for (auto* p : {&m.encoder_x, &m.encoder_y, &m.critic_x, &m.critic_y}) p->zero_grad();
        const auto sx = net::encode(m.encoder_x, x, refs, cfg.encoder);
        const auto sy = net::encode(m.encoder_y, y, refs, cfg.encoder);
        const auto cross = ad::add(net::dv_bound(m.critic_x, x, sy, perm), net::dv_bound(m.critic_y, y, sx, perm));
        const auto loss = ad::sub(cross, ad::scale(ad::l1_distance(sx, sy), cfg.alpha * per_value));
        ad::backward(loss);
        opt_ex.step(m.encoder_x, true);
        opt_ey.step(m.encoder_y, true);
        opt_cx.step(m.critic_x, true);
        opt_cy.step(m.critic_y, true);
        m.trace.push_back(loss.item());
    }
    return m;
}

UniqueModels train_unique(const SegmentData& seg, const SharedModels& shared, const TrainContext& ctx) {
    if (shared.encoder_x.size() == 0 || shared.critic_x.size() == 0) {
        throw InitializationError("segment " + std::to_string(seg.index) + ": no stage-1 models");
    }
    require_batch(ctx);
    const auto& cfg = ctx.cfg;
    const std::size_t len = seg.x.cols();
    UniqueModels m;
    m.encoder_x = shared.encoder_x.clone();
    m.encoder_y = shared.encoder_y.clone();
    m.critic_x = shared.critic_x.clone();
    m.critic_y = shared.critic_y.clone();
    m.critic_e = ModelParams(derive_seed(cfg.seed, "critic-redundancy", seg.index));
    net::init_statnet(m.critic_e, len, len, cfg.statnet);

    ad::Adam opt_ex(ad::AdamConfig{.lr = cfg.lr}), opt_ey(ad::AdamConfig{.lr = cfg.lr});
    ad::Adam opt_cx(ad::AdamConfig{.lr = cfg.lr}), opt_cy(ad::AdamConfig{.lr = cfg.lr});
    ad::Adam opt_ce(ad::AdamConfig{.lr = cfg.lr});
    auto rng = make_stream(cfg.seed, "unique-batch", seg.index);
    const auto refs = batch_refs(seg, cfg.batch);
    for (std::size_t step = 0; step < cfg.unique_steps; ++step) {
        const auto pairs = sample_pairs(ctx, rng);
        const auto perm = permutation(cfg.batch, rng);
        const auto x = rows_tensor(seg.x, pairs.anchors);
        const auto y = rows_tensor(seg.x, pairs.partners);
        for (auto* p : {&m.encoder_x, &m.encoder_y, &m.critic_x, &m.critic_y, &m.critic_e}) p->zero_grad();
        const auto ex = net::encode(m.encoder_x, x, refs, cfg.encoder);
        const auto ey = net::encode(m.encoder_y, y, refs, cfg.encoder);
        const auto own = ad::add(net::dv_bound(m.critic_x, x, ex, perm), net::dv_bound(m.critic_y, y, ey, perm));
        const auto redundancy = net::dv_bound(m.critic_e, ex, ey, perm);
        const auto loss = ad::sub(own, ad::scale(redundancy, cfg.beta));
        ad::backward(loss);
        opt_ex.step(m.encoder_x, true);
        opt_ey.step(m.encoder_y, true);
        opt_cx.step(m.critic_x, true);
        opt_cy.step(m.critic_y, true);

        // The redundancy critic always tightens its own bound, on frozen representations.
        m.critic_e.zero_grad();
        ad::backward(net::dv_bound(m.critic_e, ex.detach(), ey.detach(), perm));
        opt_ce.step(m.critic_e, true);

        m.trace.push_back(loss.item());
        m.redundancy.push_back(redundancy.item());
    }
    return m;
}

Matrix represent(const ModelParams& encoder, const Matrix& x, const std::vector<std::size_t>& references,
                 const net::EncoderConfig& cfg) {
    constexpr std::size_t kChunk = 32;
    Matrix out(x.rows(), x.cols());
    for (std::size_t start = 0; start < x.rows(); start += kChunk) {
        std::vector<std::size_t> rows(std::min(kChunk, x.rows() - start));
        std::iota(rows.begin(), rows.end(), start);
        const auto rep = net::encode(encoder, rows_tensor(x, rows), net::PeakLists(rows.size(), references), cfg);
        std::copy(rep.data().begin(), rep.data().end(), out.row(start).begin());
    }
    return out;
}

double Readout::operator()(double v) const {
    if (x.empty()) return 0.0;
    if (v <= x.front()) return y.front();
    if (v >= x.back()) return y.back();
    const auto it = std::upper_bound(x.begin(), x.end(), v);
    const auto k = static_cast<std::size_t>(it - x.begin());
    const double t = (v - x[k - 1]) / (x[k] - x[k - 1]);
    return y[k - 1] + t * (y[k] - y[k - 1]);
}

Readout fit_readout(const Matrix& representation, const Matrix& labels, const std::vector<std::size_t>& rows,
                    std::size_t bins) {
    if (rows.empty() || representation.cols() == 0) throw EmptyInputError("readout fit needs at least one value");
    if (bins < 1) throw ConfigError("readout needs at least one bin");
    std::vector<std::pair<double, double>> pts;
    for (auto r : rows)
        for (std::size_t j = 0; j < representation.cols(); ++j) pts.emplace_back(representation(r, j), labels(r, j));
    std::sort(pts.begin(), pts.end());

    struct Block {
        double x, y, w;
    };
    std::vector<Block> blocks;
    const std::size_t n = pts.size(), nbins = std::min(bins, n);
    for (std::size_t b = 0; b < nbins; ++b) {
        const std::size_t lo = b * n / nbins, hi = (b + 1) * n / nbins;
        double sx = 0.0, sy = 0.0;
        for (std::size_t k = lo; k < hi; ++k) {
            sx += pts[k].first;
            sy += pts[k].second;
        }
        const double w = static_cast<double>(hi - lo);
        Block blk{sx / w, sy / w, w};
        // Pool adjacent violators: merge while the previous block sits higher.
        while (!blocks.empty() && blocks.back().y >= blk.y) {
            const auto& prev = blocks.back();
            const double tw = prev.w + blk.w;
            blk = {(prev.x * prev.w + blk.x * blk.w) / tw, (prev.y * prev.w + blk.y * blk.w) / tw, tw};
            blocks.pop_back();
        }
        blocks.push_back(blk);
    }
    Readout out;
    for (const auto& blk : blocks) {
        // Knots need strictly increasing x for interpolation; ties keep the higher value.
        if (!out.x.empty() && blk.x <= out.x.back()) {
            out.y.back() = blk.y;
            continue;
        }
        out.x.push_back(blk.x);
        out.y.push_back(blk.y);
    }
    return out;
}

SegmentSky segment_sky(const SegmentData& seg, const Matrix& shared_rep, const Readout& shared_readout,
                       const Matrix& unique_rep, const Readout& unique_readout, const std::vector<std::size_t>& rows) {
    if (rows.empty()) throw EmptyInputError("shared sky needs at least one readout row");
    const std::size_t len = shared_rep.cols();
    SegmentSky sky;
    sky.shared.assign(len, 0.0);
    for (std::size_t j = 0; j < len; ++j) {
        double s = 0.0;
        for (auto r : rows) s += shared_readout(shared_rep(r, j));
        sky.shared[j] = seg.scale * std::max(0.0, s / static_cast<double>(rows.size()));
    }
    // The shared part of EX is its mean over the readout rows, in the unique readout's own units.
    std::vector<double> common(len, 0.0);
    for (std::size_t j = 0; j < len; ++j) {
        for (auto r : rows) common[j] += unique_readout(unique_rep(r, j));
        common[j] /= static_cast<double>(rows.size());
    }
    sky.unique = Matrix(unique_rep.rows(), len);
    for (std::size_t i = 0; i < unique_rep.rows(); ++i) {
        for (std::size_t j = 0; j < len; ++j) {
            sky.unique(i, j) = std::max(0.0, seg.scale * (unique_readout(unique_rep(i, j)) - common[j]));
        }
    }
    return sky;
}

Spectrum compose_sky(std::span<const double> continuum, std::span<const double> shared,
                     std::span<const double> unique, double efficiency) {
    if (continuum.size() != shared.size() || shared.size() != unique.size()) {
        throw ShapeError("sky components differ in length");
    }
    if (!(efficiency > 0.0)) throw DomainError("efficiency must be > 0");
    Spectrum out(continuum.size());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = (continuum[j] + shared[j] + unique[j]) * efficiency;
    return out;
}

void for_each_segment(std::size_t n_segments, bool deterministic, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers =
        deterministic ? 1 : std::min<std::size_t>(n_segments, std::max(1u, std::thread::hardware_concurrency()));
    if (workers <= 1) {
        for (std::size_t s = 0; s < n_segments; ++s) fn(s);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t s = next++; s < n_segments; s = next++) {
                try {
                    fn(s);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

void pretrain_all(PlateModel& model, const Reduction& red, const TrainContext& ctx) {
    model.cfg = ctx.cfg;
    model.segments.resize(red.plan.segments.size());
    for_each_segment(model.segments.size(), ctx.cfg.deterministic, [&](std::size_t s) {
        model.segments[s].pre = pretrain_segment(segment_data(red, s), ctx);
        model.segments[s].pretrained = true;
    });
}

void train_all(PlateModel& model, const Reduction& red, const TrainContext& ctx) {
    const std::size_t ns = red.plan.segments.size();
    if (model.segments.size() != ns) throw InitializationError("model and segment plan disagree on segment count");
    for (std::size_t s = 0; s < ns; ++s) {
        if (!model.segments[s].pretrained) {
            throw InitializationError("segment " + std::to_string(s) + " has no pretrained encoder");
        }
    }
    model.cfg = ctx.cfg;
    const std::size_t nf = red.normalized.n_fibers(), np = red.normalized.n_pixels();
    model.shared_sky.assign(np, 0.0);
    model.unique_sky = Matrix(nf, np);
    for_each_segment(ns, ctx.cfg.deterministic, [&](std::size_t s) {
        auto& sm = model.segments[s];
        const auto data = segment_data(red, s);
        sm.shared = train_shared(data, sm.pre.encoder, ctx);
        sm.unique = train_unique(data, sm.shared, ctx);
        const auto shared_rep = represent(sm.shared.encoder_x, data.x, data.references, ctx.cfg.encoder);
        const auto unique_rep = represent(sm.unique.encoder_x, data.x, data.references, ctx.cfg.encoder);
        sm.shared_readout = fit_readout(shared_rep, data.labels, ctx.readout);
        sm.unique_readout = fit_readout(unique_rep, data.labels, ctx.readout);
        const auto sky = segment_sky(data, shared_rep, sm.shared_readout, unique_rep, sm.unique_readout, ctx.readout);
        // Segments own disjoint columns, so concurrent writes never overlap.
        const std::size_t start = red.plan.segments[s].start;
        std::copy(sky.shared.begin(), sky.shared.end(), model.shared_sky.begin() + static_cast<std::ptrdiff_t>(start));
        for (std::size_t i = 0; i < nf; ++i) {
            const auto row = sky.unique.row(i);
            std::copy(row.begin(), row.end(), model.unique_sky.row(i).begin() + static_cast<std::ptrdiff_t>(start));
        }
        sm.trained = true;
    });
}

Spectrum estimate_sky(const PlateModel& model, const Reduction& red, std::size_t fiber) {
    for (std::size_t s = 0; s < red.plan.segments.size(); ++s) {
        if (s >= model.segments.size() || !model.segments[s].trained) {
            throw UntrainedSegmentError("segment " + std::to_string(s) + " is not trained", s);
        }
    }
    if (fiber >= red.normalized.n_fibers()) throw ContractError("fiber index out of range");
    return compose_sky(red.local_continuum.row(fiber), model.shared_sky, model.unique_sky.row(fiber),
                       red.efficiency[fiber]);
}

Matrix estimate_sky(const PlateModel& model, const Reduction& red) {
    const std::size_t nf = red.normalized.n_fibers(), np = red.normalized.n_pixels();
    Matrix out(nf, np);
    for (std::size_t i = 0; i < nf; ++i) {
        const auto sky = estimate_sky(model, red, i);
        std::copy(sky.begin(), sky.end(), out.row(i).begin());
    }
    return out;
}

void save_pretrained(const fs::path& dir, const PlateModel& model) {
    json segs = json::array();
    for (std::size_t s = 0; s < model.segments.size(); ++s) {
        const auto& sm = model.segments[s];
        if (!sm.pretrained) continue;
        const auto sd = dir / "checkpoints" / segment_dir_name(s);
        fs::create_directories(sd);
        ad::save_checkpoint(sd / "pre.ckpt", sm.pre.encoder);
        segs.push_back({{"index", s}, {"skipped_rows", sm.pre.skipped_rows}, {"trace", sm.pre.trace}});
    }
    io::write_json(dir / "pretrain.json", {{"config", model.cfg.to_json()}, {"segments", segs}});
}

void save_trained(const fs::path& dir, const PlateModel& model) {
    json segs = json::array();
    for (std::size_t s = 0; s < model.segments.size(); ++s) {
        const auto& sm = model.segments[s];
        json entry = {{"index", s}, {"trained", sm.trained}};
        if (sm.trained) {
            const auto sd = dir / "checkpoints" / segment_dir_name(s);
            fs::create_directories(sd);
            ad::save_checkpoint(sd / "shared_x.ckpt", sm.shared.encoder_x);
            ad::save_checkpoint(sd / "shared_y.ckpt", sm.shared.encoder_y);
            ad::save_checkpoint(sd / "stat_x.ckpt", sm.shared.critic_x);
            ad::save_checkpoint(sd / "stat_y.ckpt", sm.shared.critic_y);
            ad::save_checkpoint(sd / "unique_x.ckpt", sm.unique.encoder_x);
            ad::save_checkpoint(sd / "unique_y.ckpt", sm.unique.encoder_y);
            ad::save_checkpoint(sd / "stat_ux.ckpt", sm.unique.critic_x);
            ad::save_checkpoint(sd / "stat_uy.ckpt", sm.unique.critic_y);
            ad::save_checkpoint(sd / "stat_e.ckpt", sm.unique.critic_e);
            entry["shared_readout"] = readout_json(sm.shared_readout);
            entry["unique_readout"] = readout_json(sm.unique_readout);
            entry["shared_trace"] = sm.shared.trace;
            entry["unique_trace"] = sm.unique.trace;
            entry["redundancy_trace"] = sm.unique.redundancy;
        }
        segs.push_back(std::move(entry));
    }
    io::write_json(dir / "model.json", {{"config", model.cfg.to_json()}, {"segments", segs}});
    io::write_f64(dir / "shared_sky.f64", model.shared_sky);
    io::write_matrix(dir / "unique_sky.f64", model.unique_sky);
}

PlateModel load_pretrained(const fs::path& dir, const TrainConfig& cfg, std::size_t n_segments) {
    PlateModel model;
    model.cfg = cfg;
    model.segments.resize(n_segments);
    for (std::size_t s = 0; s < n_segments; ++s) {
        const auto path = dir / "checkpoints" / segment_dir_name(s) / "pre.ckpt";
        if (!fs::exists(path)) throw InitializationError("missing pretrain checkpoint: " + path.string());
        model.segments[s].pre.encoder = ad::load_checkpoint(path);
        model.segments[s].pretrained = true;
    }
    return model;
}

PlateModel load_trained(const fs::path& dir, const TrainConfig& cfg, const Reduction& red) {
    io::require_artifact(dir / "model.json");
    const auto j = io::read_json(dir / "model.json");
    const std::size_t nf = red.normalized.n_fibers(), np = red.normalized.n_pixels();
    PlateModel model;
    model.cfg = cfg;
    model.segments.resize(red.plan.segments.size());
    try {
        for (const auto& e : j.at("segments")) {
            const auto s = e.at("index").get<std::size_t>();
            if (s >= model.segments.size()) throw FormatError("model.json: segment index out of range");
            auto& sm = model.segments[s];
            sm.trained = e.at("trained").get<bool>();
            if (!sm.trained) continue;
            sm.shared_readout = readout_from_json(e.at("shared_readout"));
            sm.unique_readout = readout_from_json(e.at("unique_readout"));
            sm.shared.trace = e.at("shared_trace").get<std::vector<double>>();
            sm.unique.trace = e.at("unique_trace").get<std::vector<double>>();
            sm.unique.redundancy = e.at("redundancy_trace").get<std::vector<double>>();
            const auto sd = dir / "checkpoints" / segment_dir_name(s);
            sm.shared.encoder_x = ad::load_checkpoint(sd / "shared_x.ckpt");
            sm.unique.encoder_x = ad::load_checkpoint(sd / "unique_x.ckpt");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model.json: ") + e.what());
    }
    io::require_artifact(dir / "shared_sky.f64");
    io::require_artifact(dir / "unique_sky.f64");
    model.shared_sky = io::read_f64(dir / "shared_sky.f64");
    if (model.shared_sky.size() != np) throw FormatError("shared_sky.f64 has the wrong length");
    model.unique_sky = io::read_matrix(dir / "unique_sky.f64", nf, np);
    return model;
}

}  // namespace smi::train
