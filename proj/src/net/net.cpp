#include "smi/net/net.hpp"

#include "smi/core/error.hpp"
#include "smi/core/robust.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace smi::net {

namespace {

std::size_t median_window_for(std::size_t len, std::size_t wanted) {
    std::size_t w = std::min(wanted, len);
    if (w % 2 == 0) --w;
    return std::max<std::size_t>(w, 1);
}

std::vector<std::size_t> detect_peaks(std::span<const double> m, const CalibrationConfig& cfg) {
    return detect_excess(m, cfg.nsigma, median_window_for(m.size(), cfg.median_window)).peaks();
}

}  // namespace

CalibrationResult calibrate_features(const Tensor& x, const PeakLists& references, const CalibrationConfig& cfg) {
    if (x.rank() != 3) throw ShapeError("calibrate_features expects [B x C x L]");
    const std::size_t nb = x.dim(0), nc = x.dim(1), len = x.dim(2);
    if (references.size() != nb) throw ContractError("one reference list per sample is required");

    CalibrationResult res;
    res.source.resize(nb * len);
    bool any_peak = false;
    const auto data = x.data();
    std::vector<double> mean_map(len);
    for (std::size_t b = 0; b < nb; ++b) {
        std::size_t* src = res.source.data() + b * len;
        std::iota(src, src + len, std::size_t{0});
        if (references[b].empty()) continue;
        std::fill(mean_map.begin(), mean_map.end(), 0.0);
        for (std::size_t c = 0; c < nc; ++c)
            for (std::size_t j = 0; j < len; ++j) mean_map[j] += data[(b * nc + c) * len + j];
        for (auto& v : mean_map) v /= static_cast<double>(nc);
        const auto peaks = detect_peaks(mean_map, cfg);
        any_peak = any_peak || !peaks.empty();

        std::vector<std::pair<std::size_t, std::size_t>> taken;  // realigned windows [lo, hi)
        for (std::size_t r : references[b]) {
            int shift = 0;
            // Nearest detected peak within the search radius; ties go to the lower index.
            std::size_t best = len;
            std::size_t best_d = cfg.window + 1;
            for (auto p : peaks) {
                const std::size_t d = p > r ? p - r : r - p;
                if (d < best_d) {
                    best_d = d;
                    best = p;
                }
            }
            if (best < len && best_d > 0 && best_d <= cfg.max_shift) {
                const std::size_t lo = std::min(best, r) >= cfg.window ? std::min(best, r) - cfg.window : 0;
                const std::size_t hi = std::min(len, std::max(best, r) + cfg.window + 1);
                const bool overlaps = std::any_of(taken.begin(), taken.end(), [&](const auto& w) {
                    return lo < w.second && w.first < hi;
                });
                if (!overlaps) {
                    shift = static_cast<int>(r) - static_cast<int>(best);
                    const long n = static_cast<long>(hi - lo);
                    std::vector<std::size_t> window(src + lo, src + hi);
                    for (long j = 0; j < n; ++j) {
                        const long from = ((j - shift) % n + n) % n;
                        src[lo + static_cast<std::size_t>(j)] = window[static_cast<std::size_t>(from)];
                    }
                    taken.emplace_back(lo, hi);
                }
            }
            res.shifts.push_back(shift);
            ad::StructureLog::record(static_cast<std::uint64_t>(static_cast<std::int64_t>(shift)) ^ (r << 8));
        }
    }
    res.no_peaks = !any_peak;
    res.out = ad::gather_positions(x, res.source);
    return res;
}

PeakLists input_peaks(const Tensor& x, const CalibrationConfig& cfg) {
    if (x.rank() != 2) throw ShapeError("input_peaks expects [B x L]");
    const std::size_t nb = x.dim(0), len = x.dim(1);
    PeakLists out(nb);
    for (std::size_t b = 0; b < nb; ++b) out[b] = detect_peaks(x.data().subspan(b * len, len), cfg);
    return out;
}

std::string to_string(EncoderRole role) {
    switch (role) {
        case EncoderRole::pretrain: return "pretrain";
        case EncoderRole::shared: return "shared";
        case EncoderRole::unique: return "unique";
    }
    return "unknown";
}

void init_encoder(ModelParams& params, const EncoderConfig& cfg) {
    if (cfg.kernel % 2 == 0) throw ConfigError("encoder kernel width must be odd");
    std::size_t cin = 1;
    for (std::size_t k = 0; k < cfg.blocks; ++k) {
        const std::string p = "block" + std::to_string(k);
        params.add_glorot(p + ".kernel", {cfg.channels, cin, cfg.kernel}, cin * cfg.kernel, cfg.channels * cfg.kernel);
        params.add_zeros(p + ".bias", {cfg.channels});
        cin = cfg.channels;
    }
    params.add_glorot("head.kernel", {1, cin, 1}, cin, 1);
    params.add_zeros("head.bias", {1});
}

Tensor encode(const ModelParams& params, const Tensor& x, const PeakLists& references, const EncoderConfig& cfg) {
    if (x.rank() != 2) throw ShapeError("encode expects [B x L]");
    const std::size_t nb = x.dim(0), len = x.dim(1);
    const std::size_t margin = cfg.reflect_edges && len > 1 ? std::min(cfg.blocks * (cfg.kernel / 2), len - 1) : 0;
    const std::size_t padded = len + 2 * margin;
    Tensor h = x;
    PeakLists refs = references;
    if (margin > 0) {
        std::vector<std::size_t> cols(padded);
        for (std::size_t t = 0; t < padded; ++t) {
            const auto j = static_cast<long>(t) - static_cast<long>(margin);
            const long last = static_cast<long>(len) - 1;
            cols[t] = static_cast<std::size_t>(j < 0 ? -j : (j > last ? 2 * last - j : j));
        }
        h = ad::gather_columns(h, cols);
        for (auto& r : refs)
            for (auto& p : r) p += margin;
    }
    h = ad::reshape(h, {nb, 1, padded});
    std::vector<std::size_t> input_source;
    if (cfg.calibrate && cfg.calibration_mode == CalibrationMode::input)
        input_source = calibrate_features(h, refs, cfg.calibration).source;
    for (std::size_t k = 0; k < cfg.blocks; ++k) {
        const std::string p = "block" + std::to_string(k);
        h = ad::conv1d(h, params.at(p + ".kernel"), params.at(p + ".bias"));
        if (cfg.calibrate) {
            h = cfg.calibration_mode == CalibrationMode::input ? ad::gather_positions(h, input_source)
                                                               : calibrate_features(h, refs, cfg.calibration).out;
        }
        h = ad::relu(h);
    }
    h = ad::reshape(ad::conv1d(h, params.at("head.kernel"), params.at("head.bias")), {nb, padded});
    if (margin == 0) return h;
    std::vector<std::size_t> keep(len);
    std::iota(keep.begin(), keep.end(), margin);
    return ad::gather_columns(h, keep);
}

void init_statnet(ModelParams& params, std::size_t input_a, std::size_t input_b, const StatNetConfig& cfg) {
    const std::size_t in = input_a + input_b;
    params.add_glorot("fc1.w", {in, cfg.width}, in, cfg.width);
    params.add_zeros("fc1.b", {cfg.width});
    params.add_glorot("fc2.w", {cfg.width, cfg.width}, cfg.width, cfg.width);
    params.add_zeros("fc2.b", {cfg.width});
    params.add_glorot("fc3.w", {cfg.width, 1}, cfg.width, 1);
    params.add_zeros("fc3.b", {1});
}

Tensor statnet(const ModelParams& params, const Tensor& a, const Tensor& b) {
    Tensor h = ad::concat_cols(a, b);
    h = ad::relu(ad::dense(h, params.at("fc1.w"), params.at("fc1.b")));
    h = ad::relu(ad::dense(h, params.at("fc2.w"), params.at("fc2.b")));
    return ad::dense(h, params.at("fc3.w"), params.at("fc3.b"));
}

Tensor dv_bound(const ModelParams& critic, const Tensor& x, const Tensor& z, const std::vector<std::size_t>& perm) {
    if (x.rank() != 2 || z.rank() != 2 || x.dim(0) != z.dim(0)) throw ShapeError("dv_bound expects [B x .] pairs");
    if (x.dim(0) < kMinDvBatch) {
        throw ContractError("dv_bound needs a batch of at least " + std::to_string(kMinDvBatch) + ", got " +
                            std::to_string(x.dim(0)));
    }
    if (perm.size() != x.dim(0)) throw ContractError("marginal permutation must cover the batch");
    const Tensor joint = statnet(critic, x, z);
    const Tensor marginal = statnet(critic, x, ad::gather_rows(z, perm));
    return ad::sub(ad::mean(joint), ad::log_mean_exp(marginal));
}

Tensor pretrain_loss(const ModelParams& encoder, const Tensor& x, const Tensor& labels, const PeakLists& references,
                     const EncoderConfig& cfg, double temperature) {
    if (labels.shape() != x.shape()) throw ShapeError("labels must match the input shape");
    const Tensor target = ad::softmax_rows(ad::scale(labels, temperature));
    const Tensor output = ad::softmax_rows(encode(encoder, x, references, cfg));
    return ad::kl_div(target, output);
}

PretrainStep pretrain_step(ModelParams& encoder, ad::Adam& opt, const Tensor& x, const Tensor& labels,
                           const PeakLists& references, const EncoderConfig& cfg, double temperature) {
    if (x.rank() != 2 || labels.shape() != x.shape()) throw ShapeError("pretrain_step expects matching [B x L]");
    const std::size_t nb = x.dim(0), len = x.dim(1);
    std::vector<std::size_t> keep;
    for (std::size_t b = 0; b < nb; ++b) {
        const auto row = labels.data().subspan(b * len, len);
        if (std::any_of(row.begin(), row.end(), [](double v) { return v != 0.0; })) keep.push_back(b);
    }
    PretrainStep step;
    step.used = keep.size();
    step.skipped = nb - keep.size();
    if (keep.empty()) return step;
    const Tensor xs = keep.size() == nb ? x : ad::gather_rows(x, keep);
    const Tensor ls = keep.size() == nb ? labels : ad::gather_rows(labels, keep);
    PeakLists refs;
    for (auto b : keep) refs.push_back(references.at(b));
    encoder.zero_grad();
    const Tensor loss = pretrain_loss(encoder, xs, ls, refs, cfg, temperature);
    ad::backward(loss);
    opt.step(encoder);
    step.loss = loss.item();
    return step;
}

}  // namespace smi::net
