#pragma once

#include "smi/ad/ops.hpp"
#include "smi/ad/params.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace smi::net {

using ad::ModelParams;
using ad::Tensor;

// Per-sample reference peak positions (pixel offsets inside the segment).
using PeakLists = std::vector<std::vector<std::size_t>>;

struct CalibrationConfig {
    std::size_t window = 7;      // search radius around each reference peak
    std::size_t max_shift = 5;   // larger displacements are left alone
    double nsigma = 3.0;
    std::size_t median_window = 51;
};

struct CalibrationResult {
    Tensor out;
    std::vector<std::size_t> source;  // out[b, c, j] = x[b, c, source[b * L + j]]
    std::vector<int> shifts;          // applied shift per (sample, reference); 0 when skipped
    bool no_peaks = false;            // no peak was detected in any sample
};

// Detects peaks in the channel-mean map of each sample (running median +
// nsigma * MAD) and, for every reference peak, rotates the pixels of a small
// window so the nearest detected peak lands on the reference. Windows that
// would overlap an already realigned one are skipped.
CalibrationResult calibrate_features(const Tensor& x, const PeakLists& references, const CalibrationConfig& cfg = {});

// Peaks of the 3-sigma excess of each input row; used as calibration references.
PeakLists input_peaks(const Tensor& x, const CalibrationConfig& cfg = {});

enum class EncoderRole { pretrain, shared, unique };
std::string to_string(EncoderRole role);

// input: shifts are decided once on the encoder input and the same pixel
// permutation is applied after every block. feature: each block detects peaks
// on its own feature map, so the permutation can change as the weights move.
enum class CalibrationMode { input, feature };

struct EncoderConfig {
    std::size_t channels = 8;
    std::size_t kernel = 5;
    std::size_t blocks = 3;
    bool calibrate = true;
    CalibrationMode calibration_mode = CalibrationMode::input;
    // Mirror the segment ends by the receptive-field radius before the first
    // block and crop afterwards, so edge pixels see the same context as interior ones.
    bool reflect_edges = true;
    CalibrationConfig calibration;
};

void init_encoder(ModelParams& params, const EncoderConfig& cfg);
// x [B x L] -> representation [B x L].
Tensor encode(const ModelParams& params, const Tensor& x, const PeakLists& references, const EncoderConfig& cfg);

struct StatNetConfig {
    std::size_t width = 128;
};

void init_statnet(ModelParams& params, std::size_t input_a, std::size_t input_b, const StatNetConfig& cfg = {});
// concat(a, b) -> dense(width) -> relu -> dense(width) -> relu -> dense(1); [B x 1].
Tensor statnet(const ModelParams& params, const Tensor& a, const Tensor& b);

constexpr std::size_t kMinDvBatch = 16;

// mean T(x, z) - log mean exp T(x, z[perm]).
Tensor dv_bound(const ModelParams& critic, const Tensor& x, const Tensor& z, const std::vector<std::size_t>& perm);

// KL(softmax(temperature * label) || softmax(En(x))), mean over rows.
Tensor pretrain_loss(const ModelParams& encoder, const Tensor& x, const Tensor& labels, const PeakLists& references,
                     const EncoderConfig& cfg, double temperature);

struct PretrainStep {
    double loss = 0.0;
    std::size_t used = 0;     // rows with an informative label
    std::size_t skipped = 0;  // all-zero label rows
};

PretrainStep pretrain_step(ModelParams& encoder, ad::Adam& opt, const Tensor& x, const Tensor& labels,
                           const PeakLists& references, const EncoderConfig& cfg, double temperature);

}  // namespace smi::net
