#pragma once

#include "smi/ad/params.hpp"
#include "smi/core/types.hpp"
#include "smi/net/net.hpp"
#include "smi/preprocess/preprocess.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace smi::train {

using ad::ModelParams;

struct TrainConfig {
    double alpha = 0.1;
    double beta = 0.1;
    double lr = 1e-3;
    std::size_t pretrain_steps = 300;
    std::size_t shared_steps = 300;
    std::size_t unique_steps = 300;
    std::size_t batch = 16;
    std::uint64_t seed = 7;
    std::size_t k_neighbors = 4;
    // Training sky fibers averaged into the local continuum S_l of each fiber.
    std::size_t continuum_neighbors = 6;
    double temperature = 3.0;  // label sharpness inside the pretraining softmax
    // Every n-th sky fiber (by id) is held out from training and readout fits.
    std::size_t holdout_every = 3;
    bool deterministic = false;
    net::EncoderConfig encoder;
    net::StatNetConfig statnet;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// k nearest usable neighbours of every fiber with normalized inverse-distance weights.
struct PairingPlan {
    std::vector<std::vector<std::size_t>> neighbors;  // indexed by fiber; empty for non-candidates
    std::vector<std::vector<double>> weights;

    static PairingPlan build(const Plate& plate, const std::vector<std::size_t>& candidates, std::size_t k);
    // Throws ContractError on self-pairing, non-positive or unnormalized weights.
    void validate() const;
};

struct FiberSplit {
    std::vector<std::size_t> train_sky;    // sky fibers used for readouts, S_l and the baseline
    std::vector<std::size_t> heldout_sky;  // evaluation only
    std::vector<std::size_t> training;     // every non-faulty fiber that is not held out
};

FiberSplit split_fibers(const Plate& plate, std::size_t holdout_every);

// Preprocessed plate: everything the networks and the sky assembly consume.
struct Reduction {
    Plate normalized;  // plate'
    std::vector<double> efficiency;
    std::vector<std::size_t> undetected;  // fibers whose 5577 line was not detected
    Matrix continua;         // f(i, .)
    Matrix local_continuum;  // S_l(i, .)
    Matrix labels;
    preprocess::SegmentPlan plan;
    FiberSplit split;
    std::vector<double> scales;                         // per segment
    std::vector<std::vector<std::size_t>> references;   // per segment, offsets inside the segment
};

// Efficiencies come from the 5577 line unless supplied (red arm).
Reduction reduce(const Plate& plate, const TrainConfig& cfg,
                 const std::optional<std::vector<double>>& efficiency = std::nullopt);

// Writes efficiency.f64, continuum.f64, labels.f64 and segments.json into a bundle.
void write_reduction(const std::filesystem::path& dir, const Reduction& red);

// One segment's network inputs, already scaled.
struct SegmentData {
    std::size_t index = 0;
    Matrix x;       // [n_fibers x L], (plate' - f) / scale
    Matrix labels;  // [n_fibers x L], label / scale
    std::vector<std::size_t> references;
    double scale = 1.0;
};

// Reads only the columns of segment s.
SegmentData segment_data(const Reduction& red, std::size_t s);

struct TrainContext {
    TrainConfig cfg;
    std::vector<std::size_t> training;  // anchors and partners
    std::vector<std::size_t> readout;   // fibers whose labels calibrate the readouts
    PairingPlan pairing;
};

TrainContext make_context(const Reduction& red, const Plate& plate, const TrainConfig& cfg);

struct PretrainResult {
    ModelParams encoder;
    std::vector<double> trace;
    std::size_t skipped_rows = 0;  // all-zero label rows met in sampled batches
};

struct SharedModels {
    ModelParams encoder_x, encoder_y, critic_x, critic_y;
    std::vector<double> trace;  // L_shared before each update
};

struct UniqueModels {
    ModelParams encoder_x, encoder_y, critic_x, critic_y, critic_e;
    std::vector<double> trace;       // L_unique before each update
    std::vector<double> redundancy;  // DV bound of the redundancy critic before each update
};

PretrainResult pretrain_segment(const SegmentData& seg, const TrainContext& ctx);
// Throws InitializationError when the pretrained encoder is empty.
SharedModels train_shared(const SegmentData& seg, const ModelParams& pretrained, const TrainContext& ctx);
// Throws InitializationError when the stage-1 models are empty.
UniqueModels train_unique(const SegmentData& seg, const SharedModels& shared, const TrainContext& ctx);

// Encodes every row of x in fixed-size chunks.
Matrix represent(const ModelParams& encoder, const Matrix& x, const std::vector<std::size_t>& references,
                 const net::EncoderConfig& cfg);

// Monotone non-decreasing piecewise-linear map from representation values to
// label values; flat beyond the end knots.
struct Readout {
    std::vector<double> x;
    std::vector<double> y;
    double operator()(double v) const;
};

// Equal-count bins of (representation, label) pairs over the given rows,
// then pool-adjacent-violators on the bin means.
Readout fit_readout(const Matrix& representation, const Matrix& labels, const std::vector<std::size_t>& rows,
                    std::size_t bins = 4096);

struct SegmentSky {
    Spectrum shared;  // S_sm over the segment, plate' flux units
    Matrix unique;    // S_o(i, .) over the segment
};

// S_sm = scale * max(0, mean over readout rows of readout(SX));
// S_o = max(0, scale * (readout'(EX_i) - mean over readout rows of readout'(EX))).
SegmentSky segment_sky(const SegmentData& seg, const Matrix& shared_rep, const Readout& shared_readout,
                       const Matrix& unique_rep, const Readout& unique_readout, const std::vector<std::size_t>& rows);

// (S_l + S_sm + S_o) * H for one fiber.
Spectrum compose_sky(std::span<const double> continuum, std::span<const double> shared,
                     std::span<const double> unique, double efficiency);

struct SegmentModel {
    bool pretrained = false;
    bool trained = false;
    PretrainResult pre;
    SharedModels shared;
    UniqueModels unique;
    Readout shared_readout;
    Readout unique_readout;
};

struct PlateModel {
    TrainConfig cfg;
    std::vector<SegmentModel> segments;
    Spectrum shared_sky;  // S_sm on the full grid
    Matrix unique_sky;    // S_o per fiber on the full grid
};

// Runs fn(s) for every segment; in parallel unless deterministic.
void for_each_segment(std::size_t n_segments, bool deterministic, const std::function<void(std::size_t)>& fn);

void pretrain_all(PlateModel& model, const Reduction& red, const TrainContext& ctx);
// Both stages, readouts and the assembled S_sm / S_o. Every segment must be pretrained.
void train_all(PlateModel& model, const Reduction& red, const TrainContext& ctx);

// sky_i for every fiber. Throws UntrainedSegmentError naming the first untrained segment.
Matrix estimate_sky(const PlateModel& model, const Reduction& red);
Spectrum estimate_sky(const PlateModel& model, const Reduction& red, std::size_t fiber);

// Bundle layout: checkpoints/seg<NN>/<role>.ckpt, model.json, shared_sky.f64, unique_sky.f64.
void save_pretrained(const std::filesystem::path& dir, const PlateModel& model);
void save_trained(const std::filesystem::path& dir, const PlateModel& model);
// Throws InitializationError if a pretrain checkpoint is missing.
PlateModel load_pretrained(const std::filesystem::path& dir, const TrainConfig& cfg, std::size_t n_segments);
// Throws MissingArtifactError if model.json is absent; untrained segments stay flagged.
PlateModel load_trained(const std::filesystem::path& dir, const TrainConfig& cfg, const Reduction& red);

}  // namespace smi::train
