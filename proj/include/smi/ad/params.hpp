#pragma once

#include "smi/ad/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace smi::ad {

// Named trainable tensors in insertion order.
class ModelParams {
public:
    ModelParams() = default;
    explicit ModelParams(std::uint64_t seed) : seed_(seed) {}

    // Glorot-uniform in +-sqrt(6 / (fan_in + fan_out)), drawn from a stream
    // keyed by (seed, name) so the result does not depend on creation order.
    Tensor& add_glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out);
    Tensor& add_zeros(const std::string& name, Shape shape);
    Tensor& add(const std::string& name, Tensor t);

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const { return entries_.size(); }
    std::size_t n_values() const;
    std::uint64_t seed() const { return seed_; }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grad();
    // Deep copy with fresh leaf tensors.
    ModelParams clone() const;
    // Copies values from `other` for every shared name; shapes must match.
    void load_values(const ModelParams& other);

private:
    std::uint64_t seed_ = 0;
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
    // Applies one update using the gradients stored on the parameters. Set
    // `maximize` to ascend instead of descend.
    void step(ModelParams& params, bool maximize = false);
    std::size_t steps() const { return t_; }

private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    // (parameter name, flat index) of coordinates skipped because the
    // perturbation changed a discrete decision (relu sign, realignment).
    std::vector<std::pair<std::string, std::size_t>> excluded;
};

// Central differences against reverse-mode gradients. With max_coords == 0
// every coordinate is checked; otherwise a seeded uniform sample.
// Relative error is |a - n| / max(|a|, |n|, 1e-6).
GradCheckResult grad_check(const std::function<Tensor()>& f, ModelParams& params, double h = 1e-5,
                           std::size_t max_coords = 0, std::uint64_t seed = 0);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace smi::ad
