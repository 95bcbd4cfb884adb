#include "smi/ad/params.hpp"

#include "smi/core/error.hpp"
#include "smi/core/rng.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace smi::ad {

Tensor& ModelParams::add(const std::string& name, Tensor t) {
    if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
}

Tensor& ModelParams::add_glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    auto rng = make_stream(seed_, "param:" + name);
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = u(rng);
    return add(name, Tensor::parameter(std::move(shape), std::move(v)));
}

Tensor& ModelParams::add_zeros(const std::string& name, Shape shape) {
    return add(name, Tensor::zeros(std::move(shape), true));
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second].second;
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second].second;
}

std::size_t ModelParams::n_values() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
}

void ModelParams::zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
}

ModelParams ModelParams::clone() const {
    ModelParams out(seed_);
    for (const auto& [name, t] : entries_) out.add(name, t.clone_parameter());
    return out;
}

void ModelParams::load_values(const ModelParams& other) {
    for (auto& [name, t] : entries_) {
        if (!other.contains(name)) continue;
        const auto& src = other.at(name);
        if (src.shape() != t.shape()) {
            throw ShapeError("parameter " + name + " shape " + shape_string(src.shape()) + " vs " +
                             shape_string(t.shape()));
        }
        std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
    }
}

void Adam::step(ModelParams& params, bool maximize) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double dir = maximize ? 1.0 : -1.0;
    for (auto& [name, t] : params) {
        auto& [m, v] = moments_[name];
        if (m.empty()) {
            m.assign(t.size(), 0.0);
            v.assign(t.size(), 0.0);
        }
        const auto g = t.grad();
        auto x = t.mutable_data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            x[i] += dir * cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        }
    }
}

GradCheckResult grad_check(const std::function<Tensor()>& f, ModelParams& params, double h, std::size_t max_coords,
                           std::uint64_t seed) {
    params.zero_grad();
    StructureLog::begin();
    Tensor loss = f();
    const auto base_sig = StructureLog::end();
    backward(loss);

    std::vector<std::pair<std::size_t, std::size_t>> coords;  // (entry, flat index)
    std::vector<std::vector<double>> analytic;
    std::vector<std::string> names;
    std::size_t e = 0;
    for (auto& [name, t] : params) {
        names.push_back(name);
        analytic.emplace_back(t.grad().begin(), t.grad().end());
        for (std::size_t i = 0; i < t.size(); ++i) coords.emplace_back(e, i);
        ++e;
    }
    if (max_coords != 0 && coords.size() > max_coords) {
        auto rng = make_stream(seed, "grad-check");
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(max_coords);
        std::sort(coords.begin(), coords.end());
    }

    std::vector<Tensor*> tensors;
    for (auto& [_, t] : params) tensors.push_back(&t);

    GradCheckResult result;
    for (const auto& [ei, i] : coords) {
        auto x = tensors[ei]->mutable_data();
        const double orig = x[i];
        x[i] = orig + h;
        StructureLog::begin();
        const double fp = f().item();
        const auto sig_p = StructureLog::end();
        x[i] = orig - h;
        StructureLog::begin();
        const double fm = f().item();
        const auto sig_m = StructureLog::end();
        x[i] = orig;
        if (sig_p != base_sig || sig_m != base_sig) {
            result.excluded.emplace_back(names[ei], i);
            continue;
        }
        const double num = (fp - fm) / (2.0 * h);
        const double an = analytic[ei][i];
        const double rel = std::abs(an - num) / std::max({std::abs(an), std::abs(num), 1e-6});
        result.max_rel_error = std::max(result.max_rel_error, rel);
        ++result.checked;
    }
    params.zero_grad();
    return result;
}

namespace {

constexpr char kMagic[4] = {'S', 'M', 'I', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
T to_le(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
    return v;
}

template <class T>
void put(std::ostream& out, T v) {
    v = to_le(v);
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool get(std::istream& in, T& v) {
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) return false;
    v = to_le(v);
    return true;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open checkpoint for writing: " + path.string());
    out.write(kMagic, 4);
    put(out, kCheckpointVersion);
    for (const auto& [name, t] : params) {
        put(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put(out, static_cast<std::uint64_t>(d));
        for (double v : t.data()) put(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw FormatError("failed writing checkpoint: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw MissingArtifactError(path.string());
    std::ifstream in(path, std::ios::binary);
    char magic[4];
    std::uint32_t version = 0;
    if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kMagic) || !get(in, version)) {
        throw FormatError("not a checkpoint file: " + path.string());
    }
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    ModelParams params;
    std::uint32_t name_len = 0;
    while (get(in, name_len)) {
        std::string name(name_len, '\0');
        std::uint32_t rank = 0;
        if (!in.read(name.data(), name_len) || !get(in, rank)) throw FormatError("truncated checkpoint");
        Shape shape(rank);
        for (auto& d : shape) {
            std::uint64_t v = 0;
            if (!get(in, v)) throw FormatError("truncated checkpoint");
            d = static_cast<std::size_t>(v);
        }
        std::vector<double> data(shape_size(shape));
        for (auto& x : data) {
            std::uint64_t bits = 0;
            if (!get(in, bits)) throw FormatError("truncated checkpoint");
            x = std::bit_cast<double>(bits);
        }
        params.add(name, Tensor::parameter(std::move(shape), std::move(data)));
    }
    return params;
}

}  // namespace smi::ad
