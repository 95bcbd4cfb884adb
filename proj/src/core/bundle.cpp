#include "smi/core/bundle.hpp"

#include "smi/core/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace smi::io {

namespace {

std::uint64_t to_little(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffU) << (8 * (7 - i));
    return out;
}

const char* kTruthFiles[] = {"object.f64", "continuum_common.f64", "emission_shared.f64",
                             "emission_unique.f64"};

}  // namespace

void require_artifact(const fs::path& path) {
    if (!fs::exists(path)) throw MissingArtifactError(path.string());
}

void write_f64(const fs::path& path, std::span<const double> values) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    std::vector<char> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::uint64_t le = to_little(std::bit_cast<std::uint64_t>(values[i]));
        std::memcpy(bytes.data() + 8 * i, &le, 8);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<double> read_f64(const fs::path& path) {
    require_artifact(path);
    std::ifstream in(path, std::ios::binary);
    const auto size = static_cast<std::size_t>(fs::file_size(path));
    if (size % 8 != 0) throw FormatError(path.string() + ": size is not a multiple of 8 bytes");
    std::vector<char> bytes(size);
    in.read(bytes.data(), static_cast<std::streamsize>(size));
    std::vector<double> values(size / 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t le = 0;
        std::memcpy(&le, bytes.data() + 8 * i, 8);
        values[i] = std::bit_cast<double>(to_little(le));
    }
    return values;
}

void write_matrix(const fs::path& path, const Matrix& m) { write_f64(path, m.data()); }

Matrix read_matrix(const fs::path& path, std::size_t rows, std::size_t cols) {
    auto values = read_f64(path);
    if (values.size() != rows * cols) {
        throw FormatError(path.string() + ": expected " + std::to_string(rows * cols) + " values, found " +
                          std::to_string(values.size()));
    }
    Matrix m(rows, cols);
    m.data() = std::move(values);
    return m;
}

nlohmann::json read_json(const fs::path& path) {
    require_artifact(path);
    std::ifstream in(path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json manifest_json(const Plate& plate) {
    nlohmann::json fibers = nlohmann::json::array();
    for (const auto& f : plate.fibers) {
        fibers.push_back({{"id", f.id},
                          {"ra", f.ra},
                          {"dec", f.dec},
                          {"role", std::string(to_string(f.role))},
                          {"spectrograph", f.spectrograph}});
    }
    return {{"format_version", kBundleFormatVersion},
            {"plan_id", plate.plan_id},
            {"n_fibers", plate.n_fibers()},
            {"n_pixels", plate.n_pixels()},
            {"arm", std::string(to_string(plate.grid.arm))},
            {"seed", plate.seed},
            {"has_truth", plate.truth.has_value()},
            {"fibers", fibers}};
}

void write_plate(const fs::path& dir, const Plate& plate) {
    plate.validate();
    fs::create_directories(dir);
    write_json(dir / "manifest.json", manifest_json(plate));
    write_f64(dir / "wavelength.f64", plate.grid.wavelength);
    write_matrix(dir / "flux.f64", plate.flux);
    if (!plate.truth) return;
    const std::size_t nf = plate.n_fibers();
    const std::size_t np = plate.n_pixels();
    const auto& comps = plate.truth->components;
    Matrix parts[4] = {Matrix(nf, np), Matrix(nf, np), Matrix(nf, np), Matrix(nf, np)};
    std::vector<double> eff(nf);
    for (std::size_t i = 0; i < nf; ++i) {
        const Spectrum* src[4] = {&comps[i].object, &comps[i].continuum_common, &comps[i].emission_shared,
                                  &comps[i].emission_unique};
        for (int k = 0; k < 4; ++k) std::copy(src[k]->begin(), src[k]->end(), parts[k].row(i).begin());
        eff[i] = comps[i].efficiency;
    }
    for (int k = 0; k < 4; ++k) write_matrix(dir / "truth" / kTruthFiles[k], parts[k]);
    write_f64(dir / "truth" / "efficiency.f64", eff);
    write_matrix(dir / "truth" / "noise.f64", plate.truth->noise);
}

Plate read_plate(const fs::path& dir) {
    const auto manifest = read_json(dir / "manifest.json");
    Plate plate;
    try {
        if (manifest.at("format_version").get<int>() != kBundleFormatVersion) {
            throw FormatError("unsupported bundle format_version");
        }
        plate.plan_id = manifest.value("plan_id", std::string("plate"));
        plate.seed = manifest.at("seed").get<std::uint64_t>();
        plate.grid.arm = arm_from_string(manifest.at("arm").get<std::string>());
        for (const auto& f : manifest.at("fibers")) {
            plate.fibers.push_back({f.at("id").get<int>(), f.at("ra").get<double>(), f.at("dec").get<double>(),
                                    role_from_string(f.at("role").get<std::string>()),
                                    f.at("spectrograph").get<int>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest.json: " + std::string(e.what()));
    }
    const std::size_t nf = manifest.at("n_fibers").get<std::size_t>();
    const std::size_t np = manifest.at("n_pixels").get<std::size_t>();
    if (nf != plate.fibers.size()) throw FormatError("manifest.json: n_fibers disagrees with fiber list");
    plate.grid.wavelength = read_f64(dir / "wavelength.f64");
    if (plate.grid.wavelength.size() != np) throw FormatError("wavelength.f64 length != n_pixels");
    plate.flux = read_matrix(dir / "flux.f64", nf, np);
    if (fs::exists(dir / "truth")) {
        PlateTruth truth;
        Matrix parts[4];
        for (int k = 0; k < 4; ++k) parts[k] = read_matrix(dir / "truth" / kTruthFiles[k], nf, np);
        const auto eff = read_f64(dir / "truth" / "efficiency.f64");
        if (eff.size() != nf) throw FormatError("truth/efficiency.f64 length != n_fibers");
        truth.noise = read_matrix(dir / "truth" / "noise.f64", nf, np);
        truth.components.resize(nf);
        for (std::size_t i = 0; i < nf; ++i) {
            auto& c = truth.components[i];
            c.object.assign(parts[0].row(i).begin(), parts[0].row(i).end());
            c.continuum_common.assign(parts[1].row(i).begin(), parts[1].row(i).end());
            c.emission_shared.assign(parts[2].row(i).begin(), parts[2].row(i).end());
            c.emission_unique.assign(parts[3].row(i).begin(), parts[3].row(i).end());
            c.efficiency = eff[i];
        }
        plate.truth = std::move(truth);
    }
    plate.validate();
    return plate;
}

}  // namespace smi::io
