#pragma once

// Plate bundle directory:
//   manifest.json      n_fibers, n_pixels, arm, fibers[], seed, plan_id, format_version = 1
//   wavelength.f64     raw little-endian doubles [n_pixels]
//   flux.f64           raw little-endian doubles, row-major [n_fibers][n_pixels]
//   truth/             optional: object, continuum_common, emission_shared,
//                      emission_unique, noise (.f64, [n_fibers][n_pixels]) and efficiency.f64
// Later pipeline stages add their own artifacts next to these.

#include "smi/core/types.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace smi::io {

namespace fs = std::filesystem;

constexpr int kBundleFormatVersion = 1;

void write_f64(const fs::path& path, std::span<const double> values);
std::vector<double> read_f64(const fs::path& path);

void write_matrix(const fs::path& path, const Matrix& m);
Matrix read_matrix(const fs::path& path, std::size_t rows, std::size_t cols);

nlohmann::json read_json(const fs::path& path);
void write_json(const fs::path& path, const nlohmann::json& j);
void write_text(const fs::path& path, const std::string& text);

// Throws MissingArtifactError naming the file if it does not exist.
void require_artifact(const fs::path& path);

nlohmann::json manifest_json(const Plate& plate);

void write_plate(const fs::path& dir, const Plate& plate);
Plate read_plate(const fs::path& dir);

}  // namespace smi::io
