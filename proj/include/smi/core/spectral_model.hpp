#pragma once

#include "smi/core/types.hpp"

#include <utility>

namespace smi {

// (object + continuum_common + emission_shared + emission_unique) * efficiency
Spectrum compose_observed(const SkyDecomposition& d);

// Returns (common sky S_m = continuum_common + emission_shared, unique sky S_o).
std::pair<Spectrum, Spectrum> split_sky(const SkyDecomposition& d);

// Sky part only (no object): (S_m + S_o) * efficiency.
Spectrum observed_sky(const SkyDecomposition& d);

}  // namespace smi
