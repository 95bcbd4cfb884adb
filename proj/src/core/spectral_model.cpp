#include "smi/core/spectral_model.hpp"

#include "smi/core/error.hpp"

namespace smi {

Spectrum compose_observed(const SkyDecomposition& d) {
    d.validate();
    Spectrum out(d.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (d.object[i] + d.continuum_common[i] + d.emission_shared[i] + d.emission_unique[i]) *
                 d.efficiency;
    }
    return out;
}

std::pair<Spectrum, Spectrum> split_sky(const SkyDecomposition& d) {
    d.validate();
    Spectrum common(d.size());
    for (std::size_t i = 0; i < common.size(); ++i) {
        common[i] = d.continuum_common[i] + d.emission_shared[i];
    }
    return {std::move(common), d.emission_unique};
}

Spectrum observed_sky(const SkyDecomposition& d) {
    d.validate();
    Spectrum out(d.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (d.continuum_common[i] + d.emission_shared[i] + d.emission_unique[i]) * d.efficiency;
    }
    return out;
}

}  // namespace smi
