#include "smi/synth/synthplate.hpp"

#include "smi/core/error.hpp"
#include "smi/core/rng.hpp"
#include "smi/core/robust.hpp"
#include "smi/core/spectral_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace smi::synth {

namespace {

struct NamedLine {
    double center;
    double sigma;
    double flux;
    const char* species;
};

constexpr NamedLine kNamedSkyLines[] = {
    {4046.56, 1.6, 600.0, "Hg-4047"},   {4358.34, 1.6, 1100.0, "Hg-4358"},
    {5460.74, 1.6, 1500.0, "Hg-5461"},  {kOxygen5577, 1.7, 3000.0, "OI-5577"},
    {5889.95, 1.6, 700.0, "NaD-5890"},  {6300.30, 1.7, 1400.0, "OI-6300"},
    {6363.78, 1.7, 500.0, "OI-6364"},
};

struct ObjectLine {
    double center;
    double sigma;
};

constexpr ObjectLine kAbsorption[] = {{3933.7, 4.0}, {3968.5, 4.0}, {4101.7, 5.0}, {4340.5, 5.0},
                                      {4861.3, 5.0}, {5175.0, 4.0}, {5893.0, 3.5}, {6562.8, 5.0},
                                      {8498.0, 3.5}, {8542.0, 3.5}, {8662.0, 3.5}};
constexpr double kGalaxyEmission[] = {3727.0, 4861.3, 4958.9, 5006.8, 6562.8, 6583.4};

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

double log_uniform(Rng& rng, double lo, double hi) {
    return std::exp(uniform(rng, std::log(lo), std::log(hi)));
}

Spectrum continuum_base(const SynthConfig& cfg, const PixelGrid& grid) {
    const double lo = grid.wavelength.front();
    const double span = grid.wavelength.back() - lo;
    Spectrum out(grid.n_pixels());
    for (std::size_t j = 0; j < out.size(); ++j) {
        const double t = (grid.wavelength[j] - lo) / span;
        out[j] = cfg.continuum_level *
                 (1.0 + 0.2 * std::sin(2.0 * std::numbers::pi * (grid.wavelength[j] - 3000.0) / 2600.0) +
                  0.1 * (t - 0.5));
    }
    return out;
}

Spectrum object_spectrum(const SynthConfig& cfg, const PixelGrid& grid, std::size_t fiber) {
    Spectrum obj(grid.n_pixels(), 0.0);
    auto rng = make_stream(cfg.seed, "object", fiber);
    if (uniform(rng, 0.0, 1.0) >= cfg.object_fraction) return obj;
    const double amplitude = log_uniform(rng, 10.0, 150.0);
    const double temperature = uniform(rng, 4000.0, 9000.0);
    const bool galaxy = uniform(rng, 0.0, 1.0) < 0.15;
    const double redshift = galaxy ? uniform(rng, 0.0, 0.08) : 0.0;
    // Planck shape normalised at 5500 A.
    auto planck = [temperature](double lambda_a) {
        const double x = 1.4388e8 / (lambda_a * temperature);
        return 1.0 / (std::pow(lambda_a, 5.0) * std::expm1(x));
    };
    const double norm = planck(5500.0);
    for (std::size_t j = 0; j < obj.size(); ++j) obj[j] = amplitude * planck(grid.wavelength[j]) / norm;
    for (const auto& line : kAbsorption) {
        const double depth = uniform(rng, 0.1, 0.5);
        const double c = line.center * (1.0 + redshift);
        for (std::size_t j = 0; j < obj.size(); ++j) {
            const double u = (grid.wavelength[j] - c) / line.sigma;
            obj[j] *= 1.0 - depth * std::exp(-0.5 * u * u);
        }
    }
    if (galaxy) {
        for (double rest : kGalaxyEmission) {
            const double flux = amplitude * uniform(rng, 5.0, 25.0);
            add_gaussian_line(obj, grid, rest * (1.0 + redshift), uniform(rng, 2.0, 3.5), flux);
        }
    }
    if (cfg.extinction) {
        for (double& v : obj) v *= *cfg.extinction;
    }
    return obj;
}

void add_private_lines(const SynthConfig& cfg, const PixelGrid& grid, const std::vector<double>& stable_px,
                       std::size_t fiber, Spectrum& out) {
    auto rng = make_stream(cfg.seed, "private", fiber);
    const double margin = 8.0;
    const double hi = static_cast<double>(grid.n_pixels()) - margin;
    std::vector<double> placed;
    for (std::size_t k = 0; k < cfg.private_lines; ++k) {
        for (int attempt = 0; attempt < 1000; ++attempt) {
            const double px = std::floor(uniform(rng, margin, hi));
            auto far = [&](double p) { return std::abs(p - px) >= cfg.private_line_clearance; };
            if (!std::all_of(stable_px.begin(), stable_px.end(), far) || !std::all_of(placed.begin(), placed.end(), far)) {
                continue;
            }
            placed.push_back(px);
            const auto j = static_cast<std::size_t>(px);
            const double sigma = 1.5 * grid.dispersion(j);
            add_gaussian_line(out, grid, grid.wavelength[j], sigma, cfg.private_line_flux * uniform(rng, 0.7, 1.3));
            break;
        }
    }
}

}  // namespace

void SynthConfig::validate() const {
    if (n_fibers < 4) throw ConfigError("SynthConfig: need at least 4 fibers");
    if (!(sky_fraction > 0.0 && sky_fraction < 1.0)) throw ConfigError("SynthConfig: sky_fraction must be in (0, 1)");
    if (faulty_fraction < 0.0 || faulty_fraction + sky_fraction >= 1.0) {
        throw ConfigError("SynthConfig: faulty_fraction out of range");
    }
    if (unique_pos_jitter < 0.0 || unique_flux_jitter < 0.0) throw ConfigError("SynthConfig: jitters must be >= 0");
    if (noise_sigma < 0.0) throw ConfigError("SynthConfig: noise_sigma must be >= 0");
    if (object_fraction < 0.0 || object_fraction > 1.0) throw ConfigError("SynthConfig: object_fraction in [0, 1]");
    if (!(dense_band.second > dense_band.first)) throw ConfigError("SynthConfig: dense_band inverted");
    if (extinction && !(*extinction > 0.0 && *extinction <= 1.0)) throw ConfigError("SynthConfig: extinction in (0, 1]");
    if (!(continuum_level > 0.0) || !(field_radius > 0.0)) throw ConfigError("SynthConfig: level and radius must be > 0");
    if (variable_line_fraction < 0.0 || variable_line_fraction > 1.0) {
        throw ConfigError("SynthConfig: variable_line_fraction in [0, 1]");
    }
    if (n_spectrographs < 1) throw ConfigError("SynthConfig: n_spectrographs >= 1");
    if (private_line_flux < 0.0 || private_line_clearance < 0.0) {
        throw ConfigError("SynthConfig: private line flux and clearance must be >= 0");
    }
}

void add_gaussian_line(std::span<double> out, const PixelGrid& grid, double center, double sigma, double flux) {
    const double peak = flux / (sigma * std::sqrt(2.0 * std::numbers::pi));
    const double reach = 6.0 * sigma;
    auto lo = std::lower_bound(grid.wavelength.begin(), grid.wavelength.end(), center - reach);
    auto hi = std::upper_bound(grid.wavelength.begin(), grid.wavelength.end(), center + reach);
    for (auto it = lo; it != hi; ++it) {
        const double u = (*it - center) / sigma;
        out[static_cast<std::size_t>(it - grid.wavelength.begin())] += peak * std::exp(-0.5 * u * u);
    }
}

std::vector<LineCatalogEntry> gen_line_catalog(const SynthConfig& cfg, const PixelGrid& grid) {
    if (grid.n_pixels() < 2) throw DomainError("gen_line_catalog: empty grid");
    const double lo = grid.wavelength.front();
    const double hi = grid.wavelength.back();
    std::vector<LineCatalogEntry> catalog;
    for (const auto& named : kNamedSkyLines) {
        if (named.center >= lo && named.center <= hi) {
            catalog.push_back({named.center, named.sigma, named.flux, named.species, false});
        }
    }
    auto rng = make_stream(cfg.seed, "line-catalog");
    auto forest = [&](double a, double b, double density, double fmin, double fmax) {
        const auto count = static_cast<std::size_t>(std::lround(density * (b - a)));
        for (std::size_t k = 0; k < count; ++k) {
            LineCatalogEntry e;
            e.center = uniform(rng, a, b);
            e.width_sigma = uniform(rng, 1.2, 2.0);
            e.base_flux = log_uniform(rng, fmin, fmax);
            e.variable = uniform(rng, 0.0, 1.0) < cfg.variable_line_fraction;
            e.species = "OH";
            catalog.push_back(std::move(e));
        }
    };
    const double band_lo = std::max(lo, cfg.dense_band.first);
    const double band_hi = std::min(hi, cfg.dense_band.second);
    if (band_hi > band_lo) {
        forest(band_lo, band_hi, kDenseLineDensity, 60.0, 900.0);
        if (band_lo > lo) forest(lo, band_lo, kSparseLineDensity, 40.0, 400.0);
        if (band_hi < hi) forest(band_hi, hi, kSparseLineDensity, 40.0, 400.0);
    } else {
        forest(lo, hi, kSparseLineDensity, 40.0, 400.0);
    }
    std::stable_sort(catalog.begin(), catalog.end(),
                     [](const LineCatalogEntry& a, const LineCatalogEntry& b) { return a.center < b.center; });
    return catalog;
}

Plate gen_plate(const SynthConfig& cfg, const PixelGrid& grid) {
    cfg.validate();
    grid.validate();
    const std::size_t nf = cfg.n_fibers;
    const std::size_t np = grid.n_pixels();
    const auto catalog = gen_line_catalog(cfg, grid);

    Plate plate;
    plate.grid = grid;
    plate.seed = cfg.seed;
    plate.plan_id = "synth-" + std::to_string(cfg.seed);

    // Geometry: fibers uniform in a disc; roles by an exact-count shuffle.
    auto geo = make_stream(cfg.seed, "geometry");
    const double ra0 = uniform(geo, 30.0, 330.0);
    const double dec0 = uniform(geo, -10.0, 60.0);
    const double cosd = std::cos(dec0 * std::numbers::pi / 180.0);
    const double wr = cfg.field_radius * 0.6 * std::sqrt(uniform(geo, 0.0, 1.0));
    const double wphi = uniform(geo, 0.0, 2.0 * std::numbers::pi);
    const double weather_ra = ra0 + wr * std::cos(wphi) / cosd;
    const double weather_dec = dec0 + wr * std::sin(wphi);
    const double reference_distance = 1.6 * cfg.field_radius;

    const auto n_sky = static_cast<std::size_t>(std::lround(cfg.sky_fraction * static_cast<double>(nf)));
    const auto n_faulty = static_cast<std::size_t>(std::lround(cfg.faulty_fraction * static_cast<double>(nf)));
    std::vector<FiberRole> roles(nf, FiberRole::target);
    for (std::size_t i = 0; i < n_sky; ++i) roles[i] = FiberRole::sky;
    for (std::size_t i = n_sky; i < n_sky + n_faulty && i < nf; ++i) roles[i] = FiberRole::faulty;
    std::shuffle(roles.begin(), roles.end(), geo);

    plate.fibers.resize(nf);
    for (std::size_t i = 0; i < nf; ++i) {
        const double r = cfg.field_radius * std::sqrt(uniform(geo, 0.0, 1.0));
        const double phi = uniform(geo, 0.0, 2.0 * std::numbers::pi);
        auto& f = plate.fibers[i];
        f.id = static_cast<int>(i + 1);
        f.ra = ra0 + r * std::cos(phi) / cosd;
        f.dec = dec0 + r * std::sin(phi);
        f.role = roles[i];
        const double sector = std::fmod(phi / (2.0 * std::numbers::pi) * cfg.n_spectrographs, cfg.n_spectrographs);
        f.spectrograph = 1 + std::min(cfg.n_spectrographs - 1, static_cast<int>(sector));
    }

    const Spectrum base = continuum_base(cfg, grid);
    Spectrum shared(np, 0.0);
    for (const auto& line : catalog) {
        if (!line.variable) add_gaussian_line(shared, grid, line.center, line.width_sigma, line.base_flux);
    }

    std::vector<double> stable_px;
    for (const auto& line : catalog) {
        if (!line.variable) stable_px.push_back(static_cast<double>(grid.nearest_pixel(line.center)));
    }

    PlateTruth truth;
    truth.components.resize(nf);
    truth.noise = Matrix(nf, np);
    plate.flux = Matrix(nf, np);
    const std::string noise_tag = std::string("noise-") + std::string(to_string(grid.arm));
    for (std::size_t i = 0; i < nf; ++i) {
        const auto& f = plate.fibers[i];
        auto& d = truth.components[i];

        auto eff_rng = make_stream(cfg.seed, "efficiency", i);
        d.efficiency = f.role == FiberRole::faulty ? uniform(eff_rng, 0.02, 0.1) : log_uniform(eff_rng, 0.8, 1.25);

        const double dra = (f.ra - ra0) * cosd;
        d.continuum_common.resize(np);
        for (std::size_t j = 0; j < np; ++j) {
            d.continuum_common[j] = base[j] * (1.0 + cfg.gradient_slope * dra / cfg.continuum_level);
        }
        d.emission_shared = shared;

        d.emission_unique.assign(np, 0.0);
        const double dnorm =
            std::min(1.0, angular_distance(f.ra, f.dec, weather_ra, weather_dec) / reference_distance);
        auto uniq = make_stream(cfg.seed, "unique", i);
        for (const auto& line : catalog) {
            if (!line.variable) continue;
            const double u = uniform(uniq, 0.5, 1.5);
            const double eta = std::normal_distribution<double>(0.0, 1.0)(uniq);
            const double flux = line.base_flux * cfg.unique_flux_jitter * dnorm * u;
            if (flux <= 0.0) continue;
            add_gaussian_line(d.emission_unique, grid, line.center + cfg.unique_pos_jitter * dnorm * eta,
                              line.width_sigma, flux);
        }

        if (cfg.private_lines > 0) add_private_lines(cfg, grid, stable_px, i, d.emission_unique);

        d.object = f.role == FiberRole::target ? object_spectrum(cfg, grid, i) : Spectrum(np, 0.0);

        const Spectrum clean = compose_observed(d);
        auto noise_rng = make_stream(cfg.seed, noise_tag, i);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (std::size_t j = 0; j < np; ++j) {
            const double n = cfg.noise_sigma > 0.0 ? cfg.noise_sigma * gauss(noise_rng) : 0.0;
            truth.noise(i, j) = n;
            plate.flux(i, j) = clean[j] + n;
        }
    }
    plate.truth = std::move(truth);
    return plate;
}

std::vector<std::size_t> strongest_line_pixels(const std::vector<LineCatalogEntry>& catalog, const PixelGrid& grid,
                                               std::size_t n, std::size_t min_separation) {
    std::vector<const LineCatalogEntry*> stable;
    for (const auto& e : catalog) {
        if (!e.variable && grid.covers(e.center)) stable.push_back(&e);
    }
    std::stable_sort(stable.begin(), stable.end(), [](const LineCatalogEntry* a, const LineCatalogEntry* b) {
        return a->base_flux / a->width_sigma > b->base_flux / b->width_sigma;
    });
    std::vector<std::size_t> picked;
    for (const auto* e : stable) {
        if (picked.size() == n) break;
        const std::size_t px = grid.nearest_pixel(e->center);
        const bool clear = std::none_of(picked.begin(), picked.end(), [&](std::size_t p) {
            return (p > px ? p - px : px - p) < min_separation;
        });
        if (clear) picked.push_back(px);
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

std::vector<std::uint8_t> object_line_mask(const Spectrum& object, double threshold) {
    std::vector<std::uint8_t> mask(object.size(), 0);
    if (object.empty()) return mask;
    const auto smooth = running_median(object, 51);
    for (std::size_t j = 0; j < object.size(); ++j) {
        if (std::abs(object[j] - smooth[j]) > threshold) mask[j] = 1;
    }
    // Grow by the typical line half-extent so wings are covered too.
    std::vector<std::uint8_t> grown(mask.size(), 0);
    const std::ptrdiff_t reach = 6;
    const auto n = static_cast<std::ptrdiff_t>(mask.size());
    for (std::ptrdiff_t j = 0; j < n; ++j) {
        if (!mask[static_cast<std::size_t>(j)]) continue;
        for (std::ptrdiff_t k = std::max<std::ptrdiff_t>(0, j - reach); k < std::min(n, j + reach + 1); ++k) {
            grown[static_cast<std::size_t>(k)] = 1;
        }
    }
    return grown;
}

}  // namespace smi::synth
