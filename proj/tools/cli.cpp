#include "cli.hpp"

#include "smi/ccd/ccd.hpp"
#include "smi/core/bundle.hpp"
#include "smi/core/error.hpp"
#include "smi/core/robust.hpp"
#include "smi/eval/evalkit.hpp"
#include "smi/synth/synthplate.hpp"
#include "smi/train/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace smi::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
    std::string out;
    std::string plate;
    std::string frames;
    std::string simulate;
    std::string catalog;
    std::string efficiency_from;
    std::string arm = "blue";
    std::uint64_t seed = 7;
    std::size_t fibers = 250;
    int spectrographs = 1;
    double alpha = 0.1;
    double beta = 0.1;
    std::size_t k_neighbors = 4;
    std::size_t steps = 300;
    bool deterministic = false;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> config_flags(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError(path.string());
    std::vector<std::string> flags;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected key=value");
        }
        std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        std::replace(key.begin(), key.end(), '_', '-');
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        flags.push_back("--" + key + "=" + value);
    }
    return flags;
}

// Moves "--config FILE" out of args and splices its flags in right after the command name.
std::vector<std::string> expand_config(std::vector<std::string> args) {
    std::optional<std::string> file;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            file = args[i + 1];
            args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            file = args[i].substr(9);
            args.erase(args.begin() + static_cast<long>(i));
            break;
        }
    }
    if (!file || args.size() < 2) return args;
    const auto flags = config_flags(*file);
    args.insert(args.begin() + 2, flags.begin(), flags.end());
    return args;
}

std::string relative_to(const fs::path& p, const fs::path& base) {
    if (p.empty()) return {};
    return fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(base)).generic_string();
}

void write_run(const fs::path& dir, const std::string& command, json config, json inputs = json::object()) {
    const json run = {{"command", command}, {"config", std::move(config)}, {"inputs", std::move(inputs)}};
    io::write_json(dir / "run.json", run);
    fs::create_directories(dir / "runs");
    io::write_json(dir / "runs" / (command + ".json"), run);
}

train::TrainConfig train_config(const Options& o) {
    train::TrainConfig tc;
    tc.alpha = o.alpha;
    tc.beta = o.beta;
    tc.seed = o.seed;
    tc.k_neighbors = o.k_neighbors;
    tc.pretrain_steps = tc.shared_steps = tc.unique_steps = o.steps;
    tc.deterministic = o.deterministic;
    tc.validate();
    return tc;
}

// Stored config of an earlier stage, with any flag given on this command line applied on top.
train::TrainConfig stored_config(const fs::path& file, const Options& o, const CLI::App& cmd) {
    io::require_artifact(file);
    auto tc = train::TrainConfig::from_json(io::read_json(file).at("config"));
    const auto given = [&](const std::string& flag) {
        const auto* opt = cmd.get_option_no_throw(flag);
        return opt != nullptr && opt->count() > 0;
    };
    if (given("--alpha")) tc.alpha = o.alpha;
    if (given("--beta")) tc.beta = o.beta;
    if (given("--seed")) tc.seed = o.seed;
    if (given("--k-neighbors")) tc.k_neighbors = o.k_neighbors;
    if (given("--steps")) tc.shared_steps = tc.unique_steps = o.steps;
    if (given("--deterministic")) tc.deterministic = o.deterministic;
    tc.validate();
    return tc;
}

train::Reduction bundle_reduction(const fs::path& dir, const Plate& plate, const train::TrainConfig& tc) {
    io::require_artifact(dir / "efficiency.f64");
    auto eff = io::read_f64(dir / "efficiency.f64");
    return train::reduce(plate, tc, eff);
}

void cmd_synth(const Options& o) {
    synth::SynthConfig sc;
    sc.seed = o.seed;
    sc.n_fibers = o.fibers;
    sc.n_spectrographs = o.spectrographs;
    sc.validate();
    const auto arm = arm_from_string(o.arm);
    const auto plate = synth::gen_plate(sc, default_grid(arm));
    const fs::path dir = o.out;
    io::write_plate(dir, plate);
    write_run(dir, "synth",
              {{"seed", o.seed}, {"fibers", o.fibers}, {"arm", o.arm}, {"spectrographs", o.spectrographs}});
    std::cout << "synth: " << plate.n_fibers() << " fibers x " << plate.n_pixels() << " px -> " << dir.string()
              << '\n';
}

std::vector<double> read_catalog(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError(path.string());
    std::vector<double> lines;
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        try {
            lines.push_back(std::stod(line));
        } catch (const std::exception&) {
            throw FormatError(path.string() + ": not a wavelength: " + line);
        }
    }
    return lines;
}

void cmd_reduce(const Options& o) {
    const fs::path frames = o.frames, out = o.out;
    if (!o.simulate.empty()) {
        const auto source = io::read_plate(o.simulate);
        const std::size_t n = std::min(source.n_fibers(), ccd::kMaxSimulatedFibers);
        Plate sub;
        sub.grid = source.grid;
        sub.seed = source.seed;
        sub.plan_id = source.plan_id;
        sub.fibers.assign(source.fibers.begin(), source.fibers.begin() + static_cast<long>(n));
        sub.flux = Matrix(n, source.n_pixels());
        for (std::size_t i = 0; i < n; ++i) std::ranges::copy(source.flux.row(i), sub.flux.row(i).begin());
        ccd::CcdConfig cfg;
        cfg.seed = o.seed;
        const auto sim = ccd::simulate_frames(sub, cfg);
        fs::create_directories(frames);
        ccd::write_frame(frames / "bias.smif", sim.bias);
        ccd::write_frame(frames / "flat.smif", sim.flat);
        ccd::write_frame(frames / "arc.smif", sim.arc);
        ccd::write_frame(frames / "science.smif", sim.science);
        io::write_plate(frames / "input", sub);
        io::write_matrix(frames / "injected.f64", sim.injected);
        json maps = json::array();
        for (const auto& w : sim.wavelength) maps.push_back(w.coeffs);
        io::write_json(frames / "truth.json", {{"wavelength", maps}});
    }
    const auto read = [&](const std::string& name, ccd::FrameKind kind) {
        auto f = ccd::read_frame(frames / name);
        if (f.kind != kind) {
            throw FormatError(name + ": expected a " + std::string(ccd::to_string(kind)) + " frame");
        }
        return f;
    };
    const auto bias = read("bias.smif", ccd::FrameKind::bias);
    const auto flat = read("flat.smif", ccd::FrameKind::flat);
    const auto arc = read("arc.smif", ccd::FrameKind::arc);
    const auto science = read("science.smif", ccd::FrameKind::science);
    const auto input = io::read_plate(frames / "input");
    const auto catalog = o.catalog.empty() ? ccd::default_arc_catalog(input.grid.arm) : read_catalog(o.catalog);

    const auto res = ccd::reduce_frames(bias, flat, arc, science, catalog, input.grid, input.fibers);
    auto plate = res.extraction.plate;
    plate.seed = input.seed;
    io::write_plate(out, plate);
    io::write_matrix(out / "extracted.f64", res.extraction.raw);
    json fibers = json::array();
    for (std::size_t f = 0; f < res.traces.n_fibers(); ++f) {
        const auto& s = res.extraction.solutions[f];
        fibers.push_back({{"trace", res.traces.centers[f].coeffs},
                          {"trace_rms_px", res.traces.residual_rms[f]},
                          {"wavelength", s.map.coeffs},
                          {"arc_lines", s.columns.size()},
                          {"wavelength_rms_px", s.rms_px}});
    }
    io::write_json(out / "wavecal.json", {{"fibers", fibers}, {"flagged_pixels", res.flagged.size()}});
    write_run(out, "reduce", {{"seed", o.seed}, {"simulated", !o.simulate.empty()}},
              {{"frames", relative_to(frames, out)},
               {"simulate", relative_to(o.simulate, out)},
               {"catalog", relative_to(o.catalog, out)}});
    double worst = 0.0;
    for (const auto& s : res.extraction.solutions) worst = std::max(worst, s.rms_px);
    std::cout << "reduce: " << plate.n_fibers() << " fibers, worst wavelength rms " << worst << " px, "
              << res.flagged.size() << " flagged pixels -> " << out.string() << '\n';
}

void cmd_pretrain(const Options& o) {
    const fs::path dir = o.plate;
    const auto tc = train_config(o);
    const auto plate = io::read_plate(dir);
    std::optional<std::vector<double>> eff;
    if (!o.efficiency_from.empty()) {
        io::require_artifact(fs::path(o.efficiency_from) / "efficiency.f64");
        eff = io::read_f64(fs::path(o.efficiency_from) / "efficiency.f64");
    }
    const auto red = train::reduce(plate, tc, eff);
    train::write_reduction(dir, red);
    const auto ctx = train::make_context(red, plate, tc);
    train::PlateModel model;
    model.cfg = tc;
    train::pretrain_all(model, red, ctx);
    train::save_pretrained(dir, model);
    write_run(dir, "pretrain", tc.to_json(), {{"efficiency_from", relative_to(o.efficiency_from, dir)}});
    std::cout << "pretrain: " << red.plan.segments.size() << " segments -> " << dir.string() << '\n';
}

void cmd_train(const Options& o, const CLI::App& cmd) {
    const fs::path dir = o.plate;
    const auto tc = stored_config(dir / "pretrain.json", o, cmd);
    const auto plate = io::read_plate(dir);
    const auto red = bundle_reduction(dir, plate, tc);
    auto model = train::load_pretrained(dir, tc, red.plan.segments.size());
    const auto ctx = train::make_context(red, plate, tc);
    train::train_all(model, red, ctx);
    train::save_trained(dir, model);
    write_run(dir, "train", tc.to_json());
    std::cout << "train: " << model.segments.size() << " segments -> " << dir.string() << '\n';
}

void cmd_estimate(const Options& o, const CLI::App& cmd) {
    const fs::path dir = o.plate;
    const auto tc = stored_config(dir / "model.json", o, cmd);
    const auto plate = io::read_plate(dir);
    const auto red = bundle_reduction(dir, plate, tc);
    const auto model = train::load_trained(dir, tc, red);
    const auto sky = train::estimate_sky(model, red);
    io::write_matrix(dir / "sky_estimate.f64", sky);
    write_run(dir, "estimate", tc.to_json());
    std::cout << "estimate: sky for " << sky.rows() << " fibers -> " << (dir / "sky_estimate.f64").string() << '\n';
}

// Peaks of the 3-sigma line regions of a spectrum, strongest first, at least min_sep apart.
std::vector<std::size_t> strongest_peaks(std::span<const double> spectrum, std::size_t n, std::size_t min_sep,
                                         std::size_t half_width) {
    const auto peaks = eval::detect_lines_3sigma(spectrum);
    const auto base = running_median(spectrum, 51);
    std::vector<std::size_t> order(peaks.begin(), peaks.end());
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return spectrum[a] - base[a] > spectrum[b] - base[b]; });
    std::vector<std::size_t> chosen;
    for (auto p : order) {
        if (chosen.size() == n) break;
        if (p < half_width || p + half_width >= spectrum.size()) continue;
        const bool clear = std::ranges::all_of(chosen, [&](std::size_t c) { return (p > c ? p - c : c - p) >= min_sep; });
        if (clear) chosen.push_back(p);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

void cmd_eval(const Options& o, const CLI::App& cmd) {
    const fs::path dir = o.plate;
    io::require_artifact(dir / "sky_estimate.f64");
    const auto tc = stored_config(dir / "model.json", o, cmd);
    const auto plate = io::read_plate(dir);
    const auto red = bundle_reduction(dir, plate, tc);
    const auto sky = io::read_matrix(dir / "sky_estimate.f64", plate.n_fibers(), plate.n_pixels());
    const auto& held = red.split.heldout_sky;
    if (held.empty()) throw EmptyInputError("no held-out sky fibers to evaluate on");
    const auto base = eval::supersky_baseline(red.normalized, red.split.train_sky);
    const std::size_t np = plate.n_pixels();

    auto baseline_row = [&](std::size_t i) {
        std::vector<double> b(np);
        for (std::size_t j = 0; j < np; ++j) b[j] = base[j] * red.efficiency[i];
        return b;
    };

    eval::EvalReport report;
    report.plan_id = plate.plan_id;
    std::map<int, std::vector<std::size_t>> by_spec;
    for (auto i : held) by_spec[plate.fibers[i].spectrograph].push_back(i);
    for (const auto& [spec, fibers] : by_spec) {
        std::vector<double> obs, est_base, est_smi;
        for (auto i : fibers) {
            const auto b = baseline_row(i);
            obs.insert(obs.end(), plate.flux.row(i).begin(), plate.flux.row(i).end());
            est_base.insert(est_base.end(), b.begin(), b.end());
            est_smi.insert(est_smi.end(), sky.row(i).begin(), sky.row(i).end());
        }
        const auto label = eval::format_spec(spec);
        for (const auto& [method, est] : {std::pair{"baseline", &est_base}, std::pair{"smi", &est_smi}}) {
            report.rows.push_back({label, method, eval::residual_stats(*est, obs)});
            std::vector<double> e(obs.size());
            for (std::size_t k = 0; k < e.size(); ++k) e[k] = (*est)[k] - obs[k];
            report.histograms.emplace_back(std::string(method) + "_" + label, eval::residual_histogram(e));
        }
    }

    std::vector<double> median_sky(np);
    for (std::size_t j = 0; j < np; ++j) {
        std::vector<double> v;
        for (auto i : held) v.push_back(red.normalized.flux(i, j));
        median_sky[j] = median(std::move(v));
    }
    constexpr std::size_t kHalfWidth = 7;
    for (auto c : strongest_peaks(median_sky, 5, 15, kHalfWidth)) {
        eval::LineRow row{c, kHalfWidth, {}};
        std::vector<double> obs, est_base, est_smi;
        for (auto i : held) {
            const auto b = baseline_row(i);
            for (std::size_t j = c - kHalfWidth; j <= c + kHalfWidth; ++j) {
                obs.push_back(plate.flux(i, j));
                est_base.push_back(b[j]);
                est_smi.push_back(sky(i, j));
            }
        }
        row.per_method = {{"baseline", eval::residual_stats(est_base, obs)}, {"smi", eval::residual_stats(est_smi, obs)}};
        report.lines.push_back(std::move(row));
    }

    if (fs::exists(dir / "shared_sky.f64")) {
        const auto shared = io::read_f64(dir / "shared_sky.f64");
        const std::size_t a = held.front(), b = held.size() > 1 ? held[1] : held.front();
        for (std::size_t s = 0; s < red.plan.segments.size(); ++s) {
            char key[16];
            std::snprintf(key, sizeof key, "seg%02zu", s);
            report.overlays.emplace_back(key, eval::shared_inspection(shared, red.normalized.flux.row(a),
                                                                      red.normalized.flux.row(b),
                                                                      red.plan.segments[s]));
        }
    }
    eval::write_report(dir, report);
    write_run(dir, "eval", tc.to_json());
    for (const auto& r : report.rows) {
        std::cout << r.spec << ' ' << r.method << " bias " << r.stats.bias << " mae " << r.stats.mae << " rmse "
                  << r.stats.rmse << '\n';
    }
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

void cmd_report(const Options& o) {
    const fs::path dir = o.plate;
    io::require_artifact(dir / "report.csv");
    std::ifstream in(dir / "report.csv");
    std::string line;
    std::getline(in, line);
    if (trim(line) != "planid,spec,method,bias,mae,rmse") throw FormatError("report.csv: unexpected header");
    std::map<std::string, std::map<std::string, eval::ResidualStats>> rows;
    while (std::getline(in, line)) {
        const auto cells = split_csv(trim(line));
        if (cells.empty()) continue;
        if (cells.size() != 6) throw FormatError("report.csv: expected 6 columns: " + line);
        try {
            rows[cells[1]][cells[2]] = {std::stod(cells[3]), std::stod(cells[4]), std::stod(cells[5])};
        } catch (const std::exception&) {
            throw FormatError("report.csv: bad number: " + line);
        }
    }
    std::ostringstream table;
    table << "spec | baseline bias | baseline rmse | smi bias | smi rmse\n";
    for (const auto& [spec, methods] : rows) {
        if (!methods.contains("baseline") || !methods.contains("smi")) {
            throw FormatError("report.csv: spectrograph " + spec + " lacks a baseline or smi row");
        }
        table << eval::render_table_row(spec, methods.at("baseline"), methods.at("smi")) << '\n';
    }
    io::write_text(dir / "table.txt", table.str());
    write_run(dir, "report", json::object());
    std::cout << table.str();
}

void add_training_flags(CLI::App& cmd, Options& o) {
    cmd.add_option("--seed", o.seed, "Training seed");
    cmd.add_option("--alpha", o.alpha, "Weight of the L1 term between shared representations");
    cmd.add_option("--beta", o.beta, "Weight of the redundancy penalty between unique representations");
    cmd.add_option("--k-neighbors", o.k_neighbors, "Partners per anchor fiber");
    cmd.add_option("--steps", o.steps, "Optimizer steps per training stage");
    cmd.add_flag("--deterministic", o.deterministic, "Single-threaded, bitwise reproducible run");
}

}  // namespace

int run(const std::vector<std::string>& raw_args) {
    Options o;
    CLI::App app{"Per-fiber sky background estimation by mutual information", "smi"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    auto* synth = app.add_subcommand("synth", "Generate a synthetic plate bundle");
    synth->add_option("--out", o.out, "Bundle directory")->required();
    synth->add_option("--seed", o.seed, "Generator seed");
    synth->add_option("--fibers", o.fibers, "Number of fibers");
    synth->add_option("--arm", o.arm, "Spectrograph arm")->check(CLI::IsMember({"blue", "red"}));
    synth->add_option("--spectrographs", o.spectrographs, "Spectrographs sharing the plate");

    auto* reduce = app.add_subcommand("reduce", "Reduce CCD frames to a plate bundle");
    reduce->add_option("--frames", o.frames, "Directory with bias/flat/arc/science .smif frames and input/")
        ->required();
    reduce->add_option("--out", o.out, "Output bundle directory")->required();
    reduce->add_option("--simulate", o.simulate, "Simulate frames from the first 16 fibers of this bundle first");
    reduce->add_option("--seed", o.seed, "Frame simulation seed");
    reduce->add_option("--catalog", o.catalog, "Arc line list, one wavelength per line");

    auto* pretrain = app.add_subcommand("pretrain", "Preprocess a bundle and pretrain the encoders");
    pretrain->add_option("--plate", o.plate, "Bundle directory")->required();
    pretrain->add_option("--efficiency-from", o.efficiency_from, "Bundle whose efficiency.f64 to reuse");
    add_training_flags(*pretrain, o);

    auto* train = app.add_subcommand("train", "Run both training stages from the pretrained encoders");
    train->add_option("--plate", o.plate, "Bundle directory")->required();
    add_training_flags(*train, o);

    auto* estimate = app.add_subcommand("estimate", "Write sky_estimate.f64 for every fiber");
    estimate->add_option("--plate", o.plate, "Bundle directory")->required();
    estimate->add_flag("--deterministic", o.deterministic, "Single-threaded, bitwise reproducible run");

    auto* evaluate = app.add_subcommand("eval", "Compare the estimate with the super-sky baseline");
    evaluate->add_option("--plate", o.plate, "Bundle directory")->required();
    evaluate->add_flag("--deterministic", o.deterministic, "Single-threaded, bitwise reproducible run");

    auto* report = app.add_subcommand("report", "Render report.csv as a table");
    report->add_option("--plate", o.plate, "Bundle directory")->required();

    try {
        auto args = expand_config(raw_args);
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    } catch (const MissingArtifactError& e) {
        std::cerr << "smi: " << e.what() << '\n';
        return kExitMissing;
    } catch (const Error& e) {
        std::cerr << "smi: " << e.what() << '\n';
        return kExitValidation;
    }

    try {
        if (synth->parsed()) cmd_synth(o);
        if (reduce->parsed()) cmd_reduce(o);
        if (pretrain->parsed()) cmd_pretrain(o);
        if (train->parsed()) cmd_train(o, *train);
        if (estimate->parsed()) cmd_estimate(o, *estimate);
        if (evaluate->parsed()) cmd_eval(o, *evaluate);
        if (report->parsed()) cmd_report(o);
    } catch (const MissingArtifactError& e) {
        std::cerr << "smi: " << e.what() << '\n';
        return kExitMissing;
    } catch (const InitializationError& e) {
        std::cerr << "smi: " << e.what() << '\n';
        return kExitMissing;
    } catch (const UntrainedSegmentError& e) {
        std::cerr << "smi: " << e.what() << '\n';
        return kExitMissing;
    } catch (const Error& e) {
        std::cerr << "smi: " << e.what() << '\n';
        return kExitValidation;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "smi: malformed JSON artifact: " << e.what() << '\n';
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "smi: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace smi::cli
