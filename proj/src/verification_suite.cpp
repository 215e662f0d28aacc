#include "hstream/stream.hpp"

#include "json.hpp"

#include <fstream>
#include <sstream>

namespace hstream::stream {

namespace {

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << text;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

// Margins of very long runs would dominate the report files.
constexpr std::size_t kMaxExportedMargins = 10000;

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) lines.push_back(line);
    return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string field; std::getline(ss, field, ',');) out.push_back(field);
    return out;
}

}  // namespace

SuiteResult run_verification_suite(const ScenarioConfig& cfg, const SuiteOptions& options) {
    cfg.validate();
    ensure_dir(cfg.out_dir);
    const std::uint64_t seed = cfg.seed;
    const analysis::StateDims dims{cfg.d_k, cfg.d_v, cfg.heads};

    SuiteResult suite;
    auto add = [&](analysis::BoundReport report) { suite.reports.push_back(std::move(report)); };

    add(analysis::verify_recursion_sum(options.trials, seed));
    add(analysis::verify_contamination(1000, dims, seed + 1));
    add(analysis::verify_contamination(1000, dims, seed + 2, 0.9));
    for (double g : {0.5, 0.9, 0.99}) {
        auto r = analysis::verify_initial_decay(options.decay_steps, dims, g, seed + 3);
        char label[16];
        std::snprintf(label, sizeof(label), "_%g", g);
        r.name += label;
        add(std::move(r));
    }
    analysis::StateBoundOptions bound_opts;
    bound_opts.dynamics_gamma_override = cfg.gamma_override;
    add(analysis::verify_state_bound(options.state_bound_steps, 1.0, 1.0, 0.9, seed + 4, bound_opts));
    const double grid[] = {0.3, 0.5, 0.9, 0.99};
    add(analysis::verify_horizon(grid, 1e-3));
    add(analysis::verify_ttt_equivalence(options.trials, dims, seed + 5));
    add(analysis::verify_gradients(options.gradient_instances, seed + 6));

    std::vector<std::vector<std::size_t>> chunkings = {{64}, {21, 21, 21, 1}, {10, 10, 10, 10, 10, 10, 4}};
    std::vector<std::size_t> configured;
    for (std::size_t left = 64; left > 0; left -= std::min(left, cfg.chunk)) configured.push_back(std::min(left, cfg.chunk));
    chunkings.push_back(configured);
    add(analysis::verify_chunking(chunkings, 64, seed + 7));
    add(analysis::verify_rope(options.trials, 12, seed + 8));

    local::DilutionReport dilution;
    const local::DilutionConfig dcfg{cfg.w_geo, cfg.score_bound};
    add(analysis::verify_dilution_bound(options.trials, dcfg, std::max(options.dilution_t_max, cfg.w_geo + 1),
                                        seed + 9, &dilution));

    for (const auto& r : suite.reports) {
        const std::string file = r.name + ".json";
        write_text(cfg.out_dir / file, r.to_json(r.per_step_margin.size() <= kMaxExportedMargins) + "\n");
        suite.entries.push_back({r.name, file, r.pass});
    }
    {
        std::ostringstream csv;
        local::write_dilution_csv(csv, dilution);
        write_text(cfg.out_dir / "dilution.csv", csv.str());
    }
    {
        const PlantedStream stream = generate_stream(cfg);
        std::ostringstream csv;
        analysis::extract_retention_spectrum(scenario_params(cfg), stream.tokens.x).write_csv(csv);
        write_text(cfg.out_dir / "spectrum.csv", csv.str());
    }

    suite.all_pass = std::all_of(suite.entries.begin(), suite.entries.end(), [](const SuiteEntry& e) { return e.pass; });
    nlohmann::ordered_json manifest;
    manifest["all_pass"] = suite.all_pass;
    manifest["seed"] = seed;
    if (cfg.gamma_override) manifest["gamma_override"] = *cfg.gamma_override;
    manifest["reports"] = nlohmann::ordered_json::array();
    for (const auto& e : suite.entries)
        manifest["reports"].push_back({{"name", e.name}, {"file", e.file}, {"pass", e.pass}});
    manifest["artifacts"] = {"dilution.csv", "spectrum.csv"};
    write_text(cfg.out_dir / "manifest.json", manifest.dump(2) + "\n");
    return suite;
}

ProbeRun run_probe(const std::filesystem::path& dir, double lambda, std::uint64_t seed) {
    std::size_t heads = 1;
    {
        const auto path = dir / "summary.json";
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open " + path.string());
        const auto j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.contains("heads")) throw std::runtime_error("malformed " + path.string());
        heads = j["heads"].get<std::size_t>();
    }

    std::vector<Vector> rows;
    {
        const auto path = dir / "states.bin";
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open " + path.string());
        gla::StateSnapshot snap;
        while (gla::read_snapshot(in, snap)) rows.push_back(analysis::state_features(snap.to_state(heads)));
    }

    std::vector<double> targets;
    {
        const auto lines = read_lines(dir / "targets.csv");
        for (std::size_t i = 1; i < lines.size(); ++i) {
            const auto f = split_csv(lines[i]);
            if (f.size() != 2) throw std::runtime_error("malformed targets.csv line " + std::to_string(i + 1));
            targets.push_back(std::stod(f[1]));
        }
    }
    if (targets.size() != rows.size())
        throw std::runtime_error("states.bin and targets.csv hold different numbers of rows");
    if (rows.empty()) throw std::runtime_error("no state snapshots in " + dir.string());

    std::vector<analysis::RetentionBand> bands;
    {
        const auto lines = read_lines(dir / "spectrum.csv");
        for (std::size_t i = 1; i < lines.size(); ++i) {
            const auto f = split_csv(lines[i]);
            if (f.size() != 4) throw std::runtime_error("malformed spectrum.csv line " + std::to_string(i + 1));
            if (f[0] == "0") bands.push_back(analysis::band_of(std::stod(f[3])));
        }
    }

    const auto width = static_cast<Eigen::Index>(rows.front().size());
    if (bands.size() != static_cast<std::size_t>(width))
        throw std::runtime_error("spectrum.csv channel count does not match the state features");
    Matrix x(static_cast<Eigen::Index>(rows.size()), width);
    for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    const Vector y = Eigen::Map<const Vector>(targets.data(), static_cast<Eigen::Index>(targets.size()));

    ProbeRun run;
    run.rows = rows.size();
    run.features = static_cast<std::size_t>(width);
    run.result = analysis::ridge_probe(x, y, lambda, bands, {0.7, seed});

    nlohmann::ordered_json j;
    j["lambda"] = lambda;
    j["rows"] = run.rows;
    j["features"] = run.features;
    j["train_rows"] = run.result.train_rows;
    j["test_rows"] = run.result.test_rows;
    j["r_squared"] = run.result.r_squared;
    j["intercept"] = run.result.intercept;
    j["weights"] = std::vector<double>(run.result.weights.data(), run.result.weights.data() + run.result.weights.size());
    j["band_attribution"] = {{"short", run.result.band_attribution.short_band},
                             {"medium", run.result.band_attribution.medium_band},
                             {"long", run.result.band_attribution.long_band}};
    write_text(dir / "probe.json", j.dump(2) + "\n");
    return run;
}

}  // namespace hstream::stream
