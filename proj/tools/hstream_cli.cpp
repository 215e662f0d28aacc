// hstream_cli: synthetic stream scenarios, kernel comparisons, the
// verification suite, and ridge probing of exported states.
//
// Exit codes: 0 success / all checks pass, 1 a check failed or a run could
// not complete, 2 usage error.

#include "hstream/stream.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>

namespace {

using namespace hstream;

struct Options {
    stream::ScenarioConfig cfg;
    std::string out = "hstream_out";
    std::string precision = "f64";
    std::string value_rule = "plain";
    std::string feature_map = "identity";
    std::string shape;
    double gamma_override = 0.0;
    bool no_snapshots = false;
    double lambda = 1e-3;
};

void add_scenario_options(CLI::App& app, Options& o) {
    auto& c = o.cfg;
    app.add_option("--seed", c.seed, "Random seed")->capture_default_str();
    app.add_option("--length", c.length, "Stream length T")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--chunk", c.chunk, "Chunk size")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--window", c.window, "Local attention window W")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--out", o.out, "Output directory")->capture_default_str();
    app.add_option("--precision", o.precision, "Arithmetic precision")
        ->capture_default_str()
        ->check(CLI::IsMember({"f64", "f32"}));
    app.add_option("--shape", o.shape, "Influence pattern")->check(CLI::IsMember(stream::kShapeNames));
    app.add_option("--d-model", c.d_model, "Token width")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--d-k", c.d_k, "Key width per head")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--d-v", c.d_v, "Value width per head")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--heads", c.heads, "Number of heads")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--w-geo", c.w_geo, "Planted co-visibility budget")->capture_default_str();
    app.add_option("--score-bound", c.score_bound, "Score bound M")->capture_default_str();
    app.add_option("--gate-bias", c.gate_bias, "Initial gate bias")->capture_default_str();
    app.add_option("--gate-weight-range", c.gate_weight_range, "Gate weight init range")->capture_default_str();
    app.add_option("--value-rule", o.value_rule, "Value rule")
        ->capture_default_str()
        ->check(CLI::IsMember({"plain", "delta"}));
    app.add_option("--feature-map", o.feature_map, "Key feature map")
        ->capture_default_str()
        ->check(CLI::IsMember({"identity", "shifted_exp"}));
    app.add_option("--eta", c.eta, "Delta-rule step size")->capture_default_str();
    app.add_option("--refresh-period", c.refresh_period, "Refresh pattern period")->capture_default_str();
    app.add_option("--sink-position", c.sink_position, "Sink step (1-based)")->capture_default_str();
    app.add_option("--sink-mass", c.sink_mass, "Sink mass")->capture_default_str();
    app.add_flag("--timing", c.timing, "Record per-step wall time (records.csv is then not reproducible)");
    app.add_flag("--no-snapshots", o.no_snapshots, "Skip states.bin / targets.csv / spectrum.csv");
    app.add_option("--debug-gamma-override", o.gamma_override, "Debug: force every gate to this value");
    app.add_option("--lambda", o.lambda, "Ridge penalty for probe")->capture_default_str();
}

void finish_config(CLI::App& app, Options& o) {
    auto& c = o.cfg;
    c.out_dir = o.out;
    c.precision = stream::parse_precision(o.precision);
    c.value_rule = o.value_rule == "delta" ? gla::ValueRule::DeltaRule : gla::ValueRule::Plain;
    c.feature_map = o.feature_map == "shifted_exp" ? gla::FeatureMap::ShiftedExp : gla::FeatureMap::Identity;
    if (!o.shape.empty()) c.shape = o.shape;
    if (app.count("--debug-gamma-override") > 0) c.gamma_override = o.gamma_override;
    c.write_snapshots = !o.no_snapshots;
    c.validate();
}

int cmd_run(const stream::ScenarioConfig& cfg) {
    const auto planted = stream::generate_stream(cfg);
    const auto result = stream::run_scenario(cfg);
    stream::export_scenario(cfg, planted, result);
    const auto& s = result.summary;
    std::cout << "run: " << s.steps << " steps, shape " << s.shape << ", state bytes " << s.min_state_bytes << ".."
              << s.max_state_bytes << ", final ||S||_F " << format_double(s.final_state_fro) << "\n";
    if (s.time_fit)
        std::cout << "run: cumulative time fit slope " << format_double(s.time_fit->slope) << " ns/step, R^2 "
                  << format_double(s.time_fit->r_squared) << "\n";
    std::cout << "run: wrote " << cfg.out_dir.string() << "\n";
    return 0;
}

int cmd_verify(const stream::ScenarioConfig& cfg) {
    const auto suite = stream::run_verification_suite(cfg);
    for (const auto& e : suite.entries) std::cout << (e.pass ? "PASS " : "FAIL ") << e.name << "\n";
    std::cout << "verify: " << (suite.all_pass ? "all checks pass" : "some checks failed") << ", wrote "
              << cfg.out_dir.string() << "\n";
    return suite.all_pass ? 0 : 1;
}

int cmd_kernels(const stream::ScenarioConfig& cfg, const std::string& only) {
    std::vector<kernel::KernelShape> shapes;
    for (const auto& name : stream::kShapeNames)
        if (only.empty() || only == name) shapes.push_back(stream::make_shape(name, cfg));
    const auto cmp = stream::compare_kernels(cfg, shapes);
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + cfg.out_dir.string());
    {
        std::ofstream out(cfg.out_dir / "kernels.csv");
        if (!out) throw std::runtime_error("cannot write " + (cfg.out_dir / "kernels.csv").string());
        cmp.write_csv(out);
    }
    {
        std::ofstream out(cfg.out_dir / "kernels_summary.json");
        if (!out) throw std::runtime_error("cannot write " + (cfg.out_dir / "kernels_summary.json").string());
        out << cmp.summary_json() << "\n";
    }
    for (const auto& c : cmp.checks)
        std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " value " << format_double(c.value) << " threshold "
                  << format_double(c.threshold) << "\n";
    return cmp.pass() ? 0 : 1;
}

int cmd_probe(const Options& o) {
    const auto run = stream::run_probe(o.cfg.out_dir, o.lambda, o.cfg.seed);
    const auto& b = run.result.band_attribution;
    std::cout << "probe: " << run.rows << " rows x " << run.features << " features, r^2 "
              << format_double(run.result.r_squared) << ", bands short/medium/long " << format_double(b.short_band)
              << " / " << format_double(b.medium_band) << " / " << format_double(b.long_band) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Streaming gated linear attention: scenarios, kernel comparisons and verification"};
    app.set_config("--config", "", "Flat key = value config file; command-line flags take precedence");
    app.require_subcommand(1);
    app.fallthrough();

    Options o;
    add_scenario_options(app, o);
    auto* run = app.add_subcommand("run", "Run one scenario and export records.csv / summary.json");
    auto* verify = app.add_subcommand("verify", "Run the verification suite");
    auto* kernels = app.add_subcommand("kernels", "Compare influence patterns on planted memory pairs");
    auto* probe = app.add_subcommand("probe", "Ridge-probe the states exported by `run` in --out");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        finish_config(app, o);
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (run->parsed()) return cmd_run(o.cfg);
        if (verify->parsed()) return cmd_verify(o.cfg);
        if (kernels->parsed()) return cmd_kernels(o.cfg, o.shape);
        if (probe->parsed()) return cmd_probe(o);
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
