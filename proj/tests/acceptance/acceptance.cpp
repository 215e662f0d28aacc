// Acceptance run: one PASS/FAIL line per criterion, exit 0 only if all pass.

#include "hstream/analysis.hpp"
#include "hstream/kernel_model.hpp"
#include "hstream/linear_attention.hpp"
#include "hstream/local_attention.hpp"
#include "hstream/stream.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace hstream;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

Outcome recursion_sum() {
    const auto start = std::chrono::steady_clock::now();
    const auto r = analysis::verify_recursion_sum(1000, 101, 1e-10);
    const double secs = seconds_since(start);
    return {r.pass && r.samples >= 1000 && secs < 10.0,
            "instances=1000 max_abs_error=" + fmt("%.3g", r.details.at("max_abs_error")) + " runtime=" +
                fmt("%.2fs", secs)};
}

Outcome contamination() {
    const auto start = std::chrono::steady_clock::now();
    const auto r = analysis::verify_contamination(1000, {4, 4, 1}, 102);
    const double secs = seconds_since(start);
    const bool identical = r.details.at("bit_identical") == 1.0;
    return {r.pass && identical && secs < 5.0,
            "T=1000 bit_identical=" + std::string(identical ? "yes" : "no") + " runtime=" + fmt("%.2fs", secs)};
}

Outcome initial_decay() {
    bool ok = analysis::decay_threshold_step(0.5) == 20;
    std::string detail = "threshold(0.5)=" + std::to_string(analysis::decay_threshold_step(0.5));
    for (double g : {0.5, 0.9, 0.99}) {
        const auto r = analysis::verify_initial_decay(5000, {4, 4, 1}, g, 103);
        ok = ok && r.pass && r.samples > 0;
        detail += " g=" + fmt("%g", g) + ":max_violation=" + fmt("%.3g", r.max_violation) +
                  ",below_at=" + fmt("%.0f", r.details.at("threshold_step_measured")) + "/" +
                  fmt("%.0f", r.details.at("threshold_step_closed_form"));
    }
    return {ok, detail};
}

Outcome state_bound() {
    const auto start = std::chrono::steady_clock::now();
    const auto r = analysis::verify_state_bound(100000, 1.0, 1.0, 0.9, 104);
    const double secs = seconds_since(start);
    const double max_norm = r.details.at("max_state_norm");
    const double slope = r.details.at("control_slope");
    return {r.pass && max_norm <= 10.0 && slope > 0.0 && slope <= 1.0 && secs < 60.0,
            "steps=1e5 max_norm=" + fmt("%.4f", max_norm) + " control_slope=" + fmt("%.4f", slope) +
                " runtime=" + fmt("%.2fs", secs)};
}

Outcome dilution() {
    const local::DilutionConfig cfg{4, 1.0};
    local::DilutionReport rows;
    const auto r = analysis::verify_dilution_bound(1000, cfg, 5000, 105, &rows);
    const double crossing = local::dilution_crossing(cfg);
    bool beyond_ok = true;
    for (const auto& row : rows.rows)
        if (static_cast<double>(row.t) > crossing && !(row.measured_mass < 0.5)) beyond_ok = false;
    const double b100 = local::dilution_bound(100, cfg);
    const bool example_ok = std::abs(b100 - 0.2354) < 1e-4 && std::abs(crossing - 33.56) < 1e-2;
    return {r.pass && rows.violations() == 0 && rows.rows.size() == 4996 && beyond_ok && example_ok,
            "t=5..5000 max_excess=" + fmt("%.3g", rows.max_violation) + " crossing=" + fmt("%.4f", crossing) +
                " bound(100)=" + fmt("%.4f", b100)};
}

Outcome horizon() {
    const double grid[] = {0.3, 0.5, 0.9, 0.99};
    const auto r = analysis::verify_horizon(grid, 1e-3);
    return {r.pass, "max_weight_error=" + fmt("%.3g", r.details.at("max_weight_error"))};
}

Outcome ttt() {
    const auto r = analysis::verify_ttt_equivalence(1000, {4, 4, 1}, 107);
    return {r.pass && r.samples >= 1000,
            "trials=1000 max_rel_error=" + fmt("%.3g", r.details.at("max_relative_error"))};
}

Outcome gradients() {
    const auto r = analysis::verify_gradients(100, 108, 1e-5, 1e-5, {4, 3, 3, 1}, 5);

    // Fault injection: one corrupted entry must be caught.
    Rng rng(1108);
    const gla::Dims dims{4, 3, 3, 1};
    auto params = gla::init_params(dims, rng);
    params.value_rule = gla::ValueRule::DeltaRule;
    const gla::TokenSequence tokens{random_uniform(rng, 4, 5, -1, 1)};
    const auto s0 = gla::RecurrentState::zeros_like(dims);
    const Matrix grads = random_uniform(rng, 3, 5, -1, 1);
    auto analytic = gla::backward(tokens, s0, params, grads);
    analytic.w_v(1, 1) *= 1.01;
    analytic.w_v(1, 1) += 1e-3;
    const auto faulty = gla::finite_diff_check(tokens, s0, params, grads, analytic, 1e-5, 1e-5);
    return {r.pass && r.samples >= 100 && !faulty.pass,
            "instances=100 max_rel_error=" + fmt("%.3g", r.details.at("max_rel_error")) +
                " injected_fault_detected=" + (faulty.pass ? "no" : "yes")};
}

Outcome chunking() {
    const auto r = analysis::verify_chunking({{64}, {21, 21, 21, 1}, {10, 10, 10, 10, 10, 10, 4}}, 64, 109, 1e-12);
    return {r.pass, "max_abs_difference=" + fmt("%.3g", r.details.at("max_abs_difference"))};
}

Outcome rope() {
    const auto r = analysis::verify_rope(1000, 12, 110);
    return {r.pass && r.details.at("special_tokens_unrotated") == 1.0,
            "isometry=" + fmt("%.3g", r.details.at("max_isometry_error")) +
                " relative_offset=" + fmt("%.3g", r.details.at("max_relative_offset_error"))};
}

Outcome scaling() {
    stream::ScenarioConfig cfg;
    cfg.length = 10000;
    cfg.timing = true;
    cfg.seed = 111;
    const auto run = stream::run_scenario(cfg);
    const bool bytes_const = run.summary.max_state_bytes == run.summary.min_state_bytes;
    const double r2 = run.summary.time_fit ? run.summary.time_fit->r_squared : 0.0;

    cfg.timing = false;
    std::vector<kernel::KernelShape> shapes;
    for (const auto& name : stream::kShapeNames) shapes.push_back(stream::make_shape(name, cfg));
    const auto cmp = stream::compare_kernels(cfg, shapes);
    std::string checks;
    for (const auto& c : cmp.checks) checks += " " + c.name + "=" + fmt("%.4g", c.value) + (c.pass ? "" : "(FAIL)");
    return {bytes_const && r2 >= 0.98 && cmp.pass() && cmp.checks.size() == 3,
            "T=10000 state_bytes=" + std::to_string(run.summary.max_state_bytes) +
                (bytes_const ? " constant" : " varying") + " time_R2=" + fmt("%.5f", r2) + checks};
}

Outcome ridge() {
    // Mixed retention: channel biases spread from short to long horizons.
    stream::ScenarioConfig cfg;
    cfg.length = 2000;
    cfg.seed = 112;
    const auto planted = stream::generate_stream(cfg);
    auto params = stream::scenario_params(cfg);
    const auto kc = static_cast<Eigen::Index>(params.dims.key_channels());
    params.b_gamma = Vector::LinSpaced(kc, -1.0, 7.0);
    const auto spectrum = analysis::extract_retention_spectrum(params, planted.tokens.x);
    const auto bands = spectrum.bands(0);

    Matrix x(static_cast<Eigen::Index>(cfg.length), kc);
    auto state = gla::RecurrentState::zeros_like(params.dims);
    Matrix out(static_cast<Eigen::Index>(params.dims.value_channels()), 1);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        gla::process_tokens<double>(planted.tokens.x.col(t), state, params, out);
        x.row(t) = analysis::state_features(state).transpose();
    }

    Rng rng(1112);
    const Vector w_all = random_uniform(rng, kc, 1, 0.5, 1.5);
    Vector w_long = Vector::Zero(kc);
    std::size_t long_count = 0, other_count = 0;
    for (Eigen::Index c = 0; c < kc; ++c) {
        if (bands[static_cast<std::size_t>(c)] == analysis::RetentionBand::Long) {
            w_long(c) = w_all(c);
            ++long_count;
        } else {
            ++other_count;
        }
    }
    const auto full = analysis::ridge_probe(x, x * w_all + Vector::Constant(x.rows(), 0.3), 1e-8, bands, {0.7, 1});
    const auto lng = analysis::ridge_probe(x, x * w_long, 1e-8, bands, {0.7, 2});
    return {long_count > 0 && other_count > 0 && full.r_squared >= 0.999 && lng.band_attribution.long_band > 0.8,
            "channels long/other=" + std::to_string(long_count) + "/" + std::to_string(other_count) +
                " r2=" + fmt("%.6f", full.r_squared) + " long_band_attribution=" +
                fmt("%.4f", lng.band_attribution.long_band)};
}

Outcome determinism() {
    const auto root = std::filesystem::temp_directory_path() / "hstream_acceptance_det";
    std::filesystem::remove_all(root);
    std::string text[2];
    for (int i = 0; i < 2; ++i) {
        stream::ScenarioConfig cfg;
        cfg.length = 2000;
        cfg.seed = 113;
        cfg.value_rule = gla::ValueRule::DeltaRule;
        cfg.out_dir = root / std::to_string(i);
        stream::export_scenario(cfg, stream::generate_stream(cfg), stream::run_scenario(cfg));
        std::ifstream in(cfg.out_dir / "records.csv", std::ios::binary);
        std::ostringstream s;
        s << in.rdbuf();
        text[i] = s.str();
    }
    std::filesystem::remove_all(root);
    const bool same = !text[0].empty() && text[0] == text[1];
    return {same, "records.csv bytes=" + std::to_string(text[0].size()) + (same ? " identical" : " differ")};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"recursion_sum_equivalence", recursion_sum},
        {"zero_forgetting_contamination", contamination},
        {"initial_state_decay", initial_decay},
        {"bounded_state_norm", state_bound},
        {"attention_dilution", dilution},
        {"memory_horizon", horizon},
        {"ttt_equivalence", ttt},
        {"gradient_check", gradients},
        {"chunking_invariance", chunking},
        {"rope_properties", rope},
        {"scaling", scaling},
        {"ridge_probe", ridge},
        {"determinism", determinism},
    };
    int failed = 0;
    int index = 0;
    for (const auto& [name, check] : criteria) {
        ++index;
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failed;
        std::cout << (o.pass ? "PASS " : "FAIL ") << index << " " << name << ": " << o.detail << std::endl;
    }
    std::cout << (failed == 0 ? "all criteria pass" : std::to_string(failed) + " criteria failed") << std::endl;
    return failed == 0 ? 0 : 1;
}
