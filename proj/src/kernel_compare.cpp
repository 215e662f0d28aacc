#include "hstream/stream.hpp"

#include "influence_memory.hpp"

#include "json.hpp"

#include <algorithm>
#include <ostream>

namespace hstream::stream {

bool KernelComparison::pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const KernelCheck& c) { return c.pass; });
}

void KernelComparison::write_csv(std::ostream& out) const {
    out << "shape,t,drift,state_fro,state_bytes\n";
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.drift.size(); ++i)
            out << s.shape << ',' << i + 1 << ',' << format_double(s.drift[i]) << ','
                << format_double(s.state_fro[i]) << ',' << s.state_bytes[i] << '\n';
}

std::string KernelComparison::summary_json() const {
    nlohmann::ordered_json j;
    j["shapes"] = nlohmann::ordered_json::array();
    for (const auto& s : series) {
        nlohmann::ordered_json e;
        e["shape"] = s.shape;
        e["steps"] = s.drift.size();
        e["max_drift"] = s.drift.empty() ? 0.0 : *std::max_element(s.drift.begin(), s.drift.end());
        e["final_state_fro"] = s.state_fro.empty() ? 0.0 : s.state_fro.back();
        e["max_state_bytes"] = s.state_bytes.empty() ? 0 : *std::max_element(s.state_bytes.begin(), s.state_bytes.end());
        e["min_state_bytes"] = s.state_bytes.empty() ? 0 : *std::min_element(s.state_bytes.begin(), s.state_bytes.end());
        j["shapes"].push_back(e);
    }
    j["checks"] = nlohmann::ordered_json::array();
    for (const auto& c : checks)
        j["checks"].push_back({{"name", c.name}, {"value", c.value}, {"threshold", c.threshold}, {"pass", c.pass}});
    j["pass"] = pass();
    return j.dump(2);
}

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
    return m;
}

Vector exponential_gates(const kernel::ExponentialChannelwise& shape, const ScenarioConfig& cfg,
                         const gla::GlaParams& params, const Vector& x) {
    const auto kc = static_cast<Eigen::Index>(cfg.d_k * cfg.heads);
    if (cfg.gamma_override) return Vector::Constant(kc, *cfg.gamma_override);
    if (shape.gammas.empty()) return gla::gate(x, params);
    if (shape.gammas.size() == 1) return Vector::Constant(kc, shape.gammas.front());
    require(shape.gammas.size() == static_cast<std::size_t>(kc),
            "compare_kernels: exponential gammas must have 1 or heads*d_k entries");
    return Eigen::Map<const Vector>(shape.gammas.data(), kc);
}

KernelSeries run_shape(const ScenarioConfig& cfg, const PlantedStream& stream, const gla::GlaParams& params,
                       const kernel::KernelShape& shape) {
    const std::size_t n = stream.length();
    detail::InfluenceMemory<double> memory(shape, cfg.d_k, cfg.d_v, cfg.heads);
    KernelSeries s;
    s.shape = kernel::shape_name(shape);
    const auto* exponential = std::get_if<kernel::ExponentialChannelwise>(&shape);
    double gamma_sup = 0.0, key_sup = 0.0, value_sup = 0.0;
    const Vector unused = Vector::Ones(static_cast<Eigen::Index>(cfg.d_k * cfg.heads));

    for (std::size_t t = 1; t <= n; ++t) {
        const auto col = static_cast<Eigen::Index>(t - 1);
        const Vector k = stream.memory_keys.col(col);
        const Vector v = stream.memory_values.col(col);
        if (exponential) {
            const Vector gamma = exponential_gates(*exponential, cfg, params, stream.tokens.x.col(col));
            memory.step(k, v, gamma);
            gamma_sup = std::max(gamma_sup, gamma.maxCoeff());
            key_sup = std::max(key_sup, k.norm());
            value_sup = std::max(value_sup, v.norm());
            // ||S^T k - v|| <= ||S||_F ||k|| + ||v|| with the norm bound on S.
            const double state_bound = gamma_sup < 1.0 ? key_sup * value_sup / (1.0 - gamma_sup) : INFINITY;
            s.envelope.push_back(state_bound * key_sup + value_sup);
        } else {
            memory.step(k, v, unused);
        }

        double drift = 0.0;
        std::size_t lags = 0;
        for (std::size_t lag : kDriftLags) {
            if (lag >= t) break;
            const auto past = static_cast<Eigen::Index>(t - lag - 1);
            const Vector recalled = gla::readout<double>(stream.memory_keys.col(past), memory.state());
            drift += (recalled - stream.memory_values.col(past)).norm();
            ++lags;
        }
        s.drift.push_back(lags ? drift / static_cast<double>(lags) : 0.0);
        s.state_fro.push_back(memory.state().frobenius_norm());
        s.state_bytes.push_back(memory.bytes());
    }
    return s;
}

}  // namespace

KernelComparison compare_kernels(const ScenarioConfig& cfg, const std::vector<kernel::KernelShape>& shapes) {
    cfg.validate();
    require(!shapes.empty(), "compare_kernels: need at least one shape");
    const PlantedStream stream = generate_stream(cfg);
    const auto params = scenario_params(cfg);

    KernelComparison cmp;
    for (const auto& shape : shapes) {
        KernelSeries s = run_shape(cfg, stream, params, shape);
        const std::size_t n = s.drift.size();

        if (std::holds_alternative<kernel::ExponentialChannelwise>(shape)) {
            double worst = 0.0;
            for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, s.drift[i] / s.envelope[i]);
            cmp.checks.push_back({"exponential_drift_within_envelope", worst, 1.0, worst <= 1.0});
        } else if (std::holds_alternative<kernel::HeavyTail>(shape)) {
            std::vector<double> ts(n);
            for (std::size_t i = 0; i < n; ++i) ts[i] = static_cast<double>(i + 1);
            const auto fit = fit_line(ts, s.state_fro);
            const double slope = fit ? fit->slope : 0.0;
            cmp.checks.push_back({"heavy_tail_norm_slope", slope, 0.0, slope > 0.0});
        } else if (const auto* refresh = std::get_if<kernel::BlockRefresh>(&shape)) {
            std::vector<double> deltas;
            for (std::size_t i = 1; i < n; ++i) deltas.push_back(std::abs(s.drift[i] - s.drift[i - 1]));
            const double typical = median(deltas);
            double weakest = INFINITY;
            // First step of each new block, 1-based t = m P + 1.
            for (std::size_t t = refresh->period + 1; t <= n; t += refresh->period) {
                const double jump = std::abs(s.drift[t - 1] - s.drift[t - 2]);
                weakest = std::min(weakest, typical > 0.0 ? jump / typical : INFINITY);
            }
            if (std::isfinite(weakest) || n > refresh->period)
                cmp.checks.push_back({"refresh_jump_over_median_delta", weakest, 10.0, weakest > 10.0});
        }
        cmp.series.push_back(std::move(s));
    }
    return cmp;
}

}  // namespace hstream::stream
