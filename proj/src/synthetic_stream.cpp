#include "hstream/stream.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hstream::stream {

std::string to_string(Precision p) { return p == Precision::F64 ? "f64" : "f32"; }

Precision parse_precision(const std::string& name) {
    if (name == "f64") return Precision::F64;
    if (name == "f32") return Precision::F32;
    throw std::invalid_argument("precision must be f64 or f32, got '" + name + "'");
}

void ScenarioConfig::validate() const {
    require(length >= 1, "stream length must be >= 1");
    require(window >= 1, "window must be >= 1");
    require(chunk >= window, "chunk size must be >= window");
    require(d_model > 0 && d_k > 0 && d_v > 0 && heads > 0, "all dims must be positive");
    require(w_geo >= 1, "W_geo must be >= 1");
    require(score_bound > 0.0 && std::isfinite(score_bound), "score bound M must be positive");
    require(std::find(kShapeNames.begin(), kShapeNames.end(), shape) != kShapeNames.end(),
            "unknown shape '" + shape + "'");
    require(std::isfinite(gate_bias) && gate_weight_range >= 0.0, "invalid gate configuration");
    require(eta >= 0.0 && std::isfinite(eta), "eta must be >= 0");
    require(refresh_period >= 1, "refresh period must be >= 1");
    require(sink_position >= 1, "sink position is 1-based");
    require(sink_mass > 0.0 && sink_mass <= 1.0, "sink mass must lie in (0, 1]");
    if (gamma_override) require(*gamma_override > 0.0 && std::isfinite(*gamma_override), "gamma override must be positive");
}

kernel::KernelShape make_shape(const std::string& name, const ScenarioConfig& cfg) {
    if (name == "exponential") return kernel::ExponentialChannelwise{};
    if (name == "heavy_tail") return kernel::HeavyTail{};
    if (name == "refresh") return kernel::BlockRefresh{cfg.refresh_period};
    if (name == "box") return kernel::Box{cfg.window};
    if (name == "sink") return kernel::SpikeSink{cfg.sink_position, cfg.sink_mass};
    throw std::invalid_argument("unknown shape '" + name + "'");
}

Vector PlantedStream::planted_scores(std::size_t t, std::size_t first) const {
    require(first >= 1 && first <= t && t <= length(), "planted_scores: positions out of range");
    const double inv = 1.0 / std::sqrt(static_cast<double>(attn_queries.rows()));
    const auto tt = static_cast<Eigen::Index>(t - 1);
    Vector out(static_cast<Eigen::Index>(t - first + 1));
    for (std::size_t i = first; i <= t; ++i) {
        const double s = attn_queries.col(tt).dot(attn_keys.col(static_cast<Eigen::Index>(i - 1))) * inv;
        out(static_cast<Eigen::Index>(i - first)) = std::clamp(s, -score_bound, score_bound);
    }
    return out;
}

std::vector<std::size_t> PlantedStream::relevant(std::size_t t) const {
    std::vector<std::size_t> out;
    for (std::size_t i = t >= w_geo ? t - w_geo + 1 : 1; i <= t; ++i) out.push_back(i);
    return out;
}

namespace {

constexpr std::uint64_t kParamStream = 0x9E3779B97F4A7C15ull;

}  // namespace

gla::GlaParams scenario_params(const ScenarioConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed ^ kParamStream);
    gla::InitOptions init;
    init.gate_bias = cfg.gate_bias;
    init.gate_weight_range = cfg.gate_weight_range;
    auto params = gla::init_params(cfg.dims(), rng, init);
    params.value_rule = cfg.value_rule;
    params.feature_map = cfg.feature_map;
    params.eta = cfg.eta;
    return params;
}

PlantedStream generate_stream(const ScenarioConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const auto T = static_cast<Eigen::Index>(cfg.length);
    const auto dm = static_cast<Eigen::Index>(cfg.d_model);
    const auto kc = static_cast<Eigen::Index>(cfg.d_k * cfg.heads);
    const auto vc = static_cast<Eigen::Index>(cfg.d_v * cfg.heads);

    PlantedStream s;
    s.w_geo = cfg.w_geo;
    s.score_bound = cfg.score_bound;

    // Tokens: two slowly rotating latent directions plus noise.
    const Vector u1 = random_unit(rng, dm);
    const Vector u2 = random_unit(rng, dm);
    s.tokens.x.resize(dm, T);
    s.target.resize(T);
    double trace = 0.0;
    for (Eigen::Index i = 0; i < T; ++i) {
        const double t = static_cast<double>(i + 1);
        const double a = std::cos(2.0 * std::numbers::pi * t / 97.0);
        const double b = std::sin(2.0 * std::numbers::pi * t / 331.0);
        s.tokens.x.col(i) = a * u1 + b * u2 + random_normal(rng, dm, 0.3);
        // Slow exponential trace of the first latent.
        trace = 0.98 * trace + 0.02 * a;
        s.target(i) = trace;
    }

    // Parabola codes: q_t . k_i = alpha (r^2 - (i - c_t)^2) with c_t the
    // centre of the W_geo most recent steps and r = W_geo / 2. For integer i
    // the bracket is >= W_geo/2 - 1/4 inside the set and <= -(W_geo/2 - 1/4)
    // outside, so alpha makes every unclipped score at least 2M in magnitude.
    const double w = static_cast<double>(cfg.w_geo);
    const double r = 0.5 * w;
    const double gap = 0.5 * w - 0.25;
    const double alpha = 2.0 * cfg.score_bound * std::sqrt(3.0) / gap;
    s.attn_queries.resize(3, T);
    s.attn_keys.resize(3, T);
    for (Eigen::Index i = 0; i < T; ++i) {
        const double pos = static_cast<double>(i + 1);
        const double c = pos - 0.5 * (w - 1.0);
        s.attn_queries.col(i) << alpha * (r * r - c * c), alpha * 2.0 * c, -alpha;
        s.attn_keys.col(i) << 1.0, pos, pos * pos;
    }

    // Memory pairs: keys cycle through the basis of each head with a little
    // noise; values lie in the positive orthant.
    s.memory_keys.resize(kc, T);
    s.memory_values.resize(vc, T);
    const auto dk = static_cast<Eigen::Index>(cfg.d_k);
    const auto dv = static_cast<Eigen::Index>(cfg.d_v);
    for (Eigen::Index i = 0; i < T; ++i) {
        for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(cfg.heads); ++h) {
            Vector k = random_normal(rng, dk, 0.05);
            k(i % dk) += 1.0;
            s.memory_keys.col(i).segment(h * dk, dk) = k.normalized();
            s.memory_values.col(i).segment(h * dv, dv) = random_unit(rng, dv).cwiseAbs();
        }
    }
    return s;
}

std::optional<LinearFit> fit_line(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size(), "fit_line: x and y differ in length");
    const std::size_t n = x.size();
    if (n < 2) return std::nullopt;
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (!(sxx > 0.0)) return std::nullopt;
    LinearFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    fit.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    return fit;
}

}  // namespace hstream::stream
