#include "hstream/analysis.hpp"

#include "hstream/kernel_model.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace hstream::analysis {

void BoundReport::record(double violation) {
    ++samples;
    if (std::isnan(violation)) violation = INFINITY;
    max_violation = std::max(max_violation, violation);
}

void BoundReport::finalize(bool extra_condition, double tolerance) {
    pass = extra_condition && samples > 0 && max_violation <= tolerance;
}

std::string BoundReport::to_json(bool include_margins) const {
    nlohmann::json j;
    j["name"] = name;
    j["samples"] = samples;
    j["max_violation"] = std::isfinite(max_violation) ? nlohmann::json(max_violation) : nlohmann::json(nullptr);
    j["pass"] = pass;
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [key, value] : details)
        d[key] = std::isfinite(value) ? nlohmann::json(value) : nlohmann::json(nullptr);
    j["details"] = d;
    if (include_margins) j["per_step_margin"] = per_step_margin;
    return j.dump(2);
}

namespace {

gla::GlaParams plain_params() {
    gla::GlaParams p;
    p.feature_map = gla::FeatureMap::Identity;
    p.value_rule = gla::ValueRule::Plain;
    return p;
}

gla::RecurrentState random_state(const StateDims& dims, Rng& rng, double frobenius) {
    gla::RecurrentState s(dims.d_k, dims.d_v, dims.heads);
    for (std::size_t h = 0; h < dims.heads; ++h)
        s.head(h) = random_uniform(rng, static_cast<Eigen::Index>(dims.d_k), static_cast<Eigen::Index>(dims.d_v),
                                   -1.0, 1.0);
    const double n = s.frobenius_norm();
    if (n > 0.0)
        for (std::size_t h = 0; h < dims.heads; ++h) s.head(h) *= frobenius / n;
    return s;
}

double state_max_abs_diff(const gla::RecurrentState& a, const gla::RecurrentState& b) {
    double m = 0.0;
    for (std::size_t h = 0; h < a.heads(); ++h) m = std::max(m, (a.head(h) - b.head(h)).cwiseAbs().maxCoeff());
    return m;
}

double state_max_abs(const gla::RecurrentState& a) {
    double m = 0.0;
    for (std::size_t h = 0; h < a.heads(); ++h) m = std::max(m, a.head(h).cwiseAbs().maxCoeff());
    return m;
}

void check_dims(const StateDims& dims) {
    require(dims.d_k > 0 && dims.d_v > 0 && dims.heads > 0, "state dims must be positive");
}

Eigen::Index key_width(const StateDims& d) { return static_cast<Eigen::Index>(d.d_k * d.heads); }
Eigen::Index value_width(const StateDims& d) { return static_cast<Eigen::Index>(d.d_v * d.heads); }

}  // namespace

BoundReport verify_contamination(std::size_t steps, const StateDims& dims, std::uint64_t seed, double gamma_bar,
                                 bool zero_initial, std::optional<Vector> query) {
    check_dims(dims);
    require(steps >= 1, "verify_contamination: steps must be >= 1");
    require(gamma_bar > 0.0 && gamma_bar <= 1.0, "verify_contamination: gamma_bar must lie in (0, 1]");
    Rng rng(seed);
    const auto kw = key_width(dims);
    const auto vw = value_width(dims);
    const Vector q = query ? *query : random_unit(rng, kw);
    require(q.size() == kw, "verify_contamination: query width must be heads*d_k");

    const auto params = plain_params();
    gla::RecurrentState initial = zero_initial ? gla::RecurrentState(dims.d_k, dims.d_v, dims.heads)
                                               : random_state(dims, rng, 1.0);
    const Vector gamma = Vector::Constant(kw, gamma_bar);
    const Vector zero_key = Vector::Zero(kw);
    const Vector zero_value = Vector::Zero(vw);

    // S_t = P_t + A_t: P carries S_0 under the gates alone, A is the run from
    // zero. q^T P_t is the initial state's share of the output.
    gla::RecurrentState full = initial;
    gla::RecurrentState homogeneous = initial;
    gla::RecurrentState driven(dims.d_k, dims.d_v, dims.heads);

    const Vector c0 = gla::readout(q, initial);
    Vector previous = c0;
    bool bit_identical = true;
    bool strictly_decreasing = true;
    double max_decomposition = 0.0;
    double max_drift = 0.0;
    double max_differenced_drift = 0.0;

    BoundReport report;
    report.name = gamma_bar == 1.0 ? "zero_forgetting_contamination" : "gated_contamination_control";
    for (std::size_t t = 1; t <= steps; ++t) {
        const Vector k = random_normal(rng, kw);
        const Vector v = random_normal(rng, vw);
        gla::state_update_inplace(full, k, v, gamma, params);
        gla::state_update_inplace(driven, k, v, gamma, params);
        gla::state_update_inplace(homogeneous, zero_key, zero_value, gamma, params);

        const Vector c = gla::readout(q, homogeneous);
        const Vector o = gla::readout(q, full);
        const Vector split = c + gla::readout(q, driven);
        const double scale = q.norm() * (initial.frobenius_norm() + driven.frobenius_norm()) + 1e-300;
        const double decomposition = (o - split).cwiseAbs().maxCoeff() / scale;
        max_decomposition = std::max(max_decomposition, decomposition);

        double violation = decomposition;
        if (gamma_bar == 1.0) {
            const double drift = (c - c0).cwiseAbs().maxCoeff();
            max_drift = std::max(max_drift, drift);
            // Differencing the two runs mixes in the rounding of the driven
            // sum; reported for reference only.
            const Vector differenced = o - gla::readout(q, driven);
            max_differenced_drift = std::max(max_differenced_drift, (differenced - c0).cwiseAbs().maxCoeff());
            if (!(c.array() == c0.array()).all()) bit_identical = false;
            violation = std::max(violation, drift / (c0.norm() + 1e-300));
            report.per_step_margin.push_back(-drift);
        } else {
            // Envelope ||q|| ||S_0|| gamma_bar^t and strict decrease.
            const double envelope = q.norm() * initial.frobenius_norm() * std::pow(gamma_bar, static_cast<double>(t));
            violation = std::max(violation, (c.norm() - envelope) / std::max(envelope, 1e-290));
            if (previous.norm() > 0.0 && !(c.norm() < previous.norm())) strictly_decreasing = false;
            report.per_step_margin.push_back(envelope - c.norm());
        }
        report.record(violation);
        previous = c;
    }
    report.details["steps"] = static_cast<double>(steps);
    report.details["gamma_bar"] = gamma_bar;
    report.details["initial_contribution_norm"] = c0.norm();
    report.details["final_contribution_norm"] = previous.norm();
    report.details["max_decomposition_error"] = max_decomposition;
    if (gamma_bar == 1.0) {
        report.details["bit_identical"] = bit_identical ? 1.0 : 0.0;
        report.details["max_drift"] = max_drift;
        report.details["max_differenced_drift"] = max_differenced_drift;
        report.finalize(bit_identical);
    } else {
        report.details["strictly_decreasing"] = strictly_decreasing ? 1.0 : 0.0;
        // A zero initial share cannot decrease; that is not a failure.
        report.finalize(strictly_decreasing || c0.norm() == 0.0);
    }
    return report;
}

std::size_t decay_threshold_step(double gamma_bar, double fraction) {
    require(gamma_bar > 0.0 && gamma_bar < 1.0, "decay_threshold_step: gamma_bar must lie in (0, 1)");
    require(fraction > 0.0 && fraction < 1.0, "decay_threshold_step: fraction must lie in (0, 1)");
    return static_cast<std::size_t>(std::ceil(std::log(fraction) / std::log(gamma_bar)));
}

BoundReport verify_initial_decay(std::size_t steps, const StateDims& dims, double gamma_bar, std::uint64_t seed,
                                 bool zero_query) {
    check_dims(dims);
    require(steps >= 1, "verify_initial_decay: steps must be >= 1");
    require(gamma_bar > 0.0 && gamma_bar <= 1.0, "verify_initial_decay: gamma_bar must lie in (0, 1]");
    Rng rng(seed);
    const auto kw = key_width(dims);
    const auto vw = value_width(dims);
    const auto params = plain_params();
    const gla::RecurrentState initial = random_state(dims, rng, 1.0);
    const double s0 = initial.frobenius_norm();
    const Vector zero_key = Vector::Zero(kw);
    const Vector zero_value = Vector::Zero(vw);
    std::uniform_real_distribution<double> gate_dist(0.5 * gamma_bar, gamma_bar);

    BoundReport report;
    report.name = "initial_state_decay";

    // Heterogeneous gates with sup exactly gamma_bar (channel 0 pinned).
    gla::RecurrentState homogeneous = initial;
    double envelope = 1.0;
    for (std::size_t t = 1; t <= steps; ++t) {
        Vector gamma(kw);
        for (Eigen::Index c = 0; c < kw; ++c) gamma(c) = gate_dist(rng);
        gamma(0) = gamma_bar;
        gla::state_update_inplace(homogeneous, zero_key, zero_value, gamma, params);
        const Vector q = zero_query ? Vector::Zero(kw) : Vector(random_normal(rng, kw));
        envelope *= gamma_bar;
        const double lhs = gla::readout(q, homogeneous).norm();
        const double rhs = q.norm() * s0 * envelope;
        report.per_step_margin.push_back(rhs - lhs);
        report.record((lhs - rhs) / std::max(rhs, 1e-290));
    }

    // Constant gates: first step below 1e-6 of the initial contribution.
    bool threshold_ok = true;
    if (!zero_query && gamma_bar < 1.0) {
        const Vector q = random_unit(rng, kw);
        const Vector gamma = Vector::Constant(kw, gamma_bar);
        gla::RecurrentState p = initial;
        const double c0 = gla::readout(q, initial).norm();
        const std::size_t closed_form = decay_threshold_step(gamma_bar);
        std::size_t first_below = 0;
        for (std::size_t t = 1; t <= steps && first_below == 0; ++t) {
            gla::state_update_inplace(p, zero_key, zero_value, gamma, params);
            if (gla::readout(q, p).norm() < 1e-6 * c0) first_below = t;
        }
        report.details["threshold_step_closed_form"] = static_cast<double>(closed_form);
        report.details["threshold_step_measured"] = static_cast<double>(first_below);
        if (closed_form <= steps) {
            threshold_ok = first_below != 0 && first_below <= closed_form && first_below + 1 >= closed_form;
            ++report.samples;
        }
    }
    report.details["gamma_bar"] = gamma_bar;
    report.details["steps"] = static_cast<double>(steps);
    report.details["initial_state_norm"] = s0;
    report.finalize(threshold_ok);
    return report;
}

BoundReport verify_state_bound(std::size_t steps, double key_bound, double value_bound, double gamma_bar,
                               std::uint64_t seed, const StateBoundOptions& options, const StateDims& dims) {
    check_dims(dims);
    require(steps >= 1, "verify_state_bound: steps must be >= 1");
    require(key_bound > 0.0 && value_bound > 0.0, "verify_state_bound: B_k and B_v must be positive");
    require(gamma_bar > 0.0 && gamma_bar < 1.0, "verify_state_bound: gamma_bar must lie in (0, 1)");
    require(options.initial_norm >= 0.0, "verify_state_bound: initial norm must be nonnegative");
    Rng rng(seed);
    const auto kw = key_width(dims);
    const auto vw = value_width(dims);
    const auto params = plain_params();
    const gla::RecurrentState initial = random_state(dims, rng, options.initial_norm);
    const double s0 = initial.frobenius_norm();
    const double bkbv = key_bound * value_bound;
    std::uniform_real_distribution<double> gate_dist(0.5 * gamma_bar, gamma_bar);
    std::uniform_real_distribution<double> magnitude(0.5, 1.0);

    BoundReport report;
    report.name = "state_norm_bound";
    report.per_step_margin.reserve(steps);

    gla::RecurrentState s = initial;
    double envelope = 1.0;
    double max_norm = s0;
    try {
        for (std::size_t t = 1; t <= steps; ++t) {
            const bool extreme = t % 10 == 0;
            const Vector k = random_unit(rng, kw) * key_bound * (extreme ? 1.0 : magnitude(rng));
            const Vector v = random_unit(rng, vw) * value_bound * (extreme ? 1.0 : magnitude(rng));
            Vector gamma(kw);
            if (options.dynamics_gamma_override) {
                gamma.setConstant(*options.dynamics_gamma_override);
            } else {
                for (Eigen::Index c = 0; c < kw; ++c) gamma(c) = gate_dist(rng);
                gamma(0) = gamma_bar;
            }
            gla::state_update_inplace(s, k, v, gamma, params);
            envelope *= gamma_bar;
            const double lhs = s.frobenius_norm();
            const double rhs = envelope * s0 + bkbv / (1.0 - gamma_bar);
            max_norm = std::max(max_norm, lhs);
            report.per_step_margin.push_back(rhs - lhs);
            report.record((lhs - rhs) / rhs);
        }
    } catch (const std::overflow_error&) {
        report.details["overflow_step"] = static_cast<double>(report.samples + 1);
        report.record(INFINITY);
    }
    report.details["gamma_bar"] = gamma_bar;
    report.details["bound_limit"] = bkbv / (1.0 - gamma_bar);
    report.details["max_state_norm"] = max_norm;
    report.details["steps"] = static_cast<double>(steps);
    if (options.dynamics_gamma_override) report.details["dynamics_gamma"] = *options.dynamics_gamma_override;

    bool control_ok = true;
    if (options.run_control) {
        // gamma = 1 with nonnegative keys and values: rank-one writes all add
        // up, so the norm grows, but never faster than B_k B_v per step.
        const Vector ones = Vector::Ones(kw);
        gla::RecurrentState c = initial;
        double previous = s0;
        double max_step_growth = -INFINITY;
        double sum_t = 0, sum_n = 0, sum_tt = 0, sum_tn = 0;
        for (std::size_t t = 1; t <= steps; ++t) {
            const Vector k = random_unit(rng, kw).cwiseAbs() * key_bound;
            const Vector v = random_unit(rng, vw).cwiseAbs() * value_bound;
            gla::state_update_inplace(c, k, v, ones, params);
            const double n = c.frobenius_norm();
            const double td = static_cast<double>(t);
            const double rhs = s0 + td * bkbv;
            report.record((n - rhs) / rhs);
            report.record((n - previous - bkbv) / bkbv);
            max_step_growth = std::max(max_step_growth, n - previous);
            previous = n;
            sum_t += td;
            sum_n += n;
            sum_tt += td * td;
            sum_tn += td * n;
        }
        const double count = static_cast<double>(steps);
        const double denom = count * sum_tt - sum_t * sum_t;
        const double slope = denom > 0.0 ? (count * sum_tn - sum_t * sum_n) / denom : 0.0;
        report.details["control_slope"] = slope;
        report.details["control_final_norm"] = previous;
        report.details["control_max_step_growth"] = max_step_growth;
        control_ok = steps < 2 || slope > 0.0;
    }
    report.finalize(control_ok);
    return report;
}

BoundReport verify_horizon(std::span<const double> gammas, double tolerance) {
    require(tolerance >= 0.0, "verify_horizon: tolerance must be nonnegative");
    BoundReport report;
    report.name = "effective_horizon";
    const double e3 = std::exp(-3.0);
    double worst_weight_error = 0.0;
    for (double gamma : gammas) {
        const double tau = kernel::effective_horizon(gamma);
        const double w = kernel::eval_channel_kernel(gamma, 3.0 * tau);
        const double err = std::abs(w - e3);
        worst_weight_error = std::max(worst_weight_error, err);
        report.record(err - tolerance);
        const double first = std::ceil(3.0 * tau);
        for (double lag : {first, first + 1.0, 2.0 * first, 10.0 * first})
            report.record(kernel::eval_channel_kernel(gamma, lag) - 0.05);
    }
    report.details["max_weight_error"] = worst_weight_error;
    report.details["tolerance"] = tolerance;
    report.finalize(!gammas.empty(), 0.0);
    return report;
}

BoundReport verify_ttt_equivalence(std::size_t trials, const StateDims& dims, std::uint64_t seed) {
    check_dims(dims);
    require(trials >= 1, "verify_ttt_equivalence: trials must be >= 1");
    Rng rng(seed);
    const auto kw = key_width(dims);
    const auto vw = value_width(dims);
    std::uniform_real_distribution<double> gamma_dist(0.05, 1.0);
    std::uniform_real_distribution<double> eta_dist(0.01, 1.0);
    auto params = plain_params();
    params.value_rule = gla::ValueRule::DeltaRule;

    BoundReport report;
    report.name = "ttt_equivalence";
    double worst = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        const gla::RecurrentState s = random_state(dims, rng, 1.0 + 4.0 * gamma_dist(rng));
        const Vector k = random_normal(rng, kw);
        const Vector v = random_normal(rng, vw);
        const bool undiscounted = trial % 10 == 0;
        const double gamma = undiscounted ? 1.0 : gamma_dist(rng);
        params.eta = eta_dist(rng);

        const auto ttt = gla::ttt_step(s, k, v, gamma, params.eta);
        const auto gated = gla::state_update(s, k, v, Vector(Vector::Constant(kw, gamma)), params);
        const double scale = std::max(state_max_abs(gated), 1e-300);
        double err = state_max_abs_diff(ttt, gated) / scale;

        if (undiscounted) {
            gla::RecurrentState direct = s;
            const auto dk = static_cast<Eigen::Index>(dims.d_k);
            const auto dv = static_cast<Eigen::Index>(dims.d_v);
            for (std::size_t h = 0; h < dims.heads; ++h) {
                const auto hh = static_cast<Eigen::Index>(h);
                const Vector kh = k.segment(hh * dk, dk);
                const Vector residual = v.segment(hh * dv, dv) - s.head(h).transpose() * kh;
                direct.head(h) = s.head(h) + params.eta * kh * residual.transpose();
            }
            err = std::max(err, state_max_abs_diff(ttt, direct) / scale);
        }
        worst = std::max(worst, err);
        report.record(err - 1e-12);
    }
    report.details["max_relative_error"] = worst;
    report.finalize(true, 0.0);
    return report;
}

BoundReport verify_recursion_sum(std::size_t instances, std::uint64_t seed, double tolerance) {
    require(instances >= 1, "verify_recursion_sum: instances must be >= 1");
    Rng rng(seed);
    std::uniform_int_distribution<int> dim(1, 8);
    std::uniform_int_distribution<int> len(1, 64);
    std::uniform_real_distribution<double> gamma_dist(0.0, 1.0);
    BoundReport report;
    report.name = "objective_recursion";
    double worst = 0.0;
    for (std::size_t n = 0; n < instances; ++n) {
        const int dk = dim(rng);
        const int dv = dim(rng);
        const int t = len(rng);
        const Matrix S = random_uniform(rng, dk, dv, -1.0, 1.0);
        const Matrix keys = random_uniform(rng, dk, t, -1.0, 1.0);
        const Matrix values = random_uniform(rng, dv, t, -1.0, 1.0);
        std::vector<double> gammas(static_cast<std::size_t>(t));
        for (auto& g : gammas) g = gamma_dist(rng);
        double j = 0.0;
        for (int i = 0; i < t; ++i)
            j = gla::recursive_objective_step(j, S, keys.col(i), values.col(i), gammas[static_cast<std::size_t>(i)]);
        const double err = std::abs(j - gla::discounted_objective(S, keys, values, gammas));
        worst = std::max(worst, err);
        report.record(err - tolerance);
    }
    report.details["max_abs_error"] = worst;
    report.details["tolerance"] = tolerance;
    report.finalize(true, 0.0);
    return report;
}

BoundReport verify_gradients(std::size_t instances, std::uint64_t seed, double h, double tolerance,
                             const gla::Dims& dims, std::size_t length) {
    require(instances >= 1 && length >= 1, "verify_gradients: instances and length must be >= 1");
    Rng rng(seed);
    std::uniform_real_distribution<double> bias(-1.0, 2.0);
    BoundReport report;
    report.name = "bptt_gradients";
    double worst = 0.0;
    std::size_t entries = 0;
    for (std::size_t n = 0; n < instances; ++n) {
        gla::InitOptions init;
        init.weight_range = 1.0;
        init.gate_weight_range = 0.5;
        init.gate_bias = bias(rng);
        auto params = gla::init_params(dims, rng, init);
        params.value_rule = n % 2 == 0 ? gla::ValueRule::Plain : gla::ValueRule::DeltaRule;
        params.feature_map = (n / 2) % 2 == 0 ? gla::FeatureMap::Identity : gla::FeatureMap::ShiftedExp;
        params.eta = 0.5;
        gla::TokenSequence tokens{random_uniform(rng, static_cast<Eigen::Index>(dims.d_model),
                                                 static_cast<Eigen::Index>(length), -1.0, 1.0)};
        gla::RecurrentState initial = gla::RecurrentState::zeros_like(dims);
        for (std::size_t hd = 0; hd < dims.heads; ++hd)
            initial.head(hd) = random_uniform(rng, static_cast<Eigen::Index>(dims.d_k),
                                              static_cast<Eigen::Index>(dims.d_v), -0.5, 0.5);
        const Matrix grads = random_uniform(rng, static_cast<Eigen::Index>(dims.value_channels()),
                                            static_cast<Eigen::Index>(length), -1.0, 1.0);
        const auto fd = gla::finite_diff_check(tokens, initial, params, grads, h, tolerance);
        worst = std::max(worst, fd.max_rel_error);
        entries += fd.entries_checked;
        report.record(fd.max_rel_error - tolerance);
    }
    report.details["max_rel_error"] = worst;
    report.details["entries_checked"] = static_cast<double>(entries);
    report.details["tolerance"] = tolerance;
    report.finalize(true, 0.0);
    return report;
}

BoundReport verify_chunking(const std::vector<std::vector<std::size_t>>& chunkings, std::size_t length,
                            std::uint64_t seed, double tolerance) {
    require(length >= 1, "verify_chunking: length must be >= 1");
    Rng rng(seed);
    const gla::Dims dims{8, 4, 4, 2};
    const auto params = gla::init_params(dims, rng);
    const gla::TokenSequence tokens{random_uniform(rng, 8, static_cast<Eigen::Index>(length), -1.0, 1.0)};
    const auto initial = gla::RecurrentState::zeros_like(dims);
    const auto single = gla::process_chunk(tokens, initial, params);

    BoundReport report;
    report.name = "chunking_invariance";
    double worst = 0.0;
    for (const auto& sizes : chunkings) {
        require(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) == length,
                "verify_chunking: chunk sizes must sum to the stream length");
        gla::RecurrentState state = initial;
        Matrix outputs(single.outputs.rows(), single.outputs.cols());
        Eigen::Index at = 0;
        for (std::size_t size : sizes) {
            require(size >= 1, "verify_chunking: empty chunk");
            const auto n = static_cast<Eigen::Index>(size);
            const gla::TokenSequence piece{tokens.x.middleCols(at, n)};
            auto result = gla::process_chunk(piece, state, params);
            outputs.middleCols(at, n) = result.outputs;
            state = std::move(result.state);
            at += n;
        }
        const double err = std::max((outputs - single.outputs).cwiseAbs().maxCoeff(),
                                    state_max_abs_diff(state, single.state));
        worst = std::max(worst, err);
        report.record(err - tolerance);
    }
    report.details["max_abs_difference"] = worst;
    report.details["tolerance"] = tolerance;
    report.finalize(true, 0.0);
    return report;
}

BoundReport verify_rope(std::size_t trials, std::size_t dim, std::uint64_t seed) {
    require(trials >= 1, "verify_rope: trials must be >= 1");
    Rng rng(seed);
    std::uniform_int_distribution<long> pos(0, 999);
    std::uniform_int_distribution<long> shift(-500, 500);
    const auto d = static_cast<Eigen::Index>(dim);
    auto random_index = [&] { return local::RopeIndex::patch(pos(rng), pos(rng), pos(rng)); };

    BoundReport report;
    report.name = "rope_invariants";
    double worst_iso = 0.0, worst_rel = 0.0;
    bool special_ok = true;
    for (std::size_t n = 0; n < trials; ++n) {
        const Vector v = random_normal(rng, d);
        const Vector rotated = local::rope_rotate(v, random_index());
        const double iso = std::abs(rotated.norm() - v.norm()) / std::max(1.0, v.norm());
        worst_iso = std::max(worst_iso, iso);
        report.record(iso - 1e-12);

        const Vector q = random_normal(rng, d);
        const Vector k = random_normal(rng, d);
        const auto i = random_index();
        const auto j = random_index();
        const long dt = shift(rng), dy = shift(rng), dx = shift(rng);
        auto moved = [&](const local::RopeIndex& p) {
            return local::RopeIndex{p.t + dt, p.y + dy, p.x + dx, false};
        };
        const double a = local::rope_rotate(q, i).dot(local::rope_rotate(k, j));
        const double b = local::rope_rotate(q, moved(i)).dot(local::rope_rotate(k, moved(j)));
        const double rel = std::abs(a - b);
        worst_rel = std::max(worst_rel, rel);
        report.record(rel - 1e-10);

        const Vector same = local::rope_rotate(v, local::RopeIndex::special_token());
        if (!(same.array() == v.array()).all()) special_ok = false;
    }
    report.details["max_isometry_error"] = worst_iso;
    report.details["max_relative_offset_error"] = worst_rel;
    report.details["special_tokens_unrotated"] = special_ok ? 1.0 : 0.0;
    report.finalize(special_ok, 0.0);
    return report;
}

BoundReport verify_dilution_bound(std::size_t trials, const local::DilutionConfig& cfg, std::size_t t_max,
                                  std::uint64_t seed, local::DilutionReport* rows_out) {
    auto dilution = local::verify_dilution(trials, cfg, t_max, seed);
    BoundReport report;
    report.name = "attention_dilution";
    for (const auto& row : dilution.rows) {
        report.record(row.measured_mass - row.bound);
        report.per_step_margin.push_back(row.bound - row.measured_mass);
    }
    report.record(dilution.max_random_excess - 1e-9 - local::kDilutionTolerance);
    report.details["w_geo"] = static_cast<double>(cfg.w_geo);
    report.details["score_bound"] = cfg.score_bound;
    report.details["crossing_t"] = local::dilution_crossing(cfg);
    report.details["rows"] = static_cast<double>(dilution.rows.size());
    report.details["row_violations"] = static_cast<double>(dilution.violations());
    report.details["random_trials"] = static_cast<double>(dilution.random_trials);
    report.details["random_violations"] = static_cast<double>(dilution.random_violations);
    report.finalize(dilution.violations() == 0 && dilution.random_violations == 0, local::kDilutionTolerance);
    if (rows_out) *rows_out = std::move(dilution);
    return report;
}

// --- Retention spectrum ---------------------------------------------------

RetentionBand band_of(double tau) {
    require(!std::isnan(tau) && tau > 0.0, "band_of: tau must be positive");
    if (tau < kShortBandLimit) return RetentionBand::Short;
    if (tau < kLongBandLimit) return RetentionBand::Medium;
    return RetentionBand::Long;
}

std::string to_string(RetentionBand band) {
    switch (band) {
        case RetentionBand::Short: return "short";
        case RetentionBand::Medium: return "medium";
        case RetentionBand::Long: return "long";
    }
    return "unknown";
}

void RetentionSpectrum::write_csv(std::ostream& out) const {
    out << "layer,channel,gamma_bar,tau\n";
    for (std::size_t l = 0; l < layers.size(); ++l)
        for (Eigen::Index c = 0; c < layers[l].gamma_bar.size(); ++c)
            out << l << ',' << c << ',' << format_double(layers[l].gamma_bar(c)) << ','
                << format_double(layers[l].tau(c)) << '\n';
}

std::vector<std::size_t> RetentionSpectrum::histogram(std::span<const double> edges) const {
    require(edges.size() >= 2, "histogram: need at least two edges");
    require(std::is_sorted(edges.begin(), edges.end()), "histogram: edges must be sorted");
    std::vector<std::size_t> counts(edges.size() - 1, 0);
    for (const auto& layer : layers)
        for (Eigen::Index c = 0; c < layer.tau.size(); ++c) {
            const double tau = layer.tau(c);
            const auto it = std::upper_bound(edges.begin(), edges.end(), tau);
            if (it == edges.begin() || it == edges.end()) continue;
            ++counts[static_cast<std::size_t>(it - edges.begin()) - 1];
        }
    return counts;
}

std::vector<RetentionBand> RetentionSpectrum::bands(std::size_t layer) const {
    require(layer < layers.size(), "RetentionSpectrum::bands: layer out of range");
    std::vector<RetentionBand> out;
    for (Eigen::Index c = 0; c < layers[layer].tau.size(); ++c) out.push_back(band_of(layers[layer].tau(c)));
    return out;
}

RetentionSpectrum extract_retention_spectrum(std::span<const gla::GlaParams> layers, const Matrix& tokens) {
    require(!layers.empty(), "extract_retention_spectrum: need at least one layer");
    require(tokens.cols() >= 1, "extract_retention_spectrum: need at least one token");
    RetentionSpectrum spectrum;
    for (const auto& params : layers) {
        params.validate();
        require(tokens.rows() == static_cast<Eigen::Index>(params.dims.d_model),
                "extract_retention_spectrum: token width does not match d_model");
        Vector sum = Vector::Zero(static_cast<Eigen::Index>(params.dims.key_channels()));
        for (Eigen::Index i = 0; i < tokens.cols(); ++i) sum += gla::gate<double>(tokens.col(i), params);
        RetentionSpectrum::Layer layer;
        layer.gamma_bar = sum / static_cast<double>(tokens.cols());
        // Gates never exceed 1 - 1e-6, so tau stays finite.
        layer.tau = layer.gamma_bar.unaryExpr([](double g) { return -1.0 / std::log(g); });
        spectrum.layers.push_back(std::move(layer));
    }
    return spectrum;
}

RetentionSpectrum extract_retention_spectrum(const gla::GlaParams& params, const Matrix& tokens) {
    return extract_retention_spectrum(std::span<const gla::GlaParams>(&params, 1), tokens);
}

}  // namespace hstream::analysis
