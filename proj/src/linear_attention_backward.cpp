#include "hstream/linear_attention.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace hstream::gla {

namespace {

double feature_derivative(double x, FeatureMap map) {
    if (map == FeatureMap::Identity) return 1.0;
    return x > 0.0 ? 1.0 : std::exp(x);
}

bool gate_is_clamped(double sigma) {
    return sigma < kGateEpsilon || sigma > 1.0 - kGateEpsilon;
}

// One step of the recurrence from tape quantities, identical arithmetic to
// state_update_inplace except that vt is read back instead of recomputed.
void replay_step(RecurrentState& state, const GlaTape& tape, Eigen::Index t) {
    const auto dk = static_cast<Eigen::Index>(state.d_k());
    const auto dv = static_cast<Eigen::Index>(state.d_v());
    for (std::size_t h = 0; h < state.heads(); ++h) {
        const auto hh = static_cast<Eigen::Index>(h);
        auto& S = state.head(h);
        S.array().colwise() *= tape.gammas.col(t).segment(hh * dk, dk).array();
        S.noalias() += tape.features.col(t).segment(hh * dk, dk) *
                       tape.write_values.col(t).segment(hh * dv, dv).transpose();
    }
    state.advance();
}

}  // namespace

ForwardResult forward_with_tape(const TokenSequence& tokens, const RecurrentState& initial,
                                const GlaParams& params) {
    params.validate();
    require(initial.d_k() == params.dims.d_k && initial.d_v() == params.dims.d_v &&
                initial.heads() == params.dims.heads,
            "forward_with_tape: state dims do not match params");
    require(tokens.x.rows() == static_cast<Eigen::Index>(params.dims.d_model), "forward_with_tape: token width");
    const Eigen::Index T = tokens.x.cols();
    require(T >= 1, "forward_with_tape: empty sequence");
    const auto kc = static_cast<Eigen::Index>(params.dims.key_channels());
    const auto vc = static_cast<Eigen::Index>(params.dims.value_channels());
    const auto dk = static_cast<Eigen::Index>(params.dims.d_k);
    const auto dv = static_cast<Eigen::Index>(params.dims.d_v);

    ForwardResult r;
    GlaTape& tape = r.tape;
    tape.inputs = tokens.x;
    tape.gate_pre.resize(kc, T);
    tape.gate_sigma.resize(kc, T);
    tape.gammas.resize(kc, T);
    tape.queries.resize(kc, T);
    tape.raw_keys.resize(kc, T);
    tape.features.resize(kc, T);
    tape.values.resize(vc, T);
    tape.write_values.resize(vc, T);
    tape.checkpoint_interval =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(T)))));
    r.outputs.resize(vc, T);

    RecurrentState state = initial;
    for (Eigen::Index t = 0; t < T; ++t) {
        if (static_cast<std::size_t>(t) % tape.checkpoint_interval == 0) tape.checkpoints.push_back(state);
        const Vector x = tokens.x.col(t);
        if (!x.allFinite()) throw std::invalid_argument("forward_with_tape: non-finite input");
        tape.gate_pre.col(t) = params.w_gamma * x + params.b_gamma;
        tape.gate_sigma.col(t) = tape.gate_pre.col(t).unaryExpr([](double a) { return sigmoid(a); });
        tape.gammas.col(t) = gate(x, params);
        tape.queries.col(t) = params.w_q * x;
        tape.raw_keys.col(t) = params.w_k * x;
        tape.values.col(t) = params.w_v * x;
        tape.features.col(t) = feature<double>(tape.raw_keys.col(t), params.feature_map);
        for (std::size_t h = 0; h < state.heads(); ++h) {
            const auto hh = static_cast<Eigen::Index>(h);
            if (params.value_rule == ValueRule::Plain) {
                tape.write_values.col(t).segment(hh * dv, dv) = tape.values.col(t).segment(hh * dv, dv);
            } else {
                const Vector decayed_key = tape.gammas.col(t).segment(hh * dk, dk).cwiseProduct(
                    tape.features.col(t).segment(hh * dk, dk));
                tape.write_values.col(t).segment(hh * dv, dv) =
                    params.eta * (tape.values.col(t).segment(hh * dv, dv) - state.head(h).transpose() * decayed_key);
            }
        }
        replay_step(state, tape, t);
        state.check_finite();
        r.outputs.col(t) = readout<double>(tape.queries.col(t), state);
    }
    r.final_state = state;
    return r;
}

GlaGradients GlaGradients::zeros(const Dims& dims, std::size_t length) {
    const auto dm = static_cast<Eigen::Index>(dims.d_model);
    const auto kc = static_cast<Eigen::Index>(dims.key_channels());
    const auto vc = static_cast<Eigen::Index>(dims.value_channels());
    GlaGradients g;
    g.w_gamma = Matrix::Zero(kc, dm);
    g.b_gamma = Vector::Zero(kc);
    g.w_q = Matrix::Zero(kc, dm);
    g.w_k = Matrix::Zero(kc, dm);
    g.w_v = Matrix::Zero(vc, dm);
    g.inputs = Matrix::Zero(dm, static_cast<Eigen::Index>(length));
    g.initial_state.assign(dims.heads, Matrix::Zero(static_cast<Eigen::Index>(dims.d_k),
                                                    static_cast<Eigen::Index>(dims.d_v)));
    return g;
}

double GlaGradients::max_abs() const {
    double m = std::max({w_gamma.cwiseAbs().maxCoeff(), b_gamma.cwiseAbs().maxCoeff(), w_q.cwiseAbs().maxCoeff(),
                         w_k.cwiseAbs().maxCoeff(), w_v.cwiseAbs().maxCoeff()});
    if (inputs.size() > 0) m = std::max(m, inputs.cwiseAbs().maxCoeff());
    for (const auto& s : initial_state) m = std::max(m, s.cwiseAbs().maxCoeff());
    return m;
}

GlaGradients backward(const GlaTape& tape, const GlaParams& params, const Matrix& output_grads) {
    params.validate();
    const std::size_t T = tape.length();
    require(T >= 1 && !tape.checkpoints.empty(), "backward: missing forward record");
    require(output_grads.cols() == static_cast<Eigen::Index>(T) &&
                output_grads.rows() == static_cast<Eigen::Index>(params.dims.value_channels()),
            "backward: output gradients do not match the recorded forward pass");
    require(tape.gammas.cols() == static_cast<Eigen::Index>(T) &&
                tape.gammas.rows() == static_cast<Eigen::Index>(params.dims.key_channels()),
            "backward: tape does not match params");

    const auto dk = static_cast<Eigen::Index>(params.dims.d_k);
    const auto dv = static_cast<Eigen::Index>(params.dims.d_v);
    const auto kc = static_cast<Eigen::Index>(params.dims.key_channels());
    const auto vc = static_cast<Eigen::Index>(params.dims.value_channels());
    const std::size_t heads = params.dims.heads;
    const bool delta = params.value_rule == ValueRule::DeltaRule;

    GlaGradients grads = GlaGradients::zeros(params.dims, T);
    std::vector<Matrix> dS(heads, Matrix::Zero(dk, dv));

    Vector d_gamma(kc), d_query(kc), d_feature(kc), d_value(vc);
    const std::size_t interval = tape.checkpoint_interval;

    // Segments are replayed forward from their checkpoint, then swept in
    // reverse. segment_states[j] is the state after j steps of the segment.
    for (std::size_t seg = tape.checkpoints.size(); seg-- > 0;) {
        const std::size_t begin = seg * interval;
        const std::size_t end = std::min(T, begin + interval);
        std::vector<RecurrentState> segment_states;
        segment_states.reserve(end - begin + 1);
        segment_states.push_back(tape.checkpoints[seg]);
        for (std::size_t t = begin; t < end; ++t) {
            segment_states.push_back(segment_states.back());
            replay_step(segment_states.back(), tape, static_cast<Eigen::Index>(t));
        }

        for (std::size_t t = end; t-- > begin;) {
            const auto col = static_cast<Eigen::Index>(t);
            const RecurrentState& prev = segment_states[t - begin];
            const RecurrentState& curr = segment_states[t - begin + 1];
            for (std::size_t h = 0; h < heads; ++h) {
                const auto hh = static_cast<Eigen::Index>(h);
                const auto g_out = output_grads.col(col).segment(hh * dv, dv);
                const auto q = tape.queries.col(col).segment(hh * dk, dk);
                const auto f = tape.features.col(col).segment(hh * dk, dk);
                const auto gam = tape.gammas.col(col).segment(hh * dk, dk);
                const auto vt = tape.write_values.col(col).segment(hh * dv, dv);
                const Matrix& S_prev = prev.head(h);

                // o = S^T q
                dS[h].noalias() += q * g_out.transpose();
                d_query.segment(hh * dk, dk).noalias() = curr.head(h) * g_out;

                // S = diag(gamma) S_prev + f vt^T
                d_gamma.segment(hh * dk, dk) = dS[h].cwiseProduct(S_prev).rowwise().sum();
                d_feature.segment(hh * dk, dk).noalias() = dS[h] * vt;
                const Vector d_write = dS[h].transpose() * f;
                Matrix d_prev = gam.asDiagonal() * dS[h];

                if (delta) {
                    // vt = eta (v - S_prev^T (gamma .* f))
                    d_value.segment(hh * dv, dv) = params.eta * d_write;
                    const Vector d_pred = -params.eta * d_write;
                    const Vector decayed_key = gam.cwiseProduct(f);
                    d_prev.noalias() += decayed_key * d_pred.transpose();
                    const Vector d_decayed = S_prev * d_pred;
                    d_gamma.segment(hh * dk, dk) += f.cwiseProduct(d_decayed);
                    d_feature.segment(hh * dk, dk) += gam.cwiseProduct(d_decayed);
                } else {
                    d_value.segment(hh * dv, dv) = d_write;
                }
                dS[h] = std::move(d_prev);
            }

            Vector d_key(kc), d_pre(kc);
            for (Eigen::Index c = 0; c < kc; ++c) {
                d_key(c) = d_feature(c) * feature_derivative(tape.raw_keys(c, col), params.feature_map);
                const double s = tape.gate_sigma(c, col);
                d_pre(c) = gate_is_clamped(s) ? 0.0 : d_gamma(c) * s * (1.0 - s);
            }

            const auto x = tape.inputs.col(col);
            grads.w_gamma.noalias() += d_pre * x.transpose();
            grads.b_gamma += d_pre;
            grads.w_q.noalias() += d_query * x.transpose();
            grads.w_k.noalias() += d_key * x.transpose();
            grads.w_v.noalias() += d_value * x.transpose();
            grads.inputs.col(col).noalias() = params.w_gamma.transpose() * d_pre + params.w_q.transpose() * d_query +
                                              params.w_k.transpose() * d_key + params.w_v.transpose() * d_value;
        }
    }
    for (std::size_t h = 0; h < heads; ++h) grads.initial_state[h] = dS[h];
    return grads;
}

GlaGradients backward(const TokenSequence& tokens, const RecurrentState& initial, const GlaParams& params,
                      const Matrix& output_grads) {
    return backward(forward_with_tape(tokens, initial, params).tape, params, output_grads);
}

namespace {

double objective(const TokenSequence& tokens, const RecurrentState& initial, const GlaParams& params,
                 const Matrix& output_grads) {
    const ChunkResult r = process_chunk(tokens, initial, params);
    return (r.outputs.array() * output_grads.array()).sum();
}

}  // namespace

FiniteDiffReport finite_diff_check(const TokenSequence& tokens, const RecurrentState& initial,
                                   const GlaParams& params, const Matrix& output_grads,
                                   const GlaGradients& analytic, double h, double tolerance) {
    require(h > 0.0 && std::isfinite(h), "finite_diff_check: step h must be positive");
    require(tolerance > 0.0, "finite_diff_check: tolerance must be positive");

    FiniteDiffReport report;
    TokenSequence x = tokens;
    GlaParams p = params;
    RecurrentState s0 = initial;

    auto probe = [&](const std::string& name, double& entry, double expected) {
        const double saved = entry;
        entry = saved + h;
        const double plus = objective(x, s0, p, output_grads);
        entry = saved - h;
        const double minus = objective(x, s0, p, output_grads);
        entry = saved;
        const double numeric = (plus - minus) / (2.0 * h);
        const double denom = std::max({std::abs(expected), std::abs(numeric), kFiniteDiffFloor});
        const double rel = std::abs(expected - numeric) / denom;
        ++report.entries_checked;
        if (!(rel <= report.max_rel_error)) {
            report.max_rel_error = std::isnan(rel) ? INFINITY : rel;
            report.worst_entry = name;
        }
    };
    auto sweep = [&](const std::string& name, auto& target, const auto& expected) {
        require(target.rows() == expected.rows() && target.cols() == expected.cols(),
                "finite_diff_check: gradient shape mismatch for " + name);
        for (Eigen::Index j = 0; j < target.cols(); ++j)
            for (Eigen::Index i = 0; i < target.rows(); ++i)
                probe(name + "(" + std::to_string(i) + "," + std::to_string(j) + ")", target(i, j), expected(i, j));
    };

    sweep("W_gamma", p.w_gamma, analytic.w_gamma);
    sweep("b_gamma", p.b_gamma, analytic.b_gamma);
    sweep("W_q", p.w_q, analytic.w_q);
    sweep("W_k", p.w_k, analytic.w_k);
    sweep("W_v", p.w_v, analytic.w_v);
    sweep("inputs", x.x, analytic.inputs);
    require(analytic.initial_state.size() == s0.heads(), "finite_diff_check: initial-state gradient heads");
    for (std::size_t hd = 0; hd < s0.heads(); ++hd)
        sweep("S0[" + std::to_string(hd) + "]", s0.head(hd), analytic.initial_state[hd]);

    report.pass = report.max_rel_error < tolerance;
    return report;
}

FiniteDiffReport finite_diff_check(const TokenSequence& tokens, const RecurrentState& initial,
                                   const GlaParams& params, const Matrix& output_grads, double h,
                                   double tolerance) {
    require(h > 0.0 && std::isfinite(h), "finite_diff_check: step h must be positive");
    return finite_diff_check(tokens, initial, params, output_grads, backward(tokens, initial, params, output_grads), h,
                             tolerance);
}

}  // namespace hstream::gla
