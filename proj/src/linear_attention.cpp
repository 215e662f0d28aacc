#include "hstream/linear_attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hstream::gla {

std::string to_string(FeatureMap map) {
    return map == FeatureMap::Identity ? "identity" : "shifted_exp";
}

std::string to_string(ValueRule rule) {
    return rule == ValueRule::Plain ? "plain" : "delta";
}

template <typename T>
void BasicGlaParams<T>::validate() const {
    const auto dm = static_cast<Eigen::Index>(dims.d_model);
    const auto kc = static_cast<Eigen::Index>(dims.key_channels());
    const auto vc = static_cast<Eigen::Index>(dims.value_channels());
    require(dims.d_model > 0 && dims.d_k > 0 && dims.d_v > 0 && dims.heads > 0, "GLA dims must be positive");
    require(w_gamma.rows() == kc && w_gamma.cols() == dm, "W_gamma must be (heads*d_k) x d_model");
    require(b_gamma.size() == kc, "b_gamma must have heads*d_k entries");
    require(w_q.rows() == kc && w_q.cols() == dm, "W_q must be (heads*d_k) x d_model");
    require(w_k.rows() == kc && w_k.cols() == dm, "W_k must be (heads*d_k) x d_model");
    require(w_v.rows() == vc && w_v.cols() == dm, "W_v must be (heads*d_v) x d_model");
}

GlaParams init_params(const Dims& dims, Rng& rng, const InitOptions& options) {
    require(dims.d_model > 0 && dims.d_k > 0 && dims.d_v > 0 && dims.heads > 0, "GLA dims must be positive");
    const auto dm = static_cast<Eigen::Index>(dims.d_model);
    const auto kc = static_cast<Eigen::Index>(dims.key_channels());
    const auto vc = static_cast<Eigen::Index>(dims.value_channels());
    const double r = options.weight_range / std::sqrt(static_cast<double>(dims.d_model));
    GlaParams p;
    p.dims = dims;
    p.w_q = random_uniform(rng, kc, dm, -r, r);
    p.w_k = random_uniform(rng, kc, dm, -r, r);
    p.w_v = random_uniform(rng, vc, dm, -r, r);
    p.w_gamma = random_uniform(rng, kc, dm, -options.gate_weight_range, options.gate_weight_range);
    p.b_gamma = Vector::Constant(kc, options.gate_bias);
    return p;
}

template <typename T>
BasicRecurrentState<T>::BasicRecurrentState(std::size_t d_k, std::size_t d_v, std::size_t heads)
    : d_k_(d_k), d_v_(d_v) {
    require(d_k > 0 && d_v > 0 && heads > 0, "recurrent state dims must be positive");
    heads_.assign(heads, MatrixT<T>::Zero(static_cast<Eigen::Index>(d_k), static_cast<Eigen::Index>(d_v)));
}

template <typename T>
T BasicRecurrentState<T>::frobenius_norm() const {
    T sum = 0;
    for (const auto& s : heads_) sum += s.squaredNorm();
    return std::sqrt(sum);
}

template <typename T>
void BasicRecurrentState<T>::check_finite() const {
    for (const auto& s : heads_)
        if (!std::isfinite(s.squaredNorm())) throw std::overflow_error("recurrent state is no longer finite");
}

template <typename T>
VectorT<T> feature(const VectorT<T>& key, FeatureMap map) {
    if (map == FeatureMap::Identity) return key;
    // elu(x) + 1: positive, smooth, linear for x > 0.
    return key.unaryExpr([](T x) { return x > T(0) ? x + T(1) : std::exp(x); });
}

template <typename T>
VectorT<T> gate(const VectorT<T>& x, const BasicGlaParams<T>& params) {
    require(x.size() == params.w_gamma.cols(), "gate: input width does not match d_model");
    if (!x.allFinite()) throw std::invalid_argument("gate: non-finite input");
    const T lo = static_cast<T>(kGateEpsilon);
    const T hi = static_cast<T>(1.0 - kGateEpsilon);
    VectorT<T> a = params.w_gamma * x + params.b_gamma;
    return a.unaryExpr([&](T v) { return std::clamp(static_cast<T>(sigmoid(static_cast<double>(v))), lo, hi); });
}

namespace {

template <typename T>
void check_step_dims(const BasicRecurrentState<T>& state, const VectorT<T>& key, const VectorT<T>& value,
                     const VectorT<T>& gamma) {
    const auto kc = static_cast<Eigen::Index>(state.d_k() * state.heads());
    const auto vc = static_cast<Eigen::Index>(state.d_v() * state.heads());
    require(key.size() == kc, "key width does not match heads*d_k");
    require(gamma.size() == kc, "gate width does not match heads*d_k");
    require(value.size() == vc, "value width does not match heads*d_v");
}

}  // namespace

template <typename T>
void state_update_inplace(BasicRecurrentState<T>& state, const VectorT<T>& key, const VectorT<T>& value,
                          const VectorT<T>& gamma, const BasicGlaParams<T>& params) {
    check_step_dims(state, key, value, gamma);
    const auto dk = static_cast<Eigen::Index>(state.d_k());
    const auto dv = static_cast<Eigen::Index>(state.d_v());
    const VectorT<T> phi = feature(key, params.feature_map);
    for (std::size_t h = 0; h < state.heads(); ++h) {
        auto& S = state.head(h);
        const auto hk = static_cast<Eigen::Index>(h) * dk;
        const auto hv = static_cast<Eigen::Index>(h) * dv;
        const auto f = phi.segment(hk, dk);
        const auto g = gamma.segment(hk, dk);
        VectorT<T> write;
        if (params.value_rule == ValueRule::Plain) {
            write = value.segment(hv, dv);
        } else {
            const VectorT<T> decayed_key = g.cwiseProduct(f);
            write = params.eta * (value.segment(hv, dv) - S.transpose() * decayed_key);
        }
        S.array().colwise() *= g.array();
        S.noalias() += f * write.transpose();
    }
    state.advance();
    state.check_finite();
}

template <typename T>
BasicRecurrentState<T> state_update(const BasicRecurrentState<T>& state, const VectorT<T>& key,
                                    const VectorT<T>& value, const VectorT<T>& gamma,
                                    const BasicGlaParams<T>& params) {
    BasicRecurrentState<T> next = state;
    state_update_inplace(next, key, value, gamma, params);
    return next;
}

template <typename T>
VectorT<T> readout(const VectorT<T>& query, const BasicRecurrentState<T>& state) {
    const auto dk = static_cast<Eigen::Index>(state.d_k());
    const auto dv = static_cast<Eigen::Index>(state.d_v());
    require(query.size() == dk * static_cast<Eigen::Index>(state.heads()), "readout: query width mismatch");
    VectorT<T> out(dv * static_cast<Eigen::Index>(state.heads()));
    for (std::size_t h = 0; h < state.heads(); ++h) {
        const auto hh = static_cast<Eigen::Index>(h);
        out.segment(hh * dv, dv).noalias() = state.head(h).transpose() * query.segment(hh * dk, dk);
    }
    return out;
}

template <typename T>
BasicRecurrentState<T> ttt_step(const BasicRecurrentState<T>& state, const VectorT<T>& key,
                                const VectorT<T>& value, T gamma, T eta) {
    require(eta >= T(0), "ttt_step: eta must be nonnegative");
    const auto dk = static_cast<Eigen::Index>(state.d_k());
    const auto dv = static_cast<Eigen::Index>(state.d_v());
    require(key.size() == dk * static_cast<Eigen::Index>(state.heads()), "ttt_step: key width mismatch");
    require(value.size() == dv * static_cast<Eigen::Index>(state.heads()), "ttt_step: value width mismatch");
    BasicRecurrentState<T> next = state;
    for (std::size_t h = 0; h < state.heads(); ++h) {
        const auto hh = static_cast<Eigen::Index>(h);
        const auto& S = state.head(h);
        const auto k = key.segment(hh * dk, dk);
        const VectorT<T> residual = value.segment(hh * dv, dv) - gamma * (S.transpose() * k);
        next.head(h) = gamma * S + eta * k * residual.transpose();
    }
    next.advance();
    next.check_finite();
    return next;
}

template <typename T>
void process_tokens(const Eigen::Ref<const MatrixT<T>>& tokens, BasicRecurrentState<T>& state,
                    const BasicGlaParams<T>& params, Eigen::Ref<MatrixT<T>> outputs) {
    require(state.d_k() == params.dims.d_k && state.d_v() == params.dims.d_v &&
                state.heads() == params.dims.heads,
            "process_chunk: state dims do not match params");
    require(tokens.rows() == static_cast<Eigen::Index>(params.dims.d_model), "process_chunk: token width mismatch");
    require(outputs.rows() == static_cast<Eigen::Index>(params.dims.value_channels()) &&
                outputs.cols() == tokens.cols(),
            "process_chunk: output buffer shape mismatch");
    for (Eigen::Index t = 0; t < tokens.cols(); ++t) {
        const VectorT<T> x = tokens.col(t);
        const VectorT<T> g = gate(x, params);
        const VectorT<T> q = params.w_q * x;
        const VectorT<T> k = params.w_k * x;
        const VectorT<T> v = params.w_v * x;
        state_update_inplace(state, k, v, g, params);
        outputs.col(t) = readout(q, state);
    }
}

template <typename T>
BasicChunkResult<T> process_chunk(const BasicTokenSequence<T>& tokens, const BasicRecurrentState<T>& state,
                                  const BasicGlaParams<T>& params) {
    BasicChunkResult<T> result{MatrixT<T>(static_cast<Eigen::Index>(params.dims.value_channels()), tokens.x.cols()),
                               state};
    process_tokens<T>(tokens.x, result.state, params, result.outputs);
    return result;
}

double discounted_objective(const Matrix& S, const Matrix& keys, const Matrix& values,
                            std::span<const double> gammas) {
    require(keys.cols() == values.cols() && static_cast<std::size_t>(keys.cols()) == gammas.size(),
            "discounted_objective: keys, values and gammas must have the same length");
    require(keys.cols() >= 1, "discounted_objective: need at least one step");
    require(keys.rows() == S.rows() && values.rows() == S.cols(), "discounted_objective: dimension mismatch");
    // Walk backwards so the discount prod_{j>i} gamma_j accumulates in O(t).
    double total = 0.0;
    double discount = 1.0;
    for (Eigen::Index i = keys.cols() - 1; i >= 0; --i) {
        total += discount * (S.transpose() * keys.col(i) - values.col(i)).squaredNorm();
        discount *= gammas[static_cast<std::size_t>(i)];
    }
    return total;
}

double recursive_objective_step(double previous, const Matrix& S, const Vector& key, const Vector& value,
                                double gamma) {
    require(previous >= 0.0, "recursive_objective_step: previous objective must be nonnegative");
    require(key.size() == S.rows() && value.size() == S.cols(), "recursive_objective_step: dimension mismatch");
    return gamma * previous + (S.transpose() * key - value).squaredNorm();
}

#define HSTREAM_INSTANTIATE_GLA(T)                                                                              \
    template struct BasicGlaParams<T>;                                                                          \
    template class BasicRecurrentState<T>;                                                                      \
    template VectorT<T> feature<T>(const VectorT<T>&, FeatureMap);                                              \
    template VectorT<T> gate<T>(const VectorT<T>&, const BasicGlaParams<T>&);                                   \
    template void state_update_inplace<T>(BasicRecurrentState<T>&, const VectorT<T>&, const VectorT<T>&,        \
                                          const VectorT<T>&, const BasicGlaParams<T>&);                         \
    template BasicRecurrentState<T> state_update<T>(const BasicRecurrentState<T>&, const VectorT<T>&,           \
                                                    const VectorT<T>&, const VectorT<T>&,                       \
                                                    const BasicGlaParams<T>&);                                  \
    template VectorT<T> readout<T>(const VectorT<T>&, const BasicRecurrentState<T>&);                           \
    template BasicRecurrentState<T> ttt_step<T>(const BasicRecurrentState<T>&, const VectorT<T>&,               \
                                                const VectorT<T>&, T, T);                                       \
    template void process_tokens<T>(const Eigen::Ref<const MatrixT<T>>&, BasicRecurrentState<T>&,               \
                                    const BasicGlaParams<T>&, Eigen::Ref<MatrixT<T>>);                          \
    template BasicChunkResult<T> process_chunk<T>(const BasicTokenSequence<T>&, const BasicRecurrentState<T>&, \
                                                  const BasicGlaParams<T>&);

HSTREAM_INSTANTIATE_GLA(double)
HSTREAM_INSTANTIATE_GLA(float)

#undef HSTREAM_INSTANTIATE_GLA

}  // namespace hstream::gla
