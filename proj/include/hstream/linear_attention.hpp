#pragma once

// Gated linear attention with a fixed-size recurrent state.
//
// Per head h, with gate gamma_t in (0,1)^{d_k}:
//
//   S_t = diag(gamma_t) S_{t-1} + phi(k_t) vt_t^T,     o_t = S_t^T q_t
//
// where vt_t = v_t (Plain) or eta * (v_t - S_{t-1}^T (gamma_t .* phi(k_t)))
// (DeltaRule, one discounted gradient step on ||S^T k - v||^2).
//
// Projections, gate and state are laid out head-major: channel c of head h
// lives at row h * d_k + c of W_q / W_k / W_gamma and at row h * d_v + c of
// W_v. All heads share the token-level gate restricted to their slice.

#include "hstream/common.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace hstream::gla {

enum class FeatureMap { Identity, ShiftedExp };
enum class ValueRule { Plain, DeltaRule };

std::string to_string(FeatureMap map);
std::string to_string(ValueRule rule);

// Gates are clamped to [kGateEpsilon, 1 - kGateEpsilon].
inline constexpr double kGateEpsilon = 1e-6;

struct Dims {
    std::size_t d_model = 0;
    std::size_t d_k = 0;  // per head
    std::size_t d_v = 0;  // per head
    std::size_t heads = 1;

    std::size_t key_channels() const { return d_k * heads; }
    std::size_t value_channels() const { return d_v * heads; }
};

template <typename T>
struct BasicGlaParams {
    Dims dims;
    MatrixT<T> w_gamma;  // key_channels x d_model
    VectorT<T> b_gamma;  // key_channels
    MatrixT<T> w_q;      // key_channels x d_model
    MatrixT<T> w_k;      // key_channels x d_model
    MatrixT<T> w_v;      // value_channels x d_model
    FeatureMap feature_map = FeatureMap::Identity;
    ValueRule value_rule = ValueRule::Plain;
    T eta = T(1);

    // Throws std::invalid_argument on any shape inconsistency.
    void validate() const;

    template <typename U>
    BasicGlaParams<U> cast() const {
        BasicGlaParams<U> out;
        out.dims = dims;
        out.w_gamma = w_gamma.template cast<U>();
        out.b_gamma = b_gamma.template cast<U>();
        out.w_q = w_q.template cast<U>();
        out.w_k = w_k.template cast<U>();
        out.w_v = w_v.template cast<U>();
        out.feature_map = feature_map;
        out.value_rule = value_rule;
        out.eta = static_cast<U>(eta);
        return out;
    }
};

using GlaParams = BasicGlaParams<double>;

struct InitOptions {
    double weight_range = 0.5;  // projections ~ U(-r, r) / sqrt(d_model)
    double gate_bias = 4.0;     // sigma(4) ~ 0.982: retention starts near 1
    double gate_weight_range = 0.1;
};

GlaParams init_params(const Dims& dims, Rng& rng, const InitOptions& options = {});

// Per-head d_k x d_v matrices plus a step counter.
template <typename T>
class BasicRecurrentState {
public:
    BasicRecurrentState() = default;
    BasicRecurrentState(std::size_t d_k, std::size_t d_v, std::size_t heads);

    static BasicRecurrentState zeros_like(const Dims& dims) { return {dims.d_k, dims.d_v, dims.heads}; }

    std::size_t d_k() const { return d_k_; }
    std::size_t d_v() const { return d_v_; }
    std::size_t heads() const { return heads_.size(); }
    std::uint64_t step() const { return step_; }

    MatrixT<T>& head(std::size_t h) { return heads_.at(h); }
    const MatrixT<T>& head(std::size_t h) const { return heads_.at(h); }

    T frobenius_norm() const;
    // Bytes held by the state matrices themselves.
    std::size_t bytes() const { return heads_.size() * d_k_ * d_v_ * sizeof(T); }

    // Throws std::overflow_error if any entry is non-finite.
    void check_finite() const;

    void advance() { ++step_; }
    void set_step(std::uint64_t step) { step_ = step; }

    template <typename U>
    BasicRecurrentState<U> cast() const {
        BasicRecurrentState<U> out(d_k_, d_v_, heads_.size());
        for (std::size_t h = 0; h < heads_.size(); ++h) out.head(h) = heads_[h].template cast<U>();
        out.set_step(step_);
        return out;
    }

private:
    std::size_t d_k_ = 0;
    std::size_t d_v_ = 0;
    std::vector<MatrixT<T>> heads_;
    std::uint64_t step_ = 0;
};

using RecurrentState = BasicRecurrentState<double>;

// Tokens stored column-wise: x.col(t) is the d_model feature of step t + 1.
template <typename T>
struct BasicTokenSequence {
    MatrixT<T> x;
    std::size_t length() const { return static_cast<std::size_t>(x.cols()); }
};

using TokenSequence = BasicTokenSequence<double>;

template <typename T>
struct BasicChunkResult {
    MatrixT<T> outputs;  // value_channels x n
    BasicRecurrentState<T> state;
};

using ChunkResult = BasicChunkResult<double>;

template <typename T>
VectorT<T> feature(const VectorT<T>& key, FeatureMap map);

// sigma(W_gamma x + b_gamma), clamped to [eps, 1 - eps].
template <typename T>
VectorT<T> gate(const VectorT<T>& x, const BasicGlaParams<T>& params);

// `key` is the raw projected key; phi is applied according to params.
template <typename T>
void state_update_inplace(BasicRecurrentState<T>& state, const VectorT<T>& key, const VectorT<T>& value,
                          const VectorT<T>& gamma, const BasicGlaParams<T>& params);

template <typename T>
BasicRecurrentState<T> state_update(const BasicRecurrentState<T>& state, const VectorT<T>& key,
                                    const VectorT<T>& value, const VectorT<T>& gamma,
                                    const BasicGlaParams<T>& params);

// Concatenated per-head S_h^T q_h.
template <typename T>
VectorT<T> readout(const VectorT<T>& query, const BasicRecurrentState<T>& state);

// S' = gamma S + eta k (v - gamma S^T k)^T per head.
template <typename T>
BasicRecurrentState<T> ttt_step(const BasicRecurrentState<T>& state, const VectorT<T>& key,
                                const VectorT<T>& value, T gamma, T eta);

// gate -> state_update -> readout for each column of `tokens`, in order.
// `outputs` must be value_channels x tokens.cols().
template <typename T>
void process_tokens(const Eigen::Ref<const MatrixT<T>>& tokens, BasicRecurrentState<T>& state,
                    const BasicGlaParams<T>& params, Eigen::Ref<MatrixT<T>> outputs);

template <typename T>
BasicChunkResult<T> process_chunk(const BasicTokenSequence<T>& tokens, const BasicRecurrentState<T>& state,
                                  const BasicGlaParams<T>& params);

// --- Discounted state-estimation objective --------------------------------

// sum_i (prod_{j=i+1}^t gamma_j) ||S^T k_i - v_i||^2 with keys.col(i - 1) = k_i.
double discounted_objective(const Matrix& S, const Matrix& keys, const Matrix& values,
                            std::span<const double> gammas);

// gamma_t * J_prev + ||S^T k_t - v_t||^2.
double recursive_objective_step(double previous, const Matrix& S, const Vector& key, const Vector& value,
                                double gamma);

// --- Backpropagation through time -----------------------------------------

// Per-step quantities kept from the forward pass. States are not stored;
// the backward sweep recomputes them segment by segment from checkpoints.
struct GlaTape {
    Matrix inputs;       // d_model x T
    Matrix gate_pre;     // key_channels x T, W_gamma x + b_gamma
    Matrix gate_sigma;   // unclamped sigmoid
    Matrix gammas;       // clamped gates actually applied
    Matrix queries;      // key_channels x T
    Matrix raw_keys;     // key_channels x T
    Matrix features;     // phi(raw_keys)
    Matrix values;       // value_channels x T
    Matrix write_values; // vt, value_channels x T
    std::size_t checkpoint_interval = 1;
    std::vector<RecurrentState> checkpoints;  // state before step c * interval

    std::size_t length() const { return static_cast<std::size_t>(inputs.cols()); }
};

struct ForwardResult {
    Matrix outputs;  // value_channels x T
    RecurrentState final_state;
    GlaTape tape;
};

ForwardResult forward_with_tape(const TokenSequence& tokens, const RecurrentState& initial,
                                const GlaParams& params);

struct GlaGradients {
    Matrix w_gamma;
    Vector b_gamma;
    Matrix w_q;
    Matrix w_k;
    Matrix w_v;
    Matrix inputs;                     // d_model x T
    std::vector<Matrix> initial_state;  // per head

    static GlaGradients zeros(const Dims& dims, std::size_t length);
    double max_abs() const;
};

// Exact gradients of sum_t <output_grads.col(t), o_t>. Throws
// std::invalid_argument if the tape is empty or does not match output_grads.
GlaGradients backward(const GlaTape& tape, const GlaParams& params, const Matrix& output_grads);

GlaGradients backward(const TokenSequence& tokens, const RecurrentState& initial, const GlaParams& params,
                      const Matrix& output_grads);

struct FiniteDiffReport {
    double max_rel_error = 0.0;
    std::string worst_entry;
    std::size_t entries_checked = 0;
    bool pass = false;
};

// Relative error |a - n| / max(|a|, |n|, floor): relative for ordinary
// magnitudes, absolute below `floor`.
inline constexpr double kFiniteDiffFloor = 1e-3;

// Central differences of sum_t <output_grads_t, o_t> over every parameter,
// input and initial-state entry, compared against `analytic`.
FiniteDiffReport finite_diff_check(const TokenSequence& tokens, const RecurrentState& initial,
                                   const GlaParams& params, const Matrix& output_grads,
                                   const GlaGradients& analytic, double h, double tolerance);

// Same, using backward() for the analytic side.
FiniteDiffReport finite_diff_check(const TokenSequence& tokens, const RecurrentState& initial,
                                   const GlaParams& params, const Matrix& output_grads, double h,
                                   double tolerance);

// --- State snapshots ------------------------------------------------------

// Binary layout (little-endian): "GLAS", u32 version, u32 d_k, u32 d_v*heads,
// then the d_k x (d_v*heads) matrix [S_0 | S_1 | ...] as row-major f64.
inline constexpr std::uint32_t kSnapshotVersion = 1;

struct StateSnapshot {
    std::uint32_t d_k = 0;
    std::uint32_t columns = 0;  // d_v * heads
    std::vector<double> data;   // row-major d_k x columns

    RecurrentState to_state(std::size_t heads) const;
};

StateSnapshot make_snapshot(const RecurrentState& state);
void write_snapshot(std::ostream& out, const RecurrentState& state);
// Returns false at clean end of stream; throws std::runtime_error on a
// malformed record.
bool read_snapshot(std::istream& in, StateSnapshot& snapshot);

}  // namespace hstream::gla
