#pragma once

// Windowed causal softmax attention with 3-axis rotary position encoding and
// per-head reliability gates, plus the attention-dilution bound for causal
// softmax over long histories.

#include "hstream/common.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hstream::local {

// Position triple (t+1, y+1, x+1) for patch tokens; (0, 0, 0) for special
// tokens (metric readout, pose), which therefore stay unrotated.
struct RopeIndex {
    long t = 0;
    long y = 0;
    long x = 0;
    bool special = false;

    // Frame index and pixel row/column, all 0-based.
    static RopeIndex patch(long frame, long row, long col) { return {frame + 1, row + 1, col + 1, false}; }
    static RopeIndex special_token() { return {0, 0, 0, true}; }

    bool operator==(const RopeIndex&) const = default;
};

inline constexpr double kDefaultRopeBase = 10000.0;

// Splits `vec` into three contiguous thirds (time, height, width); pair m of
// each third is rotated by position * base^(-2m / (d/3)). Throws
// std::invalid_argument unless d is a positive multiple of 6.
Vector rope_rotate(const Vector& vec, const RopeIndex& index, double base = kDefaultRopeBase);

// Temporal component becomes 1 + ((t_frame) mod period) where t_frame is the
// 0-based frame index; spatial components and special tokens are untouched.
std::vector<RopeIndex> temporal_index_reset(std::span<const RopeIndex> indices, std::size_t period);

// Numerically stable softmax.
Vector softmax(const Vector& scores);

struct AttentionResult {
    Matrix outputs;  // n x d_v, row t attends to keys 0..t
    Matrix weights;  // n x n, lower triangular, rows sum to 1
};

// Rows of q/k/v are tokens. Scores are q_t . k_i / sqrt(d). Throws on an
// empty window, mismatched shapes, non-finite input, or n > max_window.
AttentionResult causal_softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                         std::optional<std::size_t> max_window = std::nullopt);

// Weights of a single query against all rows of `keys` (the query sits at the
// last position, so every key is causal).
Vector attention_weights(const Vector& query, const Matrix& keys);

struct HeadGateParams {
    Matrix w_g;  // heads x d_model
    Vector b_g;  // heads
};

// sigma(W_g pooled + b_g)
Vector head_gates(const Vector& pooled, const HeadGateParams& params);

// y~_h = g_h * y_h for each head.
std::vector<Vector> head_gate_apply(const Vector& pooled, const std::vector<Vector>& head_outputs,
                                    const HeadGateParams& params);

// Mean of the rows of `tokens` whose index is not special. Falls back to the
// mean of all rows when every token is special.
Vector mean_pool(const Matrix& tokens, std::span<const RopeIndex> indices);

struct LocalAttentionParams {
    std::size_t heads = 1;
    std::size_t head_dim = 6;  // multiple of 6
    Matrix w_q;                // (heads*head_dim) x d_model
    Matrix w_k;
    Matrix w_v;
    HeadGateParams gate;
    double rope_base = kDefaultRopeBase;

    void validate(std::size_t d_model) const;
};

LocalAttentionParams init_local_params(std::size_t d_model, std::size_t heads, std::size_t head_dim, Rng& rng,
                                       double gate_bias = 2.0);

struct LocalAttentionOutput {
    Matrix outputs;  // n x (heads*head_dim), gated, heads concatenated
    std::vector<Matrix> weights;  // per head, n x n
    Vector gates;    // per head
};

// Full layer over one window: project, rotate q/k by position, causal
// softmax per head, gate each head with the pooled window feature, concat.
LocalAttentionOutput local_attention(const Matrix& tokens, std::span<const RopeIndex> indices,
                                     const LocalAttentionParams& params,
                                     std::optional<std::size_t> max_window = std::nullopt);

// --- Attention dilution ---------------------------------------------------

struct DilutionConfig {
    std::size_t w_geo = 4;  // co-visibility budget
    double score_bound = 1.0;  // M
};

// sum of weights over `relevant` (0-based positions). Throws if the weights do
// not sum to 1 within 1e-9 or an index is out of range.
double relevant_mass(const Vector& weights, std::span<const std::size_t> relevant);

// 1 / (1 + ((t - W_geo) / W_geo) e^{-2M}); requires t > W_geo.
double dilution_bound(std::size_t t, const DilutionConfig& cfg);

// t at which the bound equals 1/2: W_geo (1 + e^{2M}).
double dilution_crossing(const DilutionConfig& cfg);

struct DilutionRow {
    std::size_t t = 0;
    double bound = 0.0;
    double measured_mass = 0.0;
    bool violated = false;
};

struct DilutionReport {
    std::vector<DilutionRow> rows;   // best-case construction, t in (W_geo, t_max]
    std::size_t random_trials = 0;
    std::size_t random_violations = 0;  // random mass > best-case mass + 1e-9
    double max_violation = 0.0;      // max(measured - bound) over rows
    double max_random_excess = -INFINITY;
    std::size_t violations() const;
};

inline constexpr double kDilutionTolerance = 1e-12;

// Best-case scores (+M on the W_geo most recent steps, -M elsewhere, clipped
// to [-M, M]) run through softmax attention for every t in (W_geo, t_max];
// `trials` random score assignments are checked against the best case.
DilutionReport verify_dilution(std::size_t trials, const DilutionConfig& cfg, std::size_t t_max,
                               std::uint64_t seed = 0);

void write_dilution_csv(std::ostream& out, const DilutionReport& report);

}  // namespace hstream::local
