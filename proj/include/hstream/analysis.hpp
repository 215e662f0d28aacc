#pragma once

// Executable checks of the recurrence's stability properties on live runs,
// retention-spectrum extraction, and ridge probing of frozen states.

#include "hstream/common.hpp"
#include "hstream/linear_attention.hpp"
#include "hstream/local_attention.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hstream::analysis {

// Exact inequalities leave only float rounding: violations are normalized
// by the bound and must stay below this.
inline constexpr double kBoundTolerance = 1e-12;

struct BoundReport {
    std::string name;
    std::size_t samples = 0;
    // max over checks of (lhs - rhs) / scale; <= 0 means every check held.
    double max_violation = -INFINITY;
    bool pass = false;
    std::vector<double> per_step_margin;     // rhs - lhs, when meaningful
    std::map<std::string, double> details;   // scalar diagnostics

    void record(double violation);
    // pass = max_violation <= tolerance, plus any extra condition.
    void finalize(bool extra_condition = true, double tolerance = kBoundTolerance);

    // {name, samples, max_violation, pass, details, per_step_margin?}
    std::string to_json(bool include_margins = true) const;
};

struct StateDims {
    std::size_t d_k = 4;
    std::size_t d_v = 4;
    std::size_t heads = 1;
};

// Ungated recurrence (gamma = 1) from a random S_0: the initial-state share of
// the output, q^T S_0, must be bit-identical at every step. With
// gamma_bar < 1 the same run becomes the control and the share must strictly
// decrease. `zero_initial` starts from S_0 = 0.
BoundReport verify_contamination(std::size_t steps, const StateDims& dims, std::uint64_t seed,
                                 double gamma_bar = 1.0, bool zero_initial = false,
                                 std::optional<Vector> query = std::nullopt);

// ||q_t^T (prod diag gamma_j) S_0|| <= ||q_t|| ||S_0||_F gamma_bar^t under
// random gates in [gamma_bar / 2, gamma_bar], and the constant-gate run falls
// below 1e-6 of its initial contamination exactly at
// ceil(log(1e-6) / log gamma_bar).
BoundReport verify_initial_decay(std::size_t steps, const StateDims& dims, double gamma_bar, std::uint64_t seed,
                                 bool zero_query = false);

std::size_t decay_threshold_step(double gamma_bar, double fraction = 1e-6);

struct StateBoundOptions {
    double initial_norm = 0.0;
    // Injects gates above the nominal gamma_bar (debug only); the bound is
    // still evaluated with the nominal gamma_bar and is expected to fail.
    std::optional<double> dynamics_gamma_override;
    bool run_control = true;
};

// ||S_t||_F <= gamma_bar^t ||S_0||_F + B_k B_v / (1 - gamma_bar) for all t, and
// in the gamma = 1 control ||S_t||_F <= ||S_0||_F + t B_k B_v with per-step
// growth <= B_k B_v.
BoundReport verify_state_bound(std::size_t steps, double key_bound, double value_bound, double gamma_bar,
                               std::uint64_t seed, const StateBoundOptions& options = {},
                               const StateDims& dims = {});

// Kernel weight at continuous lag 3 tau equals e^-3 within `tolerance`, and
// integer lags >= ceil(3 tau) keep less than 5% of the weight.
BoundReport verify_horizon(std::span<const double> gammas, double tolerance);

// ttt_step against state_update(DeltaRule, identity features) with a scalar
// gate; every tenth trial uses gamma = 1 and is also checked against the
// undiscounted update written out directly.
BoundReport verify_ttt_equivalence(std::size_t trials, const StateDims& dims, std::uint64_t seed);

// Iterated recursive_objective_step against discounted_objective on random
// instances (d_k, d_v <= 8, t <= 64). Violation is the absolute difference
// against `tolerance`.
BoundReport verify_recursion_sum(std::size_t instances, std::uint64_t seed, double tolerance = 1e-10);

// Analytic backward against central differences on random instances.
BoundReport verify_gradients(std::size_t instances, std::uint64_t seed, double h = 1e-5, double tolerance = 1e-5,
                             const gla::Dims& dims = {4, 3, 3, 1}, std::size_t length = 5);

// Outputs of one length-`length` stream under each chunking, compared to a
// single pass (absolute tolerance).
BoundReport verify_chunking(const std::vector<std::vector<std::size_t>>& chunkings, std::size_t length,
                            std::uint64_t seed, double tolerance = 1e-12);

// Isometry (1e-12), relative-offset invariance under joint 3-axis shifts
// (1e-10), and special tokens pass through unchanged.
BoundReport verify_rope(std::size_t trials, std::size_t dim, std::uint64_t seed);

BoundReport verify_dilution_bound(std::size_t trials, const local::DilutionConfig& cfg, std::size_t t_max,
                                  std::uint64_t seed, local::DilutionReport* rows_out = nullptr);

// --- Retention spectrum ---------------------------------------------------

enum class RetentionBand { Short, Medium, Long };

inline constexpr double kShortBandLimit = 5.0;   // tau < 5
inline constexpr double kLongBandLimit = 50.0;   // tau >= 50

RetentionBand band_of(double tau);
std::string to_string(RetentionBand band);

struct RetentionSpectrum {
    struct Layer {
        Vector gamma_bar;  // per key channel, empirical mean gate
        Vector tau;        // -1 / log gamma_bar
    };
    std::vector<Layer> layers;

    // `layer,channel,gamma_bar,tau`
    void write_csv(std::ostream& out) const;
    // Counts of tau per [edges[i], edges[i+1]) bin across all layers.
    std::vector<std::size_t> histogram(std::span<const double> edges) const;
    std::vector<RetentionBand> bands(std::size_t layer = 0) const;
};

// `tokens` holds samples column-wise (d_model x N), N >= 1.
RetentionSpectrum extract_retention_spectrum(std::span<const gla::GlaParams> layers, const Matrix& tokens);
RetentionSpectrum extract_retention_spectrum(const gla::GlaParams& params, const Matrix& tokens);

// --- Ridge probing --------------------------------------------------------

// Row norms of each head's state, head-major: one feature per key channel.
Vector state_features(const gla::RecurrentState& state);

struct BandShares {
    double short_band = 0.0;
    double medium_band = 0.0;
    double long_band = 0.0;

    double sum() const { return short_band + medium_band + long_band; }
};

struct ProbeResult {
    Vector weights;        // on standardized features
    double intercept = 0.0;
    double r_squared = 0.0;  // on the held-out rows
    BandShares band_attribution;
    Vector feature_mean;
    Vector feature_scale;
    std::size_t train_rows = 0;
    std::size_t test_rows = 0;

    double predict(const Vector& features) const;
};

struct ProbeOptions {
    double train_fraction = 0.7;
    std::uint64_t seed = 0;
};

// Closed-form ridge w = (X^T X + lambda I)^{-1} X^T y on train rows after
// standardizing features and centering targets; r^2 on the remaining rows.
// `bands` assigns each feature column to a retention band. Throws
// std::domain_error when lambda = 0 and X^T X is singular.
ProbeResult ridge_probe(const Matrix& features, const Vector& targets, double lambda,
                        std::span<const RetentionBand> bands, const ProbeOptions& options = {});

// Explicit train/test split (e.g. across streams).
ProbeResult ridge_probe_split(const Matrix& train_x, const Vector& train_y, const Matrix& test_x,
                              const Vector& test_y, double lambda, std::span<const RetentionBand> bands);

}  // namespace hstream::analysis
