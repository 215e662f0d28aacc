#pragma once

// Synthetic streams with planted relevance, long-rollout scenarios, kernel
// comparisons and the batch verification suite behind the command-line tool.

#include "hstream/analysis.hpp"
#include "hstream/common.hpp"
#include "hstream/kernel_model.hpp"
#include "hstream/linear_attention.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace hstream::stream {

enum class Precision { F64, F32 };

std::string to_string(Precision p);
Precision parse_precision(const std::string& name);

struct ScenarioConfig {
    std::size_t length = 1000;  // T
    std::size_t chunk = 21;
    std::size_t window = 10;    // local attention window W
    std::size_t d_model = 16;
    std::size_t d_k = 8;
    std::size_t d_v = 8;
    std::size_t heads = 1;
    std::size_t w_geo = 4;      // planted co-visibility budget
    double score_bound = 1.0;   // M
    std::string shape = "exponential";
    double gate_bias = 4.0;
    double gate_weight_range = 0.1;
    gla::ValueRule value_rule = gla::ValueRule::Plain;
    gla::FeatureMap feature_map = gla::FeatureMap::Identity;
    double eta = 0.5;
    std::size_t refresh_period = 64;
    std::size_t sink_position = 1;
    double sink_mass = 0.9;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir = "hstream_out";
    Precision precision = Precision::F64;
    // Wall-clock timing per step. Off by default so records.csv is
    // byte-reproducible; step_ns is then written as 0.
    bool timing = false;
    // Debug: replaces every gate with this value.
    std::optional<double> gamma_override;
    bool write_snapshots = true;

    // Throws std::invalid_argument on any inconsistent field.
    void validate() const;
    gla::Dims dims() const { return {d_model, d_k, d_v, heads}; }
};

inline const std::vector<std::string> kShapeNames = {"exponential", "heavy_tail", "refresh", "box", "sink"};

// Influence pattern named `name`, parameterized from the config (window,
// refresh period, sink position/mass).
kernel::KernelShape make_shape(const std::string& name, const ScenarioConfig& cfg);

// Token stream plus the planted structure used by the scenarios.
struct PlantedStream {
    gla::TokenSequence tokens;  // d_model x T
    // 3-dimensional attention codes: q_t . k_i / sqrt(3) is >= 2M for the
    // W_geo most recent steps i <= t and <= -2M for older ones.
    Matrix attn_queries;
    Matrix attn_keys;
    // Planted key/value memory pairs (unit norm), heads*d_k x T and
    // heads*d_v x T.
    Matrix memory_keys;
    Matrix memory_values;
    Vector target;  // planted latent signal per step, for probing
    std::size_t w_geo = 0;
    double score_bound = 0.0;

    std::size_t length() const { return tokens.length(); }
    // Clipped scores of query t against keys first..t (1-based, inclusive).
    Vector planted_scores(std::size_t t, std::size_t first) const;
    // Steps relevant to t: max(1, t - W_geo + 1) .. t.
    std::vector<std::size_t> relevant(std::size_t t) const;
};

// Deterministic in cfg.seed. Throws on invalid config (W_geo = 0 included).
PlantedStream generate_stream(const ScenarioConfig& cfg);

// Model parameters drawn from the config seed.
gla::GlaParams scenario_params(const ScenarioConfig& cfg);

struct StreamRecord {
    std::size_t t = 0;
    double out_norm = 0.0;
    double state_fro = 0.0;
    double bound_margin = 0.0;   // recursive norm bound minus ||S_t||_F
    double relevant_mass = 0.0;  // windowed softmax mass on the planted set
    std::int64_t step_ns = 0;
    std::size_t state_bytes = 0;
};

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
};

// Least-squares line through (x_i, y_i); nullopt with fewer than two
// distinct x.
std::optional<LinearFit> fit_line(std::span<const double> x, std::span<const double> y);

inline constexpr std::size_t kTimingWarmup = 100;

struct ScenarioSummary {
    std::size_t steps = 0;
    std::string shape;
    Precision precision = Precision::F64;
    std::optional<LinearFit> time_fit;  // cumulative ns vs t, warmup excluded
    std::size_t max_state_bytes = 0;
    std::size_t min_state_bytes = 0;
    double min_bound_margin = 0.0;
    double final_state_fro = 0.0;
    double mean_relevant_mass = 0.0;

    std::string to_json() const;
};

struct ScenarioResult {
    std::vector<StreamRecord> records;
    ScenarioSummary summary;
    std::vector<gla::RecurrentState> snapshots;  // state at each chunk end
    std::vector<std::size_t> snapshot_steps;
};

// Drives the stream chunk by chunk through the configured influence pattern.
ScenarioResult run_scenario(const ScenarioConfig& cfg);

// records.csv header: t,out_norm,state_fro,bound_margin,relevant_mass,step_ns,state_bytes
void write_records_csv(std::ostream& out, const std::vector<StreamRecord>& records);

// Writes records.csv, summary.json and (if enabled) states.bin, targets.csv
// and spectrum.csv into cfg.out_dir, creating it if needed.
void export_scenario(const ScenarioConfig& cfg, const PlantedStream& stream, const ScenarioResult& result);

// --- Kernel comparison ----------------------------------------------------

inline constexpr std::size_t kDriftLags[] = {1, 2, 4, 8, 16};

struct KernelSeries {
    std::string shape;
    std::vector<double> drift;      // mean ||S^T k_{t-l} - v_{t-l}|| over lags
    std::vector<double> state_fro;
    std::vector<std::size_t> state_bytes;
    std::vector<double> envelope;   // drift envelope, exponential shape only
};

struct KernelCheck {
    std::string name;
    double value = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

struct KernelComparison {
    std::vector<KernelSeries> series;
    std::vector<KernelCheck> checks;
    bool pass() const;

    // shape,t,drift,state_fro,state_bytes
    void write_csv(std::ostream& out) const;
    std::string summary_json() const;
};

// Runs the planted key/value pairs through each influence pattern and checks
// the exponential drift envelope, heavy-tail growth, and refresh jumps.
KernelComparison compare_kernels(const ScenarioConfig& cfg, const std::vector<kernel::KernelShape>& shapes);

// --- Verification suite ---------------------------------------------------

struct SuiteEntry {
    std::string name;
    std::string file;
    bool pass = false;
};

struct SuiteResult {
    std::vector<analysis::BoundReport> reports;
    std::vector<SuiteEntry> entries;
    bool all_pass = false;
};

struct SuiteOptions {
    std::size_t state_bound_steps = 100000;
    std::size_t decay_steps = 5000;
    std::size_t dilution_t_max = 5000;
    std::size_t trials = 1000;
    std::size_t gradient_instances = 100;
};

// Runs every verifier, writes one JSON per report plus dilution.csv,
// spectrum.csv and manifest.json into cfg.out_dir (created if missing).
// cfg.gamma_override feeds the state-bound dynamics.
SuiteResult run_verification_suite(const ScenarioConfig& cfg, const SuiteOptions& options = {});

// --- Probing exported runs -------------------------------------------------

struct ProbeRun {
    analysis::ProbeResult result;
    std::size_t rows = 0;
    std::size_t features = 0;
};

// Reads summary.json, states.bin, targets.csv and spectrum.csv from `dir`
// (as written by export_scenario), fits the ridge probe on state row norms
// and writes probe.json next to them.
ProbeRun run_probe(const std::filesystem::path& dir, double lambda, std::uint64_t seed);

}  // namespace hstream::stream
