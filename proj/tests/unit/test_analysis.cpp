#include "hstream/analysis.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace hstream;
using namespace hstream::analysis;

namespace {

// Smallest n with gamma^n below `fraction`, by repeated multiplication.
std::size_t first_step_below(double gamma, double fraction) {
    double w = 1.0;
    std::size_t n = 0;
    while (w >= fraction) {
        w *= gamma;
        ++n;
    }
    return n;
}

gla::GlaParams zero_gate_params(std::size_t d_model, std::size_t d_k, double bias) {
    gla::GlaParams p;
    p.dims = {d_model, d_k, 2, 1};
    const auto dk = static_cast<Eigen::Index>(d_k);
    const auto dm = static_cast<Eigen::Index>(d_model);
    p.w_gamma = Matrix::Zero(dk, dm);
    p.b_gamma = Vector::Constant(dk, bias);
    p.w_q = Matrix::Zero(dk, dm);
    p.w_k = Matrix::Zero(dk, dm);
    p.w_v = Matrix::Zero(2, dm);
    return p;
}

}  // namespace

TEST(BoundReport, RecordAndFinalize) {
    BoundReport r;
    r.finalize();
    EXPECT_FALSE(r.pass);  // nothing checked
    r.record(-1.0);
    r.record(1e-13);
    r.finalize();
    EXPECT_TRUE(r.pass);
    r.record(NAN);
    r.finalize();
    EXPECT_FALSE(r.pass);
    EXPECT_EQ(r.max_violation, INFINITY);
    BoundReport s;
    s.record(-1.0);
    s.finalize(false);
    EXPECT_FALSE(s.pass);
}

TEST(BoundReport, JsonFields) {
    BoundReport r;
    r.name = "x";
    r.record(-0.5);
    r.per_step_margin = {0.5};
    r.details["k"] = 2.0;
    r.finalize();
    const std::string with = r.to_json(true), without = r.to_json(false);
    for (const char* key : {"\"name\"", "\"samples\"", "\"max_violation\"", "\"pass\"", "\"details\""})
        EXPECT_NE(with.find(key), std::string::npos) << key;
    EXPECT_NE(with.find("per_step_margin"), std::string::npos);
    EXPECT_EQ(without.find("per_step_margin"), std::string::npos);
}

TEST(DecayThreshold, MatchesRepeatedMultiplication) {
    EXPECT_EQ(decay_threshold_step(0.5), 20u);
    for (double g : {0.3, 0.5, 0.9, 0.99, 0.999}) EXPECT_EQ(decay_threshold_step(g), first_step_below(g, 1e-6)) << g;
    EXPECT_THROW(decay_threshold_step(1.0), std::invalid_argument);
}

TEST(Contamination, UngatedIsBitIdentical) {
    const auto r = verify_contamination(300, {3, 2, 2}, 1);
    EXPECT_TRUE(r.pass) << r.to_json(false);
    EXPECT_EQ(r.details.at("bit_identical"), 1.0);
    EXPECT_EQ(r.details.at("max_drift"), 0.0);
}

TEST(Contamination, GatedControlDecreasesAndZeroCases) {
    const auto r = verify_contamination(300, {}, 2, 0.9);
    EXPECT_TRUE(r.pass) << r.to_json(false);
    // Zero initial state or zero query: nothing to carry, trivially identical.
    EXPECT_TRUE(verify_contamination(50, {}, 3, 1.0, true).pass);
    EXPECT_TRUE(verify_contamination(50, {}, 3, 1.0, false, Vector::Zero(4)).pass);
}

TEST(InitialDecay, EnvelopeHoldsForSeveralRetentions) {
    for (double g : {0.5, 0.9, 0.99}) {
        const auto r = verify_initial_decay(2000, {}, g, 4);
        EXPECT_TRUE(r.pass) << g << " " << r.to_json(false);
        EXPECT_EQ(r.per_step_margin.size(), 2000u);
    }
    EXPECT_TRUE(verify_initial_decay(100, {}, 0.9, 4, true).pass);
}

TEST(StateBound, HoldsAndControlGrowsLinearly) {
    const auto r = verify_state_bound(5000, 1.0, 1.0, 0.9, 5);
    EXPECT_TRUE(r.pass) << r.to_json(false);
    EXPECT_LE(r.details.at("max_state_norm"), 10.0);
    EXPECT_GT(r.details.at("control_slope"), 0.0);
    EXPECT_LE(r.details.at("control_slope"), 1.0);
}

TEST(StateBound, InjectedRetentionAboveBoundFails) {
    StateBoundOptions opts;
    opts.dynamics_gamma_override = 1.01;
    opts.run_control = false;
    EXPECT_FALSE(verify_state_bound(2000, 1.0, 1.0, 0.9, 5, opts).pass);
}

TEST(StateBound, NonzeroInitialState) {
    StateBoundOptions opts;
    opts.initial_norm = 50.0;
    EXPECT_TRUE(verify_state_bound(500, 2.0, 0.5, 0.8, 6, opts).pass);
}

TEST(Horizon, ThreeTauIsEMinusThree) {
    const double grid[] = {0.3, 0.5, 0.9, 0.99};
    EXPECT_TRUE(verify_horizon(grid, 1e-3).pass);
    // gamma = 0.5 at integer lag 5 keeps 1/32 < 5%.
    EXPECT_LT(std::pow(0.5, 5), 0.05);
    const double bad[] = {1.0};
    EXPECT_THROW(verify_horizon(bad, 1e-3), std::domain_error);
}

TEST(Verifiers, SmallRunsPass) {
    EXPECT_TRUE(verify_ttt_equivalence(200, {3, 3, 2}, 7).pass);
    EXPECT_TRUE(verify_recursion_sum(100, 8).pass);
    EXPECT_TRUE(verify_gradients(6, 9).pass);
    EXPECT_TRUE(verify_chunking({{64}, {21, 21, 21, 1}, {1, 63}}, 64, 10).pass);
    EXPECT_TRUE(verify_rope(100, 12, 11).pass);
    local::DilutionReport rows;
    EXPECT_TRUE(verify_dilution_bound(100, {4, 1.0}, 300, 12, &rows).pass);
    EXPECT_EQ(rows.rows.size(), 296u);
}

TEST(Verifiers, ChunkingMustCoverStream) {
    EXPECT_THROW(verify_chunking({{10, 10}}, 64, 1), std::invalid_argument);
}

TEST(RetentionSpectrum, ZeroBiasGivesHalfGate) {
    const auto p = zero_gate_params(3, 4, 0.0);
    const auto s = extract_retention_spectrum(p, Matrix::Ones(3, 5));
    ASSERT_EQ(s.layers.size(), 1u);
    for (Eigen::Index c = 0; c < 4; ++c) {
        EXPECT_DOUBLE_EQ(s.layers[0].gamma_bar(c), 0.5);
        EXPECT_NEAR(s.layers[0].tau(c), 1.4427, 1e-4);
    }
    EXPECT_EQ(s.bands(0), std::vector<RetentionBand>(4, RetentionBand::Short));
}

TEST(RetentionSpectrum, LargeBiasIsLongHorizon) {
    const auto p = zero_gate_params(2, 2, 8.0);
    const auto s = extract_retention_spectrum(p, Matrix::Zero(2, 1));
    EXPECT_GT(s.layers[0].tau(0), 2980.0);
    EXPECT_EQ(s.bands(0)[0], RetentionBand::Long);
}

TEST(RetentionSpectrum, MeanOverSamples) {
    // Gate of channel 0 depends on x: sigma(x) at x = +-1 averages to 1/2.
    auto p = zero_gate_params(1, 1, 0.0);
    p.w_gamma(0, 0) = 1.0;
    Matrix x(1, 2);
    x << 1.0, -1.0;
    EXPECT_NEAR(extract_retention_spectrum(p, x).layers[0].gamma_bar(0), 0.5, 1e-15);
}

TEST(RetentionSpectrum, MultiLayerCsvAndHistogram) {
    const std::vector<gla::GlaParams> layers{zero_gate_params(2, 2, 0.0), zero_gate_params(2, 2, 8.0)};
    const auto s = extract_retention_spectrum(layers, Matrix::Zero(2, 3));
    std::ostringstream out;
    s.write_csv(out);
    const std::string csv = out.str();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,channel,gamma_bar,tau");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
    const double edges[] = {0.0, 5.0, 50.0, 1e9};
    EXPECT_EQ(s.histogram(edges), (std::vector<std::size_t>{2, 0, 2}));
    EXPECT_THROW(extract_retention_spectrum(layers, Matrix::Zero(3, 3)), std::invalid_argument);
}

TEST(Bands, Thresholds) {
    EXPECT_EQ(band_of(4.999), RetentionBand::Short);
    EXPECT_EQ(band_of(5.0), RetentionBand::Medium);
    EXPECT_EQ(band_of(49.9), RetentionBand::Medium);
    EXPECT_EQ(band_of(50.0), RetentionBand::Long);
    EXPECT_EQ(to_string(RetentionBand::Long), "long");
    EXPECT_THROW(band_of(0.0), std::invalid_argument);
}
