#include "hstream/linear_attention.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

using namespace hstream;
using namespace hstream::gla;

namespace {

GlaParams identity_params(std::size_t d, std::size_t heads, double bias) {
    GlaParams p;
    p.dims = {d * heads, d, d, heads};
    const auto n = static_cast<Eigen::Index>(d * heads);
    p.w_gamma = Matrix::Zero(n, n);
    p.b_gamma = Vector::Constant(n, bias);
    p.w_q = Matrix::Identity(n, n);
    p.w_k = Matrix::Identity(n, n);
    p.w_v = Matrix::Identity(n, n);
    return p;
}

// Unrolled sum: S_t = sum_i diag(prod_{j>i} gamma_j) phi(k_i) v_i^T, computed
// entry by entry without the recurrence.
Matrix unrolled_plain_state(const Matrix& feats, const Matrix& values, const Matrix& gammas, Eigen::Index t) {
    Matrix S = Matrix::Zero(feats.rows(), values.rows());
    for (Eigen::Index i = 0; i <= t; ++i)
        for (Eigen::Index r = 0; r < feats.rows(); ++r) {
            double decay = 1.0;
            for (Eigen::Index j = i + 1; j <= t; ++j) decay *= gammas(r, j);
            for (Eigen::Index c = 0; c < values.rows(); ++c) S(r, c) += decay * feats(r, i) * values(c, i);
        }
    return S;
}

}  // namespace

TEST(Feature, IdentityAndShiftedExp) {
    Vector k(4);
    k << -2.0, -0.0, 0.0, 1.5;
    EXPECT_EQ(feature<double>(k, FeatureMap::Identity), k);
    const Vector f = feature<double>(k, FeatureMap::ShiftedExp);
    EXPECT_DOUBLE_EQ(f(0), std::exp(-2.0));
    EXPECT_DOUBLE_EQ(f(1), 1.0);
    EXPECT_DOUBLE_EQ(f(2), 1.0);
    EXPECT_DOUBLE_EQ(f(3), 2.5);
    EXPECT_TRUE((f.array() > 0.0).all());
}

TEST(Gate, RangeAndClamp) {
    auto p = identity_params(3, 1, 0.0);
    Vector x = Vector::Zero(3);
    EXPECT_TRUE(gate<double>(x, p).isApprox(Vector::Constant(3, 0.5)));
    p.b_gamma = Vector::Constant(3, 2.0);
    EXPECT_NEAR(gate<double>(x, p)(0), 0.8807970779778823, 1e-15);
    p.b_gamma << 100.0, -100.0, 0.0;
    const Vector g = gate<double>(x, p);
    EXPECT_EQ(g(0), 1.0 - kGateEpsilon);
    EXPECT_EQ(g(1), kGateEpsilon);
    x(0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(gate<double>(x, p), std::invalid_argument);
    EXPECT_THROW(gate<double>(Vector::Zero(4), p), std::invalid_argument);
}

TEST(StateUpdate, ThreeStepUnrolledExample) {
    // gamma = 0.5 everywhere, keys e_1, values 1: S_3 row 0 = 0.25 + 0.5 + 1.
    auto p = identity_params(2, 1, 0.0);
    RecurrentState s(2, 2, 1);
    Vector k(2), v(2);
    k << 1.0, 0.0;
    v << 1.0, 1.0;
    const Vector g = Vector::Constant(2, 0.5);
    for (int i = 0; i < 3; ++i) state_update_inplace(s, k, v, g, p);
    EXPECT_DOUBLE_EQ(s.head(0)(0, 0), 1.75);
    EXPECT_DOUBLE_EQ(s.head(0)(0, 1), 1.75);
    EXPECT_EQ(s.head(0).row(1).norm(), 0.0);
    EXPECT_EQ(s.step(), 3u);
    Vector q(2);
    q << 2.0, 5.0;
    EXPECT_TRUE(readout<double>(q, s).isApprox(Vector::Constant(2, 3.5)));
}

TEST(StateUpdate, MatchesUnrolledSumWithHeterogeneousGates) {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::Index T = 12, dk = 4, dv = 3;
        GlaParams p;
        p.dims = {1, 4, 3, 1};
        p.w_gamma = Matrix::Zero(dk, 1);
        p.b_gamma = Vector::Zero(dk);
        p.w_q = Matrix::Zero(dk, 1);
        p.w_k = Matrix::Zero(dk, 1);
        p.w_v = Matrix::Zero(dv, 1);
        p.feature_map = trial % 2 ? FeatureMap::ShiftedExp : FeatureMap::Identity;
        const Matrix keys = random_uniform(rng, dk, T, -1, 1);
        const Matrix values = random_uniform(rng, dv, T, -1, 1);
        const Matrix gammas = random_uniform(rng, dk, T, 0.05, 0.999);
        Matrix feats(dk, T);
        for (Eigen::Index t = 0; t < T; ++t)
            for (Eigen::Index r = 0; r < dk; ++r) {
                const double x = keys(r, t);
                feats(r, t) = p.feature_map == FeatureMap::Identity ? x : (x > 0 ? x + 1.0 : std::exp(x));
            }
        RecurrentState s(4, 3, 1);
        for (Eigen::Index t = 0; t < T; ++t) {
            state_update_inplace<double>(s, keys.col(t), values.col(t), gammas.col(t), p);
            EXPECT_LT((s.head(0) - unrolled_plain_state(feats, values, gammas, t)).cwiseAbs().maxCoeff(), 1e-13);
        }
    }
}

TEST(StateUpdate, DeltaRuleByHand) {
    auto p = identity_params(2, 1, 0.0);
    p.value_rule = ValueRule::DeltaRule;
    p.eta = 0.5;
    RecurrentState s(2, 2, 1);
    s.head(0) << 1.0, 2.0, 3.0, 4.0;
    Vector k(2), v(2), g(2);
    k << 1.0, 1.0;
    v << 10.0, 20.0;
    g << 0.5, 0.25;
    // gamma .* k = (0.5, 0.25); S^T (0.5, 0.25) = (0.5 + 0.75, 1 + 1) = (1.25, 2)
    // vt = 0.5 * ((10, 20) - (1.25, 2)) = (4.375, 9)
    // S' = diag(g) S + k vt^T
    const auto next = state_update<double>(s, k, v, g, p);
    Matrix expect(2, 2);
    expect << 0.5 + 4.375, 1.0 + 9.0, 0.75 + 4.375, 1.0 + 9.0;
    EXPECT_TRUE(next.head(0).isApprox(expect, 1e-15));
    EXPECT_EQ(s.head(0)(0, 0), 1.0);  // input untouched
}

TEST(StateUpdate, HeadsAreIndependentSlices) {
    auto p = identity_params(2, 2, 0.0);
    RecurrentState s(2, 2, 2);
    Vector k = Vector::Zero(4), v = Vector::Zero(4);
    k(2) = 1.0;  // head 1, channel 0
    v(3) = 7.0;  // head 1, value channel 1
    state_update_inplace<double>(s, k, v, Vector::Constant(4, 0.5), p);
    EXPECT_EQ(s.head(0).norm(), 0.0);
    EXPECT_EQ(s.head(1)(0, 1), 7.0);
    Vector q = Vector::Zero(4);
    q(2) = 1.0;
    const Vector o = readout<double>(q, s);
    EXPECT_EQ(o(3), 7.0);
    EXPECT_EQ(o.head(2).norm(), 0.0);
}

TEST(StateUpdate, DimensionAndFiniteChecks) {
    auto p = identity_params(2, 1, 0.0);
    RecurrentState s(2, 2, 1);
    EXPECT_THROW(state_update_inplace<double>(s, Vector::Zero(3), Vector::Zero(2), Vector::Ones(2), p),
                 std::invalid_argument);
    EXPECT_THROW(state_update_inplace<double>(s, Vector::Zero(2), Vector::Zero(1), Vector::Ones(2), p),
                 std::invalid_argument);
    EXPECT_THROW(readout<double>(Vector::Zero(3), s), std::invalid_argument);
    Vector huge = Vector::Constant(2, 1e200);
    EXPECT_THROW(state_update_inplace<double>(s, huge, huge, Vector::Ones(2), p), std::overflow_error);
}

TEST(ProcessChunk, CausalOutputs) {
    Rng rng(5);
    const auto p = init_params({6, 3, 2, 2}, rng);
    TokenSequence a{random_uniform(rng, 6, 10, -1, 1)};
    TokenSequence b = a;
    b.x.col(7) += Vector::Constant(6, 3.0);
    const auto s0 = RecurrentState::zeros_like(p.dims);
    const auto ra = process_chunk(a, s0, p);
    const auto rb = process_chunk(b, s0, p);
    EXPECT_EQ(ra.outputs.leftCols(7), rb.outputs.leftCols(7));
    EXPECT_GT((ra.outputs.col(7) - rb.outputs.col(7)).norm(), 0.0);
}

TEST(ProcessChunk, SplitEqualsWhole) {
    Rng rng(8);
    auto p = init_params({5, 3, 3, 2}, rng);
    p.value_rule = ValueRule::DeltaRule;
    p.eta = 0.3;
    TokenSequence all{random_uniform(rng, 5, 30, -1, 1)};
    const auto whole = process_chunk(all, RecurrentState::zeros_like(p.dims), p);
    auto state = RecurrentState::zeros_like(p.dims);
    Matrix outs(6, 30);
    Eigen::Index at = 0;
    for (Eigen::Index len : {7, 1, 13, 9}) {
        const auto r = process_chunk(TokenSequence{all.x.middleCols(at, len)}, state, p);
        outs.middleCols(at, len) = r.outputs;
        state = r.state;
        at += len;
    }
    EXPECT_LT((outs - whole.outputs).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(state.step(), 30u);
}

TEST(ProcessChunk, FloatTracksDouble) {
    Rng rng(9);
    const auto p = init_params({4, 2, 2, 1}, rng);
    TokenSequence x{random_uniform(rng, 4, 50, -1, 1)};
    const auto rd = process_chunk(x, RecurrentState::zeros_like(p.dims), p);
    const auto pf = p.cast<float>();
    BasicTokenSequence<float> xf{x.x.cast<float>()};
    const auto rf = process_chunk(xf, BasicRecurrentState<float>::zeros_like(pf.dims), pf);
    EXPECT_LT((rf.outputs.cast<double>() - rd.outputs).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(ProcessChunk, RejectsMismatchedState) {
    Rng rng(1);
    const auto p = init_params({4, 2, 2, 1}, rng);
    TokenSequence x{Matrix::Zero(4, 3)};
    EXPECT_THROW(process_chunk(x, RecurrentState(3, 2, 1), p), std::invalid_argument);
    EXPECT_THROW(process_chunk(TokenSequence{Matrix::Zero(5, 3)}, RecurrentState(2, 2, 1), p),
                 std::invalid_argument);
}

TEST(TttStep, EqualsDeltaUpdateWithConstantGate) {
    Rng rng(2);
    auto p = identity_params(3, 1, 0.0);
    p.value_rule = ValueRule::DeltaRule;
    for (int trial = 0; trial < 50; ++trial) {
        const double g = 0.1 + 0.8 * (trial / 50.0);
        p.eta = 0.05 * trial;
        RecurrentState s(3, 3, 1);
        s.head(0) = random_uniform(rng, 3, 3, -1, 1);
        const Vector k = random_uniform(rng, 3, 1, -1, 1);
        const Vector v = random_uniform(rng, 3, 1, -1, 1);
        const auto a = ttt_step<double>(s, k, v, g, p.eta);
        const auto b = state_update<double>(s, k, v, Vector::Constant(3, g), p);
        EXPECT_LT((a.head(0) - b.head(0)).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(TttStep, ZeroStepSizeOnlyDecays) {
    RecurrentState s(2, 2, 1);
    s.head(0) << 1, 2, 3, 4;
    const auto n = ttt_step<double>(s, Vector::Ones(2), Vector::Ones(2), 0.5, 0.0);
    EXPECT_EQ(n.head(0), 0.5 * s.head(0));
    EXPECT_THROW(ttt_step<double>(s, Vector::Ones(2), Vector::Ones(2), 0.5, -0.1), std::invalid_argument);
}

TEST(Objective, RecursionEqualsSum) {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const Matrix S = random_uniform(rng, 3, 2, -1, 1);
        const Matrix keys = random_uniform(rng, 3, 15, -1, 1);
        const Matrix values = random_uniform(rng, 2, 15, -1, 1);
        std::vector<double> g(15);
        for (auto& x : g) x = 0.2 + 0.79 * std::uniform_real_distribution<double>()(rng);
        double rec = 0.0;
        for (Eigen::Index t = 0; t < 15; ++t) {
            rec = recursive_objective_step(rec, S, keys.col(t), values.col(t), g[static_cast<std::size_t>(t)]);
            const double direct = discounted_objective(S, keys.leftCols(t + 1), values.leftCols(t + 1),
                                                       std::span<const double>(g).first(static_cast<std::size_t>(t + 1)));
            EXPECT_NEAR(rec, direct, 1e-12 * std::max(1.0, direct));
        }
    }
}

TEST(Objective, SingleStepIsResidual) {
    Matrix S(1, 1);
    S << 2.0;
    Matrix k(1, 1), v(1, 1);
    k << 3.0;
    v << 1.0;
    const double g[] = {0.7};
    EXPECT_EQ(discounted_objective(S, k, v, g), 25.0);
    EXPECT_THROW(recursive_objective_step(-1.0, S, k.col(0), v.col(0), 0.5), std::invalid_argument);
}

TEST(Snapshot, RoundTripMultiHead) {
    Rng rng(6);
    RecurrentState s(3, 2, 2);
    s.head(0) = random_uniform(rng, 3, 2, -1, 1);
    s.head(1) = random_uniform(rng, 3, 2, -1, 1);
    std::stringstream buf;
    write_snapshot(buf, s);
    write_snapshot(buf, s);
    EXPECT_EQ(buf.str().size(), 2u * (16 + 3 * 4 * 8));
    StateSnapshot snap;
    int count = 0;
    while (read_snapshot(buf, snap)) {
        ++count;
        const auto back = snap.to_state(2);
        EXPECT_EQ(back.head(0), s.head(0));
        EXPECT_EQ(back.head(1), s.head(1));
    }
    EXPECT_EQ(count, 2);
}

TEST(Snapshot, LayoutIsHeadsSideBySide) {
    RecurrentState s(2, 1, 2);
    s.head(0) << 1, 2;
    s.head(1) << 3, 4;
    const auto snap = make_snapshot(s);
    EXPECT_EQ(snap.columns, 2u);
    EXPECT_EQ(snap.data, (std::vector<double>{1, 3, 2, 4}));
    std::ostringstream out;
    write_snapshot(out, s);
    const std::string bytes = out.str();
    EXPECT_EQ(bytes.substr(0, 4), "GLAS");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2u);
}

TEST(Snapshot, MalformedInput) {
    RecurrentState s(2, 2, 1);
    std::ostringstream out;
    write_snapshot(out, s);
    const std::string good = out.str();
    StateSnapshot snap;
    {
        std::istringstream in(good.substr(0, 10));
        EXPECT_THROW(read_snapshot(in, snap), std::runtime_error);
    }
    {
        std::istringstream in(good.substr(0, good.size() - 1));
        EXPECT_THROW(read_snapshot(in, snap), std::runtime_error);
    }
    {
        std::string bad = good;
        bad[0] = 'X';
        std::istringstream in(bad);
        EXPECT_THROW(read_snapshot(in, snap), std::runtime_error);
    }
    {
        std::string bad = good;
        bad[4] = 9;
        std::istringstream in(bad);
        EXPECT_THROW(read_snapshot(in, snap), std::runtime_error);
    }
    {
        std::istringstream in(good);
        ASSERT_TRUE(read_snapshot(in, snap));
        EXPECT_THROW(snap.to_state(3), std::invalid_argument);
    }
}
