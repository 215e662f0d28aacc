#include "hstream/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hstream::analysis {

Vector state_features(const gla::RecurrentState& state) {
    const auto dk = static_cast<Eigen::Index>(state.d_k());
    Vector out(dk * static_cast<Eigen::Index>(state.heads()));
    for (std::size_t h = 0; h < state.heads(); ++h)
        out.segment(static_cast<Eigen::Index>(h) * dk, dk) = state.head(h).rowwise().norm();
    return out;
}

double ProbeResult::predict(const Vector& features) const {
    require(features.size() == weights.size(), "ProbeResult::predict: feature width mismatch");
    const Vector z = (features - feature_mean).cwiseQuotient(feature_scale);
    return weights.dot(z) + intercept;
}

namespace {

BandShares attribute(const Vector& weights, std::span<const RetentionBand> bands) {
    double share[3] = {0.0, 0.0, 0.0};
    bool present[3] = {false, false, false};
    for (std::size_t j = 0; j < bands.size(); ++j) {
        const auto b = static_cast<std::size_t>(bands[j]);
        share[b] += std::abs(weights(static_cast<Eigen::Index>(j)));
        present[b] = true;
    }
    const double total = share[0] + share[1] + share[2];
    if (total > 0.0) {
        for (double& s : share) s /= total;
    } else {
        // All-zero weights: split evenly among the bands that have features.
        const double count = static_cast<double>(present[0] + present[1] + present[2]);
        for (std::size_t b = 0; b < 3; ++b) share[b] = present[b] ? 1.0 / count : 0.0;
    }
    return {share[0], share[1], share[2]};
}

}  // namespace

ProbeResult ridge_probe_split(const Matrix& train_x, const Vector& train_y, const Matrix& test_x,
                              const Vector& test_y, double lambda, std::span<const RetentionBand> bands) {
    require(std::isfinite(lambda) && lambda >= 0.0, "ridge_probe: lambda must be finite and >= 0");
    require(train_x.rows() >= 1 && test_x.rows() >= 1, "ridge_probe: need at least one train and one test row");
    require(train_x.cols() >= 1 && train_x.cols() == test_x.cols(), "ridge_probe: feature widths differ");
    require(train_y.size() == train_x.rows() && test_y.size() == test_x.rows(),
            "ridge_probe: one target per row");
    require(bands.size() == static_cast<std::size_t>(train_x.cols()), "ridge_probe: one band per feature column");
    require(train_x.allFinite() && test_x.allFinite() && train_y.allFinite() && test_y.allFinite(),
            "ridge_probe: non-finite input");

    const auto n = static_cast<double>(train_x.rows());
    ProbeResult out;
    out.train_rows = static_cast<std::size_t>(train_x.rows());
    out.test_rows = static_cast<std::size_t>(test_x.rows());
    out.feature_mean = train_x.colwise().mean().transpose();
    const Matrix centered = train_x.rowwise() - out.feature_mean.transpose();
    out.feature_scale = (centered.colwise().squaredNorm() / n).cwiseSqrt().transpose();
    for (Eigen::Index j = 0; j < out.feature_scale.size(); ++j)
        if (!(out.feature_scale(j) > 0.0)) out.feature_scale(j) = 1.0;
    const Matrix xs = centered * out.feature_scale.cwiseInverse().asDiagonal();
    out.intercept = train_y.mean();
    const Vector yc = train_y.array() - out.intercept;

    const auto d = xs.cols();
    if (lambda == 0.0) {
        Eigen::ColPivHouseholderQR<Matrix> qr(xs);
        qr.setThreshold(1e-12);
        if (qr.rank() < d)
            throw std::domain_error("ridge_probe: X^T X is singular with lambda = 0; use lambda > 0");
        out.weights = qr.solve(yc);
    } else {
        const Matrix gram = xs.transpose() * xs + lambda * Matrix::Identity(d, d);
        out.weights = gram.ldlt().solve(xs.transpose() * yc);
    }

    double sse = 0.0;
    for (Eigen::Index i = 0; i < test_x.rows(); ++i) {
        const double r = test_y(i) - out.predict(test_x.row(i).transpose());
        sse += r * r;
    }
    const double sst = (test_y.array() - test_y.mean()).square().sum();
    // No variance left to explain on the held-out rows: report 0.
    out.r_squared = sst > 0.0 ? 1.0 - sse / sst : 0.0;
    out.band_attribution = attribute(out.weights, bands);
    return out;
}

ProbeResult ridge_probe(const Matrix& features, const Vector& targets, double lambda,
                        std::span<const RetentionBand> bands, const ProbeOptions& options) {
    require(features.rows() >= 2, "ridge_probe: need at least two rows");
    require(targets.size() == features.rows(), "ridge_probe: one target per row");
    require(options.train_fraction > 0.0 && options.train_fraction < 1.0,
            "ridge_probe: train fraction must lie in (0, 1)");
    const auto rows = static_cast<std::size_t>(features.rows());
    std::vector<Eigen::Index> order(rows);
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng(options.seed);
    std::shuffle(order.begin(), order.end(), rng);
    auto train = static_cast<std::size_t>(std::floor(options.train_fraction * static_cast<double>(rows)));
    train = std::clamp<std::size_t>(train, 1, rows - 1);

    const std::vector<Eigen::Index> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train));
    const std::vector<Eigen::Index> test_idx(order.begin() + static_cast<std::ptrdiff_t>(train), order.end());
    return ridge_probe_split(features(train_idx, Eigen::all), targets(train_idx),
                             features(test_idx, Eigen::all), targets(test_idx), lambda, bands);
}

}  // namespace hstream::analysis
