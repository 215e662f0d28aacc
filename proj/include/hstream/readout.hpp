#pragma once

// Metric scale readout, scale application, window pose fusion, and the
// composite pose/depth/scale objective.

#include "hstream/common.hpp"
#include "hstream/linear_attention.hpp"

#include <Eigen/Geometry>

#include <span>
#include <string>
#include <vector>

namespace hstream::readout {

struct MetricToken {
    Vector z;
};

// g(z) = w . z + b
struct ScaleHead {
    Vector weights;
    double bias = 0.0;

    double logit(const MetricToken& token) const;
};

// Largest |g(z)| accepted before exp() would overflow or underflow.
inline constexpr double kMaxScaleLogit = 700.0;

// s = exp(g(z)). Throws std::overflow_error when |g(z)| > 700 and
// std::invalid_argument on non-finite input or width mismatch.
double predict_scale(const MetricToken& token, const ScaleHead& head);

// Metric token read from the slow (high-retention) rows of a recurrent state:
// for each listed key channel, that row of every head, concatenated.
MetricToken metric_token_from_state(const gla::RecurrentState& state, std::span<const std::size_t> slow_channels);

struct PoseEstimate {
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
    double focal = 1.0;

    // Unit norm, w >= 0, focal > 0. Throws std::invalid_argument otherwise.
    void validate() const;
};

// Normalizes q and flips it into the w >= 0 hemisphere.
Eigen::Quaterniond canonical_quaternion(const Eigen::Quaterniond& q);

struct DepthMap {
    Matrix depth;       // scene units, >= 0
    Matrix confidence;  // (0, 1]

    void validate() const;
};

struct ScaledPrediction {
    PoseEstimate pose;
    DepthMap depth;
};

// t = s * t_raw, D = s * D_raw; rotation, focal and confidence untouched.
ScaledPrediction apply_scale(const PoseEstimate& pose, const DepthMap& depth, double scale);

// Weighted translation / focal means and a normalized weighted quaternion
// mean after aligning every quaternion to the first token's hemisphere.
PoseEstimate fuse_relative_pose(std::span<const PoseEstimate> poses, std::span<const double> weights);

struct LossWeights {
    double pose = 1.0;
    double depth = 1.0;
    double scale = 1.0;
};

struct FramePrediction {
    PoseEstimate pose;
    DepthMap depth;
    double scale = 1.0;
};

struct FrameTarget {
    PoseEstimate pose;
    Matrix depth;
    double scale = 1.0;
    bool is_metric = false;
};

struct LossBreakdown {
    double pose = 0.0;   // unweighted
    double depth = 0.0;  // unweighted
    double scale = 0.0;  // unweighted, 0 unless the target is metric
    double total = 0.0;  // weighted sum

    std::string to_json() const;
};

inline constexpr double kSmoothL1Beta = 1.0;

double smooth_l1(double residual, double beta = kSmoothL1Beta);

// Quaternion geodesic angle 2 acos(|<a, b>|).
double geodesic_distance(const Eigen::Quaterniond& a, const Eigen::Quaterniond& b);

// Median of the positive target depths; 1 when there are none.
double depth_normalizer(const Matrix& target_depth);

// pose  = sum_xyz SmoothL1((t_pred - t_gt) / m) + geodesic(q_pred, q_gt)
// depth = mean_p c_p * SmoothL1((D_pred - D_gt)_p / m), c = predicted confidence
// scale = SmoothL1(log s_pred - log s_gt) on metric samples only
// with m the median target depth.
LossBreakdown composite_loss(const FramePrediction& pred, const FrameTarget& target, const LossWeights& weights);

}  // namespace hstream::readout
