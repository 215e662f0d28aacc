#include "hstream/readout.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hstream::readout {

double ScaleHead::logit(const MetricToken& token) const {
    require(token.z.size() == weights.size(), "scale head: token width does not match head");
    require(token.z.allFinite() && weights.allFinite() && std::isfinite(bias), "scale head: non-finite input");
    return weights.dot(token.z) + bias;
}

double predict_scale(const MetricToken& token, const ScaleHead& head) {
    const double g = head.logit(token);
    if (std::abs(g) > kMaxScaleLogit)
        throw std::overflow_error("predict_scale: |g(z)| = " + format_double(std::abs(g)) +
                                  " exceeds 700; exp would leave the double range");
    return std::exp(g);
}

MetricToken metric_token_from_state(const gla::RecurrentState& state, std::span<const std::size_t> slow_channels) {
    const auto dv = static_cast<Eigen::Index>(state.d_v());
    MetricToken token{Vector(static_cast<Eigen::Index>(slow_channels.size() * state.heads()) * dv)};
    Eigen::Index at = 0;
    for (std::size_t c : slow_channels) {
        require(c < state.d_k(), "metric_token_from_state: channel out of range");
        for (std::size_t h = 0; h < state.heads(); ++h) {
            token.z.segment(at, dv) = state.head(h).row(static_cast<Eigen::Index>(c)).transpose();
            at += dv;
        }
    }
    return token;
}

Eigen::Quaterniond canonical_quaternion(const Eigen::Quaterniond& q) {
    const double n = q.norm();
    require(n > 0.0 && std::isfinite(n), "quaternion must be nonzero and finite");
    Eigen::Quaterniond out(q.coeffs() / n);
    if (out.w() < 0.0) out.coeffs() *= -1.0;
    return out;
}

void PoseEstimate::validate() const {
    require(translation.allFinite(), "pose: translation must be finite");
    require(std::abs(rotation.norm() - 1.0) <= 1e-9, "pose: rotation must be a unit quaternion");
    require(rotation.w() >= 0.0, "pose: rotation must be canonical (w >= 0)");
    require(focal > 0.0 && std::isfinite(focal), "pose: focal length must be positive");
}

void DepthMap::validate() const {
    require(depth.rows() == confidence.rows() && depth.cols() == confidence.cols(), "depth map: shape mismatch");
    require(depth.allFinite() && (depth.array() >= 0.0).all(), "depth map: depths must be finite and >= 0");
    require((confidence.array() > 0.0).all() && (confidence.array() <= 1.0).all(),
            "depth map: confidence must lie in (0, 1]");
}

ScaledPrediction apply_scale(const PoseEstimate& pose, const DepthMap& depth, double scale) {
    require(scale > 0.0 && std::isfinite(scale), "apply_scale: scale must be positive");
    ScaledPrediction out{pose, depth};
    out.pose.translation = scale * pose.translation;
    out.depth.depth = scale * depth.depth;
    return out;
}

PoseEstimate fuse_relative_pose(std::span<const PoseEstimate> poses, std::span<const double> weights) {
    require(!poses.empty(), "fuse_relative_pose: need at least one pose");
    require(poses.size() == weights.size(), "fuse_relative_pose: one weight per pose");
    double total = 0.0;
    for (double w : weights) {
        require(w >= 0.0 && std::isfinite(w), "fuse_relative_pose: weights must be nonnegative");
        total += w;
    }
    require(std::abs(total - 1.0) <= 1e-9, "fuse_relative_pose: weights must sum to 1");

    const Eigen::Vector4d anchor = poses.front().rotation.coeffs();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    Eigen::Vector4d quat = Eigen::Vector4d::Zero();
    double focal = 0.0;
    for (std::size_t i = 0; i < poses.size(); ++i) {
        const double w = weights[i];
        translation += w * poses[i].translation;
        focal += w * poses[i].focal;
        Eigen::Vector4d q = poses[i].rotation.coeffs();
        if (q.dot(anchor) < 0.0) q = -q;
        quat += w * q;
    }
    const double n = quat.norm();
    if (!(n > 1e-12)) throw std::domain_error("fuse_relative_pose: quaternions cancel (antipodal average)");
    PoseEstimate out;
    out.translation = translation;
    out.rotation = canonical_quaternion(Eigen::Quaterniond(quat / n));
    out.focal = focal;
    return out;
}

double smooth_l1(double residual, double beta) {
    const double a = std::abs(residual);
    return a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
}

double geodesic_distance(const Eigen::Quaterniond& a, const Eigen::Quaterniond& b) {
    // Equals 2 acos(|<a,b>|) but stays exact near zero, where acos loses
    // half the digits.
    const Eigen::Vector4d qa = a.normalized().coeffs();
    Eigen::Vector4d qb = b.normalized().coeffs();
    if (qa.dot(qb) < 0.0) qb = -qb;
    return 4.0 * std::atan2((qa - qb).norm(), (qa + qb).norm());
}

double depth_normalizer(const Matrix& target_depth) {
    std::vector<double> positive;
    positive.reserve(static_cast<std::size_t>(target_depth.size()));
    for (Eigen::Index i = 0; i < target_depth.size(); ++i)
        if (target_depth.data()[i] > 0.0) positive.push_back(target_depth.data()[i]);
    if (positive.empty()) return 1.0;
    const std::size_t mid = positive.size() / 2;
    std::nth_element(positive.begin(), positive.begin() + static_cast<std::ptrdiff_t>(mid), positive.end());
    double median = positive[mid];
    if (positive.size() % 2 == 0) {
        const double lower = *std::max_element(positive.begin(), positive.begin() + static_cast<std::ptrdiff_t>(mid));
        median = 0.5 * (median + lower);
    }
    return median;
}

LossBreakdown composite_loss(const FramePrediction& pred, const FrameTarget& target, const LossWeights& weights) {
    require(weights.pose >= 0.0 && weights.depth >= 0.0 && weights.scale >= 0.0,
            "composite_loss: loss weights must be nonnegative");
    pred.depth.validate();
    require(pred.depth.depth.rows() == target.depth.rows() && pred.depth.depth.cols() == target.depth.cols(),
            "composite_loss: predicted and target depth shapes differ");
    require(pred.scale > 0.0 && target.scale > 0.0, "composite_loss: scales must be positive");

    const double m = depth_normalizer(target.depth);
    LossBreakdown out;

    for (int c = 0; c < 3; ++c)
        out.pose += smooth_l1((pred.pose.translation(c) - target.pose.translation(c)) / m);
    out.pose += geodesic_distance(pred.pose.rotation, target.pose.rotation);

    const Eigen::Index pixels = target.depth.size();
    if (pixels > 0) {
        double sum = 0.0;
        for (Eigen::Index i = 0; i < pixels; ++i) {
            const double r = (pred.depth.depth.data()[i] - target.depth.data()[i]) / m;
            sum += pred.depth.confidence.data()[i] * smooth_l1(r);
        }
        out.depth = sum / static_cast<double>(pixels);
    }

    if (target.is_metric) out.scale = smooth_l1(std::log(pred.scale) - std::log(target.scale));

    out.total = weights.pose * out.pose + weights.depth * out.depth + weights.scale * out.scale;
    return out;
}

std::string LossBreakdown::to_json() const {
    return nlohmann::json{{"pose", pose}, {"depth", depth}, {"scale", scale}, {"total", total}}.dump();
}

}  // namespace hstream::readout
