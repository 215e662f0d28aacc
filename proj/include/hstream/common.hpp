#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>

namespace hstream {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

template <typename T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VectorT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Thrown when an argument violates a documented precondition.
inline void require(bool condition, const std::string& message) {
    if (!condition) throw std::invalid_argument(message);
}

inline void require_domain(bool condition, const std::string& message) {
    if (!condition) throw std::domain_error(message);
}

// Shortest round-trippable text for a double: 17 significant digits.
inline std::string format_double(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// All randomness in the library flows through this engine so that a seed
// fully determines every generated value.
using Rng = std::mt19937_64;

inline Matrix random_uniform(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
    return m;
}

inline Vector random_normal(Rng& rng, Eigen::Index n, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = dist(rng);
    return v;
}

inline Vector random_unit(Rng& rng, Eigen::Index n) {
    Vector v = random_normal(rng, n);
    double norm = v.norm();
    while (norm == 0.0) {
        v = random_normal(rng, n);
        norm = v.norm();
    }
    return v / norm;
}

}  // namespace hstream
