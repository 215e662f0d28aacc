#include "hstream/kernel_model.hpp"

#include "hstream/common.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace hstream::kernel {

namespace {

template <class... Fs>
struct overloaded : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
overloaded(Fs...) -> overloaded<Fs...>;

void check_gamma(double gamma) {
    require_domain(std::isfinite(gamma) && gamma > 0.0 && gamma < 1.0,
                   "retention gamma must lie in (0, 1), got " + format_double(gamma));
}

// Same left-to-right product the recurrence applies, so integer lags agree
// bit-for-bit with eval_time_kernel under a constant gate.
double repeated_product(double gamma, std::size_t n) {
    double product = 1.0;
    for (std::size_t j = 0; j < n; ++j) product *= gamma;
    return product;
}

constexpr double kMaxSequentialLag = 1 << 20;

}  // namespace

std::string shape_name(const KernelShape& shape) {
    return std::visit(overloaded{
                          [](const Box&) { return std::string("box"); },
                          [](const BlockRefresh&) { return std::string("refresh"); },
                          [](const HeavyTail&) { return std::string("heavy_tail"); },
                          [](const SpikeSink&) { return std::string("sink"); },
                          [](const ExponentialChannelwise&) { return std::string("exponential"); },
                      },
                      shape);
}

KernelProfile::KernelProfile(std::size_t horizon, std::vector<double> weights)
    : horizon_(horizon), weights_(std::move(weights)) {
    require(horizon_ >= 1, "kernel horizon must be >= 1");
    require(weights_.size() == horizon_ * horizon_, "kernel table must be T x T");
    for (std::size_t r = 0; r < horizon_; ++r) {
        for (std::size_t c = 0; c < horizon_; ++c) {
            const double w = weights_[r * horizon_ + c];
            require(std::isfinite(w) && w >= 0.0, "kernel weights must be finite and nonnegative");
            require(c <= r || w == 0.0, "kernel table must be causal (K(t,i) = 0 for i > t)");
        }
    }
}

double KernelProfile::weight(std::size_t t, std::size_t i) const {
    if (t < 1 || t > horizon_ || i < 1 || i > horizon_) throw std::out_of_range("kernel index out of range");
    return weights_[(t - 1) * horizon_ + (i - 1)];
}

std::span<const double> KernelProfile::row(std::size_t t) const {
    if (t < 1 || t > horizon_) throw std::out_of_range("kernel row out of range");
    return std::span<const double>(weights_).subspan((t - 1) * horizon_, horizon_);
}

void KernelProfile::write_csv(std::ostream& out) const {
    out << "t,i,weight\n";
    for (std::size_t t = 1; t <= horizon_; ++t) {
        for (std::size_t i = 1; i <= t; ++i) {
            const double w = weights_[(t - 1) * horizon_ + (i - 1)];
            if (w != 0.0) out << t << ',' << i << ',' << format_double(w) << '\n';
        }
    }
}

double eval_time_kernel(std::span<const double> gammas_per_step, std::size_t t, std::size_t i) {
    if (i < 1 || i > t || t > gammas_per_step.size())
        throw std::out_of_range("eval_time_kernel requires 1 <= i <= t <= length(gammas)");
    double product = 1.0;
    for (std::size_t j = i + 1; j <= t; ++j) product *= gammas_per_step[j - 1];
    return product;
}

double eval_channel_kernel(double gamma, double lag) {
    check_gamma(gamma);
    require_domain(std::isfinite(lag) && lag >= 0.0, "lag must be finite and nonnegative");
    if (lag == std::floor(lag) && lag <= kMaxSequentialLag)
        return repeated_product(gamma, static_cast<std::size_t>(lag));
    return std::pow(gamma, lag);
}

double effective_horizon(double gamma) {
    check_gamma(gamma);
    return -1.0 / std::log(gamma);
}

double gamma_for_horizon(double tau) {
    require_domain(std::isfinite(tau) && tau > 0.0, "horizon must be positive and finite");
    return std::exp(-1.0 / tau);
}

ChannelPartition partition_channels(std::span<const double> gammas, double threshold) {
    require_domain(threshold > 0.0 && threshold < 1.0, "partition threshold must lie in (0, 1)");
    ChannelPartition out;
    for (std::size_t c = 0; c < gammas.size(); ++c) {
        check_gamma(gammas[c]);
        (gammas[c] < threshold ? out.fast : out.slow).push_back(c);
    }
    return out;
}

KernelProfile compose_kernel(const KernelProfile& spatial, const KernelProfile& time) {
    require(spatial.horizon() == time.horizon(), "compose_kernel: horizon mismatch");
    const std::size_t T = spatial.horizon();
    std::vector<double> w(T * T, 0.0);
    for (std::size_t t = 1; t <= T; ++t) {
        const auto a = spatial.row(t);
        const auto b = time.row(t);
        for (std::size_t i = 0; i < t; ++i) w[(t - 1) * T + i] = a[i] * b[i];
    }
    return KernelProfile(T, std::move(w));
}

KernelProfile build_profile(const KernelShape& shape, std::size_t horizon) {
    require(horizon >= 1, "build_profile: horizon must be >= 1");
    const std::size_t T = horizon;
    std::vector<double> w(T * T, 0.0);
    auto at = [&](std::size_t t, std::size_t i) -> double& { return w[(t - 1) * T + (i - 1)]; };

    std::visit(overloaded{
                   [&](const Box& s) {
                       require(s.window >= 1, "Box window must be >= 1");
                       for (std::size_t t = 1; t <= T; ++t)
                           for (std::size_t i = 1; i <= t; ++i)
                               if (t - i < s.window) at(t, i) = 1.0;
                   },
                   [&](const BlockRefresh& s) {
                       require(s.period >= 1, "BlockRefresh period must be >= 1");
                       for (std::size_t t = 1; t <= T; ++t)
                           for (std::size_t i = 1; i <= t; ++i)
                               if ((i - 1) / s.period == (t - 1) / s.period) at(t, i) = 1.0;
                   },
                   [&](const HeavyTail&) {
                       for (std::size_t t = 1; t <= T; ++t)
                           for (std::size_t i = 1; i <= t; ++i) at(t, i) = 1.0;
                   },
                   [&](const SpikeSink& s) {
                       require(s.sink_position >= 1, "SpikeSink position is 1-based");
                       require(s.sink_mass > 0.0 && s.sink_mass <= 1.0, "SpikeSink mass must lie in (0, 1]");
                       for (std::size_t t = 1; t <= T; ++t) {
                           if (s.sink_position > t || t == 1) {
                               for (std::size_t i = 1; i <= t; ++i) at(t, i) = 1.0 / static_cast<double>(t);
                               continue;
                           }
                           const double rest = (1.0 - s.sink_mass) / static_cast<double>(t - 1);
                           for (std::size_t i = 1; i <= t; ++i) at(t, i) = rest;
                           at(t, s.sink_position) = s.sink_mass;
                       }
                   },
                   [&](const ExponentialChannelwise& s) {
                       require(s.channel < s.gammas.size(), "ExponentialChannelwise channel out of range");
                       const double gamma = s.gammas[s.channel];
                       check_gamma(gamma);
                       for (std::size_t t = 1; t <= T; ++t)
                           for (std::size_t i = 1; i <= t; ++i) at(t, i) = repeated_product(gamma, t - i);
                   },
               },
               shape);
    return KernelProfile(T, std::move(w));
}

}  // namespace hstream::kernel
