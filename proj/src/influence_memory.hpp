#pragma once

// Recurrent memories realizing each influence pattern over (feature, value)
// writes, plus the matching recursive bound on ||S_t||_F.

#include "hstream/kernel_model.hpp"
#include "hstream/linear_attention.hpp"

#include <algorithm>
#include <deque>
#include <variant>

namespace hstream::stream::detail {

template <typename T>
class InfluenceMemory {
public:
    InfluenceMemory(const kernel::KernelShape& shape, std::size_t d_k, std::size_t d_v, std::size_t heads)
        : shape_(shape), state_(d_k, d_v, heads), sink_(d_k, d_v, heads), rest_(d_k, d_v, heads) {}

    const gla::BasicRecurrentState<T>& state() const { return state_; }
    double bound() const { return bound_; }
    std::size_t steps() const { return steps_; }

    std::size_t bytes() const {
        if (std::holds_alternative<kernel::Box>(shape_)) {
            const std::size_t width = state_.heads() * (state_.d_k() + state_.d_v());
            return buffer_.size() * width * sizeof(T);
        }
        if (std::holds_alternative<kernel::SpikeSink>(shape_)) return 2 * state_.bytes();
        return state_.bytes();
    }

    // `feature` is phi(k) (heads*d_k), `value` the written value, `gamma` the
    // gate (read only by the exponential pattern).
    void step(const VectorT<T>& feature, const VectorT<T>& value, const VectorT<T>& gamma) {
        const double write = write_norm(feature, value);
        const std::size_t kc = state_.d_k() * state_.heads();
        std::visit(
            [&](const auto& s) {
                using S = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<S, kernel::ExponentialChannelwise>) {
                    gla::state_update_inplace(state_, feature, value, gamma, params_);
                    bound_ = static_cast<double>(gamma.maxCoeff()) * bound_ + write;
                } else if constexpr (std::is_same_v<S, kernel::HeavyTail>) {
                    gla::state_update_inplace(state_, feature, value, ones(kc), params_);
                    bound_ += write;
                } else if constexpr (std::is_same_v<S, kernel::BlockRefresh>) {
                    if (steps_ % s.period == 0) {
                        for (std::size_t h = 0; h < state_.heads(); ++h) state_.head(h).setZero();
                        bound_ = 0.0;
                    }
                    gla::state_update_inplace(state_, feature, value, ones(kc), params_);
                    bound_ += write;
                } else if constexpr (std::is_same_v<S, kernel::Box>) {
                    buffer_.push_back({feature, value, write});
                    if (buffer_.size() > s.window) buffer_.pop_front();
                    for (std::size_t h = 0; h < state_.heads(); ++h) state_.head(h).setZero();
                    bound_ = 0.0;
                    for (const auto& e : buffer_) {
                        add_outer(state_, e.feature, e.value, T(1));
                        bound_ += e.write;
                    }
                } else {
                    step_sink(s, feature, value, write);
                }
            },
            shape_);
        ++steps_;
        state_.set_step(steps_);
        state_.check_finite();
    }

private:
    struct Entry {
        VectorT<T> feature;
        VectorT<T> value;
        double write;
    };

    static VectorT<T> ones(std::size_t n) { return VectorT<T>::Ones(static_cast<Eigen::Index>(n)); }

    double write_norm(const VectorT<T>& feature, const VectorT<T>& value) const {
        const auto dk = static_cast<Eigen::Index>(state_.d_k());
        const auto dv = static_cast<Eigen::Index>(state_.d_v());
        double sum = 0.0;
        for (std::size_t h = 0; h < state_.heads(); ++h) {
            const auto hh = static_cast<Eigen::Index>(h);
            sum += static_cast<double>(feature.segment(hh * dk, dk).norm()) *
                   static_cast<double>(value.segment(hh * dv, dv).norm());
        }
        return sum;
    }

    static void add_outer(gla::BasicRecurrentState<T>& s, const VectorT<T>& f, const VectorT<T>& v, T weight) {
        const auto dk = static_cast<Eigen::Index>(s.d_k());
        const auto dv = static_cast<Eigen::Index>(s.d_v());
        for (std::size_t h = 0; h < s.heads(); ++h) {
            const auto hh = static_cast<Eigen::Index>(h);
            s.head(h).noalias() += weight * f.segment(hh * dk, dk) * v.segment(hh * dv, dv).transpose();
        }
    }

    // Row t of the sink kernel: mass m on the sink step and (1 - m) / (t - 1)
    // on every other step; uniform 1 / t until the sink step arrives.
    void step_sink(const kernel::SpikeSink& s, const VectorT<T>& f, const VectorT<T>& v, double write) {
        const std::size_t t = steps_ + 1;
        if (t == s.sink_position) {
            add_outer(sink_, f, v, T(1));
            sink_write_ = write;
        } else {
            add_outer(rest_, f, v, T(1));
            rest_write_ += write;
        }
        const bool uniform = s.sink_position > t || t == 1;
        const T m = static_cast<T>(s.sink_mass);
        for (std::size_t h = 0; h < state_.heads(); ++h) {
            if (uniform) {
                state_.head(h) = (sink_.head(h) + rest_.head(h)) / static_cast<T>(t);
            } else {
                state_.head(h) = m * sink_.head(h) + (T(1) - m) / static_cast<T>(t - 1) * rest_.head(h);
            }
        }
        bound_ = uniform ? (sink_write_ + rest_write_) / static_cast<double>(t)
                         : s.sink_mass * sink_write_ + (1.0 - s.sink_mass) / static_cast<double>(t - 1) * rest_write_;
    }

    kernel::KernelShape shape_;
    gla::BasicRecurrentState<T> state_;
    gla::BasicRecurrentState<T> sink_;
    gla::BasicRecurrentState<T> rest_;
    double sink_write_ = 0.0;
    double rest_write_ = 0.0;
    std::deque<Entry> buffer_;
    double bound_ = 0.0;
    std::size_t steps_ = 0;
    gla::BasicGlaParams<T> params_{};  // plain rule, identity features: keys arrive as features
};

}  // namespace hstream::stream::detail
