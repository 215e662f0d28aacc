#pragma once

// Evidence influence kernels K(t, i): how much evidence written at step i
// still affects the estimate at step t.
//
// Index convention: every function taking (t, i) uses 1-based steps, as in
// the discounted sums (i = 1..t). Storage is 0-based; KernelProfile::weight
// performs the mapping.

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace hstream::kernel {

struct Box {
    std::size_t window;  // weight 1 iff t - i < window
};

// Weight 1 iff i and t fall in the same refresh block. Blocks are taken over
// 0-based storage positions: steps 1..P form block 0, P+1..2P block 1, ...
struct BlockRefresh {
    std::size_t period;
};

// Ungated accumulation: every past step keeps full weight.
struct HeavyTail {};

// A fixed share of each row's mass sits on one step; the rest is spread
// uniformly over the other causal steps. Before the sink step is reached the
// row is uniform.
struct SpikeSink {
    std::size_t sink_position;  // 1-based
    double sink_mass = 0.9;
};

// Constant per-channel retention; the profile realizes channel `channel`.
struct ExponentialChannelwise {
    std::vector<double> gammas;
    std::size_t channel = 0;
};

using KernelShape = std::variant<Box, BlockRefresh, HeavyTail, SpikeSink, ExponentialChannelwise>;

std::string shape_name(const KernelShape& shape);

// A causal, nonnegative T x T weight table.
class KernelProfile {
public:
    // Throws std::invalid_argument if the table is not T*T, acausal, or has a
    // negative or non-finite entry.
    KernelProfile(std::size_t horizon, std::vector<double> weights);

    std::size_t horizon() const { return horizon_; }

    // 1-based (t, i); entries with i > t are zero.
    double weight(std::size_t t, std::size_t i) const;

    std::span<const double> row(std::size_t t) const;

    // `t,i,weight` rows for each nonzero causal entry, 17 significant digits.
    void write_csv(std::ostream& out) const;

private:
    std::size_t horizon_;
    std::vector<double> weights_;  // row-major, 0-based
};

// prod_{j=i+1}^{t} gammas_per_step[j-1]; 1 for i == t.
// Throws std::out_of_range unless 1 <= i <= t <= gammas_per_step.size().
double eval_time_kernel(std::span<const double> gammas_per_step, std::size_t t, std::size_t i);

// gamma^lag = exp(-lag / tau). The lag may be fractional (continuous
// extension used for horizon checks). Throws std::domain_error unless
// 0 < gamma < 1 and lag >= 0.
double eval_channel_kernel(double gamma, double lag);

// tau = -1 / log(gamma). gamma = 1 has no finite horizon and is rejected.
double effective_horizon(double gamma);

// Inverse of effective_horizon.
double gamma_for_horizon(double tau);

struct ChannelPartition {
    std::vector<std::size_t> fast;  // gamma < threshold
    std::vector<std::size_t> slow;  // gamma >= threshold
};

ChannelPartition partition_channels(std::span<const double> gammas, double threshold);

// Entrywise product. Throws std::invalid_argument on horizon mismatch.
KernelProfile compose_kernel(const KernelProfile& spatial, const KernelProfile& time);

KernelProfile build_profile(const KernelShape& shape, std::size_t horizon);

}  // namespace hstream::kernel
