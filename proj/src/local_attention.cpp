#include "hstream/local_attention.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace hstream::local {

Vector rope_rotate(const Vector& vec, const RopeIndex& index, double base) {
    const Eigen::Index d = vec.size();
    require(d > 0 && d % 6 == 0, "rope_rotate: vector width must be a positive multiple of 6");
    require(base > 1.0, "rope_rotate: base must exceed 1");
    if (index.special) return vec;
    const Eigen::Index third = d / 3;
    const Eigen::Index pairs = third / 2;
    const double positions[3] = {static_cast<double>(index.t), static_cast<double>(index.y),
                                 static_cast<double>(index.x)};
    Vector out = vec;
    for (int axis = 0; axis < 3; ++axis) {
        const Eigen::Index offset = axis * third;
        for (Eigen::Index m = 0; m < pairs; ++m) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(third));
            const double angle = positions[axis] * freq;
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            const double a = vec(offset + 2 * m);
            const double b = vec(offset + 2 * m + 1);
            out(offset + 2 * m) = c * a - s * b;
            out(offset + 2 * m + 1) = s * a + c * b;
        }
    }
    return out;
}

std::vector<RopeIndex> temporal_index_reset(std::span<const RopeIndex> indices, std::size_t period) {
    require(period >= 1, "temporal_index_reset: period must be >= 1");
    std::vector<RopeIndex> out(indices.begin(), indices.end());
    const long p = static_cast<long>(period);
    for (auto& idx : out) {
        if (idx.special) continue;
        const long frame = idx.t - 1;
        idx.t = 1 + ((frame % p) + p) % p;
    }
    return out;
}

Vector softmax(const Vector& scores) {
    require(scores.size() > 0, "softmax: empty score vector");
    const double peak = scores.maxCoeff();
    Vector w = (scores.array() - peak).exp();
    return w / w.sum();
}

Vector attention_weights(const Vector& query, const Matrix& keys) {
    require(keys.rows() > 0, "attention: empty window");
    require(keys.cols() == query.size(), "attention: query/key width mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
    return softmax((keys * query) * scale);
}

AttentionResult causal_softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                         std::optional<std::size_t> max_window) {
    const Eigen::Index n = q.rows();
    require(n > 0, "causal_softmax_attention: empty window");
    require(k.rows() == n && v.rows() == n, "causal_softmax_attention: q, k, v must have the same length");
    require(q.cols() == k.cols(), "causal_softmax_attention: q/k width mismatch");
    require(!max_window || static_cast<std::size_t>(n) <= *max_window,
            "causal_softmax_attention: window longer than the configured limit");
    require(q.allFinite() && k.allFinite() && v.allFinite(), "causal_softmax_attention: non-finite input");

    AttentionResult r{Matrix::Zero(n, v.cols()), Matrix::Zero(n, n)};
    for (Eigen::Index t = 0; t < n; ++t) {
        const Vector w = attention_weights(q.row(t).transpose(), k.topRows(t + 1));
        r.weights.row(t).head(t + 1) = w.transpose();
        r.outputs.row(t) = w.transpose() * v.topRows(t + 1);
    }
    return r;
}

Vector head_gates(const Vector& pooled, const HeadGateParams& params) {
    require(params.w_g.cols() == pooled.size(), "head gate: pooled width does not match W_g");
    require(params.b_g.size() == params.w_g.rows(), "head gate: b_g size does not match W_g");
    const Vector a = params.w_g * pooled + params.b_g;
    return a.unaryExpr([](double x) { return sigmoid(x); });
}

std::vector<Vector> head_gate_apply(const Vector& pooled, const std::vector<Vector>& head_outputs,
                                    const HeadGateParams& params) {
    const Vector g = head_gates(pooled, params);
    require(static_cast<Eigen::Index>(head_outputs.size()) == g.size(), "head gate: head count mismatch");
    std::vector<Vector> out;
    out.reserve(head_outputs.size());
    for (std::size_t h = 0; h < head_outputs.size(); ++h) out.push_back(g(static_cast<Eigen::Index>(h)) * head_outputs[h]);
    return out;
}

Vector mean_pool(const Matrix& tokens, std::span<const RopeIndex> indices) {
    require(tokens.rows() > 0, "mean_pool: empty window");
    require(indices.size() == static_cast<std::size_t>(tokens.rows()), "mean_pool: index count mismatch");
    Vector sum = Vector::Zero(tokens.cols());
    Eigen::Index count = 0;
    for (Eigen::Index r = 0; r < tokens.rows(); ++r) {
        if (indices[static_cast<std::size_t>(r)].special) continue;
        sum += tokens.row(r).transpose();
        ++count;
    }
    if (count == 0) return tokens.colwise().mean().transpose();
    return sum / static_cast<double>(count);
}

void LocalAttentionParams::validate(std::size_t d_model) const {
    const auto width = static_cast<Eigen::Index>(heads * head_dim);
    const auto dm = static_cast<Eigen::Index>(d_model);
    require(heads > 0 && head_dim > 0 && head_dim % 6 == 0, "local attention: head_dim must be a multiple of 6");
    require(w_q.rows() == width && w_q.cols() == dm, "local attention: W_q shape");
    require(w_k.rows() == width && w_k.cols() == dm, "local attention: W_k shape");
    require(w_v.rows() == width && w_v.cols() == dm, "local attention: W_v shape");
    require(gate.w_g.rows() == static_cast<Eigen::Index>(heads) && gate.w_g.cols() == dm,
            "local attention: W_g shape");
    require(gate.b_g.size() == static_cast<Eigen::Index>(heads), "local attention: b_g shape");
}

LocalAttentionParams init_local_params(std::size_t d_model, std::size_t heads, std::size_t head_dim, Rng& rng,
                                       double gate_bias) {
    const auto width = static_cast<Eigen::Index>(heads * head_dim);
    const auto dm = static_cast<Eigen::Index>(d_model);
    const double r = 1.0 / std::sqrt(static_cast<double>(d_model));
    LocalAttentionParams p;
    p.heads = heads;
    p.head_dim = head_dim;
    p.w_q = random_uniform(rng, width, dm, -r, r);
    p.w_k = random_uniform(rng, width, dm, -r, r);
    p.w_v = random_uniform(rng, width, dm, -r, r);
    p.gate.w_g = Matrix::Zero(static_cast<Eigen::Index>(heads), dm);
    p.gate.b_g = Vector::Constant(static_cast<Eigen::Index>(heads), gate_bias);
    p.validate(d_model);
    return p;
}

LocalAttentionOutput local_attention(const Matrix& tokens, std::span<const RopeIndex> indices,
                                     const LocalAttentionParams& params, std::optional<std::size_t> max_window) {
    params.validate(static_cast<std::size_t>(tokens.cols()));
    const Eigen::Index n = tokens.rows();
    require(n > 0, "local_attention: empty window");
    require(indices.size() == static_cast<std::size_t>(n), "local_attention: index count mismatch");
    const auto hd = static_cast<Eigen::Index>(params.head_dim);

    const Matrix q = tokens * params.w_q.transpose();
    const Matrix k = tokens * params.w_k.transpose();
    const Matrix v = tokens * params.w_v.transpose();
    const Vector pooled = mean_pool(tokens, indices);

    LocalAttentionOutput out;
    out.outputs.resize(n, static_cast<Eigen::Index>(params.heads) * hd);
    std::vector<Vector> head_rows;
    std::vector<Matrix> head_outputs;
    for (std::size_t h = 0; h < params.heads; ++h) {
        const Eigen::Index off = static_cast<Eigen::Index>(h) * hd;
        Matrix qh(n, hd), kh(n, hd);
        for (Eigen::Index t = 0; t < n; ++t) {
            const auto& idx = indices[static_cast<std::size_t>(t)];
            qh.row(t) = rope_rotate(q.row(t).segment(off, hd).transpose(), idx, params.rope_base).transpose();
            kh.row(t) = rope_rotate(k.row(t).segment(off, hd).transpose(), idx, params.rope_base).transpose();
        }
        AttentionResult r = causal_softmax_attention(qh, kh, v.middleCols(off, hd), max_window);
        head_outputs.push_back(std::move(r.outputs));
        out.weights.push_back(std::move(r.weights));
    }
    out.gates = head_gates(pooled, params.gate);
    for (std::size_t h = 0; h < params.heads; ++h)
        out.outputs.middleCols(static_cast<Eigen::Index>(h) * hd, hd) =
            out.gates(static_cast<Eigen::Index>(h)) * head_outputs[h];
    return out;
}

double relevant_mass(const Vector& weights, std::span<const std::size_t> relevant) {
    require(std::abs(weights.sum() - 1.0) <= 1e-9, "relevant_mass: weights must sum to 1");
    double mass = 0.0;
    for (std::size_t i : relevant) {
        require(i < static_cast<std::size_t>(weights.size()), "relevant_mass: index out of range");
        mass += weights(static_cast<Eigen::Index>(i));
    }
    return mass;
}

double dilution_bound(std::size_t t, const DilutionConfig& cfg) {
    require(cfg.w_geo >= 1, "dilution_bound: W_geo must be >= 1");
    require(cfg.score_bound > 0.0, "dilution_bound: M must be positive");
    require(t > cfg.w_geo, "dilution_bound: requires t > W_geo (bound is vacuous otherwise)");
    const double w = static_cast<double>(cfg.w_geo);
    const double ratio = (static_cast<double>(t) - w) / w;
    return 1.0 / (1.0 + ratio * std::exp(-2.0 * cfg.score_bound));
}

double dilution_crossing(const DilutionConfig& cfg) {
    return static_cast<double>(cfg.w_geo) * (1.0 + std::exp(2.0 * cfg.score_bound));
}

std::size_t DilutionReport::violations() const {
    return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const DilutionRow& r) { return r.violated; }));
}

DilutionReport verify_dilution(std::size_t trials, const DilutionConfig& cfg, std::size_t t_max, std::uint64_t seed) {
    require(trials >= 1, "verify_dilution: trials must be >= 1");
    require(cfg.w_geo >= 1 && cfg.score_bound > 0.0, "verify_dilution: invalid config");
    require(t_max > cfg.w_geo, "verify_dilution: t_max must exceed W_geo");

    // q . k_i / sqrt(d) = s_i with q = sqrt(d) e_1 and k_i = s_i e_1.
    constexpr Eigen::Index d = 6;
    Vector query = Vector::Zero(d);
    query(0) = std::sqrt(static_cast<double>(d));
    const double M = cfg.score_bound;
    auto clip = [M](double s) { return std::clamp(s, -M, M); };

    DilutionReport report;
    report.max_violation = -INFINITY;
    std::vector<double> best_mass(t_max + 1, 0.0);
    Matrix keys = Matrix::Zero(static_cast<Eigen::Index>(t_max), d);
    for (std::size_t t = cfg.w_geo + 1; t <= t_max; ++t) {
        const auto n = static_cast<Eigen::Index>(t);
        keys.topRows(n).col(0).setConstant(clip(-M));
        keys.block(n - static_cast<Eigen::Index>(cfg.w_geo), 0, static_cast<Eigen::Index>(cfg.w_geo), 1).setConstant(clip(M));
        const Vector w = attention_weights(query, keys.topRows(n));
        std::vector<std::size_t> relevant(cfg.w_geo);
        for (std::size_t j = 0; j < cfg.w_geo; ++j) relevant[j] = t - cfg.w_geo + j;
        DilutionRow row;
        row.t = t;
        row.bound = dilution_bound(t, cfg);
        row.measured_mass = relevant_mass(w, relevant);
        const double excess = row.measured_mass - row.bound;
        row.violated = excess > kDilutionTolerance;
        report.max_violation = std::max(report.max_violation, excess);
        best_mass[t] = row.measured_mass;
        report.rows.push_back(row);
    }

    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick_t(cfg.w_geo + 1, t_max);
    std::uniform_real_distribution<double> score(-M, M);
    for (std::size_t trial = 0; trial < trials; ++trial) {
        const std::size_t t = pick_t(rng);
        const auto n = static_cast<Eigen::Index>(t);
        for (Eigen::Index i = 0; i < n; ++i) keys(i, 0) = clip(score(rng));
        const Vector w = attention_weights(query, keys.topRows(n));
        std::vector<std::size_t> relevant(cfg.w_geo);
        for (std::size_t j = 0; j < cfg.w_geo; ++j) relevant[j] = t - cfg.w_geo + j;
        const double excess = relevant_mass(w, relevant) - best_mass[t];
        report.max_random_excess = std::max(report.max_random_excess, excess);
        if (excess > 1e-9) ++report.random_violations;
        ++report.random_trials;
    }
    return report;
}

void write_dilution_csv(std::ostream& out, const DilutionReport& report) {
    out << "t,bound,measured_mass,violated\n";
    for (const auto& r : report.rows)
        out << r.t << ',' << format_double(r.bound) << ',' << format_double(r.measured_mass) << ','
            << (r.violated ? 1 : 0) << '\n';
}

}  // namespace hstream::local
