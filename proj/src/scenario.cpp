#include "hstream/stream.hpp"

#include "influence_memory.hpp"

#include "json.hpp"

#include <chrono>
#include <fstream>
#include <ostream>

namespace hstream::stream {

namespace {

template <typename T>
VectorT<T> write_values(const gla::BasicRecurrentState<T>& state, const VectorT<T>& feature,
                        const VectorT<T>& value, const VectorT<T>& gamma, const gla::BasicGlaParams<T>& params) {
    if (params.value_rule == gla::ValueRule::Plain) return value;
    const auto dk = static_cast<Eigen::Index>(state.d_k());
    const auto dv = static_cast<Eigen::Index>(state.d_v());
    VectorT<T> out(value.size());
    for (std::size_t h = 0; h < state.heads(); ++h) {
        const auto hh = static_cast<Eigen::Index>(h);
        const VectorT<T> decayed = gamma.segment(hh * dk, dk).cwiseProduct(feature.segment(hh * dk, dk));
        out.segment(hh * dv, dv) = params.eta * (value.segment(hh * dv, dv) - state.head(h).transpose() * decayed);
    }
    return out;
}

template <typename T>
double write_norm(const VectorT<T>& feature, const VectorT<T>& write, std::size_t d_k, std::size_t d_v,
                  std::size_t heads) {
    double sum = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
        const auto f = feature.segment(static_cast<Eigen::Index>(h * d_k), static_cast<Eigen::Index>(d_k));
        const auto v = write.segment(static_cast<Eigen::Index>(h * d_v), static_cast<Eigen::Index>(d_v));
        sum += static_cast<double>(f.norm()) * static_cast<double>(v.norm());
    }
    return sum;
}

double windowed_relevant_mass(const PlantedStream& stream, std::size_t t, std::size_t window) {
    const std::size_t first = t >= window ? t - window + 1 : 1;
    const Vector w = local::softmax(stream.planted_scores(t, first));
    double mass = 0.0;
    for (std::size_t i : stream.relevant(t))
        if (i >= first) mass += w(static_cast<Eigen::Index>(i - first));
    return mass;
}

using Clock = std::chrono::steady_clock;

template <typename T>
ScenarioResult run_impl(const ScenarioConfig& cfg, const PlantedStream& stream, const gla::GlaParams& params64) {
    const auto params = params64.template cast<T>();
    const MatrixT<T> tokens = stream.tokens.x.template cast<T>();
    const std::size_t n = stream.length();
    const auto kc = static_cast<Eigen::Index>(cfg.d_k * cfg.heads);
    const bool gated = cfg.shape == "exponential";

    ScenarioResult result;
    result.records.reserve(n);
    gla::BasicRecurrentState<T> state(cfg.d_k, cfg.d_v, cfg.heads);
    detail::InfluenceMemory<T> memory(make_shape(cfg.shape, cfg), cfg.d_k, cfg.d_v, cfg.heads);
    MatrixT<T> outputs(static_cast<Eigen::Index>(cfg.d_v * cfg.heads), 1);
    double bound = 0.0;

    for (std::size_t start = 0; start < n; start += cfg.chunk) {
        const std::size_t end = std::min(n, start + cfg.chunk);
        for (std::size_t i = start; i < end; ++i) {
            const auto col = static_cast<Eigen::Index>(i);
            const VectorT<T> x = tokens.col(col);
            VectorT<T> gamma = cfg.gamma_override ? VectorT<T>::Constant(kc, static_cast<T>(*cfg.gamma_override))
                                                  : gla::gate(x, params);
            const VectorT<T> raw_key = params.w_k * x;
            const VectorT<T> feat = gla::feature(raw_key, params.feature_map);
            const VectorT<T> value = params.w_v * x;
            const VectorT<T> query = params.w_q * x;

            StreamRecord rec;
            rec.t = i + 1;
            Clock::time_point t0;
            if (cfg.timing) t0 = Clock::now();
            VectorT<T> out;
            if (gated) {
                const VectorT<T> write = write_values(state, feat, value, gamma, params);
                bound = static_cast<double>(gamma.maxCoeff()) * bound +
                        write_norm<T>(feat, write, cfg.d_k, cfg.d_v, cfg.heads);
                if (cfg.gamma_override) {
                    gla::state_update_inplace(state, raw_key, value, gamma, params);
                    out = gla::readout(query, state);
                } else {
                    gla::process_tokens<T>(tokens.middleCols(col, 1), state, params, outputs);
                    out = outputs.col(0);
                }
            } else {
                memory.step(feat, value, gamma);
                out = gla::readout(query, memory.state());
            }
            if (cfg.timing)
                rec.step_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0).count();

            const auto& s = gated ? state : memory.state();
            rec.out_norm = static_cast<double>(out.norm());
            rec.state_fro = static_cast<double>(s.frobenius_norm());
            rec.bound_margin = (gated ? bound : memory.bound()) - rec.state_fro;
            rec.relevant_mass = windowed_relevant_mass(stream, rec.t, cfg.window);
            rec.state_bytes = gated ? state.bytes() : memory.bytes();
            result.records.push_back(rec);
        }
        if (cfg.write_snapshots) {
            const auto& s = gated ? state : memory.state();
            result.snapshots.push_back(s.template cast<double>());
            result.snapshot_steps.push_back(end);
        }
    }

    auto& sum = result.summary;
    sum.steps = n;
    sum.shape = cfg.shape;
    sum.precision = cfg.precision;
    sum.max_state_bytes = 0;
    sum.min_state_bytes = std::numeric_limits<std::size_t>::max();
    sum.min_bound_margin = INFINITY;
    double mass = 0.0;
    for (const auto& r : result.records) {
        sum.max_state_bytes = std::max(sum.max_state_bytes, r.state_bytes);
        sum.min_state_bytes = std::min(sum.min_state_bytes, r.state_bytes);
        sum.min_bound_margin = std::min(sum.min_bound_margin, r.bound_margin);
        mass += r.relevant_mass;
    }
    sum.mean_relevant_mass = mass / static_cast<double>(n);
    sum.final_state_fro = result.records.back().state_fro;
    if (cfg.timing) {
        std::vector<double> ts, cumulative;
        double acc = 0.0;
        for (const auto& r : result.records) {
            acc += static_cast<double>(r.step_ns);
            if (r.t > kTimingWarmup) {
                ts.push_back(static_cast<double>(r.t));
                cumulative.push_back(acc);
            }
        }
        sum.time_fit = fit_line(ts, cumulative);
    }
    return result;
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    return out;
}

void check_written(std::ofstream& out, const std::filesystem::path& path) {
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

ScenarioResult run_scenario(const ScenarioConfig& cfg) {
    cfg.validate();
    const PlantedStream stream = generate_stream(cfg);
    const auto params = scenario_params(cfg);
    return cfg.precision == Precision::F64 ? run_impl<double>(cfg, stream, params)
                                           : run_impl<float>(cfg, stream, params);
}

std::string ScenarioSummary::to_json() const {
    nlohmann::ordered_json j;
    j["steps"] = steps;
    j["shape"] = shape;
    j["precision"] = to_string(precision);
    if (time_fit) {
        j["time_fit"] = {{"slope_ns_per_step", time_fit->slope},
                         {"intercept_ns", time_fit->intercept},
                         {"r_squared", time_fit->r_squared},
                         {"warmup_steps", kTimingWarmup}};
    } else {
        j["time_fit"] = nullptr;
    }
    j["max_state_bytes"] = max_state_bytes;
    j["min_state_bytes"] = min_state_bytes;
    j["state_bytes_constant"] = max_state_bytes == min_state_bytes;
    j["min_bound_margin"] = min_bound_margin;
    j["final_state_fro"] = final_state_fro;
    j["mean_relevant_mass"] = mean_relevant_mass;
    return j.dump(2);
}

void write_records_csv(std::ostream& out, const std::vector<StreamRecord>& records) {
    out << "t,out_norm,state_fro,bound_margin,relevant_mass,step_ns,state_bytes\n";
    for (const auto& r : records)
        out << r.t << ',' << format_double(r.out_norm) << ',' << format_double(r.state_fro) << ','
            << format_double(r.bound_margin) << ',' << format_double(r.relevant_mass) << ',' << r.step_ns << ','
            << r.state_bytes << '\n';
}

void export_scenario(const ScenarioConfig& cfg, const PlantedStream& stream, const ScenarioResult& result) {
    ensure_dir(cfg.out_dir);
    {
        const auto path = cfg.out_dir / "records.csv";
        auto out = open_out(path);
        write_records_csv(out, result.records);
        check_written(out, path);
    }
    {
        const auto path = cfg.out_dir / "summary.json";
        auto out = open_out(path);
        auto j = nlohmann::ordered_json::parse(result.summary.to_json());
        j["seed"] = cfg.seed;
        j["chunk"] = cfg.chunk;
        j["window"] = cfg.window;
        j["d_model"] = cfg.d_model;
        j["d_k"] = cfg.d_k;
        j["d_v"] = cfg.d_v;
        j["heads"] = cfg.heads;
        j["timing"] = cfg.timing;
        out << j.dump(2) << '\n';
        check_written(out, path);
    }
    if (!cfg.write_snapshots) return;
    {
        const auto path = cfg.out_dir / "states.bin";
        auto out = open_out(path, true);
        for (const auto& s : result.snapshots) gla::write_snapshot(out, s);
        check_written(out, path);
    }
    {
        const auto path = cfg.out_dir / "targets.csv";
        auto out = open_out(path);
        out << "t,target\n";
        for (std::size_t t : result.snapshot_steps)
            out << t << ',' << format_double(stream.target(static_cast<Eigen::Index>(t - 1))) << '\n';
        check_written(out, path);
    }
    {
        const auto path = cfg.out_dir / "spectrum.csv";
        auto out = open_out(path);
        analysis::extract_retention_spectrum(scenario_params(cfg), stream.tokens.x).write_csv(out);
        check_written(out, path);
    }
}

}  // namespace hstream::stream
