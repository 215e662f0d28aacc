#include "hstream/linear_attention.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace hstream::gla {

namespace {

constexpr std::array<char, 4> kMagic{'G', 'L', 'A', 'S'};

static_assert(sizeof(double) == 8);

void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double get_f64(const unsigned char* b) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

StateSnapshot make_snapshot(const RecurrentState& state) {
    StateSnapshot snap;
    snap.d_k = static_cast<std::uint32_t>(state.d_k());
    snap.columns = static_cast<std::uint32_t>(state.d_v() * state.heads());
    snap.data.reserve(static_cast<std::size_t>(snap.d_k) * snap.columns);
    for (std::size_t r = 0; r < state.d_k(); ++r)
        for (std::size_t h = 0; h < state.heads(); ++h)
            for (std::size_t c = 0; c < state.d_v(); ++c)
                snap.data.push_back(state.head(h)(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    return snap;
}

RecurrentState StateSnapshot::to_state(std::size_t heads) const {
    require(heads > 0 && columns % heads == 0, "snapshot columns are not divisible by the head count");
    require(data.size() == static_cast<std::size_t>(d_k) * columns, "snapshot payload size mismatch");
    const std::size_t d_v = columns / heads;
    RecurrentState state(d_k, d_v, heads);
    for (std::size_t r = 0; r < d_k; ++r)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t c = 0; c < d_v; ++c)
                state.head(h)(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                    data[r * columns + h * d_v + c];
    return state;
}

void write_snapshot(std::ostream& out, const RecurrentState& state) {
    const StateSnapshot snap = make_snapshot(state);
    out.write(kMagic.data(), 4);
    put_u32(out, kSnapshotVersion);
    put_u32(out, snap.d_k);
    put_u32(out, snap.columns);
    for (double v : snap.data) put_f64(out, v);
    if (!out) throw std::runtime_error("write_snapshot: stream write failed");
}

bool read_snapshot(std::istream& in, StateSnapshot& snapshot) {
    unsigned char header[16];
    in.read(reinterpret_cast<char*>(header), 16);
    if (in.gcount() == 0 && in.eof()) return false;
    if (in.gcount() != 16) throw std::runtime_error("read_snapshot: truncated header");
    if (std::memcmp(header, kMagic.data(), 4) != 0) throw std::runtime_error("read_snapshot: bad magic");
    const std::uint32_t version = get_u32(header + 4);
    if (version != kSnapshotVersion)
        throw std::runtime_error("read_snapshot: unsupported version " + std::to_string(version));
    snapshot.d_k = get_u32(header + 8);
    snapshot.columns = get_u32(header + 12);
    const std::size_t count = static_cast<std::size_t>(snapshot.d_k) * snapshot.columns;
    std::vector<unsigned char> payload(count * 8);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (static_cast<std::size_t>(in.gcount()) != payload.size())
        throw std::runtime_error("read_snapshot: truncated payload");
    snapshot.data.resize(count);
    for (std::size_t i = 0; i < count; ++i) snapshot.data[i] = get_f64(payload.data() + 8 * i);
    return true;
}

}  // namespace hstream::gla
