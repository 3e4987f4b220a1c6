#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace physprobe {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Vec2 = Eigen::Vector2d;

/// FNV-1a over raw bytes; used for parameter checksums and cache keys.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t fnv1a(const Matrix& m, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
}

std::string to_hex(std::uint64_t v);

/// Pearson correlation; sets *zero_variance if either side is constant
/// (returns 0 in that case, the documented degenerate-case policy).
double pearson(const Vector& a, const Vector& b, bool* zero_variance = nullptr);

/// Spearman rank correlation with average ranks for ties.
double spearman(const Vector& a, const Vector& b);

/// Average-rank transform used by spearman; exposed for tests.
Vector average_ranks(const Vector& v);

} // namespace physprobe
