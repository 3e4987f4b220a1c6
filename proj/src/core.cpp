#include "physprobe/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace physprobe {

std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

double pearson(const Vector& a, const Vector& b, bool* zero_variance) {
    if (zero_variance) *zero_variance = false;
    const auto n = a.size();
    if (n != b.size() || n < 2) {
        if (zero_variance) *zero_variance = true;
        return 0.0;
    }
    const Vector ac = a.array() - a.mean();
    const Vector bc = b.array() - b.mean();
    const double na = ac.norm(), nb = bc.norm();
    if (na == 0.0 || nb == 0.0) {
        if (zero_variance) *zero_variance = true;
        return 0.0;
    }
    return ac.dot(bc) / (na * nb);
}

Vector average_ranks(const Vector& v) {
    const auto n = v.size();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](Eigen::Index i, Eigen::Index j) { return v[i] < v[j]; });
    Vector ranks(n);
    Eigen::Index i = 0;
    while (i < n) {
        Eigen::Index j = i;
        while (j + 1 < n && v[idx[static_cast<std::size_t>(j + 1)]] == v[idx[static_cast<std::size_t>(i)]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0; // 1-based average rank
        for (Eigen::Index k = i; k <= j; ++k) ranks[idx[static_cast<std::size_t>(k)]] = r;
        i = j + 1;
    }
    return ranks;
}

double spearman(const Vector& a, const Vector& b) {
    return pearson(average_ranks(a), average_ranks(b));
}

} // namespace physprobe
