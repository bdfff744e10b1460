#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace tilenorm {

/*!
 * Quantile by linear interpolation between order statistics at rank
 * q * (n - 1), the convention of numpy's default `quantile`.
 */
inline double quantile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw std::invalid_argument("quantile: empty input");
    if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile: q must lie in [0, 1]");
    const double rank = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    if (frac == 0.0) return sorted[lo];
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::span<const double> values, double q) {
    std::vector<double> s(values.begin(), values.end());
    std::sort(s.begin(), s.end());
    return quantile_sorted(s, q);
}

inline double median(std::span<const double> values) { return quantile(values, 0.5); }

}  // namespace tilenorm
