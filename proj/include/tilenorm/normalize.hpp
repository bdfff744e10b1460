#pragma once

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "tilenorm/stats.hpp"
#include "tilenorm/tensor.hpp"

namespace tilenorm {

//! Where input quantile normalization is applied: once per volume, or per tile.
enum class InputNorm { Global, TileWise };

inline std::string to_string(InputNorm s) { return s == InputNorm::Global ? "global" : "tile-wise"; }

inline std::optional<InputNorm> parse_input_norm(std::string_view s) {
    if (s == "global") return InputNorm::Global;
    if (s == "tile-wise" || s == "tilewise") return InputNorm::TileWise;
    return std::nullopt;
}

struct NormalizeSpec {
    double q_min = 0.01;
    double q_max = 0.98;
    InputNorm strategy = InputNorm::Global;

    void validate() const {
        if (!(0.0 <= q_min && q_min < q_max && q_max <= 1.0))
            throw std::invalid_argument("NormalizeSpec: need 0 <= q_min < q_max <= 1");
    }
};

/*!
 * x' = clip((x - Q(q_min)) / (Q(q_max) - Q(q_min)), 0, 1) with quantiles taken
 * over every voxel of the image. A constant image maps to zeros.
 */
inline Tensor quantile_normalize(const Tensor& image, const NormalizeSpec& spec) {
    spec.validate();
    if (image.empty()) throw std::invalid_argument("quantile_normalize: empty image");
    std::vector<double> sorted(image.vec());
    std::sort(sorted.begin(), sorted.end());
    const double lo = quantile_sorted(sorted, spec.q_min);
    const double hi = quantile_sorted(sorted, spec.q_max);
    Tensor out(image.shape());
    if (!(hi > lo)) return out;
    const double range = hi - lo;
    for (std::size_t i = 0; i < image.size(); ++i) out[i] = std::clamp((image[i] - lo) / range, 0.0, 1.0);
    return out;
}

}  // namespace tilenorm
