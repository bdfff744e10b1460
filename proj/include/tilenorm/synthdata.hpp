#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "tilenorm/prng.hpp"
#include "tilenorm/tensor.hpp"

namespace tilenorm {

/*!
 * Synthetic volume recipe: spheres packed into the first `dense_fraction` of
 * the last axis on top of a dim background, so statistics of a tile depend
 * strongly on where it is cut from.
 */
struct SynthSpec {
    std::array<std::size_t, 3> shape{64, 64, 128};
    std::size_t blob_count_min = 24;
    std::size_t blob_count_max = 32;
    double radius_min = 4.0;
    double radius_max = 8.0;
    std::size_t shell_thickness = 1;
    double dense_fraction = 0.5;
    double background = 0.1;
    double brightness_min = 0.6;
    double brightness_max = 1.0;
    double ramp_amplitude = 0.2;  // linear ramp along axis 0
    double noise_sigma = 0.04;
    double bright_plane_prob = 0.5;
    double bright_plane_intensity = 0.6;
    std::size_t max_retries = 2000;
    std::uint64_t seed = 0;

    void validate() const {
        for (auto e : shape)
            if (e == 0 || e % 4) throw std::invalid_argument("SynthSpec: extents must be positive multiples of 4");
        if (blob_count_min > blob_count_max) throw std::invalid_argument("SynthSpec: blob_count_min > blob_count_max");
        if (!(radius_min > 0.0 && radius_min <= radius_max))
            throw std::invalid_argument("SynthSpec: need 0 < radius_min <= radius_max");
        const double margin = static_cast<double>(shell_thickness) + 1.0;
        const double dense_extent = dense_fraction * static_cast<double>(shape[2]);
        if (blob_count_max > 0 &&
            (2.0 * (radius_max + margin) > static_cast<double>(std::min(shape[0], shape[1])) ||
             2.0 * (radius_max + margin) > dense_extent))
            throw std::invalid_argument("SynthSpec: radius_max does not fit in the dense region");
        if (!(dense_fraction > 0.0 && dense_fraction <= 1.0)) throw std::invalid_argument("SynthSpec: dense_fraction outside (0, 1]");
        if (!(noise_sigma >= 0.0)) throw std::invalid_argument("SynthSpec: noise_sigma must be >= 0");
        if (!(bright_plane_prob >= 0.0 && bright_plane_prob <= 1.0))
            throw std::invalid_argument("SynthSpec: bright_plane_prob outside [0, 1]");
    }
};

struct Blob {
    std::array<double, 3> center{};
    double radius = 0.0;
    double brightness = 0.0;
};

struct SynthVolume {
    Tensor image;   // [1, D, H, W]
    Tensor labels;  // [3, D, H, W] one-hot: background, foreground, boundary
    std::vector<Blob> blobs;
    std::vector<std::uint32_t> instance;  // 0 = background, k = blob k - 1
    bool bright_plane = false;
};

enum LabelChannel : std::size_t { kBackground = 0, kForeground = 1, kBoundary = 2 };

//! Instance voxels within Chebyshev distance `t` of a voxel of another instance or background.
inline std::vector<std::uint8_t> boundary_mask(const std::vector<std::uint32_t>& instance,
                                               const std::array<std::size_t, 3>& shape, std::size_t t) {
    const auto D = static_cast<std::ptrdiff_t>(shape[0]), H = static_cast<std::ptrdiff_t>(shape[1]),
               W = static_cast<std::ptrdiff_t>(shape[2]);
    const auto r = static_cast<std::ptrdiff_t>(t);
    std::vector<std::uint8_t> mask(instance.size(), 0);
    for (std::ptrdiff_t z = 0; z < D; ++z)
        for (std::ptrdiff_t y = 0; y < H; ++y)
            for (std::ptrdiff_t x = 0; x < W; ++x) {
                const std::size_t i = static_cast<std::size_t>((z * H + y) * W + x);
                const std::uint32_t id = instance[i];
                if (!id) continue;
                bool edge = false;
                for (std::ptrdiff_t dz = -r; dz <= r && !edge; ++dz)
                    for (std::ptrdiff_t dy = -r; dy <= r && !edge; ++dy)
                        for (std::ptrdiff_t dx = -r; dx <= r && !edge; ++dx) {
                            const std::ptrdiff_t zz = z + dz, yy = y + dy, xx = x + dx;
                            if (zz < 0 || yy < 0 || xx < 0 || zz >= D || yy >= H || xx >= W) continue;
                            if (instance[static_cast<std::size_t>((zz * H + yy) * W + xx)] != id) edge = true;
                        }
                mask[i] = edge;
            }
    return mask;
}

//! Mean intensity of the blob-bearing part of the last axis minus the mean of the rest.
inline double dense_minus_sparse_mean(const Tensor& image, const SynthSpec& spec) {
    const std::size_t W = image.dim(3);
    const auto split = static_cast<std::size_t>(spec.dense_fraction * static_cast<double>(W));
    if (split == 0 || split >= W) return 0.0;
    double dense = 0.0, sparse = 0.0;
    std::size_t nd = 0, ns = 0;
    for (std::size_t i = 0; i < image.size(); ++i) {
        if (i % W < split) {
            dense += image[i];
            ++nd;
        } else {
            sparse += image[i];
            ++ns;
        }
    }
    return dense / static_cast<double>(nd) - sparse / static_cast<double>(ns);
}

/*!
 * Rasterise non-overlapping spheres and build the image and one-hot labels.
 * Labels are derived from geometry before any imaging effect is added.
 */
inline SynthVolume generate(const SynthSpec& spec) {
    spec.validate();
    Prng rng(spec.seed);
    const auto [D, H, W] = spec.shape;
    SynthVolume out;

    const std::size_t n_blobs =
        spec.blob_count_min + static_cast<std::size_t>(rng.index(spec.blob_count_max - spec.blob_count_min + 1));
    const double margin = static_cast<double>(spec.shell_thickness) + 1.0;
    const double dense_end = spec.dense_fraction * static_cast<double>(W);
    for (std::size_t k = 0; k < n_blobs; ++k) {
        bool placed = false;
        for (std::size_t attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
            Blob b;
            b.radius = rng.uniform(spec.radius_min, spec.radius_max);
            const double lo = b.radius + margin;
            b.center = {rng.uniform(lo, static_cast<double>(D) - lo), rng.uniform(lo, static_cast<double>(H) - lo),
                        rng.uniform(lo, dense_end - lo)};
            b.brightness = rng.uniform(spec.brightness_min, spec.brightness_max);
            placed = true;
            for (const Blob& o : out.blobs) {
                double d2 = 0.0;
                for (int a = 0; a < 3; ++a) d2 += (b.center[a] - o.center[a]) * (b.center[a] - o.center[a]);
                const double gap = b.radius + o.radius + 2.0;
                if (d2 < gap * gap) {
                    placed = false;
                    break;
                }
            }
            if (placed) out.blobs.push_back(b);
        }
        if (!placed)
            throw std::runtime_error("generate: could not place blob " + std::to_string(k + 1) + " of " +
                                     std::to_string(n_blobs) + " without overlap");
    }

    out.instance.assign(D * H * W, 0);
    for (std::size_t k = 0; k < out.blobs.size(); ++k) {
        const Blob& b = out.blobs[k];
        const auto z0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.center[0] - b.radius)));
        const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.center[1] - b.radius)));
        const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.center[2] - b.radius)));
        const auto z1 = std::min<std::size_t>(D - 1, static_cast<std::size_t>(std::ceil(b.center[0] + b.radius)));
        const auto y1 = std::min<std::size_t>(H - 1, static_cast<std::size_t>(std::ceil(b.center[1] + b.radius)));
        const auto x1 = std::min<std::size_t>(W - 1, static_cast<std::size_t>(std::ceil(b.center[2] + b.radius)));
        for (std::size_t z = z0; z <= z1; ++z)
            for (std::size_t y = y0; y <= y1; ++y)
                for (std::size_t x = x0; x <= x1; ++x) {
                    const double dz = static_cast<double>(z) - b.center[0];
                    const double dy = static_cast<double>(y) - b.center[1];
                    const double dx = static_cast<double>(x) - b.center[2];
                    if (dz * dz + dy * dy + dx * dx <= b.radius * b.radius)
                        out.instance[(z * H + y) * W + x] = static_cast<std::uint32_t>(k + 1);
                }
    }

    const auto shell = boundary_mask(out.instance, spec.shape, spec.shell_thickness);
    out.labels = Tensor({3, D, H, W});
    out.image = Tensor({1, D, H, W});
    const std::size_t n = D * H * W;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = out.instance[i] == 0 ? kBackground : (shell[i] ? kBoundary : kForeground);
        out.labels[cls * n + i] = 1.0;
    }

    out.bright_plane = rng.uniform() < spec.bright_plane_prob;
    const std::size_t plane_y = static_cast<std::size_t>(rng.index(H));
    for (std::size_t z = 0; z < D; ++z) {
        const double ramp = D > 1 ? spec.ramp_amplitude * static_cast<double>(z) / static_cast<double>(D - 1) : 0.0;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t i = (z * H + y) * W + x;
                double v = spec.background + ramp;
                if (out.instance[i]) v += out.blobs[out.instance[i] - 1].brightness;
                if (out.bright_plane && y == plane_y) v += spec.bright_plane_intensity;
                v += spec.noise_sigma * rng.normal();
                out.image[i] = v;
            }
    }

    if (!out.blobs.empty()) {
        const double gap = dense_minus_sparse_mean(out.image, spec);
        if (!(gap > spec.noise_sigma))
            throw std::runtime_error("generate: dense/sparse mean gap " + std::to_string(gap) +
                                     " does not exceed the noise level");
    }
    return out;
}

}  // namespace tilenorm
