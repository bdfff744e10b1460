#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "tilenorm/synthdata.hpp"

using namespace tilenorm;

namespace {

SynthSpec small_spec(std::uint64_t seed) {
    SynthSpec s;
    s.shape = {32, 32, 64};
    s.blob_count_min = 6;
    s.blob_count_max = 8;
    s.radius_min = 3.0;
    s.radius_max = 5.0;
    s.noise_sigma = 0.01;
    s.seed = seed;
    return s;
}

}  // namespace

TEST(Synth, LabelsAreOneHot) {
    const SynthVolume v = generate(small_spec(1));
    const std::size_t n = 32 * 32 * 64;
    EXPECT_EQ(v.labels.shape(), (Shape{3, 32, 32, 64}));
    EXPECT_EQ(v.image.shape(), (Shape{1, 32, 32, 64}));
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            const double l = v.labels[c * n + i];
            EXPECT_TRUE(l == 0.0 || l == 1.0);
            s += l;
        }
        ASSERT_EQ(s, 1.0);
    }
}

TEST(Synth, SeedDeterminism) {
    const SynthVolume a = generate(small_spec(2)), b = generate(small_spec(2)), c = generate(small_spec(3));
    EXPECT_TRUE(a.image == b.image);
    EXPECT_TRUE(a.labels == b.labels);
    EXPECT_FALSE(a.image == c.image);
}

TEST(Synth, LabelsDoNotDependOnImagingEffects) {
    SynthSpec s = small_spec(4);
    const SynthVolume a = generate(s);
    s.noise_sigma = 0.0;
    s.ramp_amplitude = 0.0;
    const SynthVolume b = generate(s);
    EXPECT_TRUE(a.labels == b.labels);
    EXPECT_FALSE(a.image == b.image);
}

TEST(Synth, ZeroBlobsIsAllBackground) {
    SynthSpec s = small_spec(5);
    s.blob_count_min = s.blob_count_max = 0;
    const SynthVolume v = generate(s);
    EXPECT_TRUE(v.blobs.empty());
    const std::size_t n = 32 * 32 * 64;
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(v.labels[kBackground * n + i], 1.0);
}

TEST(Synth, BlobsAreSeparatedAndInsideTheDenseRegion) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        SynthSpec s;
        s.seed = seed;
        const SynthVolume v = generate(s);
        EXPECT_GE(v.blobs.size(), s.blob_count_min);
        EXPECT_LE(v.blobs.size(), s.blob_count_max);
        for (std::size_t i = 0; i < v.blobs.size(); ++i) {
            const Blob& b = v.blobs[i];
            EXPECT_LE(b.center[2] + b.radius, s.dense_fraction * 128.0);
            EXPECT_GE(b.radius, s.radius_min);
            EXPECT_LE(b.radius, s.radius_max);
            for (std::size_t j = 0; j < i; ++j) {
                const Blob& o = v.blobs[j];
                double d2 = 0.0;
                for (int a = 0; a < 3; ++a) d2 += std::pow(b.center[a] - o.center[a], 2);
                EXPECT_GE(std::sqrt(d2), b.radius + o.radius + 2.0);
            }
        }
    }
}

// Rebuild the classes from blob geometry alone with direct distance tests.
TEST(Synth, ClassesMatchBruteForceGeometry) {
    const SynthSpec s = small_spec(6);
    const SynthVolume v = generate(s);
    const long D = 32, H = 32, W = 64;
    const std::size_t n = D * H * W;
    auto owner = [&](long z, long y, long x) -> int {
        for (std::size_t k = 0; k < v.blobs.size(); ++k) {
            const Blob& b = v.blobs[k];
            const double d2 = std::pow(z - b.center[0], 2) + std::pow(y - b.center[1], 2) + std::pow(x - b.center[2], 2);
            if (d2 <= b.radius * b.radius) return static_cast<int>(k) + 1;
        }
        return 0;
    };
    for (long z = 0; z < D; ++z)
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W; ++x) {
                const int id = owner(z, y, x);
                std::size_t want = kBackground;
                if (id) {
                    want = kForeground;
                    for (long dz = -1; dz <= 1; ++dz)
                        for (long dy = -1; dy <= 1; ++dy)
                            for (long dx = -1; dx <= 1; ++dx) {
                                const long zz = z + dz, yy = y + dy, xx = x + dx;
                                if (zz < 0 || yy < 0 || xx < 0 || zz >= D || yy >= H || xx >= W) continue;
                                if (owner(zz, yy, xx) != id) want = kBoundary;
                            }
                }
                const std::size_t i = static_cast<std::size_t>((z * H + y) * W + x);
                ASSERT_EQ(v.labels[want * n + i], 1.0) << z << "," << y << "," << x;
            }
}

TEST(Synth, ForegroundVolumeTracksSphereVolumes) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        SynthSpec s;
        s.seed = seed;
        const SynthVolume v = generate(s);
        double analytic = 0.0;
        for (const Blob& b : v.blobs) analytic += 4.0 / 3.0 * std::numbers::pi * std::pow(b.radius, 3);
        std::size_t voxels = 0;
        for (auto id : v.instance) voxels += id != 0;
        EXPECT_NEAR(static_cast<double>(voxels) / analytic, 1.0, 0.05);
    }
}

TEST(Synth, DenseHalfIsBrighterThanTheNoise) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SynthSpec s;
        s.seed = seed;
        const SynthVolume v = generate(s);
        EXPECT_GT(dense_minus_sparse_mean(v.image, s), s.noise_sigma);
    }
}

TEST(Synth, Validation) {
    SynthSpec s;
    s.shape = {64, 64, 30};
    EXPECT_THROW(generate(s), std::invalid_argument);
    s = SynthSpec{};
    s.radius_max = 40.0;
    EXPECT_THROW(generate(s), std::invalid_argument);
    s = SynthSpec{};
    s.blob_count_min = 10;
    s.blob_count_max = 5;
    EXPECT_THROW(generate(s), std::invalid_argument);
    s = SynthSpec{};
    s.blob_count_min = s.blob_count_max = 5000;
    s.max_retries = 10;
    EXPECT_THROW(generate(s), std::runtime_error);
}

TEST(Synth, BoundaryMaskThickness) {
    // a 5^3 cube of one instance inside background
    const std::array<std::size_t, 3> shape{7, 7, 7};
    std::vector<std::uint32_t> inst(343, 0);
    for (std::size_t z = 1; z < 6; ++z)
        for (std::size_t y = 1; y < 6; ++y)
            for (std::size_t x = 1; x < 6; ++x) inst[(z * 7 + y) * 7 + x] = 1;
    std::size_t thin = 0, thick = 0;
    for (auto m : boundary_mask(inst, shape, 1)) thin += m;
    for (auto m : boundary_mask(inst, shape, 2)) thick += m;
    EXPECT_EQ(thin, 125u - 27u);
    EXPECT_EQ(thick, 124u);
}
