#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "tilenorm/prng.hpp"
#include "tilenorm/stats.hpp"
#include "tilenorm/tensor.hpp"

using namespace tilenorm;

TEST(Tensor, ShapeAndLayout) {
    Tensor t({2, 3, 4});
    EXPECT_EQ(t.size(), 24u);
    EXPECT_EQ(t.rank(), 3u);
    t.at(1, 2, 3) = 7.0;
    EXPECT_EQ(t[23], 7.0);
    EXPECT_EQ(t.offset(1, 0, 0), 12u);
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
    EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
    EXPECT_EQ(t.reshaped({24})[23], 7.0);
}

TEST(Tensor, FiniteGuard) {
    Tensor t({3});
    EXPECT_NO_THROW(require_finite(t, "t"));
    t[1] = std::nan("");
    EXPECT_THROW(require_finite(t, "t"), NonFiniteError);
    t[1] = INFINITY;
    EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, CropZeroFillsBeyondSource) {
    Tensor src({1, 2, 2, 2});
    std::iota(src.vec().begin(), src.vec().end(), 1.0);
    Tensor c = crop(src, Box3{{1, 1, 1}, {1, 1, 1}}, {2, 2, 2});
    EXPECT_EQ(c.shape(), (Shape{1, 2, 2, 2}));
    EXPECT_EQ(c.at(0, 0, 0, 0), 8.0);
    EXPECT_EQ(std::accumulate(c.vec().begin(), c.vec().end(), 0.0), 8.0);
}

TEST(Tensor, PasteWritesOnlyTheBox) {
    Tensor dst({1, 4, 4, 4});
    Tensor src({1, 2, 2, 2}, 1.0);
    paste(dst, {1, 2, 0}, src, Box3{{1, 0, 0}, {1, 2, 2}});
    double sum = std::accumulate(dst.vec().begin(), dst.vec().end(), 0.0);
    EXPECT_EQ(sum, 4.0);
    EXPECT_EQ(dst.at(0, 1, 2, 0), 1.0);
    EXPECT_EQ(dst.at(0, 1, 3, 1), 1.0);
    EXPECT_EQ(dst.at(0, 2, 2, 0), 0.0);
}

// Reference SplitMix64 stream for seed 0.
TEST(Prng, SplitMix64TestVector) {
    Prng r(0);
    EXPECT_EQ(r.next_u64(), 0xE220A8397B1DCDAFULL);
    EXPECT_EQ(r.next_u64(), 0x6E789E6AA1B965F4ULL);
    EXPECT_EQ(r.next_u64(), 0x06C45D188009454FULL);
    EXPECT_EQ(r.next_u64(), 0xF88BB8A8724C81ECULL);
}

TEST(Prng, UniformIsTop53BitsScaled) {
    Prng r(12345);
    EXPECT_EQ(r.uniform(), 0.1330796686614273);
    EXPECT_EQ(r.uniform(), 0.20481663336165912);
    Prng q(99);
    for (int i = 0; i < 100000; ++i) {
        const double u = q.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
    }
}

TEST(Prng, NormalMoments) {
    Prng r(7);
    const int n = 100000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(sq / n - mean * mean, 1.0, 0.05);
}

TEST(Prng, SameSeedSameStreamForksDiffer) {
    Prng a(42), b(42);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Prng f1 = a.fork(1), f2 = a.fork(2);
    EXPECT_NE(f1.next_u64(), f2.next_u64());
}

TEST(Prng, IndexCoversRange) {
    Prng r(3);
    std::vector<int> hits(5, 0);
    for (int i = 0; i < 1000; ++i) ++hits[r.index(5)];
    for (int h : hits) EXPECT_GT(h, 100);
}

TEST(Quantile, BoundaryRanks) {
    std::vector<double> v{3.0, -1.0, 8.5, 2.0};
    EXPECT_EQ(quantile(v, 0.0), -1.0);
    EXPECT_EQ(quantile(v, 1.0), 8.5);
}

TEST(Quantile, InterpolatesAtRankQTimesNMinusOne) {
    std::vector<double> v(100);
    std::iota(v.begin(), v.end(), 0.0);
    std::reverse(v.begin(), v.end());
    EXPECT_DOUBLE_EQ(quantile(v, 0.5), 49.5);
    EXPECT_DOUBLE_EQ(quantile(v, 0.01), 0.99);
    EXPECT_DOUBLE_EQ(median(v), 49.5);
}

TEST(Quantile, Errors) {
    std::vector<double> empty;
    EXPECT_THROW(quantile(empty, 0.5), std::invalid_argument);
    std::vector<double> v{1.0};
    EXPECT_THROW(quantile(v, 1.5), std::invalid_argument);
    EXPECT_THROW(quantile(v, -0.1), std::invalid_argument);
}

TEST(Quantile, MonotoneAndPermutationInvariant) {
    Prng r(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> v(1 + r.index(50));
        for (auto& x : v) x = r.normal();
        std::vector<double> w = v;
        std::reverse(w.begin(), w.end());
        double prev = -INFINITY;
        for (int i = 0; i <= 20; ++i) {
            const double q = i / 20.0;
            const double a = quantile(v, q);
            EXPECT_EQ(a, quantile(w, q));
            EXPECT_GE(a, prev);
            prev = a;
        }
    }
}
