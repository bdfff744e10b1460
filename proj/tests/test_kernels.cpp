#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "tilenorm/kernels.hpp"
#include "tilenorm/prng.hpp"

using namespace tilenorm;

namespace {

Tensor random_tensor(Shape s, Prng& r) {
    Tensor t(std::move(s));
    for (auto& v : t.vec()) v = r.uniform(-1.0, 1.0);
    return t;
}

// Direct six-loop summation in the documented order (c_in, kz, ky, kx), bias last.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, long s, long p) {
    const long Cin = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    const long Cout = w.dim(0), k = w.dim(2);
    const long Do = (D + 2 * p - k) / s + 1, Ho = (H + 2 * p - k) / s + 1, Wo = (W + 2 * p - k) / s + 1;
    Tensor out({size_t(Cout), size_t(Do), size_t(Ho), size_t(Wo)});
    for (long co = 0; co < Cout; ++co)
        for (long z = 0; z < Do; ++z)
            for (long y = 0; y < Ho; ++y)
                for (long xx = 0; xx < Wo; ++xx) {
                    double acc = 0.0;
                    for (long ci = 0; ci < Cin; ++ci)
                        for (long kz = 0; kz < k; ++kz)
                            for (long ky = 0; ky < k; ++ky)
                                for (long kx = 0; kx < k; ++kx) {
                                    const long iz = z * s + kz - p, iy = y * s + ky - p, ix = xx * s + kx - p;
                                    const bool in = iz >= 0 && iy >= 0 && ix >= 0 && iz < D && iy < H && ix < W;
                                    acc += w.at(co, ci, kz, ky, kx) * (in ? x.at(ci, iz, iy, ix) : 0.0);
                                }
                    if (!b.empty()) acc = acc + b[co];
                    out.at(co, z, y, xx) = acc;
                }
    return out;
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace

TEST(Conv3d, OneByOneIdentity) {
    Prng r(1);
    Tensor x = random_tensor({1, 3, 4, 5}, r);
    Tensor w({1, 1, 1, 1, 1}, 1.0);
    Tensor b({1});
    EXPECT_TRUE(conv3d(x, w, b, 1, 0) == x);
}

TEST(Conv3d, AllOnesCountsWindowOverlap) {
    Tensor x({1, 5, 5, 5}, 1.0);
    Tensor w({1, 1, 3, 3, 3}, 1.0);
    Tensor y = conv3d(x, w, Tensor(), 1, 1);
    EXPECT_EQ(y.at(0, 2, 2, 2), 27.0);
    EXPECT_EQ(y.at(0, 0, 0, 0), 8.0);
    EXPECT_EQ(y.at(0, 0, 2, 4), 12.0);
}

TEST(Conv3d, MatchesDirectSummationExactly) {
    Prng r(2);
    Tensor x = random_tensor({2, 4, 4, 4}, r);
    Tensor w = random_tensor({3, 2, 3, 3, 3}, r);
    Tensor b = random_tensor({3}, r);
    EXPECT_TRUE(conv3d(x, w, b, 1, 1) == conv_oracle(x, w, b, 1, 1));
    EXPECT_TRUE(conv3d(x, w, b, 1, 0) == conv_oracle(x, w, b, 1, 0));
}

TEST(Conv3d, OtherKernelsAndStrides) {
    Prng r(3);
    // extents chosen so every stride divides the padded span
    for (auto [k, s, p, n] : {std::tuple{5, 1, 2, 6}, {1, 1, 0, 6}, {3, 2, 1, 7}, {2, 2, 0, 6}, {5, 1, 1, 6}}) {
        Tensor x = random_tensor({2, size_t(n), size_t(n), size_t(n) + 2}, r);
        Tensor w = random_tensor({2, 2, size_t(k), size_t(k), size_t(k)}, r);
        Tensor b = random_tensor({2}, r);
        Tensor got = conv3d(x, w, b, s, p), want = conv_oracle(x, w, b, s, p);
        EXPECT_LE(max_abs_diff(got, want), 1e-13) << "k=" << k << " s=" << s << " p=" << p;
    }
}

TEST(Conv3d, ArgumentErrors) {
    Tensor x({1, 4, 4, 4});
    EXPECT_THROW(conv3d(x, Tensor({1, 2, 3, 3, 3}), Tensor(), 1, 1), ShapeError);
    EXPECT_THROW(conv3d(x, Tensor({1, 1, 4, 4, 4}), Tensor(), 1, 1), ShapeError);
    EXPECT_THROW(conv3d(x, Tensor({1, 1, 3, 3, 3}), Tensor(), 1, 3), ShapeError);
    EXPECT_THROW(conv3d(Tensor({1, 6, 6, 6}), Tensor({1, 1, 3, 3, 3}), Tensor(), 2, 0), ShapeError);
}

// A window's output must not depend on where the window sits in a larger tensor.
TEST(Conv3d, WindowPositionBitDeterminism) {
    Prng r(4);
    Tensor big = random_tensor({2, 12, 12, 12}, r);
    Tensor w = random_tensor({3, 2, 3, 3, 3}, r);
    Tensor b = random_tensor({3}, r);
    Tensor full = conv3d(big, w, b, 1, 0);
    for (auto start : {std::array<size_t, 3>{0, 0, 0}, {3, 5, 1}, {4, 4, 4}}) {
        Tensor part = conv3d(crop(big, Box3{start, {7, 7, 7}}), w, b, 1, 0);
        EXPECT_TRUE(part == crop(full, Box3{start, {5, 5, 5}}));
    }
}

TEST(Conv3d, BackwardIsAdjoint) {
    Prng r(5);
    for (auto [k, s, p, odd] : {std::tuple{3, 1, 1, 0}, {3, 1, 0, 0}, {5, 1, 2, 0}, {1, 1, 0, 0}, {3, 2, 1, 1}, {2, 2, 0, 0}}) {
        Tensor x = random_tensor({2, 6u + odd, 4u + odd, 8u + odd}, r);
        Tensor w = random_tensor({3, 2, size_t(k), size_t(k), size_t(k)}, r);
        Tensor y = conv3d(x, w, Tensor(), s, p);
        Tensor u = random_tensor(y.shape(), r);
        ConvGrads g = conv3d_backward(x, w, u, s, p);
        EXPECT_LT(rel_diff(dot(y.data(), u.data()), dot(x.data(), g.input.data())), 1e-12);
        // linear in w too: <conv(x, w), u> = <w, dL/dw>
        EXPECT_LT(rel_diff(dot(y.data(), u.data()), dot(w.data(), g.weights.data())), 1e-12);
        EXPECT_LT(rel_diff(std::accumulate(u.vec().begin(), u.vec().end(), 0.0),
                           std::accumulate(g.bias.vec().begin(), g.bias.vec().end(), 0.0)),
                  1e-12);
    }
}

TEST(ConvTransposed, SingleScatter) {
    Tensor x({1, 1, 1, 1}, 2.5);
    Tensor w({1, 1, 2, 2, 2}, 1.0);
    Tensor y = conv3d_transposed(x, w, Tensor());
    EXPECT_EQ(y.shape(), (Shape{1, 2, 2, 2}));
    for (double v : y.data()) EXPECT_EQ(v, 2.5);
}

TEST(ConvTransposed, ZeroInputGivesBias) {
    Prng r(6);
    Tensor w = random_tensor({2, 3, 2, 2, 2}, r);
    Tensor b({3}, std::vector<double>{0.5, -1.0, 2.0});
    Tensor y = conv3d_transposed(Tensor({2, 2, 2, 2}), w, b);
    for (size_t c = 0; c < 3; ++c)
        for (size_t i = 0; i < 64; ++i) EXPECT_EQ(y[c * 64 + i], b[c]);
}

TEST(ConvTransposed, AdjointOfStrideTwoConv) {
    Prng r(7);
    for (int trial = 0; trial < 4; ++trial) {
        const size_t cin = 1 + r.index(3), cout = 1 + r.index(3);
        Tensor x = random_tensor({cin, 1 + r.index(4), 1 + r.index(4), 1 + r.index(4)}, r);
        Tensor w = random_tensor({cin, cout, 2, 2, 2}, r);
        Tensor y = conv3d_transposed(x, w, Tensor());
        Tensor u = random_tensor(y.shape(), r);
        Tensor adj = conv3d(u, w, Tensor(), 2, 0);
        EXPECT_LT(rel_diff(dot(y.data(), u.data()), dot(x.data(), adj.data())), 1e-12);
        ConvGrads g = conv3d_transposed_backward(x, w, u);
        EXPECT_LE(max_abs_diff(g.input, adj), 1e-13);
        EXPECT_LT(rel_diff(dot(y.data(), u.data()), dot(w.data(), g.weights.data())), 1e-12);
    }
}

TEST(MaxPool, ConstantAndSingleWinner) {
    Tensor c({1, 4, 4, 4}, 3.0);
    const Tensor pooled = max_pool3d(c).output;
    for (double v : pooled.data()) EXPECT_EQ(v, 3.0);
    Tensor x({1, 2, 2, 2});
    x.at(0, 1, 0, 1) = 5.0;
    PoolResult p = max_pool3d(x);
    EXPECT_EQ(p.output[0], 5.0);
    EXPECT_EQ(p.argmax[0], x.offset(0, 1, 0, 1));
    EXPECT_THROW(max_pool3d(Tensor({1, 3, 2, 2})), ShapeError);
}

TEST(MaxPool, MatchesLoopOracleAndRoutesGradient) {
    Prng r(8);
    Tensor x = random_tensor({2, 4, 6, 8}, r);
    PoolResult p = max_pool3d(x);
    for (size_t c = 0; c < 2; ++c)
        for (size_t z = 0; z < 2; ++z)
            for (size_t y = 0; y < 3; ++y)
                for (size_t xx = 0; xx < 4; ++xx) {
                    double m = -INFINITY;
                    for (int a = 0; a < 8; ++a) m = std::max(m, x.at(c, 2 * z + (a >> 2), 2 * y + ((a >> 1) & 1), 2 * xx + (a & 1)));
                    EXPECT_EQ(p.output.at(c, z, y, xx), m);
                }
    Tensor u = random_tensor(p.output.shape(), r);
    Tensor g = max_pool3d_backward(x.shape(), p.argmax, u);
    EXPECT_NEAR(std::accumulate(g.vec().begin(), g.vec().end(), 0.0), std::accumulate(u.vec().begin(), u.vec().end(), 0.0), 1e-12);
    size_t nonzero = 0;
    for (size_t i = 0; i < g.size(); ++i) nonzero += g[i] != 0.0;
    EXPECT_EQ(nonzero, u.size());
}

TEST(AvgPool, BackwardIsAdjoint) {
    Prng r(9);
    Tensor x = random_tensor({2, 4, 4, 6}, r);
    Tensor y = avg_pool3d(x);
    Tensor u = random_tensor(y.shape(), r);
    Tensor g = avg_pool3d_backward(x.shape(), u);
    EXPECT_LT(rel_diff(dot(y.data(), u.data()), dot(x.data(), g.data())), 1e-12);
}
