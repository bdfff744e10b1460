#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tilenorm/tensor.hpp"

// Dense 3D kernels on single samples laid out as [C, D, H, W].
//
// The forward convolution accumulates every output voxel in the fixed order
// (c_in, kz, ky, kx), starting from 0.0 and adding the bias last. Zero padding
// is materialised so padded taps contribute an exact +0.0. Two windows with
// identical content therefore produce bit-identical outputs wherever they sit.

namespace tilenorm {

namespace detail {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) throw ShapeError("conv3d: kernel larger than padded input");
    const std::size_t span = in + 2 * pad - k;
    if (span % stride != 0)
        throw ShapeError("conv3d: non-integral output extent for input " + std::to_string(in) + ", kernel " +
                         std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " +
                         std::to_string(pad));
    return span / stride + 1;
}

//! Zero-pad the three spatial axes of [C, D, H, W] by `pad` on both sides.
inline Tensor pad_spatial(const Tensor& in, std::size_t pad) {
    if (pad == 0) return in;
    const std::size_t C = in.dim(0), D = in.dim(1), H = in.dim(2), W = in.dim(3);
    Tensor out({C, D + 2 * pad, H + 2 * pad, W + 2 * pad});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < D; ++z)
            for (std::size_t y = 0; y < H; ++y) {
                const double* s = in.ptr() + in.offset(c, z, y, 0);
                double* d = out.ptr() + out.offset(c, z + pad, y + pad, pad);
                std::copy(s, s + W, d);
            }
    return out;
}

// Stride-1 correlation of a padded input with a K^3 kernel, accumulated into `out`.
template <int K>
void correlate_s1_fixed(const Tensor& padded, const Tensor& weights, Tensor& out) {
    const std::size_t Cout = out.dim(0), Cin = padded.dim(0);
    const std::size_t Do = out.dim(1), Ho = out.dim(2), Wo = out.dim(3);
    const std::size_t Hp = padded.dim(2), Wp = padded.dim(3);
    const std::size_t plane = padded.dim(1) * Hp * Wp;
    for (std::size_t co = 0; co < Cout; ++co) {
        double* __restrict ochan = out.ptr() + co * Do * Ho * Wo;
        for (std::size_t ci = 0; ci < Cin; ++ci) {
            const double* wk = weights.ptr() + (co * Cin + ci) * K * K * K;
            double w[K * K * K];
            for (int i = 0; i < K * K * K; ++i) w[i] = wk[i];
            const double* pchan = padded.ptr() + ci * plane;
            for (std::size_t z = 0; z < Do; ++z)
                for (std::size_t y = 0; y < Ho; ++y) {
                    double* __restrict orow = ochan + (z * Ho + y) * Wo;
                    const double* rows[K * K];
                    for (int kz = 0; kz < K; ++kz)
                        for (int ky = 0; ky < K; ++ky) rows[kz * K + ky] = pchan + ((z + kz) * Hp + (y + ky)) * Wp;
                    for (std::size_t x = 0; x < Wo; ++x) {
                        double a = orow[x];
                        for (int r = 0; r < K * K; ++r)
                            for (int kx = 0; kx < K; ++kx) a += w[r * K + kx] * rows[r][x + kx];
                        orow[x] = a;
                    }
                }
        }
    }
}

inline void correlate_generic(const Tensor& padded, const Tensor& weights, std::size_t stride, Tensor& out) {
    const std::size_t Cout = out.dim(0), Cin = padded.dim(0);
    const std::size_t K = weights.dim(2);
    const std::size_t Do = out.dim(1), Ho = out.dim(2), Wo = out.dim(3);
    for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t z = 0; z < Do; ++z)
                for (std::size_t y = 0; y < Ho; ++y) {
                    double* orow = out.ptr() + out.offset(co, z, y, 0);
                    for (std::size_t x = 0; x < Wo; ++x) {
                        double a = orow[x];
                        for (std::size_t kz = 0; kz < K; ++kz)
                            for (std::size_t ky = 0; ky < K; ++ky) {
                                const double* prow = padded.ptr() + padded.offset(ci, z * stride + kz, y * stride + ky, 0);
                                const double* wrow = weights.ptr() + weights.offset(co, ci, kz, ky, 0);
                                for (std::size_t kx = 0; kx < K; ++kx) a += wrow[kx] * prow[x * stride + kx];
                            }
                        orow[x] = a;
                    }
                }
}

inline void check_conv_args(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t stride,
                            std::size_t padding) {
    require_rank(input, 4, "conv3d input");
    require_rank(weights, 5, "conv3d weights");
    const std::size_t k = weights.dim(2);
    if (weights.dim(3) != k || weights.dim(4) != k) throw ShapeError("conv3d: kernel must be cubic");
    if (weights.dim(1) != input.dim(0))
        throw ShapeError("conv3d: weights expect " + std::to_string(weights.dim(1)) + " input channels, got " +
                         std::to_string(input.dim(0)));
    if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != weights.dim(0)))
        throw ShapeError("conv3d: bias length must equal output channels");
    if (stride == 0) throw ShapeError("conv3d: stride must be positive");
    if (!(k % 2 == 1 || (k == 2 && stride == 2))) throw ShapeError("conv3d: kernel must be odd, or 2 with stride 2");
    if (padding >= k) throw ShapeError("conv3d: padding must be smaller than the kernel");
}

}  // namespace detail

/*!
 * 3D cross-correlation of [C_in, D, H, W] with [C_out, C_in, k, k, k] weights.
 *
 * Output extents are (D + 2p - k) / s + 1 per axis and must be integral.
 */
inline Tensor conv3d(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
    detail::check_conv_args(input, weights, bias, stride, padding);
    const std::size_t k = weights.dim(2);
    const std::size_t Do = detail::conv_out_extent(input.dim(1), k, stride, padding);
    const std::size_t Ho = detail::conv_out_extent(input.dim(2), k, stride, padding);
    const std::size_t Wo = detail::conv_out_extent(input.dim(3), k, stride, padding);
    Tensor out({weights.dim(0), Do, Ho, Wo});
    const Tensor padded = detail::pad_spatial(input, padding);
    if (stride == 1 && k == 3)
        detail::correlate_s1_fixed<3>(padded, weights, out);
    else if (stride == 1 && k == 1)
        detail::correlate_s1_fixed<1>(padded, weights, out);
    else if (stride == 1 && k == 5)
        detail::correlate_s1_fixed<5>(padded, weights, out);
    else
        detail::correlate_generic(padded, weights, stride, out);
    if (!bias.empty()) {
        const std::size_t n = Do * Ho * Wo;
        for (std::size_t co = 0; co < out.dim(0); ++co) {
            double* o = out.ptr() + co * n;
            const double b = bias[co];
            for (std::size_t i = 0; i < n; ++i) o[i] = o[i] + b;
        }
    }
    return out;
}

struct ConvGrads {
    Tensor input;
    Tensor weights;
    Tensor bias;
};

/*!
 * Gradients of conv3d with respect to input, weights and bias given the
 * upstream gradient of its output.
 */
inline ConvGrads conv3d_backward(const Tensor& input, const Tensor& weights, const Tensor& upstream,
                                 std::size_t stride, std::size_t padding) {
    detail::check_conv_args(input, weights, Tensor{}, stride, padding);
    const std::size_t Cout = weights.dim(0), Cin = weights.dim(1), K = weights.dim(2);
    const std::size_t Do = upstream.dim(1), Ho = upstream.dim(2), Wo = upstream.dim(3);
    if (upstream.dim(0) != Cout || Do != detail::conv_out_extent(input.dim(1), K, stride, padding) ||
        Ho != detail::conv_out_extent(input.dim(2), K, stride, padding) ||
        Wo != detail::conv_out_extent(input.dim(3), K, stride, padding))
        throw ShapeError("conv3d_backward: upstream shape " + shape_string(upstream.shape()) +
                         " does not match forward output");
    ConvGrads g;
    const std::size_t n_out = Do * Ho * Wo;

    g.bias = Tensor({Cout});
    for (std::size_t co = 0; co < Cout; ++co) {
        const double* u = upstream.ptr() + co * n_out;
        double s = 0.0;
        for (std::size_t i = 0; i < n_out; ++i) s += u[i];
        g.bias[co] = s;
    }

    const Tensor padded = detail::pad_spatial(input, padding);
    const std::size_t Hp = padded.dim(2), Wp = padded.dim(3);

    // Weights: per-lane partial sums keep the inner loop vectorisable.
    g.weights = Tensor(weights.shape());
    std::vector<double> lanes(K * K * K * Wo);
    for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t ci = 0; ci < Cin; ++ci) {
            std::fill(lanes.begin(), lanes.end(), 0.0);
            for (std::size_t z = 0; z < Do; ++z)
                for (std::size_t y = 0; y < Ho; ++y) {
                    const double* __restrict u = upstream.ptr() + ((co * Do + z) * Ho + y) * Wo;
                    for (std::size_t kz = 0; kz < K; ++kz)
                        for (std::size_t ky = 0; ky < K; ++ky) {
                            const double* __restrict p =
                                padded.ptr() + ((ci * padded.dim(1) + z * stride + kz) * Hp + y * stride + ky) * Wp;
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                double* __restrict l = lanes.data() + ((kz * K + ky) * K + kx) * Wo;
                                if (stride == 1)
                                    for (std::size_t x = 0; x < Wo; ++x) l[x] += u[x] * p[x + kx];
                                else
                                    for (std::size_t x = 0; x < Wo; ++x) l[x] += u[x] * p[x * stride + kx];
                            }
                        }
                }
            double* gw = g.weights.ptr() + (co * Cin + ci) * K * K * K;
            for (std::size_t t = 0; t < K * K * K; ++t) {
                double s = 0.0;
                for (std::size_t x = 0; x < Wo; ++x) s += lanes[t * Wo + x];
                gw[t] = s;
            }
        }

    // Input: stride 1 is a full correlation with the flipped, transposed kernel.
    if (stride == 1) {
        Tensor flipped({Cin, Cout, K, K, K});
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t t = 0; t < K * K * K; ++t)
                    flipped[(ci * Cout + co) * K * K * K + (K * K * K - 1 - t)] =
                        weights[(co * Cin + ci) * K * K * K + t];
        g.input = conv3d(upstream, flipped, Tensor{}, 1, K - 1 - padding);
    } else {
        Tensor gp(padded.shape());
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t ci = 0; ci < Cin; ++ci)
                for (std::size_t z = 0; z < Do; ++z)
                    for (std::size_t y = 0; y < Ho; ++y)
                        for (std::size_t x = 0; x < Wo; ++x) {
                            const double u = upstream.at(co, z, y, x);
                            for (std::size_t kz = 0; kz < K; ++kz)
                                for (std::size_t ky = 0; ky < K; ++ky)
                                    for (std::size_t kx = 0; kx < K; ++kx)
                                        gp.at(ci, z * stride + kz, y * stride + ky, x * stride + kx) +=
                                            u * weights.at(co, ci, kz, ky, kx);
                        }
        g.input = crop(gp, Box3{{padding, padding, padding}, {input.dim(1), input.dim(2), input.dim(3)}});
    }
    return g;
}

/*!
 * Transposed convolution with kernel 2 and stride 2: every input voxel
 * scatters into its own disjoint 2^3 output block. Weights are
 * [C_in, C_out, 2, 2, 2]; output extents are doubled.
 */
inline Tensor conv3d_transposed(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    require_rank(input, 4, "conv3d_transposed input");
    require_rank(weights, 5, "conv3d_transposed weights");
    if (weights.dim(2) != 2 || weights.dim(3) != 2 || weights.dim(4) != 2)
        throw ShapeError("conv3d_transposed: only kernel 2, stride 2 is supported");
    if (weights.dim(0) != input.dim(0)) throw ShapeError("conv3d_transposed: input channel mismatch");
    const std::size_t Cin = weights.dim(0), Cout = weights.dim(1);
    if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != Cout))
        throw ShapeError("conv3d_transposed: bias length must equal output channels");
    const std::size_t D = input.dim(1), H = input.dim(2), W = input.dim(3);
    Tensor out({Cout, 2 * D, 2 * H, 2 * W});
    for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t z = 0; z < D; ++z)
                for (std::size_t y = 0; y < H; ++y) {
                    const double* __restrict in = input.ptr() + input.offset(ci, z, y, 0);
                    for (std::size_t a = 0; a < 2; ++a)
                        for (std::size_t b = 0; b < 2; ++b) {
                            double* __restrict o = out.ptr() + out.offset(co, 2 * z + a, 2 * y + b, 0);
                            const double w0 = weights.at(ci, co, a, b, 0);
                            const double w1 = weights.at(ci, co, a, b, 1);
                            for (std::size_t x = 0; x < W; ++x) {
                                o[2 * x] += w0 * in[x];
                                o[2 * x + 1] += w1 * in[x];
                            }
                        }
                }
    if (!bias.empty()) {
        const std::size_t n = 8 * D * H * W;
        for (std::size_t co = 0; co < Cout; ++co) {
            double* o = out.ptr() + co * n;
            for (std::size_t i = 0; i < n; ++i) o[i] = o[i] + bias[co];
        }
    }
    return out;
}

inline ConvGrads conv3d_transposed_backward(const Tensor& input, const Tensor& weights, const Tensor& upstream) {
    const std::size_t Cin = weights.dim(0), Cout = weights.dim(1);
    const std::size_t D = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (upstream.shape() != Shape{Cout, 2 * D, 2 * H, 2 * W})
        throw ShapeError("conv3d_transposed_backward: upstream shape " + shape_string(upstream.shape()) +
                         " does not match forward output");
    ConvGrads g;
    g.input = Tensor(input.shape());
    g.weights = Tensor(weights.shape());
    g.bias = Tensor({Cout});
    const std::size_t n_out = 8 * D * H * W;
    for (std::size_t co = 0; co < Cout; ++co) {
        double s = 0.0;
        const double* u = upstream.ptr() + co * n_out;
        for (std::size_t i = 0; i < n_out; ++i) s += u[i];
        g.bias[co] = s;
    }
    for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t co = 0; co < Cout; ++co) {
            double gw[8] = {};
            for (std::size_t z = 0; z < D; ++z)
                for (std::size_t y = 0; y < H; ++y) {
                    const double* __restrict in = input.ptr() + input.offset(ci, z, y, 0);
                    double* __restrict gi = g.input.ptr() + g.input.offset(ci, z, y, 0);
                    for (std::size_t a = 0; a < 2; ++a)
                        for (std::size_t b = 0; b < 2; ++b) {
                            const double* __restrict u = upstream.ptr() + upstream.offset(co, 2 * z + a, 2 * y + b, 0);
                            const double w0 = weights.at(ci, co, a, b, 0);
                            const double w1 = weights.at(ci, co, a, b, 1);
                            double s0 = 0.0, s1 = 0.0;
                            for (std::size_t x = 0; x < W; ++x) {
                                gi[x] += w0 * u[2 * x] + w1 * u[2 * x + 1];
                                s0 += in[x] * u[2 * x];
                                s1 += in[x] * u[2 * x + 1];
                            }
                            gw[(a * 2 + b) * 2] += s0;
                            gw[(a * 2 + b) * 2 + 1] += s1;
                        }
                }
            for (int t = 0; t < 8; ++t) g.weights[(ci * Cout + co) * 8 + t] = gw[t];
        }
    return g;
}

//! Max pooling over disjoint 2^3 windows. `argmax` holds the winning input offset per output voxel.
struct PoolResult {
    Tensor output;
    std::vector<std::uint32_t> argmax;
};

inline PoolResult max_pool3d(const Tensor& input) {
    require_rank(input, 4, "max_pool3d");
    const std::size_t C = input.dim(0), D = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (D % 2 || H % 2 || W % 2)
        throw ShapeError("max_pool3d: spatial extents must be even, got " + shape_string(input.shape()));
    PoolResult r{Tensor({C, D / 2, H / 2, W / 2}), {}};
    r.argmax.resize(r.output.size());
    std::size_t o = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < D / 2; ++z)
            for (std::size_t y = 0; y < H / 2; ++y)
                for (std::size_t x = 0; x < W / 2; ++x, ++o) {
                    std::size_t best = input.offset(c, 2 * z, 2 * y, 2 * x);
                    for (std::size_t a = 0; a < 2; ++a)
                        for (std::size_t b = 0; b < 2; ++b)
                            for (std::size_t e = 0; e < 2; ++e) {
                                const std::size_t i = input.offset(c, 2 * z + a, 2 * y + b, 2 * x + e);
                                if (input[i] > input[best]) best = i;
                            }
                    r.output[o] = input[best];
                    r.argmax[o] = static_cast<std::uint32_t>(best);
                }
    return r;
}

inline Tensor max_pool3d_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                                  const Tensor& upstream) {
    if (argmax.size() != upstream.size()) throw ShapeError("max_pool3d_backward: stale argmax");
    Tensor g(input_shape);
    for (std::size_t o = 0; o < upstream.size(); ++o) g[argmax[o]] += upstream[o];
    return g;
}

//! Mean over disjoint 2^3 windows; a linear stand-in for max pooling used by support probes.
inline Tensor avg_pool3d(const Tensor& input) {
    require_rank(input, 4, "avg_pool3d");
    const std::size_t C = input.dim(0), D = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (D % 2 || H % 2 || W % 2) throw ShapeError("avg_pool3d: spatial extents must be even");
    Tensor out({C, D / 2, H / 2, W / 2});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < D; ++z)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) out.at(c, z / 2, y / 2, x / 2) += 0.125 * input.at(c, z, y, x);
    return out;
}

inline Tensor avg_pool3d_backward(const Shape& input_shape, const Tensor& upstream) {
    Tensor g(input_shape);
    for (std::size_t c = 0; c < input_shape[0]; ++c)
        for (std::size_t z = 0; z < input_shape[1]; ++z)
            for (std::size_t y = 0; y < input_shape[2]; ++y)
                for (std::size_t x = 0; x < input_shape[3]; ++x)
                    g.at(c, z, y, x) = 0.125 * upstream.at(c, z / 2, y / 2, x / 2);
    return g;
}

}  // namespace tilenorm
