#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tilenorm/kernels.hpp"
#include "tilenorm/tensor.hpp"

namespace tilenorm {

enum class Mode { Train, Eval };

/*!
 * Feature normalization strategies.
 *
 * BatchNorm       train: batch statistics, running average collected; eval: running average.
 * InstanceNorm    train and eval: statistics of each sample, nothing collected.
 * InstanceNormTracked  train: per-sample statistics, running average collected; eval: running average.
 * BatchRenorm     train: batch statistics corrected towards the running average with clipped r, d;
 *                 eval: running average.
 * Identity        no normalization and no affine parameters.
 */
enum class NormKind { BatchNorm, InstanceNorm, InstanceNormTracked, BatchRenorm, Identity };

inline constexpr NormKind kAllNormKinds[] = {NormKind::BatchNorm, NormKind::InstanceNorm,
                                             NormKind::InstanceNormTracked, NormKind::BatchRenorm,
                                             NormKind::Identity};

inline std::string to_string(NormKind k) {
    switch (k) {
        case NormKind::BatchNorm: return "batchnorm";
        case NormKind::InstanceNorm: return "instancenorm";
        case NormKind::InstanceNormTracked: return "instancenorm-tracked";
        case NormKind::BatchRenorm: return "batchrenorm";
        case NormKind::Identity: return "identity";
    }
    return "?";
}

inline std::string to_string(Mode m) { return m == Mode::Train ? "train" : "eval"; }

inline std::optional<NormKind> parse_norm_kind(std::string_view s) {
    for (auto k : kAllNormKinds)
        if (to_string(k) == s) return k;
    return std::nullopt;
}

//! True when the kind normalizes with statistics of the current input in `mode`.
inline bool uses_input_statistics(NormKind kind, Mode mode) {
    switch (kind) {
        case NormKind::InstanceNorm: return true;
        case NormKind::Identity: return false;
        default: return mode == Mode::Train;
    }
}

inline bool has_affine(NormKind kind) { return kind != NormKind::Identity; }

//! Per-layer normalization parameters and running statistics.
struct NormState {
    std::vector<double> gamma;
    std::vector<double> beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.01;
    double eps = 1e-5;
    double r_max = 3.0;
    double d_max = 5.0;
    std::int64_t step_count = 0;

    NormState() = default;
    explicit NormState(std::size_t channels)
        : gamma(channels, 1.0), beta(channels, 0.0), running_mean(channels, 0.0), running_var(channels, 1.0) {}

    std::size_t channels() const { return gamma.size(); }

    void validate() const {
        const std::size_t c = gamma.size();
        if (beta.size() != c || running_mean.size() != c || running_var.size() != c)
            throw ShapeError("NormState: per-channel vectors differ in length");
        for (double v : running_var)
            if (!(v >= 0.0)) throw std::invalid_argument("NormState: running_var must be non-negative");
        if (!(momentum > 0.0 && momentum <= 1.0)) throw std::invalid_argument("NormState: momentum outside (0, 1]");
        if (!(eps > 0.0)) throw std::invalid_argument("NormState: eps must be positive");
        if (!(r_max >= 1.0)) throw std::invalid_argument("NormState: r_max must be >= 1");
        if (!(d_max >= 0.0)) throw std::invalid_argument("NormState: d_max must be >= 0");
    }
};

struct NormCache {
    NormKind kind = NormKind::Identity;
    Mode mode = Mode::Eval;
    bool valid = false;
    bool per_sample = false;   // statistics grouped by (n, c) rather than c
    bool batch_stats = false;  // statistics came from the input (gradient flows through them)
    Shape shape;
    Tensor xhat;               // (x - mu) / sigma before the renorm correction
    std::vector<double> sigma; // per group
    std::vector<double> gamma;
    std::vector<double> r;     // per channel, 1 unless BatchRenorm/Train
    std::vector<double> d;     // per channel, 0 unless BatchRenorm/Train
};

struct NormResult {
    Tensor y;
    NormState state;
    NormCache cache;
};

struct NormGrads {
    Tensor input;
    std::vector<double> gamma;
    std::vector<double> beta;
};

namespace detail {

inline void check_norm_input(const Tensor& x, const NormState& st) {
    require_rank(x, 5, "norm_forward");
    if (x.dim(1) != st.channels())
        throw ShapeError("norm_forward: input has " + std::to_string(x.dim(1)) + " channels, state has " +
                         std::to_string(st.channels()));
}

inline void update_running(std::vector<double>& running, const std::vector<double>& current, double m) {
    for (std::size_t c = 0; c < running.size(); ++c) running[c] = (1.0 - m) * running[c] + m * current[c];
}

}  // namespace detail

/*!
 * Normalize [N, C, D, H, W] features: y = gamma * ((x - mu) / sqrt(var + eps)) + beta,
 * with mu and var picked by `kind` and `mode`. Variances are biased (divide by n).
 *
 * Returns the output, the state after any running-statistic update, and the
 * cache consumed by norm_backward. The caller decides whether to commit the
 * returned state.
 */
inline NormResult norm_forward(const Tensor& x, const NormState& state, NormKind kind, Mode mode) {
    NormResult res{Tensor{}, state, NormCache{}};
    NormCache& cache = res.cache;
    cache.kind = kind;
    cache.mode = mode;
    cache.shape = x.shape();
    cache.valid = true;
    if (kind == NormKind::Identity) {
        res.y = x;
        return res;
    }
    detail::check_norm_input(x, state);
    const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3) * x.dim(4);
    cache.gamma = state.gamma;
    cache.r.assign(C, 1.0);
    cache.d.assign(C, 0.0);
    cache.xhat = Tensor(x.shape());
    res.y = Tensor(x.shape());

    const bool batch_stats = uses_input_statistics(kind, mode);
    const bool per_sample = batch_stats && (kind == NormKind::InstanceNorm || kind == NormKind::InstanceNormTracked);
    cache.batch_stats = batch_stats;
    cache.per_sample = per_sample;

    const std::size_t groups = per_sample ? N * C : C;
    std::vector<double> mu(groups), var(groups);
    if (batch_stats) {
        if (per_sample) {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const double* p = x.ptr() + (n * C + c) * S;
                    double s = 0.0;
                    for (std::size_t i = 0; i < S; ++i) s += p[i];
                    const double m = s / static_cast<double>(S);
                    double q = 0.0;
                    for (std::size_t i = 0; i < S; ++i) q += (p[i] - m) * (p[i] - m);
                    mu[n * C + c] = m;
                    var[n * C + c] = q / static_cast<double>(S);
                }
        } else {
            const double count = static_cast<double>(N * S);
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const double* p = x.ptr() + (n * C + c) * S;
                    for (std::size_t i = 0; i < S; ++i) s += p[i];
                }
                const double m = s / count;
                double q = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const double* p = x.ptr() + (n * C + c) * S;
                    for (std::size_t i = 0; i < S; ++i) q += (p[i] - m) * (p[i] - m);
                }
                mu[c] = m;
                var[c] = q / count;
            }
        }
    } else {
        mu = state.running_mean;
        var = state.running_var;
    }
    cache.sigma.resize(groups);
    for (std::size_t g = 0; g < groups; ++g) cache.sigma[g] = std::sqrt(var[g] + state.eps);

    if (kind == NormKind::BatchRenorm && mode == Mode::Train) {
        for (std::size_t c = 0; c < C; ++c) {
            const double sigma_run = std::sqrt(state.running_var[c] + state.eps);
            cache.r[c] = std::clamp(cache.sigma[c] / sigma_run, 1.0 / state.r_max, state.r_max);
            cache.d[c] = std::clamp((mu[c] - state.running_mean[c]) / sigma_run, -state.d_max, state.d_max);
        }
    }

    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t g = per_sample ? n * C + c : c;
            const double m = mu[g], s = cache.sigma[g];
            const double r = cache.r[c], d = cache.d[c];
            const double ga = state.gamma[c], be = state.beta[c];
            const double* p = x.ptr() + (n * C + c) * S;
            double* xh = cache.xhat.ptr() + (n * C + c) * S;
            double* out = res.y.ptr() + (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
                xh[i] = (p[i] - m) / s;
                out[i] = ga * (xh[i] * r + d) + be;
            }
        }

    const bool tracks = kind == NormKind::BatchNorm || kind == NormKind::BatchRenorm ||
                        kind == NormKind::InstanceNormTracked;
    if (mode == Mode::Train && tracks) {
        std::vector<double> cur_mu(C), cur_var(C);
        if (per_sample) {
            for (std::size_t c = 0; c < C; ++c) {
                double sm = 0.0, sv = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    sm += mu[n * C + c];
                    sv += var[n * C + c];
                }
                cur_mu[c] = sm / static_cast<double>(N);
                cur_var[c] = sv / static_cast<double>(N);
            }
        } else {
            cur_mu = mu;
            cur_var = var;
        }
        detail::update_running(res.state.running_mean, cur_mu, state.momentum);
        detail::update_running(res.state.running_var, cur_var, state.momentum);
        res.state.step_count += 1;
    }
    return res;
}

/*!
 * Analytic gradients of norm_forward. For BatchRenorm the correction factors
 * r and d are held constant.
 */
inline NormGrads norm_backward(const NormCache& cache, const Tensor& upstream) {
    if (!cache.valid) throw std::logic_error("norm_backward: no forward cache");
    if (upstream.shape() != cache.shape)
        throw ShapeError("norm_backward: stale cache, upstream " + shape_string(upstream.shape()) + " vs forward " +
                         shape_string(cache.shape));
    NormGrads g;
    if (cache.kind == NormKind::Identity) {
        g.input = upstream;
        return g;
    }
    const std::size_t N = cache.shape[0], C = cache.shape[1], S = cache.shape[2] * cache.shape[3] * cache.shape[4];
    g.input = Tensor(cache.shape);
    g.gamma.assign(C, 0.0);
    g.beta.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double sg = 0.0, sb = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            const double* u = upstream.ptr() + (n * C + c) * S;
            const double* xh = cache.xhat.ptr() + (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
                sg += u[i] * (xh[i] * cache.r[c] + cache.d[c]);
                sb += u[i];
            }
        }
        g.gamma[c] = sg;
        g.beta[c] = sb;
    }

    if (!cache.batch_stats) {
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const double scale = cache.gamma[c] / cache.sigma[c];
                const double* u = upstream.ptr() + (n * C + c) * S;
                double* gi = g.input.ptr() + (n * C + c) * S;
                for (std::size_t i = 0; i < S; ++i) gi[i] = u[i] * scale;
            }
        return g;
    }

    // dx = (dxh - mean(dxh) - xhat * mean(dxh * xhat)) / sigma over each statistics group.
    auto group_pass = [&](std::size_t c, std::size_t n_begin, std::size_t n_end, double sigma) {
        const double scale = cache.gamma[c] * cache.r[c];
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t n = n_begin; n < n_end; ++n) {
            const double* u = upstream.ptr() + (n * C + c) * S;
            const double* xh = cache.xhat.ptr() + (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
                const double dxh = u[i] * scale;
                s1 += dxh;
                s2 += dxh * xh[i];
            }
        }
        const double count = static_cast<double>((n_end - n_begin) * S);
        const double m1 = s1 / count, m2 = s2 / count;
        for (std::size_t n = n_begin; n < n_end; ++n) {
            const double* u = upstream.ptr() + (n * C + c) * S;
            const double* xh = cache.xhat.ptr() + (n * C + c) * S;
            double* gi = g.input.ptr() + (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) gi[i] = (u[i] * scale - m1 - xh[i] * m2) / sigma;
        }
    };
    for (std::size_t c = 0; c < C; ++c) {
        if (cache.per_sample)
            for (std::size_t n = 0; n < N; ++n) group_pass(c, n, n + 1, cache.sigma[n * C + c]);
        else
            group_pass(c, 0, N, cache.sigma[c]);
    }
    return g;
}

inline Tensor relu_forward(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

//! Gradient mask uses the forward input; the derivative at exactly 0 is 0.
inline Tensor relu_backward(const Tensor& x, const Tensor& upstream) {
    if (x.shape() != upstream.shape()) throw ShapeError("relu_backward: shape mismatch");
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? upstream[i] : 0.0;
    return g;
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
    return y;
}

//! Gradient through sigmoid given its output `y`.
inline Tensor sigmoid_backward(const Tensor& y, const Tensor& upstream) {
    Tensor g(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) g[i] = upstream[i] * y[i] * (1.0 - y[i]);
    return g;
}

// ---------------------------------------------------------------------------
// Batched wrappers over the single-sample kernels: tensors are [N, C, D, H, W].

inline Tensor sample(const Tensor& x, std::size_t n) {
    Shape s(x.shape().begin() + 1, x.shape().end());
    const std::size_t len = shape_volume(s);
    return Tensor(std::move(s), std::vector<double>(x.ptr() + n * len, x.ptr() + (n + 1) * len));
}

inline void set_sample(Tensor& x, std::size_t n, const Tensor& v) {
    std::copy(v.ptr(), v.ptr() + v.size(), x.ptr() + n * v.size());
}

inline Tensor stack(const std::vector<Tensor>& samples) {
    if (samples.empty()) throw ShapeError("stack: no samples");
    Shape s = samples.front().shape();
    s.insert(s.begin(), samples.size());
    Tensor out(std::move(s));
    for (std::size_t n = 0; n < samples.size(); ++n) {
        if (samples[n].shape() != samples.front().shape()) throw ShapeError("stack: sample shapes differ");
        set_sample(out, n, samples[n]);
    }
    return out;
}

struct ConvLayer {
    Tensor weight;  // [C_out, C_in, k, k, k]
    Tensor bias;    // [C_out]
    std::size_t padding = 0;

    std::size_t in_channels() const { return weight.dim(1); }
    std::size_t out_channels() const { return weight.dim(0); }

    Tensor forward(const Tensor& x) const {
        require_rank(x, 5, "ConvLayer input");
        std::vector<Tensor> ys;
        ys.reserve(x.dim(0));
        for (std::size_t n = 0; n < x.dim(0); ++n) ys.push_back(conv3d(sample(x, n), weight, bias, 1, padding));
        return stack(ys);
    }

    //! Weight and bias gradients are summed over the batch.
    ConvGrads backward(const Tensor& x, const Tensor& upstream) const {
        ConvGrads total{Tensor(x.shape()), Tensor(weight.shape()), Tensor(bias.shape())};
        for (std::size_t n = 0; n < x.dim(0); ++n) {
            ConvGrads g = conv3d_backward(sample(x, n), weight, sample(upstream, n), 1, padding);
            set_sample(total.input, n, g.input);
            for (std::size_t i = 0; i < g.weights.size(); ++i) total.weights[i] += g.weights[i];
            for (std::size_t i = 0; i < g.bias.size(); ++i) total.bias[i] += g.bias[i];
        }
        return total;
    }
};

struct UpConvLayer {
    Tensor weight;  // [C_in, C_out, 2, 2, 2]
    Tensor bias;    // [C_out]

    Tensor forward(const Tensor& x) const {
        require_rank(x, 5, "UpConvLayer input");
        std::vector<Tensor> ys;
        ys.reserve(x.dim(0));
        for (std::size_t n = 0; n < x.dim(0); ++n) ys.push_back(conv3d_transposed(sample(x, n), weight, bias));
        return stack(ys);
    }

    ConvGrads backward(const Tensor& x, const Tensor& upstream) const {
        ConvGrads total{Tensor(x.shape()), Tensor(weight.shape()), Tensor(bias.shape())};
        for (std::size_t n = 0; n < x.dim(0); ++n) {
            ConvGrads g = conv3d_transposed_backward(sample(x, n), weight, sample(upstream, n));
            set_sample(total.input, n, g.input);
            for (std::size_t i = 0; i < g.weights.size(); ++i) total.weights[i] += g.weights[i];
            for (std::size_t i = 0; i < g.bias.size(); ++i) total.bias[i] += g.bias[i];
        }
        return total;
    }
};

struct PoolCache {
    Shape input_shape;
    std::vector<std::vector<std::uint32_t>> argmax;  // per sample
    bool linear = false;
};

//! Max pooling (or mean pooling when `linear`) over 2^3 windows of [N, C, D, H, W].
inline Tensor pool_forward(const Tensor& x, bool linear, PoolCache* cache) {
    require_rank(x, 5, "pool_forward");
    std::vector<Tensor> ys;
    if (cache) {
        cache->input_shape = x.shape();
        cache->linear = linear;
        cache->argmax.clear();
    }
    for (std::size_t n = 0; n < x.dim(0); ++n) {
        if (linear) {
            ys.push_back(avg_pool3d(sample(x, n)));
        } else {
            PoolResult r = max_pool3d(sample(x, n));
            if (cache) cache->argmax.push_back(std::move(r.argmax));
            ys.push_back(std::move(r.output));
        }
    }
    return stack(ys);
}

inline Tensor pool_backward(const PoolCache& cache, const Tensor& upstream) {
    Tensor g(cache.input_shape);
    const Shape s(cache.input_shape.begin() + 1, cache.input_shape.end());
    for (std::size_t n = 0; n < cache.input_shape[0]; ++n) {
        const Tensor u = sample(upstream, n);
        set_sample(g, n, cache.linear ? avg_pool3d_backward(s, u) : max_pool3d_backward(s, cache.argmax.at(n), u));
    }
    return g;
}

//! Concatenate [N, Ca, ...] and [N, Cb, ...] along channels.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_rank(a, 5, "concat_channels");
    require_rank(b, 5, "concat_channels");
    for (int ax : {0, 2, 3, 4})
        if (a.dim(ax) != b.dim(ax)) throw ShapeError("concat_channels: spatial/batch mismatch");
    const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), S = a.dim(2) * a.dim(3) * a.dim(4);
    Tensor out({N, Ca + Cb, a.dim(2), a.dim(3), a.dim(4)});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy(a.ptr() + n * Ca * S, a.ptr() + (n + 1) * Ca * S, out.ptr() + n * (Ca + Cb) * S);
        std::copy(b.ptr() + n * Cb * S, b.ptr() + (n + 1) * Cb * S, out.ptr() + (n * (Ca + Cb) + Ca) * S);
    }
    return out;
}

inline std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::size_t Ca) {
    const std::size_t N = x.dim(0), C = x.dim(1), Cb = C - Ca, S = x.dim(2) * x.dim(3) * x.dim(4);
    Tensor a({N, Ca, x.dim(2), x.dim(3), x.dim(4)}), b({N, Cb, x.dim(2), x.dim(3), x.dim(4)});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy(x.ptr() + n * C * S, x.ptr() + (n * C + Ca) * S, a.ptr() + n * Ca * S);
        std::copy(x.ptr() + (n * C + Ca) * S, x.ptr() + (n + 1) * C * S, b.ptr() + n * Cb * S);
    }
    return {std::move(a), std::move(b)};
}

}  // namespace tilenorm
