#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tilenorm/infer.hpp"
#include "tilenorm/prng.hpp"
#include "tilenorm/stats.hpp"
#include "tilenorm/unet.hpp"

namespace tilenorm {

// ---------------------------------------------------------------------------
// Dice

//! 2|A∩B| / (|A| + |B|), with two empty masks counting as perfect agreement.
inline double dice_from_counts(std::size_t intersection, std::size_t a, std::size_t b) {
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(intersection) / static_cast<double>(a + b);
}

//! Dice of the masks {a > threshold} and {b > threshold} over all elements.
inline double mask_dice(std::span<const double> a, std::span<const double> b, double threshold = 0.5) {
    if (a.size() != b.size()) throw ShapeError("mask_dice: size mismatch");
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] > threshold, y = b[i] > threshold;
        na += x;
        nb += y;
        inter += x && y;
    }
    return dice_from_counts(inter, na, nb);
}

//! Per-channel Dice of two [C, ...] tensors.
inline std::vector<double> channel_dice(const Tensor& a, const Tensor& b, double threshold = 0.5) {
    if (a.shape() != b.shape())
        throw ShapeError("channel_dice: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const std::size_t C = a.dim(0), S = a.size() / C;
    std::vector<double> out(C);
    for (std::size_t c = 0; c < C; ++c)
        out[c] = mask_dice(a.data().subspan(c * S, S), b.data().subspan(c * S, S), threshold);
    return out;
}

// ---------------------------------------------------------------------------
// Receptive fields

struct Interval {
    std::ptrdiff_t lo = 0;
    std::ptrdiff_t hi = 0;
    friend bool operator==(const Interval&, const Interval&) = default;
};

namespace detail {

inline std::ptrdiff_t floor_div2(std::ptrdiff_t v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }

inline Interval hull(Interval a, Interval b) { return {std::min(a.lo, b.lo), std::max(a.hi, b.hi)}; }

}  // namespace detail

//! One stage of a plain feed-forward chain, for receptive fields outside the U-Net.
struct RFStep {
    enum Kind { Conv, Pool2, Up2 } kind = Conv;
    std::size_t kernel = 3;  // Conv only, "same" padding
};

//! Dependency interval of output position `p` through a chain of stages (applied first to last).
inline Interval chain_interval(std::span<const RFStep> steps, std::ptrdiff_t p) {
    Interval need{p, p};
    for (std::size_t i = steps.size(); i-- > 0;) {
        const RFStep& s = steps[i];
        const auto r = static_cast<std::ptrdiff_t>(s.kernel / 2);
        if (s.kind == RFStep::Conv) need = {need.lo - r, need.hi + r};
        else if (s.kind == RFStep::Pool2) need = {2 * need.lo, 2 * need.hi + 1};
        else need = {detail::floor_div2(need.lo), detail::floor_div2(need.hi)};
    }
    return need;
}

/*!
 * Input interval (one axis) that output position `p` depends on, by walking
 * the U-Net graph backwards: a "same" conv widens by k/2, a 2x up-conv maps
 * [lo, hi] to [lo/2, hi/2] (floor), 2x pooling maps to [2lo, 2hi + 1], and a
 * skip concatenation takes the hull of both branches.
 */
inline Interval trf_interval(const ModelConfig& config, std::ptrdiff_t p) {
    config.validate();
    const std::size_t L = config.levels, B = config.blocks_per_level;
    const auto r = static_cast<std::ptrdiff_t>(config.conv_kernel / 2);
    auto blocks = [&](Interval iv) { return Interval{iv.lo - static_cast<std::ptrdiff_t>(B) * r, iv.hi + static_cast<std::ptrdiff_t>(B) * r}; };

    std::vector<Interval> skip(L);
    Interval need{p, p};  // head is 1x1x1
    for (std::size_t l = 0; l < L; ++l) {
        need = blocks(need);
        skip[l] = need;
        need = {detail::floor_div2(need.lo), detail::floor_div2(need.hi)};
    }
    need = blocks(need);  // bottleneck
    for (std::size_t l = L; l-- > 0;) {
        need = detail::hull(Interval{2 * need.lo, 2 * need.hi + 1}, skip[l]);
        need = blocks(need);
    }
    return need;
}

struct TrfResult {
    bool full_tile = false;
    //! Per-axis halo that covers the dependency interval of every output position.
    Extent3 radius{};
    friend bool operator==(const TrfResult&, const TrfResult&) = default;
};

/*!
 * Theoretical receptive field. FULL_TILE (`full_tile`) when any layer
 * normalizes with statistics of the tile itself in `mode`; otherwise the
 * largest one-sided reach over all positions modulo the down-sampling factor.
 */
inline TrfResult compute_trf(const ModelConfig& config, Mode mode = Mode::Eval) {
    config.validate();
    TrfResult out;
    if (uses_input_statistics(config.norm_kind, mode)) {
        out.full_tile = true;
        return out;
    }
    std::ptrdiff_t reach = 0;
    const auto period = static_cast<std::ptrdiff_t>(config.spatial_multiple());
    for (std::ptrdiff_t p = 0; p < period; ++p) {
        const Interval iv = trf_interval(config, p);
        reach = std::max({reach, p - iv.lo, iv.hi - p});
    }
    out.radius.fill(static_cast<std::size_t>(reach));
    return out;
}

/*!
 * Gradient-support oracle: build the same graph with identity normalization,
 * linearized activations, mean pooling and all weights |w| + 1, backpropagate
 * a unit gradient from output voxel `center` of a `tile`-sized input and
 * return, per axis, the bounding interval of voxels with nonzero gradient.
 * Every weight being positive rules out cancellation, so the support is
 * exactly the set of inputs on the computation graph.
 */
inline std::array<Interval, 3> gradient_support(const ModelConfig& config, const Extent3& tile, const Extent3& center) {
    ModelConfig probe = config;
    probe.norm_kind = NormKind::Identity;
    probe.in_channels = 1;
    probe.out_channels = 1;
    for (std::size_t i = 0; i < probe.features.size(); ++i) probe.features[i] = i + 1;
    Model m = build(probe);
    m.set_linear_probe(true);
    auto positive = [](Tensor& t) {
        for (auto& v : t.vec()) v = std::abs(v) + 1.0;
    };
    for (auto& b : m.blocks()) positive(b.conv.weight);
    for (auto& u : m.ups()) positive(u.weight);
    positive(m.head().weight);

    Tensor x({1, 1, tile[0], tile[1], tile[2]});
    const Tensor y = m.forward(x, Mode::Eval);
    Tensor up(y.shape());
    up.at(0, 0, center[0], center[1], center[2]) = 1.0;
    const Tensor g = m.backward(up).input;

    std::array<Interval, 3> box;
    bool any = false;
    for (std::size_t z = 0; z < tile[0]; ++z)
        for (std::size_t yy = 0; yy < tile[1]; ++yy)
            for (std::size_t xx = 0; xx < tile[2]; ++xx) {
                if (g.at(0, 0, z, yy, xx) == 0.0) continue;
                const std::array<std::ptrdiff_t, 3> pos{static_cast<std::ptrdiff_t>(z), static_cast<std::ptrdiff_t>(yy),
                                                        static_cast<std::ptrdiff_t>(xx)};
                for (int a = 0; a < 3; ++a) {
                    if (!any) box[a] = {pos[a], pos[a]};
                    box[a] = detail::hull(box[a], {pos[a], pos[a]});
                }
                any = true;
            }
    if (!any) throw std::runtime_error("gradient_support: gradient vanished everywhere");
    return box;
}

template <class N>
concept DifferentiableNet = requires(N& n, const Tensor& t) {
    { n.forward(t, Mode::Eval) } -> std::convertible_to<Tensor>;
    { n.backward(t).input } -> std::convertible_to<Tensor>;
};

/*!
 * Effective receptive field: log10 of the voxelwise mean |dy_center / dx|
 * over `n_samples` uniform [0, 1) input tiles, with the unit gradient placed
 * on the center voxel of every output channel. Values are floored at 1e-12.
 */
template <DifferentiableNet Net>
Tensor compute_erf(Net& net, const Extent3& tile, std::size_t n_samples, Prng& rng, std::size_t in_channels = 1) {
    if (n_samples == 0) throw std::invalid_argument("compute_erf: n_samples must be >= 1");
    Tensor acc({tile[0], tile[1], tile[2]});
    const std::size_t S = acc.size();
    for (std::size_t s = 0; s < n_samples; ++s) {
        Tensor x({1, in_channels, tile[0], tile[1], tile[2]});
        for (auto& v : x.vec()) v = rng.uniform();
        const Tensor y = net.forward(x, Mode::Eval);
        Tensor up(y.shape());
        for (std::size_t c = 0; c < y.dim(1); ++c) up.at(0, c, tile[0] / 2, tile[1] / 2, tile[2] / 2) = 1.0;
        const Tensor g = net.backward(up).input;
        for (std::size_t c = 0; c < in_channels; ++c)
            for (std::size_t i = 0; i < S; ++i) acc[i] += std::abs(g[c * S + i]);
    }
    for (auto& v : acc.vec()) v = std::log10(std::max(v / static_cast<double>(n_samples), 1e-12));
    return acc;
}

struct RFReport {
    TrfResult trf;
    Tensor erf_map;
    Extent3 tile{};
    std::size_t samples = 0;
};

// ---------------------------------------------------------------------------
// Tile mismatch

struct MismatchGeometry {
    Extent3 tile{64, 64, 64};
    std::size_t split_offset = 8;  // second tile shifted along the last axis
    std::size_t stride = 16;
    Extent3 halo{24, 24, 24};
    double threshold = 0.5;
};

struct MismatchReport {
    double max_dist = 0.0;
    std::vector<double> per_channel_mismatch;
    std::size_t tiles_compared = 0;
    bool seamless = true;
    friend bool operator==(const MismatchReport&, const MismatchReport&) = default;
};

//! Probe origins along one axis: 0, stride, 2 * stride, ... while the probe fits.
inline std::vector<std::size_t> probe_positions(std::size_t volume, std::size_t probe, std::size_t stride) {
    if (probe > volume)
        throw std::invalid_argument("probe extent " + std::to_string(probe) + " exceeds volume extent " + std::to_string(volume));
    if (stride == 0) throw std::invalid_argument("probe stride must be positive");
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p + probe <= volume; p += stride) out.push_back(p);
    return out;
}

/*!
 * Split each probe box into two tiles offset along the last axis, predict
 * both in Eval mode, and compare them on the overlap shrunk by the halo from
 * every edge of both tiles. max_dist is taken over all probes, channels and
 * voxels; mismatch per channel is the median over probes of 1 - Dice.
 */
template <TilePredictor P>
MismatchReport tile_mismatch(const P& predictor, const Tensor& volume, const NormalizeSpec& spec,
                             const MismatchGeometry& g, std::size_t workers = 1) {
    require_rank(volume, 4, "tile_mismatch volume");
    const Extent3& T = g.tile;
    const Extent3& h = g.halo;
    if (g.split_offset >= T[2]) throw std::invalid_argument("tile_mismatch: split offset must be smaller than the tile");
    const std::size_t overlap = T[2] - g.split_offset;
    for (int a = 0; a < 3; ++a) {
        const std::size_t extent = a == 2 ? overlap : T[a];
        if (extent < 2 * h[a] + 1)
            throw std::invalid_argument("tile_mismatch: overlap " + std::to_string(extent) + " on axis " + std::to_string(a) +
                                        " is smaller than 2 * halo + 1 = " + std::to_string(2 * h[a] + 1));
    }
    // valid overlap in the first tile's coordinates
    Box3 valid{{h[0], h[1], g.split_offset + h[2]}, {T[0] - 2 * h[0], T[1] - 2 * h[1], T[2] - h[2] - (g.split_offset + h[2])}};
    if (T[2] - h[2] <= g.split_offset + h[2]) valid.extent[2] = 0;
    if (valid.volume() == 0) throw std::invalid_argument("tile_mismatch: valid overlap is empty");
    Box3 valid2 = valid;
    valid2.start[2] -= g.split_offset;

    const Tensor source = spec.strategy == InputNorm::Global ? quantile_normalize(volume, spec) : volume;
    const Extent3 probe{T[0], T[1], T[2] + g.split_offset};
    const auto pz = probe_positions(volume.dim(1), probe[0], g.stride);
    const auto py = probe_positions(volume.dim(2), probe[1], g.stride);
    const auto px = probe_positions(volume.dim(3), probe[2], g.stride);
    std::vector<Extent3> origins;
    for (auto z : pz)
        for (auto y : py)
            for (auto x : px) origins.push_back({z, y, x});

    struct ProbeResult {
        double max_dist = 0.0;
        std::vector<double> mismatch;
    };
    std::vector<ProbeResult> results(origins.size());
    auto run_tile = [&](const Extent3& start) {
        Tensor in = crop(source, Box3{start, T});
        if (spec.strategy == InputNorm::TileWise) in = quantile_normalize(in, spec);
        return squeeze0(predictor.predict(unsqueeze0(in), Mode::Eval));
    };
    detail::parallel_for(origins.size(), workers, [&](std::size_t i) {
        const Extent3 o = origins[i];
        const Tensor a = crop(run_tile(o), valid);
        const Tensor b = crop(run_tile({o[0], o[1], o[2] + g.split_offset}), valid2);
        ProbeResult r;
        r.max_dist = max_abs_diff(a, b);
        for (double d : channel_dice(a, b, g.threshold)) r.mismatch.push_back(1.0 - d);
        results[i] = std::move(r);
    });

    MismatchReport rep;
    rep.tiles_compared = results.size();
    const std::size_t C = results.front().mismatch.size();
    rep.per_channel_mismatch.assign(C, 0.0);
    for (const auto& r : results) rep.max_dist = std::max(rep.max_dist, r.max_dist);
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> v;
        for (const auto& r : results) v.push_back(r.mismatch[c]);
        rep.per_channel_mismatch[c] = median(v);
    }
    rep.seamless = rep.max_dist == 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Train/eval disparity and Dice evaluation

struct DisparityReport {
    std::vector<double> per_volume;
    double median = 0.0;
    friend bool operator==(const DisparityReport&, const DisparityReport&) = default;
};

/*!
 * 1 - Dice between sliding-window predictions made with Train-mode
 * normalization statistics (nothing committed) and with Eval-mode ones,
 * thresholded at 0.5 and pooled over all channels.
 */
template <TilePredictor P>
DisparityReport train_eval_disparity(const P& predictor, const std::vector<Tensor>& volumes, const NormalizeSpec& spec,
                                     SlidingOptions opt) {
    if (volumes.empty()) throw std::invalid_argument("train_eval_disparity: empty volume list");
    DisparityReport rep;
    for (const Tensor& v : volumes) {
        opt.mode = Mode::Train;
        const Tensor pt = predict_sliding(predictor, v, spec, opt);
        opt.mode = Mode::Eval;
        const Tensor pe = predict_sliding(predictor, v, spec, opt);
        rep.per_volume.push_back(1.0 - mask_dice(pt.data(), pe.data(), 0.5));
    }
    rep.median = median(rep.per_volume);
    return rep;
}

struct DiceReport {
    std::vector<std::vector<double>> per_volume;  // [volume][class]
    std::vector<double> median;                   // per class
    friend bool operator==(const DiceReport&, const DiceReport&) = default;
};

//! Per-class Dice of predictions thresholded at 0.5 against one-hot labels, and the per-class median.
inline DiceReport summarize_dice(const std::vector<Tensor>& predictions, const std::vector<Tensor>& labels) {
    if (predictions.size() != labels.size() || predictions.empty())
        throw std::invalid_argument("dice: need one label volume per prediction");
    DiceReport rep;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i].dim(0) != labels[i].dim(0))
            throw ShapeError("dice: prediction has " + std::to_string(predictions[i].dim(0)) + " channels, labels have " +
                             std::to_string(labels[i].dim(0)));
        rep.per_volume.push_back(channel_dice(predictions[i], labels[i], 0.5));
    }
    for (std::size_t c = 0; c < rep.per_volume.front().size(); ++c) {
        std::vector<double> v;
        for (const auto& pv : rep.per_volume) v.push_back(pv[c]);
        rep.median.push_back(median(v));
    }
    return rep;
}

template <TilePredictor P>
DiceReport dice_eval(const P& predictor, const std::vector<Tensor>& images, const std::vector<Tensor>& labels,
                     const NormalizeSpec& spec, const SlidingOptions& opt) {
    if (images.empty()) throw std::invalid_argument("dice_eval: empty volume list");
    std::vector<Tensor> preds;
    for (const Tensor& im : images) preds.push_back(predict_sliding(predictor, im, spec, opt));
    return summarize_dice(preds, labels);
}

}  // namespace tilenorm
