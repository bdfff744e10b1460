#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tilenorm/layers.hpp"
#include "tilenorm/normalize.hpp"
#include "tilenorm/prng.hpp"
#include "tilenorm/tensor.hpp"
#include "tilenorm/unet.hpp"

namespace tilenorm {

//! Raised when training produces a non-finite loss.
class TrainingDiverged : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

//! One labelled volume: image [C, D, H, W] and one-hot labels [K, D, H, W].
struct LabeledVolume {
    Tensor image;
    Tensor labels;
};

// ---------------------------------------------------------------------------
// Dice loss

struct LossResult {
    double loss = 0.0;
    Tensor grad;  // d loss / d pred
};

inline constexpr double kDiceSmooth = 1e-5;

/*!
 * Soft Dice loss on [N, C, ...] predictions. Per sample, each channel with a
 * non-empty target contributes 1 - (2 sum(p g) + eps) / (sum p + sum g + eps);
 * those channels are averaged, channels with an empty target are skipped (and
 * get zero gradient). The batch loss is the mean over samples.
 */
inline LossResult dice_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw ShapeError("dice_loss: prediction " + shape_string(pred.shape()) + " vs target " +
                         shape_string(target.shape()));
    if (pred.rank() < 3) throw ShapeError("dice_loss: expected [N, C, ...]");
    const std::size_t N = pred.dim(0), C = pred.dim(1), S = pred.size() / (N * C);
    LossResult r{0.0, Tensor(pred.shape())};
    for (std::size_t n = 0; n < N; ++n) {
        std::vector<std::size_t> active;
        std::vector<double> P(C), G(C), I(C);
        for (std::size_t c = 0; c < C; ++c) {
            const double* p = pred.ptr() + (n * C + c) * S;
            const double* g = target.ptr() + (n * C + c) * S;
            double sp = 0.0, sg = 0.0, si = 0.0;
            for (std::size_t i = 0; i < S; ++i) {
                sp += p[i];
                sg += g[i];
                si += p[i] * g[i];
            }
            P[c] = sp;
            G[c] = sg;
            I[c] = si;
            if (sg > 0.0) active.push_back(c);
        }
        if (active.empty()) continue;
        const double w = 1.0 / (static_cast<double>(active.size()) * static_cast<double>(N));
        for (std::size_t c : active) {
            const double den = P[c] + G[c] + kDiceSmooth;
            const double num = 2.0 * I[c] + kDiceSmooth;
            r.loss += w * (1.0 - num / den);
            const double* g = target.ptr() + (n * C + c) * S;
            double* out = r.grad.ptr() + (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) out[i] = -w * (2.0 * g[i] * den - num) / (den * den);
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    AdamState() = default;
    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

//! Adam with bias correction, in place.
inline void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& st, double lr) {
    if (params.size() != grads.size() || st.m.size() != params.size() || st.v.size() != params.size())
        throw ShapeError("adam_step: length mismatch");
    st.t += 1;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
        const double mh = st.m[i] / c1;
        const double vh = st.v[i] / c2;
        params[i] -= lr * mh / (std::sqrt(vh) + st.eps);
    }
}

// ---------------------------------------------------------------------------
// Sampling and augmentation

struct TileSample {
    Tensor image;
    Tensor labels;
    Extent3 offset{};
};

//! Uniformly random tile position; the generator is advanced in place.
inline TileSample sample_tile(const Tensor& image, const Tensor& labels, const Extent3& tile, Prng& rng) {
    require_rank(image, 4, "sample_tile image");
    require_rank(labels, 4, "sample_tile labels");
    for (int a = 0; a < 3; ++a) {
        if (image.dim(a + 1) != labels.dim(a + 1)) throw ShapeError("sample_tile: image/label extents differ");
        if (tile[a] > image.dim(a + 1))
            throw ShapeError("sample_tile: tile " + std::to_string(tile[a]) + " larger than volume extent " +
                             std::to_string(image.dim(a + 1)));
    }
    TileSample s;
    for (int a = 0; a < 3; ++a) s.offset[a] = static_cast<std::size_t>(rng.index(image.dim(a + 1) - tile[a] + 1));
    const Box3 box{s.offset, tile};
    s.image = crop(image, box);
    s.labels = crop(labels, box);
    return s;
}

//! Reverse one spatial axis (0, 1 or 2) of [C, D, H, W].
inline Tensor flip_axis(const Tensor& t, int axis) {
    require_rank(t, 4, "flip_axis");
    Tensor out(t.shape());
    const std::size_t C = t.dim(0), D = t.dim(1), H = t.dim(2), W = t.dim(3);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < D; ++z)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    const std::size_t sz = axis == 0 ? D - 1 - z : z;
                    const std::size_t sy = axis == 1 ? H - 1 - y : y;
                    const std::size_t sx = axis == 2 ? W - 1 - x : x;
                    out.at(c, z, y, x) = t.at(c, sz, sy, sx);
                }
    return out;
}

/*!
 * Flip each spatial axis independently with probability `flip_prob`; image
 * and labels always receive the same flips. Three uniforms are drawn per call
 * whatever the probability, so the stream position does not depend on it.
 */
inline std::array<bool, 3> flip_augment(Tensor& image, Tensor& labels, Prng& rng, double flip_prob = 0.5) {
    std::array<bool, 3> flipped{};
    for (int a = 0; a < 3; ++a) {
        flipped[a] = rng.uniform() < flip_prob;
        if (flipped[a]) {
            image = flip_axis(image, a);
            labels = flip_axis(labels, a);
        }
    }
    return flipped;
}

// ---------------------------------------------------------------------------
// BatchRenorm schedule

/*!
 * Clip bounds for BatchRenorm over training: exactly (1, 0) during warmup
 * (plain batch normalization), then linear growth to (r_max, d_max) over
 * `ramp_steps`.
 */
struct RenormSchedule {
    std::size_t warmup_steps = 100;
    std::size_t ramp_steps = 1000;
    double r_max = 3.0;
    double d_max = 5.0;

    static constexpr std::size_t kNever = std::numeric_limits<std::size_t>::max();

    std::pair<double, double> at(std::size_t step) const {
        if (step < warmup_steps) return {1.0, 0.0};
        const double t = ramp_steps == 0 ? 1.0
                                         : std::min(1.0, static_cast<double>(step - warmup_steps + 1) /
                                                             static_cast<double>(ramp_steps));
        return {1.0 + t * (r_max - 1.0), t * d_max};
    }
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    double lr = 0.001;
    std::size_t steps = 300;        // micro-steps, one forward/backward each
    std::size_t accum_steps = 8;    // micro-steps per optimizer update
    std::size_t batch_size = 1;
    Extent3 tile_size{32, 32, 32};
    double flip_prob = 0.5;
    RenormSchedule renorm{};
    NormalizeSpec input_norm{};
    std::optional<double> momentum;  // overrides the running-average momentum of every norm layer
    std::size_t snapshot_every = 50;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr >= 0.0)) throw std::invalid_argument("TrainConfig: lr must be >= 0");
        if (accum_steps == 0 || batch_size == 0) throw std::invalid_argument("TrainConfig: counts must be positive");
        if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw std::invalid_argument("TrainConfig: flip_prob outside [0, 1]");
        for (auto t : tile_size)
            if (t == 0) throw std::invalid_argument("TrainConfig: tile_size must be positive");
        input_norm.validate();
    }
};

struct StepRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double r_max_eff = 1.0;
    double d_max_eff = 0.0;
    double wall_ms = 0.0;
    std::array<double, 3> renorm_factors{1.0, 1.0, 0.0};  // min r, max r, max |d| actually applied
};

struct StatSnapshot {
    std::size_t step = 0;
    std::vector<std::vector<double>> running_mean;  // per norm layer
    std::vector<std::vector<double>> running_var;
};

struct TrainingLog {
    std::vector<StepRecord> steps;
    std::vector<StatSnapshot> snapshots;
    std::size_t optimizer_updates = 0;
};

inline StatSnapshot snapshot_stats(const Model& model, std::size_t step) {
    StatSnapshot s;
    s.step = step;
    for (const NormState* st : model.norm_states()) {
        s.running_mean.push_back(st->running_mean);
        s.running_var.push_back(st->running_var);
    }
    return s;
}

/*!
 * Train `model` in place on randomly sampled, flipped tiles of `dataset`.
 *
 * Each micro-step draws `batch_size` tiles, runs forward/backward in Train
 * mode and adds the gradient to an accumulator; every `accum_steps`
 * micro-steps the averaged gradient goes through Adam. A trailing partial
 * accumulation is dropped. For BatchRenorm models the clip bounds follow
 * `config.renorm` and are left at their last scheduled value.
 */
inline TrainingLog train(Model& model, const std::vector<LabeledVolume>& dataset, const TrainConfig& config) {
    config.validate();
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    const std::size_t m = model.config().spatial_multiple();
    for (auto t : config.tile_size)
        if (t % m) throw ShapeError("train: tile size must be divisible by " + std::to_string(m));
    for (const auto& v : dataset) {
        if (v.image.rank() != 4 || v.labels.rank() != 4) throw ShapeError("train: volumes must be [C, D, H, W]");
        if (v.image.dim(0) != model.config().in_channels || v.labels.dim(0) != model.config().out_channels)
            throw ShapeError("train: dataset channels do not match the model");
    }
    if (config.momentum)
        for (NormState* st : model.norm_states()) st->momentum = *config.momentum;

    std::vector<Tensor> images;
    images.reserve(dataset.size());
    for (const auto& v : dataset)
        images.push_back(config.input_norm.strategy == InputNorm::Global ? quantile_normalize(v.image, config.input_norm)
                                                                         : v.image);

    Prng rng(config.seed);
    const bool renorm = model.norm_kind() == NormKind::BatchRenorm;
    std::vector<double> params = model.flat_parameters();
    std::vector<double> accum(params.size(), 0.0);
    AdamState adam(params.size());
    TrainingLog log;
    std::size_t pending = 0;

    for (std::size_t step = 0; step < config.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto [r_eff, d_eff] = config.renorm.at(step);
        if (renorm) model.set_renorm_bounds(r_eff, d_eff);

        std::vector<Tensor> xs, ts;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            const std::size_t vi = static_cast<std::size_t>(rng.index(dataset.size()));
            TileSample s = sample_tile(images[vi], dataset[vi].labels, config.tile_size, rng);
            flip_augment(s.image, s.labels, rng, config.flip_prob);
            if (config.input_norm.strategy == InputNorm::TileWise) s.image = quantile_normalize(s.image, config.input_norm);
            xs.push_back(std::move(s.image));
            ts.push_back(std::move(s.labels));
        }
        const Tensor x = stack(xs), target = stack(ts);
        const Tensor y = model.forward(x, Mode::Train);
        LossResult lr = dice_loss(y, target);
        if (!std::isfinite(lr.loss))
            throw TrainingDiverged("train: non-finite loss at step " + std::to_string(step));
        Gradients g = model.backward(lr.grad);
        for (std::size_t i = 0; i < accum.size(); ++i) accum[i] += g.params[i];
        if (++pending == config.accum_steps) {
            const double inv = 1.0 / static_cast<double>(config.accum_steps);
            for (auto& a : accum) a *= inv;
            adam_step(params, accum, adam, config.lr);
            model.set_flat_parameters(params);
            std::fill(accum.begin(), accum.end(), 0.0);
            pending = 0;
            ++log.optimizer_updates;
        }
        model.step_count += 1;

        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        log.steps.push_back({step, lr.loss, renorm ? r_eff : 1.0, renorm ? d_eff : 0.0, ms, model.last_renorm_factors()});
        if (config.snapshot_every && (step + 1) % config.snapshot_every == 0) log.snapshots.push_back(snapshot_stats(model, step));
    }
    return log;
}

}  // namespace tilenorm
