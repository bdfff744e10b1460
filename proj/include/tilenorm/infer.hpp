#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <concepts>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "tilenorm/layers.hpp"
#include "tilenorm/normalize.hpp"
#include "tilenorm/tensor.hpp"

namespace tilenorm {

//! Anything that maps a [1, C_in, d, h, w] tile to a [1, C_out, d, h, w] prediction.
template <class P>
concept TilePredictor = requires(const P& p, const Tensor& t, Mode m) {
    { p.predict(t, m) } -> std::convertible_to<Tensor>;
};

/*!
 * One tile of a sliding-window plan.
 *
 * `window` is the tile's input box in volume coordinates, clipped to the
 * volume; `pad` is how many zero voxels complete it to the full tile size at
 * the high end (only when the volume is smaller than the tile). `core` is the
 * part of the volume this tile owns in the stitched output.
 */
struct TileSpec {
    Box3 window;
    Extent3 pad{};
    Box3 core;
};

struct StitchPlan {
    Extent3 volume{};
    Extent3 tile{};
    Extent3 halo{};
    std::vector<TileSpec> tiles;
};

struct AxisTile {
    std::size_t start = 0;
    std::size_t core_begin = 0;
    std::size_t core_end = 0;
};

/*!
 * Tiles along one axis. Interior windows advance by tile - 2 * halo (rounded
 * down to a multiple of `align`); the last window is clamped to end at the
 * volume boundary. Neighbouring cores meet `halo` voxels inside the later
 * window, and the first and last cores extend to the volume boundary.
 */
inline std::vector<AxisTile> plan_axis(std::size_t volume, std::size_t tile, std::size_t halo, std::size_t align = 1) {
    if (tile == 0 || volume == 0) throw std::invalid_argument("plan_axis: extents must be positive");
    if (2 * halo >= tile)
        throw std::invalid_argument("plan_axis: halo " + std::to_string(halo) + " must be smaller than half the tile " +
                                    std::to_string(tile));
    const std::size_t stride = (tile - 2 * halo) / align * align;
    if (stride == 0)
        throw std::invalid_argument("plan_axis: tile - 2 * halo must be at least the alignment " + std::to_string(align));
    if (tile >= volume) return {AxisTile{0, 0, volume}};
    if ((volume - tile) % align)
        throw std::invalid_argument("plan_axis: volume extent minus tile must be a multiple of " + std::to_string(align));
    std::vector<std::size_t> starts{0};
    while (starts.back() + tile < volume) starts.push_back(std::min(starts.back() + stride, volume - tile));
    std::vector<AxisTile> out(starts.size());
    for (std::size_t i = 0; i < starts.size(); ++i) {
        out[i].start = starts[i];
        out[i].core_begin = i == 0 ? 0 : starts[i] + halo;
        out[i].core_end = i + 1 == starts.size() ? volume : starts[i + 1] + halo;
    }
    return out;
}

/*!
 * Build the tile grid for a volume. `align` forces window starts onto
 * multiples of the model's down-sampling factor so pooling windows line up
 * with those of a whole-volume pass.
 */
inline StitchPlan plan_grid(const Extent3& volume, const Extent3& tile, const Extent3& halo, std::size_t align = 1) {
    StitchPlan plan{volume, tile, halo, {}};
    std::array<std::vector<AxisTile>, 3> axes;
    for (int a = 0; a < 3; ++a) {
        if (tile[a] % align)
            throw std::invalid_argument("plan_grid: tile extent " + std::to_string(tile[a]) + " is not a multiple of " +
                                        std::to_string(align));
        axes[a] = plan_axis(volume[a], tile[a], halo[a], align);
    }
    for (const auto& tz : axes[0])
        for (const auto& ty : axes[1])
            for (const auto& tx : axes[2]) {
                TileSpec t;
                const AxisTile* at[3] = {&tz, &ty, &tx};
                for (int a = 0; a < 3; ++a) {
                    t.window.start[a] = at[a]->start;
                    t.window.extent[a] = std::min(tile[a], volume[a] - at[a]->start);
                    t.pad[a] = tile[a] - t.window.extent[a];
                    t.core.start[a] = at[a]->core_begin;
                    t.core.extent[a] = at[a]->core_end - at[a]->core_begin;
                }
                plan.tiles.push_back(t);
            }
    return plan;
}

namespace detail {

//! Run `fn(i)` for i in [0, n) on `workers` threads; the first exception is rethrown.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace detail

//! Extract the network input for one tile: crop, optional per-tile normalization, zero padding.
inline Tensor tile_input(const Tensor& volume, const TileSpec& t, const Extent3& tile, const NormalizeSpec& spec) {
    if (spec.strategy == InputNorm::TileWise) {
        Tensor raw = crop(volume, t.window);
        Tensor norm = quantile_normalize(raw, spec);
        return crop(norm, Box3{{0, 0, 0}, t.window.extent}, tile);
    }
    return crop(volume, t.window, tile);
}

struct SlidingOptions {
    Extent3 tile{64, 64, 64};
    Extent3 halo{24, 24, 24};
    std::size_t align = 4;
    Mode mode = Mode::Eval;
    std::size_t workers = 1;
};

/*!
 * Sliding-window prediction of a [C_in, D, H, W] volume. With the Global
 * strategy the volume is quantile-normalized once up front; with TileWise
 * each window is normalized on its own. The output is assembled from tile
 * cores only; nothing is averaged.
 */
template <TilePredictor P>
Tensor predict_sliding(const P& predictor, const Tensor& volume, const NormalizeSpec& spec, const SlidingOptions& opt) {
    require_rank(volume, 4, "predict_sliding volume");
    const Extent3 vol{volume.dim(1), volume.dim(2), volume.dim(3)};
    const StitchPlan plan = plan_grid(vol, opt.tile, opt.halo, opt.align);
    const Tensor source = spec.strategy == InputNorm::Global ? quantile_normalize(volume, spec) : volume;

    auto run_tile = [&](const TileSpec& t) { return squeeze0(predictor.predict(unsqueeze0(tile_input(source, t, opt.tile, spec)), opt.mode)); };
    auto local_core = [](const TileSpec& t) {
        Box3 b = t.core;
        for (int a = 0; a < 3; ++a) b.start[a] = t.core.start[a] - t.window.start[a];
        return b;
    };

    const Tensor first = run_tile(plan.tiles.front());
    Tensor out({first.dim(0), vol[0], vol[1], vol[2]});
    paste(out, plan.tiles.front().core.start, first, local_core(plan.tiles.front()));
    detail::parallel_for(plan.tiles.size() - 1, opt.workers, [&](std::size_t i) {
        const TileSpec& t = plan.tiles[i + 1];
        const Tensor pred = run_tile(t);
        if (pred.dim(0) != out.dim(0)) throw ShapeError("predict_sliding: inconsistent output channels");
        paste(out, t.core.start, pred, local_core(t));  // cores are disjoint
    });
    return out;
}

//! Whole-volume prediction in one pass (the reference the stitched output is compared with).
template <TilePredictor P>
Tensor predict_whole(const P& predictor, const Tensor& volume, const NormalizeSpec& spec, Mode mode = Mode::Eval) {
    NormalizeSpec global = spec;
    global.strategy = InputNorm::Global;
    return squeeze0(predictor.predict(unsqueeze0(quantile_normalize(volume, global)), mode));
}

}  // namespace tilenorm
