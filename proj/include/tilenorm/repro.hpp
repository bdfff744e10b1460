#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tilenorm/diagnose.hpp"
#include "tilenorm/infer.hpp"
#include "tilenorm/io.hpp"
#include "tilenorm/synthdata.hpp"
#include "tilenorm/train.hpp"
#include "tilenorm/unet.hpp"

namespace tilenorm {

//! One column of the normalization comparison table.
struct ReproVariant {
    NormKind norm = NormKind::BatchRenorm;
    InputNorm input_norm = InputNorm::Global;
};

//! The six normalization setups compared in the table.
inline std::vector<ReproVariant> table_variants() {
    return {{NormKind::BatchNorm, InputNorm::Global},    {NormKind::BatchNorm, InputNorm::TileWise},
            {NormKind::InstanceNorm, InputNorm::Global}, {NormKind::InstanceNorm, InputNorm::TileWise},
            {NormKind::BatchRenorm, InputNorm::Global},  {NormKind::Identity, InputNorm::Global}};
}

struct ReproConfig {
    SynthSpec data{};
    std::size_t train_volumes = 2;
    std::size_t eval_volumes = 1;
    ModelConfig model{.features = {8, 16, 32}};
    TrainConfig train{};
    SlidingOptions sliding{};
    MismatchGeometry mismatch{};
    std::vector<ReproVariant> variants = table_variants();
    std::uint64_t seed = 0;
};

struct ReproRow {
    ReproVariant variant;
    DiceReport dice_eval;
    DiceReport dice_train;
    DisparityReport disparity;
    MismatchReport mismatch;
};

/*!
 * Generate data, train one model per variant with identical seeds, and run
 * every diagnostic on the held-out volumes. Evaluation volumes use seeds
 * after the training ones.
 */
inline std::vector<ReproRow> run_repro(const ReproConfig& cfg, const std::function<void(const std::string&)>& progress = {}) {
    auto note = [&](const std::string& s) {
        if (progress) progress(s);
    };
    std::vector<LabeledVolume> train_set;
    std::vector<Tensor> eval_images, eval_labels;
    for (std::size_t i = 0; i < cfg.train_volumes + cfg.eval_volumes; ++i) {
        SynthSpec s = cfg.data;
        s.seed = cfg.seed + i;
        SynthVolume v = generate(s);
        if (i < cfg.train_volumes)
            train_set.push_back({std::move(v.image), std::move(v.labels)});
        else {
            eval_images.push_back(std::move(v.image));
            eval_labels.push_back(std::move(v.labels));
        }
    }

    std::vector<ReproRow> rows;
    for (const ReproVariant& var : cfg.variants) {
        const std::string name = to_string(var.norm) + "/" + to_string(var.input_norm);
        ModelConfig mc = cfg.model;
        mc.norm_kind = var.norm;
        mc.seed = cfg.seed;
        Model model = build(mc);
        TrainConfig tc = cfg.train;
        tc.input_norm.strategy = var.input_norm;
        tc.seed = cfg.seed;
        note("training " + name);
        train(model, train_set, tc);

        ReproRow row{var, {}, {}, {}, {}};
        SlidingOptions opt = cfg.sliding;
        opt.align = mc.spatial_multiple();
        opt.mode = Mode::Eval;
        note("evaluating " + name);
        row.dice_eval = dice_eval(model, eval_images, eval_labels, tc.input_norm, opt);
        opt.mode = Mode::Train;
        row.dice_train = dice_eval(model, eval_images, eval_labels, tc.input_norm, opt);
        row.disparity = train_eval_disparity(model, eval_images, tc.input_norm, opt);
        row.mismatch = tile_mismatch(model, eval_images.front(), tc.input_norm, cfg.mismatch, opt.workers);
        rows.push_back(std::move(row));
    }
    return rows;
}

/*!
 * One row per variant. Mismatch is the boundary-class value and reads "no"
 * when the stitched predictions were identical.
 */
inline std::string repro_csv(const std::vector<ReproRow>& rows) {
    std::string out =
        "norm,input_norm,dice_eval_background,dice_eval_foreground,dice_eval_boundary,"
        "dice_train_background,dice_train_foreground,dice_train_boundary,disparity,tile_mismatch,max_dist\n";
    for (const auto& r : rows) {
        out += to_string(r.variant.norm) + "," + to_string(r.variant.input_norm);
        for (double d : r.dice_eval.median) out += "," + format_number(d);
        for (double d : r.dice_train.median) out += "," + format_number(d);
        out += "," + format_number(r.disparity.median);
        const std::size_t c = std::min<std::size_t>(kBoundary, r.mismatch.per_channel_mismatch.size() - 1);
        out += "," + (r.mismatch.seamless ? std::string(kNoMismatch) : format_number(r.mismatch.per_channel_mismatch[c]));
        out += "," + format_number(r.mismatch.max_dist) + "\n";
    }
    return out;
}

}  // namespace tilenorm
