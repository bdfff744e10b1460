// tilenorm command-line front end. Every subcommand composes library calls;
// the only logic here is argument plumbing and file naming.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tilenorm/tilenorm.hpp"

namespace fs = std::filesystem;
using namespace tilenorm;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNotSeamless = 3 };

class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

Extent3 extent3(const std::vector<std::size_t>& v, const char* flag) {
    if (v.size() == 1) return {v[0], v[0], v[0]};
    if (v.size() != 3) throw UsageError(std::string(flag) + " takes one or three values");
    return {v[0], v[1], v[2]};
}

NormKind norm_kind(const std::string& s) {
    if (auto k = parse_norm_kind(s)) return *k;
    throw UsageError("unknown norm kind '" + s + "'");
}

InputNorm input_norm(const std::string& s) {
    if (auto k = parse_input_norm(s)) return *k;
    throw UsageError("unknown input normalization '" + s + "' (global or tile-wise)");
}

Mode parse_mode(const std::string& s) {
    if (s == "eval") return Mode::Eval;
    if (s == "train") return Mode::Train;
    throw UsageError("unknown mode '" + s + "' (eval or train)");
}

//! [D, H, W] volumes get a channel axis.
Tensor load_volume(const std::string& path) {
    Tensor t = read_npy(path);
    if (t.rank() == 3) return t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
    if (t.rank() != 4) throw ShapeError(path + ": expected a [D, H, W] or [C, D, H, W] array, got " + shape_string(t.shape()));
    return t;
}

std::vector<Tensor> load_volumes(const std::vector<std::string>& paths) {
    std::vector<Tensor> out;
    for (const auto& p : paths) out.push_back(load_volume(p));
    return out;
}

// ---------------------------------------------------------------------------
// Shared option groups

struct ModelFlags {
    std::string checkpoint;
    std::string norm;
    std::vector<std::size_t> features{8, 16, 32};
    std::size_t levels = 2;
    std::size_t blocks = 2;
    std::size_t kernel = 3;
    std::uint64_t seed = 0;

    void add(CLI::App* app, bool allow_checkpoint = true) {
        if (allow_checkpoint) app->add_option("--checkpoint", checkpoint, "Checkpoint directory to load");
        app->add_option("--norm", norm,
                        "Normalization: batchnorm, instancenorm, instancenorm-tracked, batchrenorm, identity "
                        "(default batchrenorm; must match the checkpoint if both are given)");
        app->add_option("--features", features, "Channels per level plus bottleneck")->capture_default_str();
        app->add_option("--levels", levels, "Down-sampling levels")->capture_default_str();
        app->add_option("--blocks", blocks, "Conv blocks per level")->capture_default_str();
        app->add_option("--kernel", kernel, "Conv kernel size (odd)")->capture_default_str();
        app->add_option("--model-seed", seed, "Weight initialization seed")->capture_default_str();
    }

    ModelConfig config() const {
        ModelConfig c;
        c.features = features;
        c.levels = levels;
        c.blocks_per_level = blocks;
        c.conv_kernel = kernel;
        c.seed = seed;
        c.norm_kind = norm.empty() ? NormKind::BatchRenorm : norm_kind(norm);
        return c;
    }

    Model resolve() const {
        if (checkpoint.empty()) return build(config());
        Model m = load_checkpoint(checkpoint);
        if (!norm.empty() && norm_kind(norm) != m.norm_kind())
            throw UsageError("--norm " + norm + " does not match the checkpoint's " + to_string(m.norm_kind()));
        return m;
    }
};

struct SlidingFlags {
    std::vector<std::size_t> tile{64};
    std::vector<std::size_t> halo{24};
    std::string input = "global";
    std::string mode = "eval";

    void add(CLI::App* app, bool with_mode = true) {
        app->add_option("--tile", tile, "Tile extent (one or three values)")->capture_default_str();
        app->add_option("--halo", halo, "Halo cropped from each tile side (one or three values)")->capture_default_str();
        app->add_option("--input-norm", input, "Input intensity normalization: global or tile-wise")->capture_default_str();
        if (with_mode) app->add_option("--mode", mode, "Normalization mode for prediction: eval or train")->capture_default_str();
    }

    SlidingOptions options(const Model& m, std::size_t workers) const {
        SlidingOptions o;
        o.tile = extent3(tile, "--tile");
        o.halo = extent3(halo, "--halo");
        o.align = m.config().spatial_multiple();
        o.mode = parse_mode(mode);
        o.workers = workers;
        return o;
    }

    NormalizeSpec spec() const {
        NormalizeSpec s;
        s.strategy = input_norm(input);
        return s;
    }
};

template <class R>
void emit(const R& report, const std::string& out) {
    if (out.empty() || out == "-")
        std::cout << nlohmann::json(report).dump(2) << "\n";
    else
        write_report(report, out, format_for(out));
}

// ---------------------------------------------------------------------------
// --config: every key of the JSON object becomes "--key value" unless the
// flag is already on the command line.

std::vector<std::string> merge_config(std::vector<std::string> args) {
    auto it = std::find(args.begin(), args.end(), "--config");
    std::string path;
    if (it != args.end()) {
        if (it + 1 == args.end()) throw UsageError("--config needs a file");
        path = *(it + 1);
    } else {
        for (const auto& a : args)
            if (a.rfind("--config=", 0) == 0) path = a.substr(9);
    }
    if (path.empty()) return args;

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    if (!j.is_object()) throw FormatError(path + ": config must be a JSON object");
    auto present = [&](const std::string& flag) {
        return std::any_of(args.begin(), args.end(), [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
    };
    auto scalar = [](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    for (const auto& [key, value] : j.items()) {
        const std::string flag = "--" + key;
        if (present(flag)) continue;
        if (value.is_boolean()) {
            if (value.get<bool>()) args.push_back(flag);
        } else if (value.is_array()) {
            args.push_back(flag);
            for (const auto& v : value) args.push_back(scalar(v));
        } else {
            args.push_back(flag);
            args.push_back(scalar(value));
        }
    }
    return args;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tiled 3D U-Net segmentation with normalization diagnostics", "tilenorm"};
    app.require_subcommand(1);
    std::string config_path;
    std::size_t workers = 1;
    app.add_option("--config", config_path, "JSON file of flag values; explicit flags win");
    app.add_option("--workers", workers, "Concurrent tile workers (results do not depend on it)")->capture_default_str();
    app.fallthrough();

    // gen
    auto* gen = app.add_subcommand("gen", "Generate synthetic volumes with labels");
    SynthSpec synth;
    std::vector<std::size_t> gen_shape{64, 64, 128};
    std::size_t gen_count = 1;
    std::string gen_out;
    gen->add_option("--seed", synth.seed, "Seed of the first volume")->capture_default_str();
    gen->add_option("--count", gen_count, "Number of volumes (consecutive seeds)")->capture_default_str();
    gen->add_option("--shape", gen_shape, "Volume extent D H W")->expected(3)->capture_default_str();
    gen->add_option("--noise", synth.noise_sigma, "Gaussian noise sigma")->capture_default_str();
    gen->add_option("--out", gen_out, "Output directory")->required();

    // train
    auto* tr = app.add_subcommand("train", "Train a model on image/label NPY pairs");
    ModelFlags tr_model;
    tr_model.add(tr, false);
    TrainConfig tc;
    std::vector<std::string> tr_images, tr_labels;
    std::vector<std::size_t> tr_tile{32};
    std::string tr_input = "global", tr_out, tr_log;
    std::optional<std::size_t> tr_warmup, tr_ramp;
    tr->add_option("--image", tr_images, "Training image(s)")->required();
    tr->add_option("--label", tr_labels, "One-hot label volume(s), one per image")->required();
    tr->add_option("--steps", tc.steps, "Micro-steps")->capture_default_str();
    tr->add_option("--accum", tc.accum_steps, "Micro-steps per optimizer update")->capture_default_str();
    tr->add_option("--batch", tc.batch_size, "Tiles per micro-step")->capture_default_str();
    tr->add_option("--lr", tc.lr, "Adam learning rate")->capture_default_str();
    tr->add_option("--tile", tr_tile, "Training tile extent (one or three values)")->capture_default_str();
    tr->add_option("--flip-prob", tc.flip_prob, "Per-axis flip probability")->capture_default_str();
    tr->add_option("--input-norm", tr_input, "global or tile-wise")->capture_default_str();
    tr->add_option("--warmup", tr_warmup, "BatchRenorm steps at r = 1, d = 0");
    tr->add_option("--ramp", tr_ramp, "BatchRenorm steps to reach the full clip bounds");
    tr->add_option("--r-max", tc.renorm.r_max, "BatchRenorm r bound")->capture_default_str();
    tr->add_option("--d-max", tc.renorm.d_max, "BatchRenorm d bound")->capture_default_str();
    tr->add_option("--momentum", tc.momentum, "Running-average momentum for every norm layer");
    tr->add_option("--seed", tc.seed, "Sampling seed")->capture_default_str();
    tr->add_option("--out", tr_out, "Checkpoint directory")->required();
    tr->add_option("--log", tr_log, "Loss curve CSV");

    // predict
    auto* pr = app.add_subcommand("predict", "Sliding-window (or whole-volume) prediction");
    ModelFlags pr_model;
    pr_model.add(pr);
    SlidingFlags pr_slide;
    pr_slide.add(pr);
    std::string pr_image, pr_out;
    bool pr_whole = false;
    pr->add_option("--image", pr_image, "Input volume")->required();
    pr->add_option("--out", pr_out, "Prediction NPY")->required();
    pr->add_flag("--whole", pr_whole, "One forward pass over the whole volume instead of tiles");

    // diagnose-rf
    auto* rf = app.add_subcommand("diagnose-rf", "Theoretical and effective receptive field");
    ModelFlags rf_model;
    rf_model.add(rf);
    std::vector<std::size_t> rf_tile{32};
    std::size_t rf_samples = 4;
    std::string rf_mode = "eval", rf_out, rf_pgm;
    std::uint64_t rf_seed = 0;
    rf->add_option("--tile", rf_tile, "ERF tile extent")->capture_default_str();
    rf->add_option("--samples", rf_samples, "Random inputs averaged for the ERF")->capture_default_str();
    rf->add_option("--mode", rf_mode, "Mode for the TRF classification: eval or train")->capture_default_str();
    rf->add_option("--seed", rf_seed, "Seed for the ERF inputs")->capture_default_str();
    rf->add_option("--out", rf_out, "Report (.json or .csv)");
    rf->add_option("--erf", rf_pgm, "Write the ERF map as NPY (.npy) or center-slice PGM (.pgm)");

    // diagnose-mismatch
    auto* mm = app.add_subcommand("diagnose-mismatch", "Disagreement of overlapping tiles");
    ModelFlags mm_model;
    mm_model.add(mm);
    MismatchGeometry geom;
    std::vector<std::size_t> mm_tile{64}, mm_halo{24};
    std::string mm_image, mm_input = "global", mm_out;
    bool assert_seamless = false;
    mm->add_option("--image", mm_image, "Input volume")->required();
    mm->add_option("--tile", mm_tile, "Tile extent")->capture_default_str();
    mm->add_option("--halo", mm_halo, "Halo excluded from the comparison")->capture_default_str();
    mm->add_option("--split-offset", geom.split_offset, "Shift of the second tile along the last axis")->capture_default_str();
    mm->add_option("--stride", geom.stride, "Probe stride")->capture_default_str();
    mm->add_option("--threshold", geom.threshold, "Binarization threshold")->capture_default_str();
    mm->add_option("--input-norm", mm_input, "global or tile-wise")->capture_default_str();
    mm->add_option("--out", mm_out, "Report (.json or .csv)");
    mm->add_flag("--assert-seamless", assert_seamless, "Exit 3 unless max_dist is exactly 0");

    // diagnose-disparity
    auto* dp = app.add_subcommand("diagnose-disparity", "Train-mode vs eval-mode prediction disagreement");
    ModelFlags dp_model;
    dp_model.add(dp);
    SlidingFlags dp_slide;
    dp_slide.add(dp, false);
    std::vector<std::string> dp_images;
    std::string dp_out;
    dp->add_option("--image", dp_images, "Input volume(s)")->required();
    dp->add_option("--out", dp_out, "Report (.json or .csv)");

    // eval
    auto* ev = app.add_subcommand("eval", "Per-class Dice of sliding-window predictions");
    ModelFlags ev_model;
    ev_model.add(ev);
    SlidingFlags ev_slide;
    ev_slide.add(ev);
    std::vector<std::string> ev_images, ev_labels;
    std::string ev_out;
    ev->add_option("--image", ev_images, "Image volume(s)")->required();
    ev->add_option("--label", ev_labels, "One-hot label volume(s)")->required();
    ev->add_option("--out", ev_out, "Report (.json or .csv)");

    // report
    auto* rp = app.add_subcommand("report", "Convert a JSON report to CSV");
    std::string rp_in, rp_out;
    rp->add_option("--in", rp_in, "JSON report")->required();
    rp->add_option("--out", rp_out, "CSV output (stdout if omitted)");

    // repro
    auto* rr = app.add_subcommand("repro", "Train every normalization variant and tabulate all diagnostics");
    ReproConfig rc;
    rc.train.steps = 300;
    rc.train.accum_steps = 1;
    rc.train.lr = 0.003;
    rc.train.renorm.warmup_steps = 50;
    rc.train.renorm.ramp_steps = 150;
    std::vector<std::size_t> rr_tile{32}, rr_shape{64, 64, 128};
    std::vector<std::string> rr_norms;
    std::string rr_out;
    rr->add_option("--steps", rc.train.steps, "Training micro-steps per variant")->capture_default_str();
    rr->add_option("--accum", rc.train.accum_steps, "Micro-steps per optimizer update")->capture_default_str();
    rr->add_option("--lr", rc.train.lr, "Adam learning rate")->capture_default_str();
    rr->add_option("--tile", rr_tile, "Training tile extent")->capture_default_str();
    rr->add_option("--shape", rr_shape, "Synthetic volume extent D H W")->expected(3)->capture_default_str();
    rr->add_option("--features", rc.model.features, "Channels per level plus bottleneck")->capture_default_str();
    rr->add_option("--train-volumes", rc.train_volumes, "Training volumes")->capture_default_str();
    rr->add_option("--eval-volumes", rc.eval_volumes, "Held-out volumes")->capture_default_str();
    rr->add_option("--norms", rr_norms, "Restrict to these norm kinds (all table variants by default)");
    rr->add_option("--seed", rc.seed, "Seed for data, weights and sampling")->capture_default_str();
    rr->add_option("--out", rr_out, "CSV table (stdout if omitted)");

    int code = kOk;
    try {
        std::vector<std::string> args(argv + 1, argv + argc);
        args = merge_config(std::move(args));
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }

    try {
        if (*gen) {
            synth.shape = {gen_shape[0], gen_shape[1], gen_shape[2]};
            fs::create_directories(gen_out);
            for (std::size_t i = 0; i < gen_count; ++i) {
                SynthSpec s = synth;
                s.seed = synth.seed + i;
                const SynthVolume v = generate(s);
                const std::string tag = std::to_string(s.seed);
                write_npy(fs::path(gen_out) / ("image_" + tag + ".npy"), v.image);
                write_npy(fs::path(gen_out) / ("labels_" + tag + ".npy"), v.labels);
                write_file(fs::path(gen_out) / ("synth_" + tag + ".json"), nlohmann::json(s).dump(2) + "\n");
            }
        } else if (*tr) {
            if (tr_images.size() != tr_labels.size()) throw UsageError("need one --label per --image");
            std::vector<LabeledVolume> data;
            for (std::size_t i = 0; i < tr_images.size(); ++i)
                data.push_back({load_volume(tr_images[i]), read_npy(tr_labels[i])});
            ModelConfig mc = tr_model.config();
            mc.in_channels = data.front().image.dim(0);
            mc.out_channels = data.front().labels.rank() == 4 ? data.front().labels.dim(0) : mc.out_channels;
            Model m = build(mc);
            tc.tile_size = extent3(tr_tile, "--tile");
            tc.input_norm.strategy = input_norm(tr_input);
            if (tr_warmup) tc.renorm.warmup_steps = *tr_warmup;
            if (tr_ramp) tc.renorm.ramp_steps = *tr_ramp;
            const TrainingLog log = train(m, data, tc);
            save_checkpoint(m, tr_out);
            if (!tr_log.empty()) write_file(tr_log, to_csv(log));
            std::cerr << "trained " << log.steps.size() << " steps, final loss " << format_number(log.steps.back().loss) << "\n";
        } else if (*pr) {
            const Model m = pr_model.resolve();
            const Tensor v = load_volume(pr_image);
            const Tensor y = pr_whole ? predict_whole(m, v, pr_slide.spec(), parse_mode(pr_slide.mode))
                                      : predict_sliding(m, v, pr_slide.spec(), pr_slide.options(m, workers));
            write_npy(pr_out, y);
        } else if (*rf) {
            Model m = rf_model.resolve();
            RFReport rep;
            rep.trf = compute_trf(m.config(), parse_mode(rf_mode));
            rep.tile = extent3(rf_tile, "--tile");
            rep.samples = rf_samples;
            Prng rng(rf_seed);
            rep.erf_map = compute_erf(m, rep.tile, rf_samples, rng, m.config().in_channels);
            emit(rep, rf_out);
            if (!rf_pgm.empty()) {
                if (fs::path(rf_pgm).extension() == ".pgm")
                    write_pgm_center_slice(rf_pgm, rep.erf_map);
                else
                    write_npy(rf_pgm, rep.erf_map);
            }
        } else if (*mm) {
            const Model m = mm_model.resolve();
            geom.tile = extent3(mm_tile, "--tile");
            geom.halo = extent3(mm_halo, "--halo");
            NormalizeSpec spec;
            spec.strategy = input_norm(mm_input);
            const MismatchReport rep = tile_mismatch(m, load_volume(mm_image), spec, geom, workers);
            emit(rep, mm_out);
            if (assert_seamless && !rep.seamless) {
                std::cerr << "not seamless: max_dist " << format_number(rep.max_dist) << "\n";
                code = kNotSeamless;
            }
        } else if (*dp) {
            const Model m = dp_model.resolve();
            emit(train_eval_disparity(m, load_volumes(dp_images), dp_slide.spec(), dp_slide.options(m, workers)), dp_out);
        } else if (*ev) {
            if (ev_images.size() != ev_labels.size()) throw UsageError("need one --label per --image");
            const Model m = ev_model.resolve();
            std::vector<Tensor> labels;
            for (const auto& p : ev_labels) labels.push_back(read_npy(p));
            emit(dice_eval(m, load_volumes(ev_images), labels, ev_slide.spec(), ev_slide.options(m, workers)), ev_out);
        } else if (*rp) {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(read_file(rp_in));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(rp_in + ": " + e.what());
            }
            const std::string kind = j.value("kind", "");
            std::string csv;
            if (kind == "mismatch") csv = to_csv(read_report<MismatchReport>(rp_in));
            else if (kind == "disparity") csv = to_csv(read_report<DisparityReport>(rp_in));
            else if (kind == "dice") csv = to_csv(read_report<DiceReport>(rp_in));
            else if (kind == "rf") csv = to_csv(read_report<RFReport>(rp_in));
            else throw FormatError(rp_in + ": unknown report kind '" + kind + "'");
            if (rp_out.empty()) std::cout << csv;
            else write_file(rp_out, csv);
        } else if (*rr) {
            rc.data.shape = {rr_shape[0], rr_shape[1], rr_shape[2]};
            rc.train.tile_size = extent3(rr_tile, "--tile");
            rc.model.levels = rc.model.features.size() - 1;
            rc.sliding.workers = workers;
            if (!rr_norms.empty()) {
                std::vector<ReproVariant> keep;
                for (const auto& v : rc.variants)
                    for (const auto& n : rr_norms)
                        if (v.norm == norm_kind(n)) keep.push_back(v);
                rc.variants = keep;
            }
            const std::string csv = repro_csv(run_repro(rc, [](const std::string& s) { std::cerr << s << "\n"; }));
            if (rr_out.empty()) std::cout << csv;
            else write_file(rr_out, csv);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return code;
}
