#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tilenorm/layers.hpp"
#include "tilenorm/prng.hpp"
#include "tilenorm/tensor.hpp"

namespace tilenorm {

enum class FinalActivation { Sigmoid, None };

/*!
 * Declarative 3D U-Net description.
 *
 * `features` holds one entry per resolution level plus the bottleneck, so
 * its length is `levels + 1`. Each level runs `blocks_per_level` blocks of
 * conv (stride 1, "same" padding) -> normalization -> ReLU.
 */
struct ModelConfig {
    std::size_t in_channels = 1;
    std::size_t out_channels = 3;
    std::vector<std::size_t> features{32, 64, 128};
    std::size_t levels = 2;
    std::size_t blocks_per_level = 2;
    NormKind norm_kind = NormKind::BatchRenorm;
    std::size_t conv_kernel = 3;
    FinalActivation final_activation = FinalActivation::Sigmoid;
    std::uint64_t seed = 0;

    void validate() const {
        if (levels < 1) throw std::invalid_argument("ModelConfig: levels must be >= 1");
        if (features.size() != levels + 1)
            throw std::invalid_argument("ModelConfig: features needs levels + 1 entries");
        for (std::size_t i = 0; i < features.size(); ++i) {
            if (features[i] == 0) throw std::invalid_argument("ModelConfig: feature counts must be positive");
            if (i && features[i] <= features[i - 1])
                throw std::invalid_argument("ModelConfig: features must be strictly increasing");
        }
        if (conv_kernel % 2 == 0) throw std::invalid_argument("ModelConfig: conv_kernel must be odd");
        if (blocks_per_level < 1) throw std::invalid_argument("ModelConfig: blocks_per_level must be >= 1");
        if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("ModelConfig: channel counts must be >= 1");
    }

    //! Spatial extents of a tile must be multiples of this.
    std::size_t spatial_multiple() const { return std::size_t{1} << levels; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

//! conv -> norm -> ReLU.
struct ConvBlock {
    ConvLayer conv;
    NormState norm;
};

struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

//! Flat parameter gradient plus the gradient with respect to the input tile.
struct Gradients {
    std::vector<double> params;
    Tensor input;
};

class Model {
  public:
    Model() = default;

    static Model build(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    NormKind norm_kind() const { return config_.norm_kind; }

    /*!
     * Forward pass that records everything backward() needs. In Train mode
     * normalization layers commit their running-statistic updates.
     */
    Tensor forward(const Tensor& x, Mode mode) {
        tape_ = Tape{};
        std::vector<NormState> next;
        Tensor y = run(x, mode, &tape_, mode == Mode::Train ? &next : nullptr);
        if (mode == Mode::Train)
            for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].norm = std::move(next[i]);
        tape_.valid = true;
        return y;
    }

    //! Stateless forward: nothing recorded, nothing committed, safe to share across threads.
    Tensor predict(const Tensor& x, Mode mode) const { return run(x, mode, nullptr, nullptr); }

    /*!
     * Backpropagate `upstream` (gradient of the loss with respect to the
     * model output) through the last forward().
     */
    Gradients backward(const Tensor& upstream);

    std::size_t parameter_count() const;
    std::vector<double> flat_parameters() const;
    void set_flat_parameters(const std::vector<double>& flat);

    //! Convolution, up-convolution and head tensors, named for checkpoints.
    std::vector<NamedTensor> named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const {
        std::vector<std::pair<std::string, const Tensor*>> out;
        for (const auto& nt : const_cast<Model*>(this)->named_tensors()) out.emplace_back(nt.name, nt.tensor);
        return out;
    }
    //! "enc<l>.<b>", "bottleneck.<b>" or "dec<l>.<b>" for block i.
    std::string block_name(std::size_t i) const;

    std::vector<NormState*> norm_states();
    std::vector<const NormState*> norm_states() const;

    //! Smallest r, largest r and largest |d| applied by the last forward(); {1, 1, 0} when none were.
    std::array<double, 3> last_renorm_factors() const {
        std::array<double, 3> out{1.0, 1.0, 0.0};
        for (const auto& b : tape_.blocks) {
            for (double r : b.norm.r) {
                out[0] = std::min(out[0], r);
                out[1] = std::max(out[1], r);
            }
            for (double d : b.norm.d) out[2] = std::max(out[2], std::abs(d));
        }
        return out;
    }

    //! Clip bounds used by BatchRenorm layers in Train mode.
    void set_renorm_bounds(double r_max, double d_max) {
        for (auto& b : blocks_) {
            b.norm.r_max = r_max;
            b.norm.d_max = d_max;
        }
    }

    /*!
     * Linear probe: ReLU and sigmoid become identities and max pooling becomes
     * mean pooling, so every edge of the computation graph carries gradient.
     */
    void set_linear_probe(bool on) { linear_probe_ = on; }
    bool linear_probe() const { return linear_probe_; }

    std::int64_t step_count = 0;

    // Layer access for the receptive-field recurrence and checkpoints.
    std::size_t block_index_encoder(std::size_t level, std::size_t b) const { return level * config_.blocks_per_level + b; }
    std::size_t block_index_bottleneck(std::size_t b) const { return config_.levels * config_.blocks_per_level + b; }
    std::size_t block_index_decoder(std::size_t level, std::size_t b) const {
        // decoder levels are stored deepest first
        const std::size_t order = config_.levels - 1 - level;
        return (config_.levels + 1 + order) * config_.blocks_per_level + b;
    }
    std::vector<ConvBlock>& blocks() { return blocks_; }
    const std::vector<ConvBlock>& blocks() const { return blocks_; }
    std::vector<UpConvLayer>& ups() { return ups_; }
    ConvLayer& head() { return head_; }

  private:
    struct BlockTape {
        Tensor input;
        Tensor pre_act;  // normalization output
        NormCache norm;
    };
    struct Tape {
        bool valid = false;
        Mode mode = Mode::Eval;
        std::vector<BlockTape> blocks;
        std::vector<PoolCache> pools;
        std::vector<Tensor> up_inputs;  // per level
        Tensor head_input;
        Tensor output;
    };

    Tensor run_block(std::size_t i, const Tensor& x, Mode mode, Tape* tape, std::vector<NormState>* next) const {
        const ConvBlock& blk = blocks_[i];
        Tensor c = blk.conv.forward(x);
        NormResult nr = norm_forward(c, blk.norm, config_.norm_kind, mode);
        if (next) (*next)[i] = std::move(nr.state);
        Tensor y = linear_probe_ ? nr.y : relu_forward(nr.y);
        if (tape) {
            tape->blocks[i].input = x;
            tape->blocks[i].pre_act = std::move(nr.y);
            tape->blocks[i].norm = std::move(nr.cache);
        }
        return y;
    }

    void check_input(const Tensor& x) const {
        require_rank(x, 5, "Model input");
        if (x.dim(1) != config_.in_channels)
            throw ShapeError("Model: expected " + std::to_string(config_.in_channels) + " input channels, got " +
                             std::to_string(x.dim(1)));
        const std::size_t m = config_.spatial_multiple();
        for (int a = 2; a < 5; ++a)
            if (x.dim(a) % m)
                throw ShapeError("Model: spatial extents must be divisible by " + std::to_string(m) + ", got " +
                                 shape_string(x.shape()));
    }

    Tensor run(const Tensor& x, Mode mode, Tape* tape, std::vector<NormState>* next) const {
        check_input(x);
        const std::size_t L = config_.levels, B = config_.blocks_per_level;
        if (tape) {
            tape->mode = mode;
            tape->blocks.resize(blocks_.size());
            tape->pools.resize(L);
            tape->up_inputs.resize(L);
        }
        if (next) next->resize(blocks_.size());
        std::vector<Tensor> skips(L);
        Tensor h = x;
        for (std::size_t l = 0; l < L; ++l) {
            for (std::size_t b = 0; b < B; ++b) h = run_block(block_index_encoder(l, b), h, mode, tape, next);
            skips[l] = h;
            h = pool_forward(h, linear_probe_, tape ? &tape->pools[l] : nullptr);
        }
        for (std::size_t b = 0; b < B; ++b) h = run_block(block_index_bottleneck(b), h, mode, tape, next);
        for (std::size_t l = L; l-- > 0;) {
            if (tape) tape->up_inputs[l] = h;
            h = concat_channels(skips[l], ups_[l].forward(h));
            for (std::size_t b = 0; b < B; ++b) h = run_block(block_index_decoder(l, b), h, mode, tape, next);
        }
        if (tape) tape->head_input = h;
        Tensor z = head_.forward(h);
        Tensor y = (config_.final_activation == FinalActivation::Sigmoid && !linear_probe_) ? sigmoid(z) : std::move(z);
        require_finite(y, "model output");
        if (tape) tape->output = y;
        return y;
    }

    ModelConfig config_;
    std::vector<ConvBlock> blocks_;  // encoder levels, bottleneck, decoder levels (deepest first)
    std::vector<UpConvLayer> ups_;   // indexed by target level
    ConvLayer head_;
    bool linear_probe_ = false;
    Tape tape_;
};

// ---------------------------------------------------------------------------

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, Prng& rng) {
    Tensor t(std::move(shape));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.vec()) v = std * rng.normal();
    return t;
}

inline ConvBlock make_block(std::size_t cin, std::size_t cout, std::size_t k, Prng& rng) {
    ConvBlock b;
    b.conv.weight = he_normal({cout, cin, k, k, k}, cin * k * k * k, rng);
    b.conv.bias = Tensor({cout});
    b.conv.padding = k / 2;
    b.norm = NormState(cout);
    return b;
}

}  // namespace detail

/*!
 * Instantiate a U-Net. Convolution weights are He-normal (std sqrt(2 / fan_in))
 * drawn in parameter order from `config.seed`; biases and beta start at 0,
 * gamma at 1, running mean 0 and running variance 1.
 */
inline Model Model::build(const ModelConfig& config) {
    config.validate();
    Model m;
    m.config_ = config;
    Prng rng(config.seed);
    const std::size_t L = config.levels, B = config.blocks_per_level, k = config.conv_kernel;
    const auto& f = config.features;
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t b = 0; b < B; ++b)
            m.blocks_.push_back(detail::make_block(b == 0 ? (l == 0 ? config.in_channels : f[l - 1]) : f[l], f[l], k, rng));
    for (std::size_t b = 0; b < B; ++b) m.blocks_.push_back(detail::make_block(b == 0 ? f[L - 1] : f[L], f[L], k, rng));
    m.ups_.resize(L);
    for (std::size_t l = L; l-- > 0;) {
        m.ups_[l].weight = detail::he_normal({f[l + 1], f[l], 2, 2, 2}, f[l + 1], rng);
        m.ups_[l].bias = Tensor({f[l]});
        for (std::size_t b = 0; b < B; ++b) m.blocks_.push_back(detail::make_block(b == 0 ? 2 * f[l] : f[l], f[l], k, rng));
    }
    m.head_.weight = detail::he_normal({config.out_channels, f[0], 1, 1, 1}, f[0], rng);
    m.head_.bias = Tensor({config.out_channels});
    m.head_.padding = 0;
    return m;
}

inline std::vector<NormState*> Model::norm_states() {
    std::vector<NormState*> out;
    for (auto& b : blocks_) out.push_back(&b.norm);
    return out;
}

inline std::vector<const NormState*> Model::norm_states() const {
    std::vector<const NormState*> out;
    for (const auto& b : blocks_) out.push_back(&b.norm);
    return out;
}

namespace detail {

// Walks trainable parameters in flat-vector order. Norm affine parameters are
// visited as raw vectors.
template <class ModelT, class Fn>
void visit_parameters(ModelT& m, Fn&& fn) {
    const bool affine = has_affine(m.config().norm_kind);
    for (auto& b : m.blocks()) {
        fn(b.conv.weight.vec());
        fn(b.conv.bias.vec());
        if (affine) {
            fn(b.norm.gamma);
            fn(b.norm.beta);
        }
    }
    for (std::size_t l = m.config().levels; l-- > 0;) {
        fn(m.ups()[l].weight.vec());
        fn(m.ups()[l].bias.vec());
    }
    fn(m.head().weight.vec());
    fn(m.head().bias.vec());
}

}  // namespace detail

inline std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    detail::visit_parameters(const_cast<Model&>(*this), [&](std::vector<double>& v) { n += v.size(); });
    return n;
}

inline std::vector<double> Model::flat_parameters() const {
    std::vector<double> out;
    detail::visit_parameters(const_cast<Model&>(*this),
                             [&](std::vector<double>& v) { out.insert(out.end(), v.begin(), v.end()); });
    return out;
}

inline void Model::set_flat_parameters(const std::vector<double>& flat) {
    if (flat.size() != parameter_count()) throw ShapeError("set_flat_parameters: length mismatch");
    std::size_t off = 0;
    detail::visit_parameters(*this, [&](std::vector<double>& v) {
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off), flat.begin() + static_cast<std::ptrdiff_t>(off + v.size()),
                  v.begin());
        off += v.size();
    });
}

inline std::string Model::block_name(std::size_t i) const {
    const std::size_t L = config_.levels, B = config_.blocks_per_level;
    const std::size_t lvl = i / B, b = i % B;
    if (lvl < L) return "enc" + std::to_string(lvl) + "." + std::to_string(b);
    if (lvl == L) return "bottleneck." + std::to_string(b);
    return "dec" + std::to_string(L - 1 - (lvl - L - 1)) + "." + std::to_string(b);
}

inline std::vector<NamedTensor> Model::named_tensors() {
    // Norm vectors live in NormState and are written separately by the checkpoint code.
    std::vector<NamedTensor> out;
    const std::size_t L = config_.levels;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        out.push_back({block_name(i) + ".conv.weight", &blocks_[i].conv.weight});
        out.push_back({block_name(i) + ".conv.bias", &blocks_[i].conv.bias});
    }
    for (std::size_t l = L; l-- > 0;) {
        out.push_back({"up" + std::to_string(l) + ".weight", &ups_[l].weight});
        out.push_back({"up" + std::to_string(l) + ".bias", &ups_[l].bias});
    }
    out.push_back({"head.weight", &head_.weight});
    out.push_back({"head.bias", &head_.bias});
    return out;
}

inline Gradients Model::backward(const Tensor& upstream) {
    if (!tape_.valid) throw std::logic_error("Model::backward: no cached forward pass");
    if (upstream.shape() != tape_.output.shape())
        throw ShapeError("Model::backward: upstream " + shape_string(upstream.shape()) + " vs output " +
                         shape_string(tape_.output.shape()));
    const std::size_t L = config_.levels, B = config_.blocks_per_level;
    const bool affine = has_affine(config_.norm_kind);

    struct BlockGrad {
        Tensor w, b;
        std::vector<double> gamma, beta;
    };
    std::vector<BlockGrad> bg(blocks_.size());
    std::vector<ConvGrads> ug(L);

    auto block_backward = [&](std::size_t i, const Tensor& g) {
        const BlockTape& t = tape_.blocks[i];
        Tensor gn = linear_probe_ ? g : relu_backward(t.pre_act, g);
        NormGrads ng = norm_backward(t.norm, gn);
        ConvGrads cg = blocks_[i].conv.backward(t.input, ng.input);
        bg[i] = {std::move(cg.weights), std::move(cg.bias), std::move(ng.gamma), std::move(ng.beta)};
        return std::move(cg.input);
    };

    Tensor g = (config_.final_activation == FinalActivation::Sigmoid && !linear_probe_)
                   ? sigmoid_backward(tape_.output, upstream)
                   : upstream;
    ConvGrads hg = head_.backward(tape_.head_input, g);
    Tensor h = std::move(hg.input);
    std::vector<Tensor> skip_grads(L);
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t b = B; b-- > 0;) h = block_backward(block_index_decoder(l, b), h);
        auto [gskip, gup] = split_channels(h, config_.features[l]);
        skip_grads[l] = std::move(gskip);
        ug[l] = ups_[l].backward(tape_.up_inputs[l], gup);
        h = std::move(ug[l].input);
    }
    for (std::size_t b = B; b-- > 0;) h = block_backward(block_index_bottleneck(b), h);
    for (std::size_t l = L; l-- > 0;) {
        h = pool_backward(tape_.pools[l], h);
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += skip_grads[l][i];
        for (std::size_t b = B; b-- > 0;) h = block_backward(block_index_encoder(l, b), h);
    }

    Gradients out;
    out.input = std::move(h);
    out.params.reserve(parameter_count());
    auto append = [&](const std::vector<double>& v) { out.params.insert(out.params.end(), v.begin(), v.end()); };
    for (auto& gblk : bg) {
        append(gblk.w.vec());
        append(gblk.b.vec());
        if (affine) {
            append(gblk.gamma);
            append(gblk.beta);
        }
    }
    for (std::size_t l = L; l-- > 0;) {
        append(ug[l].weights.vec());
        append(ug[l].bias.vec());
    }
    append(hg.weights.vec());
    append(hg.bias.vec());
    return out;
}

inline Model build(const ModelConfig& config) { return Model::build(config); }

/*!
 * Closed-form parameter count: per conv block k^3 * c_in * c_out + c_out
 * (+ 2 * c_out for affine norms), per upsampler 8 * c_in * c_out + c_out,
 * plus the 1^3 head.
 */
inline std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t k3 = c.conv_kernel * c.conv_kernel * c.conv_kernel;
    const std::size_t aff = has_affine(c.norm_kind) ? 2 : 0;
    const auto& f = c.features;
    auto block = [&](std::size_t cin, std::size_t cout) { return k3 * cin * cout + cout + aff * cout; };
    std::size_t n = 0;
    for (std::size_t l = 0; l < c.levels; ++l)
        for (std::size_t b = 0; b < c.blocks_per_level; ++b)
            n += block(b == 0 ? (l == 0 ? c.in_channels : f[l - 1]) : f[l], f[l]);
    for (std::size_t b = 0; b < c.blocks_per_level; ++b) n += block(b == 0 ? f[c.levels - 1] : f[c.levels], f[c.levels]);
    for (std::size_t l = 0; l < c.levels; ++l) {
        n += 8 * f[l + 1] * f[l] + f[l];
        for (std::size_t b = 0; b < c.blocks_per_level; ++b) n += block(b == 0 ? 2 * f[l] : f[l], f[l]);
    }
    n += f[0] * c.out_channels + c.out_channels;
    return n;
}

}  // namespace tilenorm
