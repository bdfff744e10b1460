#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "tilenorm/unet.hpp"

using namespace tilenorm;

namespace {

ModelConfig micro(NormKind kind) {
    ModelConfig c;
    c.features = {2, 3, 4};
    c.norm_kind = kind;
    c.seed = 5;
    return c;
}

Tensor random_tensor(Shape s, Prng& r) {
    Tensor t(std::move(s));
    for (auto& v : t.vec()) v = r.uniform(-1.0, 1.0);
    return t;
}

double grad_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
}

}  // namespace

// Hand count for features {2, 3, 4}, two levels, two 3^3 blocks each, one input and three output channels.
// enc0 60 + 114, enc1 171 + 252, bottleneck 336 + 444, up1 99, dec1 495 + 252, up0 50, dec0 222 + 114, head 9.
TEST(Unet, ParameterCountByHand) {
    EXPECT_EQ(build(micro(NormKind::BatchNorm)).parameter_count(), 2618u);
    EXPECT_EQ(expected_parameter_count(micro(NormKind::BatchNorm)), 2618u);
    // identity norms drop gamma and beta on the 28 normalized channels
    EXPECT_EQ(build(micro(NormKind::Identity)).parameter_count(), 2618u - 56u);
}

TEST(Unet, ParameterCountMatchesClosedFormAcrossConfigs) {
    for (std::size_t levels : {1, 2, 3})
        for (std::size_t k : {1, 3, 5})
            for (NormKind kind : kAllNormKinds) {
                ModelConfig c;
                c.levels = levels;
                c.conv_kernel = k;
                c.norm_kind = kind;
                c.blocks_per_level = levels == 2 ? 1 : 2;
                c.features.clear();
                for (std::size_t l = 0; l <= levels; ++l) c.features.push_back(2 + 2 * l);
                const Model m = build(c);
                EXPECT_EQ(m.parameter_count(), expected_parameter_count(c));
                EXPECT_EQ(m.flat_parameters().size(), m.parameter_count());
            }
}

TEST(Unet, ConfigValidation) {
    ModelConfig c = micro(NormKind::BatchNorm);
    c.features = {2, 3};
    EXPECT_THROW(build(c), std::invalid_argument);
    c = micro(NormKind::BatchNorm);
    c.features = {2, 2, 4};
    EXPECT_THROW(build(c), std::invalid_argument);
    c = micro(NormKind::BatchNorm);
    c.conv_kernel = 4;
    EXPECT_THROW(build(c), std::invalid_argument);
}

TEST(Unet, OutputShapeRangeAndInputChecks) {
    Model m = build(micro(NormKind::BatchRenorm));
    Prng r(1);
    const Tensor y = m.predict(random_tensor({2, 1, 8, 4, 12}, r), Mode::Eval);
    EXPECT_EQ(y.shape(), (Shape{2, 3, 8, 4, 12}));
    for (double v : y.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    EXPECT_THROW(m.predict(Tensor({1, 1, 8, 8, 6}), Mode::Eval), ShapeError);
    EXPECT_THROW(m.predict(Tensor({1, 2, 8, 8, 8}), Mode::Eval), ShapeError);
    EXPECT_THROW(m.backward(Tensor({1, 3, 8, 8, 8})), std::logic_error);
}

TEST(Unet, SeedDeterminesWeights) {
    EXPECT_EQ(build(micro(NormKind::BatchNorm)).flat_parameters(), build(micro(NormKind::BatchNorm)).flat_parameters());
    ModelConfig other = micro(NormKind::BatchNorm);
    other.seed = 6;
    EXPECT_NE(build(other).flat_parameters(), build(micro(NormKind::BatchNorm)).flat_parameters());
}

TEST(Unet, FlatParametersRoundTrip) {
    Model m = build(micro(NormKind::InstanceNorm));
    std::vector<double> p = m.flat_parameters();
    for (auto& v : p) v *= 0.5;
    m.set_flat_parameters(p);
    EXPECT_EQ(m.flat_parameters(), p);
    EXPECT_THROW(m.set_flat_parameters(std::vector<double>(3)), ShapeError);
}

TEST(Unet, PredictIsPureAndEvalForwardCommitsNothing) {
    Model m = build(micro(NormKind::BatchNorm));
    Prng r(2);
    const Tensor x = random_tensor({1, 1, 8, 8, 8}, r);
    const auto before = m.norm_states()[0]->running_mean;
    const Tensor a = m.predict(x, Mode::Train);
    const Tensor b = m.predict(x, Mode::Train);
    EXPECT_TRUE(a == b);
    EXPECT_EQ(m.norm_states()[0]->running_mean, before);
    m.forward(x, Mode::Eval);
    EXPECT_EQ(m.norm_states()[0]->running_mean, before);
    const Tensor c = m.forward(x, Mode::Train);
    EXPECT_TRUE(c == a);
    EXPECT_NE(m.norm_states()[0]->running_mean, before);
}

class UnetGradient : public testing::TestWithParam<NormKind> {};

TEST_P(UnetGradient, MatchesFiniteDifferences) {
    const NormKind kind = GetParam();
    Model m = build(micro(kind));
    // zero clip width: renorm factors are the constants r = 1, d = 0
    m.set_renorm_bounds(1.0, 0.0);
    Prng r(3);
    Tensor x = random_tensor({2, 1, 8, 8, 8}, r);
    const Tensor u = random_tensor({2, 3, 8, 8, 8}, r);
    for (Mode mode : {Mode::Train, Mode::Eval}) {
        m.forward(x, mode);
        const Gradients g = m.backward(u);
        std::vector<double> p = m.flat_parameters();
        auto loss = [&] {
            m.set_flat_parameters(p);
            return dot(m.predict(x, mode).data(), u.data());
        };
        const double h = 1e-6;
        std::vector<double> fd(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double keep = p[i];
            p[i] = keep + h;
            const double up = loss();
            p[i] = keep - h;
            const double down = loss();
            p[i] = keep;
            fd[i] = (up - down) / (2 * h);
        }
        m.set_flat_parameters(p);
        EXPECT_LT(grad_error(g.params, fd), 1e-5) << to_string(mode);

        std::vector<double> fdx(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double keep = x[i];
            x[i] = keep + h;
            const double up = dot(m.predict(x, mode).data(), u.data());
            x[i] = keep - h;
            const double down = dot(m.predict(x, mode).data(), u.data());
            x[i] = keep;
            fdx[i] = (up - down) / (2 * h);
        }
        EXPECT_LT(grad_error(g.input.vec(), fdx), 1e-5) << to_string(mode);
    }
}

INSTANTIATE_TEST_SUITE_P(AllKinds, UnetGradient, testing::ValuesIn(kAllNormKinds),
                         [](const testing::TestParamInfo<NormKind>& i) {
                             std::string s = to_string(i.param);
                             for (auto& ch : s)
                                 if (ch == '-') ch = '_';
                             return s;
                         });

// Shifting the input by a multiple of 2^levels shifts the output, away from the zero-padded border.
TEST(Unet, TranslationEquivariantInTheInterior) {
    Model m = build(micro(NormKind::BatchNorm));
    Prng r(4);
    const Tensor x = random_tensor({1, 1, 8, 8, 96}, r);
    Tensor shifted({1, 1, 8, 8, 96});
    for (std::size_t z = 0; z < 8; ++z)
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t i = 4; i < 96; ++i) shifted.at(0, 0, z, y, i) = x.at(0, 0, z, y, i - 4);
    const Tensor a = m.predict(x, Mode::Eval);
    const Tensor b = m.predict(shifted, Mode::Eval);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t z = 0; z < 8; ++z)
            for (std::size_t y = 0; y < 8; ++y)
                for (std::size_t i = 28; i < 64; ++i) ASSERT_EQ(b.at(0, c, z, y, i), a.at(0, c, z, y, i - 4));
}

TEST(Unet, LinearProbeIsAffine) {
    Model m = build(micro(NormKind::Identity));
    m.set_linear_probe(true);
    Prng r(5);
    const Tensor x = random_tensor({1, 1, 8, 8, 8}, r);
    Tensor x2 = x;
    for (auto& v : x2.vec()) v *= 2.0;
    const Tensor f0 = m.predict(Tensor(x.shape()), Mode::Eval);
    const Tensor f1 = m.predict(x, Mode::Eval);
    const Tensor f2 = m.predict(x2, Mode::Eval);
    for (std::size_t i = 0; i < f0.size(); ++i) EXPECT_NEAR(f2[i] - f0[i], 2.0 * (f1[i] - f0[i]), 1e-12);
}

TEST(Unet, BlockNames) {
    const Model m = build(micro(NormKind::BatchNorm));
    EXPECT_EQ(m.block_name(m.block_index_encoder(1, 0)), "enc1.0");
    EXPECT_EQ(m.block_name(m.block_index_bottleneck(1)), "bottleneck.1");
    EXPECT_EQ(m.block_name(m.block_index_decoder(0, 1)), "dec0.1");
    std::set<std::string> names;
    for (const auto& [name, t] : m.named_tensors()) EXPECT_TRUE(names.insert(name).second) << name;
}
