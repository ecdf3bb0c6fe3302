#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "ssp/autograd/ops.hpp"
#include "ssp/layers/operations.hpp"
#include "support/conv_oracle.hpp"

using namespace ssp;
using namespace ssp::autograd;
using namespace ssp::layers;

namespace {

using test_support::brute_conv;

std::vector<float> as_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Tensor random_normal(Shape shape, Philox& rng) {
    std::vector<float> v(element_count(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return Tensor(std::move(shape), std::move(v));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

std::vector<double> to_double(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

ForwardContext train_ctx(Tape* tape, Philox* rng) { return ForwardContext{tape, Mode::Train, rng, true}; }

std::vector<OperationSpec> every_kind() {
    auto ops = base_operations();
    ops.push_back(OperationSpec::gaussian(10));
    ops.push_back(OperationSpec::dropout(1.0));
    ops.push_back(OperationSpec::dropout(0.5));
    ops.push_back(OperationSpec::trans_conv(3));
    ops.push_back(OperationSpec::trans_conv(5));
    ops.push_back(OperationSpec::stretched_conv());
    return ops;
}

}  // namespace

TEST(Identity, PassesValuesAndGradientsUnchanged) {
    const Tensor x({3}, {1.5f, -2.0f, 0.0f});
    EXPECT_TRUE(bitwise_equal(identity_forward(x), x));
    EXPECT_TRUE(bitwise_equal(identity_forward(Tensor::zeros({3, 8, 8})), Tensor::zeros({3, 8, 8})));

    Tape tape;
    const Tensor leaf = tape.variable(x);
    const Tensor g({3}, {0.25f, -4.0f, 7.0f});
    const auto grads = tape.backward(sum(mask_multiply(identity_forward(leaf), g)));
    EXPECT_EQ(as_vector(grads.of(leaf)), as_vector(g));
}

TEST(SepConv, ZeroWeightsGiveZeros) {
    const Tensor out = sep_conv_forward(Tensor::full({1, 4, 4}, 1.0f), Tensor::zeros({1, 1, 3, 3}),
                                        Tensor::zeros({2, 1, 1, 1}), Tensor::full({2}, 1.0f), Tensor::zeros({2}),
                                        nullptr, {});
    EXPECT_EQ(out.shape(), (Shape{2, 4, 4}));
    EXPECT_EQ(as_vector(out), std::vector<float>(32, 0.0f));
}

TEST(SepConv, ImpulseThroughCenterKernelIsUnchanged) {
    std::vector<float> img(25, 0.0f);
    img[12] = 1.0f;
    const Tensor x({1, 5, 5}, img);
    std::vector<float> dw(9, 0.0f);
    dw[4] = 1.0f;
    BatchNormStats identity_stats(1);  // mean 0, var 1
    BatchNormAttrs eval;
    eval.training = false;
    const Tensor out = sep_conv_forward(x, Tensor({1, 1, 3, 3}, dw), Tensor::full({1, 1, 1, 1}, 1.0f),
                                        Tensor::full({1}, 1.0f), Tensor::zeros({1}), &identity_stats, eval);
    // Eval-mode batch norm divides by sqrt(1 + eps).
    const double bn_scale = 1.0 / std::sqrt(1.0 + 1e-5);
    for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(out[i], img[i] * bn_scale, 1e-7) << i;
    EXPECT_NEAR(out[12], 1.0, 1e-5);
}

TEST(SepConv, FiveByFivePreservesShape) {
    Philox rng(1);
    OperationModule op(OperationSpec::sep_conv(5), 36, rng);
    const Tensor out = op.forward(random_normal({36, 8, 8}, rng), train_ctx(nullptr, &rng));
    EXPECT_EQ(out.shape(), (Shape{36, 8, 8}));
}

TEST(SepConv, ChannelMismatchIsRejected) {
    Philox rng(2);
    OperationModule op(OperationSpec::sep_conv(3), 4, rng);
    EXPECT_THROW(op.forward(Tensor::zeros({1, 3, 8, 8}), train_ctx(nullptr, &rng)), ShapeError);
}

TEST(Pool, MaxOfConstantIsConstant) {
    const Tensor out = pool_forward(Tensor::full({2, 5, 5}, 3.5f), PoolMode::Max);
    EXPECT_EQ(as_vector(out), std::vector<float>(50, 3.5f));
}

TEST(Pool, AverageCenterOfOneToNine) {
    const Tensor x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    EXPECT_FLOAT_EQ(pool_forward(x, PoolMode::Avg)[4], 5.0f);
}

TEST(Pool, AverageExcludesPaddingFromTheCount) {
    const Tensor x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    const Tensor out = pool_forward(x, PoolMode::Avg);
    EXPECT_FLOAT_EQ(out[0], (1 + 2 + 4 + 5) / 4.0f);

    // Brute-force window mean with in-bounds counting on a random image.
    Philox rng(3);
    const std::size_t h = 6, w = 7;
    const Tensor r = random_normal({1, h, w}, rng);
    const Tensor avg = pool_forward(r, PoolMode::Avg);
    const Tensor mx = pool_forward(r, PoolMode::Max);
    for (long i = 0; i < static_cast<long>(h); ++i)
        for (long j = 0; j < static_cast<long>(w); ++j) {
            double s = 0.0, m = -1e30;
            int count = 0;
            for (long a = i - 1; a <= i + 1; ++a)
                for (long b = j - 1; b <= j + 1; ++b) {
                    if (a < 0 || b < 0 || a >= static_cast<long>(h) || b >= static_cast<long>(w)) continue;
                    s += r[a * w + b];
                    m = std::max(m, static_cast<double>(r[a * w + b]));
                    ++count;
                }
            EXPECT_NEAR(avg[i * w + j], s / count, 1e-6);
            EXPECT_EQ(mx[i * w + j], static_cast<float>(m));
        }
}

TEST(GaussianNoise, ZeroSigmaIsExact) {
    Philox rng(4);
    const Tensor x = random_normal({2, 3, 4}, rng);
    EXPECT_TRUE(bitwise_equal(gaussian_noise_forward(x, 0.0, &rng, Mode::Train), x));
}

TEST(GaussianNoise, SampleStdAtSigmaTen) {
    Philox rng(5);
    const Tensor out = gaussian_noise_forward(Tensor::zeros({1000, 1000}), 10.0, &rng, Mode::Train);
    double s = 0.0, sq = 0.0;
    for (float v : out.values()) {
        s += v;
        sq += static_cast<double>(v) * v;
    }
    const double n = 1e6;
    const double sd = std::sqrt(sq / n - (s / n) * (s / n));
    EXPECT_GE(sd, 9.8);
    EXPECT_LE(sd, 10.2);
}

TEST(GaussianNoise, EvalModeIsIdentityAndGradientPassesThrough) {
    Philox rng(6);
    const Tensor x = random_normal({3, 4}, rng);
    EXPECT_TRUE(bitwise_equal(gaussian_noise_forward(x, 10.0, &rng, Mode::Eval), x));

    Tape tape;
    const Tensor leaf = tape.variable(x);
    const auto grads = tape.backward(sum(gaussian_noise_forward(leaf, 10.0, &rng, Mode::Train)));
    EXPECT_EQ(as_vector(grads.of(leaf)), std::vector<float>(12, 1.0f));
    EXPECT_THROW(gaussian_noise_forward(x, -1.0, &rng, Mode::Train), std::invalid_argument);
}

TEST(Dropout, FullDropErasesValuesAndGradient) {
    Philox rng(7);
    Tape tape;
    const Tensor x = tape.variable(Tensor({3}, {7, -3, 2}));
    const Tensor out = dropout_forward(x, 1.0, &rng, Mode::Train);
    EXPECT_TRUE(bitwise_equal(out.detach(), Tensor::zeros({3})));
    const auto grads = tape.backward(sum(mul(out, Tensor({3}, {1, 2, 3}))));
    const Tensor gx = grads.of(x);
    for (float g : gx.values()) {
        EXPECT_FALSE(std::isnan(g));
        EXPECT_EQ(std::signbit(g), false);
        EXPECT_EQ(g, 0.0f);
    }
}

TEST(Dropout, HalfDropFractionAndScale) {
    Philox rng(8);
    const Tensor x = Tensor::full({1000, 1000}, 1.5f);
    const Tensor out = dropout_forward(x, 0.5, &rng, Mode::Train);
    std::size_t zeros = 0;
    for (float v : out.values()) {
        if (v == 0.0f) {
            ++zeros;
        } else {
            EXPECT_EQ(v, 3.0f);
        }
    }
    const double frac = static_cast<double>(zeros) / 1e6;
    EXPECT_GE(frac, 0.497);
    EXPECT_LE(frac, 0.503);
}

TEST(Dropout, EvalAndZeroProbabilityAreIdentity) {
    Philox rng(9);
    const Tensor x = random_normal({4, 5}, rng);
    EXPECT_TRUE(bitwise_equal(dropout_forward(x, 1.0, &rng, Mode::Eval), x));
    EXPECT_TRUE(bitwise_equal(dropout_forward(x, 0.0, &rng, Mode::Train), x));
    EXPECT_THROW(dropout_forward(x, 1.5, &rng, Mode::Train), std::invalid_argument);
    EXPECT_THROW(dropout_forward(x, -0.1, &rng, Mode::Train), std::invalid_argument);
}

TEST(Dropout, FullDropZeroesEveryUpstreamParameterGradient) {
    Philox rng(10);
    OperationModule before(OperationSpec::sep_conv(3), 3, rng, "before");
    OperationModule drop(OperationSpec::dropout(1.0), 3, rng);
    OperationModule after(OperationSpec::trans_conv(3), 3, rng, "after");
    Tape tape;
    const auto ctx = train_ctx(&tape, &rng);
    const Tensor x = tape.variable(random_normal({2, 3, 6, 6}, rng));
    const Tensor h = after.forward(drop.forward(before.forward(x, ctx), ctx), ctx);
    const auto grads = tape.backward(sum(mul(h, h)));
    for (const Parameter* p : before.parameters()) {
        ASSERT_NE(grads.find(*p), nullptr) << p->name;
        for (float g : *grads.find(*p)) EXPECT_EQ(g, 0.0f) << p->name;
    }
    const Tensor gx = grads.of(x);
    for (float g : gx.values()) EXPECT_EQ(g, 0.0f);
}

TEST(TransConv, PreservesShape) {
    Philox rng(11);
    for (std::size_t k : {3, 5}) {
        OperationModule op(OperationSpec::trans_conv(k), 36, rng);
        EXPECT_EQ(op.forward(random_normal({36, 8, 8}, rng), train_ctx(nullptr, &rng)).shape(), (Shape{36, 8, 8}));
    }
}

TEST(TransConv, EqualsInputGradientOfConvolution) {
    Philox rng(12);
    const Tensor kernel = random_normal({1, 1, 3, 3}, rng);
    const Tensor upstream = random_normal({1, 1, 4, 4}, rng);

    Tape tape;
    const Tensor x = tape.variable(Tensor::zeros({1, 1, 4, 4}));
    const Tensor y = conv2d(x, kernel, {1, 1, 1});
    const auto grads = tape.backward(sum(mask_multiply(y, upstream)));
    const Tensor via_gradient = grads.of(x);

    const Tensor direct = trans_conv_forward(upstream, kernel);
    ASSERT_EQ(direct.shape(), via_gradient.shape());
    for (std::size_t i = 0; i < direct.numel(); ++i) EXPECT_NEAR(direct[i], via_gradient[i], 1e-6);
}

TEST(TransConv, AdjointOfBruteForceConvolution) {
    Philox rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t c = 1 + rng.below(3), co = 1 + rng.below(3), h = 3 + rng.below(6), w = 3 + rng.below(6);
        const std::size_t k = rng.below(2) ? 3 : 5;
        const long pad = static_cast<long>((k - 1) / 2);
        const Tensor x = random_normal({1, c, h, w}, rng);
        const Tensor y = random_normal({1, co, h, w}, rng);
        const Tensor kernel = random_normal({co, c, k, k}, rng);  // conv layout (out, in, k, k)

        const auto conv_x = brute_conv(to_double(x), c, h, w, to_double(kernel), co, k, pad, 1);
        double lhs = 0.0;
        for (std::size_t i = 0; i < conv_x.size(); ++i) lhs += conv_x[i] * y[i];

        // Transposed conv maps co -> c with the same kernel read as (in=co, out=c).
        const Tensor ty = trans_conv_forward(y, kernel);
        ASSERT_EQ(ty.shape(), x.shape());
        double rhs = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) rhs += static_cast<double>(x[i]) * ty[i];
        EXPECT_NEAR(lhs, rhs, 1e-4 * std::max(1.0, std::abs(lhs))) << "trial " << trial;
    }
}

TEST(StretchedConv, OnesImageWithOnesKernelGivesOnes) {
    const Tensor out = stretched_conv_forward(Tensor::full({1, 8, 8}, 1.0f), Tensor::full({1, 1, 3, 3}, 1.0f), 50, 50);
    EXPECT_EQ(out.shape(), (Shape{1, 8, 8}));
    EXPECT_EQ(as_vector(out), std::vector<float>(64, 1.0f));
    const auto oracle = brute_conv(std::vector<double>(64, 1.0), 1, 8, 8, std::vector<double>(9, 1.0), 1, 3, 50, 50);
    EXPECT_EQ(oracle, std::vector<double>(64, 1.0));
}

TEST(StretchedConv, MatchesCenterTapOneByOneConvolution) {
    Philox rng(14);
    for (std::size_t h : {8, 32}) {
        const std::size_t c = 3;
        const Tensor x = random_normal({2, c, h, h}, rng);
        const Tensor kernel = random_normal({c, c, 3, 3}, rng);
        std::vector<float> center(c * c);
        for (std::size_t o = 0; o < c; ++o)
            for (std::size_t i = 0; i < c; ++i) center[o * c + i] = kernel[(o * c + i) * 9 + 4];
        const Tensor stretched = stretched_conv_forward(x, kernel, 50, 50);
        const Tensor pointwise = conv2d(x, Tensor({c, c, 1, 1}, center), {0, 1, 1});
        EXPECT_TRUE(bitwise_equal(stretched, pointwise)) << "H=" << h;
    }
}

TEST(Shapes, EveryKindPreservesSpatialDimsAndChannels) {
    Philox rng(15);
    for (const auto& spec : every_kind()) {
        OperationModule op(spec, 3, rng);
        for (std::size_t h : {1, 4, 8, 16, 32}) {
            const Tensor out = op.forward(random_normal({2, 3, h, h}, rng), train_ctx(nullptr, &rng));
            EXPECT_EQ(out.shape(), (Shape{2, 3, h, h})) << spec.canonical() << " H=" << h;
        }
    }
}

TEST(Spec, ParameterFreeKinds) {
    EXPECT_TRUE(OperationSpec::identity().parameter_free());
    EXPECT_TRUE(OperationSpec::max_pool3().parameter_free());
    EXPECT_TRUE(OperationSpec::avg_pool3().parameter_free());
    EXPECT_TRUE(OperationSpec::gaussian(10).parameter_free());
    EXPECT_TRUE(OperationSpec::dropout(1).parameter_free());
    EXPECT_FALSE(OperationSpec::sep_conv(3).parameter_free());
    EXPECT_FALSE(OperationSpec::trans_conv(5).parameter_free());
    EXPECT_FALSE(OperationSpec::stretched_conv().parameter_free());
    EXPECT_TRUE(OperationSpec::dropout(1).param_shapes(8).empty());
    EXPECT_EQ(OperationSpec::sep_conv(5).param_shapes(8).front(), (Shape{8, 1, 5, 5}));
}

TEST(Spec, CanonicalTextRoundTrips) {
    EXPECT_EQ(OperationSpec::dropout(1).canonical(), "dropout(p=1.0)");
    EXPECT_EQ(OperationSpec::gaussian(10).canonical(), "gaussian(sigma=10)");
    EXPECT_EQ(OperationSpec::stretched_conv().canonical(), "stretched_conv(k=3,pad=50,dil=50)");
    for (const auto& spec : every_kind()) {
        const auto back = OperationSpec::parse(spec.canonical());
        EXPECT_EQ(back.canonical(), spec.canonical());
        EXPECT_EQ(back.kind, spec.kind);
    }
    EXPECT_EQ(OperationSpec::parse("dropout(p=1)").canonical(), "dropout(p=1.0)");
    EXPECT_EQ(OperationSpec::parse(" stretched_conv(dil=50, pad=50, k=3) ").canonical(),
              "stretched_conv(k=3,pad=50,dil=50)");
    EXPECT_EQ(OperationSpec::parse("gaussian(sigma=2.5)").sigma, 2.5);
}

TEST(Spec, ParseRejectsMalformedText) {
    for (const char* bad : {"", "conv", "dropout", "dropout(p=2)", "dropout(q=1)", "gaussian(sigma=-1)",
                            "gaussian(sigma=x)", "identity(p=1)", "sep_conv_7x7", "stretched_conv(k=3,pad=10,dil=50)",
                            "dropout(p=0.5"}) {
        EXPECT_THROW(OperationSpec::parse(bad), SpecError) << bad;
    }
}

TEST(Probe, FullDropoutIsTotallyErased) {
    Philox rng(16);
    const auto s = output_variance_probe(OperationSpec::dropout(1.0), 4, rng);
    EXPECT_EQ(s.zero_fraction, 1.0);
    EXPECT_EQ(s.grad_norm, 0.0);
}

TEST(Probe, IdentityKeepsStdAndGradientNorm) {
    Philox rng(17);
    const auto s = output_variance_probe(OperationSpec::identity(), 4, rng);
    EXPECT_EQ(s.std, s.input_std);
    EXPECT_EQ(s.grad_norm, s.upstream_norm);
}

TEST(Probe, GaussianStdAddsInVariance) {
    Philox rng(18);
    const auto s = output_variance_probe(OperationSpec::gaussian(10), 100, rng);
    EXPECT_NEAR(s.std, std::sqrt(101.0), 0.1);
}

TEST(Probe, IdentityWeightsMakeConvolutionsPassThrough) {
    Philox rng(19);
    for (const auto& spec : {OperationSpec::trans_conv(3), OperationSpec::trans_conv(5),
                             OperationSpec::stretched_conv()}) {
        const auto s = output_variance_probe(spec, 2, rng);
        EXPECT_NEAR(s.std, s.input_std, 1e-6) << spec.canonical();
        EXPECT_NEAR(s.grad_norm, s.upstream_norm, 1e-3) << spec.canonical();
    }
    EXPECT_THROW(output_variance_probe(OperationSpec::identity(), 0, rng), std::invalid_argument);
}
