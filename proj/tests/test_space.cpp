#include <gtest/gtest.h>

#include "ssp/rng.hpp"
#include "ssp/space/search_space.hpp"

using namespace ssp;
using namespace ssp::space;

namespace {

Rational total_mass(const SearchSpace& s) {
    Rational sum(0);
    for (const auto& p : uniform_sampling_distribution(s)) sum += p.probability;
    return sum;
}

Rational poison_mass(const SearchSpace& s) {
    Rational sum(0);
    for (const auto& p : uniform_sampling_distribution(s))
        if (p.kind == SlotKind::Poison) sum += p.probability;
    return sum;
}

}  // namespace

TEST(Presets, Members) {
    EXPECT_EQ(preset_members(Preset::P1Identity).size(), 1u);
    EXPECT_EQ(preset_members(Preset::P4TransConv).size(), 2u);
    EXPECT_EQ(preset_members(Preset::P5Union).size(), 6u);
    const auto oneshot = preset_members(Preset::OneShot);
    ASSERT_EQ(oneshot.size(), 2u);
    EXPECT_EQ(oneshot[0].canonical(), "dropout(p=1.0)");
    EXPECT_EQ(oneshot[1].canonical(), "stretched_conv(k=3,pad=50,dil=50)");
    EXPECT_EQ(preset_members(Preset::P2Gaussian)[0].canonical(), "gaussian(sigma=10)");
    for (Preset p : all_presets()) EXPECT_EQ(parse_preset(preset_name(p)), p);
    EXPECT_EQ(parse_preset("P3_Dropout"), Preset::P3Dropout);
    EXPECT_FALSE(parse_preset("p9").has_value());
}

TEST(Compose, BaselineSpace) {
    const SearchSpace s;
    EXPECT_EQ(s.size(), 5u);
    EXPECT_TRUE(s.poison_entries().empty());
    EXPECT_EQ(s.classify_action(0).kind, SlotKind::Base);
    EXPECT_EQ(s.classify_action(0).spec.canonical(), "identity");
}

TEST(Compose, TableSizes) {
    EXPECT_EQ(compose(SearchSpace(), Preset::P3Dropout, 300).size(), 305u);
    const auto p4 = compose(SearchSpace(), Preset::P4TransConv, 60);
    EXPECT_EQ(p4.poison_slots(), 120u);
    EXPECT_EQ(p4.size(), 125u);
    EXPECT_EQ(compose(SearchSpace(), Preset::OneShot, 1).size(), 7u);
    EXPECT_THROW(compose(SearchSpace(), Preset::P3Dropout, 0), SpaceError);
}

TEST(Compose, ClassifyFollowsDeclarationOrder) {
    const auto s = compose(SearchSpace(), Preset::P3Dropout, 300);
    EXPECT_EQ(s.classify_action(5).kind, SlotKind::Poison);
    EXPECT_EQ(s.classify_action(5).spec.canonical(), "dropout(p=1.0)");
    EXPECT_EQ(s.classify_action(304).kind, SlotKind::Poison);
    EXPECT_EQ(s.classify_action(4).kind, SlotKind::Base);
    EXPECT_THROW(s.classify_action(305), SpaceError);

    const auto p4 = compose(SearchSpace(), Preset::P4TransConv, 2);
    EXPECT_EQ(p4.classify_action(5).spec.canonical(), "trans_conv_3x3");
    EXPECT_EQ(p4.classify_action(6).spec.canonical(), "trans_conv_3x3");
    EXPECT_EQ(p4.classify_action(7).spec.canonical(), "trans_conv_5x5");
}

TEST(Compose, IsDeterministic) {
    for (Preset p : all_presets()) {
        const auto a = compose(SearchSpace(), p, 3);
        const auto b = compose(SearchSpace(), p, 3);
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            EXPECT_EQ(a.action_table()[i].spec.canonical(), b.action_table()[i].spec.canonical());
            EXPECT_EQ(a.action_table()[i].kind, b.action_table()[i].kind);
        }
    }
}

TEST(Distribution, BaselineIsUniform) {
    for (const auto& p : uniform_sampling_distribution(SearchSpace())) EXPECT_EQ(p.probability, Rational(1, 5));
}

TEST(Distribution, ThreeHundredDropouts) {
    const auto s = compose(SearchSpace(), Preset::P3Dropout, 300);
    for (const auto& p : uniform_sampling_distribution(s)) {
        if (p.kind == SlotKind::Poison) {
            EXPECT_EQ(p.probability, Rational(300, 305));
        } else {
            EXPECT_EQ(p.probability, Rational(1, 305));
        }
    }
    EXPECT_NEAR(boost::rational_cast<double>(poison_mass(s)), 0.9836, 1e-4);
}

TEST(Distribution, UnionPresetWithDoubledGaussian) {
    const auto s = compose(SearchSpace(), Preset::P5Union, 6);
    EXPECT_EQ(s.poison_slots(), 36u);
    EXPECT_EQ(poison_mass(s), Rational(36, 41));
    for (const auto& p : uniform_sampling_distribution(s)) {
        if (p.spec.canonical() == "gaussian(sigma=10)") {
            EXPECT_EQ(p.probability, Rational(12, 41));
        }
    }
}

TEST(Distribution, MassesSumToOneExactly) {
    Philox rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        SearchSpace s;
        const std::size_t parts = rng.below(4);
        for (std::size_t i = 0; i < parts; ++i) {
            const auto presets = all_presets();
            s = compose(s, presets[rng.below(presets.size())], 1 + rng.below(300));
        }
        EXPECT_EQ(total_mass(s), Rational(1)) << s.describe();
    }
}

TEST(Distribution, PoisonSlotDominatesBaseOpForQAtLeastTwo) {
    for (Preset preset : all_presets()) {
        for (std::size_t q : {1, 2, 3, 6, 60, 300}) {
            const auto s = compose(SearchSpace(), preset, q);
            const Rational base(1, static_cast<std::int64_t>(s.size()));
            for (const auto& entry : s.poison_entries()) {
                const Rational per_entry(static_cast<std::int64_t>(entry.q), static_cast<std::int64_t>(s.size()));
                if (q >= 2) {
                    EXPECT_GT(per_entry, base) << preset_name(preset) << " q=" << q;
                } else {
                    EXPECT_EQ(per_entry, base) << preset_name(preset);
                }
            }
        }
    }
}

TEST(Text, ParsesPresetsAndLiterals) {
    EXPECT_EQ(parse_space("base").size(), 5u);
    EXPECT_EQ(parse_space("base + 300*dropout(p=1.0)").size(), 305u);
    EXPECT_EQ(parse_space("base + 2*oneshot").size(), 7u);
    EXPECT_EQ(parse_space("base + oneshot").size(), 7u);
    EXPECT_EQ(parse_space("base + 120*p4").poison_entries().front().q, 60u);
    EXPECT_EQ(parse_space("base + 120*p5").poison_entries().front().q, 20u);
    EXPECT_EQ(parse_space("base + 6*p0 + 2*gaussian(sigma=10)").size(), 13u);
    EXPECT_EQ(parse_space("BASE+36*P3_dropout").size(), 41u);
}

TEST(Text, ErrorsNameTheToken) {
    try {
        parse_space("base + 3*frobnicate");
        FAIL();
    } catch (const SpaceError& e) {
        EXPECT_EQ(e.token(), "frobnicate");
        EXPECT_NE(std::string(e.what()).find("frobnicate"), std::string::npos);
    }
    EXPECT_THROW(parse_space("base + 3*oneshot"), SpaceError);
    EXPECT_THROW(parse_space("base + 0*p3"), SpaceError);
    EXPECT_THROW(parse_space("base + "), SpaceError);
    EXPECT_THROW(parse_space("identity"), SpaceError);
    EXPECT_THROW(parse_space("base + x*p3"), SpaceError);
}

TEST(Text, DescribeRoundTrips) {
    for (const char* text : {"base", "base + 300*dropout(p=1.0)", "base + 2*oneshot", "base + 36*p5",
                             "base + 6*p0 + 12*p4"}) {
        const auto s = parse_space(text);
        const auto back = parse_space(s.describe());
        ASSERT_EQ(back.size(), s.size()) << text;
        for (std::size_t i = 0; i < s.size(); ++i)
            EXPECT_EQ(back.action_table()[i].spec.canonical(), s.action_table()[i].spec.canonical());
    }
}

TEST(Json, DumpListsEveryAction) {
    const auto j = parse_space("base + 300*dropout(p=1.0)").to_json();
    EXPECT_EQ(j["size"], 305);
    ASSERT_EQ(j["actions"].size(), 305u);
    EXPECT_EQ(j["actions"][5]["kind"], "poison");
    EXPECT_EQ(j["actions"][0]["probability"], "1/305");
}
