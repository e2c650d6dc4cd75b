#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "generators.hpp"
#include "modal_audit/errors.hpp"
#include "modal_audit/interventions.hpp"

using namespace modal_audit;

namespace {

double row_distance(std::span<const float> a, std::span<const float> b) { return std::sqrt(squared_distance(a, b)); }

InterventionSpec random_spec(Rng& r, InterventionKind kind) {
    InterventionSpec s;
    s.modality = r.below(2) ? Modality::Text : Modality::Visual;
    s.segments = r.below(3) == 0 ? SegmentSelection::all_tokens() : SegmentSelection::only(gen::segments(r));
    s.alpha_interp = r.uniform();
    s.kind = kind;
    s.control_seed = r.next();
    return s;
}

const InterventionKind kAllKinds[] = {InterventionKind::None, InterventionKind::Centroid,
                                      InterventionKind::RandomDirection, InterventionKind::MatchedNoise,
                                      InterventionKind::ShuffledCentroid};

}  // namespace

TEST(Mask, SelectsModalityAndSegments) {
    std::vector<TokenTag> tags = {{Modality::Visual, Segment::Other},   {Modality::Text, Segment::System},
                                  {Modality::Text, Segment::Question},  {Modality::Text, Segment::Options},
                                  {Modality::Text, Segment::Other}};
    InterventionSpec s;
    s.segments = SegmentSelection::all_tokens();
    EXPECT_EQ(build_mask(tags, s), (std::vector<std::uint32_t>{1, 2, 3, 4}));
    s.segments = parse_segment_selection("options,system");
    EXPECT_EQ(build_mask(tags, s), (std::vector<std::uint32_t>{1, 3}));
    s.modality = Modality::Visual;
    s.segments = SegmentSelection::all_tokens();
    EXPECT_EQ(build_mask(tags, s), (std::vector<std::uint32_t>{0}));
    EXPECT_THROW(parse_segment_selection("options,bogus"), ValidationError);
    EXPECT_EQ(parse_segment_selection("question").name(), "question");
}

TEST(Interventions, OutOfMaskRowsUntouched) {
    Rng r(100);
    for (int trial = 0; trial < 100; ++trial) {
        const auto d = static_cast<std::uint32_t>(gen::between(r, 1, 8));
        const auto s = gen::sample(r, d, trial);
        const auto book = gen::book(r, static_cast<std::uint32_t>(gen::between(r, 2, 6)), d);
        for (auto kind : kAllKinds) {
            const auto spec = random_spec(r, kind);
            const auto out = apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book);
            const auto mask = build_mask(s, spec);
            const std::set<std::uint32_t> in(mask.begin(), mask.end());
            for (std::uint32_t t = 0; t < s.hidden.rows; ++t)
                if (!in.count(t)) EXPECT_TRUE(bit_equal(out.row(t), s.hidden.row(t)));
        }
    }
}

TEST(Interventions, NoneIsIdentity) {
    Rng r(5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto s = gen::sample(r, 4, trial);
        const auto spec = random_spec(r, InterventionKind::None);
        EXPECT_TRUE(bit_equal(apply_intervention(s.hidden, s.tags, s.sample_id, spec, nullptr), s.hidden));
    }
}

TEST(Interventions, CentroidMatchesDirectInterpolation) {
    Rng r(6);
    for (int trial = 0; trial < 50; ++trial) {
        const auto s = gen::sample(r, 5, trial);
        const auto book = gen::book(r, 4, 5);
        auto spec = random_spec(r, InterventionKind::Centroid);
        const auto out = apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book);
        for (auto t : build_mask(s, spec))
            EXPECT_TRUE(bit_equal(out.row(t), interpolate_to_centroid(s.hidden.row(t), book, spec.alpha_interp)));
    }
}

TEST(Interventions, DoseMatchedDisplacementNorms) {
    Rng r(7);
    for (double alpha : {0.2, 0.3, 0.4, 0.6}) {
        for (int trial = 0; trial < 40; ++trial) {
            const auto d = static_cast<std::uint32_t>(gen::between(r, 2, 32));
            const auto s = gen::sample(r, d, trial);
            const auto book = gen::book(r, 8, d);
            InterventionSpec spec;
            spec.modality = Modality::Text;
            spec.alpha_interp = alpha;
            spec.control_seed = r.next();
            spec.kind = InterventionKind::Centroid;
            const auto real = apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book);
            for (auto kind : {InterventionKind::RandomDirection, InterventionKind::MatchedNoise}) {
                spec.kind = kind;
                const auto ctrl = apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book);
                for (auto t : build_mask(s, spec)) {
                    const double want = row_distance(real.row(t), s.hidden.row(t));
                    const double got = row_distance(ctrl.row(t), s.hidden.row(t));
                    EXPECT_NEAR(got, want, 1e-5 * want + 1e-6) << to_string(kind) << " alpha " << alpha;
                }
            }
        }
    }
}

TEST(Interventions, RandomDirectionIgnoresDoseMatchedNoiseDoesNot) {
    Rng r(8);
    const auto s = gen::sample(r, 16, 0);
    const auto book = gen::book(r, 4, 16);
    InterventionSpec spec;
    spec.control_seed = 3;
    spec.kind = InterventionKind::RandomDirection;
    spec.alpha_interp = 0.2;
    const auto a = apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book);
    spec.alpha_interp = 0.6;
    const auto b = apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book);
    // Same direction, different length.
    for (auto t : build_mask(s, spec)) {
        std::vector<double> da(16), db(16);
        double na = 0, nb = 0, dot = 0;
        for (int j = 0; j < 16; ++j) {
            da[j] = a.row(t)[j] - s.hidden.row(t)[j];
            db[j] = b.row(t)[j] - s.hidden.row(t)[j];
            na += da[j] * da[j], nb += db[j] * db[j], dot += da[j] * db[j];
        }
        if (na > 0 && nb > 0) EXPECT_NEAR(dot / std::sqrt(na * nb), 1.0, 1e-4);
    }
}

TEST(Interventions, DeterministicPerSampleAndSeed) {
    Rng r(9);
    const auto s = gen::sample(r, 6, 0);
    const auto book = gen::book(r, 5, 6);
    for (auto kind : kAllKinds) {
        auto spec = random_spec(r, kind);
        const auto a = apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book);
        const auto b = apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book);
        EXPECT_TRUE(bit_equal(a, b));
    }
}

TEST(Shuffle, DerangementOfAssignments) {
    Rng r(10);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t m = gen::between(r, 0, 12);
        std::vector<std::uint32_t> assigned(m);
        for (std::size_t i = 0; i < m; ++i) assigned[i] = static_cast<std::uint32_t>(i * 3 + 1);
        const auto out = shuffled_targets(assigned, 64, r.next(), gen::ident(r));
        ASSERT_EQ(out.size(), m);
        if (m >= 2) {
            auto a = assigned, b = out;
            std::sort(a.begin(), a.end());
            std::sort(b.begin(), b.end());
            EXPECT_EQ(a, b);
            for (std::size_t i = 0; i < m; ++i) EXPECT_NE(out[i], assigned[i]);
        } else if (m == 1) {
            EXPECT_NE(out[0], assigned[0]);
            EXPECT_LT(out[0], 64u);
        }
    }
}

TEST(Interventions, RejectsBadInputs) {
    Rng r(11);
    const auto s = gen::sample(r, 4, 0);
    const auto book = gen::book(r, 3, 5);
    InterventionSpec spec;
    spec.kind = InterventionKind::Centroid;
    EXPECT_THROW(apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book), ValidationError);
    EXPECT_THROW(apply_intervention(s.hidden, s.tags, s.sample_id, spec, nullptr), ValidationError);
    const auto ok = gen::book(r, 3, 4);
    spec.alpha_interp = 1.2;
    const std::vector<std::uint32_t> mask{0};
    EXPECT_THROW(apply_centroid_erasure(s.hidden, mask, ok, 1.2), ValidationError);
    const std::vector<std::uint32_t> bad{static_cast<std::uint32_t>(s.hidden.rows)};
    EXPECT_THROW(apply_centroid_erasure(s.hidden, bad, ok, 0.5), ValidationError);
}

TEST(Patch, RoundTripAndBuild) {
    Rng r(12);
    for (int trial = 0; trial < 100; ++trial) {
        const auto c = gen::cache(r, 5);
        auto book = gen::book(r, 3, c.d);
        book.layer = c.layer;
        auto spec = random_spec(r, trial % 2 ? InterventionKind::Centroid : InterventionKind::MatchedNoise);
        spec.layer = c.layer;
        const auto p = build_patch(c, &book, spec);
        EXPECT_EQ(p.d, c.d);
        EXPECT_EQ(p.layer, c.layer);
        ASSERT_EQ(p.samples.size(), c.samples.size());
        for (std::size_t i = 0; i < c.samples.size(); ++i) {
            const auto mask = build_mask(c.samples[i], spec);
            const auto out = apply_intervention(c.samples[i].hidden, c.samples[i].tags, c.samples[i].sample_id, spec, &book);
            ASSERT_EQ(p.samples[i].patches.size(), mask.size());
            for (std::size_t k = 0; k < mask.size(); ++k) {
                EXPECT_EQ(p.samples[i].patches[k].token_index, mask[k]);
                EXPECT_TRUE(bit_equal(p.samples[i].patches[k].vector, out.row(mask[k])));
            }
        }
        const auto bytes = serialize_patch(p);
        EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "MCPT1");
        EXPECT_EQ(deserialize_patch(bytes), p);
        if (bytes.size() > 6) EXPECT_THROW(deserialize_patch(std::span(bytes.data(), bytes.size() - 1)), Error);
    }
}
