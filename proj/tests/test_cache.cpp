#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <limits>
#include <set>

#include "generators.hpp"
#include "modal_audit/binary_io.hpp"
#include "modal_audit/cache.hpp"
#include "modal_audit/errors.hpp"

using namespace modal_audit;

namespace {

ActivationCache small_cache() {
    ActivationCache c;
    c.d = 2;
    c.layer = 3;
    c.source = R"({"data_seed": 5})";
    SampleRecord s;
    s.sample_id = "s0";
    s.task_id = "t";
    s.option_token_ids = {10, 11};
    s.baseline_option_logits = {0.5f, -1.0f};
    s.gold_option = 1;
    s.tags = {{Modality::Visual, Segment::Other}, {Modality::Text, Segment::Options}};
    s.hidden = FloatMatrix(2, 2);
    s.hidden.data = {1, 2, 3, 4};
    c.samples.push_back(s);
    return c;
}

}  // namespace

TEST(Cache, RoundTripRandomInstances) {
    Rng r(1234);
    for (int i = 0; i < 100; ++i) {
        const auto c = gen::cache(r);
        const auto bytes = serialize_cache(c);
        const auto back = deserialize_cache(bytes);
        EXPECT_EQ(back, c);
        EXPECT_EQ(serialize_cache(back), bytes);
        for (std::size_t s = 0; s < c.samples.size(); ++s)
            EXPECT_TRUE(bit_equal(back.samples[s].hidden, c.samples[s].hidden));
    }
}

TEST(Cache, ByteLayout) {
    const auto bytes = serialize_cache(small_cache());
    ASSERT_GE(bytes.size(), 21u);
    EXPECT_EQ(std::memcmp(bytes.data(), "MCAC1", 5), 0);
    ByteReader r(bytes);
    r.raw(5);
    EXPECT_EQ(r.u32(), 1u);
    EXPECT_EQ(r.u32(), 2u);
    EXPECT_EQ(r.u32(), 3u);
    const auto meta_len = r.u32();
    EXPECT_EQ(r.raw(meta_len), R"({"data_seed": 5})");
    EXPECT_EQ(r.u64(), 1u);
    EXPECT_EQ(r.raw(r.u16()), "s0");
    EXPECT_EQ(r.raw(r.u16()), "t");
    EXPECT_EQ(r.u16(), 2u);
    EXPECT_EQ(r.u32(), 10u);
    EXPECT_EQ(r.u32(), 11u);
    EXPECT_EQ(r.f32(), 0.5f);
    EXPECT_EQ(r.f32(), -1.0f);
    EXPECT_EQ(r.u16(), 1u);
    EXPECT_EQ(r.u32(), 2u);
    EXPECT_EQ(r.u8(), 0u);
    EXPECT_EQ(r.u8(), 3u);
    EXPECT_EQ(r.f32(), 1.0f);
    EXPECT_EQ(r.f32(), 2.0f);
    EXPECT_EQ(r.u8(), 1u);
    EXPECT_EQ(r.u8(), 2u);
    EXPECT_EQ(r.f32(), 3.0f);
    EXPECT_EQ(r.f32(), 4.0f);
    EXPECT_TRUE(r.at_end());
}

TEST(Cache, EveryTruncationIsATypedError) {
    Rng r(77);
    for (int i = 0; i < 10; ++i) {
        const auto bytes = serialize_cache(gen::cache(r, 3));
        for (std::size_t n = 0; n < bytes.size(); ++n) {
            std::span<const std::uint8_t> prefix(bytes.data(), n);
            EXPECT_THROW(deserialize_cache(prefix), Error) << "prefix " << n;
        }
        auto extra = bytes;
        extra.push_back(0);
        EXPECT_THROW(deserialize_cache(extra), CorruptionError);
    }
}

TEST(Cache, RandomByteFlipsNeverCrash) {
    Rng r(91);
    for (int i = 0; i < 200; ++i) {
        auto bytes = serialize_cache(gen::cache(r, 3));
        bytes[r.below(bytes.size())] ^= static_cast<std::uint8_t>(1 + r.below(255));
        try {
            const auto c = deserialize_cache(bytes);
            validate_cache(c);
        } catch (const Error&) {
        }
    }
}

TEST(Cache, BadMagicAndVersion) {
    auto bytes = serialize_cache(small_cache());
    auto wrong = bytes;
    wrong[0] = 'X';
    EXPECT_THROW(deserialize_cache(wrong), UnsupportedFormatError);
    auto v2 = bytes;
    v2[5] = 2;
    EXPECT_THROW(deserialize_cache(v2), UnsupportedFormatError);
}

TEST(Cache, ValidationRejects) {
    auto c = small_cache();
    c.samples[0].gold_option = 2;
    EXPECT_THROW(validate_cache(c), ValidationError);
    c = small_cache();
    c.samples.push_back(c.samples[0]);
    EXPECT_THROW(validate_cache(c), ValidationError);
    c = small_cache();
    c.samples[0].tags = {{Modality::Text, Segment::System}, {Modality::Visual, Segment::Other}};
    EXPECT_THROW(validate_cache(c), ValidationError);
    c = small_cache();
    c.samples[0].hidden.data[1] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(validate_cache(c), ValidationError);
    c = small_cache();
    c.source = "{not json";
    EXPECT_THROW(validate_cache(c), ValidationError);
    c = small_cache();
    c.samples[0].hidden = FloatMatrix(2, 3);
    EXPECT_THROW(serialize_cache(c), FormatError);
}

TEST(Cache, SlicesPartitionTokens) {
    Rng r(8);
    for (int i = 0; i < 50; ++i) {
        const auto c = gen::cache(r);
        const auto vis = slice_tokens(c, {Modality::Visual, std::nullopt});
        const auto txt = slice_tokens(c, {Modality::Text, std::nullopt});
        std::size_t total = 0;
        for (const auto& s : c.samples) total += s.token_count();
        ASSERT_EQ(vis.index.size() + txt.index.size(), total);
        std::set<std::pair<std::uint32_t, std::uint32_t>> all;
        for (const auto* sl : {&vis, &txt}) {
            for (std::size_t k = 0; k < sl->index.size(); ++k) {
                const auto ref = sl->index[k];
                EXPECT_TRUE(all.insert({ref.sample_index, ref.token_index}).second);
                EXPECT_TRUE(bit_equal(sl->points.row(k), c.samples[ref.sample_index].hidden.row(ref.token_index)));
            }
        }
        EXPECT_EQ(all.size(), total);
    }
}

TEST(Cache, SummaryCounts) {
    const auto s = summarize(small_cache());
    EXPECT_EQ(s.samples, 1u);
    EXPECT_EQ(s.tokens, 2u);
    EXPECT_EQ(s.visual_tokens, 1u);
    EXPECT_EQ(s.text_by_segment[2], 1u);
    ASSERT_EQ(s.tasks.size(), 1u);
    EXPECT_EQ(s.tasks[0].first, "t");
}

TEST(Cache, FileRoundTripIsDeterministic) {
    const auto dir = std::filesystem::temp_directory_path() / "modal_audit_cache_test";
    std::filesystem::create_directories(dir);
    Rng r(3);
    const auto c = gen::cache(r);
    const auto a = (dir / "a.mcac").string(), b = (dir / "b.mcac").string();
    write_cache(c, a);
    write_cache(c, b);
    EXPECT_EQ(read_file_bytes(a), read_file_bytes(b));
    EXPECT_EQ(read_cache(a), c);
    EXPECT_THROW(read_cache((dir / "missing.mcac").string()), IoError);
    std::filesystem::remove_all(dir);
}
