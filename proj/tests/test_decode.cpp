#include <gtest/gtest.h>

#include <cmath>

#include "generators.hpp"
#include "modal_audit/decode.hpp"
#include "modal_audit/errors.hpp"

using namespace modal_audit;

namespace {

std::vector<double> logits(Rng& r, std::size_t n, double scale = 3.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * r.normal();
    return v;
}

}  // namespace

TEST(Combine, IdentitiesAtSpecialAlphas) {
    Rng r(1);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = gen::between(r, 2, 8);
        const auto o = logits(r, n), e = logits(r, n);
        const auto c0 = contrastive_combine(o, e, 0.0);
        const auto c1 = contrastive_combine(o, e, 1.0);
        const auto cm = contrastive_combine(o, e, -1.0);
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_EQ(c0[i], o[i]);
            EXPECT_EQ(c1[i], o[i] + (o[i] - e[i]));
            EXPECT_EQ(cm[i], o[i] - (o[i] - e[i]));
            EXPECT_NEAR(cm[i], e[i], 1e-12 * (1 + std::abs(e[i])));
        }
    }
}

TEST(Combine, AffineInAlphaAndFixedWhenErasedEqualsOrig) {
    Rng r(2);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = gen::between(r, 2, 6);
        const auto o = logits(r, n), e = logits(r, n);
        const double a = 4 * r.uniform() - 2, b = 4 * r.uniform() - 2;
        const auto ca = contrastive_combine(o, e, a), cb = contrastive_combine(o, e, b);
        const auto cmid = contrastive_combine(o, e, 0.5 * (a + b));
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(cmid[i], 0.5 * (ca[i] + cb[i]), 1e-9);
        const auto same = contrastive_combine(o, o, a);
        for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(same[i], o[i]);
    }
    const std::vector<double> x{1, 2}, y{1};
    EXPECT_THROW(contrastive_combine(x, y, 1.0), ValidationError);
    const std::vector<double> bad{1, NAN};
    EXPECT_THROW(contrastive_combine(x, bad, 1.0), ValidationError);
}

TEST(Greedy, ShiftInvarianceAndTies) {
    Rng r(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = gen::between(r, 2, 6);
        auto o = logits(r, n), e = logits(r, n);
        const double shift = 10 * r.normal();
        auto os = o, es = e;
        for (auto& v : os) v += shift;
        for (auto& v : es) v -= 2 * shift;
        EXPECT_EQ(greedy_answer(o).index, greedy_answer(os).index);
        EXPECT_NEAR(greedy_answer(o).confidence, greedy_answer(os).confidence, 1e-9);
        // A constant added to the erased logits moves every CD logit equally.
        EXPECT_EQ(greedy_answer(contrastive_combine(o, e, 1.0)).index,
                  greedy_answer(contrastive_combine(o, es, 1.0)).index);
    }
    const std::vector<double> tie{1.0, 3.0, 3.0, 0.0};
    EXPECT_EQ(greedy_answer(tie).index, 1u);
    const std::vector<double> flat{2.0, 2.0, 2.0};
    const auto g = greedy_answer(flat);
    EXPECT_TRUE(g.all_equal);
    EXPECT_EQ(g.index, 0u);
    EXPECT_DOUBLE_EQ(g.confidence, 1.0 / 3.0);
}

TEST(Softmax, SumsToOneAndStable) {
    const std::vector<double> big{1000.0, 1001.0, 999.0};
    const auto p = softmax(big);
    EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-15);
    EXPECT_GT(p[1], p[0]);
}

TEST(Extract, WordBoundariesAndEarliestMatch) {
    const std::vector<std::string> letters{"A", "B", "C", "D"};
    EXPECT_EQ(extract_answer("The answer is B.", letters), 1u);
    EXPECT_EQ(extract_answer("(C) because", letters), 2u);
    EXPECT_EQ(extract_answer("ABBA is not an answer", letters), std::nullopt);
    EXPECT_EQ(extract_answer("Answer: D, not A", letters), 3u);
    const std::vector<std::string> words{"cat", "category", "dog"};
    EXPECT_EQ(extract_answer("category first", words), 1u);
    EXPECT_EQ(extract_answer("a dog and a cat", words), 2u);
    EXPECT_EQ(extract_answer("cats", words), std::nullopt);
}

TEST(MajorityVote, TiesGoToFirstSeen) {
    const std::vector<std::size_t> a{2, 1, 1, 2, 3};
    EXPECT_EQ(majority_vote(a, 4), 2u);
    EXPECT_EQ(majority_vote(a, 3), 1u);
    EXPECT_EQ(majority_vote(a, 1), 2u);
    EXPECT_THROW(majority_vote(a, 6), ValidationError);
}

TEST(SampleOption, ZeroTemperatureIsGreedyAndFrequenciesFollowSoftmax) {
    Rng r(4);
    const std::vector<double> l{0.0, std::log(3.0)};
    EXPECT_EQ(sample_option(l, 0.0, r), 1u);
    int ones = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) ones += sample_option(l, 1.0, r) == 1;
    EXPECT_NEAR(static_cast<double>(ones) / n, 0.75, 0.02);
}

TEST(Outcomes, CsvRoundTrip) {
    Rng r(5);
    std::vector<PairedOutcome> os;
    for (int i = 0; i < 50; ++i) {
        const auto o = logits(r, 4), e = logits(r, 4);
        os.push_back(make_outcome(i == 3 ? "with,comma \"q\"" : gen::ident(r) + std::to_string(i), "task",
                                  r.below(4), o, e, 1.0));
    }
    const auto text = format_outcomes_csv(os);
    EXPECT_EQ(text.substr(0, kOutcomeHeader.size()), kOutcomeHeader);
    EXPECT_EQ(parse_outcomes_csv(text), os);
    EXPECT_THROW(parse_outcomes_csv("a,b\n"), ValidationError);
    EXPECT_THROW(parse_outcomes_csv(std::string(kOutcomeHeader) + "\nx,t,1,2,3,0.5\n"), ValidationError);
}

TEST(Logits, CsvRoundTripAndDecode) {
    Rng r(6);
    auto c = gen::cache(r, 6);
    while (c.samples.empty()) c = gen::cache(r, 6);
    LogitsTable t;
    for (const auto& s : c.samples) {
        t.sample_ids.push_back(s.sample_id);
        t.logits.push_back(logits(r, s.option_token_ids.size()));
    }
    const auto text = format_logits_csv(t);
    EXPECT_EQ(text.substr(0, kLogitsHeader.size()), kLogitsHeader);
    const auto back = parse_logits_csv(text);
    EXPECT_EQ(back.sample_ids, t.sample_ids);
    EXPECT_EQ(back.logits, t.logits);

    const auto outs = decode_cache(c, t, 1.0);
    ASSERT_EQ(outs.size(), c.samples.size());
    for (std::size_t i = 0; i < outs.size(); ++i) {
        const auto& s = c.samples[i];
        std::vector<double> o(s.baseline_option_logits.begin(), s.baseline_option_logits.end());
        EXPECT_EQ(outs[i], make_outcome(s.sample_id, s.task_id, s.gold_option, o, t.logits[i], 1.0));
    }

    // Erased logits equal to the baseline: CD never changes an answer.
    LogitsTable same;
    for (const auto& s : c.samples) {
        same.sample_ids.push_back(s.sample_id);
        same.logits.emplace_back(s.baseline_option_logits.begin(), s.baseline_option_logits.end());
    }
    for (const auto& o : decode_cache(c, same, 1.0)) EXPECT_EQ(o.base_answer, o.cd_answer);

    LogitsTable missing = t;
    missing.sample_ids.pop_back();
    missing.logits.pop_back();
    EXPECT_THROW(decode_cache(c, missing, 1.0), ValidationError);
}

TEST(FormatDouble, RoundTrips) {
    Rng r(7);
    for (int i = 0; i < 1000; ++i) {
        const double v = r.normal() * std::pow(10.0, static_cast<double>(r.below(40)) - 20.0);
        EXPECT_EQ(std::stod(format_double(v)), v);
    }
}
