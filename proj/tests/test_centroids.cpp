#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "generators.hpp"
#include "modal_audit/centroids.hpp"
#include "modal_audit/errors.hpp"

using namespace modal_audit;

namespace {

// Exhaustive nearest-centroid scan, ties to the lowest index.
std::uint32_t brute_nearest(const CentroidBook& b, std::span<const float> x) {
    std::uint32_t best = 0;
    long double best_d = -1;
    for (std::uint32_t k = 0; k < b.K; ++k) {
        long double s = 0;
        for (std::size_t j = 0; j < b.d; ++j) {
            const long double t = static_cast<long double>(x[j]) - b.centroids.row(k)[j];
            s += t * t;
        }
        if (best_d < 0 || s < best_d) best_d = s, best = k;
    }
    return best;
}

}  // namespace

TEST(KMeans, LloydInertiaMonotone) {
    Rng r(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = gen::between(r, 1, 8);
        const std::size_t n = gen::between(r, 20, 200);
        const auto K = static_cast<std::uint32_t>(gen::between(r, 1, 10));
        const auto pts = trial % 2 ? gen::blobs(r, n, d, gen::between(r, 1, 6)) : gen::points(r, n, d);
        KMeansTrace tr;
        const auto book = fit_kmeans(pts, K, r.next(), {}, &tr);
        ASSERT_GE(tr.inertia.size(), 2u);
        for (std::size_t t = 1; t < tr.inertia.size(); ++t)
            EXPECT_LE(tr.inertia[t], tr.inertia[t - 1] * (1 + 1e-12) + 1e-12) << "trial " << trial << " step " << t;
        EXPECT_NEAR(book.inertia, inertia_of(book, pts), 1e-9 * (1 + book.inertia));
    }
}

TEST(KMeans, AssignmentMatchesExhaustiveScan) {
    Rng r(7);
    for (int trial = 0; trial < 100; ++trial) {
        const auto K = static_cast<std::uint32_t>(gen::between(r, 1, 16));
        const auto d = static_cast<std::uint32_t>(gen::between(r, 1, 10));
        auto book = gen::book(r, K, d);
        if (trial % 5 == 0 && K > 1) {
            // Duplicate centroids: ties must go to the lower index.
            auto src = book.centroids.row(0);
            std::copy(src.begin(), src.end(), book.centroids.row(K - 1).begin());
        }
        const auto batch = gen::points(r, 50, d, 2.0);
        for (std::size_t i = 0; i < batch.rows; ++i)
            EXPECT_EQ(assign_nearest(book, batch.row(i)).index, brute_nearest(book, batch.row(i)));
    }
}

TEST(KMeans, SingleClusterIsTheMean) {
    Rng r(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = gen::between(r, 1, 100), d = gen::between(r, 1, 6);
        const auto pts = gen::points(r, n, d, 3.0);
        const auto book = fit_kmeans(pts, 1, r.next());
        for (std::size_t j = 0; j < d; ++j) {
            double m = 0;
            for (std::size_t i = 0; i < n; ++i) m += pts.row(i)[j];
            m /= static_cast<double>(n);
            EXPECT_NEAR(book.centroids.row(0)[j], m, 1e-6 * (1 + std::abs(m)));
        }
    }
}

TEST(KMeans, DeterministicForSeed) {
    Rng r(10);
    const auto pts = gen::blobs(r, 300, 5, 4);
    const auto a = fit_kmeans(pts, 6, 99);
    const auto b = fit_kmeans(pts, 6, 99);
    EXPECT_EQ(a, b);
    EXPECT_TRUE(bit_equal(a.centroids, b.centroids));
}

TEST(KMeans, RecoversSeparatedBlobs) {
    Rng r(12);
    FloatMatrix pts(0, 2);
    pts.cols = 2;
    const float centres[3][2] = {{-10, 0}, {10, 0}, {0, 10}};
    for (int i = 0; i < 300; ++i) {
        const auto& c = centres[i % 3];
        const float row[2] = {c[0] + gen::gauss(r, 0.1), c[1] + gen::gauss(r, 0.1)};
        pts.append_row(row);
    }
    const auto book = fit_kmeans(pts, 3, 1);
    for (const auto& c : centres) {
        const auto a = assign_nearest(book, c);
        EXPECT_LT(a.squared_distance, 0.01);
    }
}

TEST(KMeans, DegenerateInputs) {
    FloatMatrix two(2, 3);
    EXPECT_THROW(fit_kmeans(two, 3, 0), DegenerateFitError);
    EXPECT_THROW(fit_kmeans(two, 2, 0), DegenerateFitError);  // identical rows
    EXPECT_THROW(fit_kmeans(two, 0, 0), DegenerateFitError);
    two.data[0] = std::numeric_limits<float>::infinity();
    EXPECT_THROW(fit_kmeans(two, 1, 0), ValidationError);
}

TEST(KMeans, EmptyClustersReseeded) {
    // Many duplicates of one point and a few outliers; K close to the distinct count.
    FloatMatrix pts(0, 1);
    pts.cols = 1;
    for (int i = 0; i < 50; ++i) {
        const float v = 0.0f;
        pts.append_row(std::span<const float>(&v, 1));
    }
    for (float v : {1.0f, 2.0f, 3.0f, 100.0f}) pts.append_row(std::span<const float>(&v, 1));
    const auto book = fit_kmeans(pts, 5, 3);
    std::vector<float> cs(book.centroids.data);
    std::sort(cs.begin(), cs.end());
    EXPECT_EQ(cs, (std::vector<float>{0, 1, 2, 3, 100}));
}

TEST(Interpolation, EndpointsBitExact) {
    Rng r(31);
    for (int trial = 0; trial < 200; ++trial) {
        const auto d = static_cast<std::uint32_t>(gen::between(r, 1, 16));
        const auto book = gen::book(r, static_cast<std::uint32_t>(gen::between(r, 1, 8)), d);
        std::vector<float> x(d);
        for (auto& v : x) v = gen::gauss(r, std::pow(10.0, static_cast<double>(r.below(7)) - 3.0));
        EXPECT_TRUE(bit_equal(interpolate_to_centroid(x, book, 1.0), x));
        const auto a = assign_nearest(book, x);
        EXPECT_TRUE(bit_equal(interpolate_to_centroid(x, book, 0.0), book.centroid(a.index)));
    }
    const auto book = gen::book(r, 2, 3);
    const std::vector<float> x{1, 2, 3};
    EXPECT_THROW(interpolate_to_centroid(x, book, 1.5), ValidationError);
    EXPECT_THROW(interpolate_to_centroid(x, book, -0.1), ValidationError);
}

TEST(Interpolation, MidpointIsAffine) {
    CentroidBook b;
    b.K = 1;
    b.d = 2;
    b.centroids = FloatMatrix(1, 2);
    b.centroids.data = {0.0f, 4.0f};
    const std::vector<float> x{2.0f, 0.0f};
    EXPECT_EQ(interpolate_to_centroid(x, b, 0.25), (std::vector<float>{0.5f, 3.0f}));
}

TEST(NormFilter, ConservationAndRankWindow) {
    Rng r(17);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = gen::between(r, 0, 300);
        auto pts = gen::points(r, n, gen::between(r, 1, 5));
        if (n > 4 && trial % 3 == 0) {  // equal norms
            auto src = pts.row(0);
            std::copy(src.begin(), src.end(), pts.row(1).begin());
        }
        const auto variant = static_cast<FilterVariant>(r.below(4));
        const auto f = fractions_for(variant);
        const auto res = filter_by_norm(pts, f.bottom, f.top);
        const auto& rep = res.report;
        EXPECT_EQ(rep.kept_count + rep.dropped_low_count + rep.dropped_high_count, n);
        EXPECT_EQ(rep.dropped_low_count, static_cast<std::size_t>(std::floor(f.bottom * n)));
        EXPECT_EQ(rep.dropped_high_count, static_cast<std::size_t>(std::floor(f.top * n)));
        // Independent rank window: stable order by norm, keep ranks [low, n - high).
        std::vector<double> norms(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0;
            for (float v : pts.row(i)) s += static_cast<double>(v) * v;
            norms[i] = std::sqrt(s);
        }
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return norms[a] < norms[b]; });
        std::vector<std::size_t> expect(order.begin() + rep.dropped_low_count, order.end() - rep.dropped_high_count);
        std::sort(expect.begin(), expect.end());
        EXPECT_EQ(res.rows, expect);
        ASSERT_EQ(res.kept.rows, expect.size());
        for (std::size_t k = 0; k < expect.size(); ++k) EXPECT_TRUE(bit_equal(res.kept.row(k), pts.row(expect[k])));
    }
    EXPECT_THROW(filter_by_norm(FloatMatrix(3, 1), 0.6, 0.5), DomainError);
}

TEST(Book, RoundTripRandomInstances) {
    Rng r(55);
    for (int trial = 0; trial < 100; ++trial) {
        const auto b = gen::book(r, static_cast<std::uint32_t>(gen::between(r, 1, 20)),
                                 static_cast<std::uint32_t>(gen::between(r, 1, 16)));
        const auto bytes = serialize_book(b);
        const auto back = deserialize_book(bytes);
        EXPECT_EQ(back, b);
        EXPECT_EQ(serialize_book(back), bytes);
        EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "MCBK1");
        for (std::size_t n = 0; n < bytes.size(); n += 1 + bytes.size() / 40)
            EXPECT_THROW(deserialize_book(std::span<const std::uint8_t>(bytes.data(), n)), Error);
    }
}

TEST(Book, FitFromCacheUsesModalityFilterAndProvenance) {
    Rng r(66);
    ActivationCache c;
    c.d = 3;
    c.layer = 5;
    c.source = R"({"data_seed": 123})";
    for (int i = 0; i < 40; ++i) c.samples.push_back(gen::sample(r, 3, i));
    FitRequest req;
    req.modality = Modality::Text;
    req.K = 4;
    req.filter = FilterVariant::NoEither;
    NormFilterReport rep;
    const auto book = fit_book_from_cache(c, req, &rep);
    const auto text = slice_tokens(c, {Modality::Text, std::nullopt});
    EXPECT_EQ(rep.kept_count + rep.dropped_low_count + rep.dropped_high_count, text.points.rows);
    EXPECT_EQ(book.fit_token_count, rep.kept_count);
    EXPECT_EQ(book.layer, 5u);
    EXPECT_EQ(book.modality, Modality::Text);
    EXPECT_EQ(book.filter, FilterVariant::NoEither);
    EXPECT_EQ(book.data_seed, 123u);

    req.filter = FilterVariant::Baseline;
    req.max_points = 30;
    const auto small = fit_book_from_cache(c, req);
    EXPECT_EQ(small.fit_token_count, 30u);
    FloatMatrix first(0, 3);
    first.cols = 3;
    for (std::size_t i = 0; i < 30; ++i) first.append_row(text.points.row(i));
    EXPECT_EQ(small.centroids, fit_kmeans(first, 4, req.kmeans_seed).centroids);
}
