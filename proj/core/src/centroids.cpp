#include "modal_audit/centroids.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "modal_audit/binary_io.hpp"
#include "modal_audit/errors.hpp"
#include "modal_audit/rng.hpp"

namespace modal_audit {

namespace {

constexpr std::string_view kBookMagic = "MCBK1";

double norm_of(std::span<const float> r) {
    double s = 0.0;
    for (float v : r) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

double sq_dist_mixed(std::span<const float> x, const double* c, std::size_t d) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double t = static_cast<double>(x[j]) - c[j];
        s += t * t;
    }
    return s;
}

std::size_t count_distinct_rows(const FloatMatrix& m, std::size_t stop_at) {
    std::vector<std::size_t> idx(m.rows);
    std::iota(idx.begin(), idx.end(), 0);
    auto less = [&](std::size_t a, std::size_t b) {
        auto ra = m.row(a);
        auto rb = m.row(b);
        return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
    };
    std::sort(idx.begin(), idx.end(), less);
    std::size_t distinct = m.rows ? 1 : 0;
    for (std::size_t i = 1; i < idx.size() && distinct < stop_at; ++i) {
        if (less(idx[i - 1], idx[i])) ++distinct;
    }
    return distinct;
}

}  // namespace

const char* to_string(FilterVariant f) {
    switch (f) {
        case FilterVariant::Baseline: return "baseline";
        case FilterVariant::NoDead: return "no_dead";
        case FilterVariant::NoSink: return "no_sink";
        case FilterVariant::NoEither: return "no_either";
    }
    return "?";
}

FilterVariant parse_filter_variant(std::string_view s) {
    if (s == "baseline") return FilterVariant::Baseline;
    if (s == "no_dead") return FilterVariant::NoDead;
    if (s == "no_sink") return FilterVariant::NoSink;
    if (s == "no_either") return FilterVariant::NoEither;
    throw ValidationError("unknown filter variant: " + std::string(s));
}

FilterFractions fractions_for(FilterVariant f) {
    switch (f) {
        case FilterVariant::Baseline: return {0.0, 0.0};
        case FilterVariant::NoDead: return {0.05, 0.0};
        case FilterVariant::NoSink: return {0.0, 0.01};
        case FilterVariant::NoEither: return {0.05, 0.01};
    }
    return {};
}

NormFilterResult filter_by_norm(const FloatMatrix& points, double drop_bottom_frac,
                                double drop_top_frac) {
    if (!(drop_bottom_frac >= 0.0) || !(drop_top_frac >= 0.0) ||
        !(drop_bottom_frac + drop_top_frac < 1.0)) {
        throw DomainError("filter_by_norm: fractions must be >= 0 and sum to < 1");
    }
    NormFilterResult out;
    out.kept.cols = points.cols;
    out.report.high_threshold = std::numeric_limits<double>::infinity();
    const std::size_t n = points.rows;
    if (n == 0) return out;

    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) norms[i] = norm_of(points.row(i));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] < norms[b]; });

    const auto n_low = static_cast<std::size_t>(std::floor(drop_bottom_frac * static_cast<double>(n)));
    const auto n_high = static_cast<std::size_t>(std::floor(drop_top_frac * static_cast<double>(n)));
    std::vector<char> keep(n, 1);
    for (std::size_t r = 0; r < n_low; ++r) keep[order[r]] = 0;
    for (std::size_t r = n - n_high; r < n; ++r) keep[order[r]] = 0;

    out.report.dropped_low_count = n_low;
    out.report.dropped_high_count = n_high;
    out.report.kept_count = n - n_low - n_high;
    if (n_low > 0) out.report.low_threshold = norms[order[n_low - 1]];
    if (n_high > 0) out.report.high_threshold = norms[order[n - n_high]];

    for (std::size_t i = 0; i < n; ++i) {
        if (!keep[i]) continue;
        out.kept.append_row(points.row(i));
        out.rows.push_back(i);
    }
    return out;
}

CentroidBook fit_kmeans(const FloatMatrix& points, std::uint32_t K, std::uint64_t kmeans_seed,
                        const KMeansOptions& options, KMeansTrace* trace) {
    const std::size_t n = points.rows;
    const std::size_t d = points.cols;
    if (K == 0) throw DegenerateFitError("fit_kmeans: K must be >= 1");
    if (d == 0) throw ValidationError("fit_kmeans: zero-width points");
    for (float v : points.data) {
        if (!std::isfinite(v)) throw ValidationError("fit_kmeans: non-finite input");
    }
    if (n < K) {
        throw DegenerateFitError("fit_kmeans: " + std::to_string(n) + " points for K=" +
                                 std::to_string(K));
    }
    if (count_distinct_rows(points, K) < K) {
        throw DegenerateFitError("fit_kmeans: fewer distinct points than K=" + std::to_string(K));
    }

    std::vector<double> C(static_cast<std::size_t>(K) * d);
    auto set_centroid = [&](std::size_t k, std::span<const float> x) {
        for (std::size_t j = 0; j < d; ++j) C[k * d + j] = x[j];
    };

    // k-means++ seeding.
    Rng rng = Rng::keyed({kmeans_seed, 0x4B4D2B2BULL});
    set_centroid(0, points.row(rng.below(n)));
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist_mixed(points.row(i), &C[0], d);
    for (std::size_t k = 1; k < K; ++k) {
        double total = 0.0;
        for (double v : d2) total += v;
        if (!(total > 0.0)) throw DegenerateFitError("fit_kmeans: seeding ran out of distinct points");
        const double target = rng.uniform() * total;
        std::size_t pick = n;
        double acc = 0.0;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (d2[i] > 0.0) last_positive = i;
            acc += d2[i];
            if (acc > target && d2[i] > 0.0) {
                pick = i;
                break;
            }
        }
        if (pick == n) pick = last_positive;
        set_centroid(k, points.row(pick));
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sq_dist_mixed(points.row(i), &C[k * d], d));
        }
    }

    std::vector<std::uint32_t> assign(n, 0);
    std::vector<double> dist(n, 0.0);
    std::vector<std::size_t> counts(K);
    std::vector<double> sums(static_cast<std::size_t>(K) * d);

    auto assign_all = [&]() {
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            auto x = points.row(i);
            std::uint32_t best = 0;
            double best_d = sq_dist_mixed(x, &C[0], d);
            for (std::uint32_t k = 1; k < K; ++k) {
                double dk = sq_dist_mixed(x, &C[static_cast<std::size_t>(k) * d], d);
                if (dk < best_d) {
                    best_d = dk;
                    best = k;
                }
            }
            assign[i] = best;
            dist[i] = best_d;
            inertia += best_d;
        }
        return inertia;
    };

    auto reseed_empty = [&]() {
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) ++counts[assign[i]];
        std::vector<std::uint32_t> empty;
        for (std::uint32_t k = 0; k < K; ++k) {
            if (counts[k] == 0) empty.push_back(k);
        }
        if (empty.empty()) return;
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
        std::size_t next = 0;
        for (std::size_t e = 0; e < empty.size(); ++e) {
            while (next < n && !(dist[order[next]] > 0.0)) ++next;
            if (next == n) throw DegenerateFitError("fit_kmeans: cannot reseed empty cluster");
            const std::size_t p = order[next++];
            const std::uint32_t k = empty[e];
            if (--counts[assign[p]] == 0) empty.push_back(assign[p]);
            set_centroid(k, points.row(p));
            assign[p] = k;
            dist[p] = 0.0;
            ++counts[k];
        }
    };

    KMeansTrace local;
    KMeansTrace& tr = trace ? *trace : local;
    tr = KMeansTrace{};

    for (std::uint32_t it = 0; it < options.max_iter; ++it) {
        tr.inertia.push_back(assign_all());
        reseed_empty();
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = assign[i];
            auto x = points.row(i);
            for (std::size_t j = 0; j < d; ++j) sums[k * d + j] += x[j];
            ++counts[k];
        }
        double max_shift = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            double shift = 0.0;
            const double inv = 1.0 / static_cast<double>(counts[k]);
            for (std::size_t j = 0; j < d; ++j) {
                const double nv = sums[k * d + j] * inv;
                const double t = nv - C[k * d + j];
                shift += t * t;
                C[k * d + j] = nv;
            }
            max_shift = std::max(max_shift, std::sqrt(shift));
        }
        tr.iterations = it + 1;
        if (max_shift < options.tol) {
            tr.converged = true;
            break;
        }
    }
    tr.inertia.push_back(assign_all());

    CentroidBook book;
    book.K = K;
    book.d = static_cast<std::uint32_t>(d);
    book.kmeans_seed = kmeans_seed;
    book.fit_token_count = n;
    book.centroids = FloatMatrix(K, d);
    for (std::size_t i = 0; i < C.size(); ++i) book.centroids.data[i] = static_cast<float>(C[i]);
    book.inertia = inertia_of(book, points);
    return book;
}

Assignment assign_nearest(const CentroidBook& book, std::span<const float> point) {
    if (point.size() != book.d) {
        throw ValidationError("assign_nearest: point has dimension " + std::to_string(point.size()) +
                              ", book has " + std::to_string(book.d));
    }
    if (book.K == 0) throw ValidationError("assign_nearest: empty book");
    Assignment best{0, squared_distance(point, book.centroid(0))};
    for (std::uint32_t k = 1; k < book.K; ++k) {
        const double dk = squared_distance(point, book.centroid(k));
        if (dk < best.squared_distance) best = {k, dk};
    }
    return best;
}

void interpolate_toward(std::span<const float> point, std::span<const float> centroid,
                        double alpha_interp, std::span<float> out) {
    for (std::size_t j = 0; j < point.size(); ++j) {
        out[j] = static_cast<float>(
            std::lerp(static_cast<double>(centroid[j]), static_cast<double>(point[j]), alpha_interp));
    }
}

std::vector<float> interpolate_to_centroid(std::span<const float> point, const CentroidBook& book,
                                           double alpha_interp) {
    if (!(alpha_interp >= 0.0 && alpha_interp <= 1.0)) {
        throw ValidationError("alpha_interp must be in [0, 1]");
    }
    const Assignment a = assign_nearest(book, point);
    std::vector<float> out(point.size());
    interpolate_toward(point, book.centroid(a.index), alpha_interp, out);
    return out;
}

double inertia_of(const CentroidBook& book, const FloatMatrix& points) {
    if (points.rows > 0 && points.cols != book.d) {
        throw ValidationError("inertia_of: dimension mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < points.rows; ++i) s += assign_nearest(book, points.row(i)).squared_distance;
    return s;
}

std::vector<std::uint8_t> serialize_book(const CentroidBook& book) {
    if (book.centroids.rows != book.K || book.centroids.cols != book.d) {
        throw FormatError("centroid matrix shape does not match K x d");
    }
    ByteWriter w;
    w.raw(kBookMagic);
    w.u32(book.K);
    w.u32(book.d);
    w.u32(book.layer);
    w.u8(static_cast<std::uint8_t>(book.modality));
    w.u8(static_cast<std::uint8_t>(book.filter));
    w.u64(book.data_seed);
    w.u64(book.kmeans_seed);
    w.f64(book.inertia);
    w.u64(book.fit_token_count);
    w.f32s(book.centroids.data);
    return w.take();
}

CentroidBook deserialize_book(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    expect_magic(r, kBookMagic, "centroid book");
    CentroidBook b;
    b.K = r.u32();
    b.d = r.u32();
    b.layer = r.u32();
    const std::uint8_t mod = r.u8();
    const std::uint8_t filt = r.u8();
    if (mod > 1) throw ValidationError("centroid book: bad modality byte");
    if (filt > 3) throw ValidationError("centroid book: bad filter byte");
    b.modality = static_cast<Modality>(mod);
    b.filter = static_cast<FilterVariant>(filt);
    b.data_seed = r.u64();
    b.kmeans_seed = r.u64();
    b.inertia = r.f64();
    b.fit_token_count = r.u64();
    const std::uint64_t n = static_cast<std::uint64_t>(b.K) * b.d;
    if (4 * n > r.remaining()) {
        throw CorruptionError("truncated centroid data", r.offset() + (r.remaining() / 4) * 4);
    }
    b.centroids = FloatMatrix(b.K, b.d);
    r.f32s(b.centroids.data);
    r.expect_end("centroid book");
    if (b.K == 0 || b.d == 0) throw ValidationError("centroid book: K and d must be >= 1");
    if (!(b.inertia >= 0.0)) throw ValidationError("centroid book: negative inertia");
    return b;
}

void write_book(const CentroidBook& book, const std::string& path) {
    write_file_bytes(path, serialize_book(book));
}

CentroidBook read_book(const std::string& path) { return deserialize_book(read_file_bytes(path)); }

CentroidBook fit_book_from_cache(const ActivationCache& cache, const FitRequest& request,
                                 NormFilterReport* filter_report) {
    TokenSelector sel;
    sel.modality = request.modality;
    TokenSlice slice = slice_tokens(cache, sel);
    if (request.max_points && *request.max_points < slice.points.rows) {
        slice.points.rows = *request.max_points;
        slice.points.data.resize(slice.points.rows * slice.points.cols);
    }
    const FilterFractions f = fractions_for(request.filter);
    NormFilterResult filtered = filter_by_norm(slice.points, f.bottom, f.top);
    if (filter_report) *filter_report = filtered.report;
    CentroidBook book = fit_kmeans(filtered.kept, request.K, request.kmeans_seed, request.options);
    book.layer = cache.layer;
    book.modality = request.modality;
    book.filter = request.filter;
    auto meta = nlohmann::json::parse(cache.source, nullptr, false);
    if (meta.is_object() && meta.contains("data_seed") && meta["data_seed"].is_number_unsigned()) {
        book.data_seed = meta["data_seed"].get<std::uint64_t>();
    }
    return book;
}

}  // namespace modal_audit
