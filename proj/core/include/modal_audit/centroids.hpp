#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modal_audit/cache.hpp"
#include "modal_audit/matrix.hpp"

namespace modal_audit {

enum class FilterVariant : std::uint8_t { Baseline = 0, NoDead = 1, NoSink = 2, NoEither = 3 };

const char* to_string(FilterVariant f);
FilterVariant parse_filter_variant(std::string_view s);

// Fractions dropped by each variant: bottom 5% norms count as dead, top 1% as sinks.
struct FilterFractions {
    double bottom = 0.0;
    double top = 0.0;
};
FilterFractions fractions_for(FilterVariant f);

struct CentroidBook {
    std::uint32_t K = 0;
    std::uint32_t d = 0;
    std::uint32_t layer = 0;
    Modality modality = Modality::Text;
    FilterVariant filter = FilterVariant::Baseline;
    std::uint64_t data_seed = 0;
    std::uint64_t kmeans_seed = 0;
    double inertia = 0.0;
    std::uint64_t fit_token_count = 0;
    FloatMatrix centroids;  // K x d

    std::span<const float> centroid(std::size_t k) const { return centroids.row(k); }
    bool operator==(const CentroidBook&) const = default;
};

struct NormFilterReport {
    std::uint64_t kept_count = 0;
    std::uint64_t dropped_low_count = 0;
    std::uint64_t dropped_high_count = 0;
    double low_threshold = 0.0;   // largest dropped low norm (0 when none dropped)
    double high_threshold = 0.0;  // smallest dropped high norm (+inf when none dropped)
};

struct NormFilterResult {
    FloatMatrix kept;               // surviving rows in input order
    std::vector<std::size_t> rows;  // their input indices
    NormFilterReport report;
};

// Drops the floor(bottom * n) lowest-norm and floor(top * n) highest-norm rows.
// Equal norms are ranked by input position.
NormFilterResult filter_by_norm(const FloatMatrix& points, double drop_bottom_frac,
                                double drop_top_frac);

struct KMeansOptions {
    std::uint32_t max_iter = 300;
    double tol = 1e-4;  // on the largest centroid displacement
};

struct KMeansTrace {
    std::vector<double> inertia;  // inertia of each assignment step, in order
    std::uint32_t iterations = 0;
    bool converged = false;
};

// k-means++ seeding then Lloyd iterations. Empty clusters are reseeded to the
// point farthest from its assigned centroid. The returned book has modality,
// layer, filter and data_seed left at defaults for the caller to fill.
CentroidBook fit_kmeans(const FloatMatrix& points, std::uint32_t K, std::uint64_t kmeans_seed,
                        const KMeansOptions& options = {}, KMeansTrace* trace = nullptr);

struct Assignment {
    std::uint32_t index = 0;
    double squared_distance = 0.0;
};

Assignment assign_nearest(const CentroidBook& book, std::span<const float> point);

// mu_k + alpha * (x - mu_k); alpha = 1 returns x and alpha = 0 returns mu_k exactly.
std::vector<float> interpolate_to_centroid(std::span<const float> point, const CentroidBook& book,
                                           double alpha_interp);
void interpolate_toward(std::span<const float> point, std::span<const float> centroid,
                        double alpha_interp, std::span<float> out);

double inertia_of(const CentroidBook& book, const FloatMatrix& points);

std::vector<std::uint8_t> serialize_book(const CentroidBook& book);
CentroidBook deserialize_book(std::span<const std::uint8_t> bytes);
void write_book(const CentroidBook& book, const std::string& path);
CentroidBook read_book(const std::string& path);

struct FitRequest {
    Modality modality = Modality::Text;
    std::uint32_t K = 256;
    std::uint64_t kmeans_seed = 42;
    FilterVariant filter = FilterVariant::Baseline;
    KMeansOptions options;
    // Fit on only the first max_points matching tokens, in cache order.
    std::optional<std::size_t> max_points;
};

// Slices the requested modality out of a cache, filters, and fits. The data
// seed is read from the cache provenance field "data_seed" when present.
CentroidBook fit_book_from_cache(const ActivationCache& cache, const FitRequest& request,
                                 NormFilterReport* filter_report = nullptr);

}  // namespace modal_audit
