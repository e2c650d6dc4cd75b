#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace modal_audit::stats {

struct Interval {
    double low = 0.0;
    double high = 0.0;
};

// Standard normal CDF and its inverse. The quantile uses Acklam's rational
// approximation followed by one Halley step, accurate to ~1e-15.
double normal_cdf(double z);
double normal_quantile(double p);

// Wilson score interval for successes/n, as proportions in [0, 1].
Interval wilson_ci(std::uint64_t successes, std::uint64_t n, double confidence = 0.95);
Interval to_percent(Interval i);

struct McNemarTable {
    std::uint64_t b = 0;  // base wrong, intervened right
    std::uint64_t c = 0;  // base right, intervened wrong
    std::uint64_t both_right = 0;
    std::uint64_t both_wrong = 0;

    std::uint64_t n() const { return b + c + both_right + both_wrong; }
};

enum class McNemarVariant {
    Auto,        // exact when b + c < 25, else chi-square with continuity correction
    Exact,
    ChiSquareCC,
};

inline constexpr std::uint64_t kMcNemarExactBelow = 25;

double mcnemar(const McNemarTable& t, McNemarVariant variant = McNemarVariant::Auto);
double mcnemar_exact(std::uint64_t b, std::uint64_t c);
double mcnemar_chi2_cc(std::uint64_t b, std::uint64_t c);

// Builds the discordance table from paired correctness flags.
McNemarTable paired_table(std::span<const bool> base_correct, std::span<const bool> new_correct);

// 2 * (asin(sqrt(p2)) - asin(sqrt(p1))).
double cohens_h(double p1, double p2);

// Per-group n for a two-sided test at level alpha with the given power.
std::uint64_t power_n(double h, double power = 0.80, double alpha = 0.05);
double detectable_h(std::uint64_t n, double power = 0.80, double alpha = 0.05);

struct CalibrationPoint {
    double confidence = 0.0;
    bool correct = false;
};

// Expected calibration error with n_bins equal-width bins on [0, 1]. A
// confidence of exactly 1 lands in the last bin.
double ece(std::span<const CalibrationPoint> points, std::size_t n_bins = 10);

struct VarianceDecomposition {
    double sigma_kmeans = 0.0;  // mean over data seeds of the within-row sample std
    double sigma_data = 0.0;    // sample std of the row means
    double sigma_total = 0.0;   // sample std over all cells
};

// grid is row-major: rows = data seeds, cols = k-means seeds. ddof = 1 throughout.
VarianceDecomposition variance_decomposition(std::span<const double> grid, std::size_t rows,
                                             std::size_t cols);

double sample_std(std::span<const double> values);
double mean(std::span<const double> values);

// Percentile bootstrap of the mean. Percentiles use linear interpolation
// between order statistics.
Interval bootstrap_ci(std::span<const double> values, std::size_t resamples, std::uint64_t seed,
                      double confidence = 0.95);

}  // namespace modal_audit::stats
