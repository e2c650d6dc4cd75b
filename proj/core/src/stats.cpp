#include "modal_audit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "modal_audit/errors.hpp"
#include "modal_audit/rng.hpp"

namespace modal_audit::stats {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw DomainError("normal_quantile: p must be in (0, 1)");

    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                   -2.759285104469687e+02, 1.383577518672690e+02,
                                   -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                   -1.556989798598866e+02, 6.680131188771972e+01,
                                   -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                   -2.400758277161838e+00, -2.549732539343734e+00,
                                   4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                   2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;

    double x;
    if (p < p_low) {
        double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        double q = p - 0.5;
        double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }

    // Halley refinement.
    double e = normal_cdf(x) - p;
    double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
    return x - u / (1.0 + x * u / 2.0);
}

Interval wilson_ci(std::uint64_t successes, std::uint64_t n, double confidence) {
    if (n == 0) throw DomainError("wilson_ci: n must be >= 1");
    if (successes > n) throw DomainError("wilson_ci: successes exceed n");
    if (!(confidence > 0.0 && confidence < 1.0)) {
        throw DomainError("wilson_ci: confidence must be in (0, 1)");
    }
    const double z = normal_quantile(1.0 - (1.0 - confidence) / 2.0);
    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(successes) / nn;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / nn;
    const double centre = (p + z2 / (2.0 * nn)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
    Interval out{centre - half, centre + half};
    // Pin the exact boundaries that rounding would otherwise blur.
    if (successes == 0) out.low = 0.0;
    if (successes == n) out.high = 1.0;
    out.low = std::max(0.0, out.low);
    out.high = std::min(1.0, out.high);
    return out;
}

Interval to_percent(Interval i) { return {100.0 * i.low, 100.0 * i.high}; }

double mcnemar_exact(std::uint64_t b, std::uint64_t c) {
    const std::uint64_t n = b + c;
    if (n == 0) return 1.0;
    const std::uint64_t k = std::min(b, c);
    // 2 * P(X <= k), X ~ Binomial(n, 1/2), summed in log space.
    const double log_half_n = -static_cast<double>(n) * std::numbers::ln2;
    double tail = 0.0;
    for (std::uint64_t i = 0; i <= k; ++i) {
        double log_choose = std::lgamma(static_cast<double>(n) + 1.0) -
                            std::lgamma(static_cast<double>(i) + 1.0) -
                            std::lgamma(static_cast<double>(n - i) + 1.0);
        tail += std::exp(log_choose + log_half_n);
    }
    return std::min(1.0, 2.0 * tail);
}

double mcnemar_chi2_cc(std::uint64_t b, std::uint64_t c) {
    const std::uint64_t n = b + c;
    if (n == 0) return 1.0;
    double diff = std::fabs(static_cast<double>(b) - static_cast<double>(c)) - 1.0;
    diff = std::max(0.0, diff);
    const double stat = diff * diff / static_cast<double>(n);
    // Survival function of chi-square with one degree of freedom.
    return std::erfc(std::sqrt(stat / 2.0));
}

double mcnemar(const McNemarTable& t, McNemarVariant variant) {
    if (t.b + t.c == 0) return 1.0;
    switch (variant) {
        case McNemarVariant::Exact:
            return mcnemar_exact(t.b, t.c);
        case McNemarVariant::ChiSquareCC:
            return mcnemar_chi2_cc(t.b, t.c);
        case McNemarVariant::Auto:
            break;
    }
    return t.b + t.c < kMcNemarExactBelow ? mcnemar_exact(t.b, t.c) : mcnemar_chi2_cc(t.b, t.c);
}

McNemarTable paired_table(std::span<const bool> base_correct, std::span<const bool> new_correct) {
    if (base_correct.size() != new_correct.size()) {
        throw ValidationError("paired_table: length mismatch");
    }
    McNemarTable t;
    for (std::size_t i = 0; i < base_correct.size(); ++i) {
        bool x = base_correct[i];
        bool y = new_correct[i];
        if (x && y) ++t.both_right;
        else if (!x && !y) ++t.both_wrong;
        else if (!x && y) ++t.b;
        else ++t.c;
    }
    return t;
}

double cohens_h(double p1, double p2) {
    auto ok = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!ok(p1) || !ok(p2)) throw DomainError("cohens_h: proportions must be in [0, 1]");
    if (p1 == p2) return 0.0;
    return 2.0 * (std::asin(std::sqrt(p2)) - std::asin(std::sqrt(p1)));
}

namespace {

double z_sum(double power, double alpha) {
    if (!(power > 0.0 && power < 1.0)) throw DomainError("power must be in (0, 1)");
    if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must be in (0, 1)");
    return normal_quantile(1.0 - alpha / 2.0) + normal_quantile(power);
}

}  // namespace

std::uint64_t power_n(double h, double power, double alpha) {
    if (!(h > 0.0) || !std::isfinite(h)) throw DomainError("power_n: h must be positive");
    const double z = z_sum(power, alpha);
    return static_cast<std::uint64_t>(std::ceil(z * z / (h * h)));
}

double detectable_h(std::uint64_t n, double power, double alpha) {
    if (n == 0) throw DomainError("detectable_h: n must be >= 1");
    return z_sum(power, alpha) / std::sqrt(static_cast<double>(n));
}

double ece(std::span<const CalibrationPoint> points, std::size_t n_bins) {
    if (points.empty()) throw DomainError("ece: empty input");
    if (n_bins == 0) throw DomainError("ece: n_bins must be >= 1");
    std::vector<double> conf_sum(n_bins, 0.0);
    std::vector<double> correct_sum(n_bins, 0.0);
    std::vector<std::size_t> count(n_bins, 0);
    for (const auto& p : points) {
        if (!(p.confidence >= 0.0 && p.confidence <= 1.0)) {
            throw DomainError("ece: confidence outside [0, 1]");
        }
        auto bin = static_cast<std::size_t>(p.confidence * static_cast<double>(n_bins));
        bin = std::min(bin, n_bins - 1);
        conf_sum[bin] += p.confidence;
        correct_sum[bin] += p.correct ? 1.0 : 0.0;
        ++count[bin];
    }
    const double n = static_cast<double>(points.size());
    double total = 0.0;
    for (std::size_t b = 0; b < n_bins; ++b) {
        if (count[b] == 0) continue;
        const double m = static_cast<double>(count[b]);
        total += (m / n) * std::fabs(correct_sum[b] / m - conf_sum[b] / m);
    }
    return total;
}

double mean(std::span<const double> values) {
    if (values.empty()) throw DomainError("mean: empty input");
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
}

double sample_std(std::span<const double> values) {
    if (values.size() < 2) throw DomainError("sample_std: need at least two values");
    const double m = mean(values);
    double ss = 0.0;
    for (double v : values) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

VarianceDecomposition variance_decomposition(std::span<const double> grid, std::size_t rows,
                                             std::size_t cols) {
    if (rows < 2 || cols < 2) {
        throw DomainError("variance_decomposition: need at least 2 data seeds and 2 k-means seeds");
    }
    if (grid.size() != rows * cols) throw DomainError("variance_decomposition: grid size mismatch");
    VarianceDecomposition out;
    std::vector<double> row_means(rows);
    double within = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = grid.subspan(r * cols, cols);
        within += sample_std(row);
        row_means[r] = mean(row);
    }
    out.sigma_kmeans = within / static_cast<double>(rows);
    out.sigma_data = sample_std(row_means);
    out.sigma_total = sample_std(grid);
    return out;
}

namespace {

// Linear interpolation between order statistics (the common "type 7" rule).
double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

Interval bootstrap_ci(std::span<const double> values, std::size_t resamples, std::uint64_t seed,
                      double confidence) {
    if (values.empty()) throw DomainError("bootstrap_ci: empty input");
    if (resamples < 100) throw DomainError("bootstrap_ci: need at least 100 resamples");
    if (!(confidence > 0.0 && confidence < 1.0)) {
        throw DomainError("bootstrap_ci: confidence must be in (0, 1)");
    }
    Rng rng = Rng::keyed({seed, 0xB0075ULL});
    const std::size_t n = values.size();
    std::vector<double> means(resamples);
    for (std::size_t r = 0; r < resamples; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += values[rng.below(n)];
        means[r] = s / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    const double tail = (1.0 - confidence) / 2.0;
    return {quantile_sorted(means, tail), quantile_sorted(means, 1.0 - tail)};
}

}  // namespace modal_audit::stats
