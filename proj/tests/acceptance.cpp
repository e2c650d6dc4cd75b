// Acceptance checks. One PASS/FAIL line per criterion; exit status is the
// number of failures (capped at 1). Tolerances are pinned below.
//
//   acceptance [--workdir DIR] [--skip-e2e]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "generators.hpp"
#include "modal_audit/binary_io.hpp"
#include "modal_audit/decode.hpp"
#include "modal_audit/harness.hpp"
#include "modal_audit/stats.hpp"
#include "oracles.hpp"

using namespace modal_audit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace tol {
constexpr double kWilsonPp = 0.1;
constexpr double kCohensH = 0.002;
constexpr double kDetectableH = 0.003;
constexpr double kSigma = 0.05;
constexpr double kAsymmetry = 0.05;
constexpr double kAuditMean = 0.05;
constexpr double kFixedToBest = 0.01;
constexpr double kMcNemar = 1e-4;
constexpr double kDoseNormRel = 1e-5;
constexpr double kGradRel = 1e-3;
constexpr double kGoldenSeconds = 1.0;
constexpr double kOracleSeconds = 30.0;
constexpr double kEndToEndSeconds = 15 * 60.0;
constexpr double kNullBandPp = 1.5;
constexpr double kDoseDropPp = 2.0;
constexpr double kTextOverVisual = 2.0;
constexpr double kSignificance = 0.05;
}  // namespace tol

namespace {

int failures = 0;

void line(bool ok, const std::string& name, const std::string& detail) {
    std::printf("%s  %-58s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
    char b[128];
    std::snprintf(b, sizeof b, f, a);
    return b;
}

std::string fmt(const char* f, double a, double b2) {
    char b[160];
    std::snprintf(b, sizeof b, f, a, b2);
    return b;
}

bool near(double got, double want, double t) { return std::abs(got - want) <= t + 1e-12; }

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------------------

void golden() {
    std::puts("== golden statistics");
    const auto t0 = Clock::now();

    const auto w1 = stats::to_percent(stats::wilson_ci(63, 132));
    const auto w2 = stats::to_percent(stats::wilson_ci(115, 135));
    line(near(w1.low, 39.4, tol::kWilsonPp) && near(w1.high, 56.2, tol::kWilsonPp) &&
             near(w2.low, 78.2, tol::kWilsonPp) && near(w2.high, 90.2, tol::kWilsonPp),
         "wilson_ci 63/132 and 115/135",
         fmt("[%.2f, %.2f]", w1.low, w1.high) + fmt(" [%.2f, %.2f]", w2.low, w2.high) + " tol 0.1 pp");

    const double h1 = stats::cohens_h(0.763, 0.852), h2 = stats::cohens_h(0.477, 0.553),
                 h3 = stats::cohens_h(0.556, 0.624);
    line(near(h1, 0.227, tol::kCohensH) && near(h2, 0.152, tol::kCohensH) && near(h3, 0.139, tol::kCohensH),
         "cohens_h 0.227 / 0.152 / 0.139",
         fmt("%.4f", h1) + fmt(" %.4f", h2) + fmt(" %.4f", h3) + " tol 0.002");

    const std::uint64_t n1 = stats::power_n(0.2), n2 = stats::power_n(0.3), n3 = stats::power_n(0.5),
                        n4 = stats::power_n(0.8);
    line(n1 == 197 && n2 == 88 && n3 == 32 && n4 == 13, "power_n h=0.2/0.3/0.5/0.8 -> 197/88/32/13",
         std::to_string(n1) + " " + std::to_string(n2) + " " + std::to_string(n3) + " " + std::to_string(n4) +
             " exact");

    const double dh = stats::detectable_h(130);
    line(near(dh, 0.246, tol::kDetectableH), "detectable_h(130) = 0.246", fmt("%.4f tol 0.003", dh));

    const std::vector<double> row{11.4, 10.6, 13.6, 10.6, 12.1};
    const double sigma = stats::sample_std(row);
    line(near(sigma, 1.3, tol::kSigma), "sample std of variance row = 1.3 (ddof 1)", fmt("%.4f tol 0.05", sigma));

    const auto ratio = harness::asymmetry_ratio(25.9, 6.5);
    line(ratio.defined && near(ratio.value, 4.0, tol::kAsymmetry), "asymmetry_ratio(25.9, 6.5) = 4.0",
         fmt("%.4f tol 0.05", ratio.value));

    // The six per-task deltas as printed; the printed mean is +5.6.
    const double deltas[] = {11.4, 10.4, 6.8, 2.5, 1.6, 0.0};
    std::vector<harness::TaskCurve> curves;
    for (int i = 0; i < 6; ++i) {
        harness::DeltaStats s;
        s.n = 100;
        s.delta_pp = deltas[i];
        curves.push_back({"task" + std::to_string(i), "g", {{0.5, s}}});
    }
    const auto audit = harness::compute_audit(curves);
    line(near(audit.audit_score, 5.6, tol::kAuditMean), "compute_audit mean of per-task deltas = +5.6",
         fmt("%.4f tol 0.05 (printed deltas sum to %.1f)", audit.audit_score, audit.audit_score * 6));

    harness::DeltaStats fixed, best;
    fixed.n = best.n = 100;
    fixed.delta_pp = 3.3;
    best.delta_pp = 5.6;
    const auto fb = harness::compute_audit(std::vector<harness::TaskCurve>{{"t", "g", {{0.4, fixed}, {0.7, best}}}});
    line(fb.fixed_to_best.defined && near(fb.fixed_to_best.value, 0.59, tol::kFixedToBest),
         "fixed/best ratio 3.3/5.6 = 0.59", fmt("%.4f tol 0.01", fb.fixed_to_best.value));

    const double secs = seconds_since(t0);
    line(secs < tol::kGoldenSeconds, "golden statistics runtime < 1 s", fmt("%.3f s", secs));
}

// ---------------------------------------------------------------------------

void oracles() {
    std::puts("== exact and oracle properties");
    const auto t0 = Clock::now();
    Rng r(20240501);

    // K-means.
    bool mono = true, assign_ok = true, mean_ok = true;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = gen::between(r, 1, 8), n = gen::between(r, 20, 200);
        const auto K = static_cast<std::uint32_t>(gen::between(r, 1, 10));
        const auto pts = trial % 2 ? gen::blobs(r, n, d, gen::between(r, 1, 6)) : gen::points(r, n, d);
        KMeansTrace tr;
        const auto book = fit_kmeans(pts, K, r.next(), {}, &tr);
        for (std::size_t t = 1; t < tr.inertia.size(); ++t)
            mono = mono && tr.inertia[t] <= tr.inertia[t - 1] * (1 + 1e-12) + 1e-12;
        for (std::size_t i = 0; i < pts.rows; ++i) {
            std::uint32_t brute = 0;
            double bd = squared_distance(pts.row(i), book.centroid(0));
            for (std::uint32_t k = 1; k < K; ++k) {
                const double dk = squared_distance(pts.row(i), book.centroid(k));
                if (dk < bd) bd = dk, brute = k;
            }
            assign_ok = assign_ok && assign_nearest(book, pts.row(i)).index == brute;
        }
        const auto one = fit_kmeans(pts, 1, r.next());
        for (std::size_t j = 0; j < d; ++j) {
            double m = 0;
            for (std::size_t i = 0; i < n; ++i) m += pts.row(i)[j];
            m /= static_cast<double>(n);
            mean_ok = mean_ok && std::abs(one.centroid(0)[j] - m) <= 1e-6 * (1 + std::abs(m));
        }
    }
    line(mono, "k-means Lloyd inertia monotone (100 instances)", "");
    line(assign_ok, "k-means assignments equal exhaustive scan", "");
    line(mean_ok, "k-means K=1 centroid is the mean", "");

    // Interpolation endpoints and contrastive identities.
    bool ends = true, eq = true;
    for (int trial = 0; trial < 200; ++trial) {
        const auto d = static_cast<std::uint32_t>(gen::between(r, 1, 16));
        const auto book = gen::book(r, static_cast<std::uint32_t>(gen::between(r, 1, 8)), d);
        std::vector<float> x(d);
        for (auto& v : x) v = gen::gauss(r, 3.0);
        ends = ends && bit_equal(interpolate_to_centroid(x, book, 1.0), x) &&
               bit_equal(interpolate_to_centroid(x, book, 0.0), book.centroid(assign_nearest(book, x).index));
        std::vector<double> o(4), e(4);
        for (auto& v : o) v = 3 * r.normal();
        for (auto& v : e) v = 3 * r.normal();
        const auto c0 = contrastive_combine(o, e, 0.0), c1 = contrastive_combine(o, e, 1.0),
                   cm = contrastive_combine(o, e, -1.0);
        for (int i = 0; i < 4; ++i)
            eq = eq && c0[i] == o[i] &&
                 std::abs(c1[i] - (2 * o[i] - e[i])) <= 1e-12 * (1 + std::abs(o[i]) + std::abs(e[i])) &&
                 std::abs(cm[i] - e[i]) <= 1e-12 * (1 + std::abs(e[i]));
    }
    line(ends, "interpolation endpoints bit-exact (alpha 1 and 0)", "");
    line(eq, "contrastive combine identities at alpha_cd 0, 1, -1", "");

    // NONE intervention through the toy model gives exactly zero delta.
    {
        toy::ToyConfig c;
        c.d = 16;
        c.n_layers = 2;
        c.d_ff = 32;
        c.d_visual = toy::TaskSpec{}.d_visual;
        const auto model = toy::init_model(c, 9);
        const auto cache = toy::export_cache(model, toy::generate(toy::TaskSpec{}, 3, 100, 0.25, "null"), 0);
        InterventionSpec spec;
        spec.kind = InterventionKind::None;
        const auto erased = harness::erased_logits(toy::ToyRunner(model), cache, spec, nullptr);
        bool zero = true;
        for (double cd : {-1.0, 0.5, 1.0, 2.0}) {
            const auto s = harness::summarize(harness::pair_outcomes(cache, erased, cd));
            zero = zero && s.delta_pp == 0.0 && s.b + s.c == 0;
        }
        line(zero, "NONE intervention delta exactly 0", "");
    }

    // McNemar.
    double worst = 0.0;
    for (unsigned b = 0; b <= 30; ++b) {
        for (unsigned c = 0; b + c <= 30; ++c) {
            long double tail = 0;
            const unsigned n = b + c;
            for (unsigned i = 0; i <= std::min(b, c); ++i) {
                long double choose = 1;
                for (unsigned k = 1; k <= i; ++k) choose = choose * (n - i + k) / k;
                tail += choose * std::pow(0.5L, n);
            }
            const double want = n == 0 ? 1.0 : std::min(1.0, static_cast<double>(2 * tail));
            worst = std::max(worst, std::abs(stats::mcnemar_exact(b, c) - want));
        }
    }
    line(worst < 1e-12, "McNemar exact equals binomial summation, b+c <= 30", fmt("max diff %.2g", worst));
    const double p = stats::mcnemar_exact(10, 2);
    line(near(p, 0.0386, tol::kMcNemar), "McNemar b=10 c=2 = 0.0386", fmt("%.5f tol 1e-4", p));

    // Format round trips.
    bool caches = true, books = true;
    for (int trial = 0; trial < 100; ++trial) {
        const auto c = gen::cache(r);
        const auto bytes = serialize_cache(c);
        const auto back = deserialize_cache(bytes);
        caches = caches && back == c && serialize_cache(back) == bytes;
        const auto b = gen::book(r, static_cast<std::uint32_t>(gen::between(r, 1, 20)),
                                 static_cast<std::uint32_t>(gen::between(r, 1, 16)));
        const auto bb = serialize_book(b);
        books = books && deserialize_book(bb) == b && serialize_book(deserialize_book(bb)) == bb;
    }
    line(caches, "cache format round-trips bit-exact (100 instances)", "");
    line(books, "book format round-trips bit-exact (100 instances)", "");

    // Dose-matched control displacement norms.
    double worst_rel = 0.0;
    for (double alpha : {0.2, 0.3, 0.4, 0.6}) {
        for (int trial = 0; trial < 25; ++trial) {
            const auto d = static_cast<std::uint32_t>(gen::between(r, 2, 64));
            const auto s = gen::sample(r, d, trial);
            const auto book = gen::book(r, 8, d);
            InterventionSpec spec;
            spec.alpha_interp = alpha;
            spec.control_seed = r.next();
            const auto real = apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book);
            for (auto kind : {InterventionKind::RandomDirection, InterventionKind::MatchedNoise}) {
                spec.kind = kind;
                const auto ctl = apply_intervention(s.hidden, s.tags, s.sample_id, spec, &book);
                for (auto t : build_mask(s, spec)) {
                    const double want = std::sqrt(squared_distance(real.row(t), s.hidden.row(t)));
                    const double got = std::sqrt(squared_distance(ctl.row(t), s.hidden.row(t)));
                    if (want > 1e-3) worst_rel = std::max(worst_rel, std::abs(got - want) / want);
                }
            }
            spec.kind = InterventionKind::Centroid;
        }
    }
    line(worst_rel <= tol::kDoseNormRel, "dose-matched control norms equal erasure norms",
         fmt("max rel %.2g tol 1e-5", worst_rel));

    const double g = oracle::toy_gradient_check(8, 2);
    line(g < tol::kGradRel, "toy gradient vs central differences (d=8, 2 layers)", fmt("max rel %.2g tol 1e-3", g));

    const double secs = seconds_since(t0);
    line(secs < tol::kOracleSeconds, "oracle properties runtime < 30 s", fmt("%.1f s", secs));
}

// ---------------------------------------------------------------------------

const harness::TaskAudit* find_task(const harness::AuditReport& a, const std::string& name) {
    for (const auto& t : a.tasks)
        if (t.task == name) return &t;
    return nullptr;
}

void end_to_end(const fs::path& workdir) {
    std::puts("== end-to-end planted competition");
    fs::remove_all(workdir);
    const auto cfg = harness::default_planted_config();

    const auto t0 = Clock::now();
    const auto run = harness::run_planted(cfg, (workdir / "run_a").string());
    const double secs_a = seconds_since(t0);
    const auto t1 = Clock::now();
    const auto again = harness::run_planted(cfg, (workdir / "run_b").string());
    const double secs_b = seconds_since(t1);

    const auto& rep = run.report;
    if (!rep.audit) {
        line(false, "planted run produced an audit", "");
        return;
    }
    const std::string competes = toy::to_string(toy::TaskFamily::Competes);
    const std::string needed = toy::to_string(toy::TaskFamily::Needed);

    // Text versus visual replacement cost at alpha 0.
    const harness::ModalityCost* cost = nullptr;
    for (const auto& c : rep.audit->costs)
        if (c.task == competes) cost = &c;
    if (cost) {
        line(cost->text_cost > 0 && cost->vis_cost > 0 && cost->text_cost >= tol::kTextOverVisual * cost->vis_cost,
             "text cost >= 2x visual cost, both positive",
             fmt("text %+.1f pp, visual %+.1f pp", cost->text_cost, cost->vis_cost));
    } else {
        line(false, "text cost >= 2x visual cost, both positive", "no cost row");
    }

    // Best alpha over 0.2..0.8 at alpha_cd 1.
    const harness::AlphaSweep* sweep = nullptr;
    for (const auto& s : rep.alpha_sweeps)
        if (s.task == competes) sweep = &s;
    double best_delta = -1e9, best_alpha = 0, best_p = 1;
    if (sweep) {
        const auto j = static_cast<std::size_t>(
            std::find(sweep->alpha_cd.begin(), sweep->alpha_cd.end(), 1.0) - sweep->alpha_cd.begin());
        for (std::size_t i = 0; i < sweep->alpha_interp.size() && j < sweep->alpha_cd.size(); ++i) {
            const double a = sweep->alpha_interp[i];
            if (a < 0.2 - 1e-9 || a > 0.8 + 1e-9) continue;
            const auto& cell = sweep->cells[i][j];
            if (cell.delta_pp > best_delta) best_delta = cell.delta_pp, best_alpha = a, best_p = cell.p_value;
        }
    }
    line(best_delta > 0 && best_p < tol::kSignificance, "text-centroid CD improves COMPETES, McNemar p < 0.05",
         fmt("%+.1f pp", best_delta) + fmt(" at alpha %.1f, p=%.2g", best_alpha, best_p));

    // Dose response.
    const harness::DoseCurve* dose = nullptr;
    for (const auto& d : rep.dose)
        if (d.task == competes) dose = &d;
    if (dose && !dose->points.empty()) {
        bool monotone = true;
        double acc_m1 = -1, acc_0 = -1;
        std::string accs;
        for (std::size_t i = 0; i < dose->points.size(); ++i) {
            const auto& p = dose->points[i];
            if (i > 0) monotone = monotone && p.stats.cd_acc >= dose->points[i - 1].stats.cd_acc;
            if (p.alpha_cd == -1.0) acc_m1 = p.stats.cd_acc;
            if (p.alpha_cd == 0.0) acc_0 = p.stats.cd_acc;
            accs += fmt(i ? " %.1f" : "%.1f", 100 * p.stats.cd_acc);
        }
        line(monotone, "dose response: accuracy non-decreasing in alpha_cd", "acc " + accs);
        line(acc_m1 >= 0 && acc_0 >= 0 && 100 * (acc_0 - acc_m1) >= tol::kDoseDropPp,
             "dose response: acc(-1) below acc(0) by >= 2 pp", fmt("%.1f pp", 100 * (acc_0 - acc_m1)));
    } else {
        line(false, "dose response: accuracy non-decreasing in alpha_cd", "no dose curve");
        line(false, "dose response: acc(-1) below acc(0) by >= 2 pp", "no dose curve");
    }

    // Controls at the dose-matched alpha.
    auto control = [&](InterventionKind k) -> const harness::ControlRow* {
        for (const auto& c : rep.controls)
            if (c.task == competes && c.kind == to_string(k)) return &c;
        return nullptr;
    };
    const auto* mn = control(InterventionKind::MatchedNoise);
    const auto* sc = control(InterventionKind::ShuffledCentroid);
    const auto* rd = control(InterventionKind::RandomDirection);
    line(mn && std::abs(mn->stats.delta_pp) <= tol::kNullBandPp, "matched-noise delta within 1.5 pp of zero",
         mn ? fmt("%+.1f pp at alpha %.1f", mn->stats.delta_pp, mn->alpha_interp) : "missing");
    line(sc && std::abs(sc->stats.delta_pp) <= tol::kNullBandPp, "shuffled-centroid delta within 1.5 pp of zero",
         sc ? fmt("%+.1f pp at alpha %.1f", sc->stats.delta_pp, sc->alpha_interp) : "missing");
    line(rd && rd->stats.delta_pp <= 0.0, "random-direction delta <= 0",
         rd ? fmt("%+.1f pp at alpha %.1f", rd->stats.delta_pp, rd->alpha_interp) : "missing");

    const auto* tc = find_task(*rep.audit, competes);
    const auto* tn = find_task(*rep.audit, needed);
    line(tc && tn && tn->best_delta <= tc->best_delta, "NEEDED CD delta <= COMPETES CD delta",
         tc && tn ? fmt("needed %+.1f pp, competes %+.1f pp", tn->best_delta, tc->best_delta) : "missing");

    bool same = run.report_files.size() == again.report_files.size() && !run.report_files.empty();
    for (std::size_t i = 0; same && i < run.report_files.size(); ++i)
        same = read_file_bytes(run.report_files[i]) == read_file_bytes(again.report_files[i]);
    line(same, "two executions give byte-identical report files",
         std::to_string(run.report_files.size()) + " files compared");

    line(secs_a < tol::kEndToEndSeconds, "end-to-end runtime < 15 min",
         fmt("%.0f s (second run %.0f s)", secs_a, secs_b));
}

}  // namespace

int main(int argc, char** argv) {
    fs::path workdir = fs::temp_directory_path() / "modal_audit_acceptance";
    bool e2e = true;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--skip-e2e") e2e = false;
        else if (a == "--workdir" && i + 1 < argc) workdir = argv[++i];
        else {
            std::fprintf(stderr, "usage: %s [--workdir DIR] [--skip-e2e]\n", argv[0]);
            return 2;
        }
    }
    try {
        golden();
        oracles();
        if (e2e) end_to_end(workdir);
    } catch (const std::exception& e) {
        line(false, "acceptance run completed", e.what());
    }
    std::printf("%d failing\n", failures);
    return failures == 0 ? 0 : 1;
}
