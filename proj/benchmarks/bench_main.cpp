#include <benchmark/benchmark.h>

#include "modal_audit/centroids.hpp"
#include "modal_audit/interventions.hpp"
#include "modal_audit/rng.hpp"
#include "modal_audit/toymlm.hpp"

using namespace modal_audit;

namespace {

FloatMatrix random_points(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng r(seed);
    FloatMatrix m(n, d);
    for (auto& v : m.data) v = static_cast<float>(r.normal());
    return m;
}

void BM_FitKMeans(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::uint32_t>(state.range(1));
    const auto pts = random_points(n, 64, 1);
    KMeansOptions opts;
    opts.max_iter = 20;
    for (auto _ : state) benchmark::DoNotOptimize(fit_kmeans(pts, k, 7, opts));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_FitKMeans)->Args({2000, 16})->Args({2000, 64})->Args({8000, 64})->Unit(benchmark::kMillisecond);

void BM_AssignNearest(benchmark::State& state) {
    const auto k = static_cast<std::uint32_t>(state.range(0));
    const auto pts = random_points(1024, 64, 2);
    const auto book = fit_kmeans(random_points(4 * k, 64, 3), k, 1);
    std::size_t i = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(assign_nearest(book, pts.row(i)));
        i = (i + 1) % pts.rows;
    }
}
BENCHMARK(BM_AssignNearest)->Arg(16)->Arg(64)->Arg(256);

void BM_Intervention(benchmark::State& state) {
    const auto kind = static_cast<InterventionKind>(state.range(0));
    const std::size_t tokens = 48;
    const auto hidden = random_points(tokens, 64, 4);
    std::vector<TokenTag> tags(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
        tags[t].modality = t < 8 ? Modality::Visual : Modality::Text;
        tags[t].segment = t < 8 ? Segment::Other : Segment::Options;
    }
    const auto book = fit_kmeans(random_points(512, 64, 5), 64, 1);
    InterventionSpec spec;
    spec.kind = kind;
    spec.alpha_interp = 0.3;
    spec.control_seed = 9;
    for (auto _ : state) benchmark::DoNotOptimize(apply_intervention(hidden, tags, "s0", spec, &book));
    state.SetLabel(to_string(kind));
}
BENCHMARK(BM_Intervention)
    ->Arg(static_cast<int>(InterventionKind::Centroid))
    ->Arg(static_cast<int>(InterventionKind::RandomDirection))
    ->Arg(static_cast<int>(InterventionKind::MatchedNoise))
    ->Arg(static_cast<int>(InterventionKind::ShuffledCentroid));

struct ToyFixture {
    toy::TaskSpec spec;
    toy::ToyModel model;
    toy::ToyDataset data;
    std::vector<std::uint32_t> options;

    ToyFixture() {
        toy::ToyConfig c;
        c.d_visual = spec.d_visual;
        model = toy::init_model(c, 1);
        data = toy::generate(spec, 1, 16, 0.9, "b");
        options = toy::option_token_ids(spec);
    }
};

void BM_ToyForward(benchmark::State& state) {
    const ToyFixture f;
    const toy::ToyRunner runner(f.model);
    std::size_t i = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(runner.forward(toy::make_input(f.data.samples[i], f.options)));
        i = (i + 1) % f.data.samples.size();
    }
}
BENCHMARK(BM_ToyForward)->Unit(benchmark::kMicrosecond);

void BM_ToyReplay(benchmark::State& state) {
    const ToyFixture f;
    const auto layer = static_cast<std::uint32_t>(state.range(0));
    const auto cache = toy::export_cache(f.model, f.data, layer);
    const toy::ToyRunner runner(f.model);
    std::size_t i = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(runner.replay(layer, cache.samples[i].hidden, f.options));
        i = (i + 1) % cache.samples.size();
    }
}
BENCHMARK(BM_ToyReplay)->Arg(0)->Arg(2)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
