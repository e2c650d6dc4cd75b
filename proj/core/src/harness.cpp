#include "modal_audit/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "modal_audit/binary_io.hpp"
#include "modal_audit/errors.hpp"
#include "modal_audit/rng.hpp"

namespace modal_audit::harness {

namespace fs = std::filesystem;
using nlohmann::json;

double replacement_cost(double baseline_acc, double erased_acc) {
    for (double p : {baseline_acc, erased_acc})
        if (!(p >= 0.0 && p <= 1.0)) throw DomainError("accuracies must lie in [0, 1]");
    return 100.0 * (baseline_acc - erased_acc);
}

Ratio asymmetry_ratio(double text_cost, double vis_cost) {
    Ratio r;
    const double den = std::abs(vis_cost);
    r.unstable = den < kUnstableDenominatorPp;
    if (den == 0.0) return r;
    r.defined = true;
    r.value = text_cost / den;
    return r;
}

DeltaStats summarize(std::span<const PairedOutcome> outcomes) {
    DeltaStats s;
    s.n = outcomes.size();
    if (outcomes.empty()) return s;
    stats::McNemarTable t;
    std::uint64_t base = 0, cd = 0;
    for (const auto& o : outcomes) {
        const bool br = o.base_correct(), cr = o.cd_correct();
        base += br;
        cd += cr;
        if (br && cr) ++t.both_right;
        else if (!br && !cr) ++t.both_wrong;
        else if (cr) ++t.b;
        else ++t.c;
    }
    const double n = static_cast<double>(s.n);
    s.base_acc = static_cast<double>(base) / n;
    s.cd_acc = static_cast<double>(cd) / n;
    // Difference of counts keeps an unchanged run at exactly zero.
    s.delta_pp = 100.0 * (static_cast<double>(cd) - static_cast<double>(base)) / n;
    s.b = t.b;
    s.c = t.c;
    s.p_value = stats::mcnemar(t);
    return s;
}

std::vector<std::vector<double>> erased_logits(const toy::ToyRunner& runner, const ActivationCache& eval,
                                               const InterventionSpec& spec, const CentroidBook* book) {
    if (spec.layer != eval.layer) throw ValidationError("intervention layer does not match the eval cache");
    if (runner.config().d != eval.d) throw ValidationError("model width does not match the eval cache");
    std::vector<std::vector<double>> out;
    out.reserve(eval.samples.size());
    for (const auto& s : eval.samples) {
        FloatMatrix h = apply_intervention(s.hidden, s.tags, s.sample_id, spec, book);
        auto z = runner.replay(eval.layer, h, s.option_token_ids);
        for (auto& v : z) v = static_cast<double>(static_cast<float>(v));
        out.push_back(std::move(z));
    }
    return out;
}

std::vector<PairedOutcome> pair_outcomes(const ActivationCache& eval,
                                         std::span<const std::vector<double>> erased, double alpha_cd) {
    if (erased.size() != eval.samples.size()) throw ValidationError("one erased logit row per sample");
    std::vector<PairedOutcome> out;
    out.reserve(eval.samples.size());
    for (std::size_t i = 0; i < erased.size(); ++i) {
        const auto& s = eval.samples[i];
        std::vector<double> base(s.baseline_option_logits.begin(), s.baseline_option_logits.end());
        out.push_back(make_outcome(s.sample_id, s.task_id, s.gold_option, base, erased[i], alpha_cd));
    }
    return out;
}

double erased_accuracy(const ActivationCache& eval, std::span<const std::vector<double>> erased) {
    if (erased.size() != eval.samples.size()) throw ValidationError("one erased logit row per sample");
    if (erased.empty()) return 0.0;
    std::size_t right = 0;
    for (std::size_t i = 0; i < erased.size(); ++i)
        right += greedy_answer(erased[i]).index == eval.samples[i].gold_option;
    return static_cast<double>(right) / static_cast<double>(erased.size());
}

LogitsTable replay_patch(const toy::ToyModel& model, const ActivationCache& cache, const PatchSet& patch) {
    if (patch.d != cache.d) throw ValidationError("patch width does not match the cache");
    if (patch.layer != cache.layer) throw ValidationError("patch layer does not match the cache");
    const toy::ToyRunner runner(model);
    if (runner.config().d != cache.d) throw ValidationError("model width does not match the cache");
    std::map<std::string_view, const SamplePatch*> by_id;
    for (const auto& sp : patch.samples) by_id[sp.sample_id] = &sp;
    LogitsTable out;
    for (const auto& s : cache.samples) {
        FloatMatrix h = s.hidden;
        if (auto it = by_id.find(s.sample_id); it != by_id.end()) {
            for (const auto& tp : it->second->patches) {
                if (tp.token_index >= h.rows)
                    throw ValidationError("patch token index out of range in sample '" + s.sample_id + "'");
                if (tp.vector.size() != h.cols)
                    throw ValidationError("patch vector width mismatch in sample '" + s.sample_id + "'");
                std::copy(tp.vector.begin(), tp.vector.end(), h.row(tp.token_index).begin());
            }
            by_id.erase(it);
        }
        auto z = runner.replay(cache.layer, h, s.option_token_ids);
        for (auto& v : z) v = static_cast<double>(static_cast<float>(v));
        out.sample_ids.push_back(s.sample_id);
        out.logits.push_back(std::move(z));
    }
    if (!by_id.empty())
        throw ValidationError("patch names sample '" + std::string(by_id.begin()->first) + "' absent from the cache");
    return out;
}

// ---------------------------------------------------------------------------
// Audit

namespace {

struct Best {
    double alpha = 0.0;
    DeltaStats stats;
};

Best best_point(std::span<const AlphaPoint> points) {
    if (points.empty()) throw ValidationError("empty alpha curve");
    std::vector<AlphaPoint> sorted(points.begin(), points.end());
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const AlphaPoint& a, const AlphaPoint& b) { return a.alpha_interp < b.alpha_interp; });
    Best b{sorted[0].alpha_interp, sorted[0].stats};
    for (const auto& p : sorted)
        if (p.stats.delta_pp > b.stats.delta_pp) b = {p.alpha_interp, p.stats};
    return b;
}

bool same_alpha(double a, double b) { return std::abs(a - b) < 1e-9; }

}  // namespace

AuditReport compute_audit(std::span<const TaskCurve> curves, double fixed_alpha,
                          std::span<const ModalityCost> costs) {
    if (curves.empty()) throw ValidationError("audit needs at least one completed sweep");
    AuditReport r;
    r.fixed_alpha = fixed_alpha;
    r.costs.assign(costs.begin(), costs.end());
    bool all_fixed = true;
    double best_sum = 0.0, fixed_sum = 0.0;
    std::vector<std::string> group_order;
    for (const auto& c : curves) {
        TaskAudit t;
        t.task = c.task;
        t.group = c.group;
        const Best b = best_point(c.points);
        t.best_alpha = b.alpha;
        t.best_delta = b.stats.delta_pp;
        t.best_p = b.stats.p_value;
        t.significant = b.stats.p_value < kSignificance;
        t.baseline_acc = c.points.front().stats.base_acc;
        t.n = c.points.front().stats.n;
        for (const auto& p : c.points) {
            if (same_alpha(p.alpha_interp, fixed_alpha)) {
                t.fixed_delta = p.stats.delta_pp;
                t.fixed_p = p.stats.p_value;
            }
        }
        all_fixed = all_fixed && t.fixed_delta.has_value();
        best_sum += t.best_delta;
        if (t.fixed_delta) fixed_sum += *t.fixed_delta;
        if (std::find(group_order.begin(), group_order.end(), t.group) == group_order.end())
            group_order.push_back(t.group);
        r.tasks.push_back(std::move(t));
    }
    const double n = static_cast<double>(r.tasks.size());
    r.audit_score = best_sum / n;
    if (all_fixed) r.fixed_mean = fixed_sum / n;
    std::sort(group_order.begin(), group_order.end());
    for (const auto& g : group_order) {
        GroupMean gm;
        gm.group = g;
        double bs = 0.0, fsum = 0.0;
        bool gfixed = true;
        for (const auto& t : r.tasks) {
            if (t.group != g) continue;
            ++gm.tasks;
            bs += t.best_delta;
            if (t.fixed_delta) fsum += *t.fixed_delta;
            else gfixed = false;
        }
        gm.best_mean = bs / static_cast<double>(gm.tasks);
        if (gfixed) gm.fixed_mean = fsum / static_cast<double>(gm.tasks);
        r.groups.push_back(gm);
    }
    if (r.fixed_mean && r.audit_score != 0.0) {
        r.fixed_to_best.defined = true;
        r.fixed_to_best.value = *r.fixed_mean / r.audit_score;
    }
    return r;
}

std::vector<TaskCurve> curves_at_cd(std::span<const AlphaSweep> sweeps, double alpha_cd) {
    std::vector<TaskCurve> out;
    for (const auto& s : sweeps) {
        auto it = std::find_if(s.alpha_cd.begin(), s.alpha_cd.end(), [&](double a) { return same_alpha(a, alpha_cd); });
        if (it == s.alpha_cd.end()) throw ConfigError("alpha_cd grid does not contain the headline alpha_cd");
        const auto j = static_cast<std::size_t>(it - s.alpha_cd.begin());
        TaskCurve c{s.task, s.group, {}};
        for (std::size_t i = 0; i < s.alpha_interp.size(); ++i) c.points.push_back({s.alpha_interp[i], s.cells[i][j]});
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Configuration

void SweepConfig::validate() const {
    if (tasks.empty()) throw ConfigError("config lists no tasks");
    std::set<std::string> names;
    for (const auto& t : tasks) {
        if (t.name.empty()) throw ConfigError("task without a name");
        if (!names.insert(t.name).second) throw ConfigError("duplicate task '" + t.name + "'");
        if (t.model.empty()) throw ConfigError("task '" + t.name + "' has no model");
        if (t.caches.empty()) throw ConfigError("task '" + t.name + "' has no caches");
        auto has = [&](std::uint32_t l) {
            return std::any_of(t.caches.begin(), t.caches.end(), [&](const LayerCaches& c) { return c.layer == l; });
        };
        if (!has(layer)) throw ConfigError("task '" + t.name + "' has no cache at the headline layer");
        for (auto l : layers)
            if (!has(l)) throw ConfigError("task '" + t.name + "' has no cache at layer " + std::to_string(l));
    }
    if (alpha_interp.empty()) throw ConfigError("alpha_interp grid is empty");
    if (alpha_cd.empty()) throw ConfigError("alpha_cd grid is empty");
    for (double a : alpha_interp)
        if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("alpha_interp values must lie in [0, 1]");
    for (double a : alpha_cd)
        if (!std::isfinite(a)) throw ConfigError("alpha_cd values must be finite");
    for (double a : dose_alpha_cd)
        if (!std::isfinite(a)) throw ConfigError("dose alpha_cd values must be finite");
    if (std::none_of(alpha_cd.begin(), alpha_cd.end(), [&](double a) { return same_alpha(a, headline_alpha_cd); }))
        throw ConfigError("alpha_cd grid must contain headline_alpha_cd");
    if (book.k < 1) throw ConfigError("book k must be >= 1");
    if (nk_grid && (nk_grid->n.empty() || nk_grid->k.empty())) throw ConfigError("nk grid axes must be non-empty");
    for (auto k : controls)
        if (k == InterventionKind::None || k == InterventionKind::Centroid)
            throw ConfigError("controls must be random_direction, matched_noise or shuffled_centroid");
}

namespace {

template <class T>
std::vector<T> get_list(const json& j, const char* key) {
    if (!j.contains(key)) return {};
    return j.at(key).get<std::vector<T>>();
}

std::string resolve(const std::string& base, const std::string& p) {
    if (base.empty() || p.empty() || fs::path(p).is_absolute()) return p;
    return (fs::path(base) / p).lexically_normal().string();
}

}  // namespace

SweepConfig parse_sweep_config(const json& j, const std::string& base_dir) {
    SweepConfig c;
    try {
        for (const auto& t : j.at("tasks")) {
            TaskEntry e;
            e.name = t.at("name").get<std::string>();
            e.group = t.value("group", e.name);
            e.model = resolve(base_dir, t.at("model").get<std::string>());
            for (const auto& lc : t.at("caches")) {
                e.caches.push_back({lc.at("layer").get<std::uint32_t>(), resolve(base_dir, lc.at("fit").get<std::string>()),
                                    resolve(base_dir, lc.at("eval").get<std::string>())});
            }
            c.tasks.push_back(std::move(e));
        }
        if (j.contains("book")) {
            const auto& b = j.at("book");
            c.book.k = b.value("k", c.book.k);
            c.book.seed = b.value("seed", c.book.seed);
            c.book.filter = parse_filter_variant(b.value("filter", std::string("baseline")));
            c.book.kmeans.max_iter = b.value("max_iter", c.book.kmeans.max_iter);
            c.book.kmeans.tol = b.value("tol", c.book.kmeans.tol);
        }
        c.layer = j.at("layer").get<std::uint32_t>();
        c.segments = parse_segment_selection(j.value("segments", std::string("all")));
        c.alpha_interp = j.at("alpha_interp").get<std::vector<double>>();
        if (j.contains("alpha_cd")) c.alpha_cd = j.at("alpha_cd").get<std::vector<double>>();
        c.headline_alpha_cd = j.value("headline_alpha_cd", 1.0);
        c.fixed_alpha = j.value("fixed_alpha", kFixedAlpha);
        c.dose_alpha_cd = get_list<double>(j, "dose_alpha_cd");
        for (const auto& s : get_list<std::string>(j, "segment_sets")) c.segment_sets.push_back(parse_segment_selection(s));
        c.layers = get_list<std::uint32_t>(j, "layers");
        for (const auto& k : get_list<std::string>(j, "controls")) c.controls.push_back(parse_intervention_kind(k));
        c.control_seed = j.value("control_seed", std::uint64_t{0});
        if (j.contains("nk_grid")) {
            NkGrid g;
            g.n = j.at("nk_grid").at("n").get<std::vector<std::size_t>>();
            g.k = j.at("nk_grid").at("k").get<std::vector<std::uint32_t>>();
            c.nk_grid = g;
        }
        c.costs = j.value("costs", false);
        c.output_dir = resolve(base_dir, j.value("output_dir", std::string()));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("sweep config: ") + e.what());
    } catch (const Error& e) {
        throw ConfigError(std::string("sweep config: ") + e.what());
    }
    c.validate();
    return c;
}

SweepConfig load_sweep_config(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    auto j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) throw ConfigError("sweep config '" + path + "' is not valid JSON");
    return parse_sweep_config(j, fs::path(path).parent_path().string());
}

json sweep_config_to_json(const SweepConfig& c) {
    json j;
    j["tasks"] = json::array();
    for (const auto& t : c.tasks) {
        json caches = json::array();
        for (const auto& lc : t.caches) caches.push_back({{"layer", lc.layer}, {"fit", lc.fit}, {"eval", lc.eval}});
        j["tasks"].push_back({{"name", t.name}, {"group", t.group}, {"model", t.model}, {"caches", caches}});
    }
    j["book"] = {{"k", c.book.k},
                 {"seed", c.book.seed},
                 {"filter", to_string(c.book.filter)},
                 {"max_iter", c.book.kmeans.max_iter},
                 {"tol", c.book.kmeans.tol}};
    j["layer"] = c.layer;
    j["segments"] = c.segments.name();
    j["alpha_interp"] = c.alpha_interp;
    j["alpha_cd"] = c.alpha_cd;
    j["headline_alpha_cd"] = c.headline_alpha_cd;
    j["fixed_alpha"] = c.fixed_alpha;
    j["dose_alpha_cd"] = c.dose_alpha_cd;
    std::vector<std::string> segs;
    for (const auto& s : c.segment_sets) segs.push_back(s.name());
    j["segment_sets"] = segs;
    j["layers"] = c.layers;
    std::vector<std::string> ctl;
    for (auto k : c.controls) ctl.push_back(to_string(k));
    j["controls"] = ctl;
    j["control_seed"] = c.control_seed;
    if (c.nk_grid) j["nk_grid"] = {{"n", c.nk_grid->n}, {"k", c.nk_grid->k}};
    j["costs"] = c.costs;
    j["output_dir"] = c.output_dir;
    return j;
}

void check_disjoint(const ActivationCache& fit, const ActivationCache& eval) {
    auto seed_of = [](const ActivationCache& c) -> std::optional<std::uint64_t> {
        auto m = json::parse(c.source, nullptr, false);
        if (m.is_object() && m.contains("data_seed") && m["data_seed"].is_number_unsigned())
            return m["data_seed"].get<std::uint64_t>();
        return std::nullopt;
    };
    const auto a = seed_of(fit), b = seed_of(eval);
    if (a && b && *a == *b) throw ValidationError("fit and eval caches share data seed " + std::to_string(*a));
    std::set<std::string_view> ids;
    for (const auto& s : fit.samples) ids.insert(s.sample_id);
    for (const auto& s : eval.samples)
        if (ids.count(s.sample_id)) throw ValidationError("fit and eval caches share sample '" + s.sample_id + "'");
}

// ---------------------------------------------------------------------------
// Harness

struct Harness::State {
    struct Task {
        toy::ToyModel model;
        std::unique_ptr<toy::ToyRunner> runner;
        std::map<std::uint32_t, ActivationCache> fit;
        std::map<std::uint32_t, ActivationCache> eval;
    };
    std::vector<Task> tasks;

    using BookKey = std::tuple<std::size_t, std::uint32_t, std::uint8_t, std::uint32_t, std::size_t>;
    std::map<BookKey, CentroidBook> books;

    // task, layer, modality, segments, kind, alpha bits, K, n_fit
    using ErasedKey = std::tuple<std::size_t, std::uint32_t, std::uint8_t, std::string, std::uint8_t,
                                 std::uint64_t, std::uint32_t, std::size_t>;
    std::map<ErasedKey, std::vector<std::vector<double>>> erased;
};

namespace {

constexpr std::size_t kAllPoints = static_cast<std::size_t>(-1);

void require_file(const std::string& p, const std::string& what) {
    std::error_code ec;
    if (!fs::is_regular_file(p, ec)) throw ConfigError(what + " '" + p + "' does not exist");
}

}  // namespace

Harness::Harness(SweepConfig config) : config_(std::move(config)), state_(std::make_unique<State>()) {
    config_.validate();
    for (const auto& t : config_.tasks) {
        require_file(t.model, "model");
        for (const auto& lc : t.caches) {
            require_file(lc.fit, "fit cache");
            require_file(lc.eval, "eval cache");
        }
    }
    for (const auto& t : config_.tasks) {
        State::Task st;
        st.model = toy::read_model(t.model);
        st.runner = std::make_unique<toy::ToyRunner>(st.model);
        for (const auto& lc : t.caches) {
            auto fit = read_cache(lc.fit);
            auto eval = read_cache(lc.eval);
            if (fit.layer != lc.layer || eval.layer != lc.layer)
                throw ConfigError("cache layer does not match the config for task '" + t.name + "'");
            if (fit.d != st.model.config.d || eval.d != st.model.config.d)
                throw ConfigError("cache width does not match the model for task '" + t.name + "'");
            if (lc.layer >= st.model.config.n_layers) throw ConfigError("layer outside the model for task '" + t.name + "'");
            try {
                check_disjoint(fit, eval);
            } catch (const ValidationError& e) {
                throw ConfigError("task '" + t.name + "': " + e.what());
            }
            st.fit.emplace(lc.layer, std::move(fit));
            st.eval.emplace(lc.layer, std::move(eval));
        }
        state_->tasks.push_back(std::move(st));
    }
}

Harness::~Harness() = default;

const CentroidBook& Harness::book(std::size_t task, std::uint32_t layer, Modality modality, std::uint32_t k,
                                  std::optional<std::size_t> n_fit) {
    const std::size_t n = n_fit.value_or(kAllPoints);
    State::BookKey key{task, layer, static_cast<std::uint8_t>(modality), k, n};
    auto it = state_->books.find(key);
    if (it != state_->books.end()) return it->second;
    FitRequest req;
    req.modality = modality;
    req.K = k;
    req.kmeans_seed = config_.book.seed;
    req.filter = config_.book.filter;
    req.options = config_.book.kmeans;
    if (n_fit) req.max_points = *n_fit;
    auto b = fit_book_from_cache(state_->tasks.at(task).fit.at(layer), req);
    return state_->books.emplace(key, std::move(b)).first->second;
}

namespace {

struct EvalRequest {
    std::uint32_t layer = 0;
    Modality modality = Modality::Text;
    SegmentSelection segments;
    InterventionKind kind = InterventionKind::Centroid;
    double alpha = 0.0;
    std::uint32_t k = 0;
    std::optional<std::size_t> n_fit;
};

}  // namespace

// Shared by every sweep: erased logits memoized per intervention.
static const std::vector<std::vector<double>>& erased_for(Harness& h, Harness::State& st, const SweepConfig& cfg,
                                                        std::size_t task, const EvalRequest& r) {
    Harness::State::ErasedKey key{task,
                                  r.layer,
                                  static_cast<std::uint8_t>(r.modality),
                                  r.segments.name(),
                                  static_cast<std::uint8_t>(r.kind),
                                  std::bit_cast<std::uint64_t>(r.alpha),
                                  r.k,
                                  r.n_fit.value_or(kAllPoints)};
    auto it = st.erased.find(key);
    if (it != st.erased.end()) return it->second;
    InterventionSpec spec;
    spec.layer = r.layer;
    spec.modality = r.modality;
    spec.segments = r.segments;
    spec.alpha_interp = r.alpha;
    spec.kind = r.kind;
    spec.control_seed = cfg.control_seed;
    const CentroidBook* book = nullptr;
    if (r.kind != InterventionKind::None) book = &h.book(task, r.layer, r.modality, r.k, r.n_fit);
    auto& t = st.tasks.at(task);
    auto logits = erased_logits(*t.runner, t.eval.at(r.layer), spec, book);
    return st.erased.emplace(key, std::move(logits)).first->second;
}

std::vector<AlphaSweep> Harness::run_alpha_sweep() {
    std::vector<AlphaSweep> out;
    for (std::size_t t = 0; t < config_.tasks.size(); ++t) {
        AlphaSweep s;
        s.task = config_.tasks[t].name;
        s.group = config_.tasks[t].group;
        s.alpha_interp = config_.alpha_interp;
        s.alpha_cd = config_.alpha_cd;
        const auto& eval = state_->tasks[t].eval.at(config_.layer);
        for (double a : config_.alpha_interp) {
            EvalRequest r{config_.layer, Modality::Text, config_.segments, InterventionKind::Centroid, a, config_.book.k, {}};
            const auto& er = erased_for(*this, *state_, config_, t, r);
            std::vector<DeltaStats> row;
            for (double cd : config_.alpha_cd) row.push_back(summarize(pair_outcomes(eval, er, cd)));
            s.cells.push_back(std::move(row));
        }
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

double best_alpha_of(const AlphaSweep& s, double headline_cd) {
    const AlphaSweep* p = &s;
    auto curves = curves_at_cd(std::span<const AlphaSweep>(p, 1), headline_cd);
    return best_point(curves[0].points).alpha;
}

}  // namespace

std::vector<DoseCurve> Harness::run_dose_response(std::span<const AlphaSweep> sweeps) {
    std::vector<DoseCurve> out;
    for (std::size_t t = 0; t < config_.tasks.size(); ++t) {
        const double a = best_alpha_of(sweeps[t], config_.headline_alpha_cd);
        EvalRequest r{config_.layer, Modality::Text, config_.segments, InterventionKind::Centroid, a, config_.book.k, {}};
        const auto& er = erased_for(*this, *state_, config_, t, r);
        const auto& eval = state_->tasks[t].eval.at(config_.layer);
        DoseCurve d{config_.tasks[t].name, a, {}};
        for (double cd : config_.dose_alpha_cd) d.points.push_back({cd, summarize(pair_outcomes(eval, er, cd))});
        out.push_back(std::move(d));
    }
    return out;
}

std::vector<SegmentRow> Harness::run_segment_ablation() {
    std::vector<SegmentRow> out;
    for (const auto& seg : config_.segment_sets) {
        for (std::size_t t = 0; t < config_.tasks.size(); ++t) {
            const auto& eval = state_->tasks[t].eval.at(config_.layer);
            std::vector<AlphaPoint> pts;
            for (double a : config_.alpha_interp) {
                EvalRequest r{config_.layer, Modality::Text, seg, InterventionKind::Centroid, a, config_.book.k, {}};
                const auto& er = erased_for(*this, *state_, config_, t, r);
                pts.push_back({a, summarize(pair_outcomes(eval, er, config_.headline_alpha_cd))});
            }
            const Best b = best_point(pts);
            out.push_back({seg.name(), config_.tasks[t].name, b.stats.delta_pp, b.alpha, b.stats.p_value});
        }
    }
    return out;
}

std::vector<LayerRow> Harness::run_layer_sweep() {
    std::vector<LayerRow> out;
    for (auto layer : config_.layers) {
        for (std::size_t t = 0; t < config_.tasks.size(); ++t) {
            const auto& eval = state_->tasks[t].eval.at(layer);
            std::vector<AlphaPoint> pts;
            for (double a : config_.alpha_interp) {
                EvalRequest r{layer, Modality::Text, config_.segments, InterventionKind::Centroid, a, config_.book.k, {}};
                const auto& er = erased_for(*this, *state_, config_, t, r);
                pts.push_back({a, summarize(pair_outcomes(eval, er, config_.headline_alpha_cd))});
            }
            const Best b = best_point(pts);
            out.push_back({layer, config_.tasks[t].name, config_.tasks[t].group, b.stats.delta_pp, b.alpha});
        }
    }
    return out;
}

std::vector<LayerGroupMean> layer_group_means(std::span<const LayerRow> rows) {
    std::map<std::pair<std::uint32_t, std::string>, std::pair<double, std::size_t>> acc;
    for (const auto& r : rows) {
        auto& a = acc[{r.layer, r.group}];
        a.first += r.best_delta;
        ++a.second;
    }
    std::vector<LayerGroupMean> out;
    for (const auto& [k, v] : acc) out.push_back({k.first, k.second, v.first / static_cast<double>(v.second)});
    return out;
}

std::vector<ControlRow> Harness::run_controls(std::span<const AlphaSweep> sweeps) {
    std::vector<ControlRow> out;
    for (std::size_t t = 0; t < config_.tasks.size(); ++t) {
        const double a = best_alpha_of(sweeps[t], config_.headline_alpha_cd);
        const auto& eval = state_->tasks[t].eval.at(config_.layer);
        std::vector<InterventionKind> kinds{InterventionKind::Centroid};
        kinds.insert(kinds.end(), config_.controls.begin(), config_.controls.end());
        for (auto kind : kinds) {
            EvalRequest r{config_.layer, Modality::Text, config_.segments, kind, a, config_.book.k, {}};
            const auto& er = erased_for(*this, *state_, config_, t, r);
            out.push_back({config_.tasks[t].name, to_string(kind), a,
                           summarize(pair_outcomes(eval, er, config_.headline_alpha_cd))});
        }
    }
    return out;
}

std::vector<ModalityCost> Harness::run_costs() {
    std::vector<ModalityCost> out;
    for (std::size_t t = 0; t < config_.tasks.size(); ++t) {
        const auto& eval = state_->tasks[t].eval.at(config_.layer);
        ModalityCost mc;
        mc.task = config_.tasks[t].name;
        std::size_t right = 0;
        for (const auto& s : eval.samples) {
            std::vector<double> z(s.baseline_option_logits.begin(), s.baseline_option_logits.end());
            right += greedy_answer(z).index == s.gold_option;
        }
        mc.baseline_acc = eval.samples.empty() ? 0.0 : static_cast<double>(right) / static_cast<double>(eval.samples.size());
        double cost[2] = {0.0, 0.0};
        for (auto m : {Modality::Visual, Modality::Text}) {
            EvalRequest r{config_.layer, m, SegmentSelection::all_tokens(), InterventionKind::Centroid, 0.0, config_.book.k, {}};
            const auto& er = erased_for(*this, *state_, config_, t, r);
            cost[static_cast<int>(m)] = replacement_cost(mc.baseline_acc, erased_accuracy(eval, er));
        }
        mc.vis_cost = cost[0];
        mc.text_cost = cost[1];
        mc.ratio = asymmetry_ratio(mc.text_cost, mc.vis_cost);
        out.push_back(mc);
    }
    return out;
}

NkResult Harness::run_nk_grid() {
    if (!config_.nk_grid) throw ConfigError("config has no nk_grid");
    NkResult res;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (auto n : config_.nk_grid->n) {
        for (auto k : config_.nk_grid->k) {
            NkCell cell;
            cell.n = n;
            cell.k = k;
            if (n < k) {
                cell.degenerate = true;
                res.cells.push_back(cell);
                continue;
            }
            double score = 0.0, inertia = 0.0;
            for (std::size_t t = 0; t < config_.tasks.size(); ++t) {
                const auto& eval = state_->tasks[t].eval.at(config_.layer);
                std::vector<AlphaPoint> pts;
                for (double a : config_.alpha_interp) {
                    EvalRequest r{config_.layer, Modality::Text, config_.segments, InterventionKind::Centroid, a, k, n};
                    const auto& er = erased_for(*this, *state_, config_, t, r);
                    pts.push_back({a, summarize(pair_outcomes(eval, er, config_.headline_alpha_cd))});
                }
                score += best_point(pts).stats.delta_pp;
                inertia += book(t, config_.layer, Modality::Text, k, n).inertia;
            }
            const double nt = static_cast<double>(config_.tasks.size());
            cell.audit_score = score / nt;
            cell.inertia = inertia / nt;
            lo = std::min(lo, cell.audit_score);
            hi = std::max(hi, cell.audit_score);
            res.cells.push_back(cell);
        }
    }
    res.flatness = hi >= lo ? hi - lo : 0.0;
    return res;
}

SweepReport Harness::run_all() {
    SweepReport r;
    r.alpha_sweeps = run_alpha_sweep();
    std::vector<ModalityCost> costs;
    if (config_.costs) costs = run_costs();
    auto curves = curves_at_cd(r.alpha_sweeps, config_.headline_alpha_cd);
    r.audit = compute_audit(curves, config_.fixed_alpha, costs);
    if (!config_.dose_alpha_cd.empty()) r.dose = run_dose_response(r.alpha_sweeps);
    if (!config_.segment_sets.empty()) r.segments = run_segment_ablation();
    if (!config_.layers.empty()) {
        r.layers = run_layer_sweep();
        r.layer_means = layer_group_means(r.layers);
    }
    if (!config_.controls.empty()) r.controls = run_controls(r.alpha_sweeps);
    if (config_.nk_grid) r.nk = run_nk_grid();
    return r;
}

// ---------------------------------------------------------------------------
// Report serialization

namespace {

template <class T>
json opt(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

template <class T>
std::optional<T> get_opt(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<T>();
}

json to_j(const DeltaStats& s) {
    return {{"n", s.n}, {"base_acc", s.base_acc}, {"cd_acc", s.cd_acc}, {"delta_pp", s.delta_pp},
            {"p_value", s.p_value}, {"b", s.b}, {"c", s.c}};
}

DeltaStats delta_from(const json& j) {
    DeltaStats s;
    s.n = j.at("n").get<std::size_t>();
    s.base_acc = j.at("base_acc").get<double>();
    s.cd_acc = j.at("cd_acc").get<double>();
    s.delta_pp = j.at("delta_pp").get<double>();
    s.p_value = j.at("p_value").get<double>();
    s.b = j.at("b").get<std::uint64_t>();
    s.c = j.at("c").get<std::uint64_t>();
    return s;
}

json to_j(const Ratio& r) { return {{"value", r.value}, {"defined", r.defined}, {"unstable", r.unstable}}; }

Ratio ratio_from(const json& j) {
    return {j.at("value").get<double>(), j.at("defined").get<bool>(), j.at("unstable").get<bool>()};
}

json audit_to_json(const AuditReport& a) {
    json tasks = json::array();
    for (const auto& t : a.tasks)
        tasks.push_back({{"task", t.task}, {"group", t.group}, {"baseline_acc", t.baseline_acc}, {"n", t.n},
                         {"fixed_delta", opt(t.fixed_delta)}, {"fixed_p", opt(t.fixed_p)},
                         {"best_delta", t.best_delta}, {"best_alpha", t.best_alpha}, {"best_p", t.best_p},
                         {"significant", t.significant}});
    json groups = json::array();
    for (const auto& g : a.groups)
        groups.push_back({{"group", g.group}, {"best_mean", g.best_mean}, {"fixed_mean", opt(g.fixed_mean)},
                          {"tasks", g.tasks}});
    json costs = json::array();
    for (const auto& c : a.costs)
        costs.push_back({{"task", c.task}, {"baseline_acc", c.baseline_acc}, {"text_cost", c.text_cost},
                         {"vis_cost", c.vis_cost}, {"ratio", to_j(c.ratio)}});
    return {{"fixed_alpha", a.fixed_alpha}, {"tasks", tasks}, {"groups", groups}, {"costs", costs},
            {"audit_score", a.audit_score}, {"fixed_mean", opt(a.fixed_mean)},
            {"fixed_to_best", to_j(a.fixed_to_best)}};
}

AuditReport audit_from_json(const json& j) {
    AuditReport a;
    a.fixed_alpha = j.at("fixed_alpha").get<double>();
    for (const auto& t : j.at("tasks")) {
        TaskAudit x;
        x.task = t.at("task").get<std::string>();
        x.group = t.at("group").get<std::string>();
        x.baseline_acc = t.at("baseline_acc").get<double>();
        x.n = t.at("n").get<std::size_t>();
        x.fixed_delta = get_opt<double>(t, "fixed_delta");
        x.fixed_p = get_opt<double>(t, "fixed_p");
        x.best_delta = t.at("best_delta").get<double>();
        x.best_alpha = t.at("best_alpha").get<double>();
        x.best_p = t.at("best_p").get<double>();
        x.significant = t.at("significant").get<bool>();
        a.tasks.push_back(std::move(x));
    }
    for (const auto& g : j.at("groups"))
        a.groups.push_back({g.at("group").get<std::string>(), g.at("best_mean").get<double>(),
                            get_opt<double>(g, "fixed_mean"), g.at("tasks").get<std::size_t>()});
    for (const auto& c : j.at("costs"))
        a.costs.push_back({c.at("task").get<std::string>(), c.at("baseline_acc").get<double>(),
                           c.at("text_cost").get<double>(), c.at("vis_cost").get<double>(), ratio_from(c.at("ratio"))});
    a.audit_score = j.at("audit_score").get<double>();
    a.fixed_mean = get_opt<double>(j, "fixed_mean");
    a.fixed_to_best = ratio_from(j.at("fixed_to_best"));
    return a;
}

}  // namespace

json report_to_json(const SweepReport& r) {
    json j;
    j["alpha_sweeps"] = json::array();
    for (const auto& s : r.alpha_sweeps) {
        json cells = json::array();
        for (const auto& row : s.cells) {
            json jr = json::array();
            for (const auto& c : row) jr.push_back(to_j(c));
            cells.push_back(jr);
        }
        j["alpha_sweeps"].push_back({{"task", s.task}, {"group", s.group}, {"alpha_interp", s.alpha_interp},
                                     {"alpha_cd", s.alpha_cd}, {"cells", cells}});
    }
    j["audit"] = r.audit ? audit_to_json(*r.audit) : json(nullptr);
    j["dose"] = json::array();
    for (const auto& d : r.dose) {
        json pts = json::array();
        for (const auto& p : d.points) pts.push_back({{"alpha_cd", p.alpha_cd}, {"stats", to_j(p.stats)}});
        j["dose"].push_back({{"task", d.task}, {"alpha_interp", d.alpha_interp}, {"points", pts}});
    }
    j["segments"] = json::array();
    for (const auto& s : r.segments)
        j["segments"].push_back({{"segments", s.segments}, {"task", s.task}, {"best_delta", s.best_delta},
                                 {"best_alpha", s.best_alpha}, {"p_value", s.p_value}});
    j["layers"] = json::array();
    for (const auto& l : r.layers)
        j["layers"].push_back({{"layer", l.layer}, {"task", l.task}, {"group", l.group},
                               {"best_delta", l.best_delta}, {"best_alpha", l.best_alpha}});
    j["layer_means"] = json::array();
    for (const auto& l : r.layer_means)
        j["layer_means"].push_back({{"layer", l.layer}, {"group", l.group}, {"mean", l.mean}});
    j["controls"] = json::array();
    for (const auto& c : r.controls)
        j["controls"].push_back({{"task", c.task}, {"kind", c.kind}, {"alpha_interp", c.alpha_interp},
                                 {"stats", to_j(c.stats)}});
    if (r.nk) {
        json cells = json::array();
        for (const auto& c : r.nk->cells)
            cells.push_back({{"n", c.n}, {"k", c.k}, {"degenerate", c.degenerate},
                             {"audit_score", c.audit_score}, {"inertia", c.inertia}});
        j["nk"] = {{"cells", cells}, {"flatness", r.nk->flatness}};
    } else {
        j["nk"] = nullptr;
    }
    return j;
}

SweepReport report_from_json(const json& j) {
    SweepReport r;
    try {
        for (const auto& s : j.at("alpha_sweeps")) {
            AlphaSweep a;
            a.task = s.at("task").get<std::string>();
            a.group = s.at("group").get<std::string>();
            a.alpha_interp = s.at("alpha_interp").get<std::vector<double>>();
            a.alpha_cd = s.at("alpha_cd").get<std::vector<double>>();
            for (const auto& row : s.at("cells")) {
                std::vector<DeltaStats> rr;
                for (const auto& c : row) rr.push_back(delta_from(c));
                a.cells.push_back(std::move(rr));
            }
            r.alpha_sweeps.push_back(std::move(a));
        }
        if (!j.at("audit").is_null()) r.audit = audit_from_json(j.at("audit"));
        for (const auto& d : j.at("dose")) {
            DoseCurve c{d.at("task").get<std::string>(), d.at("alpha_interp").get<double>(), {}};
            for (const auto& p : d.at("points")) c.points.push_back({p.at("alpha_cd").get<double>(), delta_from(p.at("stats"))});
            r.dose.push_back(std::move(c));
        }
        for (const auto& s : j.at("segments"))
            r.segments.push_back({s.at("segments").get<std::string>(), s.at("task").get<std::string>(),
                                  s.at("best_delta").get<double>(), s.at("best_alpha").get<double>(),
                                  s.at("p_value").get<double>()});
        for (const auto& l : j.at("layers"))
            r.layers.push_back({l.at("layer").get<std::uint32_t>(), l.at("task").get<std::string>(),
                                l.at("group").get<std::string>(), l.at("best_delta").get<double>(),
                                l.at("best_alpha").get<double>()});
        for (const auto& l : j.at("layer_means"))
            r.layer_means.push_back({l.at("layer").get<std::uint32_t>(), l.at("group").get<std::string>(),
                                     l.at("mean").get<double>()});
        for (const auto& c : j.at("controls"))
            r.controls.push_back({c.at("task").get<std::string>(), c.at("kind").get<std::string>(),
                                  c.at("alpha_interp").get<double>(), delta_from(c.at("stats"))});
        if (!j.at("nk").is_null()) {
            NkResult nk;
            for (const auto& c : j.at("nk").at("cells"))
                nk.cells.push_back({c.at("n").get<std::size_t>(), c.at("k").get<std::uint32_t>(),
                                    c.at("degenerate").get<bool>(), c.at("audit_score").get<double>(),
                                    c.at("inertia").get<double>()});
            nk.flatness = j.at("nk").at("flatness").get<double>();
            r.nk = nk;
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("report JSON: ") + e.what());
    }
    return r;
}

ReportFormat parse_report_format(std::string_view s) {
    if (s == "json") return ReportFormat::Json;
    if (s == "csv") return ReportFormat::Csv;
    if (s == "markdown" || s == "md") return ReportFormat::Markdown;
    if (s == "plotdata") return ReportFormat::PlotData;
    throw ConfigError("unknown report format '" + std::string(s) + "'");
}

const char* file_name(ReportFormat f) {
    switch (f) {
        case ReportFormat::Json: return "report.json";
        case ReportFormat::Csv: return "report.csv";
        case ReportFormat::Markdown: return "report.md";
        case ReportFormat::PlotData: return "plotdata.json";
    }
    return "report";
}

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string pp(double v) { return fmt("%+.1f", v); }
std::string pct(double v) { return fmt("%.1f", 100.0 * v); }
std::string pval(double v) { return v < 1e-4 ? std::string("<1e-4") : fmt("%.4f", v); }

std::string render_csv(const SweepReport& r) {
    std::ostringstream o;
    o << "section,task,group,alpha_interp,alpha_cd,layer,segments,kind,n,k,metric,value\n";
    auto row = [&](const std::string& section, const std::string& task, const std::string& group, const std::string& ai,
                   const std::string& acd, const std::string& layer, const std::string& seg, const std::string& kind,
                   const std::string& n, const std::string& k, const std::string& metric, double v) {
        o << section << ',' << task << ',' << group << ',' << ai << ',' << acd << ',' << layer << ',' << seg << ','
          << kind << ',' << n << ',' << k << ',' << metric << ',' << format_double(v) << '\n';
    };
    const std::string e;
    for (const auto& s : r.alpha_sweeps)
        for (std::size_t i = 0; i < s.alpha_interp.size(); ++i)
            for (std::size_t j = 0; j < s.alpha_cd.size(); ++j) {
                const auto& c = s.cells[i][j];
                const auto ai = format_double(s.alpha_interp[i]), acd = format_double(s.alpha_cd[j]);
                row("alpha_sweep", s.task, s.group, ai, acd, e, e, e, e, e, "delta_pp", c.delta_pp);
                row("alpha_sweep", s.task, s.group, ai, acd, e, e, e, e, e, "p_value", c.p_value);
            }
    if (r.audit) {
        for (const auto& t : r.audit->tasks) {
            row("audit", t.task, t.group, format_double(t.best_alpha), e, e, e, e, e, e, "best_delta", t.best_delta);
            row("audit", t.task, t.group, e, e, e, e, e, e, e, "baseline_acc", t.baseline_acc);
            if (t.fixed_delta)
                row("audit", t.task, t.group, format_double(r.audit->fixed_alpha), e, e, e, e, e, e, "fixed_delta", *t.fixed_delta);
        }
        for (const auto& c : r.audit->costs) {
            row("costs", c.task, e, "0", e, e, e, e, e, e, "text_cost", c.text_cost);
            row("costs", c.task, e, "0", e, e, e, e, e, e, "vis_cost", c.vis_cost);
            if (c.ratio.defined) row("costs", c.task, e, "0", e, e, e, e, e, e, "asymmetry_ratio", c.ratio.value);
        }
        row("audit", e, e, e, e, e, e, e, e, e, "audit_score", r.audit->audit_score);
        if (r.audit->fixed_mean) row("audit", e, e, e, e, e, e, e, e, e, "fixed_mean", *r.audit->fixed_mean);
        if (r.audit->fixed_to_best.defined) row("audit", e, e, e, e, e, e, e, e, e, "fixed_to_best", r.audit->fixed_to_best.value);
    }
    for (const auto& d : r.dose)
        for (const auto& p : d.points)
            row("dose", d.task, e, format_double(d.alpha_interp), format_double(p.alpha_cd), e, e, e, e, e, "cd_acc", p.stats.cd_acc);
    for (const auto& s : r.segments)
        row("segments", s.task, e, format_double(s.best_alpha), e, e, s.segments, e, e, e, "best_delta", s.best_delta);
    for (const auto& l : r.layers)
        row("layers", l.task, l.group, format_double(l.best_alpha), e, std::to_string(l.layer), e, e, e, e, "best_delta", l.best_delta);
    for (const auto& l : r.layer_means)
        row("layer_means", e, l.group, e, e, std::to_string(l.layer), e, e, e, e, "mean_delta", l.mean);
    for (const auto& c : r.controls)
        row("controls", c.task, e, format_double(c.alpha_interp), e, e, e, c.kind, e, e, "delta_pp", c.stats.delta_pp);
    if (r.nk)
        for (const auto& c : r.nk->cells)
            if (!c.degenerate)
                row("nk", e, e, e, e, e, e, e, std::to_string(c.n), std::to_string(c.k), "audit_score", c.audit_score);
    return o.str();
}

std::string render_markdown(const SweepReport& r) {
    std::ostringstream o;
    o << "# Modal audit report\n";
    if (r.audit) {
        const auto& a = *r.audit;
        o << "\n## Audit\n\n";
        o << "| task | group | n | baseline acc | fixed delta (a=" << format_double(a.fixed_alpha)
          << ") | best delta | best a | p |\n|---|---|---|---|---|---|---|---|\n";
        for (const auto& t : a.tasks)
            o << "| " << t.task << " | " << t.group << " | " << t.n << " | " << pct(t.baseline_acc) << " | "
              << (t.fixed_delta ? pp(*t.fixed_delta) : std::string("n/a")) << " | " << pp(t.best_delta)
              << (t.significant ? "*" : "") << " | " << format_double(t.best_alpha) << " | " << pval(t.best_p) << " |\n";
        o << "\nAudit score (mean best-alpha delta): " << pp(a.audit_score) << " pp\n";
        if (a.fixed_mean) o << "Fixed-alpha mean: " << pp(*a.fixed_mean) << " pp\n";
        if (a.fixed_to_best.defined) o << "Fixed/best ratio: " << fmt("%.2f", a.fixed_to_best.value) << "\n";
        else o << "Fixed/best ratio: undefined\n";
        if (!a.groups.empty()) {
            o << "\n| group | tasks | mean best delta | mean fixed delta |\n|---|---|---|---|\n";
            for (const auto& g : a.groups)
                o << "| " << g.group << " | " << g.tasks << " | " << pp(g.best_mean) << " | "
                  << (g.fixed_mean ? pp(*g.fixed_mean) : std::string("n/a")) << " |\n";
        }
        if (!a.costs.empty()) {
            o << "\n## Replacement costs (alpha = 0)\n\n| task | baseline acc | text cost | visual cost | ratio |\n|---|---|---|---|---|\n";
            for (const auto& c : a.costs)
                o << "| " << c.task << " | " << pct(c.baseline_acc) << " | " << pp(c.text_cost) << " | " << pp(c.vis_cost)
                  << " | " << (c.ratio.defined ? fmt("%.1fx", c.ratio.value) : std::string("n/a"))
                  << (c.ratio.unstable ? " (unstable denominator)" : "") << " |\n";
        }
    }
    for (const auto& s : r.alpha_sweeps) {
        o << "\n## Alpha sweep: " << s.task << "\n\n| alpha_interp |";
        for (double cd : s.alpha_cd) o << " cd " << format_double(cd) << " |";
        o << "\n|---|";
        for (std::size_t j = 0; j < s.alpha_cd.size(); ++j) o << "---|";
        o << "\n";
        for (std::size_t i = 0; i < s.alpha_interp.size(); ++i) {
            o << "| " << format_double(s.alpha_interp[i]) << " |";
            for (const auto& c : s.cells[i]) o << ' ' << pp(c.delta_pp) << " |";
            o << "\n";
        }
    }
    if (!r.dose.empty()) {
        o << "\n## Dose response over alpha_cd\n\n| task | alpha_interp | alpha_cd | accuracy | delta |\n|---|---|---|---|---|\n";
        for (const auto& d : r.dose)
            for (const auto& p : d.points)
                o << "| " << d.task << " | " << format_double(d.alpha_interp) << " | " << format_double(p.alpha_cd) << " | "
                  << pct(p.stats.cd_acc) << " | " << pp(p.stats.delta_pp) << " |\n";
    }
    if (!r.segments.empty()) {
        o << "\n## Segment ablation\n\n| segments | task | best delta | best alpha | p |\n|---|---|---|---|---|\n";
        for (const auto& s : r.segments)
            o << "| " << s.segments << " | " << s.task << " | " << pp(s.best_delta) << " | " << format_double(s.best_alpha)
              << " | " << pval(s.p_value) << " |\n";
    }
    if (!r.layer_means.empty()) {
        o << "\n## Layer sweep\n\n| layer | group | mean best delta |\n|---|---|---|\n";
        for (const auto& l : r.layer_means) o << "| " << l.layer << " | " << l.group << " | " << pp(l.mean) << " |\n";
    }
    if (!r.controls.empty()) {
        o << "\n## Controls (dose-matched)\n\n| task | kind | alpha | delta | p |\n|---|---|---|---|---|\n";
        for (const auto& c : r.controls)
            o << "| " << c.task << " | " << c.kind << " | " << format_double(c.alpha_interp) << " | " << pp(c.stats.delta_pp)
              << " | " << pval(c.stats.p_value) << " |\n";
    }
    if (r.nk) {
        o << "\n## N x K grid\n\n| N | K | audit score | inertia |\n|---|---|---|---|\n";
        for (const auto& c : r.nk->cells)
            o << "| " << c.n << " | " << c.k << " | " << (c.degenerate ? std::string("degenerate") : pp(c.audit_score))
              << " | " << (c.degenerate ? std::string("-") : fmt("%.4g", c.inertia)) << " |\n";
        o << "\nFlatness (max - min): " << fmt("%.2f", r.nk->flatness) << " pp\n";
    }
    return o.str();
}

json render_plotdata(const SweepReport& r) {
    json j;
    j["alpha_sweep"] = json::array();
    for (const auto& s : r.alpha_sweeps)
        for (std::size_t c = 0; c < s.alpha_cd.size(); ++c) {
            std::vector<double> y;
            for (const auto& row : s.cells) y.push_back(row[c].delta_pp);
            j["alpha_sweep"].push_back({{"task", s.task}, {"alpha_cd", s.alpha_cd[c]}, {"x", s.alpha_interp}, {"y", y}});
        }
    j["dose"] = json::array();
    for (const auto& d : r.dose) {
        std::vector<double> x, y;
        for (const auto& p : d.points) {
            x.push_back(p.alpha_cd);
            y.push_back(100.0 * p.stats.cd_acc);
        }
        j["dose"].push_back({{"task", d.task}, {"x", x}, {"y", y}});
    }
    j["segments"] = json::array();
    std::map<std::string, std::pair<std::vector<std::string>, std::vector<double>>> seg;
    for (const auto& s : r.segments) {
        seg[s.task].first.push_back(s.segments);
        seg[s.task].second.push_back(s.best_delta);
    }
    for (const auto& [task, v] : seg) j["segments"].push_back({{"task", task}, {"x", v.first}, {"y", v.second}});
    j["layers"] = json::array();
    std::map<std::string, std::pair<std::vector<std::uint32_t>, std::vector<double>>> lay;
    for (const auto& l : r.layer_means) {
        lay[l.group].first.push_back(l.layer);
        lay[l.group].second.push_back(l.mean);
    }
    for (const auto& [g, v] : lay) j["layers"].push_back({{"group", g}, {"x", v.first}, {"y", v.second}});
    j["controls"] = json::array();
    for (const auto& c : r.controls)
        j["controls"].push_back({{"task", c.task}, {"kind", c.kind}, {"delta_pp", c.stats.delta_pp}});
    if (r.nk) {
        json cells = json::array();
        for (const auto& c : r.nk->cells)
            if (!c.degenerate) cells.push_back({{"n", c.n}, {"k", c.k}, {"z", c.audit_score}});
        j["nk"] = cells;
    } else {
        j["nk"] = json::array();
    }
    return j;
}

}  // namespace

std::string render_report(const SweepReport& r, ReportFormat f) {
    switch (f) {
        case ReportFormat::Json: return report_to_json(r).dump(2) + "\n";
        case ReportFormat::Csv: return render_csv(r);
        case ReportFormat::Markdown: return render_markdown(r);
        case ReportFormat::PlotData: return render_plotdata(r).dump(2) + "\n";
    }
    return {};
}

std::vector<std::string> emit_report(const SweepReport& r, const std::string& dir,
                                     std::span<const ReportFormat> formats) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create report directory '" + dir + "': " + ec.message());
    std::vector<std::string> paths;
    for (auto f : formats) {
        const std::string p = (fs::path(dir) / file_name(f)).string();
        const std::string text = render_report(r, f);
        write_file_bytes(p, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
        paths.push_back(p);
    }
    return paths;
}

SweepReport read_report(const std::string& dir) {
    const auto bytes = read_file_bytes((fs::path(dir) / file_name(ReportFormat::Json)).string());
    auto j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) throw FormatError("report.json is not valid JSON");
    return report_from_json(j);
}

json outcome_stats(std::span<const PairedOutcome> outcomes, std::size_t ece_bins) {
    auto block = [&](std::span<const PairedOutcome> os) {
        const DeltaStats d = summarize(os);
        std::uint64_t base = 0, cd = 0;
        std::vector<stats::CalibrationPoint> cb, cc;
        for (const auto& o : os) {
            base += o.base_correct();
            cd += o.cd_correct();
            cb.push_back({o.base_confidence, o.base_correct()});
            cc.push_back({o.cd_confidence, o.cd_correct()});
        }
        json j = {{"n", d.n}, {"base_acc", d.base_acc}, {"cd_acc", d.cd_acc}, {"delta_pp", d.delta_pp},
                  {"mcnemar", {{"b", d.b}, {"c", d.c}, {"p_value", d.p_value}}}};
        if (d.n > 0) {
            const auto wb = stats::to_percent(stats::wilson_ci(base, d.n));
            const auto wc = stats::to_percent(stats::wilson_ci(cd, d.n));
            j["base_wilson_pct"] = {wb.low, wb.high};
            j["cd_wilson_pct"] = {wc.low, wc.high};
            j["cohens_h"] = stats::cohens_h(d.base_acc, d.cd_acc);
            j["base_ece"] = stats::ece(cb, ece_bins);
            j["cd_ece"] = stats::ece(cc, ece_bins);
        }
        return j;
    };
    json out;
    out["overall"] = block(outcomes);
    std::map<std::string, std::vector<PairedOutcome>> by_task;
    for (const auto& o : outcomes) by_task[o.task_id].push_back(o);
    out["tasks"] = json::object();
    for (const auto& [t, os] : by_task) out["tasks"][t] = block(os);
    return out;
}

// ---------------------------------------------------------------------------
// Planted run

PlantedConfig default_planted_config() {
    PlantedConfig c;
    c.competes.family = toy::TaskFamily::Competes;
    c.needed = c.competes;
    c.needed.family = toy::TaskFamily::Needed;
    auto& s = c.sweep;
    s.book.k = 64;
    s.book.seed = 42;
    s.layer = 0;
    s.segments = SegmentSelection::all_tokens();
    s.alpha_interp = {0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
    s.alpha_cd = {1.0};
    s.dose_alpha_cd = {-1.0, -0.5, 0.0, 0.5, 1.0};
    s.segment_sets = {SegmentSelection::only({Segment::System}), SegmentSelection::only({Segment::Question}),
                      SegmentSelection::only({Segment::Options}), SegmentSelection::all_tokens()};
    s.layers = {0, 1, 2, 3};
    s.controls = {InterventionKind::RandomDirection, InterventionKind::MatchedNoise, InterventionKind::ShuffledCentroid};
    s.control_seed = 7;
    s.costs = true;
    return c;
}

PlantedRun run_planted(const PlantedConfig& config, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "caches", ec);
    if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
    PlantedRun run;
    SweepConfig sweep = config.sweep;
    sweep.tasks.clear();
    for (const auto* spec : {&config.competes, &config.needed}) {
        const std::string fam = toy::to_string(spec->family);
        const std::uint64_t seed = derive_seed({config.data_seed, fnv1a64(fam)});
        auto split = toy::gen_dataset(*spec, seed, config.n_train, config.n_eval);
        auto fit = toy::generate(*spec, derive_seed({seed, fnv1a64("fit")}), config.n_fit,
                                 spec->cue_correlation_eval, fam + "-fit");
        toy::ToyConfig mc = config.model;
        mc.d_visual = spec->d_visual;
        mc.max_seq = std::max(mc.max_seq, spec->sequence_length());
        toy::ToyModel model = toy::init_model(mc, config.train.seed);
        const double before = toy::mean_loss(model, split.train);
        toy::train(model, split.train, config.train);
        if (spec->family == toy::TaskFamily::Competes) {
            run.competes_train_loss_before = before;
            run.competes_train_loss_after = toy::mean_loss(model, split.train);
        }
        const std::string model_rel = fam + ".mctm";
        toy::write_model(model, (fs::path(dir) / model_rel).string());
        TaskEntry entry{fam, fam, model_rel, {}};
        for (auto layer : config.export_layers) {
            const std::string f = "caches/" + fam + "_L" + std::to_string(layer) + "_fit.mcac";
            const std::string e = "caches/" + fam + "_L" + std::to_string(layer) + "_eval.mcac";
            write_cache(toy::export_cache(model, fit, layer), (fs::path(dir) / f).string());
            write_cache(toy::export_cache(model, split.eval, layer), (fs::path(dir) / e).string());
            entry.caches.push_back({layer, f, e});
        }
        sweep.tasks.push_back(std::move(entry));
    }
    sweep.output_dir = "report";
    const std::string cfg_path = (fs::path(dir) / "sweep.json").string();
    const std::string text = sweep_config_to_json(sweep).dump(2) + "\n";
    write_file_bytes(cfg_path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));

    run.sweep = load_sweep_config(cfg_path);
    Harness h(run.sweep);
    run.report = h.run_all();
    const ReportFormat all[] = {ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::PlotData};
    run.report_files = emit_report(run.report, run.sweep.output_dir, all);
    return run;
}

}  // namespace modal_audit::harness
