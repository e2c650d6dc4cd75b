#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "modal_audit/cache.hpp"
#include "modal_audit/centroids.hpp"
#include "modal_audit/decode.hpp"
#include "modal_audit/interventions.hpp"
#include "modal_audit/stats.hpp"
#include "modal_audit/toymlm.hpp"

namespace modal_audit::harness {

inline constexpr double kFixedAlpha = 0.4;
inline constexpr double kUnstableDenominatorPp = 0.5;
inline constexpr double kSignificance = 0.05;

// baseline - erased, in percentage points. Positive means erasure hurts.
double replacement_cost(double baseline_acc, double erased_acc);

struct Ratio {
    double value = 0.0;
    bool defined = false;
    bool unstable = false;  // denominator below kUnstableDenominatorPp

    bool operator==(const Ratio&) const = default;
};

// text_cost / |vis_cost|.
Ratio asymmetry_ratio(double text_cost, double vis_cost);

// Paired accuracy summary of one evaluation.
struct DeltaStats {
    std::size_t n = 0;
    double base_acc = 0.0;
    double cd_acc = 0.0;
    double delta_pp = 0.0;
    double p_value = 1.0;
    std::uint64_t b = 0;  // base wrong, cd right
    std::uint64_t c = 0;  // base right, cd wrong

    bool operator==(const DeltaStats&) const = default;
};

DeltaStats summarize(std::span<const PairedOutcome> outcomes);

// Erased-pass option logits for every sample of an eval cache, replayed
// through a toy model from the cache's layer. Rounded to f32 like cached logits.
std::vector<std::vector<double>> erased_logits(const toy::ToyRunner& runner, const ActivationCache& eval,
                                               const InterventionSpec& spec, const CentroidBook* book);

std::vector<PairedOutcome> pair_outcomes(const ActivationCache& eval,
                                         std::span<const std::vector<double>> erased, double alpha_cd);

// Accuracy of argmax over the erased logits alone.
double erased_accuracy(const ActivationCache& eval, std::span<const std::vector<double>> erased);

// Toy-model counterpart of an external replay: splices each sample's patch
// vectors into its cached hidden states and replays from the cache layer.
LogitsTable replay_patch(const toy::ToyModel& model, const ActivationCache& cache, const PatchSet& patch);

// ---------------------------------------------------------------------------
// Audit

struct AlphaPoint {
    double alpha_interp = 0.0;
    DeltaStats stats;
    bool operator==(const AlphaPoint&) const = default;
};

struct TaskCurve {
    std::string task;
    std::string group;
    std::vector<AlphaPoint> points;
    bool operator==(const TaskCurve&) const = default;
};

struct ModalityCost {
    std::string task;
    double baseline_acc = 0.0;
    double text_cost = 0.0;
    double vis_cost = 0.0;
    Ratio ratio;
    bool operator==(const ModalityCost&) const = default;
};

struct TaskAudit {
    std::string task;
    std::string group;
    double baseline_acc = 0.0;
    std::size_t n = 0;
    std::optional<double> fixed_delta;
    std::optional<double> fixed_p;
    double best_delta = 0.0;
    double best_alpha = 0.0;
    double best_p = 1.0;
    bool significant = false;  // best-alpha McNemar p below kSignificance
    bool operator==(const TaskAudit&) const = default;
};

struct GroupMean {
    std::string group;
    double best_mean = 0.0;
    std::optional<double> fixed_mean;
    std::size_t tasks = 0;
    bool operator==(const GroupMean&) const = default;
};

struct AuditReport {
    double fixed_alpha = kFixedAlpha;
    std::vector<TaskAudit> tasks;
    std::vector<GroupMean> groups;
    std::vector<ModalityCost> costs;
    double audit_score = 0.0;  // mean best-alpha delta
    std::optional<double> fixed_mean;
    Ratio fixed_to_best;       // fixed_mean / audit_score
    bool operator==(const AuditReport&) const = default;
};

// Best alpha is the maximum delta over each curve, ties to the smaller alpha.
AuditReport compute_audit(std::span<const TaskCurve> curves, double fixed_alpha = kFixedAlpha,
                          std::span<const ModalityCost> costs = {});

// ---------------------------------------------------------------------------
// Configuration

struct LayerCaches {
    std::uint32_t layer = 0;
    std::string fit;
    std::string eval;
};

struct TaskEntry {
    std::string name;
    std::string group;
    std::string model;  // toy checkpoint used to replay erased passes
    std::vector<LayerCaches> caches;
};

struct BookParams {
    std::uint32_t k = 64;
    std::uint64_t seed = 42;
    FilterVariant filter = FilterVariant::Baseline;
    KMeansOptions kmeans;
};

struct NkGrid {
    std::vector<std::size_t> n;  // fit tokens, taken in cache order from the front of the fit cache
    std::vector<std::uint32_t> k;
};

struct SweepConfig {
    std::vector<TaskEntry> tasks;
    BookParams book;
    std::uint32_t layer = 0;  // headline layer
    SegmentSelection segments = SegmentSelection::all_tokens();
    std::vector<double> alpha_interp;
    std::vector<double> alpha_cd{1.0};
    double headline_alpha_cd = 1.0;  // used for best-alpha selection; must be in alpha_cd
    double fixed_alpha = kFixedAlpha;
    std::vector<double> dose_alpha_cd;  // alpha_cd dose-response at each task's best alpha
    std::vector<SegmentSelection> segment_sets;
    std::vector<std::uint32_t> layers;
    std::vector<InterventionKind> controls;
    std::uint64_t control_seed = 0;
    std::optional<NkGrid> nk_grid;
    bool costs = false;
    std::string output_dir;

    void validate() const;
};

SweepConfig parse_sweep_config(const nlohmann::json& j, const std::string& base_dir = "");
SweepConfig load_sweep_config(const std::string& path);
nlohmann::json sweep_config_to_json(const SweepConfig& c);

// ---------------------------------------------------------------------------
// Sweeps

struct CdPoint {
    double alpha_cd = 0.0;
    DeltaStats stats;
    bool operator==(const CdPoint&) const = default;
};

struct AlphaSweep {
    std::string task;
    std::string group;
    // points[i][j]: alpha_interp[i], alpha_cd[j]
    std::vector<double> alpha_interp;
    std::vector<double> alpha_cd;
    std::vector<std::vector<DeltaStats>> cells;
    bool operator==(const AlphaSweep&) const = default;
};

struct DoseCurve {
    std::string task;
    double alpha_interp = 0.0;
    std::vector<CdPoint> points;
    bool operator==(const DoseCurve&) const = default;
};

struct SegmentRow {
    std::string segments;
    std::string task;
    double best_delta = 0.0;
    double best_alpha = 0.0;
    double p_value = 1.0;
    bool operator==(const SegmentRow&) const = default;
};

struct LayerRow {
    std::uint32_t layer = 0;
    std::string task;
    std::string group;
    double best_delta = 0.0;
    double best_alpha = 0.0;
    bool operator==(const LayerRow&) const = default;
};

struct LayerGroupMean {
    std::uint32_t layer = 0;
    std::string group;
    double mean = 0.0;
    bool operator==(const LayerGroupMean&) const = default;
};

struct ControlRow {
    std::string task;
    std::string kind;
    double alpha_interp = 0.0;  // dose
    DeltaStats stats;
    bool operator==(const ControlRow&) const = default;
};

struct NkCell {
    std::size_t n = 0;
    std::uint32_t k = 0;
    bool degenerate = false;
    double audit_score = 0.0;
    double inertia = 0.0;
    bool operator==(const NkCell&) const = default;
};

struct NkResult {
    std::vector<NkCell> cells;
    double flatness = 0.0;  // max - min over non-degenerate cells
    bool operator==(const NkResult&) const = default;
};

struct SweepReport {
    std::vector<AlphaSweep> alpha_sweeps;
    std::optional<AuditReport> audit;
    std::vector<DoseCurve> dose;
    std::vector<SegmentRow> segments;
    std::vector<LayerRow> layers;
    std::vector<LayerGroupMean> layer_means;
    std::vector<ControlRow> controls;
    std::optional<NkResult> nk;
    bool operator==(const SweepReport&) const = default;
};

// Loads every model and cache named in the config, checking shapes and
// provenance before any sweep runs.
class Harness {
public:
    explicit Harness(SweepConfig config);
    ~Harness();
    Harness(const Harness&) = delete;
    Harness& operator=(const Harness&) = delete;

    const SweepConfig& config() const { return config_; }

    std::vector<AlphaSweep> run_alpha_sweep();
    std::vector<DoseCurve> run_dose_response(std::span<const AlphaSweep> sweeps);
    std::vector<SegmentRow> run_segment_ablation();
    std::vector<LayerRow> run_layer_sweep();
    std::vector<ControlRow> run_controls(std::span<const AlphaSweep> sweeps);
    std::vector<ModalityCost> run_costs();
    NkResult run_nk_grid();

    // Every section enabled by the config.
    SweepReport run_all();

    // Centroid book for a task at a layer, fitted on first use.
    const CentroidBook& book(std::size_t task, std::uint32_t layer, Modality modality,
                             std::uint32_t k, std::optional<std::size_t> n_fit = std::nullopt);

    struct State;

private:
    SweepConfig config_;
    std::unique_ptr<State> state_;
};

std::vector<LayerGroupMean> layer_group_means(std::span<const LayerRow> rows);

// The alpha_interp curve of each sweep at one alpha_cd.
std::vector<TaskCurve> curves_at_cd(std::span<const AlphaSweep> sweeps, double alpha_cd);

// Throws ValidationError when the two caches share sample ids or a data seed.
void check_disjoint(const ActivationCache& fit, const ActivationCache& eval);

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { Json, Csv, Markdown, PlotData };

ReportFormat parse_report_format(std::string_view s);
const char* file_name(ReportFormat f);

nlohmann::json report_to_json(const SweepReport& r);
SweepReport report_from_json(const nlohmann::json& j);
std::string render_report(const SweepReport& r, ReportFormat f);

// Writes one file per format into dir; returns the paths written.
std::vector<std::string> emit_report(const SweepReport& r, const std::string& dir,
                                     std::span<const ReportFormat> formats);

SweepReport read_report(const std::string& dir);

// Statistics of an outcome file: accuracies, McNemar, Wilson intervals,
// Cohen's h and calibration, per task and overall.
nlohmann::json outcome_stats(std::span<const PairedOutcome> outcomes, std::size_t ece_bins = 10);

// ---------------------------------------------------------------------------
// Planted-competition run on the toy substrate

struct PlantedConfig {
    toy::TaskSpec competes;
    toy::TaskSpec needed;
    toy::ToyConfig model;
    toy::TrainOptions train;
    std::size_t n_train = 8000;
    std::size_t n_eval = 1000;
    std::size_t n_fit = 1000;
    std::uint64_t data_seed = 1;
    std::vector<std::uint32_t> export_layers{0, 1, 2, 3};
    SweepConfig sweep;  // tasks and output_dir are filled in by the run
};

PlantedConfig default_planted_config();

struct PlantedRun {
    SweepConfig sweep;
    SweepReport report;
    std::vector<std::string> report_files;
    double competes_train_loss_before = 0.0;
    double competes_train_loss_after = 0.0;
};

// Generates data, trains one model per task family, exports fit and eval
// caches, writes the sweep config and runs it. Everything lands in dir.
PlantedRun run_planted(const PlantedConfig& config, const std::string& dir);

}  // namespace modal_audit::harness
