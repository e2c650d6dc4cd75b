#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "modal_audit/cache.hpp"
#include "modal_audit/centroids.hpp"
#include "modal_audit/interventions.hpp"
#include "modal_audit/matrix.hpp"

namespace modal_audit::toy {

enum class TaskFamily : std::uint8_t { Competes = 0, Needed = 1 };

const char* to_string(TaskFamily f);
TaskFamily parse_task_family(std::string_view s);

// Token ids of the toy vocabulary.
namespace vocab {
inline constexpr std::uint32_t kSize = 64;
inline constexpr std::uint32_t kLabelBase = 0;     // option labels A..D
inline constexpr std::uint32_t kConceptBase = 4;   // concept words, up to 16
inline constexpr std::uint32_t kMaxConcepts = 16;
inline constexpr std::uint32_t kSystemBase = 20;   // 8 system-prompt words
inline constexpr std::uint32_t kSystemWords = 8;
inline constexpr std::uint32_t kAskCompetes = 28;  // "which option shows the pictured thing"
inline constexpr std::uint32_t kAskNeeded = 29;    // "which option sits at position ..."
inline constexpr std::uint32_t kFillerBase = 30;   // 4 filler words
inline constexpr std::uint32_t kHint = 36;
inline constexpr std::uint32_t kPositionBase = 44;  // position words 1st..4th
inline constexpr std::uint32_t kAnswer = 48;
}  // namespace vocab

inline constexpr std::uint32_t kSystemTokens = 4;
inline constexpr std::uint32_t kQuestionTokens = 4;  // ask, detail, hint, cue

struct TaskSpec {
    TaskFamily family = TaskFamily::Competes;
    std::uint32_t n_visual_tokens = 8;
    std::uint32_t n_options = 4;
    double cue_correlation_train = 0.9;
    double cue_correlation_eval = 0.25;  // 1 / n_options: the cue carries no information
    std::uint32_t n_concepts = 8;
    double noise_scale = 3.0;
    std::uint32_t d_visual = 16;
    double center_scale = 2.0;
    // Each image shows its concept at a visibility drawn uniformly from this range.
    double visibility_min = 0.0;
    double visibility_max = 1.0;
    // Seeds the concept centres; every stream of one task shares them.
    std::uint64_t world_seed = 7;

    std::uint32_t text_tokens() const { return kSystemTokens + kQuestionTokens + 2 * n_options + 1; }
    std::uint32_t sequence_length() const { return n_visual_tokens + text_tokens(); }
    void validate() const;
};

nlohmann::json spec_to_json(const TaskSpec& s);
// Missing keys keep their defaults. Throws ConfigError on a bad spec.
TaskSpec spec_from_json(const nlohmann::json& j);

struct ToySample {
    std::string id;
    TaskFamily family = TaskFamily::Competes;
    std::vector<float> visual;        // n_visual_tokens x d_visual
    std::vector<std::uint32_t> text;  // text token ids
    std::uint16_t gold = 0;
    std::uint16_t cue = 0;
    std::uint16_t concept_id = 0;
};

struct ToyDataset {
    TaskSpec spec;
    std::uint64_t data_seed = 0;
    double cue_correlation = 0.0;
    std::vector<ToySample> samples;
};

// Concept centres, n_concepts x d_visual.
FloatMatrix concept_centres(const TaskSpec& spec);

// One stream of n samples. With probability cue_correlation the cue names the
// gold option, otherwise one of the other options uniformly.
ToyDataset generate(const TaskSpec& spec, std::uint64_t data_seed, std::size_t n,
                    double cue_correlation, std::string_view id_prefix);

struct SplitDatasets {
    ToyDataset train;
    ToyDataset eval;
};

SplitDatasets gen_dataset(const TaskSpec& spec, std::uint64_t seed, std::size_t n_train,
                          std::size_t n_eval);

std::vector<TokenTag> token_tags(const TaskSpec& spec);
std::vector<std::uint32_t> option_token_ids(const TaskSpec& spec);

void write_dataset(const ToyDataset& ds, const std::string& path);
ToyDataset read_dataset(const std::string& path);

struct ToyConfig {
    std::uint32_t vocab = vocab::kSize;
    std::uint32_t d = 32;
    std::uint32_t n_layers = 4;
    std::uint32_t n_heads = 2;
    std::uint32_t d_ff = 128;
    std::uint32_t max_seq = 25;
    std::uint32_t d_visual = 16;
    // Round the residual stream to f32 after every block, so hidden states
    // stored in a cache replay bit-exactly. Gradient checks turn this off.
    bool round_residual = true;

    void validate() const;
    bool operator==(const ToyConfig&) const = default;
};

// Flat parameter layout in checkpoint order.
struct ParamLayout {
    struct Layer {
        std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    std::size_t tok_emb = 0, vis_w = 0, vis_b = 0, pos = 0;
    std::vector<Layer> layers;
    std::size_t lnf_g = 0, lnf_b = 0, out_w = 0, out_b = 0;
    std::size_t total = 0;

    explicit ParamLayout(const ToyConfig& c);
};

struct ToyModel {
    ToyConfig config;
    std::uint64_t train_seed = 0;
    std::vector<float> params;

    bool operator==(const ToyModel&) const = default;
};

ToyModel init_model(const ToyConfig& config, std::uint64_t seed);

std::vector<std::uint8_t> serialize_model(const ToyModel& m);
ToyModel deserialize_model(std::span<const std::uint8_t> bytes);
void write_model(const ToyModel& m, const std::string& path);
ToyModel read_model(const std::string& path);

// Shape of one forward input.
struct ToyInput {
    std::span<const float> visual;  // n_visual x d_visual
    std::span<const std::uint32_t> text;
    std::span<const std::uint32_t> option_ids;
};

ToyInput make_input(const ToySample& s, std::span<const std::uint32_t> option_ids);

struct Hook {
    InterventionSpec spec;
    const CentroidBook* book = nullptr;
    std::span<const TokenTag> tags;
    std::string_view sample_id;
};

struct ForwardResult {
    std::vector<FloatMatrix> hidden;  // post-block residual per layer, sequence x d
    std::vector<double> option_logits;
};

// Inference wrapper that converts parameters to double once.
class ToyRunner {
public:
    explicit ToyRunner(const ToyModel& model);

    const ToyConfig& config() const { return config_; }

    ForwardResult forward(const ToyInput& in, const Hook* hook = nullptr) const;
    // Runs blocks layer+1.. on a post-block residual of `layer` and reads the
    // option logits at the final position.
    std::vector<double> replay(std::uint32_t layer, const FloatMatrix& hidden,
                               std::span<const std::uint32_t> option_ids) const;

private:
    ToyConfig config_;
    std::vector<double> params_;
};

struct TrainOptions {
    std::uint64_t steps = 3000;
    std::uint32_t batch = 32;
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 42;
};

struct TrainResult {
    std::vector<double> loss_trace;  // mean batch loss per step
};

// Adam on cross-entropy over the option logits at the final position.
TrainResult train(ToyModel& model, const ToyDataset& data, const TrainOptions& options);

// Mean cross-entropy over a batch and, when grad is given, its gradient with
// respect to params (same layout). Exposed for gradient checking.
double loss_and_grad(const ToyConfig& config, std::span<const double> params,
                     std::span<const ToyInput> batch, std::span<const std::uint16_t> gold,
                     std::vector<double>* grad);

double mean_loss(const ToyModel& model, const ToyDataset& data);

// Clean pass for every sample; tags and option logits from the generator.
ActivationCache export_cache(const ToyModel& model, const ToyDataset& data, std::uint32_t layer);

// Provenance JSON stored in exported caches.
std::string provenance_json(const ToyModel& model, const ToyDataset& data, std::uint32_t layer);

}  // namespace modal_audit::toy
