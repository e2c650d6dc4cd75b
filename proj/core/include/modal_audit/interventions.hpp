#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modal_audit/cache.hpp"
#include "modal_audit/centroids.hpp"
#include "modal_audit/matrix.hpp"

namespace modal_audit {

enum class InterventionKind : std::uint8_t {
    None,
    Centroid,
    RandomDirection,
    MatchedNoise,
    ShuffledCentroid,
};

const char* to_string(InterventionKind k);
InterventionKind parse_intervention_kind(std::string_view s);

// Which segments to touch. all == true means every token of the chosen
// modality (for text: system, question, options and text-tagged other).
struct SegmentSelection {
    bool all = false;
    std::vector<Segment> segments;

    static SegmentSelection all_tokens() { return {true, {}}; }
    static SegmentSelection only(std::vector<Segment> s) { return {false, std::move(s)}; }
    bool contains(Segment s) const;
    std::string name() const;
};

// "all", "all_text", or a comma list such as "system,options".
SegmentSelection parse_segment_selection(std::string_view s);

struct InterventionSpec {
    std::uint32_t layer = 0;
    Modality modality = Modality::Text;
    SegmentSelection segments = SegmentSelection::all_tokens();
    // For the random-direction and matched-noise controls this is the dose of
    // the real erasure being matched: the displacement length is taken from
    // it, the direction never depends on it.
    double alpha_interp = 0.0;
    InterventionKind kind = InterventionKind::Centroid;
    std::uint64_t control_seed = 0;
};

std::vector<std::uint32_t> build_mask(std::span<const TokenTag> tags, const InterventionSpec& spec);
std::vector<std::uint32_t> build_mask(const SampleRecord& sample, const InterventionSpec& spec);

FloatMatrix apply_centroid_erasure(const FloatMatrix& hidden, std::span<const std::uint32_t> mask,
                                   const CentroidBook& book, double alpha_interp);

FloatMatrix apply_random_direction(const FloatMatrix& hidden, std::span<const std::uint32_t> mask,
                                   const CentroidBook& book, double dose_alpha,
                                   std::uint64_t control_seed, std::string_view sample_id);

FloatMatrix apply_matched_noise(const FloatMatrix& hidden, std::span<const std::uint32_t> mask,
                                const CentroidBook& book, double dose_alpha,
                                std::uint64_t control_seed, std::string_view sample_id);

FloatMatrix apply_shuffled_centroid(const FloatMatrix& hidden, std::span<const std::uint32_t> mask,
                                    const CentroidBook& book, double alpha_interp,
                                    std::uint64_t control_seed, std::string_view sample_id);

// Target centroid of each masked token under the shuffled control, in mask order.
std::vector<std::uint32_t> shuffled_targets(std::span<const std::uint32_t> true_assignments,
                                            std::uint32_t K, std::uint64_t control_seed,
                                            std::string_view sample_id);

// Dispatch on spec.kind. Validates alpha, book width and mask range.
FloatMatrix apply_intervention(const FloatMatrix& hidden, std::span<const TokenTag> tags,
                               std::string_view sample_id, const InterventionSpec& spec,
                               const CentroidBook* book);

// Patch files carry replacement vectors for an external model to splice in.
struct TokenPatch {
    std::uint32_t token_index = 0;
    std::vector<float> vector;
    bool operator==(const TokenPatch&) const = default;
};

struct SamplePatch {
    std::string sample_id;
    std::vector<TokenPatch> patches;
    bool operator==(const SamplePatch&) const = default;
};

struct PatchSet {
    std::uint32_t d = 0;
    std::uint32_t layer = 0;
    std::vector<SamplePatch> samples;
    bool operator==(const PatchSet&) const = default;
};

std::vector<std::uint8_t> serialize_patch(const PatchSet& p);
PatchSet deserialize_patch(std::span<const std::uint8_t> bytes);
void write_patch(const PatchSet& p, const std::string& path);
PatchSet read_patch(const std::string& path);

// One patch record per masked token of every sample.
PatchSet build_patch(const ActivationCache& cache, const CentroidBook* book,
                     const InterventionSpec& spec);

}  // namespace modal_audit
