#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modal_audit/matrix.hpp"

namespace modal_audit {

enum class Modality : std::uint8_t { Visual = 0, Text = 1 };
enum class Segment : std::uint8_t { System = 0, Question = 1, Options = 2, Other = 3 };

const char* to_string(Modality m);
const char* to_string(Segment s);
Modality parse_modality(std::string_view s);
Segment parse_segment(std::string_view s);

struct TokenTag {
    Modality modality = Modality::Text;
    Segment segment = Segment::Other;
    bool operator==(const TokenTag&) const = default;
};

// One prompt. hidden has one row per token, in sequence order.
struct SampleRecord {
    std::string sample_id;
    std::string task_id;
    std::vector<std::uint32_t> option_token_ids;
    std::vector<float> baseline_option_logits;
    std::uint16_t gold_option = 0;
    std::vector<TokenTag> tags;
    FloatMatrix hidden;

    std::size_t token_count() const { return tags.size(); }
    bool operator==(const SampleRecord&) const = default;
};

struct ActivationCache {
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t version = kVersion;
    std::uint32_t d = 0;
    std::uint32_t layer = 0;
    std::string source = "{}";  // UTF-8 JSON provenance, kept verbatim
    std::vector<SampleRecord> samples;

    bool operator==(const ActivationCache&) const = default;
};

// Throws ValidationError naming the offending sample.
void validate_cache(const ActivationCache& cache);

std::vector<std::uint8_t> serialize_cache(const ActivationCache& cache);
ActivationCache deserialize_cache(std::span<const std::uint8_t> bytes);

std::uint64_t write_cache(const ActivationCache& cache, const std::string& path);
ActivationCache read_cache(const std::string& path);

struct TokenSelector {
    std::optional<Modality> modality;
    std::optional<std::vector<Segment>> segments;
};

struct TokenRef {
    std::uint32_t sample_index = 0;
    std::uint32_t token_index = 0;
    bool operator==(const TokenRef&) const = default;
};

struct TokenSlice {
    FloatMatrix points;
    std::vector<TokenRef> index;
};

// Rows for every token matching the selector, in (sample, token) order.
TokenSlice slice_tokens(const ActivationCache& cache, const TokenSelector& selector);

struct CacheSummary {
    std::uint64_t samples = 0;
    std::uint64_t tokens = 0;
    std::uint64_t visual_tokens = 0;
    std::uint64_t text_by_segment[4] = {0, 0, 0, 0};
    std::vector<std::pair<std::string, std::uint64_t>> tasks;  // sorted by task id
};

CacheSummary summarize(const ActivationCache& cache);

}  // namespace modal_audit
