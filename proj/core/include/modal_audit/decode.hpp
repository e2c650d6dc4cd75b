#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modal_audit/cache.hpp"
#include "modal_audit/rng.hpp"

namespace modal_audit {

// logits_orig + alpha_cd * (logits_orig - logits_erased), elementwise.
std::vector<double> contrastive_combine(std::span<const double> logits_orig,
                                        std::span<const double> logits_erased, double alpha_cd);

struct GreedyAnswer {
    std::size_t index = 0;
    double confidence = 0.0;  // softmax over the option logits
    bool all_equal = false;
};

GreedyAnswer greedy_answer(std::span<const double> option_logits);

std::vector<double> softmax(std::span<const double> logits);

// Option whose first standalone occurrence in text comes earliest. A match may
// not touch letters or digits on either side. At equal positions the longer
// option wins, then the lower index.
std::optional<std::size_t> extract_answer(std::string_view generated_text,
                                          std::span<const std::string> options);

// Modal answer among the first k; ties go to whichever tied option appeared first.
std::size_t majority_vote(std::span<const std::size_t> answers, std::size_t k);

// Draw from softmax(logits / temperature). temperature 0 means greedy.
std::size_t sample_option(std::span<const double> logits, double temperature, Rng& rng);

struct PairedOutcome {
    std::string sample_id;
    std::string task_id;
    std::size_t gold = 0;
    std::size_t base_answer = 0;
    std::size_t cd_answer = 0;
    double base_confidence = 0.0;
    double cd_confidence = 0.0;

    bool base_correct() const { return base_answer == gold; }
    bool cd_correct() const { return cd_answer == gold; }
    bool operator==(const PairedOutcome&) const = default;
};

PairedOutcome make_outcome(std::string sample_id, std::string task_id, std::size_t gold,
                           std::span<const double> logits_orig,
                           std::span<const double> logits_erased, double alpha_cd);

inline constexpr std::string_view kOutcomeHeader =
    "sample_id,task_id,gold,base_answer,cd_answer,base_confidence,cd_confidence";

std::string format_outcomes_csv(std::span<const PairedOutcome> outcomes);
std::vector<PairedOutcome> parse_outcomes_csv(std::string_view text);
void write_outcomes(std::span<const PairedOutcome> outcomes, const std::string& path);
std::vector<PairedOutcome> read_outcomes(const std::string& path);

// Option logits produced outside the core (for example by a replay of a patch
// file through a real model). Long format: header "sample_id,option,logit",
// one row per option, options numbered from 0 in order.
struct LogitsTable {
    std::vector<std::string> sample_ids;
    std::vector<std::vector<double>> logits;

    const std::vector<double>* find(std::string_view sample_id) const;
};

inline constexpr std::string_view kLogitsHeader = "sample_id,option,logit";

std::string format_logits_csv(const LogitsTable& table);
LogitsTable parse_logits_csv(std::string_view text);
LogitsTable read_logits(const std::string& path);
void write_logits(const LogitsTable& table, const std::string& path);

// Pairs a cache's baseline logits with externally computed erased logits.
std::vector<PairedOutcome> decode_cache(const ActivationCache& cache, const LogitsTable& erased,
                                        double alpha_cd);

// Shortest round-trippable decimal form of a double.
std::string format_double(double v);

}  // namespace modal_audit
