#include "modal_audit/decode.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>

#include "modal_audit/binary_io.hpp"
#include "modal_audit/errors.hpp"

namespace modal_audit {

namespace {

void require_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw ValidationError(std::string(what) + ": non-finite logit");
    }
}

bool is_word_char(char c) {
    return (c >= '0' && c <= '9') || (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || c == '_';
}

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

// Splits CSV text into rows of fields; quoted fields may contain separators.
std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            row.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw ValidationError("csv: unterminated quoted field");
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

std::size_t parse_index(const std::string& s, std::size_t line) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw ValidationError("csv line " + std::to_string(line) + ": bad integer '" + s + "'");
    }
    return v;
}

double parse_real(const std::string& s, std::size_t line) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw ValidationError("csv line " + std::to_string(line) + ": bad number '" + s + "'");
    }
    return v;
}

std::string read_text(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

void write_text(const std::string& path, const std::string& text) {
    write_file_bytes(path, std::span<const std::uint8_t>(
                               reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

std::vector<double> contrastive_combine(std::span<const double> logits_orig,
                                        std::span<const double> logits_erased, double alpha_cd) {
    if (logits_orig.size() != logits_erased.size()) {
        throw ValidationError("contrastive_combine: length mismatch");
    }
    if (!std::isfinite(alpha_cd)) throw ValidationError("contrastive_combine: non-finite alpha_cd");
    require_finite(logits_orig, "contrastive_combine");
    require_finite(logits_erased, "contrastive_combine");
    std::vector<double> out(logits_orig.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = logits_orig[i] + alpha_cd * (logits_orig[i] - logits_erased[i]);
    }
    return out;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.size());
    if (logits.empty()) return p;
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

GreedyAnswer greedy_answer(std::span<const double> option_logits) {
    if (option_logits.size() < 2) throw ValidationError("greedy_answer: need at least 2 options");
    require_finite(option_logits, "greedy_answer");
    GreedyAnswer g;
    for (std::size_t i = 1; i < option_logits.size(); ++i) {
        if (option_logits[i] > option_logits[g.index]) g.index = i;
    }
    g.all_equal = std::all_of(option_logits.begin(), option_logits.end(),
                              [&](double v) { return v == option_logits[0]; });
    if (g.all_equal) {
        g.confidence = 1.0 / static_cast<double>(option_logits.size());
    } else {
        g.confidence = softmax(option_logits)[g.index];
    }
    return g;
}

std::optional<std::size_t> extract_answer(std::string_view text,
                                          std::span<const std::string> options) {
    if (options.empty()) throw ValidationError("extract_answer: no options");
    std::optional<std::size_t> best;
    std::size_t best_pos = std::string_view::npos;
    for (std::size_t o = 0; o < options.size(); ++o) {
        const std::string& opt = options[o];
        if (opt.empty()) continue;
        std::size_t from = 0;
        while (true) {
            const std::size_t pos = text.find(opt, from);
            if (pos == std::string_view::npos) break;
            const bool left_ok = pos == 0 || !is_word_char(text[pos - 1]) || !is_word_char(opt.front());
            const std::size_t end = pos + opt.size();
            const bool right_ok =
                end == text.size() || !is_word_char(text[end]) || !is_word_char(opt.back());
            if (left_ok && right_ok) {
                if (pos < best_pos ||
                    (pos == best_pos && opt.size() > options[*best].size())) {
                    best = o;
                    best_pos = pos;
                }
                break;
            }
            from = pos + 1;
        }
    }
    return best;
}

std::size_t majority_vote(std::span<const std::size_t> answers, std::size_t k) {
    if (k == 0 || answers.size() < k) {
        throw ValidationError("majority_vote: need 1 <= k <= number of answers");
    }
    std::map<std::size_t, std::size_t> count;
    std::map<std::size_t, std::size_t> first_seen;
    for (std::size_t i = 0; i < k; ++i) {
        ++count[answers[i]];
        first_seen.emplace(answers[i], i);
    }
    std::size_t best = answers[0];
    for (const auto& [opt, c] : count) {
        const std::size_t bc = count[best];
        if (c > bc || (c == bc && first_seen[opt] < first_seen[best])) best = opt;
    }
    return best;
}

std::size_t sample_option(std::span<const double> logits, double temperature, Rng& rng) {
    if (logits.empty()) throw ValidationError("sample_option: no logits");
    if (!(temperature >= 0.0)) throw ValidationError("sample_option: temperature must be >= 0");
    if (temperature == 0.0) return greedy_answer(logits).index;
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& v : scaled) v /= temperature;
    const auto p = softmax(scaled);
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return i;
    }
    return p.size() - 1;
}

PairedOutcome make_outcome(std::string sample_id, std::string task_id, std::size_t gold,
                           std::span<const double> logits_orig,
                           std::span<const double> logits_erased, double alpha_cd) {
    const GreedyAnswer base = greedy_answer(logits_orig);
    const auto combined = contrastive_combine(logits_orig, logits_erased, alpha_cd);
    const GreedyAnswer cd = greedy_answer(combined);
    return {std::move(sample_id), std::move(task_id), gold,           base.index,
            cd.index,             base.confidence,    cd.confidence};
}

std::string format_outcomes_csv(std::span<const PairedOutcome> outcomes) {
    std::string out(kOutcomeHeader);
    out += '\n';
    for (const auto& o : outcomes) {
        out += csv_field(o.sample_id) + ',' + csv_field(o.task_id) + ',' + std::to_string(o.gold) +
               ',' + std::to_string(o.base_answer) + ',' + std::to_string(o.cd_answer) + ',' +
               format_double(o.base_confidence) + ',' + format_double(o.cd_confidence) + '\n';
    }
    return out;
}

std::vector<PairedOutcome> parse_outcomes_csv(std::string_view text) {
    auto rows = parse_csv(text);
    if (rows.empty()) throw ValidationError("outcome csv: missing header");
    std::string header;
    for (std::size_t i = 0; i < rows[0].size(); ++i) header += (i ? "," : "") + rows[0][i];
    if (header != kOutcomeHeader) throw ValidationError("outcome csv: unexpected header '" + header + "'");
    std::vector<PairedOutcome> out;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& f = rows[r];
        const std::size_t line = r + 1;
        if (f.size() != 7) throw ValidationError("outcome csv line " + std::to_string(line) + ": expected 7 fields");
        PairedOutcome o;
        o.sample_id = f[0];
        o.task_id = f[1];
        o.gold = parse_index(f[2], line);
        o.base_answer = parse_index(f[3], line);
        o.cd_answer = parse_index(f[4], line);
        o.base_confidence = parse_real(f[5], line);
        o.cd_confidence = parse_real(f[6], line);
        for (double c : {o.base_confidence, o.cd_confidence}) {
            if (!(c >= 0.0 && c <= 1.0)) {
                throw ValidationError("outcome csv line " + std::to_string(line) + ": confidence outside [0, 1]");
            }
        }
        out.push_back(std::move(o));
    }
    return out;
}

void write_outcomes(std::span<const PairedOutcome> outcomes, const std::string& path) {
    write_text(path, format_outcomes_csv(outcomes));
}

std::vector<PairedOutcome> read_outcomes(const std::string& path) {
    return parse_outcomes_csv(read_text(path));
}

const std::vector<double>* LogitsTable::find(std::string_view sample_id) const {
    for (std::size_t i = 0; i < sample_ids.size(); ++i) {
        if (sample_ids[i] == sample_id) return &logits[i];
    }
    return nullptr;
}

std::string format_logits_csv(const LogitsTable& table) {
    std::string out(kLogitsHeader);
    out += '\n';
    for (std::size_t i = 0; i < table.sample_ids.size(); ++i) {
        const std::string id = csv_field(table.sample_ids[i]);
        for (std::size_t o = 0; o < table.logits[i].size(); ++o) {
            out += id + ',' + std::to_string(o) + ',' + format_double(table.logits[i][o]) + '\n';
        }
    }
    return out;
}

LogitsTable parse_logits_csv(std::string_view text) {
    auto rows = parse_csv(text);
    if (rows.empty()) throw ValidationError("logits csv: missing header");
    if (rows[0].size() != 3 || rows[0][0] != "sample_id" || rows[0][1] != "option" ||
        rows[0][2] != "logit") {
        throw ValidationError("logits csv: unexpected header");
    }
    LogitsTable t;
    std::unordered_map<std::string, std::size_t> where;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& f = rows[r];
        const std::size_t line = r + 1;
        if (f.size() != 3) throw ValidationError("logits csv line " + std::to_string(line) + ": expected 3 fields");
        const std::size_t opt = parse_index(f[1], line);
        const double v = parse_real(f[2], line);
        if (!std::isfinite(v)) throw ValidationError("logits csv line " + std::to_string(line) + ": non-finite logit");
        auto it = where.find(f[0]);
        if (it == where.end()) {
            it = where.emplace(f[0], t.sample_ids.size()).first;
            t.sample_ids.push_back(f[0]);
            t.logits.emplace_back();
        }
        auto& row = t.logits[it->second];
        if (opt != row.size()) {
            throw ValidationError("logits csv line " + std::to_string(line) + ": options for '" + f[0] +
                                  "' must be consecutive from 0");
        }
        row.push_back(v);
    }
    return t;
}

LogitsTable read_logits(const std::string& path) { return parse_logits_csv(read_text(path)); }

void write_logits(const LogitsTable& table, const std::string& path) {
    write_text(path, format_logits_csv(table));
}

std::vector<PairedOutcome> decode_cache(const ActivationCache& cache, const LogitsTable& erased,
                                        double alpha_cd) {
    std::unordered_map<std::string_view, std::size_t> where;
    for (std::size_t i = 0; i < erased.sample_ids.size(); ++i) where.emplace(erased.sample_ids[i], i);
    std::vector<PairedOutcome> out;
    out.reserve(cache.samples.size());
    for (const auto& s : cache.samples) {
        auto it = where.find(s.sample_id);
        if (it == where.end()) throw ValidationError("no erased logits for sample '" + s.sample_id + "'");
        const auto& e = erased.logits[it->second];
        if (e.size() != s.baseline_option_logits.size()) {
            throw ValidationError("option count mismatch for sample '" + s.sample_id + "'");
        }
        std::vector<double> o(s.baseline_option_logits.begin(), s.baseline_option_logits.end());
        out.push_back(make_outcome(s.sample_id, s.task_id, s.gold_option, o, e, alpha_cd));
    }
    return out;
}

}  // namespace modal_audit
