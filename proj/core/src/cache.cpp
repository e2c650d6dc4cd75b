#include "modal_audit/cache.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "modal_audit/binary_io.hpp"
#include "modal_audit/errors.hpp"

namespace modal_audit {

namespace {

constexpr std::string_view kMagic = "MCAC1";

std::string sample_label(const SampleRecord& s, std::size_t i) {
    return s.sample_id.empty() ? "#" + std::to_string(i) : "'" + s.sample_id + "'";
}

void check_u16_len(std::size_t n, const char* what) {
    if (n > UINT16_MAX) throw FormatError(std::string(what) + " exceeds 65535 bytes");
}

}  // namespace

const char* to_string(Modality m) {
    switch (m) {
        case Modality::Visual: return "visual";
        case Modality::Text: return "text";
    }
    return "?";
}

const char* to_string(Segment s) {
    switch (s) {
        case Segment::System: return "system";
        case Segment::Question: return "question";
        case Segment::Options: return "options";
        case Segment::Other: return "other";
    }
    return "?";
}

Modality parse_modality(std::string_view s) {
    if (s == "visual") return Modality::Visual;
    if (s == "text") return Modality::Text;
    throw ValidationError("unknown modality: " + std::string(s));
}

Segment parse_segment(std::string_view s) {
    if (s == "system") return Segment::System;
    if (s == "question") return Segment::Question;
    if (s == "options") return Segment::Options;
    if (s == "other") return Segment::Other;
    throw ValidationError("unknown segment: " + std::string(s));
}

void validate_cache(const ActivationCache& cache) {
    if (cache.version != ActivationCache::kVersion) {
        throw ValidationError("unsupported cache version " + std::to_string(cache.version));
    }
    if (cache.d == 0) throw ValidationError("cache dimension d must be >= 1");
    if (!nlohmann::json::accept(cache.source)) {
        throw ValidationError("cache provenance is not valid JSON");
    }
    std::set<std::string_view> ids;
    for (std::size_t i = 0; i < cache.samples.size(); ++i) {
        const SampleRecord& s = cache.samples[i];
        const std::string who = "sample " + sample_label(s, i);
        if (s.sample_id.empty()) throw ValidationError(who + ": empty sample_id");
        if (!ids.insert(s.sample_id).second) throw ValidationError(who + ": duplicate sample_id");
        const std::size_t n_opt = s.option_token_ids.size();
        if (n_opt < 2) throw ValidationError(who + ": needs at least 2 options");
        if (s.baseline_option_logits.size() != n_opt) {
            throw ValidationError(who + ": logit count differs from option count");
        }
        if (s.gold_option >= n_opt) throw ValidationError(who + ": gold_option out of range");
        for (float v : s.baseline_option_logits) {
            if (!std::isfinite(v)) throw ValidationError(who + ": non-finite baseline logit");
        }
        if (s.hidden.rows != s.tags.size() || s.hidden.cols != cache.d ||
            s.hidden.data.size() != s.tags.size() * cache.d) {
            throw ValidationError(who + ": token vectors do not match d=" +
                                  std::to_string(cache.d));
        }
        bool seen_text = false;
        for (std::size_t t = 0; t < s.tags.size(); ++t) {
            const TokenTag tag = s.tags[t];
            if (static_cast<unsigned>(tag.modality) > 1) {
                throw ValidationError(who + ": bad modality at token " + std::to_string(t));
            }
            if (static_cast<unsigned>(tag.segment) > 3) {
                throw ValidationError(who + ": bad segment at token " + std::to_string(t));
            }
            if (tag.modality == Modality::Visual) {
                if (tag.segment != Segment::Other) {
                    throw ValidationError(who + ": visual token " + std::to_string(t) +
                                          " must carry segment other");
                }
                if (seen_text) {
                    throw ValidationError(who + ": visual token " + std::to_string(t) +
                                          " follows text");
                }
            } else {
                seen_text = true;
            }
        }
        for (float v : s.hidden.data) {
            if (!std::isfinite(v)) throw ValidationError(who + ": non-finite activation");
        }
    }
}

std::vector<std::uint8_t> serialize_cache(const ActivationCache& cache) {
    for (std::size_t i = 0; i < cache.samples.size(); ++i) {
        const auto& s = cache.samples[i];
        if (s.hidden.cols != cache.d || s.hidden.rows != s.tags.size()) {
            throw FormatError("sample " + sample_label(s, i) + " has width " +
                              std::to_string(s.hidden.cols) + ", cache d is " +
                              std::to_string(cache.d));
        }
    }
    validate_cache(cache);

    ByteWriter w;
    w.raw(kMagic);
    w.u32(cache.version);
    w.u32(cache.d);
    w.u32(cache.layer);
    w.u32(static_cast<std::uint32_t>(cache.source.size()));
    w.raw(cache.source);
    w.u64(cache.samples.size());
    for (const auto& s : cache.samples) {
        check_u16_len(s.sample_id.size(), "sample_id");
        check_u16_len(s.task_id.size(), "task_id");
        if (s.option_token_ids.size() > UINT16_MAX) throw FormatError("too many options");
        w.u16(static_cast<std::uint16_t>(s.sample_id.size()));
        w.raw(s.sample_id);
        w.u16(static_cast<std::uint16_t>(s.task_id.size()));
        w.raw(s.task_id);
        w.u16(static_cast<std::uint16_t>(s.option_token_ids.size()));
        for (auto id : s.option_token_ids) w.u32(id);
        w.f32s(s.baseline_option_logits);
        w.u16(s.gold_option);
        w.u32(static_cast<std::uint32_t>(s.tags.size()));
        for (std::size_t t = 0; t < s.tags.size(); ++t) {
            w.u8(static_cast<std::uint8_t>(s.tags[t].modality));
            w.u8(static_cast<std::uint8_t>(s.tags[t].segment));
            w.f32s(s.hidden.row(t));
        }
    }
    return w.take();
}

ActivationCache deserialize_cache(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    expect_magic(r, kMagic, "activation cache");
    ActivationCache c;
    c.version = r.u32();
    if (c.version != ActivationCache::kVersion) {
        throw UnsupportedFormatError("unsupported cache version " + std::to_string(c.version));
    }
    c.d = r.u32();
    c.layer = r.u32();
    const std::uint32_t meta_len = r.u32();
    c.source = r.raw(meta_len);
    const std::uint64_t count = r.u64();
    // Each sample needs at least 12 bytes; reject absurd counts before allocating.
    if (count > r.remaining() / 12) {
        throw CorruptionError("sample count " + std::to_string(count) + " exceeds stream size",
                              r.offset());
    }
    c.samples.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        SampleRecord s;
        s.sample_id = r.raw(r.u16());
        s.task_id = r.raw(r.u16());
        const std::uint16_t n_opt = r.u16();
        s.option_token_ids.resize(n_opt);
        for (auto& id : s.option_token_ids) id = r.u32();
        s.baseline_option_logits.resize(n_opt);
        r.f32s(s.baseline_option_logits);
        s.gold_option = r.u16();
        const std::uint32_t n_tok = r.u32();
        const std::uint64_t per_token = 2 + 4ULL * c.d;
        if (static_cast<std::uint64_t>(n_tok) * per_token > r.remaining()) {
            // Point at the first token record that cannot be read in full.
            const std::uint64_t whole = r.remaining() / per_token;
            throw CorruptionError("truncated token data in sample '" + s.sample_id + "'",
                                  r.offset() + whole * per_token);
        }
        s.tags.resize(n_tok);
        s.hidden = FloatMatrix(n_tok, c.d);
        for (std::uint32_t t = 0; t < n_tok; ++t) {
            s.tags[t].modality = static_cast<Modality>(r.u8());
            s.tags[t].segment = static_cast<Segment>(r.u8());
            r.f32s(s.hidden.row(t));
        }
        c.samples.push_back(std::move(s));
    }
    r.expect_end("activation cache");
    validate_cache(c);
    return c;
}

std::uint64_t write_cache(const ActivationCache& cache, const std::string& path) {
    auto bytes = serialize_cache(cache);
    write_file_bytes(path, bytes);
    return bytes.size();
}

ActivationCache read_cache(const std::string& path) { return deserialize_cache(read_file_bytes(path)); }

TokenSlice slice_tokens(const ActivationCache& cache, const TokenSelector& selector) {
    if (!selector.modality && !selector.segments) {
        throw ValidationError("token selector must name a modality or segments");
    }
    TokenSlice out;
    out.points.cols = cache.d;
    for (std::size_t si = 0; si < cache.samples.size(); ++si) {
        const auto& s = cache.samples[si];
        for (std::size_t t = 0; t < s.tags.size(); ++t) {
            const TokenTag tag = s.tags[t];
            if (selector.modality && tag.modality != *selector.modality) continue;
            if (selector.segments &&
                std::find(selector.segments->begin(), selector.segments->end(), tag.segment) ==
                    selector.segments->end()) {
                continue;
            }
            out.points.append_row(s.hidden.row(t));
            out.index.push_back({static_cast<std::uint32_t>(si), static_cast<std::uint32_t>(t)});
        }
    }
    return out;
}

CacheSummary summarize(const ActivationCache& cache) {
    CacheSummary out;
    std::map<std::string, std::uint64_t> tasks;
    out.samples = cache.samples.size();
    for (const auto& s : cache.samples) {
        ++tasks[s.task_id];
        for (const auto& tag : s.tags) {
            ++out.tokens;
            if (tag.modality == Modality::Visual) ++out.visual_tokens;
            else ++out.text_by_segment[static_cast<int>(tag.segment)];
        }
    }
    out.tasks.assign(tasks.begin(), tasks.end());
    return out;
}

}  // namespace modal_audit
