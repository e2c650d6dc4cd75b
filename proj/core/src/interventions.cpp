#include "modal_audit/interventions.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "modal_audit/binary_io.hpp"
#include "modal_audit/errors.hpp"
#include "modal_audit/rng.hpp"

namespace modal_audit {

namespace {

constexpr std::string_view kPatchMagic = "MCPT1";

constexpr std::uint64_t kSaltDirection = 0x52444952ULL;
constexpr std::uint64_t kSaltNoise = 0x4E4F4953ULL;
constexpr std::uint64_t kSaltShuffle = 0x53485546ULL;

void check_inputs(const FloatMatrix& hidden, std::span<const std::uint32_t> mask,
                  const CentroidBook& book) {
    if (book.d != hidden.cols) {
        throw ValidationError("book dimension " + std::to_string(book.d) +
                              " does not match hidden width " + std::to_string(hidden.cols));
    }
    for (std::uint32_t i : mask) {
        if (i >= hidden.rows) {
            throw ValidationError("mask index " + std::to_string(i) + " out of range for " +
                                  std::to_string(hidden.rows) + " tokens");
        }
    }
}

void check_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha_interp must be in [0, 1]");
}

// Moves each masked row by the real erasure's displacement length along a
// random unit direction drawn from a per-token stream.
FloatMatrix displace_randomly(const FloatMatrix& hidden, std::span<const std::uint32_t> mask,
                              const CentroidBook& book, double dose_alpha,
                              std::uint64_t control_seed, std::string_view sample_id,
                              std::uint64_t salt, bool key_on_alpha) {
    check_inputs(hidden, mask, book);
    check_alpha(dose_alpha);
    FloatMatrix out = hidden;
    const std::size_t d = hidden.cols;
    const std::uint64_t sid = fnv1a64(sample_id);
    const std::uint64_t akey = key_on_alpha ? std::bit_cast<std::uint64_t>(dose_alpha) : 0;
    std::vector<double> u(d);
    for (std::uint32_t t : mask) {
        auto x = hidden.row(t);
        const Assignment a = assign_nearest(book, x);
        const double length = (1.0 - dose_alpha) * std::sqrt(a.squared_distance);
        if (!(length > 0.0)) continue;
        Rng rng = Rng::keyed({control_seed, sid, t, salt, akey});
        double norm2 = 0.0;
        while (!(norm2 > 0.0)) {
            norm2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                u[j] = rng.normal();
                norm2 += u[j] * u[j];
            }
        }
        const double scale = length / std::sqrt(norm2);
        auto y = out.row(t);
        for (std::size_t j = 0; j < d; ++j) {
            y[j] = static_cast<float>(static_cast<double>(x[j]) + scale * u[j]);
        }
    }
    return out;
}

}  // namespace

const char* to_string(InterventionKind k) {
    switch (k) {
        case InterventionKind::None: return "none";
        case InterventionKind::Centroid: return "centroid";
        case InterventionKind::RandomDirection: return "random_direction";
        case InterventionKind::MatchedNoise: return "matched_noise";
        case InterventionKind::ShuffledCentroid: return "shuffled_centroid";
    }
    return "?";
}

InterventionKind parse_intervention_kind(std::string_view s) {
    if (s == "none") return InterventionKind::None;
    if (s == "centroid") return InterventionKind::Centroid;
    if (s == "random_direction") return InterventionKind::RandomDirection;
    if (s == "matched_noise") return InterventionKind::MatchedNoise;
    if (s == "shuffled_centroid") return InterventionKind::ShuffledCentroid;
    throw ValidationError("unknown intervention kind: " + std::string(s));
}

bool SegmentSelection::contains(Segment s) const {
    return all || std::find(segments.begin(), segments.end(), s) != segments.end();
}

std::string SegmentSelection::name() const {
    if (all) return "all";
    std::string out;
    for (Segment s : segments) {
        if (!out.empty()) out += ",";
        out += to_string(s);
    }
    return out.empty() ? "none" : out;
}

SegmentSelection parse_segment_selection(std::string_view s) {
    if (s == "all" || s == "all_text") return SegmentSelection::all_tokens();
    SegmentSelection sel;
    while (!s.empty()) {
        const auto comma = s.find(',');
        std::string_view part = s.substr(0, comma);
        if (!part.empty()) {
            Segment seg = parse_segment(part);
            if (!sel.contains(seg)) sel.segments.push_back(seg);
        }
        if (comma == std::string_view::npos) break;
        s.remove_prefix(comma + 1);
    }
    return sel;
}

std::vector<std::uint32_t> build_mask(std::span<const TokenTag> tags, const InterventionSpec& spec) {
    std::vector<std::uint32_t> mask;
    for (std::size_t i = 0; i < tags.size(); ++i) {
        if (tags[i].modality != spec.modality) continue;
        if (!spec.segments.all && !spec.segments.contains(tags[i].segment)) continue;
        mask.push_back(static_cast<std::uint32_t>(i));
    }
    return mask;
}

std::vector<std::uint32_t> build_mask(const SampleRecord& sample, const InterventionSpec& spec) {
    return build_mask(sample.tags, spec);
}

FloatMatrix apply_centroid_erasure(const FloatMatrix& hidden, std::span<const std::uint32_t> mask,
                                   const CentroidBook& book, double alpha_interp) {
    check_inputs(hidden, mask, book);
    check_alpha(alpha_interp);
    FloatMatrix out = hidden;
    for (std::uint32_t t : mask) {
        const Assignment a = assign_nearest(book, hidden.row(t));
        interpolate_toward(hidden.row(t), book.centroid(a.index), alpha_interp, out.row(t));
    }
    return out;
}

FloatMatrix apply_random_direction(const FloatMatrix& hidden, std::span<const std::uint32_t> mask,
                                   const CentroidBook& book, double dose_alpha,
                                   std::uint64_t control_seed, std::string_view sample_id) {
    return displace_randomly(hidden, mask, book, dose_alpha, control_seed, sample_id,
                             kSaltDirection, false);
}

FloatMatrix apply_matched_noise(const FloatMatrix& hidden, std::span<const std::uint32_t> mask,
                                const CentroidBook& book, double dose_alpha,
                                std::uint64_t control_seed, std::string_view sample_id) {
    return displace_randomly(hidden, mask, book, dose_alpha, control_seed, sample_id, kSaltNoise,
                             true);
}

std::vector<std::uint32_t> shuffled_targets(std::span<const std::uint32_t> true_assignments,
                                            std::uint32_t K, std::uint64_t control_seed,
                                            std::string_view sample_id) {
    const std::size_t m = true_assignments.size();
    std::vector<std::uint32_t> out(true_assignments.begin(), true_assignments.end());
    if (m == 0) return out;
    Rng rng = Rng::keyed({control_seed, fnv1a64(sample_id), kSaltShuffle});
    if (m == 1) {
        if (K < 2) return out;
        auto k = static_cast<std::uint32_t>(rng.below(K - 1));
        if (k >= true_assignments[0]) ++k;
        out[0] = k;
        return out;
    }
    // Sattolo's algorithm: a uniformly random single cycle, hence a derangement.
    std::vector<std::size_t> perm(m);
    for (std::size_t i = 0; i < m; ++i) perm[i] = i;
    for (std::size_t i = m - 1; i > 0; --i) {
        const std::size_t j = rng.below(i);
        std::swap(perm[i], perm[j]);
    }
    for (std::size_t i = 0; i < m; ++i) out[i] = true_assignments[perm[i]];
    return out;
}

FloatMatrix apply_shuffled_centroid(const FloatMatrix& hidden, std::span<const std::uint32_t> mask,
                                    const CentroidBook& book, double alpha_interp,
                                    std::uint64_t control_seed, std::string_view sample_id) {
    check_inputs(hidden, mask, book);
    check_alpha(alpha_interp);
    std::vector<std::uint32_t> assigned(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        assigned[i] = assign_nearest(book, hidden.row(mask[i])).index;
    }
    const auto targets = shuffled_targets(assigned, book.K, control_seed, sample_id);
    FloatMatrix out = hidden;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        interpolate_toward(hidden.row(mask[i]), book.centroid(targets[i]), alpha_interp,
                           out.row(mask[i]));
    }
    return out;
}

FloatMatrix apply_intervention(const FloatMatrix& hidden, std::span<const TokenTag> tags,
                               std::string_view sample_id, const InterventionSpec& spec,
                               const CentroidBook* book) {
    if (tags.size() != hidden.rows) throw ValidationError("tag count differs from hidden rows");
    if (spec.kind == InterventionKind::None) return hidden;
    if (book == nullptr) throw ValidationError("intervention needs a centroid book");
    const auto mask = build_mask(tags, spec);
    switch (spec.kind) {
        case InterventionKind::Centroid:
            return apply_centroid_erasure(hidden, mask, *book, spec.alpha_interp);
        case InterventionKind::RandomDirection:
            return apply_random_direction(hidden, mask, *book, spec.alpha_interp,
                                          spec.control_seed, sample_id);
        case InterventionKind::MatchedNoise:
            return apply_matched_noise(hidden, mask, *book, spec.alpha_interp, spec.control_seed,
                                       sample_id);
        case InterventionKind::ShuffledCentroid:
            return apply_shuffled_centroid(hidden, mask, *book, spec.alpha_interp,
                                           spec.control_seed, sample_id);
        case InterventionKind::None:
            break;
    }
    return hidden;
}

std::vector<std::uint8_t> serialize_patch(const PatchSet& p) {
    ByteWriter w;
    w.raw(kPatchMagic);
    w.u32(p.d);
    w.u32(p.layer);
    w.u64(p.samples.size());
    for (const auto& s : p.samples) {
        if (s.sample_id.size() > UINT16_MAX) throw FormatError("sample_id exceeds 65535 bytes");
        w.u16(static_cast<std::uint16_t>(s.sample_id.size()));
        w.raw(s.sample_id);
        w.u32(static_cast<std::uint32_t>(s.patches.size()));
        for (const auto& t : s.patches) {
            if (t.vector.size() != p.d) {
                throw FormatError("patch vector for '" + s.sample_id + "' token " +
                                  std::to_string(t.token_index) + " has wrong width");
            }
            w.u32(t.token_index);
            w.f32s(t.vector);
        }
    }
    return w.take();
}

PatchSet deserialize_patch(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    expect_magic(r, kPatchMagic, "patch");
    PatchSet p;
    p.d = r.u32();
    p.layer = r.u32();
    const std::uint64_t count = r.u64();
    if (count > r.remaining() / 6) {
        throw CorruptionError("sample count exceeds stream size", r.offset());
    }
    p.samples.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        SamplePatch s;
        s.sample_id = r.raw(r.u16());
        const std::uint32_t n = r.u32();
        const std::uint64_t per = 4 + 4ULL * p.d;
        if (static_cast<std::uint64_t>(n) * per > r.remaining()) {
            throw CorruptionError("truncated patch data for '" + s.sample_id + "'",
                                  r.offset() + (r.remaining() / per) * per);
        }
        s.patches.resize(n);
        for (auto& t : s.patches) {
            t.token_index = r.u32();
            t.vector.resize(p.d);
            r.f32s(t.vector);
        }
        p.samples.push_back(std::move(s));
    }
    r.expect_end("patch");
    return p;
}

void write_patch(const PatchSet& p, const std::string& path) {
    write_file_bytes(path, serialize_patch(p));
}

PatchSet read_patch(const std::string& path) { return deserialize_patch(read_file_bytes(path)); }

PatchSet build_patch(const ActivationCache& cache, const CentroidBook* book,
                     const InterventionSpec& spec) {
    if (spec.layer != cache.layer) {
        throw ValidationError("intervention layer " + std::to_string(spec.layer) +
                              " differs from cache layer " + std::to_string(cache.layer));
    }
    if (book && book->layer != cache.layer) {
        throw ValidationError("book layer " + std::to_string(book->layer) +
                              " differs from cache layer " + std::to_string(cache.layer));
    }
    PatchSet p;
    p.d = cache.d;
    p.layer = cache.layer;
    for (const auto& s : cache.samples) {
        SamplePatch sp;
        sp.sample_id = s.sample_id;
        const auto mask = build_mask(s, spec);
        const FloatMatrix h = apply_intervention(s.hidden, s.tags, s.sample_id, spec, book);
        for (std::uint32_t t : mask) {
            auto row = h.row(t);
            sp.patches.push_back({t, std::vector<float>(row.begin(), row.end())});
        }
        p.samples.push_back(std::move(sp));
    }
    return p;
}

}  // namespace modal_audit
