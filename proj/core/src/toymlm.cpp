#include "modal_audit/toymlm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "modal_audit/binary_io.hpp"
#include "modal_audit/errors.hpp"
#include "modal_audit/rng.hpp"

namespace modal_audit::toy {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using CMat = Eigen::Map<const Mat>;
using MMat = Eigen::Map<Mat>;
using CVec = Eigen::Map<const RowVec>;
using MVec = Eigen::Map<RowVec>;

constexpr double kLnEps = 1e-5;
constexpr std::uint64_t kSaltInit = 0x1A17;
constexpr std::uint64_t kSaltBatch = 0xBA7C;
constexpr std::uint64_t kSaltWorld = 0x3011D;

std::uint64_t stream_key(std::string_view s) { return fnv1a64(s); }

}  // namespace

const char* to_string(TaskFamily f) {
    return f == TaskFamily::Competes ? "competes" : "needed";
}

TaskFamily parse_task_family(std::string_view s) {
    if (s == "competes") return TaskFamily::Competes;
    if (s == "needed") return TaskFamily::Needed;
    throw ConfigError("unknown task family '" + std::string(s) + "'");
}

void TaskSpec::validate() const {
    if (n_options < 2 || n_options > 4) throw ConfigError("n_options must be in [2, 4]");
    if (n_concepts < n_options || n_concepts > vocab::kMaxConcepts)
        throw ConfigError("n_concepts must be in [n_options, 16]");
    if (n_visual_tokens < 1) throw ConfigError("n_visual_tokens must be >= 1");
    if (d_visual < 1) throw ConfigError("d_visual must be >= 1");
    for (double rho : {cue_correlation_train, cue_correlation_eval})
        if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("cue correlation must be in [0, 1]");
    if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) throw ConfigError("noise_scale must be >= 0");
    if (!(center_scale >= 0.0) || !std::isfinite(center_scale)) throw ConfigError("center_scale must be >= 0");
    if (!(visibility_min >= 0.0 && visibility_min <= visibility_max) || !std::isfinite(visibility_max))
        throw ConfigError("visibility range must satisfy 0 <= min <= max");
}

FloatMatrix concept_centres(const TaskSpec& spec) {
    FloatMatrix c(spec.n_concepts, spec.d_visual);
    Rng rng = Rng::keyed({spec.world_seed, kSaltWorld});
    for (auto& v : c.data) v = static_cast<float>(spec.center_scale * rng.normal());
    return c;
}

std::vector<TokenTag> token_tags(const TaskSpec& spec) {
    std::vector<TokenTag> tags;
    tags.reserve(spec.sequence_length());
    for (std::uint32_t i = 0; i < spec.n_visual_tokens; ++i) tags.push_back({Modality::Visual, Segment::Other});
    for (std::uint32_t i = 0; i < kSystemTokens; ++i) tags.push_back({Modality::Text, Segment::System});
    for (std::uint32_t i = 0; i < kQuestionTokens; ++i) tags.push_back({Modality::Text, Segment::Question});
    for (std::uint32_t i = 0; i < 2 * spec.n_options; ++i) tags.push_back({Modality::Text, Segment::Options});
    tags.push_back({Modality::Text, Segment::Other});
    return tags;
}

std::vector<std::uint32_t> option_token_ids(const TaskSpec& spec) {
    std::vector<std::uint32_t> ids(spec.n_options);
    for (std::uint32_t j = 0; j < spec.n_options; ++j) ids[j] = vocab::kLabelBase + j;
    return ids;
}

ToyDataset generate(const TaskSpec& spec, std::uint64_t data_seed, std::size_t n,
                    double cue_correlation, std::string_view id_prefix) {
    spec.validate();
    if (!(cue_correlation >= 0.0 && cue_correlation <= 1.0))
        throw ConfigError("cue correlation must be in [0, 1]");
    const FloatMatrix centres = concept_centres(spec);
    const std::uint32_t n_opt = spec.n_options;

    ToyDataset ds;
    ds.spec = spec;
    ds.data_seed = data_seed;
    ds.cue_correlation = cue_correlation;
    ds.samples.reserve(n);
    std::vector<std::uint32_t> pool(spec.n_concepts);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = Rng::keyed({data_seed, static_cast<std::uint64_t>(spec.family), i});
        ToySample s;
        s.id = std::string(id_prefix) + "-" + std::to_string(i);
        s.family = spec.family;

        const auto concept_id = static_cast<std::uint32_t>(rng.below(spec.n_concepts));
        const double visibility =
            spec.visibility_min + (spec.visibility_max - spec.visibility_min) * rng.uniform();
        s.visual.resize(static_cast<std::size_t>(spec.n_visual_tokens) * spec.d_visual);
        for (std::uint32_t t = 0; t < spec.n_visual_tokens; ++t)
            for (std::uint32_t j = 0; j < spec.d_visual; ++j)
                s.visual[t * spec.d_visual + j] = static_cast<float>(
                    visibility * centres.row(concept_id)[j] + spec.noise_scale * rng.normal());

        // Distractors by partial Fisher-Yates over the other concepts.
        for (std::uint32_t c = 0; c < spec.n_concepts; ++c) pool[c] = c;
        std::swap(pool[concept_id], pool[spec.n_concepts - 1]);
        std::vector<std::uint32_t> concepts{concept_id};
        for (std::uint32_t k = 0; k + 1 < n_opt; ++k) {
            const std::uint32_t remaining = spec.n_concepts - 1 - k;
            const auto pick = static_cast<std::uint32_t>(rng.below(remaining));
            concepts.push_back(pool[pick]);
            std::swap(pool[pick], pool[remaining - 1]);
        }
        std::sort(concepts.begin(), concepts.end());

        std::uint32_t detail = 0;
        std::uint32_t ask = 0;
        if (spec.family == TaskFamily::Competes) {
            s.gold = static_cast<std::uint16_t>(
                std::find(concepts.begin(), concepts.end(), concept_id) - concepts.begin());
            ask = vocab::kAskCompetes;
            detail = vocab::kFillerBase + static_cast<std::uint32_t>(rng.below(4));
        } else {
            s.gold = static_cast<std::uint16_t>(rng.below(n_opt));
            ask = vocab::kAskNeeded;
            detail = vocab::kPositionBase + s.gold;
        }
        if (rng.uniform() < cue_correlation) {
            s.cue = s.gold;
        } else {
            auto other = static_cast<std::uint16_t>(rng.below(n_opt - 1));
            s.cue = other >= s.gold ? static_cast<std::uint16_t>(other + 1) : other;
        }
        s.concept_id = static_cast<std::uint16_t>(concept_id);

        for (std::uint32_t k = 0; k < kSystemTokens; ++k)
            s.text.push_back(vocab::kSystemBase + static_cast<std::uint32_t>(rng.below(vocab::kSystemWords)));
        s.text.push_back(ask);
        s.text.push_back(detail);
        s.text.push_back(vocab::kHint);
        s.text.push_back(vocab::kLabelBase + s.cue);
        for (std::uint32_t j = 0; j < n_opt; ++j) {
            s.text.push_back(vocab::kLabelBase + j);
            s.text.push_back(vocab::kConceptBase + concepts[j]);
        }
        s.text.push_back(vocab::kAnswer);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

SplitDatasets gen_dataset(const TaskSpec& spec, std::uint64_t seed, std::size_t n_train,
                          std::size_t n_eval) {
    const std::string fam = to_string(spec.family);
    SplitDatasets out;
    out.train = generate(spec, derive_seed({seed, stream_key("train")}), n_train,
                         spec.cue_correlation_train, fam + "-train");
    out.eval = generate(spec, derive_seed({seed, stream_key("eval")}), n_eval,
                        spec.cue_correlation_eval, fam + "-eval");
    return out;
}

nlohmann::json spec_to_json(const TaskSpec& s) {
    return {{"family", to_string(s.family)},
            {"n_visual_tokens", s.n_visual_tokens},
            {"n_options", s.n_options},
            {"cue_correlation_train", s.cue_correlation_train},
            {"cue_correlation_eval", s.cue_correlation_eval},
            {"n_concepts", s.n_concepts},
            {"noise_scale", s.noise_scale},
            {"d_visual", s.d_visual},
            {"center_scale", s.center_scale},
            {"visibility_min", s.visibility_min},
            {"visibility_max", s.visibility_max},
            {"world_seed", s.world_seed}};
}

TaskSpec spec_from_json(const nlohmann::json& j) {
    TaskSpec s;
    if (j.contains("family")) s.family = parse_task_family(j.at("family").get<std::string>());
    s.n_visual_tokens = j.value("n_visual_tokens", s.n_visual_tokens);
    s.n_options = j.value("n_options", s.n_options);
    s.cue_correlation_train = j.value("cue_correlation_train", s.cue_correlation_train);
    s.cue_correlation_eval = j.value("cue_correlation_eval", s.cue_correlation_eval);
    s.n_concepts = j.value("n_concepts", s.n_concepts);
    s.noise_scale = j.value("noise_scale", s.noise_scale);
    s.d_visual = j.value("d_visual", s.d_visual);
    s.center_scale = j.value("center_scale", s.center_scale);
    s.visibility_min = j.value("visibility_min", s.visibility_min);
    s.visibility_max = j.value("visibility_max", s.visibility_max);
    s.world_seed = j.value("world_seed", s.world_seed);
    s.validate();
    return s;
}

void write_dataset(const ToyDataset& ds, const std::string& path) {
    ByteWriter w;
    w.raw("MCDS1");
    const std::string meta = spec_to_json(ds.spec).dump();
    w.u32(static_cast<std::uint32_t>(meta.size()));
    w.raw(meta);
    w.u64(ds.data_seed);
    w.f64(ds.cue_correlation);
    w.u64(ds.samples.size());
    for (const auto& s : ds.samples) {
        w.u16(static_cast<std::uint16_t>(s.id.size()));
        w.raw(s.id);
        w.u16(s.gold);
        w.u16(s.cue);
        w.u16(s.concept_id);
        w.u32(static_cast<std::uint32_t>(s.text.size()));
        for (auto t : s.text) w.u32(t);
        w.f32s(s.visual);
    }
    write_file_bytes(path, w.bytes());
}

ToyDataset read_dataset(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader r(bytes);
    expect_magic(r, "MCDS1", "toy dataset");
    ToyDataset ds;
    const std::uint32_t meta_len = r.u32();
    auto meta = nlohmann::json::parse(r.raw(meta_len), nullptr, false);
    if (meta.is_discarded()) throw FormatError("toy dataset header is not valid JSON");
    try {
        ds.spec = spec_from_json(meta);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("toy dataset header: ") + e.what());
    }
    ds.data_seed = r.u64();
    ds.cue_correlation = r.f64();
    const std::uint64_t n = r.u64();
    const std::size_t vis = static_cast<std::size_t>(ds.spec.n_visual_tokens) * ds.spec.d_visual;
    if (n > r.remaining()) throw CorruptionError("toy dataset sample count exceeds file size", r.offset());
    ds.samples.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        ToySample s;
        s.family = ds.spec.family;
        s.id = r.raw(r.u16());
        s.gold = r.u16();
        s.cue = r.u16();
        s.concept_id = r.u16();
        const std::uint32_t nt = r.u32();
        if (nt != ds.spec.text_tokens()) throw FormatError("toy dataset sample has wrong text length");
        s.text.resize(nt);
        for (auto& t : s.text) {
            t = r.u32();
            if (t >= vocab::kSize) throw FormatError("toy dataset token id out of range");
        }
        if (s.gold >= ds.spec.n_options || s.cue >= ds.spec.n_options)
            throw FormatError("toy dataset option index out of range");
        s.visual.resize(vis);
        r.f32s(s.visual);
        ds.samples.push_back(std::move(s));
    }
    r.expect_end("toy dataset");
    return ds;
}

void ToyConfig::validate() const {
    if (vocab < 1 || d < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq < 1 || d_visual < 1)
        throw ConfigError("toy model dimensions must be positive");
    if (d % n_heads != 0) throw ConfigError("d must be divisible by n_heads");
}

ParamLayout::ParamLayout(const ToyConfig& c) {
    std::size_t off = 0;
    auto take = [&](std::size_t n) {
        std::size_t at = off;
        off += n;
        return at;
    };
    const std::size_t d = c.d;
    tok_emb = take(static_cast<std::size_t>(c.vocab) * d);
    vis_w = take(static_cast<std::size_t>(c.d_visual) * d);
    vis_b = take(d);
    pos = take(static_cast<std::size_t>(c.max_seq) * d);
    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
        Layer L{};
        L.ln1_g = take(d);
        L.ln1_b = take(d);
        L.wq = take(d * d);
        L.bq = take(d);
        L.wk = take(d * d);
        L.bk = take(d);
        L.wv = take(d * d);
        L.bv = take(d);
        L.wo = take(d * d);
        L.bo = take(d);
        L.ln2_g = take(d);
        L.ln2_b = take(d);
        L.w1 = take(d * c.d_ff);
        L.b1 = take(c.d_ff);
        L.w2 = take(static_cast<std::size_t>(c.d_ff) * d);
        L.b2 = take(d);
        layers.push_back(L);
    }
    lnf_g = take(d);
    lnf_b = take(d);
    out_w = take(d * c.vocab);
    out_b = take(c.vocab);
    total = off;
}

ToyModel init_model(const ToyConfig& config, std::uint64_t seed) {
    config.validate();
    const ParamLayout P(config);
    ToyModel m;
    m.config = config;
    m.train_seed = seed;
    m.params.assign(P.total, 0.0f);
    Rng rng = Rng::keyed({seed, kSaltInit});
    auto normal = [&](std::size_t off, std::size_t n, double sd) {
        for (std::size_t i = 0; i < n; ++i) m.params[off + i] = static_cast<float>(sd * rng.normal());
    };
    auto uniform = [&](std::size_t off, std::size_t n, std::size_t fan_in) {
        const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < n; ++i)
            m.params[off + i] = static_cast<float>(-b + 2.0 * b * rng.uniform());
    };
    auto ones = [&](std::size_t off, std::size_t n) { std::fill_n(m.params.begin() + off, n, 1.0f); };
    const std::size_t d = config.d;
    normal(P.tok_emb, static_cast<std::size_t>(config.vocab) * d, 1.0);
    uniform(P.vis_w, config.d_visual * d, config.d_visual);
    uniform(P.vis_b, d, config.d_visual);
    normal(P.pos, static_cast<std::size_t>(config.max_seq) * d, 0.02);
    for (const auto& L : P.layers) {
        ones(L.ln1_g, d);
        for (auto [w, b] : {std::pair{L.wq, L.bq}, {L.wk, L.bk}, {L.wv, L.bv}, {L.wo, L.bo}}) {
            uniform(w, d * d, d);
            uniform(b, d, d);
        }
        ones(L.ln2_g, d);
        uniform(L.w1, d * config.d_ff, d);
        uniform(L.b1, config.d_ff, d);
        uniform(L.w2, config.d_ff * d, config.d_ff);
        uniform(L.b2, d, config.d_ff);
    }
    ones(P.lnf_g, d);
    uniform(P.out_w, d * config.vocab, d);
    uniform(P.out_b, config.vocab, d);
    return m;
}

std::vector<std::uint8_t> serialize_model(const ToyModel& m) {
    m.config.validate();
    if (m.params.size() != ParamLayout(m.config).total)
        throw ValidationError("toy model parameter count does not match its architecture");
    ByteWriter w;
    w.raw("MCTM1");
    const auto& c = m.config;
    for (std::uint32_t v : {c.vocab, c.d, c.n_layers, c.n_heads, c.d_ff, c.max_seq, c.d_visual}) w.u32(v);
    w.u8(c.round_residual ? 1 : 0);
    w.u64(m.train_seed);
    w.u64(m.params.size());
    w.f32s(m.params);
    return w.take();
}

ToyModel deserialize_model(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    expect_magic(r, "MCTM1", "toy model");
    ToyModel m;
    auto& c = m.config;
    c.vocab = r.u32();
    c.d = r.u32();
    c.n_layers = r.u32();
    c.n_heads = r.u32();
    c.d_ff = r.u32();
    c.max_seq = r.u32();
    c.d_visual = r.u32();
    const std::uint8_t rr = r.u8();
    if (rr > 1) throw FormatError("toy model residual flag must be 0 or 1");
    c.round_residual = rr == 1;
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("toy model header: ") + e.what());
    }
    m.train_seed = r.u64();
    const std::uint64_t n = r.u64();
    if (n != ParamLayout(c).total) throw FormatError("toy model parameter count does not match its header");
    if (n > r.remaining() / 4) throw CorruptionError("toy model parameters truncated", r.offset());
    m.params.resize(n);
    r.f32s(m.params);
    r.expect_end("toy model");
    return m;
}

void write_model(const ToyModel& m, const std::string& path) { write_file_bytes(path, serialize_model(m)); }

ToyModel read_model(const std::string& path) { return deserialize_model(read_file_bytes(path)); }

ToyInput make_input(const ToySample& s, std::span<const std::uint32_t> option_ids) {
    return ToyInput{s.visual, s.text, option_ids};
}

// ---------------------------------------------------------------------------
// Network

namespace {

struct LnCache {
    Mat xhat;
    std::vector<double> rstd;
};

void layer_norm(const Mat& x, const double* g, const double* b, Mat& y, LnCache* cache) {
    const Eigen::Index n = x.rows(), d = x.cols();
    y.resize(n, d);
    if (cache) {
        cache->xhat.resize(n, d);
        cache->rstd.resize(static_cast<std::size_t>(n));
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        double mean = x.row(i).mean();
        double var = (x.row(i).array() - mean).square().mean();
        double rstd = 1.0 / std::sqrt(var + kLnEps);
        for (Eigen::Index j = 0; j < d; ++j) {
            double xh = (x(i, j) - mean) * rstd;
            if (cache) cache->xhat(i, j) = xh;
            y(i, j) = xh * g[j] + b[j];
        }
        if (cache) cache->rstd[static_cast<std::size_t>(i)] = rstd;
    }
}

// Accumulates dg, db and returns dx.
Mat layer_norm_backward(const Mat& dy, const LnCache& c, const double* g, double* dg, double* db) {
    const Eigen::Index n = dy.rows(), d = dy.cols();
    Mat dx(n, d);
    std::vector<double> dxh(static_cast<std::size_t>(d));
    for (Eigen::Index i = 0; i < n; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            double v = dy(i, j) * g[j];
            dxh[static_cast<std::size_t>(j)] = v;
            m1 += v;
            m2 += v * c.xhat(i, j);
            dg[j] += dy(i, j) * c.xhat(i, j);
            db[j] += dy(i, j);
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        const double rstd = c.rstd[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < d; ++j)
            dx(i, j) = rstd * (dxh[static_cast<std::size_t>(j)] - m1 - c.xhat(i, j) * m2);
    }
    return dx;
}

inline double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u / std::numbers::sqrt2)); }

inline double gelu_grad(double u) {
    const double cdf = 0.5 * (1.0 + std::erf(u / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + u * pdf;
}

struct BlockCache {
    LnCache ln1, ln2;
    Mat h1, q, k, v, o, h2, u, g;
    std::vector<Mat> attn;  // softmax weights per (sample, head)
};

class Net {
public:
    Net(const ToyConfig& c, const double* p) : c_(c), L_(c), p_(p) {}

    const ParamLayout& layout() const { return L_; }

    CMat mat(std::size_t off, std::size_t r, std::size_t cols) const {
        return CMat(p_ + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(cols));
    }
    CVec vec(std::size_t off, std::size_t n) const { return CVec(p_ + off, static_cast<Eigen::Index>(n)); }

    // Embedding of B sequences of equal length S, stacked row-wise.
    Mat embed(std::span<const ToyInput> batch, std::size_t S) const {
        const std::size_t d = c_.d;
        Mat x(static_cast<Eigen::Index>(batch.size() * S), static_cast<Eigen::Index>(d));
        const CMat vis_w = mat(L_.vis_w, c_.d_visual, d);
        const CVec vis_b = vec(L_.vis_b, d);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const auto& in = batch[b];
            const std::size_t nvis = in.visual.size() / c_.d_visual;
            for (std::size_t t = 0; t < S; ++t) {
                auto row = x.row(static_cast<Eigen::Index>(b * S + t));
                if (t < nvis) {
                    RowVec v(c_.d_visual);
                    for (std::size_t j = 0; j < c_.d_visual; ++j) v[static_cast<Eigen::Index>(j)] = in.visual[t * c_.d_visual + j];
                    row = v * vis_w + vis_b;
                } else {
                    row = vec(L_.tok_emb + in.text[t - nvis] * d, d);
                }
                row += vec(L_.pos + t * d, d);
            }
        }
        return x;
    }

    void block(std::uint32_t l, std::size_t B, std::size_t S, Mat& x, BlockCache* cache) const {
        const auto& P = L_.layers[l];
        const std::size_t d = c_.d, H = c_.n_heads, hd = d / H;
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        Mat h1;
        layer_norm(x, p_ + P.ln1_g, p_ + P.ln1_b, h1, cache ? &cache->ln1 : nullptr);
        Mat q = (h1 * mat(P.wq, d, d)).rowwise() + vec(P.bq, d);
        Mat k = (h1 * mat(P.wk, d, d)).rowwise() + vec(P.bk, d);
        Mat v = (h1 * mat(P.wv, d, d)).rowwise() + vec(P.bv, d);
        Mat o(x.rows(), x.cols());
        if (cache) cache->attn.assign(B * H, Mat());
        const auto Si = static_cast<Eigen::Index>(S), hdi = static_cast<Eigen::Index>(hd);
        for (std::size_t b = 0; b < B; ++b) {
            const auto r0 = static_cast<Eigen::Index>(b * S);
            for (std::size_t h = 0; h < H; ++h) {
                const auto c0 = static_cast<Eigen::Index>(h * hd);
                Mat s = q.block(r0, c0, Si, hdi) * k.block(r0, c0, Si, hdi).transpose() * scale;
                for (Eigen::Index i = 0; i < Si; ++i) {
                    double mx = s.row(i).head(i + 1).maxCoeff();
                    double z = 0.0;
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        s(i, j) = std::exp(s(i, j) - mx);
                        z += s(i, j);
                    }
                    for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= z;
                    for (Eigen::Index j = i + 1; j < Si; ++j) s(i, j) = 0.0;
                }
                o.block(r0, c0, Si, hdi) = s * v.block(r0, c0, Si, hdi);
                if (cache) cache->attn[b * H + h] = std::move(s);
            }
        }
        x += (o * mat(P.wo, d, d)).rowwise() + vec(P.bo, d);
        Mat h2;
        layer_norm(x, p_ + P.ln2_g, p_ + P.ln2_b, h2, cache ? &cache->ln2 : nullptr);
        Mat u = (h2 * mat(P.w1, d, c_.d_ff)).rowwise() + vec(P.b1, c_.d_ff);
        Mat g = u.unaryExpr([](double t) { return gelu(t); });
        x += (g * mat(P.w2, c_.d_ff, d)).rowwise() + vec(P.b2, d);
        if (c_.round_residual)
            x = x.unaryExpr([](double t) { return static_cast<double>(static_cast<float>(t)); });
        if (cache) {
            cache->h1 = std::move(h1);
            cache->q = std::move(q);
            cache->k = std::move(k);
            cache->v = std::move(v);
            cache->o = std::move(o);
            cache->h2 = std::move(h2);
            cache->u = std::move(u);
            cache->g = std::move(g);
        }
    }

    // Returns dx_in; accumulates parameter gradients into grad.
    Mat block_backward(std::uint32_t l, std::size_t B, std::size_t S, const Mat& dx, const BlockCache& c,
                       double* grad) const {
        const auto& P = L_.layers[l];
        const std::size_t d = c_.d, H = c_.n_heads, hd = d / H, ff = c_.d_ff;
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        auto gmat = [&](std::size_t off, std::size_t r, std::size_t cols) {
            return MMat(grad + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(cols));
        };
        auto gvec = [&](std::size_t off, std::size_t n) { return MVec(grad + off, static_cast<Eigen::Index>(n)); };

        // MLP
        gmat(P.w2, ff, d).noalias() += c.g.transpose() * dx;
        gvec(P.b2, d) += dx.colwise().sum();
        Mat du = (dx * mat(P.w2, ff, d).transpose()).cwiseProduct(c.u.unaryExpr([](double t) { return gelu_grad(t); }));
        gmat(P.w1, d, ff).noalias() += c.h2.transpose() * du;
        gvec(P.b1, ff) += du.colwise().sum();
        Mat dh2 = du * mat(P.w1, d, ff).transpose();
        Mat dmid = dx + layer_norm_backward(dh2, c.ln2, p_ + P.ln2_g, grad + P.ln2_g, grad + P.ln2_b);

        // Attention
        gmat(P.wo, d, d).noalias() += c.o.transpose() * dmid;
        gvec(P.bo, d) += dmid.colwise().sum();
        Mat dout = dmid * mat(P.wo, d, d).transpose();
        Mat dq(dout.rows(), dout.cols()), dk(dout.rows(), dout.cols()), dv(dout.rows(), dout.cols());
        const auto Si = static_cast<Eigen::Index>(S), hdi = static_cast<Eigen::Index>(hd);
        for (std::size_t b = 0; b < B; ++b) {
            const auto r0 = static_cast<Eigen::Index>(b * S);
            for (std::size_t h = 0; h < H; ++h) {
                const auto c0 = static_cast<Eigen::Index>(h * hd);
                const Mat& A = c.attn[b * H + h];
                auto dO = dout.block(r0, c0, Si, hdi);
                dv.block(r0, c0, Si, hdi) = A.transpose() * dO;
                Mat dA = dO * c.v.block(r0, c0, Si, hdi).transpose();
                Mat dS(Si, Si);
                for (Eigen::Index i = 0; i < Si; ++i) {
                    double dot = A.row(i).dot(dA.row(i));
                    dS.row(i) = A.row(i).cwiseProduct(dA.row(i)).array() - dot * A.row(i).array();
                }
                dS *= scale;
                dq.block(r0, c0, Si, hdi) = dS * c.k.block(r0, c0, Si, hdi);
                dk.block(r0, c0, Si, hdi) = dS.transpose() * c.q.block(r0, c0, Si, hdi);
            }
        }
        Mat dh1 = Mat::Zero(dout.rows(), dout.cols());
        for (auto [w, bb, dm] : {std::tuple{P.wq, P.bq, &dq}, {P.wk, P.bk, &dk}, {P.wv, P.bv, &dv}}) {
            gmat(w, d, d).noalias() += c.h1.transpose() * (*dm);
            gvec(bb, d) += dm->colwise().sum();
            dh1.noalias() += (*dm) * mat(w, d, d).transpose();
        }
        return dmid + layer_norm_backward(dh1, c.ln1, p_ + P.ln1_g, grad + P.ln1_g, grad + P.ln1_b);
    }

    // Final-position features and option logits for each of B sequences.
    std::vector<std::vector<double>> readout(const Mat& x, std::span<const ToyInput> batch, std::size_t S,
                                             Mat* hf_out, LnCache* ln_cache) const {
        const std::size_t B = batch.size(), d = c_.d;
        Mat last(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(d));
        for (std::size_t b = 0; b < B; ++b)
            last.row(static_cast<Eigen::Index>(b)) = x.row(static_cast<Eigen::Index>(b * S + S - 1));
        Mat hf;
        layer_norm(last, p_ + L_.lnf_g, p_ + L_.lnf_b, hf, ln_cache);
        std::vector<std::vector<double>> logits(B);
        const CMat W = mat(L_.out_w, d, c_.vocab);
        for (std::size_t b = 0; b < B; ++b) {
            for (auto id : batch[b].option_ids) {
                if (id >= c_.vocab) throw ValidationError("option token id outside the vocabulary");
                logits[b].push_back(hf.row(static_cast<Eigen::Index>(b)).dot(W.col(id)) + p_[L_.out_b + id]);
            }
        }
        if (hf_out) *hf_out = std::move(hf);
        return logits;
    }

private:
    const ToyConfig& c_;
    ParamLayout L_;
    const double* p_;
};

std::size_t check_batch(const ToyConfig& c, std::span<const ToyInput> batch) {
    if (batch.empty()) throw ValidationError("empty batch");
    std::size_t S = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& in = batch[b];
        if (in.visual.size() % c.d_visual != 0)
            throw ValidationError("visual input is not a whole number of tokens");
        const std::size_t s = in.visual.size() / c.d_visual + in.text.size();
        if (b == 0) S = s;
        if (s != S) throw ValidationError("batch sequences differ in length");
        if (in.option_ids.size() < 2) throw ValidationError("need at least two options");
        for (auto t : in.text)
            if (t >= c.vocab) throw ValidationError("token id outside the vocabulary");
    }
    if (S == 0 || S > c.max_seq) throw ValidationError("sequence length outside [1, max_seq]");
    return S;
}

FloatMatrix to_float(const Mat& x) {
    FloatMatrix f(static_cast<std::size_t>(x.rows()), static_cast<std::size_t>(x.cols()));
    for (Eigen::Index i = 0; i < x.size(); ++i) f.data[static_cast<std::size_t>(i)] = static_cast<float>(x.data()[i]);
    return f;
}

Mat to_double(const FloatMatrix& f) {
    Mat x(static_cast<Eigen::Index>(f.rows), static_cast<Eigen::Index>(f.cols));
    for (std::size_t i = 0; i < f.data.size(); ++i) x.data()[i] = f.data[i];
    return x;
}

}  // namespace

double loss_and_grad(const ToyConfig& config, std::span<const double> params,
                     std::span<const ToyInput> batch, std::span<const std::uint16_t> gold,
                     std::vector<double>* grad) {
    config.validate();
    const ParamLayout layout(config);
    if (params.size() != layout.total) throw ValidationError("parameter vector has the wrong length");
    if (gold.size() != batch.size()) throw ValidationError("one gold index per batch element");
    const std::size_t S = check_batch(config, batch);
    const std::size_t B = batch.size();
    Net net(config, params.data());

    Mat x = net.embed(batch, S);
    std::vector<BlockCache> caches(grad ? config.n_layers : 0);
    for (std::uint32_t l = 0; l < config.n_layers; ++l) net.block(l, B, S, x, grad ? &caches[l] : nullptr);
    Mat hf;
    LnCache lnf;
    auto logits = net.readout(x, batch, S, &hf, &lnf);

    double loss = 0.0;
    std::vector<std::vector<double>> dlogit(B);
    for (std::size_t b = 0; b < B; ++b) {
        const auto& z = logits[b];
        if (gold[b] >= z.size()) throw ValidationError("gold index out of range");
        double mx = *std::max_element(z.begin(), z.end());
        double s = 0.0;
        for (double v : z) s += std::exp(v - mx);
        const double lse = mx + std::log(s);
        loss += lse - z[gold[b]];
        dlogit[b].resize(z.size());
        for (std::size_t o = 0; o < z.size(); ++o)
            dlogit[b][o] = (std::exp(z[o] - lse) - (o == gold[b] ? 1.0 : 0.0)) / static_cast<double>(B);
    }
    loss /= static_cast<double>(B);
    if (!grad) return loss;

    grad->assign(layout.total, 0.0);
    double* G = grad->data();
    const std::size_t d = config.d;
    MMat dW(G + layout.out_w, static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(config.vocab));
    const CMat W(params.data() + layout.out_w, static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(config.vocab));
    Mat dhf = Mat::Zero(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(d));
    for (std::size_t b = 0; b < B; ++b) {
        const auto bi = static_cast<Eigen::Index>(b);
        for (std::size_t o = 0; o < dlogit[b].size(); ++o) {
            const auto id = batch[b].option_ids[o];
            const double g = dlogit[b][o];
            dW.col(id) += g * hf.row(bi).transpose();
            G[layout.out_b + id] += g;
            dhf.row(bi) += g * W.col(id).transpose();
        }
    }
    Mat dlast = layer_norm_backward(dhf, lnf, params.data() + layout.lnf_g, G + layout.lnf_g, G + layout.lnf_b);
    Mat dx = Mat::Zero(x.rows(), x.cols());
    for (std::size_t b = 0; b < B; ++b)
        dx.row(static_cast<Eigen::Index>(b * S + S - 1)) = dlast.row(static_cast<Eigen::Index>(b));
    for (std::uint32_t l = config.n_layers; l-- > 0;) dx = net.block_backward(l, B, S, dx, caches[l], G);

    // Embedding
    MMat dvw(G + layout.vis_w, static_cast<Eigen::Index>(config.d_visual), static_cast<Eigen::Index>(d));
    for (std::size_t b = 0; b < B; ++b) {
        const auto& in = batch[b];
        const std::size_t nvis = in.visual.size() / config.d_visual;
        for (std::size_t t = 0; t < S; ++t) {
            const auto row = dx.row(static_cast<Eigen::Index>(b * S + t));
            for (std::size_t j = 0; j < d; ++j) G[layout.pos + t * d + j] += row[static_cast<Eigen::Index>(j)];
            if (t < nvis) {
                for (std::size_t i = 0; i < config.d_visual; ++i)
                    dvw.row(static_cast<Eigen::Index>(i)) += static_cast<double>(in.visual[t * config.d_visual + i]) * row;
                for (std::size_t j = 0; j < d; ++j) G[layout.vis_b + j] += row[static_cast<Eigen::Index>(j)];
            } else {
                const std::size_t base = layout.tok_emb + in.text[t - nvis] * d;
                for (std::size_t j = 0; j < d; ++j) G[base + j] += row[static_cast<Eigen::Index>(j)];
            }
        }
    }
    return loss;
}

ToyRunner::ToyRunner(const ToyModel& model) : config_(model.config) {
    config_.validate();
    if (model.params.size() != ParamLayout(config_).total)
        throw ValidationError("toy model parameter count does not match its architecture");
    params_.assign(model.params.begin(), model.params.end());
}

ForwardResult ToyRunner::forward(const ToyInput& in, const Hook* hook) const {
    std::span<const ToyInput> batch(&in, 1);
    const std::size_t S = check_batch(config_, batch);
    Net net(config_, params_.data());
    Mat x = net.embed(batch, S);
    ForwardResult res;
    for (std::uint32_t l = 0; l < config_.n_layers; ++l) {
        net.block(l, 1, S, x, nullptr);
        FloatMatrix h = to_float(x);
        if (hook && hook->spec.layer == l) {
            if (hook->tags.size() != S) throw ValidationError("hook tags do not match the sequence length");
            h = apply_intervention(h, hook->tags, hook->sample_id, hook->spec, hook->book);
            x = to_double(h);
        }
        res.hidden.push_back(std::move(h));
    }
    if (hook && hook->spec.layer >= config_.n_layers) throw ValidationError("hook layer out of range");
    res.option_logits = net.readout(x, batch, S, nullptr, nullptr)[0];
    return res;
}

std::vector<double> ToyRunner::replay(std::uint32_t layer, const FloatMatrix& hidden,
                                      std::span<const std::uint32_t> option_ids) const {
    if (layer >= config_.n_layers) throw ValidationError("replay layer out of range");
    if (hidden.cols != config_.d) throw ValidationError("replay hidden width does not match the model");
    if (hidden.rows == 0 || hidden.rows > config_.max_seq) throw ValidationError("replay sequence length out of range");
    Net net(config_, params_.data());
    Mat x = to_double(hidden);
    for (std::uint32_t l = layer + 1; l < config_.n_layers; ++l) net.block(l, 1, hidden.rows, x, nullptr);
    ToyInput in{{}, {}, option_ids};
    return net.readout(x, std::span<const ToyInput>(&in, 1), hidden.rows, nullptr, nullptr)[0];
}

TrainResult train(ToyModel& model, const ToyDataset& data, const TrainOptions& o) {
    model.config.validate();
    const ParamLayout layout(model.config);
    if (model.params.size() != layout.total) throw ValidationError("toy model parameter count does not match");
    TrainResult res;
    if (o.steps == 0) return res;
    if (data.samples.empty()) throw ValidationError("training set is empty");
    if (o.batch == 0) throw ConfigError("batch size must be positive");
    if (!(o.lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (data.spec.d_visual != model.config.d_visual) throw ValidationError("dataset visual width does not match the model");

    const auto opts = option_token_ids(data.spec);
    std::vector<double> master(model.params.begin(), model.params.end());
    std::vector<double> current(master), m(layout.total, 0.0), v(layout.total, 0.0), grad;
    Rng rng = Rng::keyed({o.seed, kSaltBatch});
    std::vector<ToyInput> batch(o.batch);
    std::vector<std::uint16_t> gold(o.batch);
    double b1t = 1.0, b2t = 1.0;
    res.loss_trace.reserve(o.steps);
    for (std::uint64_t step = 0; step < o.steps; ++step) {
        for (std::uint32_t b = 0; b < o.batch; ++b) {
            const auto& s = data.samples[rng.below(data.samples.size())];
            batch[b] = make_input(s, opts);
            gold[b] = s.gold;
        }
        const double loss = loss_and_grad(model.config, current, batch, gold, &grad);
        if (!std::isfinite(loss)) throw TrainingError("non-finite training loss", step);
        res.loss_trace.push_back(loss);
        b1t *= o.beta1;
        b2t *= o.beta2;
        for (std::size_t i = 0; i < layout.total; ++i) {
            m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * grad[i];
            v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
            master[i] -= o.lr * (m[i] / (1.0 - b1t)) / (std::sqrt(v[i] / (1.0 - b2t)) + o.eps);
            current[i] = static_cast<double>(static_cast<float>(master[i]));
        }
    }
    for (std::size_t i = 0; i < layout.total; ++i) model.params[i] = static_cast<float>(master[i]);
    model.train_seed = o.seed;
    return res;
}

double mean_loss(const ToyModel& model, const ToyDataset& data) {
    if (data.samples.empty()) throw ValidationError("dataset is empty");
    const std::vector<double> p(model.params.begin(), model.params.end());
    const auto opts = option_token_ids(data.spec);
    constexpr std::size_t kChunk = 256;
    double total = 0.0;
    for (std::size_t at = 0; at < data.samples.size(); at += kChunk) {
        const std::size_t n = std::min(kChunk, data.samples.size() - at);
        std::vector<ToyInput> batch;
        std::vector<std::uint16_t> gold;
        for (std::size_t i = at; i < at + n; ++i) {
            batch.push_back(make_input(data.samples[i], opts));
            gold.push_back(data.samples[i].gold);
        }
        total += loss_and_grad(model.config, p, batch, gold, nullptr) * static_cast<double>(n);
    }
    return total / static_cast<double>(data.samples.size());
}

std::string provenance_json(const ToyModel& model, const ToyDataset& data, std::uint32_t layer) {
    nlohmann::json j = {{"generator", "toymlm"},
                        {"task", spec_to_json(data.spec)},
                        {"data_seed", data.data_seed},
                        {"cue_correlation", data.cue_correlation},
                        {"train_seed", model.train_seed},
                        {"layer", layer}};
    return j.dump();
}

ActivationCache export_cache(const ToyModel& model, const ToyDataset& data, std::uint32_t layer) {
    if (layer >= model.config.n_layers) throw ValidationError("export layer out of range");
    const ToyRunner runner(model);
    const auto tags = token_tags(data.spec);
    const auto opts = option_token_ids(data.spec);
    ActivationCache cache;
    cache.d = model.config.d;
    cache.layer = layer;
    cache.source = provenance_json(model, data, layer);
    cache.samples.reserve(data.samples.size());
    for (const auto& s : data.samples) {
        auto fr = runner.forward(make_input(s, opts));
        SampleRecord rec;
        rec.sample_id = s.id;
        rec.task_id = to_string(s.family);
        rec.option_token_ids = opts;
        for (double z : fr.option_logits) rec.baseline_option_logits.push_back(static_cast<float>(z));
        rec.gold_option = s.gold;
        rec.tags = tags;
        rec.hidden = std::move(fr.hidden[layer]);
        cache.samples.push_back(std::move(rec));
    }
    validate_cache(cache);
    return cache;
}

}  // namespace modal_audit::toy
