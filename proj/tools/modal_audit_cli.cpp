// modal-audit: command-line front end to the core library.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "modal_audit/binary_io.hpp"
#include "modal_audit/cache.hpp"
#include "modal_audit/centroids.hpp"
#include "modal_audit/decode.hpp"
#include "modal_audit/errors.hpp"
#include "modal_audit/harness.hpp"
#include "modal_audit/interventions.hpp"
#include "modal_audit/stats.hpp"
#include "modal_audit/toymlm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace modal_audit;

namespace {

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

json cache_info(const ActivationCache& c) {
    const CacheSummary s = summarize(c);
    json tasks = json::object();
    for (const auto& [t, n] : s.tasks) tasks[t] = n;
    json source = json::parse(c.source, nullptr, false);
    return {{"version", c.version},
            {"d", c.d},
            {"layer", c.layer},
            {"samples", s.samples},
            {"tokens", s.tokens},
            {"visual_tokens", s.visual_tokens},
            {"text_tokens",
             {{"system", s.text_by_segment[0]},
              {"question", s.text_by_segment[1]},
              {"options", s.text_by_segment[2]},
              {"other", s.text_by_segment[3]}}},
            {"tasks", tasks},
            {"source", source.is_discarded() ? json(c.source) : source}};
}

std::vector<harness::ReportFormat> parse_formats(const std::vector<std::string>& names) {
    std::vector<harness::ReportFormat> out;
    for (const auto& n : names) out.push_back(harness::parse_report_format(n));
    if (out.empty())
        out = {harness::ReportFormat::Json, harness::ReportFormat::Csv, harness::ReportFormat::Markdown,
               harness::ReportFormat::PlotData};
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw IoError("write failed for '" + path + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Modality-erasure audit: centroid books, erasure patches, contrastive decoding and reports"};
    app.require_subcommand(1);

    // cache ------------------------------------------------------------------
    auto* cache_cmd = app.add_subcommand("cache", "Inspect activation caches");
    cache_cmd->require_subcommand(1);
    std::string cache_path;
    auto* cache_validate = cache_cmd->add_subcommand("validate", "Check a cache file for structural errors");
    cache_validate->add_option("file", cache_path)->required();
    auto* cache_info_cmd = cache_cmd->add_subcommand("info", "Print a JSON summary of a cache");
    cache_info_cmd->add_option("file", cache_path)->required();

    // fit --------------------------------------------------------------------
    auto* fit_cmd = app.add_subcommand("fit", "Fit a centroid book on one modality of a cache");
    std::string fit_cache, fit_out, fit_modality = "text", fit_filter = "baseline";
    std::uint32_t fit_k = 256;
    std::uint64_t fit_seed = 42;
    std::optional<std::size_t> fit_max_points;
    KMeansOptions fit_opts;
    fit_cmd->add_option("--cache", fit_cache)->required();
    fit_cmd->add_option("--modality", fit_modality)->capture_default_str();
    fit_cmd->add_option("--k", fit_k)->capture_default_str();
    fit_cmd->add_option("--seed", fit_seed)->capture_default_str();
    fit_cmd->add_option("--filter", fit_filter, "baseline, no_dead, no_sink or no_either")->capture_default_str();
    fit_cmd->add_option("--max-points", fit_max_points, "Fit on the first N matching tokens only");
    fit_cmd->add_option("--max-iter", fit_opts.max_iter)->capture_default_str();
    fit_cmd->add_option("--tol", fit_opts.tol)->capture_default_str();
    fit_cmd->add_option("--out", fit_out)->required();

    // erase ------------------------------------------------------------------
    auto* erase_cmd = app.add_subcommand("erase", "Write a patch file of erased hidden states");
    std::string erase_cache, erase_book, erase_out, erase_segments = "all", erase_kind = "centroid",
                                                    erase_modality = "text";
    double erase_alpha = 0.0;
    std::uint64_t erase_control_seed = 0;
    erase_cmd->add_option("--cache", erase_cache)->required();
    erase_cmd->add_option("--book", erase_book, "Required for every kind except none");
    erase_cmd->add_option("--modality", erase_modality)->capture_default_str();
    erase_cmd->add_option("--segments", erase_segments, "all, all_text, or a list such as system,options")
        ->capture_default_str();
    erase_cmd->add_option("--alpha", erase_alpha, "Interpolation strength, or the dose for noise controls")
        ->capture_default_str();
    erase_cmd->add_option("--kind", erase_kind, "none, centroid, random_direction, matched_noise, shuffled_centroid")
        ->capture_default_str();
    erase_cmd->add_option("--control-seed", erase_control_seed)->capture_default_str();
    erase_cmd->add_option("--out", erase_out)->required();

    // replay -----------------------------------------------------------------
    auto* replay_cmd = app.add_subcommand("replay", "Replay a patch through a toy checkpoint, writing option logits");
    std::string replay_model, replay_cache, replay_patch_path, replay_out;
    replay_cmd->add_option("--model", replay_model)->required();
    replay_cmd->add_option("--cache", replay_cache)->required();
    replay_cmd->add_option("--patch", replay_patch_path)->required();
    replay_cmd->add_option("--out", replay_out)->required();

    // decode -----------------------------------------------------------------
    auto* decode_cmd = app.add_subcommand("decode", "Contrastive decoding from cached and erased logits");
    std::string decode_cache_path, decode_logits, decode_out;
    double decode_alpha_cd = 1.0;
    decode_cmd->add_option("--cache", decode_cache_path)->required();
    decode_cmd->add_option("--logits", decode_logits, "Erased-pass logits CSV")->required();
    decode_cmd->add_option("--alpha-cd", decode_alpha_cd)->capture_default_str();
    decode_cmd->add_option("--out", decode_out)->required();

    // gen / train / export ----------------------------------------------------
    auto* gen_cmd = app.add_subcommand("gen", "Generate a toy train/eval dataset pair");
    std::string gen_family = "competes", gen_spec, gen_out;
    std::uint64_t gen_seed = 1;
    std::size_t gen_train = 8000, gen_eval = 1000;
    gen_cmd->add_option("--family", gen_family, "competes or needed")->capture_default_str();
    gen_cmd->add_option("--spec", gen_spec, "JSON task spec; missing keys keep defaults");
    gen_cmd->add_option("--seed", gen_seed)->capture_default_str();
    gen_cmd->add_option("--n-train", gen_train)->capture_default_str();
    gen_cmd->add_option("--n-eval", gen_eval)->capture_default_str();
    gen_cmd->add_option("--out-dir", gen_out)->required();

    auto* train_cmd = app.add_subcommand("train", "Train a toy model on a generated dataset");
    std::string train_data, train_out;
    toy::TrainOptions train_opts;
    toy::ToyConfig train_cfg;
    train_cmd->add_option("--data", train_data)->required();
    train_cmd->add_option("--steps", train_opts.steps)->capture_default_str();
    train_cmd->add_option("--batch", train_opts.batch)->capture_default_str();
    train_cmd->add_option("--lr", train_opts.lr)->capture_default_str();
    train_cmd->add_option("--seed", train_opts.seed)->capture_default_str();
    train_cmd->add_option("--layers", train_cfg.n_layers)->capture_default_str();
    train_cmd->add_option("--d", train_cfg.d)->capture_default_str();
    train_cmd->add_option("--heads", train_cfg.n_heads)->capture_default_str();
    train_cmd->add_option("--d-ff", train_cfg.d_ff)->capture_default_str();
    train_cmd->add_option("--out", train_out)->required();

    auto* export_cmd = app.add_subcommand("export", "Export a layer's hidden states of a dataset to a cache");
    std::string export_model, export_data, export_out;
    std::uint32_t export_layer = 0;
    export_cmd->add_option("--model", export_model)->required();
    export_cmd->add_option("--data", export_data)->required();
    export_cmd->add_option("--layer", export_layer)->required();
    export_cmd->add_option("--out", export_out)->required();

    // stats ------------------------------------------------------------------
    auto* stats_cmd = app.add_subcommand("stats", "Statistics on outcomes and standalone calculators");
    stats_cmd->require_subcommand(1);
    std::string stats_outcomes;
    std::size_t stats_bins = 10;
    auto* stats_report = stats_cmd->add_subcommand("report", "Per-task accuracy, Wilson CI, McNemar, Cohen's h, ECE");
    stats_report->add_option("outcomes", stats_outcomes, "Outcome CSV from decode")->required();
    stats_report->add_option("--bins", stats_bins)->capture_default_str();
    std::uint64_t w_k = 0, w_n = 0;
    double w_conf = 0.95;
    auto* stats_wilson = stats_cmd->add_subcommand("wilson", "Wilson score interval, in percent");
    stats_wilson->add_option("successes", w_k)->required();
    stats_wilson->add_option("n", w_n)->required();
    stats_wilson->add_option("--confidence", w_conf)->capture_default_str();
    std::uint64_t m_b = 0, m_c = 0;
    std::string m_variant = "auto";
    auto* stats_mcnemar = stats_cmd->add_subcommand("mcnemar", "McNemar p-value from discordant counts");
    stats_mcnemar->add_option("b", m_b, "base wrong, intervened right")->required();
    stats_mcnemar->add_option("c", m_c, "base right, intervened wrong")->required();
    stats_mcnemar->add_option("--variant", m_variant, "auto, exact or chi2")->capture_default_str();
    double p_h = 0.0, p_power = 0.8, p_alpha = 0.05;
    auto* stats_power = stats_cmd->add_subcommand("power", "Per-group n to detect Cohen's h");
    stats_power->add_option("effect", p_h, "Cohen's h")->required();
    stats_power->add_option("--power", p_power)->capture_default_str();
    stats_power->add_option("--alpha", p_alpha)->capture_default_str();
    std::uint64_t d_n = 0;
    auto* stats_detect = stats_cmd->add_subcommand("detectable", "Smallest detectable Cohen's h at n per group");
    stats_detect->add_option("n", d_n)->required();
    stats_detect->add_option("--power", p_power)->capture_default_str();
    stats_detect->add_option("--alpha", p_alpha)->capture_default_str();

    // sweep / audit / report / planted ---------------------------------------
    std::string config_path;
    std::vector<std::string> formats;
    auto* sweep_cmd = app.add_subcommand("sweep", "Run every section enabled by a sweep config");
    sweep_cmd->add_option("--config", config_path)->required();
    sweep_cmd->add_option("--format", formats, "json, csv, markdown, plotdata; default all");

    auto* audit_cmd = app.add_subcommand("audit", "Alpha sweep, modality costs and the audit summary only");
    audit_cmd->add_option("--config", config_path)->required();
    audit_cmd->add_option("--format", formats, "json, csv, markdown, plotdata; default all");

    std::string report_in, report_format = "markdown", report_out;
    auto* report_cmd = app.add_subcommand("report", "Render a saved report.json in another format");
    report_cmd->add_option("--in", report_in, "Directory holding report.json")->required();
    report_cmd->add_option("--format", report_format)->capture_default_str();
    report_cmd->add_option("--out", report_out, "Write to this file instead of stdout");

    std::string planted_out;
    std::uint64_t planted_seed = 1;
    std::optional<std::uint64_t> planted_steps;
    auto* planted_cmd = app.add_subcommand("planted", "End-to-end planted-competition run on the toy substrate");
    planted_cmd->add_option("--out", planted_out)->required();
    planted_cmd->add_option("--seed", planted_seed, "Data seed")->capture_default_str();
    planted_cmd->add_option("--steps", planted_steps, "Training steps per model");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cache_validate->parsed()) {
            const auto c = read_cache(cache_path);
            validate_cache(c);
            std::cout << "ok: " << c.samples.size() << " samples, d=" << c.d << ", layer=" << c.layer << '\n';
        } else if (cache_info_cmd->parsed()) {
            print_json(cache_info(read_cache(cache_path)));
        } else if (fit_cmd->parsed()) {
            const auto c = read_cache(fit_cache);
            FitRequest req;
            req.modality = parse_modality(fit_modality);
            req.K = fit_k;
            req.kmeans_seed = fit_seed;
            req.filter = parse_filter_variant(fit_filter);
            req.options = fit_opts;
            req.max_points = fit_max_points;
            NormFilterReport fr;
            const auto book = fit_book_from_cache(c, req, &fr);
            write_book(book, fit_out);
            print_json({{"k", book.K},
                        {"d", book.d},
                        {"layer", book.layer},
                        {"fit_tokens", book.fit_token_count},
                        {"inertia", book.inertia},
                        {"dropped_low", fr.dropped_low_count},
                        {"dropped_high", fr.dropped_high_count}});
        } else if (erase_cmd->parsed()) {
            const auto c = read_cache(erase_cache);
            InterventionSpec spec;
            spec.layer = c.layer;
            spec.modality = parse_modality(erase_modality);
            spec.segments = parse_segment_selection(erase_segments);
            spec.alpha_interp = erase_alpha;
            spec.kind = parse_intervention_kind(erase_kind);
            spec.control_seed = erase_control_seed;
            std::optional<CentroidBook> book;
            if (!erase_book.empty()) book = read_book(erase_book);
            const auto patch = build_patch(c, book ? &*book : nullptr, spec);
            write_patch(patch, erase_out);
            std::size_t n = 0;
            for (const auto& s : patch.samples) n += s.patches.size();
            std::cout << "wrote " << n << " token patches for " << patch.samples.size() << " samples\n";
        } else if (replay_cmd->parsed()) {
            const auto model = toy::read_model(replay_model);
            const auto table = harness::replay_patch(model, read_cache(replay_cache), read_patch(replay_patch_path));
            write_logits(table, replay_out);
        } else if (decode_cmd->parsed()) {
            const auto outcomes = decode_cache(read_cache(decode_cache_path), read_logits(decode_logits), decode_alpha_cd);
            write_outcomes(outcomes, decode_out);
            const auto d = harness::summarize(outcomes);
            std::printf("n=%zu base=%.4f cd=%.4f delta=%+.2f pp p=%.4g\n", d.n, d.base_acc, d.cd_acc, d.delta_pp,
                        d.p_value);
        } else if (gen_cmd->parsed()) {
            toy::TaskSpec spec;
            if (!gen_spec.empty()) {
                const auto bytes = read_file_bytes(gen_spec);
                auto j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
                if (j.is_discarded()) throw ConfigError("'" + gen_spec + "' is not valid JSON");
                spec = toy::spec_from_json(j);
            }
            if (gen_cmd->count("--family") || gen_spec.empty()) spec.family = toy::parse_task_family(gen_family);
            spec.validate();
            const auto split = toy::gen_dataset(spec, gen_seed, gen_train, gen_eval);
            fs::create_directories(gen_out);
            toy::write_dataset(split.train, (fs::path(gen_out) / "train.mcds").string());
            toy::write_dataset(split.eval, (fs::path(gen_out) / "eval.mcds").string());
            std::cout << "wrote " << split.train.samples.size() << " train and " << split.eval.samples.size()
                      << " eval samples to " << gen_out << '\n';
        } else if (train_cmd->parsed()) {
            const auto data = toy::read_dataset(train_data);
            train_cfg.d_visual = data.spec.d_visual;
            train_cfg.max_seq = std::max(train_cfg.max_seq, data.spec.sequence_length());
            auto model = toy::init_model(train_cfg, train_opts.seed);
            const auto result = toy::train(model, data, train_opts);
            toy::write_model(model, train_out);
            if (!result.loss_trace.empty())
                std::printf("loss %.4f -> %.4f over %zu steps\n", result.loss_trace.front(), result.loss_trace.back(),
                            result.loss_trace.size());
        } else if (export_cmd->parsed()) {
            const auto cache = toy::export_cache(toy::read_model(export_model), toy::read_dataset(export_data),
                                                 export_layer);
            const auto bytes = write_cache(cache, export_out);
            std::cout << "wrote " << cache.samples.size() << " samples (" << bytes << " bytes)\n";
        } else if (stats_report->parsed()) {
            print_json(harness::outcome_stats(read_outcomes(stats_outcomes), stats_bins));
        } else if (stats_wilson->parsed()) {
            const auto i = stats::to_percent(stats::wilson_ci(w_k, w_n, w_conf));
            std::printf("%.2f %.2f\n", i.low, i.high);
        } else if (stats_mcnemar->parsed()) {
            auto v = stats::McNemarVariant::Auto;
            if (m_variant == "exact") v = stats::McNemarVariant::Exact;
            else if (m_variant == "chi2") v = stats::McNemarVariant::ChiSquareCC;
            else if (m_variant != "auto") throw ConfigError("unknown McNemar variant '" + m_variant + "'");
            std::printf("%.6g\n", stats::mcnemar({m_b, m_c, 0, 0}, v));
        } else if (stats_power->parsed()) {
            std::printf("%llu\n", static_cast<unsigned long long>(stats::power_n(p_h, p_power, p_alpha)));
        } else if (stats_detect->parsed()) {
            std::printf("%.4f\n", stats::detectable_h(d_n, p_power, p_alpha));
        } else if (sweep_cmd->parsed()) {
            auto cfg = harness::load_sweep_config(config_path);
            const std::string out = cfg.output_dir;
            harness::Harness h(std::move(cfg));
            const auto report = h.run_all();
            for (const auto& f : harness::emit_report(report, out, parse_formats(formats))) std::cout << f << '\n';
        } else if (audit_cmd->parsed()) {
            auto cfg = harness::load_sweep_config(config_path);
            const std::string out = cfg.output_dir;
            const bool costs = cfg.costs;
            const double fixed = cfg.fixed_alpha, cd = cfg.headline_alpha_cd;
            harness::Harness h(std::move(cfg));
            harness::SweepReport report;
            report.alpha_sweeps = h.run_alpha_sweep();
            std::vector<harness::ModalityCost> c;
            if (costs) c = h.run_costs();
            const auto curves = harness::curves_at_cd(report.alpha_sweeps, cd);
            report.audit = harness::compute_audit(curves, fixed, c);
            for (const auto& f : harness::emit_report(report, out, parse_formats(formats))) std::cout << f << '\n';
        } else if (report_cmd->parsed()) {
            const auto r = harness::read_report(report_in);
            const auto text = harness::render_report(r, harness::parse_report_format(report_format));
            if (report_out.empty()) std::cout << text;
            else write_text(report_out, text);
        } else if (planted_cmd->parsed()) {
            auto cfg = harness::default_planted_config();
            cfg.data_seed = planted_seed;
            if (planted_steps) cfg.train.steps = *planted_steps;
            const auto run = harness::run_planted(cfg, planted_out);
            std::printf("competes train loss %.4f -> %.4f\n", run.competes_train_loss_before,
                        run.competes_train_loss_after);
            for (const auto& f : run.report_files) std::cout << f << '\n';
        }
    } catch (const ValidationError& e) {
        std::cerr << "invalid: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
