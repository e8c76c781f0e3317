#pragma once

// Command implementations behind the `agnn` executable. Each returns the process
// exit status: 0 on success, 2 on invalid input (config, dataset, checkpoint, I/O).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "agnn/analysis.hpp"
#include "agnn/attention.hpp"
#include "agnn/checkpoint.hpp"
#include "agnn/config.hpp"
#include "agnn/episodes.hpp"
#include "agnn/io.hpp"
#include "agnn/training.hpp"

namespace agnn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 2;

inline constexpr std::uint64_t kDataStream = 5;
inline constexpr std::uint64_t kAnalysisStream = 6;

struct Datasets {
    FeatureDataset train;
    FeatureDataset test;
};

inline Datasets load_datasets(const RunConfig& cfg) {
    if (cfg.dataset.source == DatasetSource::synthetic) {
        const auto& s = cfg.dataset.synthetic;
        SyntheticSpec spec{s.train_classes + s.test_classes, s.per_class, s.dim, s.between_sigma, s.within_sigma};
        const auto all = generate_synthetic(spec, derive_seed(cfg.seed, kDataStream));
        return {all.subset(0, s.train_classes, Split::train),
                all.subset(s.train_classes, spec.classes, Split::test)};
    }
    auto train = load_features_csv(cfg.dataset.train_path, Split::train);
    auto test = load_features_csv(cfg.dataset.test_path, Split::test);
    if (train.dim != test.dim)
        throw ConfigError("dataset.test_path", "feature dimension " + std::to_string(test.dim) +
                                                   " differs from training set (" + std::to_string(train.dim) + ")");
    return {std::move(train), std::move(test)};
}

inline RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
    std::string text;
    try {
        text = io::read_file(path);
    } catch (const std::runtime_error& e) {
        throw ConfigError("--config", e.what());
    }
    RunConfig cfg = parse_run_config_text(text);
    if (seed_override) {
        cfg.seed = *seed_override;
        cfg.train.seed = *seed_override;
    }
    return cfg;
}

inline std::string ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + dir + ": " + ec.message());
    return dir;
}

inline std::string join(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

inline std::string format_ci(const std::optional<double>& ci) {
    if (!ci) return "NA";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *ci);
    return buf;
}

inline nlohmann::json ci_json(const std::optional<double>& ci) { return ci ? nlohmann::json(*ci) : nlohmann::json(); }

/// Runs `body`, mapping input errors to exit status 2 with a message on `err`.
template <typename F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
    } catch (const ParseError& e) {
        err << "dataset error: " << e.what() << "\n";
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << "\n";
    } catch (const CapacityError& e) {
        err << "dataset too small: " << e.what() << "\n";
    } catch (const ShapeError& e) {
        err << "shape error: " << e.what() << "\n";
    } catch (const std::runtime_error& e) {
        err << "error: " << e.what() << "\n";
    }
    return kExitInvalid;
}

// ---------------------------------------------------------------------------

/// Writes <out>/train.csv and <out>/test.csv from the synthetic generator.
inline int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        if (cfg.dataset.source != DatasetSource::synthetic)
            throw ConfigError("dataset.source", "gen-data needs a synthetic source");
        const auto data = load_datasets(cfg);
        ensure_dir(out_dir);
        save_features_csv(data.train, join(out_dir, "train.csv"));
        save_features_csv(data.test, join(out_dir, "test.csv"));
        out << "wrote " << join(out_dir, "train.csv") << ": classes=" << data.train.num_classes()
            << " samples=" << data.train.num_samples() << " d=" << data.train.dim << "\n";
        out << "wrote " << join(out_dir, "test.csv") << ": classes=" << data.test.num_classes()
            << " samples=" << data.test.num_samples() << " d=" << data.test.dim << "\n";
        return kExitOk;
    });
}

/// Trains and writes checkpoint.json, metrics.jsonl and config.json into out_dir.
inline int cmd_train(const RunConfig& cfg, const std::string& out_dir, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto data = load_datasets(cfg);
        ensure_dir(out_dir);
        io::write_file(join(out_dir, "config.json"), canonical_text(cfg));
        Trainer trainer(data.train, data.test, cfg.train, cfg.model);
        std::string log;
        trainer.run([&](const MetricsRecord& r) {
            log += metrics_line(r);
            out << "episode " << r.episode << " loss " << r.mean_loss << " eval_acc " << r.eval_accuracy << " lr "
                << r.lr << "\n";
        });
        io::write_file(join(out_dir, "metrics.jsonl"), log);
        save_checkpoint(trainer.state(), join(out_dir, "checkpoint.json"));
        out << "wrote " << join(out_dir, "checkpoint.json") << "\n";
        return kExitOk;
    });
}

inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& out_dir,
                    std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto state = load_checkpoint(checkpoint, cfg.model);
        const auto data = load_datasets(cfg);
        if (state.params.feature_dim != data.test.dim || state.params.ways != cfg.train.shape.ways)
            throw CheckpointError("checkpoint built for d=" + std::to_string(state.params.feature_dim) +
                                  ", N=" + std::to_string(state.params.ways) + " but config gives d=" +
                                  std::to_string(data.test.dim) + ", N=" + std::to_string(cfg.train.shape.ways));
        const auto res = evaluate(state.params, data.test, cfg.train.shape, cfg.model, cfg.train.eval_episodes,
                                  cfg.seed);
        out << "accuracy " << res.mean_accuracy << " +/- " << format_ci(res.ci95) << " over "
            << cfg.train.eval_episodes << " episodes\n";
        ensure_dir(out_dir);
        nlohmann::json rec{{"accuracy", res.mean_accuracy},
                           {"ci95", ci_json(res.ci95)},
                           {"episodes", cfg.train.eval_episodes},
                           {"checkpoint_episode", state.episode}};
        io::write_file(join(out_dir, "eval.jsonl"), rec.dump() + "\n");
        return kExitOk;
    });
}

/// Smoothing profile over sampled test tasks; optional feature export and beta sweep.
inline int cmd_analyze(const RunConfig& cfg, const std::string& checkpoint, const std::string& out_dir,
                       std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto state = load_checkpoint(checkpoint, cfg.model);
        const auto data = load_datasets(cfg);
        ensure_dir(out_dir);
        const std::size_t rank = cfg.analysis_rank();
        std::string report;
        std::size_t flagged = 0;
        for (std::size_t t = 0; t < cfg.analysis.tasks; ++t) {
            const auto task = sample_task(data.test, cfg.train.shape, cfg.model.query_init,
                                          derive_seed(cfg.seed, kAnalysisStream, t));
            const auto trace = model_forward_trace(task, state.params, cfg.model);
            const auto prof = smoothing_profile(trace.layer_features, cfg.analysis.epsilon, rank);
            for (std::size_t k = 0; k < prof.rank_loss.size(); ++k) {
                nlohmann::json rec{{"task", t},
                                   {"layer", k},
                                   {"rank_loss", prof.rank_loss[k]},
                                   {"consensus", prof.consensus[k]},
                                   {"flagged", prof.flagged(k)}};
                report += rec.dump() + "\n";
                flagged += prof.flagged(k) ? 1 : 0;
            }
            if (t == 0 && cfg.analysis.export_features)
                export_features(trace.layer_features, task, join(out_dir, "features"));
        }
        io::write_file(join(out_dir, "profile.jsonl"), report);
        out << "profile: " << cfg.analysis.tasks << " tasks x " << (cfg.model.layers + 1) << " layers, " << flagged
            << " flagged at epsilon=" << cfg.analysis.epsilon << " rank=" << rank << "\n";

        if (cfg.analysis.beta_sweep) {
            std::string sweep;
            for (int b = 1; b <= 10; ++b) {
                AttentionConfig m = cfg.model;
                m.beta = b / 10.0;
                const auto res = evaluate(state.params, data.test, cfg.train.shape, m, cfg.train.eval_episodes,
                                          cfg.seed);
                nlohmann::json rec{{"beta", m.beta}, {"accuracy", res.mean_accuracy}, {"ci95", ci_json(res.ci95)}};
                sweep += rec.dump() + "\n";
                out << "beta " << m.beta << " accuracy " << res.mean_accuracy << "\n";
            }
            io::write_file(join(out_dir, "beta_sweep.jsonl"), sweep);
        }
        return kExitOk;
    });
}

// ---------------------------------------------------------------------------
// Sweep: one base config, named model variants, one or more query distributions.
// ---------------------------------------------------------------------------

struct SweepVariant {
    std::string name;
    AttentionConfig model;
};

struct SweepPlan {
    RunConfig base;
    std::vector<SweepVariant> variants;
    std::vector<QueryDistribution> query_dists;
};

inline SweepPlan parse_sweep(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("<root>", "must be an object");
    for (const auto& [k, v] : doc.items())
        if (k != "base" && k != "variants" && k != "query_dists") throw ConfigError(k, "unknown key");
    if (!doc.contains("base")) throw ConfigError("base", "required key missing");
    if (!doc.contains("variants") || !doc.at("variants").is_array() || doc.at("variants").empty())
        throw ConfigError("variants", "must be a non-empty list");
    SweepPlan plan;
    plan.base = parse_run_config(doc.at("base"));
    for (const auto& v : doc.at("variants")) {
        if (!v.is_object() || !v.contains("name") || !v.at("name").is_string())
            throw ConfigError("variants", "each variant needs a string 'name'");
        for (const auto& [k, x] : v.items())
            if (k != "name" && k != "model") throw ConfigError("variants." + k, "unknown key");
        SweepVariant sv{v.at("name").get<std::string>(), plan.base.model};
        if (v.contains("model")) sv.model = parse_model_section(v.at("model"), plan.base.model);
        sv.model.validate();
        plan.variants.push_back(std::move(sv));
    }
    if (doc.contains("query_dists")) {
        for (const auto& q : doc.at("query_dists")) {
            const auto s = q.is_string() ? q.get<std::string>() : std::string();
            if (s == "uniform")
                plan.query_dists.push_back(QueryDistribution::uniform);
            else if (s == "random")
                plan.query_dists.push_back(QueryDistribution::random);
            else
                throw ConfigError("query_dists", "entries must be \"uniform\" or \"random\"");
        }
    } else {
        plan.query_dists.push_back(plan.base.train.shape.query_dist);
    }
    return plan;
}

struct SweepResult {
    std::string variant;
    QueryDistribution query_dist;
    EvalResult eval;
};

/// Trains and evaluates every (variant, query distribution) pair; training and
/// evaluation episodes share the query distribution.
inline std::vector<SweepResult> run_sweep(const SweepPlan& plan, std::ostream& out) {
    const auto data = load_datasets(plan.base);
    std::vector<SweepResult> results;
    for (auto dist : plan.query_dists)
        for (const auto& v : plan.variants) {
            TrainConfig tc = plan.base.train;
            tc.shape.query_dist = dist;
            const auto trained = train(data.train, data.test, tc, v.model);
            auto res = evaluate(trained.params, data.test, tc.shape, v.model, tc.eval_episodes, plan.base.seed);
            out << v.name << " [" << detail::name_of(dist) << "] accuracy " << res.mean_accuracy << " +/- "
                << format_ci(res.ci95) << "\n";
            results.push_back({v.name, dist, std::move(res)});
        }
    return results;
}

inline int cmd_sweep(const std::string& sweep_path, std::optional<std::uint64_t> seed_override,
                     const std::string& out_dir, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(io::read_file(sweep_path));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("<document>", std::string("not valid JSON: ") + e.what());
        }
        SweepPlan plan = parse_sweep(doc);
        if (seed_override) plan.base.seed = plan.base.train.seed = *seed_override;
        const auto results = run_sweep(plan, out);
        ensure_dir(out_dir);
        std::string lines;
        for (const auto& r : results) {
            nlohmann::json rec{{"variant", r.variant},
                               {"query_dist", detail::name_of(r.query_dist)},
                               {"accuracy", r.eval.mean_accuracy},
                               {"ci95", ci_json(r.eval.ci95)}};
            lines += rec.dump() + "\n";
        }
        io::write_file(join(out_dir, "sweep.jsonl"), lines);
        return kExitOk;
    });
}

}  // namespace agnn::cli
