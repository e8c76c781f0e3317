#pragma once

// Run configuration document (JSON). Every key is optional except
// dataset.source; unknown keys are rejected. to_json() emits the canonical form.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "agnn/attention.hpp"
#include "agnn/episodes.hpp"
#include "agnn/errors.hpp"
#include "agnn/training.hpp"

namespace agnn {

enum class DatasetSource { synthetic, csv };

struct SyntheticSplitSpec {
    std::size_t train_classes = 64;
    std::size_t test_classes = 20;
    std::size_t per_class = 30;
    std::size_t dim = 16;
    double between_sigma = 5.0;
    double within_sigma = 1.0;

    friend bool operator==(const SyntheticSplitSpec&, const SyntheticSplitSpec&) = default;
};

struct DatasetConfig {
    DatasetSource source = DatasetSource::synthetic;
    SyntheticSplitSpec synthetic;
    std::string train_path;
    std::string test_path;
};

struct AnalysisConfig {
    double epsilon = 1e-2;
    std::size_t rank = 0;  // 0 selects N (number of ways)
    std::size_t tasks = 20;
    bool export_features = false;
    bool beta_sweep = false;
};

struct RunConfig {
    std::uint64_t seed = 42;
    std::string output_dir = "runs/default";
    DatasetConfig dataset;
    AttentionConfig model;
    TrainConfig train;
    AnalysisConfig analysis;

    void validate() const {
        model.validate();
        train.validate();
        if (dataset.source == DatasetSource::synthetic) {
            const auto& s = dataset.synthetic;
            if (s.train_classes < 1) throw ConfigError("dataset.synthetic.train_classes", "must be >= 1");
            if (s.test_classes < 1) throw ConfigError("dataset.synthetic.test_classes", "must be >= 1");
            if (s.per_class < 1) throw ConfigError("dataset.synthetic.per_class", "must be >= 1");
            if (s.dim < 1) throw ConfigError("dataset.synthetic.dim", "must be >= 1");
            if (!(s.between_sigma > 0.0)) throw ConfigError("dataset.synthetic.between_sigma", "must be > 0");
            if (!(s.within_sigma > 0.0)) throw ConfigError("dataset.synthetic.within_sigma", "must be > 0");
        } else {
            if (dataset.train_path.empty()) throw ConfigError("dataset.train_path", "required for csv source");
            if (dataset.test_path.empty()) throw ConfigError("dataset.test_path", "required for csv source");
        }
        if (!(analysis.epsilon > 0.0)) throw ConfigError("analysis.epsilon", "must be > 0");
        if (analysis.tasks < 1) throw ConfigError("analysis.tasks", "must be >= 1");
    }

    std::size_t analysis_rank() const { return analysis.rank == 0 ? train.shape.ways : analysis.rank; }
};

namespace detail {

class ObjectReader {
public:
    ObjectReader(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "must be an object");
    }

    std::string key(const std::string& name) const { return path_.empty() ? name : path_ + "." + name; }

    bool has(const std::string& name) {
        seen_.insert(name);
        return obj_.contains(name);
    }

    const nlohmann::json& at(const std::string& name) {
        seen_.insert(name);
        return obj_.at(name);
    }

    template <typename T>
    void read(const std::string& name, T& out) {
        if (!has(name)) return;
        try {
            out = obj_.at(name).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(key(name), "has the wrong type");
        }
    }

    void read_count(const std::string& name, std::size_t& out) {
        if (!has(name)) return;
        const auto& v = obj_.at(name);
        if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
            throw ConfigError(key(name), "must be a non-negative integer");
        out = v.get<std::size_t>();
    }

    void read_real(const std::string& name, double& out) {
        if (!has(name)) return;
        const auto& v = obj_.at(name);
        if (!v.is_number()) throw ConfigError(key(name), "must be a number");
        out = v.get<double>();
    }

    template <typename E>
    void read_enum(const std::string& name, E& out, std::initializer_list<std::pair<const char*, E>> table) {
        if (!has(name)) return;
        const auto& v = obj_.at(name);
        if (v.is_string())
            for (const auto& [text, value] : table)
                if (v.get<std::string>() == text) {
                    out = value;
                    return;
                }
        std::string allowed;
        for (const auto& [text, value] : table) allowed += (allowed.empty() ? "" : ", ") + std::string(text);
        throw ConfigError(key(name), "must be one of {" + allowed + "}");
    }

    void reject_unknown() const {
        for (const auto& [k, v] : obj_.items())
            if (!seen_.count(k)) throw ConfigError(key(k), "unknown key");
    }

private:
    const nlohmann::json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

inline const char* name_of(MemoryMode m) {
    switch (m) {
        case MemoryMode::dense: return "dense";
        case MemoryMode::label_concat: return "label_concat";
        case MemoryMode::none: return "none";
    }
    return "";
}
inline const char* name_of(QueryInit q) { return q == QueryInit::uniform ? "uniform" : "zero"; }
inline const char* name_of(Setting s) { return s == Setting::inductive ? "inductive" : "transductive"; }
inline const char* name_of(QueryDistribution q) { return q == QueryDistribution::uniform ? "uniform" : "random"; }

}  // namespace detail

inline AttentionConfig parse_model_section(const nlohmann::json& j, AttentionConfig m = {}) {
    detail::ObjectReader r(j, "model");
    r.read_real("alpha", m.alpha);
    r.read_real("beta", m.beta);
    r.read_count("layers", m.layers);
    r.read_count("hidden_m", m.hidden_m);
    if (r.has("mlp_widths")) {
        const auto& w = r.at("mlp_widths");
        if (w.is_string() && w.get<std::string>() == "auto") {
            m.mlp_widths.clear();
        } else if (w.is_array()) {
            m.mlp_widths.clear();
            for (const auto& x : w) {
                if (!x.is_number_integer() || x.get<std::int64_t>() < 1)
                    throw ConfigError("model.mlp_widths", "entries must be positive integers");
                m.mlp_widths.push_back(x.get<std::size_t>());
            }
            if (m.mlp_widths.empty()) throw ConfigError("model.mlp_widths", "must not be empty");
        } else {
            throw ConfigError("model.mlp_widths", "must be \"auto\" or a list of widths");
        }
    }
    r.read_enum("memory_mode", m.memory_mode,
                {{"dense", MemoryMode::dense}, {"label_concat", MemoryMode::label_concat}, {"none", MemoryMode::none}});
    r.read_enum("query_init", m.query_init, {{"uniform", QueryInit::uniform}, {"zero", QueryInit::zero}});
    r.read_real("leaky_slope", m.leaky_slope);
    r.read("row_renormalize_adjacency", m.row_renormalize_adjacency);
    r.read("self_attention", m.self_attention);
    r.read("normalize_fusion", m.normalize_fusion);
    r.reject_unknown();
    return m;
}

inline nlohmann::json to_json(const AttentionConfig& m) {
    nlohmann::json widths = m.mlp_widths.empty() ? nlohmann::json("auto") : nlohmann::json(m.mlp_widths);
    return {{"alpha", m.alpha},
            {"beta", m.beta},
            {"layers", m.layers},
            {"hidden_m", m.hidden_m},
            {"mlp_widths", widths},
            {"memory_mode", detail::name_of(m.memory_mode)},
            {"query_init", detail::name_of(m.query_init)},
            {"leaky_slope", m.leaky_slope},
            {"row_renormalize_adjacency", m.row_renormalize_adjacency},
            {"self_attention", m.self_attention},
            {"normalize_fusion", m.normalize_fusion}};
}

inline RunConfig parse_run_config(const nlohmann::json& doc) {
    RunConfig c;
    detail::ObjectReader root(doc, "");
    if (root.has("seed")) {
        const auto& s = root.at("seed");
        if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<std::int64_t>() >= 0))
            throw ConfigError("seed", "must be a non-negative integer");
        c.seed = s.get<std::uint64_t>();
    }
    root.read("output_dir", c.output_dir);

    if (!root.has("dataset")) throw ConfigError("dataset", "required key missing");
    {
        detail::ObjectReader r(root.at("dataset"), "dataset");
        if (!r.has("source")) throw ConfigError("dataset.source", "required key missing");
        r.read_enum("source", c.dataset.source, {{"synthetic", DatasetSource::synthetic}, {"csv", DatasetSource::csv}});
        r.read("train_path", c.dataset.train_path);
        r.read("test_path", c.dataset.test_path);
        if (r.has("synthetic")) {
            detail::ObjectReader s(r.at("synthetic"), "dataset.synthetic");
            auto& sp = c.dataset.synthetic;
            s.read_count("train_classes", sp.train_classes);
            s.read_count("test_classes", sp.test_classes);
            s.read_count("per_class", sp.per_class);
            s.read_count("dim", sp.dim);
            s.read_real("between_sigma", sp.between_sigma);
            s.read_real("within_sigma", sp.within_sigma);
            s.reject_unknown();
        }
        r.reject_unknown();
    }
    if (root.has("model")) c.model = parse_model_section(root.at("model"));
    if (root.has("train")) {
        detail::ObjectReader r(root.at("train"), "train");
        auto& t = c.train;
        r.read_real("learning_rate", t.learning_rate);
        r.read_real("weight_decay", t.weight_decay);
        r.read_count("batch_tasks", t.batch_tasks);
        r.read_count("total_episodes", t.total_episodes);
        r.read_count("lr_halving_interval", t.lr_halving_interval);
        r.read_count("eval_interval", t.eval_interval);
        r.read_count("eval_episodes", t.eval_episodes);
        r.read_count("threads", t.threads);
        r.read_count("ways", t.shape.ways);
        r.read_count("shots", t.shape.shots);
        r.read_count("queries_per_class", t.shape.queries_per_class);
        r.read_enum("setting", t.shape.setting,
                    {{"inductive", Setting::inductive}, {"transductive", Setting::transductive}});
        r.read_enum("query_dist", t.shape.query_dist,
                    {{"uniform", QueryDistribution::uniform}, {"random", QueryDistribution::random}});
        r.reject_unknown();
    }
    if (root.has("analysis")) {
        detail::ObjectReader r(root.at("analysis"), "analysis");
        r.read_real("epsilon", c.analysis.epsilon);
        r.read_count("rank", c.analysis.rank);
        r.read_count("tasks", c.analysis.tasks);
        r.read("export_features", c.analysis.export_features);
        r.read("beta_sweep", c.analysis.beta_sweep);
        r.reject_unknown();
    }
    root.reject_unknown();
    c.train.seed = c.seed;
    c.validate();
    return c;
}

inline RunConfig parse_run_config_text(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("<document>", std::string("not valid JSON: ") + e.what());
    }
    return parse_run_config(doc);
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json dataset{{"source", c.dataset.source == DatasetSource::synthetic ? "synthetic" : "csv"}};
    if (c.dataset.source == DatasetSource::synthetic) {
        const auto& s = c.dataset.synthetic;
        dataset["synthetic"] = {{"train_classes", s.train_classes}, {"test_classes", s.test_classes},
                                {"per_class", s.per_class},         {"dim", s.dim},
                                {"between_sigma", s.between_sigma}, {"within_sigma", s.within_sigma}};
    } else {
        dataset["train_path"] = c.dataset.train_path;
        dataset["test_path"] = c.dataset.test_path;
    }
    const auto& t = c.train;
    return {{"seed", c.seed},
            {"output_dir", c.output_dir},
            {"dataset", std::move(dataset)},
            {"model", to_json(c.model)},
            {"train",
             {{"learning_rate", t.learning_rate},
              {"weight_decay", t.weight_decay},
              {"batch_tasks", t.batch_tasks},
              {"total_episodes", t.total_episodes},
              {"lr_halving_interval", t.lr_halving_interval},
              {"eval_interval", t.eval_interval},
              {"eval_episodes", t.eval_episodes},
              {"threads", t.threads},
              {"ways", t.shape.ways},
              {"shots", t.shape.shots},
              {"queries_per_class", t.shape.queries_per_class},
              {"setting", detail::name_of(t.shape.setting)},
              {"query_dist", detail::name_of(t.shape.query_dist)}}},
            {"analysis",
             {{"epsilon", c.analysis.epsilon},
              {"rank", c.analysis.rank},
              {"tasks", c.analysis.tasks},
              {"export_features", c.analysis.export_features},
              {"beta_sweep", c.analysis.beta_sweep}}}};
}

/// Canonical text: sorted keys, two-space indent, trailing newline.
inline std::string canonical_text(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace agnn
