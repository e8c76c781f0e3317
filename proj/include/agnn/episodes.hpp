#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "agnn/errors.hpp"
#include "agnn/io.hpp"
#include "agnn/random.hpp"
#include "agnn/task.hpp"
#include "agnn/tensor.hpp"

namespace agnn {

enum class Split { train, val, test };

struct ClassSamples {
    std::string label;
    std::vector<std::vector<double>> samples;
};

/// Per-class feature vectors standing in for backbone embeddings.
struct FeatureDataset {
    std::size_t dim = 0;
    std::vector<ClassSamples> classes;
    Split split = Split::train;

    std::size_t num_classes() const { return classes.size(); }
    std::size_t num_samples() const {
        std::size_t n = 0;
        for (const auto& c : classes) n += c.samples.size();
        return n;
    }
    std::size_t min_class_size() const {
        std::size_t m = SIZE_MAX;
        for (const auto& c : classes) m = std::min(m, c.samples.size());
        return classes.empty() ? 0 : m;
    }

    /// Classes [begin, end) as a new dataset with the given split tag.
    FeatureDataset subset(std::size_t begin, std::size_t end, Split tag) const {
        FeatureDataset out;
        out.dim = dim;
        out.split = tag;
        out.classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(begin),
                           classes.begin() + static_cast<std::ptrdiff_t>(end));
        return out;
    }
};

struct SyntheticSpec {
    std::size_t classes = 20;
    std::size_t per_class = 30;
    std::size_t dim = 16;
    double between_sigma = 5.0;
    double within_sigma = 1.0;
};

/// Gaussian class clusters: means ~ N(0, between^2 I), samples ~ N(mean, within^2 I).
/// Draw order is class by class (mean, then its samples), from Rng(seed).
inline FeatureDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.classes < 1) throw ConfigError("dataset.synthetic.classes", "must be >= 1");
    if (spec.per_class < 1) throw ConfigError("dataset.synthetic.per_class", "must be >= 1");
    if (spec.dim < 1) throw ConfigError("dataset.synthetic.dim", "must be >= 1");
    if (!(spec.between_sigma > 0.0)) throw ConfigError("dataset.synthetic.between_sigma", "must be > 0");
    if (!(spec.within_sigma > 0.0)) throw ConfigError("dataset.synthetic.within_sigma", "must be > 0");
    Rng rng(seed);
    FeatureDataset ds;
    ds.dim = spec.dim;
    ds.classes.resize(spec.classes);
    std::vector<double> mean(spec.dim);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        auto& cls = ds.classes[c];
        cls.label = "c" + std::to_string(c);
        for (auto& m : mean) m = rng.normal(0.0, spec.between_sigma);
        cls.samples.resize(spec.per_class, std::vector<double>(spec.dim));
        for (auto& s : cls.samples)
            for (std::size_t k = 0; k < spec.dim; ++k) s[k] = rng.normal(mean[k], spec.within_sigma);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Feature CSV: header `label,f0,...,f{d-1}`, one sample per line.
// ---------------------------------------------------------------------------

inline std::string features_csv_text(const FeatureDataset& ds) {
    std::string out = "label";
    for (std::size_t k = 0; k < ds.dim; ++k) out += ",f" + std::to_string(k);
    out += '\n';
    for (const auto& cls : ds.classes)
        for (const auto& s : cls.samples) {
            out += cls.label;
            for (double v : s) {
                out += ',';
                out += io::format_double(v);
            }
            out += '\n';
        }
    return out;
}

inline void save_features_csv(const FeatureDataset& ds, const std::string& path) {
    io::write_file(path, features_csv_text(ds));
}

inline FeatureDataset load_features_csv(const std::string& path, Split split = Split::train) {
    std::ifstream in(path);
    if (!in) throw ParseError(path, 0, "cannot open file");
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path, 1, "missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = io::split(line, ',');
    if (header.empty() || header[0] != "label") throw ParseError(path, 1, "header must start with 'label'");
    FeatureDataset ds;
    ds.split = split;
    ds.dim = header.size() - 1;
    if (ds.dim == 0) throw ParseError(path, 1, "header names no feature columns");
    for (std::size_t k = 0; k < ds.dim; ++k)
        if (header[k + 1] != "f" + std::to_string(k))
            throw ParseError(path, 1, "expected column 'f" + std::to_string(k) + "'");

    std::unordered_map<std::string, std::size_t> index;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = io::split(line, ',');
        if (fields.size() != ds.dim + 1)
            throw ParseError(path, lineno,
                             "expected " + std::to_string(ds.dim + 1) + " fields, found " + std::to_string(fields.size()));
        std::vector<double> sample(ds.dim);
        for (std::size_t k = 0; k < ds.dim; ++k) {
            auto v = io::parse_double(fields[k + 1]);
            if (!v) throw ParseError(path, lineno, "non-numeric value '" + std::string(fields[k + 1]) + "'");
            sample[k] = *v;
        }
        const std::string label(fields[0]);
        auto [it, fresh] = index.emplace(label, ds.classes.size());
        if (fresh) ds.classes.push_back({label, {}});
        ds.classes[it->second].samples.push_back(std::move(sample));
    }
    if (ds.classes.empty()) throw ParseError(path, 0, "no samples");
    return ds;
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

struct TaskShape {
    std::size_t ways = 5;
    std::size_t shots = 1;
    std::size_t queries_per_class = 5;  // q; ignored in the inductive setting
    Setting setting = Setting::transductive;
    QueryDistribution query_dist = QueryDistribution::uniform;

    std::size_t num_queries() const { return setting == Setting::inductive ? 1 : ways * queries_per_class; }
    std::size_t num_nodes() const { return ways * shots + num_queries(); }
};

/// Assembles a task graph. The first `num_support` entries are support nodes.
/// Query label rows are 1/N (uniform) or 0 (zero).
inline TaskGraph build_task_graph(std::span<const std::vector<double>> samples, std::span<const std::size_t> classes,
                                  std::size_t num_support, std::size_t ways, QueryInit init) {
    if (samples.size() != classes.size())
        throw ShapeError("build_task_graph: " + std::to_string(samples.size()) + " samples but " +
                         std::to_string(classes.size()) + " labels");
    if (samples.empty() || num_support > samples.size() || ways == 0)
        throw ShapeError("build_task_graph: empty graph or support count out of range");
    const std::size_t v = samples.size(), d = samples.front().size();
    std::vector<double> x(v * d), y(v * ways, 0.0);
    TaskGraph task;
    task.ways = ways;
    task.shots = num_support / ways;
    for (std::size_t i = 0; i < v; ++i) {
        if (samples[i].size() != d) throw ShapeError("build_task_graph: ragged feature rows");
        if (classes[i] >= ways) throw ShapeError("build_task_graph: class index out of range");
        std::copy(samples[i].begin(), samples[i].end(), x.begin() + static_cast<std::ptrdiff_t>(i * d));
        if (i < num_support) {
            y[i * ways + classes[i]] = 1.0;
            task.support_indices.push_back(i);
        } else {
            if (init == QueryInit::uniform)
                std::fill_n(y.begin() + static_cast<std::ptrdiff_t>(i * ways), ways, 1.0 / static_cast<double>(ways));
            task.query_indices.push_back(i);
            task.truth.push_back(classes[i]);
        }
    }
    task.features = Tensor(v, d, std::move(x));
    task.labels = Tensor(v, ways, std::move(y));
    task.node_class.assign(classes.begin(), classes.end());
    return task;
}

/// Samples one N-way K-shot episode. Fully determined by (dataset, shape, init, seed).
inline TaskGraph sample_task(const FeatureDataset& ds, const TaskShape& shape, QueryInit init, std::uint64_t seed) {
    const std::size_t n = shape.ways, k = shape.shots;
    if (n < 1 || k < 1) throw CapacityError("task needs ways >= 1 and shots >= 1");
    if (shape.setting == Setting::transductive && shape.queries_per_class < 1)
        throw CapacityError("transductive task needs queries_per_class >= 1");
    if (ds.num_classes() < n)
        throw CapacityError("dataset has " + std::to_string(ds.num_classes()) + " classes, task needs " +
                            std::to_string(n));
    const std::size_t per_class_need = k + (shape.setting == Setting::inductive ? 1 : shape.queries_per_class);
    for (const auto& c : ds.classes)
        if (c.samples.size() < per_class_need)
            throw CapacityError("class '" + c.label + "' has " + std::to_string(c.samples.size()) +
                                " samples, task needs " + std::to_string(per_class_need));

    Rng rng(seed);
    std::vector<std::size_t> class_order(ds.num_classes());
    std::iota(class_order.begin(), class_order.end(), 0);
    rng.shuffle(class_order);
    class_order.resize(n);

    std::vector<std::vector<std::size_t>> pools(n);
    for (std::size_t s = 0; s < n; ++s) {
        pools[s].resize(ds.classes[class_order[s]].samples.size());
        std::iota(pools[s].begin(), pools[s].end(), 0);
        rng.shuffle(pools[s]);
    }
    std::vector<std::size_t> next(n, 0);

    std::vector<std::size_t> query_classes;
    if (shape.setting == Setting::inductive) {
        query_classes.push_back(rng.below(n));
    } else if (shape.query_dist == QueryDistribution::uniform) {
        for (std::size_t s = 0; s < n; ++s) query_classes.insert(query_classes.end(), shape.queries_per_class, s);
        rng.shuffle(query_classes);
    } else {
        // i.i.d. uniform classes; a draw hitting an exhausted class is redrawn.
        std::vector<std::size_t> left(n);
        for (std::size_t s = 0; s < n; ++s) left[s] = pools[s].size() - k;
        const std::size_t total = n * shape.queries_per_class;
        while (query_classes.size() < total) {
            const std::size_t s = rng.below(n);
            if (left[s] == 0) continue;
            --left[s];
            query_classes.push_back(s);
        }
    }

    std::vector<std::vector<double>> samples;
    std::vector<std::size_t> classes;
    std::vector<SampleRef> refs;
    auto take = [&](std::size_t slot) {
        const std::size_t row = pools[slot][next[slot]++];
        samples.push_back(ds.classes[class_order[slot]].samples[row]);
        classes.push_back(slot);
        refs.push_back({class_order[slot], row});
    };
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < k; ++j) take(s);
    for (std::size_t s : query_classes) take(s);

    TaskGraph task = build_task_graph(samples, classes, n * k, n, init);
    task.sources = std::move(refs);
    return task;
}

}  // namespace agnn
