#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "agnn/attention.hpp"
#include "agnn/episodes.hpp"
#include "agnn/errors.hpp"
#include "agnn/random.hpp"
#include "agnn/tensor.hpp"

namespace agnn {

// Seed streams; every random draw in training derives from (seed, stream, index).
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kTrainTaskStream = 2;
inline constexpr std::uint64_t kEvalTaskStream = 3;

struct TrainConfig {
    double learning_rate = 1e-3;
    double weight_decay = 1e-6;
    std::size_t batch_tasks = 20;
    std::size_t total_episodes = 5000;  // tasks sampled over the whole run
    std::size_t lr_halving_interval = 2000;
    std::size_t eval_interval = 500;
    std::size_t eval_episodes = 200;
    std::size_t threads = 1;
    std::uint64_t seed = 42;
    TaskShape shape;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be > 0");
        if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
        if (batch_tasks < 1) throw ConfigError("train.batch_tasks", "must be >= 1");
        if (total_episodes < 1) throw ConfigError("train.total_episodes", "must be >= 1");
        if (lr_halving_interval < 1) throw ConfigError("train.lr_halving_interval", "must be >= 1");
        if (eval_interval < 1) throw ConfigError("train.eval_interval", "must be >= 1");
        if (eval_episodes < 1) throw ConfigError("train.eval_episodes", "must be >= 1");
        if (threads < 1) throw ConfigError("train.threads", "must be >= 1");
        if (shape.ways < 1) throw ConfigError("train.ways", "must be >= 1");
        if (shape.shots < 1) throw ConfigError("train.shots", "must be >= 1");
        if (shape.queries_per_class < 1) throw ConfigError("train.queries_per_class", "must be >= 1");
    }

    /// Learning rate in effect when `episode` tasks have been consumed.
    double lr_at(std::size_t episode) const {
        return learning_rate * std::ldexp(1.0, -static_cast<int>(episode / lr_halving_interval));
    }
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Sum over queries of -log softmax(logits_i)[truth_i], as a [1x1] tensor.
inline Tensor query_cross_entropy(const Tensor& logits, std::span<const std::size_t> truth) {
    const std::size_t q = logits.rows(), n = logits.cols();
    if (q < 1) throw std::invalid_argument("query_cross_entropy: no queries");
    if (truth.size() != q)
        throw ShapeError("query_cross_entropy: " + std::to_string(truth.size()) + " labels for " + std::to_string(q) +
                         " query rows");
    for (std::size_t t : truth)
        if (t >= n)
            throw std::out_of_range("query_cross_entropy: class " + std::to_string(t) + " outside [0," +
                                    std::to_string(n) + ")");
    std::vector<double> probs(q * n);
    double loss = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
        const double* row = logits.values().data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        loss += lse - row[truth[i]];
        for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - lse);
    }
    std::vector<std::size_t> labels(truth.begin(), truth.end());
    return make_op_result({1, 1}, {loss}, {logits}, "query_cross_entropy",
                          [q, n, probs = std::move(probs), labels = std::move(labels)](detail::Node& self) {
                              auto& L = self.inputs[0];
                              L->ensure_grad();
                              const double g = self.grad[0];
                              for (std::size_t i = 0; i < q; ++i)
                                  for (std::size_t j = 0; j < n; ++j)
                                      L->grad[i * n + j] += g * (probs[i * n + j] - (j == labels[i] ? 1.0 : 0.0));
                          });
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;

    static AdamState for_params(std::span<const Tensor> params) {
        AdamState s;
        for (const auto& p : params) {
            s.first_moment.emplace_back(p.size(), 0.0);
            s.second_moment.emplace_back(p.size(), 0.0);
        }
        return s;
    }
};

/// Decoupled weight decay, then one bias-corrected Adam step; clears gradients.
inline void adam_step(std::span<Tensor> params, AdamState& state, double lr, double weight_decay = 0.0) {
    if (state.first_moment.size() != params.size())
        throw std::invalid_argument("adam_step: optimizer state holds " + std::to_string(state.first_moment.size()) +
                                    " slots for " + std::to_string(params.size()) + " parameters");
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto values = params[p].mutable_values();
        auto grad = params[p].mutable_grad();
        auto& m = state.first_moment[p];
        auto& v = state.second_moment[p];
        if (m.size() != values.size()) throw std::invalid_argument("adam_step: moment shape mismatch");
        const double decay = 1.0 - lr * weight_decay;
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] *= decay;
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.epsilon);
        }
        std::fill(grad.begin(), grad.end(), 0.0);
    }
}

inline void adam_step(ModelParams& params, AdamState& state, double lr, double weight_decay = 0.0) {
    auto tensors = params.tensors();
    adam_step(std::span<Tensor>(tensors), state, lr, weight_decay);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double mean_accuracy = 0.0;
    std::optional<double> ci95;  // half-width; absent for a single episode
    std::vector<double> per_episode;
};

inline std::size_t argmax_row(const Tensor& t, std::size_t row) {
    const double* r = t.values().data() + row * t.cols();
    return static_cast<std::size_t>(std::max_element(r, r + t.cols()) - r);
}

inline double task_accuracy(const Tensor& logits, std::span<const std::size_t> truth) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) correct += argmax_row(logits, i) == truth[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(truth.size());
}

inline EvalResult summarize_accuracy(std::vector<double> per_episode) {
    EvalResult r;
    const double n = static_cast<double>(per_episode.size());
    for (double a : per_episode) r.mean_accuracy += a;
    r.mean_accuracy /= n;
    if (per_episode.size() > 1) {
        double ss = 0.0;
        for (double a : per_episode) ss += (a - r.mean_accuracy) * (a - r.mean_accuracy);
        r.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    }
    r.per_episode = std::move(per_episode);
    return r;
}

using Predictor = std::function<Tensor(const TaskGraph&)>;

/// Mean query accuracy of `predict` over seeded episodes of `ds`.
inline EvalResult evaluate_predictor(const Predictor& predict, const FeatureDataset& ds, const TaskShape& shape,
                                     QueryInit init, std::size_t episodes, std::uint64_t seed) {
    if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
    std::vector<double> acc;
    acc.reserve(episodes);
    for (std::size_t e = 0; e < episodes; ++e) {
        const TaskGraph task = sample_task(ds, shape, init, derive_seed(seed, kEvalTaskStream, e));
        acc.push_back(task_accuracy(predict(task), task.truth));
    }
    return summarize_accuracy(std::move(acc));
}

inline EvalResult evaluate(const ModelParams& params, const FeatureDataset& ds, const TaskShape& shape,
                           const AttentionConfig& acfg, std::size_t episodes, std::uint64_t seed) {
    return evaluate_predictor([&](const TaskGraph& t) { return model_forward(t, params, acfg); }, ds, shape,
                              acfg.query_init, episodes, seed);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct MetricsRecord {
    std::size_t episode = 0;
    double mean_loss = 0.0;
    double eval_accuracy = 0.0;
    double lr = 0.0;

    friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

/// Everything needed to continue a run bit-for-bit.
struct TrainingState {
    ModelParams params;
    AdamState optimizer;
    std::size_t episode = 0;
    double pending_loss_sum = 0.0;  // task losses since the last metrics record
    std::size_t pending_tasks = 0;
    std::size_t next_record = 0;
};

struct TaskGradient {
    double loss = 0.0;
    std::vector<std::vector<double>> grads;
};

inline TaskGradient task_gradient(const TaskGraph& task, const ModelParams& params, const AttentionConfig& acfg) {
    ModelParams local = params.clone();
    const Tensor loss = query_cross_entropy(model_forward(task, local, acfg), task.truth);
    backward(loss);
    TaskGradient out;
    out.loss = loss.item();
    for (const auto& t : local.tensors()) out.grads.emplace_back(t.grad().begin(), t.grad().end());
    return out;
}

class Trainer {
public:
    using RecordSink = std::function<void(const MetricsRecord&)>;

    Trainer(const FeatureDataset& train, const FeatureDataset& eval, TrainConfig cfg, AttentionConfig acfg)
        : train_(train), eval_(eval), cfg_(cfg), acfg_(std::move(acfg)) {
        cfg_.validate();
        acfg_.validate();
        if (train_.dim != eval_.dim) throw ShapeError("train and eval datasets differ in feature dimension");
        state_.params = ModelParams::init(acfg_, train_.dim, cfg_.shape.ways, derive_seed(cfg_.seed, kInitStream));
        state_.optimizer = AdamState::for_params(state_.params.tensors());
        state_.next_record = std::min(cfg_.eval_interval, cfg_.total_episodes);
    }

    /// Replaces the state, e.g. from a checkpoint.
    void restore(TrainingState state) { state_ = std::move(state); }

    const TrainingState& state() const { return state_; }
    const ModelParams& params() const { return state_.params; }
    const TrainConfig& config() const { return cfg_; }
    const AttentionConfig& attention() const { return acfg_; }
    bool finished() const { return state_.episode >= cfg_.total_episodes; }

    /// One optimizer step over the next batch of tasks; returns the mean task loss.
    double step() {
        const std::size_t first = state_.episode;
        const std::size_t count = std::min(cfg_.batch_tasks, cfg_.total_episodes - first);
        if (count == 0) throw std::logic_error("Trainer::step: run already finished");
        const double lr = cfg_.lr_at(first);

        std::vector<TaskGradient> results(count);
        auto work = [&](std::size_t begin, std::size_t end) {
            for (std::size_t t = begin; t < end; ++t) {
                const TaskGraph task = sample_task(train_, cfg_.shape, acfg_.query_init,
                                                   derive_seed(cfg_.seed, kTrainTaskStream, first + t));
                results[t] = task_gradient(task, state_.params, acfg_);
            }
        };
        const std::size_t workers = std::min(cfg_.threads, count);
        if (workers <= 1) {
            work(0, count);
        } else {
            std::vector<std::future<void>> jobs;
            const std::size_t chunk = (count + workers - 1) / workers;
            for (std::size_t b = 0; b < count; b += chunk)
                jobs.push_back(std::async(std::launch::async, work, b, std::min(count, b + chunk)));
            for (auto& j : jobs) j.get();
        }

        // Reduce in task order so the result is independent of the worker count.
        auto tensors = state_.params.tensors();
        double loss_sum = 0.0;
        const double inv = 1.0 / static_cast<double>(count);
        for (std::size_t p = 0; p < tensors.size(); ++p) {
            auto g = tensors[p].mutable_grad();
            std::fill(g.begin(), g.end(), 0.0);
            for (const auto& r : results)
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += r.grads[p][i];
            for (auto& x : g) x *= inv;
        }
        for (const auto& r : results) loss_sum += r.loss;
        adam_step(std::span<Tensor>(tensors), state_.optimizer, lr, cfg_.weight_decay);

        state_.episode += count;
        state_.pending_loss_sum += loss_sum;
        state_.pending_tasks += count;
        return loss_sum * inv;
    }

    /// True when the episode counter has reached the next metrics boundary.
    bool record_due() const { return state_.pending_tasks > 0 && (state_.episode >= state_.next_record || finished()); }

    MetricsRecord make_record() {
        MetricsRecord rec;
        rec.episode = state_.episode;
        rec.mean_loss = state_.pending_loss_sum / static_cast<double>(state_.pending_tasks);
        rec.eval_accuracy = evaluate(state_.params, eval_, cfg_.shape, acfg_, cfg_.eval_episodes, cfg_.seed).mean_accuracy;
        rec.lr = cfg_.lr_at(state_.episode);
        state_.pending_loss_sum = 0.0;
        state_.pending_tasks = 0;
        while (state_.next_record <= state_.episode) state_.next_record += cfg_.eval_interval;
        state_.next_record = std::min(state_.next_record, cfg_.total_episodes);
        return rec;
    }

    /// Trains until `stop_episode` (or the end), emitting metrics records.
    void run(const RecordSink& sink, std::size_t stop_episode = SIZE_MAX) {
        while (!finished() && state_.episode < stop_episode) {
            step();
            if (record_due()) sink(make_record());
        }
    }

private:
    const FeatureDataset& train_;
    const FeatureDataset& eval_;
    TrainConfig cfg_;
    AttentionConfig acfg_;
    TrainingState state_;
};

struct TrainResult {
    ModelParams params;
    std::vector<MetricsRecord> log;
};

inline TrainResult train(const FeatureDataset& train_ds, const FeatureDataset& eval_ds, const TrainConfig& cfg,
                         const AttentionConfig& acfg) {
    Trainer trainer(train_ds, eval_ds, cfg, acfg);
    TrainResult result;
    trainer.run([&](const MetricsRecord& r) { result.log.push_back(r); });
    result.params = trainer.params();
    return result;
}

}  // namespace agnn
