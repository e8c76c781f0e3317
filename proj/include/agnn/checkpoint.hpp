#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "agnn/attention.hpp"
#include "agnn/errors.hpp"
#include "agnn/io.hpp"
#include "agnn/training.hpp"

namespace agnn {

inline constexpr const char* kCheckpointFormat = "agnn-checkpoint-v1";

namespace detail {

inline nlohmann::json encode_tensor_entry(const std::string& name, std::size_t rows, std::size_t cols,
                                          std::span<const double> values) {
    return {{"name", name}, {"rows", rows}, {"cols", cols}, {"values", io::encode_doubles(values)}};
}

inline std::vector<double> decode_tensor_entry(const nlohmann::json& entry, const std::string& expect_name,
                                               Shape expect_shape) {
    const auto name = entry.at("name").get<std::string>();
    if (name != expect_name)
        throw CheckpointError("checkpoint entry '" + name + "' found where '" + expect_name + "' was expected");
    const Shape got{entry.at("rows").get<std::size_t>(), entry.at("cols").get<std::size_t>()};
    if (got != expect_shape)
        throw CheckpointError("shape mismatch for '" + name + "': checkpoint " + got.str() + " vs config " +
                              expect_shape.str());
    std::vector<double> values;
    try {
        values = io::decode_doubles(entry.at("values").get<std::string>());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError("corrupted values for '" + name + "': " + e.what());
    }
    if (values.size() != got.rows * got.cols)
        throw CheckpointError("corrupted values for '" + name + "': " + std::to_string(values.size()) +
                              " values for shape " + got.str());
    return values;
}

}  // namespace detail

/// Manifest of named tensors plus optimizer state and progress counters.
inline std::string checkpoint_text(const TrainingState& state) {
    nlohmann::json doc;
    doc["format"] = kCheckpointFormat;
    doc["episode"] = state.episode;
    doc["feature_dim"] = state.params.feature_dim;
    doc["ways"] = state.params.ways;
    auto params = nlohmann::json::array();
    auto first = nlohmann::json::array();
    auto second = nlohmann::json::array();
    const auto named = state.params.named();
    for (std::size_t p = 0; p < named.size(); ++p) {
        const auto& [name, t] = named[p];
        params.push_back(detail::encode_tensor_entry(name, t.rows(), t.cols(), t.values()));
        if (p < state.optimizer.first_moment.size()) {
            first.push_back(detail::encode_tensor_entry(name, t.rows(), t.cols(), state.optimizer.first_moment[p]));
            second.push_back(detail::encode_tensor_entry(name, t.rows(), t.cols(), state.optimizer.second_moment[p]));
        }
    }
    doc["parameters"] = std::move(params);
    doc["optimizer"] = {{"beta1", state.optimizer.beta1},
                        {"beta2", state.optimizer.beta2},
                        {"epsilon", state.optimizer.epsilon},
                        {"step", state.optimizer.step},
                        {"first_moment", std::move(first)},
                        {"second_moment", std::move(second)}};
    const double pending[1] = {state.pending_loss_sum};
    doc["progress"] = {{"pending_loss_sum", io::encode_doubles(pending)},
                       {"pending_tasks", state.pending_tasks},
                       {"next_record", state.next_record}};
    return doc.dump(1) + "\n";
}

inline void save_checkpoint(const TrainingState& state, const std::string& path) {
    io::write_file(path, checkpoint_text(state));
}

/// Parses a checkpoint and checks every tensor against the shapes `cfg` implies.
inline TrainingState parse_checkpoint(const std::string& text, const AttentionConfig& cfg) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    try {
        if (doc.at("format").get<std::string>() != kCheckpointFormat)
            throw CheckpointError("unknown checkpoint format '" + doc.at("format").get<std::string>() + "'");
        TrainingState state;
        state.params = ModelParams::init(cfg, doc.at("feature_dim").get<std::size_t>(),
                                         doc.at("ways").get<std::size_t>(), 0);
        const auto named = state.params.named();
        const auto& params = doc.at("parameters");
        const auto& opt = doc.at("optimizer");
        const auto& first = opt.at("first_moment");
        const auto& second = opt.at("second_moment");
        if (params.size() != named.size())
            throw CheckpointError("checkpoint holds " + std::to_string(params.size()) + " tensors, config implies " +
                                  std::to_string(named.size()));
        if (first.size() != named.size() || second.size() != named.size())
            throw CheckpointError("optimizer moments do not match the parameter list");
        state.optimizer.beta1 = opt.at("beta1").get<double>();
        state.optimizer.beta2 = opt.at("beta2").get<double>();
        state.optimizer.epsilon = opt.at("epsilon").get<double>();
        state.optimizer.step = opt.at("step").get<std::uint64_t>();
        for (std::size_t p = 0; p < named.size(); ++p) {
            auto [name, t] = named[p];
            auto values = detail::decode_tensor_entry(params[p], name, t.shape());
            auto dst = t.mutable_values();
            std::copy(values.begin(), values.end(), dst.begin());
            state.optimizer.first_moment.push_back(detail::decode_tensor_entry(first[p], name, t.shape()));
            state.optimizer.second_moment.push_back(detail::decode_tensor_entry(second[p], name, t.shape()));
        }
        state.episode = doc.at("episode").get<std::size_t>();
        const auto& progress = doc.at("progress");
        std::vector<double> pending;
        try {
            pending = io::decode_doubles(progress.at("pending_loss_sum").get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw CheckpointError(std::string("corrupted progress record: ") + e.what());
        }
        if (pending.size() != 1) throw CheckpointError("corrupted progress record");
        state.pending_loss_sum = pending[0];
        state.pending_tasks = progress.at("pending_tasks").get<std::size_t>();
        state.next_record = progress.at("next_record").get<std::size_t>();
        return state;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint incompatible with config: ") + e.what());
    }
}

inline TrainingState load_checkpoint(const std::string& path, const AttentionConfig& cfg) {
    std::string text;
    try {
        text = io::read_file(path);
    } catch (const std::runtime_error& e) {
        throw CheckpointError(e.what());
    }
    return parse_checkpoint(text, cfg);
}

// ---------------------------------------------------------------------------
// Metrics log: one JSON object per line.
// ---------------------------------------------------------------------------

inline std::string metrics_line(const MetricsRecord& r) {
    nlohmann::json j{{"episode", r.episode}, {"mean_loss", r.mean_loss}, {"eval_accuracy", r.eval_accuracy},
                     {"lr", r.lr}};
    return j.dump() + "\n";
}

inline MetricsRecord parse_metrics_line(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    return {j.at("episode").get<std::size_t>(), j.at("mean_loss").get<double>(), j.at("eval_accuracy").get<double>(),
            j.at("lr").get<double>()};
}

}  // namespace agnn
