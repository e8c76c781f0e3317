#pragma once

// Over-smoothing diagnostics and parameter accounting.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "agnn/attention.hpp"
#include "agnn/io.hpp"
#include "agnn/task.hpp"
#include "agnn/tensor.hpp"

namespace agnn {

/// Singular values in descending order (one-sided Jacobi).
inline std::vector<double> singular_values(const Tensor& x) {
    const bool tall = x.rows() >= x.cols();
    const std::size_t m = tall ? x.rows() : x.cols();
    const std::size_t n = tall ? x.cols() : x.rows();
    if (n == 0) return {};
    // Column j of the working matrix stored contiguously.
    std::vector<double> u(m * n);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) {
            if (tall)
                u[j * m + i] = x(i, j);
            else
                u[i * m + j] = x(i, j);
        }
    constexpr double tol = 1e-15;
    for (int sweep = 0; sweep < 100; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                double* up = u.data() + p * m;
                double* uq = u.data() + q * m;
                double a = 0.0, b = 0.0, g = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    a += up[i] * up[i];
                    b += uq[i] * uq[i];
                    g += up[i] * uq[i];
                }
                if (g == 0.0 || std::fabs(g) <= tol * std::sqrt(a * b)) continue;
                rotated = true;
                const double zeta = (b - a) / (2.0 * g);
                const double t = std::copysign(1.0, zeta) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double vp = up[i], vq = uq[i];
                    up[i] = c * vp - s * vq;
                    uq[i] = s * vp + c * vq;
                }
            }
        if (!rotated) break;
    }
    std::vector<double> sv(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += u[j * m + i] * u[j * m + i];
        sv[j] = std::sqrt(s);
    }
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

/// ||X - P_M(X)||_F for the best rank-M approximation: sqrt(sum_{i>M} sigma_i^2).
inline double rank_projection_loss(const Tensor& x, std::size_t rank) {
    const std::size_t cap = std::min(x.rows(), x.cols());
    if (rank < 1 || rank > cap)
        throw std::out_of_range("rank_projection_loss: rank " + std::to_string(rank) + " outside [1," +
                                std::to_string(cap) + "]");
    const auto sv = singular_values(x);
    double tail = 0.0;
    for (std::size_t i = rank; i < sv.size(); ++i) tail += sv[i] * sv[i];
    return std::sqrt(tail);
}

/// Frobenius distance to the matrix whose rows all equal the column mean.
inline double consensus_distance(const Tensor& x) {
    const std::size_t v = x.rows(), d = x.cols();
    if (v == 0) return 0.0;
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < v; ++i) mean += x(i, j);
        mean /= static_cast<double>(v);
        for (std::size_t i = 0; i < v; ++i) total += (x(i, j) - mean) * (x(i, j) - mean);
    }
    return std::sqrt(total);
}

/// Count of singular values above `threshold`.
inline std::size_t numerical_rank(const Tensor& x, double threshold) {
    const auto sv = singular_values(x);
    return static_cast<std::size_t>(std::count_if(sv.begin(), sv.end(), [&](double s) { return s > threshold; }));
}

struct SmoothingProfile {
    std::vector<double> rank_loss;  // per recorded layer
    std::vector<double> consensus;  // per recorded layer
    double epsilon = 0.0;
    std::size_t rank = 0;
    std::optional<std::size_t> smoothing_layer;  // first layer with rank_loss < epsilon
    double theta = 0.0;                          // width minus numerical rank at that layer (or the last)

    bool flagged(std::size_t layer) const { return rank_loss.at(layer) < epsilon; }
};

/// Projection-loss and consensus metrics per layer. Target ranks above a layer's
/// min(V, d) are clamped to it.
inline SmoothingProfile smoothing_profile(const std::vector<Tensor>& layers, double epsilon, std::size_t rank) {
    if (layers.empty()) throw std::invalid_argument("smoothing_profile: no layers");
    if (!(epsilon > 0.0)) throw std::invalid_argument("smoothing_profile: epsilon must be > 0");
    if (rank < 1) throw std::invalid_argument("smoothing_profile: rank must be >= 1");
    SmoothingProfile prof;
    prof.epsilon = epsilon;
    prof.rank = rank;
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto& x = layers[k];
        prof.rank_loss.push_back(rank_projection_loss(x, std::min(rank, std::min(x.rows(), x.cols()))));
        prof.consensus.push_back(consensus_distance(x));
        if (!prof.smoothing_layer && prof.rank_loss.back() < epsilon) prof.smoothing_layer = k;
    }
    const auto& at = layers[prof.smoothing_layer.value_or(layers.size() - 1)];
    prof.theta = static_cast<double>(at.cols()) - static_cast<double>(numerical_rank(at, epsilon));
    return prof;
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamComponent {
    enum class Kind { fusion, gnn_layer, adjacency_mlp, readout, total };
    Kind kind = Kind::total;
    std::size_t layer = 0;

    /// "fusion", "readout", "total", "gnn_layer:<k>", "adjacency_mlp:<k>".
    static ParamComponent parse(const std::string& text) {
        if (text == "fusion") return {Kind::fusion, 0};
        if (text == "readout") return {Kind::readout, 0};
        if (text == "total") return {Kind::total, 0};
        for (auto [prefix, kind] : {std::pair{"gnn_layer:", Kind::gnn_layer}, {"adjacency_mlp:", Kind::adjacency_mlp}}) {
            const std::string p(prefix);
            if (text.rfind(p, 0) == 0 && text.size() > p.size()) {
                const auto rest = text.substr(p.size());
                if (rest.find_first_not_of("0123456789") == std::string::npos) return {kind, std::stoul(rest)};
            }
        }
        throw std::invalid_argument("unknown parameter component '" + text + "'");
    }
};

inline std::size_t count_trainable_params(const ModelParams& params, ParamComponent c) {
    auto mlp_count = [&](std::size_t k) {
        std::size_t n = 0;
        for (const auto& dl : params.layers.at(k).mlp) n += dl.weight.size() + dl.bias.size();
        return n;
    };
    auto layer_count = [&](std::size_t k) { return params.layers.at(k).transform.size() + mlp_count(k); };
    switch (c.kind) {
        case ParamComponent::Kind::fusion: return params.fusion_w1.size() + params.fusion_w2.size();
        case ParamComponent::Kind::readout: return params.readout.size();
        case ParamComponent::Kind::adjacency_mlp:
            if (c.layer >= params.layers.size()) throw std::out_of_range("no GNN layer " + std::to_string(c.layer));
            return mlp_count(c.layer);
        case ParamComponent::Kind::gnn_layer:
            if (c.layer >= params.layers.size()) throw std::out_of_range("no GNN layer " + std::to_string(c.layer));
            return layer_count(c.layer);
        case ParamComponent::Kind::total: {
            std::size_t n = params.fusion_w1.size() + params.fusion_w2.size() + params.readout.size();
            for (std::size_t k = 0; k < params.layers.size(); ++k) n += layer_count(k);
            return n;
        }
    }
    return 0;
}

inline std::size_t count_trainable_params(const ModelParams& params, const std::string& component) {
    return count_trainable_params(params, ParamComponent::parse(component));
}

// ---------------------------------------------------------------------------
// Feature export
// ---------------------------------------------------------------------------

/// Writes `<dir>/<prefix><k>.csv` per layer: node, split, class, f0..; returns the paths.
inline std::vector<std::string> export_features(const std::vector<Tensor>& layers, const TaskGraph& task,
                                                const std::string& dir, const std::string& prefix = "layer_") {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create " + dir + ": " + ec.message());
    std::vector<bool> is_query(task.num_nodes(), false);
    for (auto q : task.query_indices) is_query[q] = true;
    std::vector<std::string> paths;
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto& x = layers[k];
        if (x.rows() != task.num_nodes())
            throw ShapeError("export_features: layer " + std::to_string(k) + " has " + std::to_string(x.rows()) +
                             " rows for " + std::to_string(task.num_nodes()) + " nodes");
        std::string out = "node,split,class";
        for (std::size_t j = 0; j < x.cols(); ++j) out += ",f" + std::to_string(j);
        out += '\n';
        for (std::size_t i = 0; i < x.rows(); ++i) {
            out += std::to_string(i) + (is_query[i] ? ",query," : ",support,") + std::to_string(task.node_class[i]);
            for (std::size_t j = 0; j < x.cols(); ++j) {
                out += ',';
                out += io::format_double(x(i, j));
            }
            out += '\n';
        }
        const auto path = (std::filesystem::path(dir) / (prefix + std::to_string(k) + ".csv")).string();
        io::write_file(path, out);
        paths.push_back(path);
    }
    return paths;
}

}  // namespace agnn
