#pragma once

// Attentive GNN forward pass: node self-attention over a fused sample/label
// correlation map, sparse neighbor attention over learned adjacency scores,
// and layer memory (dense or label concatenation) between GNN layers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "agnn/errors.hpp"
#include "agnn/random.hpp"
#include "agnn/task.hpp"
#include "agnn/tensor.hpp"

namespace agnn {

enum class MemoryMode { dense, label_concat, none };

inline constexpr double kNormEpsilon = 1e-12;

struct AttentionConfig {
    double alpha = 0.5;  // label fusion weight
    double beta = 0.7;   // fraction of neighbors kept per row
    std::size_t layers = 3;
    std::size_t hidden_m = 16;  // new features per layer
    // Adjacency MLP output widths, last must be 1. Empty selects [2*d_k, d_k, 1] per layer.
    std::vector<std::size_t> mlp_widths;
    MemoryMode memory_mode = MemoryMode::dense;
    QueryInit query_init = QueryInit::uniform;
    double leaky_slope = 0.2;
    bool row_renormalize_adjacency = false;
    bool self_attention = true;
    bool normalize_fusion = false;  // softmax over (w1, w2) instead of free weights

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("model.alpha", "must lie in [0, 1]");
        if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("model.beta", "must lie in (0, 1]");
        if (layers < 1) throw ConfigError("model.layers", "must be >= 1");
        if (hidden_m < 1) throw ConfigError("model.hidden_m", "must be >= 1");
        if (!mlp_widths.empty()) {
            if (mlp_widths.back() != 1) throw ConfigError("model.mlp_widths", "final width must be 1");
            if (std::find(mlp_widths.begin(), mlp_widths.end(), 0u) != mlp_widths.end())
                throw ConfigError("model.mlp_widths", "widths must be >= 1");
        }
        if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("model.leaky_slope", "must lie in (0, 1)");
    }

    std::vector<std::size_t> mlp_widths_for(std::size_t d_k) const {
        if (!mlp_widths.empty()) return mlp_widths;
        return {2 * d_k, d_k, 1};
    }
};

/// Feature width entering GNN layer `k` (0-based), given input dim d and N ways.
/// k == layers gives the width seen by the readout.
inline std::size_t layer_input_width(const AttentionConfig& cfg, std::size_t d, std::size_t ways, std::size_t k) {
    const std::size_t first = d + ways;
    if (k == 0) return first;
    switch (cfg.memory_mode) {
        case MemoryMode::dense: return first + k * cfg.hidden_m;
        case MemoryMode::label_concat: return cfg.hidden_m + ways;
        case MemoryMode::none: return cfg.hidden_m;
    }
    return 0;
}

struct DenseLayer {
    Tensor weight;  // [in x out]
    Tensor bias;    // [1 x out]
};

struct LayerParams {
    std::vector<DenseLayer> mlp;
    Tensor transform;  // [2*d_k x m]
};

struct ModelParams {
    Tensor fusion_w1;
    Tensor fusion_w2;
    std::vector<LayerParams> layers;
    Tensor readout;  // [final width x N]
    std::size_t feature_dim = 0;
    std::size_t ways = 0;

    /// Weights uniform in [-s, s] with s = fan_in^(-1/2); biases zero; fusion weights 0.5.
    static ModelParams init(const AttentionConfig& cfg, std::size_t feature_dim, std::size_t ways,
                            std::uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        auto uniform_param = [&](std::size_t rows, std::size_t cols) {
            const double s = 1.0 / std::sqrt(static_cast<double>(rows));
            std::vector<double> v(rows * cols);
            for (auto& x : v) x = rng.uniform(-s, s);
            return Tensor::parameter(rows, cols, std::move(v));
        };
        ModelParams p;
        p.feature_dim = feature_dim;
        p.ways = ways;
        p.fusion_w1 = Tensor::parameter(1, 1, {0.5});
        p.fusion_w2 = Tensor::parameter(1, 1, {0.5});
        for (std::size_t k = 0; k < cfg.layers; ++k) {
            const std::size_t dk = layer_input_width(cfg, feature_dim, ways, k);
            LayerParams lp;
            std::size_t in = dk;
            for (std::size_t out : cfg.mlp_widths_for(dk)) {
                lp.mlp.push_back({uniform_param(in, out), Tensor::parameter(1, out, std::vector<double>(out, 0.0))});
                in = out;
            }
            lp.transform = uniform_param(2 * dk, cfg.hidden_m);
            p.layers.push_back(std::move(lp));
        }
        p.readout = uniform_param(layer_input_width(cfg, feature_dim, ways, cfg.layers), ways);
        return p;
    }

    /// Stable names used by checkpoints.
    std::vector<std::pair<std::string, Tensor>> named() const {
        std::vector<std::pair<std::string, Tensor>> out{{"fusion.w1", fusion_w1}, {"fusion.w2", fusion_w2}};
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const std::string base = "layer" + std::to_string(k);
            for (std::size_t l = 0; l < layers[k].mlp.size(); ++l) {
                out.emplace_back(base + ".mlp" + std::to_string(l) + ".weight", layers[k].mlp[l].weight);
                out.emplace_back(base + ".mlp" + std::to_string(l) + ".bias", layers[k].mlp[l].bias);
            }
            out.emplace_back(base + ".transform", layers[k].transform);
        }
        out.emplace_back("readout.weight", readout);
        return out;
    }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named()) out.push_back(t);
        return out;
    }

    /// Deep copy; the copy's gradients are independent of this one.
    ModelParams clone() const {
        ModelParams c = *this;
        c.fusion_w1 = fusion_w1.clone();
        c.fusion_w2 = fusion_w2.clone();
        for (auto& lp : c.layers) {
            for (auto& dl : lp.mlp) {
                dl.weight = dl.weight.clone();
                dl.bias = dl.bias.clone();
            }
            lp.transform = lp.transform.clone();
        }
        c.readout = readout.clone();
        return c;
    }

    void zero_grad() const {
        for (auto t : tensors()) t.zero_grad();
    }
};

// ---------------------------------------------------------------------------
// Node self-attention
// ---------------------------------------------------------------------------

/// C^x: row softmax over cosine similarities (complete graph).
inline Tensor sample_correlation(const Tensor& x) {
    const Tensor gram = matmul(x, transpose(x));
    const Tensor norms = row_norms(x);
    const Tensor inv = reciprocal(add_constant(matmul(norms, transpose(norms)), kNormEpsilon));
    return row_softmax(hadamard(gram, inv));
}

/// C^y: row softmax of Y Y^T.
inline Tensor label_correlation(const Tensor& y) { return row_softmax(matmul(y, transpose(y))); }

/// C^f = w1 C^x + w2 C^y. With `normalize`, (w1, w2) pass through a softmax first.
inline Tensor fuse_attention(const Tensor& cx, const Tensor& cy, const ModelParams& params, bool normalize = false) {
    detail::require_same_shape(cx, cy, "fuse_attention");
    Tensor w1 = params.fusion_w1;
    Tensor w2 = params.fusion_w2;
    if (normalize) {
        const Tensor w = row_softmax(concat_features(w1, w2));
        w1 = slice_cols(w, 0, 1);
        w2 = slice_cols(w, 1, 2);
    }
    return add(scalar_mul(w1, cx), scalar_mul(w2, cy));
}

struct SelfAttentionOutput {
    Tensor features;  // C^f X
    Tensor labels;    // alpha Y + (1 - alpha) C^f Y
    Tensor fused;     // C^f
};

inline SelfAttentionOutput apply_node_self_attention(const Tensor& x, const Tensor& y, double alpha,
                                                     const ModelParams& params, bool normalize_fusion = false) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("apply_node_self_attention: alpha outside [0,1]");
    if (x.rows() != y.rows())
        throw ShapeError("apply_node_self_attention: node counts differ " + x.shape().str() + " vs " + y.shape().str());
    const Tensor cf = fuse_attention(sample_correlation(x), label_correlation(y), params, normalize_fusion);
    Tensor features = matmul(cf, x);
    Tensor labels = add(scale(y, alpha), scale(matmul(cf, y), 1.0 - alpha));
    return {std::move(features), std::move(labels), cf};
}

/// Plain propagation A X W (no activation, no self branch).
inline Tensor graph_convolution(const Tensor& adjacency, const Tensor& x, const Tensor& w) {
    return matmul(matmul(adjacency, x), w);
}

// ---------------------------------------------------------------------------
// Graph neighbor attention
// ---------------------------------------------------------------------------

/// Raw scores MLP(|x_i - x_j|) with the diagonal forced to zero. Symmetric.
inline Tensor adjacency_logits(const Tensor& x, const std::vector<DenseLayer>& mlp, double slope) {
    if (mlp.empty() || mlp.back().weight.cols() != 1)
        throw ShapeError("adjacency_logits: MLP must end in a single output unit");
    const std::size_t n = x.rows();
    Tensor h = pairwise_abs_diff(x);
    for (std::size_t l = 0; l < mlp.size(); ++l) {
        h = add_row_bias(matmul(h, mlp[l].weight), mlp[l].bias);
        if (l + 1 < mlp.size()) h = leaky_relu(h, slope);
    }
    return apply_mask(reshape(h, n, n), RowMask::off_diagonal(n));
}

/// Row softmax of the adjacency logits over off-diagonal entries; diagonal stays 0.
inline Tensor adjacency_scores(const Tensor& x, const std::vector<DenseLayer>& mlp, double slope) {
    const RowMask off = RowMask::off_diagonal(x.rows());
    return row_softmax(adjacency_logits(x, mlp, slope), &off);
}

/// Number of entries kept per row: ceil(beta * n), at least 1.
inline std::size_t topk_count(double beta, std::size_t n) {
    // Guard against beta*n landing a hair above an integer (0.7 * 10 etc.).
    const double raw = beta * static_cast<double>(n);
    auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::clamp<std::size_t>(k, 1, n);
}

/// Per row, the k entries of largest magnitude; ties go to the lower column index.
inline RowMask topk_mask(const Tensor& u, std::size_t k) {
    const std::size_t p = u.rows(), q = u.cols();
    RowMask mask(p, q, false);
    std::vector<std::size_t> order(q);
    for (std::size_t i = 0; i < p; ++i) {
        std::iota(order.begin(), order.end(), 0);
        const double* row = u.values().data() + i * q;
        std::stable_sort(order.begin(), order.end(),
                         [row](std::size_t a, std::size_t b) { return std::fabs(row[a]) > std::fabs(row[b]); });
        for (std::size_t r = 0; r < std::min(k, q); ++r) mask.set(i, order[r], true);
    }
    return mask;
}

/// Projection of each row onto the l0 ball of radius ceil(beta * V). Gradients flow
/// through retained entries only.
inline Tensor sparsify_topk(const Tensor& u, double beta, bool renormalize = false) {
    if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("sparsify_topk: beta outside (0,1]");
    const Tensor kept = apply_mask(u, topk_mask(u, topk_count(beta, u.cols())));
    return renormalize ? row_normalize(kept) : kept;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// rho([A X || X] W)
inline Tensor gnn_layer(const Tensor& x, const Tensor& adjacency, const Tensor& w, double slope) {
    if (adjacency.rows() != x.rows() || adjacency.cols() != x.rows())
        throw ShapeError("gnn_layer: adjacency " + adjacency.shape().str() + " vs features " + x.shape().str());
    if (w.rows() != 2 * x.cols())
        throw ShapeError("gnn_layer: transform " + w.shape().str() + " vs features " + x.shape().str());
    return leaky_relu(matmul(concat_features(matmul(adjacency, x), x), w), slope);
}

inline Tensor memory_update(const Tensor& previous, const Tensor& fresh, const Tensor& labels, MemoryMode mode) {
    switch (mode) {
        case MemoryMode::dense: return concat_features(previous, fresh);
        case MemoryMode::label_concat: return concat_features(fresh, labels);
        case MemoryMode::none: return fresh;
    }
    return fresh;
}

struct ForwardTrace {
    // Node features entering each GNN layer; the last entry feeds the readout.
    std::vector<Tensor> layer_features;
    std::vector<Tensor> adjacency;  // sparsified adjacency used by each layer
    Tensor logits;                  // [Q x N]
};

inline ForwardTrace model_forward_trace(const TaskGraph& task, const ModelParams& params,
                                        const AttentionConfig& cfg) {
    if (params.layers.size() != cfg.layers)
        throw ShapeError("model_forward: params hold " + std::to_string(params.layers.size()) +
                         " layers, config asks for " + std::to_string(cfg.layers));
    if (task.labels.cols() != params.ways || task.feature_dim() != params.feature_dim)
        throw ShapeError("model_forward: task " + task.features.shape().str() + "/" + task.labels.shape().str() +
                         " does not match params built for d=" + std::to_string(params.feature_dim) +
                         ", N=" + std::to_string(params.ways));
    ForwardTrace trace;
    Tensor h;
    Tensor labels = task.labels;
    if (cfg.self_attention) {
        auto sa = apply_node_self_attention(task.features, task.labels, cfg.alpha, params, cfg.normalize_fusion);
        labels = sa.labels;
        h = concat_features(sa.features, sa.labels);
    } else {
        h = concat_features(task.features, task.labels);
    }
    trace.layer_features.push_back(h);
    for (std::size_t k = 0; k < cfg.layers; ++k) {
        const auto& lp = params.layers[k];
        const Tensor scores = adjacency_scores(h, lp.mlp, cfg.leaky_slope);
        const Tensor adj = sparsify_topk(scores, cfg.beta, cfg.row_renormalize_adjacency);
        const Tensor fresh = gnn_layer(h, adj, lp.transform, cfg.leaky_slope);
        h = memory_update(h, fresh, labels, cfg.memory_mode);
        trace.adjacency.push_back(adj);
        trace.layer_features.push_back(h);
    }
    trace.logits = matmul(select_rows(h, task.query_indices), params.readout);
    return trace;
}

/// Query logits [Q x N].
inline Tensor model_forward(const TaskGraph& task, const ModelParams& params, const AttentionConfig& cfg) {
    return model_forward_trace(task, params, cfg).logits;
}

}  // namespace agnn
