#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace agnn {

/// Raised when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    friend bool operator==(const Shape&, const Shape&) = default;

    std::string str() const { return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]"; }
};

namespace detail {

// Creation order within a thread. A tape and its tensors belong to one worker,
// so a per-thread counter is enough to order replay.
inline std::uint64_t next_sequence() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool trainable = false;
    bool requires_grad = false;
    std::uint64_t sequence = next_sequence();
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs that require grad.
    std::function<void(Node&)> backward_rule;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

}  // namespace detail

/// Dense row-major rank-2 array of doubles. Copies share the underlying node;
/// use clone() for an independent leaf.
class Tensor {
public:
    Tensor() : Tensor(0, 0) {}

    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
        node_->shape = {rows, cols};
        node_->values.assign(rows * cols, fill);
    }

    Tensor(std::size_t rows, std::size_t cols, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
        if (values.size() != rows * cols)
            throw ShapeError("tensor of shape " + Shape{rows, cols}.str() + " given " + std::to_string(values.size()) +
                             " values");
        node_->shape = {rows, cols};
        node_->values = std::move(values);
    }

    /// Builds from nested rows, e.g. Tensor::from_rows({{1, 2}, {3, 4}}).
    static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.front().size();
        std::vector<double> flat;
        flat.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged row list: expected " + std::to_string(c) + " columns");
            flat.insert(flat.end(), row.begin(), row.end());
        }
        return Tensor(r, c, std::move(flat));
    }

    static Tensor identity(std::size_t n) {
        Tensor t(n, n);
        for (std::size_t i = 0; i < n; ++i) t.node_->values[i * n + i] = 1.0;
        return t;
    }

    static Tensor scalar(double v) { return Tensor(1, 1, std::vector<double>{v}); }

    /// A leaf parameter whose gradient is accumulated by backward().
    static Tensor parameter(std::size_t rows, std::size_t cols, std::vector<double> values) {
        Tensor t(rows, cols, std::move(values));
        t.set_trainable(true);
        return t;
    }

    std::size_t rows() const { return node_->shape.rows; }
    std::size_t cols() const { return node_->shape.cols; }
    Shape shape() const { return node_->shape; }
    std::size_t size() const { return node_->values.size(); }

    double operator()(std::size_t i, std::size_t j) const { return node_->values[i * cols() + j]; }
    double item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
        return node_->values[0];
    }

    std::span<const double> values() const { return node_->values; }
    std::span<const double> grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() == node_->values.size() && !node_->values.empty(); }

    /// Mutable access is reserved for leaves (data and parameters); op outputs are immutable.
    std::span<double> mutable_values() {
        if (!is_leaf()) throw std::logic_error("mutable_values() on non-leaf tensor produced by '" + node_->op + "'");
        return node_->values;
    }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }

    bool is_leaf() const { return node_->inputs.empty() && !node_->backward_rule; }
    bool trainable() const { return node_->trainable; }
    bool requires_grad() const { return node_->requires_grad; }
    const std::string& op_name() const { return node_->op; }

    void set_trainable(bool on) {
        if (!is_leaf()) throw std::logic_error("only leaf tensors can be marked trainable");
        node_->trainable = on;
        node_->requires_grad = on;
        if (on) node_->ensure_grad();
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Independent leaf with copied values (and trainable flag).
    Tensor clone() const {
        Tensor t(rows(), cols(), node_->values);
        if (node_->trainable) t.set_trainable(true);
        return t;
    }

    /// Constant leaf sharing nothing with the history of this tensor.
    Tensor detach() const { return Tensor(rows(), cols(), node_->values); }

    std::vector<std::vector<double>> to_rows() const {
        std::vector<std::vector<double>> out(rows());
        for (std::size_t i = 0; i < rows(); ++i)
            out[i].assign(node_->values.begin() + static_cast<std::ptrdiff_t>(i * cols()),
                          node_->values.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols()));
        return out;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>, std::string,
                                 std::function<void(detail::Node&)>);
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

    std::shared_ptr<detail::Node> node_;
};

/// Records an operation output. `rule` is invoked during backward with the output
/// node; it must add its contributions into `inputs[i]->grad` for inputs that require grad.
/// Public so tests and extensions can define custom operations.
inline Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, std::string op,
                             std::function<void(detail::Node&)> rule) {
    auto node = std::make_shared<detail::Node>();
    node->shape = shape;
    node->values = std::move(values);
    node->op = std::move(op);
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    node->requires_grad = any;
    if (any) {
        node->inputs.reserve(inputs.size());
        for (const auto& in : inputs) node->inputs.push_back(in.node());
        node->backward_rule = std::move(rule);
    }
    return Tensor(std::move(node));
}

/// Per-row index set restricting a softmax normalization.
class RowMask {
public:
    RowMask(std::size_t rows, std::size_t cols, bool keep = true) : shape_{rows, cols}, keep_(rows * cols, keep) {}

    /// Every entry except the diagonal.
    static RowMask off_diagonal(std::size_t n) {
        RowMask m(n, n, true);
        for (std::size_t i = 0; i < n; ++i) m.set(i, i, false);
        return m;
    }

    void set(std::size_t i, std::size_t j, bool keep) { keep_[i * shape_.cols + j] = keep ? 1 : 0; }
    bool kept(std::size_t i, std::size_t j) const { return keep_[i * shape_.cols + j] != 0; }
    Shape shape() const { return shape_; }

private:
    Shape shape_;
    std::vector<std::uint8_t> keep_;
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

inline void accumulate(const std::shared_ptr<Node>& in, std::size_t idx, double v) {
    in->ensure_grad();
    in->grad[idx] += v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ " + a.shape().str() + " x " + b.shape().str());
    const std::size_t p = a.rows(), q = a.cols(), r = b.cols();
    std::vector<double> out(p * r, 0.0);
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t k = 0; k < q; ++k) {
            const double aik = av[i * q + k];
            if (aik == 0.0) continue;
            const double* brow = bv.data() + k * r;
            double* orow = out.data() + i * r;
            for (std::size_t j = 0; j < r; ++j) orow[j] += aik * brow[j];
        }
    return make_op_result({p, r}, std::move(out), {a, b}, "matmul", [p, q, r](detail::Node& self) {
        auto& A = self.inputs[0];
        auto& B = self.inputs[1];
        const auto& g = self.grad;
        if (A->requires_grad) {
            A->ensure_grad();
            // dA = dC * B^T
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t k = 0; k < q; ++k) {
                    double s = 0.0;
                    const double* grow = g.data() + i * r;
                    const double* brow = B->values.data() + k * r;
                    for (std::size_t j = 0; j < r; ++j) s += grow[j] * brow[j];
                    A->grad[i * q + k] += s;
                }
        }
        if (B->requires_grad) {
            B->ensure_grad();
            // dB = A^T * dC
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t k = 0; k < q; ++k) {
                    const double aik = A->values[i * q + k];
                    if (aik == 0.0) continue;
                    const double* grow = g.data() + i * r;
                    double* bg = B->grad.data() + k * r;
                    for (std::size_t j = 0; j < r; ++j) bg[j] += aik * grow[j];
                }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    const std::size_t p = a.rows(), q = a.cols();
    std::vector<double> out(p * q);
    auto av = a.values();
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[j * p + i] = av[i * q + j];
    return make_op_result({q, p}, std::move(out), {a}, "transpose", [p, q](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) A->grad[i * q + j] += self.grad[j * p + i];
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return make_op_result(a.shape(), std::move(out), {a, b}, "add", [](detail::Node& self) {
        for (auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            in->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return make_op_result(a.shape(), std::move(out), {a, b}, "sub", [](detail::Node& self) {
        const double sign[2] = {1.0, -1.0};
        for (std::size_t k = 0; k < 2; ++k) {
            auto& in = self.inputs[k];
            if (!in->requires_grad) continue;
            in->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += sign[k] * self.grad[i];
        }
    });
}

/// Elementwise product.
inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "hadamard");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return make_op_result(a.shape(), std::move(out), {a, b}, "hadamard", [](detail::Node& self) {
        auto& A = self.inputs[0];
        auto& B = self.inputs[1];
        if (A->requires_grad) {
            A->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) A->grad[i] += self.grad[i] * B->values[i];
        }
        if (B->requires_grad) {
            B->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) B->grad[i] += self.grad[i] * A->values[i];
        }
    });
}

/// Multiplication by a constant.
inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (auto& v : out) v *= c;
    return make_op_result(a.shape(), std::move(out), {a}, "scale", [c](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) A->grad[i] += c * self.grad[i];
    });
}

/// Adds a constant to every entry.
inline Tensor add_constant(const Tensor& a, double c) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (auto& v : out) v += c;
    return make_op_result(a.shape(), std::move(out), {a}, "add_constant", [](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) A->grad[i] += self.grad[i];
    });
}

/// Multiplies every entry of `a` by the 1x1 tensor `s`; differentiable in both.
inline Tensor scalar_mul(const Tensor& s, const Tensor& a) {
    if (s.shape() != Shape{1, 1}) throw ShapeError("scalar_mul: expected [1x1] scalar, got " + s.shape().str());
    const double w = s.item();
    std::vector<double> out(a.values().begin(), a.values().end());
    for (auto& v : out) v *= w;
    return make_op_result(a.shape(), std::move(out), {s, a}, "scalar_mul", [](detail::Node& self) {
        auto& S = self.inputs[0];
        auto& A = self.inputs[1];
        if (S->requires_grad) {
            double d = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) d += self.grad[i] * A->values[i];
            detail::accumulate(S, 0, d);
        }
        if (A->requires_grad) {
            A->ensure_grad();
            const double w = S->values[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) A->grad[i] += w * self.grad[i];
        }
    });
}

inline Tensor reciprocal(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / a.values()[i];
    return make_op_result(a.shape(), std::move(out), {a}, "reciprocal", [](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            A->grad[i] -= self.grad[i] * self.values[i] * self.values[i];
    });
}

inline Tensor abs(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a.values()[i]);
    return make_op_result(a.shape(), std::move(out), {a}, "abs", [](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double x = A->values[i];
            A->grad[i] += self.grad[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
        }
    });
}

/// Euclidean norm of each row, shape [rows x 1]. The gradient of a zero row is taken as zero.
inline Tensor row_norms(const Tensor& a) {
    const std::size_t p = a.rows(), q = a.cols();
    std::vector<double> out(p, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < q; ++j) s += a.values()[i * q + j] * a.values()[i * q + j];
        out[i] = std::sqrt(s);
    }
    return make_op_result({p, 1}, std::move(out), {a}, "row_norms", [p, q](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (std::size_t i = 0; i < p; ++i) {
            const double n = self.values[i];
            if (n == 0.0) continue;
            for (std::size_t j = 0; j < q; ++j) A->grad[i * q + j] += self.grad[i] * A->values[i * q + j] / n;
        }
    });
}

/// Sum of all entries as a [1x1] tensor.
inline Tensor sum(const Tensor& a) {
    const double s = std::accumulate(a.values().begin(), a.values().end(), 0.0);
    return make_op_result({1, 1}, {s}, {a}, "sum", [](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (auto& g : A->grad) g += self.grad[0];
    });
}

/// Row-wise softmax, max-subtracted. With a mask, each row normalizes over its kept
/// entries only and masked entries are exactly zero.
inline Tensor row_softmax(const Tensor& a, const RowMask* mask = nullptr) {
    const std::size_t p = a.rows(), q = a.cols();
    if (mask && mask->shape() != a.shape())
        throw ShapeError("row_softmax: mask shape " + mask->shape().str() + " vs input " + a.shape().str());
    std::vector<double> out(p * q, 0.0);
    auto av = a.values();
    for (std::size_t i = 0; i < p; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < q; ++j) {
            if (mask && !mask->kept(i, j)) continue;
            mx = std::max(mx, av[i * q + j]);
            any = true;
        }
        if (!any) throw std::invalid_argument("row_softmax: row " + std::to_string(i) + " has an empty mask");
        double z = 0.0;
        for (std::size_t j = 0; j < q; ++j) {
            if (mask && !mask->kept(i, j)) continue;
            out[i * q + j] = std::exp(av[i * q + j] - mx);
            z += out[i * q + j];
        }
        for (std::size_t j = 0; j < q; ++j) out[i * q + j] /= z;
    }
    return make_op_result(a.shape(), std::move(out), {a}, "row_softmax", [p, q](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        // J^T g for s = softmax(a): da_j = s_j (g_j - <g, s>); masked entries have s_j = 0.
        for (std::size_t i = 0; i < p; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < q; ++j) dot += self.grad[i * q + j] * self.values[i * q + j];
            for (std::size_t j = 0; j < q; ++j)
                A->grad[i * q + j] += self.values[i * q + j] * (self.grad[i * q + j] - dot);
        }
    });
}

/// Divides every row by its sum. Rows summing to zero are left at zero.
inline Tensor row_normalize(const Tensor& a) {
    const std::size_t p = a.rows(), q = a.cols();
    std::vector<double> out(p * q, 0.0);
    std::vector<double> sums(p, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < q; ++j) sums[i] += a.values()[i * q + j];
        if (sums[i] == 0.0) continue;
        for (std::size_t j = 0; j < q; ++j) out[i * q + j] = a.values()[i * q + j] / sums[i];
    }
    return make_op_result(a.shape(), std::move(out), {a}, "row_normalize",
                          [p, q, sums = std::move(sums)](detail::Node& self) {
                              auto& A = self.inputs[0];
                              A->ensure_grad();
                              for (std::size_t i = 0; i < p; ++i) {
                                  if (sums[i] == 0.0) continue;
                                  double dot = 0.0;
                                  for (std::size_t j = 0; j < q; ++j)
                                      dot += self.grad[i * q + j] * self.values[i * q + j];
                                  for (std::size_t j = 0; j < q; ++j)
                                      A->grad[i * q + j] += (self.grad[i * q + j] - dot) / sums[i];
                              }
                          });
}

/// x if x >= 0, slope*x otherwise. The derivative at exactly 0 is taken as `slope`.
inline Tensor leaky_relu(const Tensor& a, double slope) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.values()[i];
        out[i] = x >= 0.0 ? x : slope * x;
    }
    return make_op_result(a.shape(), std::move(out), {a}, "leaky_relu", [slope](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            A->grad[i] += self.grad[i] * (A->values[i] > 0.0 ? 1.0 : slope);
    });
}

/// Per-row concatenation along the feature axis: [a | b].
inline Tensor concat_features(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows())
        throw ShapeError("concat_features: row counts differ " + a.shape().str() + " vs " + b.shape().str());
    const std::size_t p = a.rows(), q1 = a.cols(), q2 = b.cols(), q = q1 + q2;
    std::vector<double> out(p * q);
    for (std::size_t i = 0; i < p; ++i) {
        std::copy_n(a.values().data() + i * q1, q1, out.data() + i * q);
        std::copy_n(b.values().data() + i * q2, q2, out.data() + i * q + q1);
    }
    return make_op_result({p, q}, std::move(out), {a, b}, "concat_features", [p, q1, q2, q](detail::Node& self) {
        auto& A = self.inputs[0];
        auto& B = self.inputs[1];
        if (A->requires_grad) {
            A->ensure_grad();
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q1; ++j) A->grad[i * q1 + j] += self.grad[i * q + j];
        }
        if (B->requires_grad) {
            B->ensure_grad();
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q2; ++j) B->grad[i * q2 + j] += self.grad[i * q + q1 + j];
        }
    });
}

/// Columns [begin, end).
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    if (begin > end || end > a.cols())
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + a.shape().str());
    const std::size_t p = a.rows(), q = a.cols(), w = end - begin;
    std::vector<double> out(p * w);
    for (std::size_t i = 0; i < p; ++i) std::copy_n(a.values().data() + i * q + begin, w, out.data() + i * w);
    return make_op_result({p, w}, std::move(out), {a}, "slice_cols", [p, q, w, begin](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < w; ++j) A->grad[i * q + begin + j] += self.grad[i * w + j];
    });
}

/// Gathers the listed rows (repeats allowed).
inline Tensor select_rows(const Tensor& a, std::span<const std::size_t> rows) {
    const std::size_t q = a.cols();
    std::vector<double> out(rows.size() * q);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= a.rows())
            throw ShapeError("select_rows: row " + std::to_string(rows[r]) + " outside " + a.shape().str());
        std::copy_n(a.values().data() + rows[r] * q, q, out.data() + r * q);
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    const Shape shape{idx.size(), q};
    return make_op_result(shape, std::move(out), {a}, "select_rows",
                          [q, idx = std::move(idx)](detail::Node& self) {
                              auto& A = self.inputs[0];
                              A->ensure_grad();
                              for (std::size_t r = 0; r < idx.size(); ++r)
                                  for (std::size_t j = 0; j < q; ++j) A->grad[idx[r] * q + j] += self.grad[r * q + j];
                          });
}

/// Adds a [1 x cols] row vector to every row.
inline Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols())
        throw ShapeError("add_row_bias: bias " + bias.shape().str() + " does not match " + a.shape().str());
    const std::size_t p = a.rows(), q = a.cols();
    std::vector<double> out(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[i * q + j] += bias.values()[j];
    return make_op_result(a.shape(), std::move(out), {a, bias}, "add_row_bias", [p, q](detail::Node& self) {
        auto& A = self.inputs[0];
        auto& B = self.inputs[1];
        if (A->requires_grad) {
            A->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) A->grad[i] += self.grad[i];
        }
        if (B->requires_grad) {
            B->ensure_grad();
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q; ++j) B->grad[j] += self.grad[i * q + j];
        }
    });
}

/// Same values, new shape (row-major order preserved).
inline Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols) {
    if (rows * cols != a.size())
        throw ShapeError("reshape: cannot view " + a.shape().str() + " as " + Shape{rows, cols}.str());
    std::vector<double> out(a.values().begin(), a.values().end());
    return make_op_result({rows, cols}, std::move(out), {a}, "reshape", [](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) A->grad[i] += self.grad[i];
    });
}

/// Row (i*V + j) holds |x_i - x_j| for a [V x d] input; output is [V*V x d].
inline Tensor pairwise_abs_diff(const Tensor& x) {
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> out(n * n * d);
    auto xv = x.values();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t k = 0; k < d; ++k) out[(i * n + j) * d + k] = std::fabs(xv[i * d + k] - xv[j * d + k]);
    return make_op_result({n * n, d}, std::move(out), {x}, "pairwise_abs_diff", [n, d](detail::Node& self) {
        auto& X = self.inputs[0];
        X->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = X->values[i * d + k] - X->values[j * d + k];
                    if (diff == 0.0) continue;
                    const double g = self.grad[(i * n + j) * d + k] * (diff > 0.0 ? 1.0 : -1.0);
                    X->grad[i * d + k] += g;
                    X->grad[j * d + k] -= g;
                }
    });
}

/// Multiplies by a constant 0/1 mask; gradient flows only through kept entries.
inline Tensor apply_mask(const Tensor& a, const RowMask& mask) {
    if (mask.shape() != a.shape())
        throw ShapeError("apply_mask: mask shape " + mask.shape().str() + " vs input " + a.shape().str());
    const std::size_t p = a.rows(), q = a.cols();
    std::vector<double> out(p * q, 0.0);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j)
            if (mask.kept(i, j)) out[i * q + j] = a.values()[i * q + j];
    return make_op_result(a.shape(), std::move(out), {a}, "apply_mask", [p, q, mask](detail::Node& self) {
        auto& A = self.inputs[0];
        A->ensure_grad();
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j)
                if (mask.kept(i, j)) A->grad[i * q + j] += self.grad[i * q + j];
    });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

/// The operations reachable from a root, in execution order.
class ComputationTape {
public:
    static ComputationTape record_from(const Tensor& root) {
        ComputationTape tape;
        std::vector<detail::Node*> stack{root.node().get()};
        std::unordered_set<detail::Node*> seen{root.node().get()};
        while (!stack.empty()) {
            auto* n = stack.back();
            stack.pop_back();
            if (!n->backward_rule) continue;
            tape.ops_.push_back(n);
            for (const auto& in : n->inputs)
                if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
        }
        std::sort(tape.ops_.begin(), tape.ops_.end(),
                  [](const detail::Node* a, const detail::Node* b) { return a->sequence < b->sequence; });
        return tape;
    }

    std::size_t size() const { return ops_.size(); }

    std::vector<std::string> op_names() const {
        std::vector<std::string> names;
        for (auto* n : ops_) names.push_back(n->op);
        return names;
    }

    /// Seeds d(root)/d(root) = 1 and runs each rule once, newest first.
    /// Intermediate gradients are reset; leaf gradients accumulate across calls.
    void replay_backward(const Tensor& root) const {
        for (auto* n : ops_) n->grad.assign(n->values.size(), 0.0);
        auto& rn = *root.node();
        rn.ensure_grad();
        rn.grad[0] += 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)->backward_rule(**it);
    }

private:
    std::vector<detail::Node*> ops_;
};

/// Accumulates d(root)/d(t) into every trainable tensor t on root's history.
inline void backward(const Tensor& root) {
    if (root.shape() != Shape{1, 1}) throw ShapeError("backward: root must be [1x1], got " + root.shape().str());
    if (!root.requires_grad()) return;
    if (root.is_leaf()) {
        root.node()->ensure_grad();
        root.node()->grad[0] += 1.0;
        return;
    }
    ComputationTape::record_from(root).replay_backward(root);
}

/// Central-difference check of the analytic gradient of scalar f at x.
/// Returns max_i |a_i - n_i| / max(1, |a_i|, |n_i|). `x` must be a leaf; it is
/// temporarily marked trainable and restored afterwards.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be positive");
    const bool was_trainable = x.trainable();
    x.set_trainable(true);
    x.zero_grad();
    backward(f(x));
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto vals = x.mutable_values();
    double worst = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + h;
        const double fp = f(x).item();
        vals[i] = orig - h;
        const double fm = f(x).item();
        vals[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double err =
            std::fabs(analytic[i] - numeric) / std::max({1.0, std::fabs(analytic[i]), std::fabs(numeric)});
        worst = std::max(worst, err);
    }
    x.zero_grad();
    x.set_trainable(was_trainable);
    return worst;
}

inline bool all_finite(const Tensor& t) {
    return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace agnn
