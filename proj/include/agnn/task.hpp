#pragma once

#include <cstddef>
#include <vector>

#include "agnn/tensor.hpp"

namespace agnn {

enum class Setting { inductive, transductive };
enum class QueryDistribution { uniform, random };
enum class QueryInit { uniform, zero };

/// Where a graph node came from in its dataset: class slot and sample row.
struct SampleRef {
    std::size_t dataset_class = 0;
    std::size_t sample = 0;

    friend bool operator==(const SampleRef&, const SampleRef&) = default;
};

/// One N-way K-shot episode modelled as a complete graph over V = N*K + Q nodes.
/// Support nodes come first, grouped by episode class, followed by the queries.
struct TaskGraph {
    Tensor features;  // [V x d]
    Tensor labels;    // [V x N]: one-hot support rows, initialized query rows
    std::size_t ways = 0;
    std::size_t shots = 0;
    std::vector<std::size_t> support_indices;
    std::vector<std::size_t> query_indices;
    std::vector<std::size_t> node_class;  // episode class (0..N-1) of every node
    std::vector<std::size_t> truth;       // episode class of every query, aligned with query_indices
    std::vector<SampleRef> sources;       // provenance of every node

    std::size_t num_nodes() const { return features.rows(); }
    std::size_t feature_dim() const { return features.cols(); }
    std::size_t num_queries() const { return query_indices.size(); }
};

}  // namespace agnn
