#pragma once

#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "circuitscope/attribution.hpp"
#include "circuitscope/flow.hpp"
#include "json.hpp"

namespace circuitscope {

// Product-moment correlation over flattened entries. Throws kConstantInput
// when either side has zero variance, kDimensionMismatch on unequal sizes.
double pearson(std::span<const double> a, std::span<const double> b);

struct ComparisonReport {
  std::optional<double> pearson_rho;  // absent when an input is constant
  std::set<HeadRef> shared;
  std::set<HeadRef> only_a;
  std::set<HeadRef> only_b;
  double jaccard = 1.0;
  double freq_threshold = 0.0;
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> abs_difference;  // |freq_a - freq_b|, row-major
};

nlohmann::json to_json(const ComparisonReport& report);

ComparisonReport compare_circuits(const FrequencyMatrix& a, const FrequencyMatrix& b,
                                  double freq_threshold = 0.0);

enum class GraphFormat { kDot, kJson };
GraphFormat graph_format_from_string(const std::string& name);

std::string export_graph(const FlowGraph& graph, GraphFormat format);
// A circuit given as a set of heads: nodes only, no edges.
std::string export_graph(const std::set<HeadRef>& heads, GraphFormat format);

nlohmann::json to_json(const FlowGraph& graph);
FlowGraph flow_graph_from_json(const nlohmann::json& j);

}  // namespace circuitscope
