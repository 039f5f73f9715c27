#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "circuitscope/cache.hpp"
#include "circuitscope/tasks.hpp"
#include "json.hpp"

namespace circuitscope {

// Identifies one addend of a residual update.
struct TermId {
  enum class Kind { kCarry, kHead, kFfn };
  Kind kind = Kind::kCarry;
  int head = -1;
  int source = -1;  // source position for head terms

  auto operator<=>(const TermId&) const = default;
};

struct ContributionRecord {
  int layer = 0;
  int position = 0;
  // signed(t) = <t, o> / |o|^2 for update output o = resid_post[layer][position]
  std::map<TermId, double> signed_terms;
  // max(0, signed) renormalized over positive terms
  std::map<TermId, double> normalized;
  // Sum of all head terms, i.e. the attention block taken as one component.
  double attn_block_signed = 0.0;
  double attn_block_normalized = 0.0;
  bool degenerate = false;
};

ContributionRecord residual_contributions(const ActivationCache* cache, int layer, int position);

struct FlowNode {
  enum class Component { kEmbed, kHead, kFfn, kResid };
  int layer = 0;
  int position = 0;
  Component component = Component::kResid;
  int head = -1;

  std::string label() const;  // L{layer}.{component}@p{pos}
  auto operator<=>(const FlowNode&) const = default;
};

struct FlowEdge {
  FlowNode src;
  FlowNode dst;
  double weight = 0.0;

  auto operator<=>(const FlowEdge&) const = default;
};

// Backward-traced route graph. Residual nodes (layer, pos, resid) stand for
// resid_post; the embedding node sits at layer 0 before block 0. Head nodes
// are keyed by the source position they read. Edges point from earlier to
// later stages.
struct FlowGraph {
  double threshold = 0.0;
  FlowNode sink;
  std::vector<FlowNode> nodes;  // sorted
  std::vector<FlowEdge> edges;  // sorted
  // Normalized attention-block aggregate of each traced residual update.
  std::map<FlowNode, double> attn_block_share;

  bool contains_head(int layer, int head) const;
};

FlowGraph build_flow_graph(const ActivationCache* cache, double tau, int sink_position);
FlowGraph build_flow_graph(const ActivationCache* cache, double tau);  // sink at last position

// Row-major n_layers x n_heads flags: head appears as a node of the graph.
std::vector<char> head_activation_flags(const ActivationCache* cache, double tau, int sink_position);

struct FrequencyMatrix {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> values;  // row-major
  int n_examples = 0;
  double tau = 0.0;

  double at(int layer, int head) const { return values[static_cast<std::size_t>(layer) * n_heads + head]; }
};

nlohmann::json to_json(const FrequencyMatrix& freq);
FrequencyMatrix frequency_from_json(const nlohmann::json& j);
std::string to_csv(const FrequencyMatrix& freq);

struct FlowRun {
  FrequencyMatrix frequency;
  std::vector<FlowGraph> graphs;  // per example, dataset order
};

// Per-example graphs sink at each example's END position.
FlowRun flow_routes(const Model& model, std::span<const TaskExample> examples, double tau,
                    int workers = 1, bool keep_graphs = true);

FrequencyMatrix activation_frequency(const Model& model, std::span<const TaskExample> examples,
                                     double tau, int workers = 1);

}  // namespace circuitscope
