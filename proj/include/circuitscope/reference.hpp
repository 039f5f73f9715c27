#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "circuitscope/flow.hpp"
#include "circuitscope/intervention.hpp"
#include "circuitscope/model.hpp"
#include "circuitscope/patching.hpp"

// Straight-line double-precision reimplementation of the model, written
// without the engine's kernels or cache. Used as an oracle by the test suite
// and by selftest. Slow by design; meant for tiny models only.
namespace circuitscope::reference {

using Rows = std::vector<std::vector<double>>;  // [position][dim]

struct Trace {
  Rows embed;                                      // resid_pre of block 0
  std::vector<std::vector<Rows>> heads;            // [layer][head] -> [pos][d_model]
  std::vector<std::vector<Rows>> values;           // [layer][head] -> [pos][d_head]
  std::vector<std::vector<Rows>> patterns;         // [layer][head] -> [query][key]
  std::vector<Rows> ffn;                           // [layer]
  Rows final_resid;
  Rows logits;
};

// Component outputs forced to given values instead of being computed.
struct Overrides {
  std::map<std::pair<int, int>, Rows> heads;
  std::map<int, Rows> ffn;
};

Trace run(const Model& model, std::span<const int> tokens, const Overrides& overrides = {});

std::vector<double> alibi_slopes(int n_heads);

// Sum of carries: embed + all head and FFN outputs of layers < layer.
Rows resid_pre(const Trace& t, int layer);
Rows resid_post(const Trace& t, int layer);

// One head or FFN recomputed from an arbitrary residual input.
Rows head_forward(const Model& model, int layer, int head, const Rows& resid);
Rows ffn_forward(const Model& model, int layer, const Rows& resid);
std::vector<double> logits_of(const Model& model, std::span<const double> resid);

double metric_of(const Metric& metric, std::span<const double> logits);

// Site is a whole head_out or ffn_out (all positions) taken from the
// corrupted run.
double activation_patch(const Model& model, const ContrastPair& pair, const Site& site);

// Rebuilds the component graph: every component keeps its clean output
// except the sender (corrupted) and the receivers (plus FFNs under the
// recompute policy), which are recomputed from the rerouted inputs. Head
// receivers are then replayed into an otherwise clean run.
double path_patch(const Model& model, const ContrastPair& pair, const Site& sender,
                  const Receiver& receiver, FreezePolicy freeze);

// Logits when every head and FFN is removed.
std::vector<double> embedding_only_logits(const Model& model, int token, int pos);

// Frozen-scale direct logit scores of one component at pos, full vocabulary.
// Kind kEmbed is the block-0 input.
std::vector<double> direct_logit_scores(const Model& model, std::span<const int> tokens,
                                        const ComponentSite& site, int pos);

// Nodes of the backward-traced route graph, from explicitly enumerated terms.
std::set<FlowNode> flow_nodes(const Model& model, std::span<const int> tokens, double tau,
                              int sink_pos);

}  // namespace circuitscope::reference
