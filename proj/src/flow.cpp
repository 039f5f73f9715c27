#include "circuitscope/flow.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "circuitscope/error.hpp"
#include "circuitscope/forward.hpp"
#include "circuitscope/parallel.hpp"

namespace circuitscope {

namespace {

constexpr double kDegenerateNorm = 1e-12;

double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

}  // namespace

ContributionRecord residual_contributions(const ActivationCache* cache, int layer, int position) {
  if (!cache) fail(ErrorCode::kCacheMissing, "residual_contributions needs a captured run");
  cache->check_layer(layer);
  cache->check_pos(position);
  const auto& c = cache->config();

  ContributionRecord rec;
  rec.layer = layer;
  rec.position = position;
  const auto o = cache->resid_post(layer, position);
  const double norm_sq = dot(o, o);

  std::map<TermId, double> raw;
  raw[TermId{TermId::Kind::kCarry}] = dot(cache->resid_pre(layer, position), o);
  for (int h = 0; h < c.n_heads; ++h) {
    const auto per_source = head_output_per_source(cache, layer, h, position);
    for (int j = 0; j <= position; ++j) {
      raw[TermId{TermId::Kind::kHead, h, j}] = dot(per_source[j], o);
    }
  }
  raw[TermId{TermId::Kind::kFfn}] = dot(cache->ffn_out(layer, position), o);

  if (std::sqrt(norm_sq) < kDegenerateNorm) {
    rec.degenerate = true;
    for (const auto& [id, v] : raw) {
      rec.signed_terms[id] = 0.0;
      rec.normalized[id] = 0.0;
    }
    return rec;
  }

  double positive_total = 0.0;
  for (const auto& [id, v] : raw) {
    const double s = v / norm_sq;
    rec.signed_terms[id] = s;
    positive_total += std::max(0.0, s);
    if (id.kind == TermId::Kind::kHead) rec.attn_block_signed += s;
  }
  for (const auto& [id, s] : rec.signed_terms) {
    rec.normalized[id] = positive_total > 0.0 ? std::max(0.0, s) / positive_total : 0.0;
  }
  // Block aggregate renormalized against carry and FFN as a three-way split.
  const double carry = std::max(0.0, rec.signed_terms[TermId{TermId::Kind::kCarry}]);
  const double ffn = std::max(0.0, rec.signed_terms[TermId{TermId::Kind::kFfn}]);
  const double block = std::max(0.0, rec.attn_block_signed);
  const double total = carry + ffn + block;
  rec.attn_block_normalized = total > 0.0 ? block / total : 0.0;
  return rec;
}

std::string FlowNode::label() const {
  std::string comp;
  switch (component) {
    case Component::kEmbed: comp = "embed"; break;
    case Component::kHead: comp = "h" + std::to_string(head); break;
    case Component::kFfn: comp = "ffn"; break;
    case Component::kResid: comp = "resid"; break;
  }
  return "L" + std::to_string(layer) + "." + comp + "@p" + std::to_string(position);
}

bool FlowGraph::contains_head(int layer, int head) const {
  return std::any_of(nodes.begin(), nodes.end(), [&](const FlowNode& n) {
    return n.component == FlowNode::Component::kHead && n.layer == layer && n.head == head;
  });
}

FlowGraph build_flow_graph(const ActivationCache* cache, double tau, int sink_position) {
  if (!cache) fail(ErrorCode::kCacheMissing, "build_flow_graph needs a captured run");
  // tau = 1 is accepted as the degenerate threshold nothing passes.
  if (!(tau >= 0.0 && tau <= 1.0)) fail(ErrorCode::kInvalidArgument, "tau must lie in [0, 1]");
  cache->check_pos(sink_position);
  const int L = cache->config().n_layers;

  using C = FlowNode::Component;
  auto resid = [](int l, int p) { return FlowNode{l, p, C::kResid, -1}; };
  auto upstream = [&](int l, int p) {
    return l == 0 ? FlowNode{0, p, C::kEmbed, -1} : resid(l - 1, p);
  };

  FlowGraph g;
  g.threshold = tau;
  g.sink = resid(L - 1, sink_position);

  std::set<FlowNode> nodes{g.sink};
  std::map<std::pair<FlowNode, FlowNode>, double> edges;
  auto add_edge = [&](const FlowNode& src, const FlowNode& dst, double w) {
    nodes.insert(src);
    nodes.insert(dst);
    auto& slot = edges[{src, dst}];
    slot = std::max(slot, w);
  };

  std::set<std::pair<int, int>> visited;
  std::vector<std::pair<int, int>> work{{L - 1, sink_position}};
  while (!work.empty()) {
    const auto [l, p] = work.back();
    work.pop_back();
    if (!visited.insert({l, p}).second) continue;

    const auto rec = residual_contributions(cache, l, p);
    g.attn_block_share[resid(l, p)] = rec.attn_block_normalized;
    const FlowNode here = resid(l, p);
    for (const auto& [id, w] : rec.normalized) {
      if (!(w > tau)) continue;
      switch (id.kind) {
        case TermId::Kind::kCarry:
          add_edge(upstream(l, p), here, w);
          if (l > 0) work.push_back({l - 1, p});
          break;
        case TermId::Kind::kFfn: {
          const FlowNode ffn{l, p, C::kFfn, -1};
          add_edge(ffn, here, w);
          add_edge(upstream(l, p), ffn, w);
          if (l > 0) work.push_back({l - 1, p});
          break;
        }
        case TermId::Kind::kHead: {
          const FlowNode head{l, id.source, C::kHead, id.head};
          add_edge(head, here, w);
          add_edge(upstream(l, id.source), head, w);
          if (l > 0) work.push_back({l - 1, id.source});
          break;
        }
      }
    }
  }

  g.nodes.assign(nodes.begin(), nodes.end());
  for (const auto& [key, w] : edges) g.edges.push_back({key.first, key.second, w});
  return g;
}

FlowGraph build_flow_graph(const ActivationCache* cache, double tau) {
  if (!cache) fail(ErrorCode::kCacheMissing, "build_flow_graph needs a captured run");
  return build_flow_graph(cache, tau, cache->seq_len() - 1);
}

std::vector<char> head_activation_flags(const ActivationCache* cache, double tau, int sink_position) {
  const auto g = build_flow_graph(cache, tau, sink_position);
  const auto& c = cache->config();
  std::vector<char> flags(static_cast<std::size_t>(c.n_layers) * c.n_heads, 0);
  for (const auto& n : g.nodes) {
    if (n.component == FlowNode::Component::kHead) {
      flags[static_cast<std::size_t>(n.layer) * c.n_heads + n.head] = 1;
    }
  }
  return flags;
}

nlohmann::json to_json(const FrequencyMatrix& f) {
  return {{"kind", "activation_frequency"},
          {"n_layers", f.n_layers},
          {"n_heads", f.n_heads},
          {"values", f.values},
          {"n_examples", f.n_examples},
          {"tau", f.tau}};
}

FrequencyMatrix frequency_from_json(const nlohmann::json& j_in) {
  // Accept either the bare matrix or a flow report that embeds one.
  const nlohmann::json& j = j_in.contains("frequency") ? j_in.at("frequency") : j_in;
  FrequencyMatrix f;
  try {
    f.n_layers = j.at("n_layers").get<int>();
    f.n_heads = j.at("n_heads").get<int>();
    f.values = j.at("values").get<std::vector<double>>();
    f.n_examples = j.value("n_examples", 0);
    f.tau = j.value("tau", 0.0);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kParse, std::string("frequency matrix: ") + e.what());
  }
  if (f.values.size() != static_cast<std::size_t>(f.n_layers) * f.n_heads) {
    fail(ErrorCode::kDimensionMismatch, "frequency values do not match n_layers x n_heads");
  }
  return f;
}

std::string to_csv(const FrequencyMatrix& f) {
  std::ostringstream out;
  out.precision(9);
  out << "layer";
  for (int h = 0; h < f.n_heads; ++h) out << ",h" << h;
  out << "\n";
  for (int l = 0; l < f.n_layers; ++l) {
    out << l;
    for (int h = 0; h < f.n_heads; ++h) out << "," << f.at(l, h);
    out << "\n";
  }
  return out.str();
}

FlowRun flow_routes(const Model& model, std::span<const TaskExample> examples, double tau,
                    int workers, bool keep_graphs) {
  if (examples.empty()) fail(ErrorCode::kEmptyDataset, "flow routes need examples");
  if (!(tau >= 0.0 && tau <= 1.0)) fail(ErrorCode::kInvalidArgument, "tau must lie in [0, 1]");
  const auto& c = model.config();
  const std::size_t LH = static_cast<std::size_t>(c.n_layers) * c.n_heads;

  std::vector<FlowGraph> graphs(examples.size());
  std::vector<std::vector<char>> flags(examples.size());
  parallel_for(examples.size(), workers, [&](std::size_t i) {
    const auto& e = examples[i];
    e.validate(&c);
    auto fwd = forward_capture(model, e.tokens);
    graphs[i] = build_flow_graph(fwd.cache.get(), tau, e.end());
    flags[i].assign(LH, 0);
    for (const auto& n : graphs[i].nodes) {
      if (n.component == FlowNode::Component::kHead) {
        flags[i][static_cast<std::size_t>(n.layer) * c.n_heads + n.head] = 1;
      }
    }
    if (!keep_graphs) graphs[i] = FlowGraph{};
  });

  FlowRun run;
  FrequencyMatrix& f = run.frequency;
  f.n_layers = c.n_layers;
  f.n_heads = c.n_heads;
  f.n_examples = static_cast<int>(examples.size());
  f.tau = tau;
  std::vector<long> counts(LH, 0);
  for (const auto& fl : flags)
    for (std::size_t i = 0; i < LH; ++i) counts[i] += fl[i];
  f.values.resize(LH);
  for (std::size_t i = 0; i < LH; ++i) {
    f.values[i] = static_cast<double>(counts[i]) / static_cast<double>(examples.size());
  }
  if (keep_graphs) run.graphs = std::move(graphs);
  return run;
}

FrequencyMatrix activation_frequency(const Model& model, std::span<const TaskExample> examples,
                                     double tau, int workers) {
  return flow_routes(model, examples, tau, workers, false).frequency;
}

}  // namespace circuitscope
