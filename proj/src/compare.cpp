#include "circuitscope/compare.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "circuitscope/error.hpp"

namespace circuitscope {

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    fail(ErrorCode::kDimensionMismatch, std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " entries");
  }
  if (a.empty()) fail(ErrorCode::kConstantInput, "empty input");
  const double n = static_cast<double>(a.size());
  double mean_a = 0.0, mean_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    mean_a += a[i];
    mean_b += b[i];
  }
  mean_a /= n;
  mean_b /= n;
  double cov = 0.0, var_a = 0.0, var_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - mean_a, db = b[i] - mean_b;
    cov += da * db;
    var_a += da * da;
    var_b += db * db;
  }
  if (var_a == 0.0 || var_b == 0.0) fail(ErrorCode::kConstantInput, "zero variance");
  const double rho = cov / std::sqrt(var_a * var_b);
  return std::clamp(rho, -1.0, 1.0);
}

ComparisonReport compare_circuits(const FrequencyMatrix& a, const FrequencyMatrix& b,
                                  double freq_threshold) {
  if (a.n_layers != b.n_layers || a.n_heads != b.n_heads || a.values.size() != b.values.size()) {
    fail(ErrorCode::kDimensionMismatch,
         std::to_string(a.n_layers) + "x" + std::to_string(a.n_heads) + " vs " +
             std::to_string(b.n_layers) + "x" + std::to_string(b.n_heads));
  }
  if (!(freq_threshold >= 0.0 && freq_threshold <= 1.0)) {
    fail(ErrorCode::kInvalidArgument, "freq_threshold must lie in [0, 1]");
  }
  ComparisonReport r;
  r.freq_threshold = freq_threshold;
  r.n_layers = a.n_layers;
  r.n_heads = a.n_heads;
  try {
    r.pearson_rho = pearson(a.values, b.values);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kConstantInput) throw;
  }
  r.abs_difference.resize(a.values.size());
  for (int l = 0; l < a.n_layers; ++l) {
    for (int h = 0; h < a.n_heads; ++h) {
      const std::size_t i = static_cast<std::size_t>(l) * a.n_heads + h;
      r.abs_difference[i] = std::fabs(a.values[i] - b.values[i]);
      const bool in_a = a.values[i] > freq_threshold, in_b = b.values[i] > freq_threshold;
      if (in_a && in_b) {
        r.shared.insert({l, h});
      } else if (in_a) {
        r.only_a.insert({l, h});
      } else if (in_b) {
        r.only_b.insert({l, h});
      }
    }
  }
  const std::size_t uni = r.shared.size() + r.only_a.size() + r.only_b.size();
  r.jaccard = uni == 0 ? 1.0 : static_cast<double>(r.shared.size()) / static_cast<double>(uni);
  return r;
}

nlohmann::json to_json(const ComparisonReport& r) {
  auto labels = [](const std::set<HeadRef>& s) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& h : s) arr.push_back(h.label());
    return arr;
  };
  nlohmann::json j = {{"shared_heads", labels(r.shared)},
                      {"only_a", labels(r.only_a)},
                      {"only_b", labels(r.only_b)},
                      {"jaccard", r.jaccard},
                      {"freq_threshold", r.freq_threshold},
                      {"n_layers", r.n_layers},
                      {"n_heads", r.n_heads},
                      {"abs_difference", r.abs_difference}};
  j["pearson_rho"] = r.pearson_rho ? nlohmann::json(*r.pearson_rho) : nlohmann::json(nullptr);
  return j;
}

GraphFormat graph_format_from_string(const std::string& name) {
  if (name == "dot") return GraphFormat::kDot;
  if (name == "json") return GraphFormat::kJson;
  fail(ErrorCode::kUnsupportedFormat, "graph format '" + name + "'");
}

namespace {

std::string component_name(FlowNode::Component c) {
  switch (c) {
    case FlowNode::Component::kEmbed: return "embed";
    case FlowNode::Component::kHead: return "head";
    case FlowNode::Component::kFfn: return "ffn";
    case FlowNode::Component::kResid: return "resid";
  }
  return "?";
}

FlowNode::Component component_from_name(const std::string& s) {
  if (s == "embed") return FlowNode::Component::kEmbed;
  if (s == "head") return FlowNode::Component::kHead;
  if (s == "ffn") return FlowNode::Component::kFfn;
  if (s == "resid") return FlowNode::Component::kResid;
  fail(ErrorCode::kParse, "unknown node component '" + s + "'");
}

nlohmann::json node_json(const FlowNode& n) {
  nlohmann::json j = {{"layer", n.layer}, {"position", n.position}, {"component", component_name(n.component)}};
  if (n.component == FlowNode::Component::kHead) j["head"] = n.head;
  return j;
}

FlowNode node_from_json(const nlohmann::json& j) {
  FlowNode n;
  n.layer = j.at("layer").get<int>();
  n.position = j.at("position").get<int>();
  n.component = component_from_name(j.at("component").get<std::string>());
  n.head = j.value("head", -1);
  return n;
}

std::string format_weight(double w) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", w);
  return buf;
}

}  // namespace

nlohmann::json to_json(const FlowGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes) nodes.push_back(node_json(n));
  auto index_of = [&](const FlowNode& n) {
    return static_cast<int>(std::lower_bound(g.nodes.begin(), g.nodes.end(), n) - g.nodes.begin());
  };
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges) {
    edges.push_back({{"src", index_of(e.src)}, {"dst", index_of(e.dst)}, {"weight", e.weight}});
  }
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& [n, share] : g.attn_block_share) {
    blocks.push_back({{"node", index_of(n)}, {"attn_block_share", share}});
  }
  return {{"threshold", g.threshold}, {"sink", node_json(g.sink)}, {"nodes", nodes},
          {"edges", edges}, {"attn_block", blocks}};
}

FlowGraph flow_graph_from_json(const nlohmann::json& j) {
  FlowGraph g;
  try {
    g.threshold = j.at("threshold").get<double>();
    g.sink = node_from_json(j.at("sink"));
    for (const auto& n : j.at("nodes")) g.nodes.push_back(node_from_json(n));
    for (const auto& e : j.at("edges")) {
      const auto src = e.at("src").get<std::size_t>(), dst = e.at("dst").get<std::size_t>();
      if (src >= g.nodes.size() || dst >= g.nodes.size()) fail(ErrorCode::kParse, "edge index out of range");
      g.edges.push_back({g.nodes[src], g.nodes[dst], e.at("weight").get<double>()});
    }
    if (j.contains("attn_block")) {
      for (const auto& b : j.at("attn_block")) {
        const auto idx = b.at("node").get<std::size_t>();
        if (idx >= g.nodes.size()) fail(ErrorCode::kParse, "block node index out of range");
        g.attn_block_share[g.nodes[idx]] = b.at("attn_block_share").get<double>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kParse, std::string("flow graph: ") + e.what());
  }
  return g;
}

std::string export_graph(const FlowGraph& g, GraphFormat format) {
  if (format == GraphFormat::kJson) return to_json(g).dump(1) + "\n";
  std::ostringstream out;
  out << "digraph flow {\n";
  out << "  rankdir=BT;\n";
  for (const auto& n : g.nodes) {
    out << "  \"" << n.label() << "\"";
    if (n == g.sink) out << " [shape=doublecircle]";
    out << ";\n";
  }
  for (const auto& e : g.edges) {
    out << "  \"" << e.src.label() << "\" -> \"" << e.dst.label() << "\" [label=\""
        << format_weight(e.weight) << "\"];\n";
  }
  out << "}\n";
  return out.str();
}

std::string export_graph(const std::set<HeadRef>& heads, GraphFormat format) {
  if (format == GraphFormat::kJson) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& h : heads) nodes.push_back({{"layer", h.layer}, {"head", h.head}, {"component", "head"}});
    return nlohmann::json{{"nodes", nodes}, {"edges", nlohmann::json::array()}}.dump(1) + "\n";
  }
  std::ostringstream out;
  out << "digraph circuit {\n";
  for (const auto& h : heads) out << "  \"L" << h.layer << ".h" << h.head << "\";\n";
  out << "}\n";
  return out.str();
}

}  // namespace circuitscope
