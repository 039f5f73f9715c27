#include "circuitscope/commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "circuitscope/attribution.hpp"
#include "circuitscope/compare.hpp"
#include "circuitscope/error.hpp"
#include "circuitscope/flow.hpp"
#include "circuitscope/forward.hpp"
#include "circuitscope/parallel.hpp"
#include "circuitscope/patching.hpp"
#include "circuitscope/selftest.hpp"
#include "circuitscope/version.hpp"

namespace circuitscope {

using nlohmann::json;

json to_json(const Bundle& b) {
  return {{"report", b.report}, {"files", b.files}, {"summary", b.summary}, {"warnings", b.warnings}};
}

namespace {

// Typed accessor over a params object. Every key read is remembered so that
// leftovers can be reported as unknown.
class Params {
 public:
  explicit Params(const json& j) : j_(j.is_null() ? json::object() : j) {
    if (!j_.is_object()) fail(ErrorCode::kInvalidArgument, "params must be a JSON object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(ErrorCode::kInvalidArgument, "parameter '" + key + "' has the wrong type");
    }
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(ErrorCode::kInvalidArgument, "unknown parameter '" + key + "'");
    }
  }

 private:
  json j_;
  std::set<std::string> seen_;
};

int read_workers(Params& p) {
  const int w = p.get<int>("workers", default_workers());
  if (w < 1) fail(ErrorCode::kInvalidArgument, "workers must be >= 1");
  return w;
}

json header(const std::string& command, const Model* model, const Dataset* dataset,
            const json& params) {
  json h = {{"command", command}, {"version", kVersion}, {"params", params}};
  if (model) {
    h["model"] = {{"fingerprint", model->fingerprint()}, {"config", to_json(model->config())}};
  }
  if (dataset) {
    json d = {{"digest", dataset->digest}, {"n", dataset->size()}};
    if (!dataset->empty()) {
      const auto& e = dataset->examples.front();
      d["task"] = to_string(e.task);
      d["lang"] = to_string(e.lang);
      d["variant"] = to_string(e.variant);
    }
    h["dataset"] = d;
  }
  return h;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << v;
  return s.str();
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string matrix_csv(int rows, int cols, const std::vector<double>& values) {
  std::ostringstream out;
  out.precision(9);
  out << "layer";
  for (int h = 0; h < cols; ++h) out << ",h" << h;
  out << "\n";
  for (int l = 0; l < rows; ++l) {
    out << l;
    for (int h = 0; h < cols; ++h) out << "," << values[static_cast<std::size_t>(l) * cols + h];
    out << "\n";
  }
  return out.str();
}

json matrix_json(int rows, int cols, const std::vector<double>& values) {
  json m = json::array();
  for (int l = 0; l < rows; ++l) {
    m.push_back(std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(l) * cols,
                                    values.begin() + static_cast<std::ptrdiff_t>(l + 1) * cols));
  }
  return m;
}

std::map<std::string, std::vector<int>> read_groups(Params& p) {
  std::map<std::string, std::vector<int>> groups;
  if (!p.has("groups")) return groups;
  try {
    groups = p.raw("groups").get<std::map<std::string, std::vector<int>>>();
  } catch (const json::exception&) {
    fail(ErrorCode::kInvalidArgument, "groups must map names to token id lists");
  }
  return groups;
}

void check_group_tokens(const Model& model, const std::map<std::string, std::vector<int>>& groups) {
  for (const auto& [name, tokens] : groups) {
    if (tokens.empty()) fail(ErrorCode::kInvalidArgument, "group '" + name + "' is empty");
    for (int t : tokens) {
      if (t < 0 || t >= model.config().vocab_size) {
        fail(ErrorCode::kTokenOutOfRange, "group '" + name + "' token " + std::to_string(t));
      }
    }
  }
}

json read_json_source(const json& spec, const std::string& what) {
  if (!spec.is_string()) return spec;
  const std::string path = spec.get<std::string>();
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + what + " " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, path + ": " + e.what());
  }
}

std::vector<TaskExample> checked_examples(const Model& model, const Dataset& dataset) {
  require_uniform(dataset.examples);
  for (const auto& e : dataset.examples) e.validate(&model.config());
  return dataset.examples;
}

}  // namespace

std::vector<HeadRef> parse_heads(const json& spec) {
  std::vector<std::string> items;
  if (spec.is_string()) {
    std::stringstream ss(spec.get<std::string>());
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) items.push_back(item);
    }
  } else if (spec.is_array()) {
    for (const auto& s : spec) {
      if (!s.is_string()) fail(ErrorCode::kInvalidArgument, "head list entries must be \"L.H\" strings");
      items.push_back(s.get<std::string>());
    }
  } else {
    fail(ErrorCode::kInvalidArgument, "heads must be \"L.H,...\" or a list");
  }
  std::vector<HeadRef> heads;
  for (const auto& item : items) {
    const auto dot = item.find('.');
    try {
      std::size_t used_l = 0, used_h = 0;
      if (dot == std::string::npos) throw std::invalid_argument(item);
      const int l = std::stoi(item.substr(0, dot), &used_l);
      const int h = std::stoi(item.substr(dot + 1), &used_h);
      if (used_l != dot || used_h != item.size() - dot - 1) throw std::invalid_argument(item);
      heads.push_back({l, h});
    } catch (const std::logic_error&) {
      fail(ErrorCode::kInvalidArgument, "bad head '" + item + "', expected L.H");
    }
  }
  return heads;
}

std::pair<int, int> parse_layer_range(const std::string& spec) {
  try {
    const auto sep = spec.find("..");
    std::size_t used = 0;
    if (sep == std::string::npos) {
      const int l = std::stoi(spec, &used);
      if (used != spec.size()) throw std::invalid_argument(spec);
      return {l, l};
    }
    const int a = std::stoi(spec.substr(0, sep), &used);
    if (used != sep) throw std::invalid_argument(spec);
    const std::string rest = spec.substr(sep + 2);
    const int b = std::stoi(rest, &used);
    if (used != rest.size()) throw std::invalid_argument(spec);
    return {a, b};
  } catch (const std::logic_error&) {
    fail(ErrorCode::kInvalidArgument, "bad layer range '" + spec + "', expected A..B");
  }
}

Bundle cmd_eval(const Model& model, const Dataset& dataset, const json& params) {
  Params p(params);
  const int workers = read_workers(p);
  p.finish();
  const auto examples = checked_examples(model, dataset);
  const auto report = evaluate(model, examples, nullptr, workers);

  Bundle b;
  b.report = header("eval", &model, &dataset, {{"workers", workers}});
  b.report["result"] = to_json(report);
  std::string line = "n=" + std::to_string(report.n);
  if (report.accuracy) line += " accuracy=" + fmt(*report.accuracy * 100.0, 2) + "%";
  line += " zero_rank_rate=" + fmt(report.zero_rank_rate * 100.0, 2) + "%";
  line += " mean_answer_rank=" + fmt(report.mean_answer_rank, 3);
  b.summary.push_back(line);
  return b;
}

Bundle cmd_patch(const Model& model, const Dataset& dataset, const json& params) {
  Params p(params);
  SweepOptions opts;
  opts.workers = read_workers(p);
  const auto freeze = p.get<std::string>("freeze", "attn");
  if (freeze == "attn") {
    opts.freeze = FreezePolicy::kFreezeAttnRecomputeMlp;
  } else if (freeze == "all") {
    opts.freeze = FreezePolicy::kFreezeAll;
  } else {
    fail(ErrorCode::kInvalidArgument, "freeze must be 'attn' or 'all'");
  }
  const auto mode = p.get<std::string>("mode", "path");
  if (mode == "path") {
    opts.mode = PatchMode::kPath;
  } else if (mode == "activation") {
    opts.mode = PatchMode::kActivation;
  } else {
    fail(ErrorCode::kInvalidArgument, "mode must be 'path' or 'activation'");
  }
  json receiver_echo = "logits";
  if (p.has("receiver")) {
    const auto& r = p.raw("receiver");
    if (!(r.is_string() && r.get<std::string>() == "logits")) {
      opts.receiver.heads = parse_heads(r);
      receiver_echo = json::array();
      for (const auto& h : opts.receiver.heads) receiver_echo.push_back(h.label());
    }
  }
  json positions_echo = "all";
  if (p.has("positions")) {
    const auto& pos = p.raw("positions");
    if (pos.is_string() && pos.get<std::string>() == "all") {
      // default
    } else if (pos.is_string()) {
      opts.position_roles = {pos.get<std::string>()};
      positions_echo = opts.position_roles;
    } else if (pos.is_array() && !pos.empty() && pos.front().is_string()) {
      opts.position_roles = pos.get<std::vector<std::string>>();
      positions_echo = opts.position_roles;
    } else if (pos.is_array()) {
      opts.positions = pos.get<std::vector<int>>();
      positions_echo = *opts.positions;
    } else {
      fail(ErrorCode::kInvalidArgument, "positions must be 'all', role names or indices");
    }
  }
  std::optional<MetricKind> metric;
  if (p.has("metric")) {
    const auto m = p.get<std::string>("metric", "");
    if (m == "logit_diff") {
      metric = MetricKind::kLogitDiff;
    } else if (m == "answer_logit") {
      metric = MetricKind::kAnswerLogit;
    } else if (m == "answer_rank") {
      metric = MetricKind::kAnswerRank;
    } else {
      fail(ErrorCode::kInvalidArgument, "unknown metric '" + m + "'");
    }
  }
  const int topn = p.get<int>("topk", 10);
  if (topn < 1) fail(ErrorCode::kInvalidArgument, "topk must be >= 1");
  p.finish();

  const auto examples = checked_examples(model, dataset);
  const auto pairs = make_contrast_pairs(examples, metric);
  const auto result = patch_sweep(model, pairs, opts);

  Bundle b;
  b.report = header("patch", &model, &dataset,
                    {{"workers", opts.workers},
                     {"freeze", freeze},
                     {"mode", mode},
                     {"receiver", receiver_echo},
                     {"positions", positions_echo},
                     {"metric", to_string(result.metric)},
                     {"topk", topn}});
  b.report["result"] = to_json(result);
  json top = json::array();
  b.summary.push_back("baseline clean=" + fmt(result.baseline_clean) +
                      " corrupted=" + fmt(result.baseline_corrupted));
  for (const auto& [head, delta] : result.top_heads(static_cast<std::size_t>(topn))) {
    top.push_back({{"head", head.label()}, {"delta", delta}});
    b.summary.push_back(head.label() + " " + fmt(delta, 6));
  }
  b.report["top_heads"] = top;
  b.files["patch.csv"] = to_csv(result);
  return b;
}

Bundle cmd_flow(const Model& model, const Dataset& dataset, const json& params) {
  Params p(params);
  const int workers = read_workers(p);
  const double tau = p.get<double>("tau", 0.03);
  const bool graphs = p.get<bool>("graphs", true);
  const auto format_name = p.get<std::string>("graph_format", "dot");
  const auto format = graph_format_from_string(format_name);
  p.finish();
  if (!(tau >= 0.0 && tau <= 1.0)) fail(ErrorCode::kInvalidArgument, "tau must lie in [0, 1]");

  const auto examples = checked_examples(model, dataset);
  const auto run = flow_routes(model, examples, tau, workers, graphs);

  Bundle b;
  b.report = header("flow", &model, &dataset,
                    {{"workers", workers}, {"tau", tau}, {"graphs", graphs}, {"graph_format", format_name}});
  if (tau >= 1.0) b.warnings.push_back("tau = 1 is degenerate: no term can exceed it");
  b.report["contribution"] =
      "signed(t) = <t, o> / |o|^2 for update output o; normalized = max(0, signed) / sum of positive "
      "terms; a term joins the graph when normalized > tau";
  b.report["frequency"] = to_json(run.frequency);
  b.report["frequency_matrix"] = matrix_json(run.frequency.n_layers, run.frequency.n_heads, run.frequency.values);

  if (graphs) {
    json per_example = json::array();
    const std::string ext = format == GraphFormat::kDot ? ".dot" : ".json";
    for (std::size_t i = 0; i < run.graphs.size(); ++i) {
      const auto& g = run.graphs[i];
      const auto& id = examples[i].id;
      b.files["graphs/" + id + ext] = export_graph(g, format);
      int heads = 0;
      for (const auto& n : g.nodes) heads += n.component == FlowNode::Component::kHead;
      json attn_block = json::object();
      for (const auto& [node, share] : g.attn_block_share) attn_block[node.label()] = share;
      per_example.push_back({{"id", id},
                             {"sink", g.sink.label()},
                             {"n_nodes", g.nodes.size()},
                             {"n_edges", g.edges.size()},
                             {"n_head_nodes", heads},
                             {"attn_block_share", attn_block}});
    }
    b.report["graphs"] = per_example;
  }
  b.files["frequency.json"] = to_json(run.frequency).dump(1) + "\n";
  b.files["frequency.csv"] = to_csv(run.frequency);

  std::vector<std::pair<HeadRef, double>> ranked;
  for (int l = 0; l < run.frequency.n_layers; ++l)
    for (int h = 0; h < run.frequency.n_heads; ++h) ranked.push_back({{l, h}, run.frequency.at(l, h)});
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& c) { return a.second > c.second; });
  int active = 0;
  for (const auto& [h, f] : ranked) active += f > 0.0;
  b.summary.push_back(std::to_string(active) + " heads with non-zero activation frequency over " +
                      std::to_string(run.frequency.n_examples) + " examples (tau=" + fmt(tau, 3) + ")");
  for (std::size_t i = 0; i < std::min<std::size_t>(10, ranked.size()) && ranked[i].second > 0.0; ++i) {
    b.summary.push_back(ranked[i].first.label() + " " + fmt(ranked[i].second, 3));
  }
  return b;
}

Bundle cmd_ablate(const Model& model, const Dataset& dataset, const json& params) {
  Params p(params);
  const int workers = read_workers(p);
  const auto& c = model.config();
  InterventionPlan plan;
  json echo = {{"workers", workers}};
  if (p.has("layers")) {
    const auto spec = p.get<std::string>("layers", "");
    const auto [a, z] = parse_layer_range(spec);
    const auto ffn = zero_ffn_plan(c, a, z);
    plan.items.insert(plan.items.end(), ffn.items.begin(), ffn.items.end());
    echo["layers"] = spec;
  } else {
    echo["layers"] = nullptr;
  }
  std::vector<HeadRef> heads;
  if (p.has("heads")) heads = parse_heads(p.raw("heads"));
  const auto head_plan = zero_heads_plan(c, heads);
  plan.items.insert(plan.items.end(), head_plan.items.begin(), head_plan.items.end());
  json head_labels = json::array();
  for (const auto& h : heads) head_labels.push_back(h.label());
  echo["heads"] = head_labels;
  const auto groups = read_groups(p);
  echo["groups"] = groups;
  p.finish();
  check_group_tokens(model, groups);

  const auto examples = checked_examples(model, dataset);
  plan.validate(c, static_cast<int>(examples.front().tokens.size()));
  const auto report = ablate_and_eval(model, examples, plan, groups, workers);

  Bundle b;
  b.report = header("ablate", &model, &dataset, echo);
  b.report["result"] = to_json(report);
  if (plan.empty()) b.warnings.push_back("empty ablation plan: deltas are zero by construction");
  auto line = [&](const std::string& name, const EvalReport& r) {
    std::string s = name + ": zero_rank_rate=" + fmt(r.zero_rank_rate * 100.0, 2) + "%";
    if (r.accuracy) s += " accuracy=" + fmt(*r.accuracy * 100.0, 2) + "%";
    return s;
  };
  b.summary.push_back(line("baseline", report.baseline));
  b.summary.push_back(line("ablated ", report.ablated));
  for (const auto& [name, shift] : report.rank_shift) {
    b.summary.push_back("rank shift " + name + " " + fmt(shift, 3));
  }
  return b;
}

Bundle cmd_lens(const Model& model, const Dataset& dataset, const json& params) {
  Params p(params);
  const int workers = read_workers(p);
  const auto& c = model.config();
  int k = p.get<int>("topk", 10);
  if (k < 1) fail(ErrorCode::kInvalidArgument, "topk must be >= 1");
  std::vector<HeadRef> heads;
  const bool head_filter = p.has("heads");
  if (head_filter) heads = parse_heads(p.raw("heads"));
  std::pair<int, int> layers{0, c.n_layers - 1};
  std::string layer_spec;
  if (p.has("layers")) {
    layer_spec = p.get<std::string>("layers", "");
    layers = parse_layer_range(layer_spec);
    if (layers.first < 0 || layers.second >= c.n_layers || layers.first > layers.second) {
      fail(ErrorCode::kInvalidSite, "layer range " + layer_spec);
    }
  }
  const bool include_ffn = p.get<bool>("ffn", true);
  const auto groups = read_groups(p);
  p.finish();
  check_group_tokens(model, groups);

  Bundle b;
  if (k > c.vocab_size) {
    b.warnings.push_back("topk " + std::to_string(k) + " exceeds vocabulary size; clipped to " +
                         std::to_string(c.vocab_size));
    k = c.vocab_size;
  }

  std::vector<ComponentSite> sites;
  for (int l = layers.first; l <= layers.second; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      if (head_filter && std::find(heads.begin(), heads.end(), HeadRef{l, h}) == heads.end()) continue;
      sites.push_back(ComponentSite::attn_head(l, h));
    }
    if (include_ffn && !head_filter) sites.push_back(ComponentSite::ffn(l));
  }
  for (const auto& h : heads) {
    if (h.layer < 0 || h.layer >= c.n_layers || h.head < 0 || h.head >= c.n_heads) {
      fail(ErrorCode::kInvalidSite, "head " + h.label());
    }
  }

  const auto examples = checked_examples(model, dataset);
  const std::size_t V = static_cast<std::size_t>(c.vocab_size);
  const std::size_t LH = static_cast<std::size_t>(c.n_layers) * c.n_heads;
  struct PerExample {
    std::vector<std::vector<double>> site_scores;
    std::vector<double> answer_scores;
    std::map<std::string, std::vector<double>> group_scores;
  };
  std::vector<PerExample> slots(examples.size());
  parallel_for(examples.size(), workers, [&](std::size_t i) {
    const auto& ex = examples[i];
    const auto run = forward_capture(model, ex.tokens);
    auto& out = slots[i];
    for (const auto& site : sites) {
      const auto s = direct_logit_scores(run.cache.get(), site, ex.end());
      out.site_scores.emplace_back(s.begin(), s.end());
      out.answer_scores.push_back(s[ex.answer]);
    }
    for (const auto& [name, tokens] : groups) {
      auto& m = out.group_scores[name];
      m.assign(LH, 0.0);
      for (int l = 0; l < c.n_layers; ++l)
        for (int h = 0; h < c.n_heads; ++h)
          m[static_cast<std::size_t>(l) * c.n_heads + h] = verb_group_score(run.cache.get(), l, h, ex.end(), tokens);
    }
  });

  const double n = static_cast<double>(examples.size());
  json site_reports = json::array();
  std::ostringstream table;
  table.precision(9);
  table << "site,rank,token,text,score\n";
  for (std::size_t s = 0; s < sites.size(); ++s) {
    std::vector<double> mean(V, 0.0);
    double answer = 0.0;
    for (const auto& slot : slots) {
      for (std::size_t t = 0; t < V; ++t) mean[t] += slot.site_scores[s][t];
      answer += slot.answer_scores[s];
    }
    std::vector<float> meanf(V);
    for (std::size_t t = 0; t < V; ++t) meanf[t] = static_cast<float>(mean[t] / n);
    const auto top = top_k_scores(meanf, k);
    json entries = json::array();
    for (std::size_t r = 0; r < top.size(); ++r) {
      const auto& [tok, score] = top[r];
      entries.push_back({{"token", tok}, {"text", model.vocab().display(tok)}, {"score", score}});
      table << sites[s].label() << "," << r << "," << tok << "," << csv_escape(model.vocab().display(tok)) << ","
            << score << "\n";
    }
    site_reports.push_back({{"site", sites[s].label()}, {"mean_answer_score", answer / n}, {"top", entries}});
  }

  json group_reports = json::object();
  for (const auto& [name, tokens] : groups) {
    std::vector<double> mean(LH, 0.0);
    for (const auto& slot : slots) {
      const auto& m = slot.group_scores.at(name);
      for (std::size_t i = 0; i < LH; ++i) mean[i] += m[i];
    }
    for (auto& v : mean) v /= n;
    group_reports[name] = {{"tokens", tokens}, {"matrix", matrix_json(c.n_layers, c.n_heads, mean)}};
    b.files["verb_groups/" + name + ".csv"] = matrix_csv(c.n_layers, c.n_heads, mean);
  }

  json echo = {{"workers", workers}, {"topk", k}, {"ffn", include_ffn}, {"groups", groups}};
  json head_labels = json::array();
  for (const auto& h : heads) head_labels.push_back(h.label());
  echo["heads"] = head_filter ? head_labels : json(nullptr);
  echo["layers"] = layer_spec.empty() ? json(nullptr) : json(layer_spec);
  b.report = header("lens", &model, &dataset, echo);
  b.report["position"] = "END";
  b.report["sites"] = site_reports;
  b.report["verb_groups"] = group_reports;
  b.files["lens.csv"] = table.str();

  // Strongest sites by mean direct effect on each example's own answer.
  std::vector<std::size_t> order(sites.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t z) {
    return std::fabs(site_reports[a]["mean_answer_score"].get<double>()) >
           std::fabs(site_reports[z]["mean_answer_score"].get<double>());
  });
  for (std::size_t i = 0; i < std::min<std::size_t>(5, order.size()); ++i) {
    const auto& r = site_reports[order[i]];
    std::string line = r["site"].get<std::string>() + " answer=" + fmt(r["mean_answer_score"].get<double>()) + " top:";
    for (std::size_t t = 0; t < std::min<std::size_t>(3, r["top"].size()); ++t) {
      line += " " + r["top"][t]["text"].get<std::string>();
    }
    b.summary.push_back(line);
  }
  return b;
}

Bundle cmd_heads(const Model& model, const Dataset* dataset, const json& params) {
  Params p(params);
  const auto& c = model.config();
  RandomTokenProtocol proto;
  proto.workers = read_workers(p);
  proto.seed = p.get<std::uint64_t>("seed", 0);
  proto.n_samples = p.get<int>("samples", 20);
  proto.length = p.get<int>("length", std::min(50, c.max_seq_len / 2));
  const auto kinds = p.get<std::vector<std::string>>(
      "kinds", std::vector<std::string>{"prev_token", "duplicate_token", "induction", "copy"});
  const int k = p.get<int>("topk", 5);
  const int n_probes = p.get<int>("probes", 200);
  std::vector<int> probe_tokens = p.get<std::vector<int>>("probe_tokens", {});
  std::optional<HeadRef> candidate;
  if (p.has("candidate")) {
    const auto parsed = parse_heads(p.raw("candidate"));
    if (parsed.size() != 1) fail(ErrorCode::kInvalidArgument, "candidate must name one head");
    candidate = parsed.front();
  }
  std::vector<HeadRef> movers;
  if (p.has("movers")) movers = parse_heads(p.raw("movers"));
  p.finish();

  if (probe_tokens.empty() && std::count(kinds.begin(), kinds.end(), "copy")) {
    Rng rng(proto.seed ^ 0x636f7079ULL);
    const int n = std::min(n_probes, c.vocab_size);
    probe_tokens = random_tokens(model, n, rng);
    std::sort(probe_tokens.begin(), probe_tokens.end());
    probe_tokens.erase(std::unique(probe_tokens.begin(), probe_tokens.end()), probe_tokens.end());
  }

  Bundle b;
  json tables = json::array();
  for (const auto& kind : kinds) {
    HeadScoreTable t;
    if (kind == "prev_token") {
      t = prev_token_score(model, proto);
    } else if (kind == "duplicate_token") {
      t = duplicate_token_score(model, proto);
    } else if (kind == "induction") {
      t = induction_score(model, proto);
    } else if (kind == "copy") {
      t = copy_score_table(model, probe_tokens, k, proto.workers);
    } else {
      fail(ErrorCode::kInvalidArgument, "unknown head score '" + kind + "'");
    }
    tables.push_back(to_json(t, model.fingerprint()));
    b.files["heads/" + kind + ".csv"] = matrix_csv(t.n_layers, t.n_heads, t.values);
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.values.size(); ++i) best = t.values[i] > t.values[best] ? i : best;
    b.summary.push_back(kind + ": top head " + HeadRef{static_cast<int>(best) / c.n_heads, static_cast<int>(best) % c.n_heads}.label() +
                        " " + fmt(t.values[best], 3));
  }

  json echo = {{"workers", proto.workers}, {"seed", proto.seed}, {"samples", proto.n_samples},
               {"length", proto.length}, {"kinds", kinds}, {"topk", k}, {"probe_tokens", probe_tokens}};
  if (candidate) {
    if (!dataset) fail(ErrorCode::kInvalidArgument, "s-inhibition needs a dataset");
    if (movers.empty()) fail(ErrorCode::kInvalidArgument, "s-inhibition needs mover heads");
    const auto examples = checked_examples(model, *dataset);
    const auto rep = s_inhibition_effect(model, examples, *candidate, movers, proto.workers);
    b.report["s_inhibition"] = to_json(rep);
    for (const auto& m : rep.movers) {
      b.summary.push_back("ablate " + candidate->label() + ": mover " + m.mover.label() + " logit_diff " +
                          fmt(m.logit_diff.first) + " -> " + fmt(m.logit_diff.second));
    }
    echo["candidate"] = candidate->label();
    json mv = json::array();
    for (const auto& m : movers) mv.push_back(m.label());
    echo["movers"] = mv;
  }
  const auto head = header("heads", &model, candidate ? dataset : nullptr, echo);
  for (const auto& [key, value] : head.items()) b.report[key] = value;
  b.report["tables"] = tables;
  return b;
}

Bundle cmd_compare(const json& params) {
  Params p(params);
  if (!p.has("a") || !p.has("b")) fail(ErrorCode::kInvalidArgument, "compare needs 'a' and 'b' frequency matrices");
  const json a_src = p.raw("a"), b_src = p.raw("b");
  const double threshold = p.get<double>("freq_threshold", 0.0);
  const auto format_name = p.get<std::string>("graph_format", "dot");
  const auto format = graph_format_from_string(format_name);
  p.finish();

  const auto fa = frequency_from_json(read_json_source(a_src, "frequency file"));
  const auto fb = frequency_from_json(read_json_source(b_src, "frequency file"));
  const auto rep = compare_circuits(fa, fb, threshold);

  Bundle b;
  json echo = {{"freq_threshold", threshold}, {"graph_format", format_name}};
  echo["a"] = a_src.is_string() ? a_src : json("<inline>");
  echo["b"] = b_src.is_string() ? b_src : json("<inline>");
  b.report = header("compare", nullptr, nullptr, echo);
  b.report["result"] = to_json(rep);
  b.report["result"]["abs_difference_matrix"] = matrix_json(rep.n_layers, rep.n_heads, rep.abs_difference);
  b.files["abs_difference.csv"] = matrix_csv(rep.n_layers, rep.n_heads, rep.abs_difference);
  const std::string ext = format == GraphFormat::kDot ? ".dot" : ".json";
  b.files["circuits/shared" + ext] = export_graph(rep.shared, format);
  b.files["circuits/only_a" + ext] = export_graph(rep.only_a, format);
  b.files["circuits/only_b" + ext] = export_graph(rep.only_b, format);
  if (!rep.pearson_rho) b.warnings.push_back("pearson undefined: a frequency matrix is constant");
  b.summary.push_back("pearson=" + (rep.pearson_rho ? fmt(*rep.pearson_rho) : std::string("undefined")) +
                      " jaccard=" + fmt(rep.jaccard) + " shared=" + std::to_string(rep.shared.size()) +
                      " only_a=" + std::to_string(rep.only_a.size()) + " only_b=" + std::to_string(rep.only_b.size()));
  return b;
}

Bundle cmd_selftest(const json& params) {
  Params p(params);
  const int workers = read_workers(p);
  const auto seed = p.get<std::uint64_t>("seed", 0);
  p.finish();
  const auto rep = run_selftest(seed, workers);
  Bundle b;
  b.report = header("selftest", nullptr, nullptr, {{"seed", seed}, {"workers", workers}});
  b.report["result"] = to_json(rep);
  for (const auto& c : rep.checks) {
    b.summary.push_back(std::string(c.passed ? "PASS " : "FAIL ") + c.name + ": " + c.detail);
  }
  b.summary.push_back((rep.passed() ? "all checks passed in " : "failures; ran in ") + fmt(rep.seconds, 2) + " s");
  return b;
}

Bundle cmd_parity(const Model& model, const json& params) {
  Params p(params);
  if (!p.has("fixture")) fail(ErrorCode::kInvalidArgument, "parity needs a 'fixture'");
  const json src = p.raw("fixture");
  const double tol = p.get<double>("tolerance", 1e-3);
  p.finish();
  const json fixture = read_json_source(src, "golden fixture");
  const auto& c = model.config();

  Bundle b;
  json prompts = json::array();
  double worst = 0.0;
  try {
    for (const auto& entry : fixture.at("prompts")) {
      const auto tokens = entry.at("tokens").get<std::vector<int>>();
      const auto& logits = entry.at("logits");
      const auto run = forward(model, tokens);
      double max_diff = 0.0;
      auto compare_row = [&](int pos, const json& row) {
        const auto want = row.get<std::vector<double>>();
        if (static_cast<int>(want.size()) != c.vocab_size) {
          fail(ErrorCode::kShapeMismatch, "fixture logits have " + std::to_string(want.size()) + " entries, vocab is " +
                                              std::to_string(c.vocab_size));
        }
        const auto got = run.logits_at(pos);
        for (std::size_t t = 0; t < want.size(); ++t) max_diff = std::max(max_diff, std::fabs(got[t] - want[t]));
      };
      if (!logits.empty() && logits.front().is_array()) {
        if (logits.size() != tokens.size()) fail(ErrorCode::kShapeMismatch, "fixture logits rows differ from tokens");
        for (std::size_t pos = 0; pos < logits.size(); ++pos) compare_row(static_cast<int>(pos), logits[pos]);
      } else {
        compare_row(static_cast<int>(tokens.size()) - 1, logits);
      }
      worst = std::max(worst, max_diff);
      prompts.push_back({{"text", entry.value("text", "")}, {"n_tokens", tokens.size()}, {"max_abs_diff", max_diff}});
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("golden fixture: ") + e.what());
  }
  const bool ok = worst < tol;
  json echo = {{"tolerance", tol}, {"fixture", src.is_string() ? src : json("<inline>")}};
  b.report = header("parity", &model, nullptr, echo);
  b.report["model_id"] = fixture.value("model_id", "");
  b.report["prompts"] = prompts;
  b.report["max_abs_diff"] = worst;
  b.report["passed"] = ok;
  b.summary.push_back(std::string(ok ? "PASS" : "FAIL") + " max |dlogit| = " + std::to_string(worst) + " over " +
                      std::to_string(prompts.size()) + " prompts (tol " + std::to_string(tol) + ")");
  return b;
}

Bundle cmd_fixture(const std::filesystem::path& dir, const json& params) {
  Params p(params);
  const auto seed = p.get<std::uint64_t>("seed", 0);
  const auto scheme = p.get<std::string>("scheme", "learned");
  const int layers = p.get<int>("n_layers", 2);
  const int heads = p.get<int>("n_heads", 4);
  const int n = p.get<int>("n", 8);
  const int length = p.get<int>("length", 8);
  p.finish();
  if (scheme != "learned" && scheme != "alibi") fail(ErrorCode::kInvalidArgument, "scheme must be learned or alibi");
  if (n < 1 || length < 2) fail(ErrorCode::kInvalidArgument, "need n >= 1 and length >= 2");

  auto config = tiny_config(scheme == "alibi" ? PositionalScheme::kAlibi : PositionalScheme::kLearned, layers, heads);
  config.max_seq_len = std::max(config.max_seq_len, length);
  config.validate();
  Vocabulary vocab;
  vocab.tokens.push_back("<eos>");
  for (int t = 1; t < config.vocab_size; ++t) vocab.tokens.push_back("w" + std::to_string(t));
  vocab.special_ids = {0};

  const auto archive = make_random_archive(config, seed);
  const auto model = Model::load(archive, config, vocab);
  const auto examples = synthetic_examples(model, n, length, seed + 1);

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  archive.write_safetensors(dir / "model.safetensors");
  auto write_text = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir / name);
    out << text;
    if (!out) fail(ErrorCode::kIo, "cannot write " + (dir / name).string());
  };
  write_text("config.json", to_json(config).dump(1) + "\n");
  write_text("vocab.json", json{{"tokens", vocab.tokens}, {"special_ids", vocab.special_ids}}.dump(1) + "\n");
  write_text("dataset.jsonl", to_jsonl(examples));

  Bundle b;
  b.report = header("fixture", &model, nullptr,
                    {{"seed", seed}, {"scheme", scheme}, {"n_layers", layers}, {"n_heads", heads}, {"n", n}, {"length", length}});
  b.report["dir"] = dir.string();
  b.summary.push_back("wrote tiny model and " + std::to_string(n) + " examples to " + dir.string());
  return b;
}

}  // namespace circuitscope
