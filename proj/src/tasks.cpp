#include "circuitscope/tasks.hpp"

#include <fstream>
#include <sstream>

#include "circuitscope/archive.hpp"
#include "circuitscope/error.hpp"
#include "circuitscope/forward.hpp"
#include "circuitscope/parallel.hpp"

namespace circuitscope {

std::string to_string(Task task) { return task == Task::kIoi ? "ioi" : "tense"; }
std::string to_string(Lang lang) { return lang == Lang::kEn ? "en" : "zh"; }
std::string to_string(Variant variant) {
  return variant == Variant::kNormal ? "normal" : "flipped";
}

int TaskExample::role(const std::string& name) const {
  auto it = roles.find(name);
  if (it == roles.end()) fail(ErrorCode::kInvalidDataset, id + ": missing role " + name);
  return it->second;
}

void TaskExample::validate(const ModelConfig* config) const {
  auto bad = [&](const std::string& what) { fail(ErrorCode::kInvalidDataset, id + ": " + what); };
  if (tokens.empty()) bad("empty token sequence");
  if (!roles.count("END")) bad("missing END role");
  for (const auto& [name, pos] : roles) {
    if (pos < 0 || pos >= static_cast<int>(tokens.size())) bad("role " + name + " out of range");
  }
  if (corrupted_tokens && corrupted_tokens->size() != tokens.size()) {
    bad("corrupted_tokens length differs from tokens");
  }
  if (distractor && *distractor == answer) bad("answer equals distractor");
  if (task == Task::kIoi && !distractor) bad("ioi example without distractor");
  if (task == Task::kTense && lang == Lang::kZh && distractor) {
    bad("zh tense examples carry no distractor");
  }
  if (config) {
    auto check = [&](int t, const char* what) {
      if (t < 0 || t >= config->vocab_size) bad(std::string(what) + " token out of vocabulary");
    };
    for (int t : tokens) check(t, "input");
    if (corrupted_tokens) {
      for (int t : *corrupted_tokens) check(t, "corrupted");
    }
    check(answer, "answer");
    if (distractor) check(*distractor, "distractor");
    if (static_cast<int>(tokens.size()) > config->max_seq_len) bad("sequence longer than max_seq_len");
  }
}

nlohmann::json to_json(const TaskExample& e) {
  nlohmann::json j = {
      {"id", e.id},
      {"task", to_string(e.task)},
      {"lang", to_string(e.lang)},
      {"variant", to_string(e.variant)},
      {"tokens", e.tokens},
      {"roles", e.roles},
      {"answer", e.answer},
      {"template_id", e.template_id},
  };
  if (e.corrupted_tokens) j["corrupted_tokens"] = *e.corrupted_tokens;
  if (e.distractor) j["distractor"] = *e.distractor;
  return j;
}

TaskExample task_example_from_json(const nlohmann::json& j) {
  TaskExample e;
  try {
    e.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
    const auto task = j.at("task").get<std::string>();
    if (task == "ioi") {
      e.task = Task::kIoi;
    } else if (task == "tense") {
      e.task = Task::kTense;
    } else {
      fail(ErrorCode::kInvalidDataset, e.id + ": unknown task '" + task + "'");
    }
    const auto lang = j.at("lang").get<std::string>();
    if (lang == "en") {
      e.lang = Lang::kEn;
    } else if (lang == "zh") {
      e.lang = Lang::kZh;
    } else {
      fail(ErrorCode::kInvalidDataset, e.id + ": unknown lang '" + lang + "'");
    }
    const auto variant = j.value("variant", std::string("normal"));
    if (variant == "normal") {
      e.variant = Variant::kNormal;
    } else if (variant == "flipped") {
      e.variant = Variant::kFlipped;
    } else {
      fail(ErrorCode::kInvalidDataset, e.id + ": unknown variant '" + variant + "'");
    }
    e.tokens = j.at("tokens").get<std::vector<int>>();
    if (j.contains("corrupted_tokens") && !j.at("corrupted_tokens").is_null()) {
      e.corrupted_tokens = j.at("corrupted_tokens").get<std::vector<int>>();
    }
    e.roles = j.at("roles").get<std::map<std::string, int>>();
    e.answer = j.at("answer").get<int>();
    if (j.contains("distractor") && !j.at("distractor").is_null()) {
      e.distractor = j.at("distractor").get<int>();
    }
    e.template_id = j.value("template_id", 0);
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::kParse, std::string("task example: ") + ex.what());
  }
  e.validate();
  return e;
}

std::string to_jsonl(std::span<const TaskExample> examples) {
  std::string out;
  for (const auto& e : examples) {
    out += to_json(e).dump();
    out += '\n';
  }
  return out;
}

Dataset make_dataset(std::vector<TaskExample> examples) {
  for (const auto& e : examples) e.validate();
  Dataset d;
  d.digest = sha256_hex(to_jsonl(examples));
  d.examples = std::move(examples);
  return d;
}

Dataset parse_dataset(std::string_view jsonl) {
  std::vector<TaskExample> examples;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kParse, "line " + std::to_string(line_no) + ": " + e.what());
    }
    examples.push_back(task_example_from_json(j));
  }
  return make_dataset(std::move(examples));
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open dataset " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_dataset(buffer.str());
}

void require_uniform(std::span<const TaskExample> examples) {
  if (examples.empty()) fail(ErrorCode::kEmptyDataset, "dataset has no examples");
  const auto& first = examples.front();
  for (const auto& e : examples) {
    if (e.task != first.task || e.lang != first.lang || e.variant != first.variant) {
      fail(ErrorCode::kMixedDataset, "example " + e.id + " (" + to_string(e.task) + "/" +
                                         to_string(e.lang) + "/" + to_string(e.variant) +
                                         ") differs from " + first.id);
    }
  }
}

int token_rank(std::span<const float> logits, int token) {
  if (token < 0 || static_cast<std::size_t>(token) >= logits.size()) {
    fail(ErrorCode::kIndexOutOfBounds, "token " + std::to_string(token));
  }
  const float target = logits[token];
  int rank = 0;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    if (logits[t] > target || (logits[t] == target && static_cast<int>(t) < token)) ++rank;
  }
  return rank;
}

double logit_diff(std::span<const float> logits, int answer, int distractor) {
  const auto n = static_cast<int>(logits.size());
  if (answer < 0 || answer >= n || distractor < 0 || distractor >= n) {
    fail(ErrorCode::kIndexOutOfBounds, "answer/distractor outside vocabulary");
  }
  return static_cast<double>(logits[answer]) - static_cast<double>(logits[distractor]);
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& e : r.per_example) {
    nlohmann::json item = {{"id", e.id}, {"answer_rank", e.answer_rank}};
    if (e.logit_diff) item["logit_diff"] = *e.logit_diff;
    per.push_back(item);
  }
  nlohmann::json j = {{"n", r.n},
                      {"zero_rank_rate", r.zero_rank_rate},
                      {"mean_answer_rank", r.mean_answer_rank},
                      {"per_example", per}};
  j["accuracy"] = r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json(nullptr);
  return j;
}

EvalRun evaluate_with_ranks(const Model& model, std::span<const TaskExample> examples,
                            const InterventionPlan* plan, std::span<const int> tracked,
                            int workers) {
  require_uniform(examples);
  for (const auto& e : examples) e.validate(&model.config());
  for (int t : tracked) {
    if (t < 0 || t >= model.config().vocab_size) {
      fail(ErrorCode::kIndexOutOfBounds, "tracked token " + std::to_string(t));
    }
  }

  const std::size_t n = examples.size();
  std::vector<ExampleEval> per(n);
  std::vector<TokenRanks> ranks(n);
  std::vector<char> correct(n, 0);
  parallel_for(n, workers, [&](std::size_t i) {
    const auto& e = examples[i];
    const int end = e.end();
    auto fwd = forward(model, e.tokens, plan, ForwardOptions{.capture = false, .logits_at = end});
    auto logits = fwd.logits_at(end);
    per[i].id = e.id;
    per[i].answer_rank = token_rank(logits, e.answer);
    if (e.distractor) {
      per[i].logit_diff = logit_diff(logits, e.answer, *e.distractor);
      correct[i] = logits[e.answer] > logits[*e.distractor];
    }
    ranks[i].id = e.id;
    for (int t : tracked) ranks[i].ranks[t] = token_rank(logits, t);
  });

  EvalRun run;
  EvalReport& r = run.report;
  r.n = static_cast<int>(n);
  const bool all_distractors =
      std::all_of(examples.begin(), examples.end(), [](const auto& e) { return e.distractor.has_value(); });
  std::size_t zero = 0, hits = 0;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    zero += per[i].answer_rank == 0;
    hits += correct[i];
    rank_sum += per[i].answer_rank;
  }
  r.zero_rank_rate = static_cast<double>(zero) / static_cast<double>(n);
  r.mean_answer_rank = rank_sum / static_cast<double>(n);
  if (all_distractors) r.accuracy = static_cast<double>(hits) / static_cast<double>(n);
  r.per_example = std::move(per);
  run.ranks = std::move(ranks);
  return run;
}

EvalReport evaluate(const Model& model, std::span<const TaskExample> examples,
                    const InterventionPlan* plan, int workers) {
  return evaluate_with_ranks(model, examples, plan, {}, workers).report;
}

double rank_shift(std::span<const TokenRanks> baseline, std::span<const TokenRanks> treated,
                  std::span<const int> group) {
  if (baseline.size() != treated.size()) {
    fail(ErrorCode::kExampleMismatch, "runs cover different numbers of examples");
  }
  if (group.empty()) fail(ErrorCode::kInvalidArgument, "rank_shift needs a non-empty group");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < baseline.size(); ++i) {
    if (baseline[i].id != treated[i].id) {
      fail(ErrorCode::kExampleMismatch, "example " + baseline[i].id + " vs " + treated[i].id);
    }
    for (int t : group) {
      auto b = baseline[i].ranks.find(t);
      auto a = treated[i].ranks.find(t);
      if (b == baseline[i].ranks.end() || a == treated[i].ranks.end()) {
        fail(ErrorCode::kExampleMismatch, "token " + std::to_string(t) + " not ranked in " + baseline[i].id);
      }
      sum += static_cast<double>(b->second) - static_cast<double>(a->second);
      ++count;
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace circuitscope
