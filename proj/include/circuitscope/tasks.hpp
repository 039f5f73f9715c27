#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "circuitscope/intervention.hpp"
#include "circuitscope/model.hpp"
#include "json.hpp"

namespace circuitscope {

enum class Task { kIoi, kTense };
enum class Lang { kEn, kZh };
enum class Variant { kNormal, kFlipped };

std::string to_string(Task task);
std::string to_string(Lang lang);
std::string to_string(Variant variant);

struct TaskExample {
  std::string id;
  Task task = Task::kIoi;
  Lang lang = Lang::kEn;
  Variant variant = Variant::kNormal;
  std::vector<int> tokens;
  std::optional<std::vector<int>> corrupted_tokens;
  std::map<std::string, int> roles;
  int answer = 0;
  std::optional<int> distractor;
  int template_id = 0;

  // Position whose next-token distribution is scored.
  int end() const { return roles.at("END"); }
  int role(const std::string& name) const;

  // Throws kInvalidDataset on a broken invariant; with a config, also checks
  // token ids and lengths against the model.
  void validate(const ModelConfig* config = nullptr) const;
};

nlohmann::json to_json(const TaskExample& example);
TaskExample task_example_from_json(const nlohmann::json& j);

struct Dataset {
  std::vector<TaskExample> examples;
  // SHA-256 of the canonical JSON-lines serialization.
  std::string digest;

  bool empty() const { return examples.empty(); }
  std::size_t size() const { return examples.size(); }
};

Dataset make_dataset(std::vector<TaskExample> examples);
Dataset parse_dataset(std::string_view jsonl);
Dataset load_dataset(const std::filesystem::path& path);
std::string to_jsonl(std::span<const TaskExample> examples);

// Throws kEmptyDataset / kMixedDataset unless all examples share task, lang
// and variant.
void require_uniform(std::span<const TaskExample> examples);

// Tokens with a strictly greater logit, plus tied tokens with a smaller id.
int token_rank(std::span<const float> logits, int token);

double logit_diff(std::span<const float> logits, int answer, int distractor);

struct ExampleEval {
  std::string id;
  int answer_rank = 0;
  std::optional<double> logit_diff;
};

struct EvalReport {
  int n = 0;
  std::optional<double> accuracy;
  double zero_rank_rate = 0.0;
  double mean_answer_rank = 0.0;
  std::vector<ExampleEval> per_example;
};

nlohmann::json to_json(const EvalReport& report);

struct TokenRanks {
  std::string id;
  std::map<int, int> ranks;  // token -> rank at END
};

struct EvalRun {
  EvalReport report;
  std::vector<TokenRanks> ranks;
};

EvalReport evaluate(const Model& model, std::span<const TaskExample> examples,
                    const InterventionPlan* plan = nullptr, int workers = 1);

// evaluate plus the END-position rank of every token in `tracked`.
EvalRun evaluate_with_ranks(const Model& model, std::span<const TaskExample> examples,
                            const InterventionPlan* plan, std::span<const int> tracked,
                            int workers = 1);

// Mean over examples and group tokens of (baseline rank - treated rank);
// positive means promoted. Throws kExampleMismatch if the runs differ.
double rank_shift(std::span<const TokenRanks> baseline, std::span<const TokenRanks> treated,
                  std::span<const int> group);

}  // namespace circuitscope
