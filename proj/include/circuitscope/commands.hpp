#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "circuitscope/attribution.hpp"
#include "circuitscope/model.hpp"
#include "circuitscope/tasks.hpp"
#include "json.hpp"

namespace circuitscope {

// Output of one experiment command: the JSON report, extra files keyed by
// relative path, and human-readable summary lines.
struct Bundle {
  nlohmann::json report;
  std::map<std::string, std::string> files;
  std::vector<std::string> summary;
  std::vector<std::string> warnings;
};

nlohmann::json to_json(const Bundle& bundle);

// "9.6,10.7" or ["9.6", "10.7"].
std::vector<HeadRef> parse_heads(const nlohmann::json& spec);
// "20..24" (inclusive) or a single layer "7".
std::pair<int, int> parse_layer_range(const std::string& spec);

// Each command reads its parameters from a JSON object (unknown keys are
// rejected) and echoes the resolved values in the report.
Bundle cmd_eval(const Model& model, const Dataset& dataset, const nlohmann::json& params);
Bundle cmd_patch(const Model& model, const Dataset& dataset, const nlohmann::json& params);
Bundle cmd_flow(const Model& model, const Dataset& dataset, const nlohmann::json& params);
Bundle cmd_ablate(const Model& model, const Dataset& dataset, const nlohmann::json& params);
Bundle cmd_lens(const Model& model, const Dataset& dataset, const nlohmann::json& params);
// dataset may be null unless s-inhibition is requested.
Bundle cmd_heads(const Model& model, const Dataset* dataset, const nlohmann::json& params);
Bundle cmd_compare(const nlohmann::json& params);
Bundle cmd_selftest(const nlohmann::json& params);
Bundle cmd_parity(const Model& model, const nlohmann::json& params);

// Writes a tiny random model directory (model.safetensors, config.json,
// vocab.json) and a synthetic contrast dataset (dataset.jsonl) into dir.
Bundle cmd_fixture(const std::filesystem::path& dir, const nlohmann::json& params);

}  // namespace circuitscope
