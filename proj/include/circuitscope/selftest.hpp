#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "circuitscope/model.hpp"
#include "circuitscope/patching.hpp"
#include "circuitscope/tasks.hpp"
#include "json.hpp"

namespace circuitscope {

// Small configs used by selftest and the test suite.
ModelConfig tiny_config(PositionalScheme scheme, int n_layers, int n_heads = 4);

struct TinyModel {
  std::string name;
  Model model;
};

// Learned and ALiBi variants, 1 and 2 layers, tied and untied, with and
// without an embedding layernorm.
std::vector<TinyModel> builtin_models(std::uint64_t seed = 0);

// Random IOI-shaped examples: corrupted differs from clean at one position,
// END is the last position, answer and distractor are distinct.
std::vector<TaskExample> synthetic_examples(const Model& model, int n, int length,
                                            std::uint64_t seed);

struct SelftestCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelftestReport {
  std::vector<SelftestCheck> checks;
  double seconds = 0.0;

  bool passed() const;
};

nlohmann::json to_json(const SelftestReport& report);

SelftestReport run_selftest(std::uint64_t seed = 0, int workers = 4);

}  // namespace circuitscope
