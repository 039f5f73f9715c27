#include "circuitscope/circuitscope.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include "circuitscope/commands.hpp"
#include "circuitscope/error.hpp"
#include "circuitscope/forward.hpp"
#include "circuitscope/version.hpp"

struct cs_model {
  circuitscope::Model model;
};

struct cs_dataset {
  circuitscope::Dataset dataset;
};

namespace {

thread_local std::string last_error;

cs_status set_error(cs_status status, std::string message) {
  last_error = std::move(message);
  return status;
}

// Runs fn, translating exceptions into status codes and the thread's error slot.
template <typename Fn>
cs_status guarded(Fn&& fn) {
  try {
    last_error.clear();
    fn();
    return CS_OK;
  } catch (const circuitscope::Error& e) {
    return set_error(static_cast<cs_status>(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return set_error(CS_ERR_PARSE, e.what());
  } catch (const std::bad_alloc&) {
    return set_error(CS_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(CS_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(CS_ERR_INTERNAL, "unknown error");
  }
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(bool ok, const char* what) {
  if (!ok) circuitscope::fail(circuitscope::ErrorCode::kInvalidArgument, what);
}

nlohmann::json parse_params(const char* params_json) {
  if (!params_json || !*params_json) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(params_json);
  } catch (const nlohmann::json::exception& e) {
    circuitscope::fail(circuitscope::ErrorCode::kParse, std::string("params: ") + e.what());
  }
}

template <typename Fn>
cs_status run_command(char** bundle_out, Fn&& fn) {
  return guarded([&] {
    require(bundle_out != nullptr, "bundle_out is null");
    *bundle_out = nullptr;
    const circuitscope::Bundle bundle = fn();
    *bundle_out = copy_string(circuitscope::to_json(bundle).dump());
  });
}

}  // namespace

extern "C" {

const char* cs_version(void) { return circuitscope::kVersion; }

const char* cs_status_name(cs_status status) {
  if (status == CS_OK) return "Ok";
  if (status == CS_ERR_INTERNAL) return "InternalError";
  // Names are string literals, so the view is null-terminated.
  return circuitscope::error_code_name(static_cast<circuitscope::ErrorCode>(status)).data();
}

const char* cs_last_error(void) { return last_error.c_str(); }

void cs_string_free(char* s) { std::free(s); }

cs_status cs_model_load(const char* dir, cs_model** out) {
  return guarded([&] {
    require(dir && out, "null argument to cs_model_load");
    *out = nullptr;
    *out = new cs_model{circuitscope::Model::load_dir(dir)};
  });
}

void cs_model_free(cs_model* model) { delete model; }

cs_status cs_model_info(const cs_model* model, char** json_out) {
  return guarded([&] {
    require(model && json_out, "null argument to cs_model_info");
    nlohmann::json j = {{"fingerprint", model->model.fingerprint()},
                        {"config", circuitscope::to_json(model->model.config())}};
    *json_out = copy_string(j.dump());
  });
}

cs_status cs_forward_logits(const cs_model* model, const int32_t* tokens, size_t n_tokens,
                            float* logits_out, size_t logits_capacity) {
  return guarded([&] {
    require(model && tokens && logits_out, "null argument to cs_forward_logits");
    const std::vector<int> seq(tokens, tokens + n_tokens);
    const auto run = circuitscope::forward(model->model, seq);
    if (logits_capacity < run.logits.size()) {
      circuitscope::fail(circuitscope::ErrorCode::kInvalidArgument,
                         "logits buffer holds " + std::to_string(logits_capacity) + " floats, need " +
                             std::to_string(run.logits.size()));
    }
    std::memcpy(logits_out, run.logits.data(), run.logits.size() * sizeof(float));
  });
}

cs_status cs_dataset_load(const char* path, cs_dataset** out) {
  return guarded([&] {
    require(path && out, "null argument to cs_dataset_load");
    *out = nullptr;
    *out = new cs_dataset{circuitscope::load_dataset(path)};
  });
}

void cs_dataset_free(cs_dataset* dataset) { delete dataset; }

size_t cs_dataset_size(const cs_dataset* dataset) { return dataset ? dataset->dataset.size() : 0; }

#define CS_DATASET_COMMAND(name, impl)                                                          \
  cs_status name(const cs_model* model, const cs_dataset* dataset, const char* params_json,    \
                 char** bundle_out) {                                                          \
    return run_command(bundle_out, [&] {                                                       \
      require(model && dataset, "null model or dataset");                                      \
      return circuitscope::impl(model->model, dataset->dataset, parse_params(params_json));    \
    });                                                                                        \
  }

CS_DATASET_COMMAND(cs_eval, cmd_eval)
CS_DATASET_COMMAND(cs_patch, cmd_patch)
CS_DATASET_COMMAND(cs_flow, cmd_flow)
CS_DATASET_COMMAND(cs_ablate, cmd_ablate)
CS_DATASET_COMMAND(cs_lens, cmd_lens)

#undef CS_DATASET_COMMAND

cs_status cs_heads(const cs_model* model, const cs_dataset* dataset, const char* params_json,
                   char** bundle_out) {
  return run_command(bundle_out, [&] {
    require(model != nullptr, "null model");
    return circuitscope::cmd_heads(model->model, dataset ? &dataset->dataset : nullptr,
                                   parse_params(params_json));
  });
}

cs_status cs_compare(const char* params_json, char** bundle_out) {
  return run_command(bundle_out, [&] { return circuitscope::cmd_compare(parse_params(params_json)); });
}

cs_status cs_selftest(const char* params_json, char** bundle_out) {
  return run_command(bundle_out, [&] { return circuitscope::cmd_selftest(parse_params(params_json)); });
}

cs_status cs_parity(const cs_model* model, const char* params_json, char** bundle_out) {
  return run_command(bundle_out, [&] {
    require(model != nullptr, "null model");
    return circuitscope::cmd_parity(model->model, parse_params(params_json));
  });
}

cs_status cs_fixture(const char* dir, const char* params_json, char** bundle_out) {
  return run_command(bundle_out, [&] {
    require(dir != nullptr, "null directory");
    return circuitscope::cmd_fixture(dir, parse_params(params_json));
  });
}

}  // extern "C"
