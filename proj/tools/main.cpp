#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "circuitscope/circuitscope.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// A failed C API call, or a CLI-side failure mapped onto the same codes.
// Library messages already start with the error name.
struct ApiError {
  cs_status status;
  std::string message;
};

ApiError cli_error(cs_status status, const std::string& message) {
  return {status, std::string(cs_status_name(status)) + ": " + message};
}

void check(cs_status status) {
  if (status != CS_OK) throw ApiError{status, cs_last_error()};
}

struct ModelHandle {
  cs_model* ptr = nullptr;
  ~ModelHandle() { cs_model_free(ptr); }
};

struct DatasetHandle {
  cs_dataset* ptr = nullptr;
  ~DatasetHandle() { cs_dataset_free(ptr); }
};

json take_bundle(char* raw) {
  std::unique_ptr<char, decltype(&cs_string_free)> owned(raw, cs_string_free);
  return json::parse(owned.get());
}

// Shared state for one invocation: flag values and the config file.
struct Options {
  std::string config_path;
  std::string model;
  std::string dataset;
  std::string out;
  json flags = json::object();
};

std::string random_suffix() {
  std::random_device rd;
  std::ostringstream s;
  s << std::hex << rd() << rd();
  return s.str();
}

void write_atomic(const fs::path& target, const std::string& content) {
  fs::create_directories(target.parent_path());
  const char* cache = std::getenv("CIRCUITSCOPE_CACHE");
  const fs::path scratch_dir = cache && *cache ? fs::path(cache) : target.parent_path();
  fs::create_directories(scratch_dir);
  const fs::path tmp = scratch_dir / (".circuitscope-" + random_suffix() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    out << content;
    out.close();
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    // Scratch on another filesystem: stage next to the target instead.
    const fs::path local = target.parent_path() / (".circuitscope-" + random_suffix() + ".tmp");
    fs::copy_file(tmp, local, fs::copy_options::overwrite_existing);
    fs::remove(tmp);
    fs::rename(local, target);
  }
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw cli_error(CS_ERR_IO, "cannot open config file " + path);
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw cli_error(CS_ERR_INVALID_ARGUMENT, path + ": config must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw cli_error(CS_ERR_PARSE, path + ": " + e.what());
  }
}

// Merges config file and flags into (paths, params). Flags win.
struct Resolved {
  std::string model;
  std::string dataset;
  fs::path out;
  json params;
};

Resolved resolve(const Options& o, const std::string& command) {
  json params = load_config(o.config_path);
  auto take_path = [&](std::initializer_list<const char*> keys) {
    std::string value;
    for (const char* k : keys) {
      if (params.contains(k)) {
        value = params.at(k).get<std::string>();
        params.erase(k);
      }
    }
    return value;
  };
  Resolved r;
  r.model = take_path({"model_dir", "model"});
  r.dataset = take_path({"dataset_path", "dataset"});
  std::string out = take_path({"output_dir", "out"});
  if (!o.model.empty()) r.model = o.model;
  if (!o.dataset.empty()) r.dataset = o.dataset;
  if (!o.out.empty()) out = o.out;
  r.out = out.empty() ? fs::path("circuitscope-out") / command : fs::path(out);
  for (const auto& [key, value] : o.flags.items()) params[key] = value;
  r.params = params;
  return r;
}

void require_path(const std::string& value, const char* what) {
  if (value.empty()) throw cli_error(CS_ERR_INVALID_ARGUMENT, std::string("missing ") + what);
}

void emit(const json& bundle, const fs::path& out) {
  for (const auto& w : bundle.at("warnings")) std::cerr << "warning: " << w.get<std::string>() << "\n";
  for (const auto& [name, content] : bundle.at("files").items()) {
    write_atomic(out / name, content.get<std::string>());
  }
  write_atomic(out / "report.json", bundle.at("report").dump(1) + "\n");
  for (const auto& line : bundle.at("summary")) std::cout << line.get<std::string>() << "\n";
  std::cout << "report: " << (out / "report.json").string() << "\n";
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> items;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

json positions_value(const std::string& s) {
  if (s == "all") return s;
  const auto items = split(s);
  bool numeric = !items.empty();
  for (const auto& i : items) numeric = numeric && i.find_first_not_of("0123456789") == std::string::npos;
  if (!numeric) return items;
  json arr = json::array();
  for (const auto& i : items) arr.push_back(std::stoi(i));
  return arr;
}

// Accepts a JSON literal or a path to a JSON file.
json json_value(const std::string& s) {
  if (fs::exists(s)) return load_config(s);
  try {
    return json::parse(s);
  } catch (const json::exception&) {
    throw cli_error(CS_ERR_IO, "cannot open " + s);
  }
}

using Runner = std::function<json(const Resolved&)>;

int run_guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ApiError& e) {
    std::cerr << "error: " << e.message << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"circuitscope: circuit analysis for decoder-only transformers"};
  app.set_version_flag("--version", std::string(cs_version()));
  app.require_subcommand(1);

  Options opts;
  std::function<int()> action;

  // Flag helpers: each records its value into opts.flags under a param key
  // only when the user passes it.
  auto flag_str = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    return sub->add_option_function<std::string>(name, [&opts, key](const std::string& v) { opts.flags[key] = v; }, help);
  };
  auto flag_double = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    return sub->add_option_function<double>(name, [&opts, key](double v) { opts.flags[key] = v; }, help);
  };
  auto flag_int = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    return sub->add_option_function<long long>(name, [&opts, key](long long v) { opts.flags[key] = v; }, help);
  };
  auto flag_list = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    return sub->add_option_function<std::string>(name, [&opts, key](const std::string& v) { opts.flags[key] = split(v); }, help);
  };
  auto flag_json = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    return sub->add_option_function<std::string>(name, [&opts, key](const std::string& v) { opts.flags[key] = json_value(v); }, help);
  };

  auto common = [&](CLI::App* sub, bool model, bool dataset) {
    sub->add_option("--config", opts.config_path, "JSON experiment config (flags override it)");
    if (model) sub->add_option("--model", opts.model, "Model directory (model.safetensors, config.json, vocab.json)");
    if (dataset) sub->add_option("--dataset", opts.dataset, "JSON-lines dataset");
    sub->add_option("--out", opts.out, "Output directory");
    flag_int(sub, "--workers", "workers", "Worker threads (default: available parallelism)")->check(CLI::PositiveNumber);
  };

  auto dataset_command = [&](const std::string& name, const std::string& help,
                             cs_status (*fn)(const cs_model*, const cs_dataset*, const char*, char**)) {
    auto* sub = app.add_subcommand(name, help);
    common(sub, true, true);
    sub->callback([&, name, fn] {
      action = [&, name, fn] {
        const auto r = resolve(opts, name);
        require_path(r.model, "--model");
        require_path(r.dataset, "--dataset");
        ModelHandle model;
        check(cs_model_load(r.model.c_str(), &model.ptr));
        DatasetHandle dataset;
        check(cs_dataset_load(r.dataset.c_str(), &dataset.ptr));
        char* raw = nullptr;
        check(fn(model.ptr, dataset.ptr, r.params.dump().c_str(), &raw));
        emit(take_bundle(raw), r.out);
        return 0;
      };
    });
    return sub;
  };

  dataset_command("eval", "Accuracy, zero-rank rate and answer ranks", cs_eval);

  auto* patch = dataset_command("patch", "Path or activation patching sweep over all heads", cs_patch);
  flag_str(patch, "--freeze", "freeze", "Freeze policy: attn (recompute FFNs) or all")->check(CLI::IsMember({"attn", "all"}));
  flag_str(patch, "--mode", "mode", "path or activation")->check(CLI::IsMember({"path", "activation"}));
  flag_str(patch, "--receiver", "receiver", "logits or heads L.H[,L.H...]");
  patch->add_option_function<std::string>("--positions", [&](const std::string& v) { opts.flags["positions"] = positions_value(v); },
                                          "all, role names (END,S2) or indices");
  flag_str(patch, "--metric", "metric", "logit_diff, answer_logit or answer_rank");
  flag_int(patch, "--topk", "topk", "Heads listed in the summary");

  auto* flow = dataset_command("flow", "Information-flow graphs and head activation frequency", cs_flow);
  flag_double(flow, "--tau", "tau", "Contribution threshold (default 0.03)");
  flag_str(flow, "--graph-format", "graph_format", "dot or json");
  flow->add_flag_function("--no-graphs", [&](std::int64_t) { opts.flags["graphs"] = false; }, "Skip per-example graphs");

  auto* ablate = dataset_command("ablate", "Zero-ablate FFN layers and/or heads, then re-evaluate", cs_ablate);
  flag_str(ablate, "--layers", "layers", "FFN layer range A..B (inclusive)");
  flag_str(ablate, "--heads", "heads", "Heads L.H[,L.H...]");
  flag_json(ablate, "--groups", "groups", "Token groups {name: [ids]} as JSON or a JSON file");

  auto* lens = dataset_command("lens", "Direct logit attribution at END: top promoted tokens per site", cs_lens);
  flag_int(lens, "--topk", "topk", "Tokens per site (default 10)");
  flag_str(lens, "--layers", "layers", "Layer range A..B");
  flag_str(lens, "--heads", "heads", "Only these heads L.H[,L.H...]");
  flag_json(lens, "--groups", "groups", "Verb groups {name: [ids]} as JSON or a JSON file");
  lens->add_flag_function("--no-ffn", [&](std::int64_t) { opts.flags["ffn"] = false; }, "Leave FFN sites out");

  auto* heads = app.add_subcommand("heads", "Head score tables (previous-token, duplicate, induction, copy) and S-inhibition");
  common(heads, true, true);
  flag_int(heads, "--seed", "seed", "Random-token seed (default 0)");
  flag_list(heads, "--kinds", "kinds", "prev_token,duplicate_token,induction,copy");
  flag_int(heads, "--samples", "samples", "Random sequences per score");
  flag_int(heads, "--length", "length", "Sequence length (half length for repeated sequences)");
  flag_int(heads, "--topk", "topk", "k for the copy score");
  flag_int(heads, "--probes", "probes", "Copy-score probe tokens drawn from the seed");
  flag_str(heads, "--candidate", "candidate", "S-inhibition candidate head L.H (needs --dataset)");
  flag_str(heads, "--movers", "movers", "Downstream mover heads L.H[,L.H...]");
  heads->callback([&] {
    action = [&] {
      const auto r = resolve(opts, "heads");
      require_path(r.model, "--model");
      ModelHandle model;
      check(cs_model_load(r.model.c_str(), &model.ptr));
      DatasetHandle dataset;
      if (!r.dataset.empty()) check(cs_dataset_load(r.dataset.c_str(), &dataset.ptr));
      char* raw = nullptr;
      check(cs_heads(model.ptr, dataset.ptr, r.params.dump().c_str(), &raw));
      emit(take_bundle(raw), r.out);
      return 0;
    };
  });

  auto* compare = app.add_subcommand("compare", "Correlate and overlap two activation-frequency matrices");
  std::string file_a, file_b;
  compare->add_option("a", file_a, "First frequency JSON (flow report or frequency.json)")->required();
  compare->add_option("b", file_b, "Second frequency JSON")->required();
  common(compare, false, false);
  flag_double(compare, "--freq-threshold", "freq_threshold", "Membership threshold (head in set iff freq > threshold)");
  flag_str(compare, "--graph-format", "graph_format", "dot or json");
  compare->callback([&] {
    action = [&] {
      auto r = resolve(opts, "compare");
      r.params["a"] = file_a;
      r.params["b"] = file_b;
      char* raw = nullptr;
      check(cs_compare(r.params.dump().c_str(), &raw));
      emit(take_bundle(raw), r.out);
      return 0;
    };
  });

  auto* selftest = app.add_subcommand("selftest", "Property suite on built-in tiny random models");
  common(selftest, false, false);
  flag_int(selftest, "--seed", "seed", "Model seed");
  selftest->callback([&] {
    action = [&] {
      const auto r = resolve(opts, "selftest");
      char* raw = nullptr;
      check(cs_selftest(r.params.dump().c_str(), &raw));
      const json bundle = take_bundle(raw);
      emit(bundle, r.out);
      return bundle.at("report").at("result").at("passed").get<bool>() ? 0 : 1;
    };
  });

  auto* parity = app.add_subcommand("parity", "Compare logits against a golden fixture");
  common(parity, true, false);
  flag_str(parity, "--fixture", "fixture", "Golden-logit fixture JSON");
  flag_double(parity, "--tolerance", "tolerance", "Max |delta logit| (default 1e-3)");
  parity->callback([&] {
    action = [&] {
      const auto r = resolve(opts, "parity");
      require_path(r.model, "--model");
      ModelHandle model;
      check(cs_model_load(r.model.c_str(), &model.ptr));
      char* raw = nullptr;
      check(cs_parity(model.ptr, r.params.dump().c_str(), &raw));
      const json bundle = take_bundle(raw);
      emit(bundle, r.out);
      return bundle.at("report").at("passed").get<bool>() ? 0 : 1;
    };
  });

  auto* fixture = app.add_subcommand("fixture", "Write a tiny random model and synthetic dataset");
  std::string fixture_dir;
  fixture->add_option("dir", fixture_dir, "Target directory")->required();
  fixture->add_option("--config", opts.config_path, "JSON parameters");
  flag_int(fixture, "--seed", "seed", "Weight seed");
  flag_str(fixture, "--scheme", "scheme", "learned or alibi");
  flag_int(fixture, "--layers", "n_layers", "Layer count");
  flag_int(fixture, "--n", "n", "Example count");
  fixture->callback([&] {
    action = [&] {
      const auto r = resolve(opts, "fixture");
      char* raw = nullptr;
      check(cs_fixture(fixture_dir.c_str(), r.params.dump().c_str(), &raw));
      const json bundle = take_bundle(raw);
      for (const auto& line : bundle.at("summary")) std::cout << line.get<std::string>() << "\n";
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ApiError& e) {
    std::cerr << "error: " << e.message << "\n";
    return 1;
  }
  return run_guarded(action);
}
