#pragma once

#include "avdit/cli/config.hpp"
#include "temp_dir.hpp"

#include <random>
#include <string>

namespace avdit::testing {

inline nlohmann::json random_json_value(std::mt19937_64& rng) {
  using nlohmann::json;
  switch (rng() % 9) {
    case 0: return nullptr;
    case 1: return static_cast<bool>(rng() % 2);
    case 2: return static_cast<std::int64_t>(rng() % 2001) - 1000;
    case 3: return -static_cast<std::int64_t>(rng() % 5);
    case 4: return static_cast<double>(rng() % 100000) / 1000.0 - 50.0;
    case 5: return "T2AV";
    case 6: return json::array({1, "x"});
    case 7: return json::object({{"k", 1}});
    default: return static_cast<std::uint64_t>(rng());
  }
}

/// Random walk to a node and one edit there: drop a key, add an unknown
/// key, append to a list or overwrite with a random value.
inline void mutate_json(nlohmann::json& root, std::mt19937_64& rng) {
  nlohmann::json* node = &root;
  for (int depth = 0; depth < 4; ++depth) {
    if (node->is_object() && !node->empty() && rng() % 4) {
      auto it = node->begin();
      std::advance(it, static_cast<long>(rng() % node->size()));
      node = &*it;
    } else if (node->is_array() && !node->empty() && rng() % 4) {
      node = &(*node)[rng() % node->size()];
    } else {
      break;
    }
  }
  const auto op = rng() % 4;
  if (op == 0 && node->is_object() && !node->empty()) {
    auto it = node->begin();
    std::advance(it, static_cast<long>(rng() % node->size()));
    node->erase(it.key());
  } else if (op == 1 && node->is_object()) {
    (*node)["unexpected_" + std::to_string(rng() % 7)] = random_json_value(rng);
  } else if (op == 2 && node->is_array()) {
    node->push_back(random_json_value(rng));
  } else {
    *node = random_json_value(rng);
  }
}

struct FuzzOutcome {
  int accepted = 0;
  int rejected = 0;  // ConfigError with a non-empty field
  int crashed = 0;   // anything else
  std::string first_crash;
};

/// Writes `n` mutated copies of `base` (every tenth one truncated) under
/// `dir` and loads each through the validating reader.
inline FuzzOutcome fuzz_config_files(const nlohmann::json& base, int n, std::uint64_t seed, const TempDir& dir) {
  std::mt19937_64 rng(seed);
  FuzzOutcome out;
  for (int i = 0; i < n; ++i) {
    nlohmann::json j = base;
    const int edits = 1 + static_cast<int>(rng() % 3);
    for (int e = 0; e < edits; ++e) mutate_json(j, rng);
    std::string text = j.dump();
    if (i % 10 == 9) text.resize(rng() % text.size());
    const std::string path = dir / ("fuzz" + std::to_string(i) + ".json");
    spit(path, text);
    try {
      cli::load_run_config(path).validate();
      ++out.accepted;
    } catch (const ConfigError& e) {
      if (e.field().empty()) {
        ++out.crashed;
      } else {
        ++out.rejected;
      }
    } catch (const std::exception& e) {
      if (out.crashed++ == 0) out.first_crash = std::string(e.what()) + " for " + text;
    }
  }
  return out;
}

}  // namespace avdit::testing
