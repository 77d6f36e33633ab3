#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "superspine/superspine.hpp"

namespace fixtures {

inline std::string scenario_path(const std::string& name) {
  return std::string(SUPERSPINE_SCENARIO_DIR) + "/" + name + ".json";
}

inline nlohmann::json scenario_doc(const std::string& name) {
  return nlohmann::json::parse(superspine::read_text_file(scenario_path(name)));
}

inline superspine::ModelSpec load(const std::string& name) { return superspine::load_scenario(scenario_path(name)); }

/// Scenario `name` with an RFC 7386 merge patch applied.
inline superspine::ModelSpec patched(const std::string& name, const nlohmann::json& patch) {
  auto doc = scenario_doc(name);
  doc.merge_patch(patch);
  return superspine::scenario_from_json(doc);
}

}  // namespace fixtures
