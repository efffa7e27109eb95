#pragma once

#include <filesystem>

#include <json.hpp>

#include "trajeglish/model.hpp"

namespace trajeglish {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  nlohmann::json meta;  // free-form: training step, template set, provenance of the run
};

// Binary container: magic "TGCK", version, model config JSON, meta JSON, then
// named float64 arrays with shapes and decay flags. Little-endian.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace trajeglish
