#pragma once

// JSON conversions for every configuration struct. Unknown keys are rejected so
// typos in config files surface as errors instead of silently using defaults.

#include <json.hpp>

#include "mebinncd/crop.hpp"
#include "mebinncd/mebin.hpp"
#include "mebinncd/merge.hpp"
#include "mebinncd/mgvit.hpp"
#include "mebinncd/ncd.hpp"
#include "mebinncd/synth.hpp"

namespace mebinncd {

void to_json(nlohmann::json& j, const MebinConfig& c);
void from_json(const nlohmann::json& j, MebinConfig& c);
void to_json(nlohmann::json& j, const CropConfig& c);
void from_json(const nlohmann::json& j, CropConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const MergeConfig& c);
void from_json(const nlohmann::json& j, MergeConfig& c);
void to_json(nlohmann::json& j, const NoiseConfig& c);
void from_json(const nlohmann::json& j, NoiseConfig& c);
void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// Throws ConfigInvalid if `j` has a key outside `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* what);

}  // namespace mebinncd
