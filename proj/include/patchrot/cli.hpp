#pragma once

// Command-line surface. A run is described by one JSON document with the
// sections dataset, model, pretext, optimizer, pretrain, finetune, harness,
// plus seed and output_dir. Precedence, lowest first: built-in defaults,
// the config file, --set overrides in order, then dedicated flags such as
// --epochs or --seed.

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchrot/data.hpp"
#include "patchrot/eval.hpp"

namespace patchrot::cli {

using nlohmann::json;

enum ExitCode : int { kOk = 0, kRuntimeError = 1, kConfigError = 2, kDataError = 3 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

json default_config();

// Overlays `patch` onto `config`. Every key must already exist in the
// defaults and keep its type; null defaults accept a number. Throws
// ConfigError naming the dotted path.
void merge_config(json& config, const json& patch);

// "section.key=value"; the value is parsed as JSON, falling back to a plain
// string, then merged like a file.
void apply_override(json& config, const std::string& assignment);

// Fills derived defaults (buffer = P / 4) and validates every section.
json resolve_config(json config);

// Sorted-key, compact serialization used for hashing.
std::string canonical(const json& config);

// FNV-1a 64 of the canonical resolved document with output_dir removed and
// {"command": command} added, as 16 hex digits.
std::string config_hash(const json& resolved, const std::string& command);

// Typed views of a resolved document.
vit::ViTConfig model_config(const json& resolved, const data::Dataset& train);
optim::PretrainConfig pretrain_config(const json& resolved);
optim::FinetuneConfig finetune_config(const json& resolved);
eval::HarnessConfig harness_config(const json& resolved, const data::Dataset& train, const std::string& hash);

struct DataSplit {
  data::Dataset train;
  data::Dataset test;
};

// Loads a dataset section; test images take the training statistics.
// Throws data::DataError on missing or malformed files.
DataSplit load_data(const json& section);

// Full command line, argv[0] excluded. Never throws; maps errors to exit
// codes and prints them to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace patchrot::cli
