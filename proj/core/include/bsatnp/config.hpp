#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "bsatnp/model.hpp"
#include "bsatnp/tasks.hpp"
#include "bsatnp/training.hpp"

namespace bsatnp {

// Everything a train or eval run needs. Text form is flat key = value lines;
// keys are dotted ("model.layers") or grouped under [section] headers.
struct RunConfig {
  std::string profile = "paper";
  TaskFamily family = TaskFamily::gp;
  ModelConfig model;
  TrainConfig train;
  GpTaskConfig gp;
  SirConfig sir;

  static RunConfig paper();
  static RunConfig desk();
  // "paper" or "desk"
  static RunConfig for_profile(std::string_view name);

  // Copies the task family's feature widths into the model config.
  void sync_model_widths();
  // Switches family; moving to or from spherical also swaps the GP domain
  // (kernel and box), and SIR gets its own default learning-rate floor.
  void set_family(TaskFamily f);
  TaskStream stream() const;
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

std::vector<std::string> config_keys();
// Throws ConfigError listing the valid keys when `key` is unknown.
void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const RunConfig& cfg, std::string_view key);

// Applies the lines of `text` on top of `base`.
RunConfig parse_config(std::string_view text, RunConfig base);
RunConfig load_config_file(const std::string& path, RunConfig base);
// Every key whose name starts with `prefix`, one per line.
std::string config_to_text(const RunConfig& cfg, std::string_view prefix = "");

// Bias variants of the rotation ablation:
//   rbf       RBF bias on s, s kept out of the embedder
//   geodesic  geodesic bias on s, s kept out of the embedder
//   embed     no bias at all, s fed to the embedder
void apply_bias_variant(ModelConfig& model, std::string_view variant);
// The variant `model` matches, or "custom".
std::string bias_variant_of(const ModelConfig& model);

std::string model_config_to_text(const ModelConfig& cfg);
ModelConfig parse_model_config(std::string_view text);

}  // namespace bsatnp
