#pragma once

#include <string>
#include <vector>

#include "partformer/data.hpp"
#include "partformer/model.hpp"

namespace pf {

// Full run configuration. Flat dotted-path keys in a plain text file
// ("key = value" lines, '#' comments); unknown keys are rejected.
struct RunConfig {
  ModelConfig model;  // num_cameras is filled in from the dataset at runtime

  // loss
  Scalar alpha = 0.1;
  Scalar beta = 3.0;
  bool enable_adc = true;
  bool enable_cdc = true;
  bool neck = false;

  // optimizer: SGD + momentum, linear warmup then cosine decay
  Scalar base_lr = 0.0;  // 0 = auto: 0.008 * batch / 64
  Scalar weight_decay = 1e-4;
  Scalar warmup_frac = 0.05;
  Scalar final_lr_frac = 0.01;
  Scalar momentum = 0.9;
  std::size_t epochs = 30;

  // sampler
  std::size_t sampler_p = 4;
  std::size_t sampler_k = 4;

  std::uint64_t seed = 1;
  std::string data_root = "data";
  std::string out_dir = "out";
  std::size_t eval_period = 0;  // epochs between evals; 0 = final only

  SynthConfig synth;

  std::size_t batch_size() const { return sampler_p * sampler_k; }
  Scalar effective_base_lr() const {
    return base_lr > 0 ? base_lr
                       : 0.008 * static_cast<Scalar>(batch_size()) / 64.0;
  }
  void validate() const;  // throws ConfigError
};

// Line-oriented parse of a config file into cfg. Throws ConfigError on
// unknown keys, bad values, or out-of-range settings.
void load_config_file(RunConfig& cfg, const std::string& path);
// Parse a single "key=value" override (CLI --set).
void apply_override(RunConfig& cfg, const std::string& assignment);
// Canonical serialization covering every key (the checkpoint echo).
std::string serialize_config(const RunConfig& cfg);
// Parse from serialized text (checkpoint echo round trip).
void load_config_text(RunConfig& cfg, const std::string& text);

std::vector<std::string> config_keys();

}  // namespace pf
