#pragma once

#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "partformer/checkpoint.hpp"
#include "partformer/config.hpp"
#include "partformer/data.hpp"
#include "partformer/losses.hpp"
#include "partformer/metrics.hpp"

namespace pf {

// Linear warmup to the base rate, then cosine decay down to
// base * final_lr_frac.
Scalar lr_at(std::size_t step, std::size_t total_steps, const RunConfig& cfg);

class SgdOptimizer {
 public:
  SgdOptimizer(ParamStore& params, Scalar momentum, Scalar weight_decay);
  void step(Scalar lr);

 private:
  ParamStore& params_;
  std::vector<std::string> names_;
  std::vector<std::vector<Scalar>> velocity_;
  Scalar momentum_, weight_decay_;
};

// Model + classifiers + optional neck sharing one parameter store.
struct ModelBundle {
  std::unique_ptr<Model> model;
  ClassifierBank bank;
  std::optional<NeckParams> neck;
  std::size_t num_classes = 0;
};

ModelBundle build_bundle(const RunConfig& cfg, std::size_t num_classes,
                         std::size_t num_cameras);

// Config echo stored in checkpoints: the full serialized RunConfig plus
// runtime.num_classes / runtime.num_cameras lines.
std::string make_config_echo(const RunConfig& cfg, std::size_t num_classes,
                             std::size_t num_cameras);
struct EchoInfo {
  RunConfig cfg;
  std::size_t num_classes = 0;
  std::size_t num_cameras = 0;
};
EchoInfo parse_config_echo(const std::string& text);

struct StepLog {
  std::size_t step = 0;
  Scalar lr = 0, total = 0, global_term = 0, part_term = 0, adc = 0, cdc = 0;
};

struct EvalOutput {
  EvalReport report;
  Scalar offdiag_gram = 0;  // mean off-diagonal attention Gram on the query set
  std::size_t num_query = 0, num_gallery = 0;
};

struct TrainResult {
  std::vector<StepLog> curve;
  std::string final_ckpt;
  std::string best_ckpt;
  Scalar best_map = 0;
  EvalOutput final_eval;
};

// Full training run: PK batches, SGD with warmup+cosine schedule, per-step
// JSONL records to `log` when given, periodic evaluation, best/final
// checkpoints under cfg.out_dir.
TrainResult train_run(const RunConfig& cfg, std::ostream* log = nullptr);

EvalOutput evaluate_run(const RunConfig& cfg, const std::string& ckpt_path);

struct ExtractResult {
  std::size_t written = 0;
  std::vector<std::string> failed;  // unreadable or unparsable entries
};

// Extracts fused L2-normalized features for an image list into a PFCK
// container with tensors "features", "ids", "cams".
ExtractResult extract_run(const RunConfig& cfg, const std::string& ckpt_path,
                          const std::vector<std::string>& image_paths,
                          const std::string& out_path);

struct GradCheckReport {
  std::vector<std::pair<std::string, Scalar>> groups;  // name, max rel error
  Scalar max_err = 0;
};

// Central finite differences of the full objective on a synthetic 2-image
// batch against the recorded adjoints, a sampled coordinate subset per
// parameter tensor. corrupt_adjoint deliberately breaks one gradient entry
// (negative-control fixture).
GradCheckReport gradcheck_run(const RunConfig& cfg,
                              std::size_t coords_per_group = 16,
                              bool corrupt_adjoint = false);

}  // namespace pf
