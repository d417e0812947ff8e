#include "partformer/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <unordered_map>

namespace fs = std::filesystem;

namespace pf {

Scalar lr_at(std::size_t step, std::size_t total_steps, const RunConfig& cfg) {
  const Scalar base = cfg.effective_base_lr();
  const auto warmup = static_cast<std::size_t>(
      std::ceil(cfg.warmup_frac * static_cast<Scalar>(total_steps)));
  if (step < warmup) {
    return base * static_cast<Scalar>(step + 1) / static_cast<Scalar>(warmup);
  }
  const Scalar final_lr = base * cfg.final_lr_frac;
  if (total_steps <= warmup + 1) return final_lr;
  const Scalar t = static_cast<Scalar>(step - warmup) /
                   static_cast<Scalar>(total_steps - warmup - 1);
  return final_lr + (base - final_lr) * 0.5 * (1.0 + std::cos(M_PI * t));
}

SgdOptimizer::SgdOptimizer(ParamStore& params, Scalar momentum,
                           Scalar weight_decay)
    : params_(params), momentum_(momentum), weight_decay_(weight_decay) {
  for (const std::string& name : params.names()) {
    if (!params.trainable(name)) continue;
    names_.push_back(name);
    velocity_.emplace_back(params.at(name).numel(), 0.0);
  }
}

void SgdOptimizer::step(Scalar lr) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    Tensor& p = params_.at(names_[i]);
    if (!p.has_grad()) continue;  // parameter unused by this loss
    auto& v = velocity_[i];
    auto& val = p.data();
    const auto& g = p.grad();
    for (std::size_t j = 0; j < val.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j] + weight_decay_ * val[j];
      val[j] -= lr * v[j];
    }
  }
}

ModelBundle build_bundle(const RunConfig& cfg, std::size_t num_classes,
                         std::size_t num_cameras) {
  ModelBundle b;
  ModelConfig mc = cfg.model;
  mc.num_cameras = std::max<std::size_t>(1, num_cameras);
  b.model = std::make_unique<Model>(mc);
  b.num_classes = num_classes;
  const bool with_global = mc.enable_hdb ? mc.hdb_use_cls : true;
  const std::size_t parts = mc.enable_hdb ? mc.hdb_heads : 0;
  if (num_classes > 0) {
    b.bank = make_classifier_bank(b.model->params(), mc.dim, num_classes, parts,
                                  with_global);
    if (cfg.neck) b.neck = make_neck(b.model->params(), "neck", mc.dim);
  }
  return b;
}

std::string make_config_echo(const RunConfig& cfg, std::size_t num_classes,
                             std::size_t num_cameras) {
  std::ostringstream os;
  os << serialize_config(cfg);
  os << "runtime.num_classes = " << num_classes << "\n";
  os << "runtime.num_cameras = " << num_cameras << "\n";
  return os.str();
}

EchoInfo parse_config_echo(const std::string& text) {
  EchoInfo info;
  std::istringstream in(text);
  std::ostringstream plain;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("runtime.num_classes", 0) == 0) {
      info.num_classes = std::stoull(line.substr(line.find('=') + 1));
    } else if (line.rfind("runtime.num_cameras", 0) == 0) {
      info.num_cameras = std::stoull(line.substr(line.find('=') + 1));
    } else {
      plain << line << "\n";
    }
  }
  load_config_text(info.cfg, plain.str());
  return info;
}

namespace {

struct LoadedImage {
  ImageU8 u8;
};

// Decoded training images, keyed by path.
using ImageCache = std::unordered_map<std::string, ImageU8>;

Tensor batch_patches(const std::vector<const ImageU8*>& images,
                     const PatchifyConfig& pcfg, const PatchGrid& grid) {
  const std::size_t ppc = pcfg.patch * pcfg.patch * pcfg.channels;
  Tensor out = Tensor::zeros({images.size(), grid.m, ppc});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ImageU8& img = *images[i];
    if (img.height != pcfg.height || img.width != pcfg.width) {
      throw DataError("image is " + std::to_string(img.height) + "x" +
                      std::to_string(img.width) + ", model expects " +
                      std::to_string(pcfg.height) + "x" +
                      std::to_string(pcfg.width));
    }
    const std::vector<Scalar> norm = normalize_image(img);
    const std::vector<Scalar> patches = extract_patches(norm, pcfg);
    std::copy(patches.begin(), patches.end(),
              out.data().begin() + i * grid.m * ppc);
  }
  return out;
}

struct EvalFeatures {
  FeatureMatrix features;
  std::vector<int> ids, cams;
  std::vector<FeatureSet> sets;
};

EvalFeatures extract_eval_features(const Model& model,
                                   const std::vector<Sample>& samples,
                                   std::size_t batch_size) {
  NoGradGuard ng;
  const PatchifyConfig pcfg = model.config().patchify();
  const PatchGrid& grid = model.grid();
  EvalFeatures out;
  out.features.rows = samples.size();
  out.features.cols = model.config().dim;
  out.features.data.resize(samples.size() * model.config().dim);
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, samples.size() - start);
    std::vector<ImageU8> images(n);
    std::vector<const ImageU8*> ptrs(n);
    std::vector<int> cams(n);
    for (std::size_t i = 0; i < n; ++i) {
      images[i] = png_read(samples[start + i].path);
      ptrs[i] = &images[i];
      cams[i] = samples[start + i].cam;
    }
    Tensor patches = batch_patches(ptrs, pcfg, grid);
    FeatureSetBatch fsb = model.forward(patches, cams);
    std::vector<FeatureSet> sets = split_batch(fsb);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<Scalar> f = fuse(sets[i]);
      l2_normalize(f);
      std::copy(f.begin(), f.end(), out.features.row(start + i));
      out.sets.push_back(std::move(sets[i]));
    }
  }
  for (const Sample& s : samples) {
    out.ids.push_back(s.id);
    out.cams.push_back(s.cam);
  }
  return out;
}

EvalOutput run_eval(const Model& model, const DatasetScan& scan) {
  if (scan.query.empty() || scan.gallery.empty()) {
    throw DataError("evaluation needs non-empty query and gallery splits");
  }
  EvalFeatures q = extract_eval_features(model, scan.query, 32);
  EvalFeatures g = extract_eval_features(model, scan.gallery, 32);
  EvalOutput out;
  out.report = cmc_map(distance_matrix(q.features, g.features), q.ids, q.cams,
                       g.ids, g.cams);
  out.offdiag_gram = mean_offdiag_attention_gram(q.sets);
  out.num_query = q.ids.size();
  out.num_gallery = g.ids.size();
  return out;
}

LossWeights effective_weights(const RunConfig& cfg) {
  LossWeights w;
  w.alpha = cfg.enable_adc ? cfg.alpha : 0.0;
  w.beta = cfg.enable_cdc ? cfg.beta : 0.0;
  return w;
}

}  // namespace

TrainResult train_run(const RunConfig& cfg, std::ostream* log) {
  cfg.validate();
  DatasetScan scan = scan_dataset(cfg.data_root);
  if (scan.train.empty()) throw DataError("train split is empty");
  if (scan.num_classes < 2) {
    throw DataError("training needs at least 2 identities, found " +
                    std::to_string(scan.num_classes));
  }
  ModelBundle bundle = build_bundle(cfg, scan.num_classes, scan.num_cameras);
  Rng init_rng(mix_seed({cfg.seed, 0x1217}));
  bundle.model->init_params(init_rng);

  std::vector<int> labels(scan.train.size());
  for (std::size_t i = 0; i < scan.train.size(); ++i) {
    labels[i] = scan.class_of_id.at(scan.train[i].id);
  }
  PkSampler sampler(labels, cfg.sampler_p, cfg.sampler_k,
                    mix_seed({cfg.seed, 0x5a4e}));
  const std::size_t total_steps = cfg.epochs * sampler.batches_per_epoch();

  ImageCache cache;
  for (const Sample& s : scan.train) {
    if (!cache.count(s.path)) cache.emplace(s.path, png_read(s.path));
  }

  SgdOptimizer opt(bundle.model->params(), cfg.momentum, cfg.weight_decay);
  const LossWeights weights = effective_weights(cfg);
  const PatchifyConfig pcfg = cfg.model.patchify();
  const std::string echo =
      make_config_echo(cfg, scan.num_classes, scan.num_cameras);

  fs::create_directories(cfg.out_dir);
  TrainResult result;
  result.best_map = -1.0;
  const std::string best_path = (fs::path(cfg.out_dir) / "best.ckpt").string();
  const std::string final_path = (fs::path(cfg.out_dir) / "final.ckpt").string();

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : sampler.epoch_batches()) {
      Rng aug_rng(mix_seed({cfg.seed, 0xa06, step}));
      std::vector<ImageU8> augmented(batch.size());
      std::vector<const ImageU8*> ptrs(batch.size());
      std::vector<int> batch_labels(batch.size());
      std::vector<int> batch_cams(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const Sample& s = scan.train[batch[i]];
        augmented[i] = augment(cache.at(s.path), aug_rng);
        ptrs[i] = &augmented[i];
        batch_labels[i] = scan.class_of_id.at(s.id);
        batch_cams[i] = s.cam;
      }
      Tensor patches = batch_patches(ptrs, pcfg, bundle.model->grid());

      bundle.model->params().zero_grads();
      LossBreakdown loss;
      try {
        FeatureSetBatch fsb = bundle.model->forward(patches, batch_cams);
        loss = total_loss(fsb, batch_labels, bundle.bank, weights,
                          bundle.neck ? &*bundle.neck : nullptr,
                          /*training=*/true);
      } catch (const NumericError& e) {
        throw NumericError("numeric failure at step " + std::to_string(step) +
                           " (epoch " + std::to_string(epoch) + ", batch of " +
                           std::to_string(batch.size()) +
                           " samples): " + e.what());
      }
      const Scalar total = loss.total.item();
      if (!std::isfinite(total)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) +
                           " (epoch " + std::to_string(epoch) + ", batch of " +
                           std::to_string(batch.size()) + " samples)");
      }
      backward(loss.total);
      const Scalar lr = lr_at(step, total_steps, cfg);
      opt.step(lr);

      StepLog rec{step,           lr,        total, loss.global_term,
                  loss.part_term, loss.adc,  loss.cdc};
      result.curve.push_back(rec);
      if (log) {
        nlohmann::json j{{"step", step},
                         {"lr", lr},
                         {"loss", total},
                         {"global", loss.global_term},
                         {"part", loss.part_term},
                         {"adc", loss.adc},
                         {"cdc", loss.cdc}};
        (*log) << j.dump() << "\n";
      }
      ++step;
    }
    const bool last_epoch = epoch + 1 == cfg.epochs;
    if (cfg.eval_period > 0 && (epoch + 1) % cfg.eval_period == 0 &&
        !last_epoch) {
      EvalOutput ev = run_eval(*bundle.model, scan);
      if (log) {
        nlohmann::json j{{"epoch", epoch + 1},
                         {"map", ev.report.map},
                         {"rank1", ev.report.rank(1)},
                         {"offdiag_gram", ev.offdiag_gram}};
        (*log) << j.dump() << "\n";
      }
      if (ev.report.map > result.best_map) {
        result.best_map = ev.report.map;
        save_checkpoint(best_path, echo, step, bundle.model->params());
        result.best_ckpt = best_path;
      }
    }
  }

  save_checkpoint(final_path, echo, step, bundle.model->params());
  result.final_ckpt = final_path;
  result.final_eval = run_eval(*bundle.model, scan);
  if (result.final_eval.report.map > result.best_map) {
    result.best_map = result.final_eval.report.map;
    save_checkpoint(best_path, echo, step, bundle.model->params());
    result.best_ckpt = best_path;
  }
  if (log) {
    nlohmann::json j{{"final", true},
                     {"map", result.final_eval.report.map},
                     {"rank1", result.final_eval.report.rank(1)},
                     {"rank5", result.final_eval.report.rank(5)},
                     {"offdiag_gram", result.final_eval.offdiag_gram}};
    (*log) << j.dump() << "\n";
  }
  return result;
}

namespace {

ModelBundle bundle_from_checkpoint(const RunConfig& cfg, const Container& ckpt) {
  EchoInfo echo = parse_config_echo(ckpt.config_text);
  ModelBundle bundle = build_bundle(cfg, echo.num_classes, echo.num_cameras);
  load_checkpoint_into(ckpt, bundle.model->params());
  return bundle;
}

}  // namespace

EvalOutput evaluate_run(const RunConfig& cfg, const std::string& ckpt_path) {
  cfg.validate();
  Container ckpt = load_container(ckpt_path);
  ModelBundle bundle = bundle_from_checkpoint(cfg, ckpt);
  DatasetScan scan = scan_dataset(cfg.data_root);
  return run_eval(*bundle.model, scan);
}

ExtractResult extract_run(const RunConfig& cfg, const std::string& ckpt_path,
                          const std::vector<std::string>& image_paths,
                          const std::string& out_path) {
  cfg.validate();
  Container ckpt = load_container(ckpt_path);
  ModelBundle bundle = bundle_from_checkpoint(cfg, ckpt);
  const Model& model = *bundle.model;
  const PatchifyConfig pcfg = model.config().patchify();

  ExtractResult res;
  std::vector<std::vector<Scalar>> rows;
  std::vector<std::int64_t> ids, cams;
  NoGradGuard ng;
  for (const std::string& path : image_paths) {
    const std::string name = fs::path(path).filename().string();
    auto parsed = parse_market_name(name);
    if (!parsed) {
      res.failed.push_back(path + " (filename does not parse)");
      continue;
    }
    ImageU8 img;
    try {
      img = png_read(path);
    } catch (const DataError& e) {
      res.failed.push_back(path + " (" + e.what() + ")");
      continue;
    }
    std::vector<const ImageU8*> one{&img};
    Tensor patches;
    try {
      patches = batch_patches(one, pcfg, model.grid());
    } catch (const DataError& e) {
      res.failed.push_back(path + " (" + e.what() + ")");
      continue;
    }
    const int cam = parsed->second - 1;
    FeatureSetBatch fsb = model.forward(patches, {cam});
    std::vector<FeatureSet> sets = split_batch(fsb);
    std::vector<Scalar> f = fuse(sets[0]);
    l2_normalize(f);
    rows.push_back(std::move(f));
    ids.push_back(parsed->first);
    cams.push_back(cam);
  }

  Container out;
  out.config_text = ckpt.config_text;
  out.step = ckpt.step;
  NamedTensor feats;
  feats.name = "features";
  feats.dtype = DType::kF64;
  feats.shape = {rows.size(), model.config().dim};
  for (const auto& r : rows) feats.f64.insert(feats.f64.end(), r.begin(), r.end());
  out.tensors.push_back(std::move(feats));
  NamedTensor idt;
  idt.name = "ids";
  idt.dtype = DType::kI64;
  idt.shape = {ids.size()};
  idt.i64 = std::move(ids);
  out.tensors.push_back(std::move(idt));
  NamedTensor camt;
  camt.name = "cams";
  camt.dtype = DType::kI64;
  camt.shape = {cams.size()};
  camt.i64 = std::move(cams);
  out.tensors.push_back(std::move(camt));
  save_container(out_path, out);
  res.written = rows.size();
  return res;
}

GradCheckReport gradcheck_run(const RunConfig& cfg,
                              std::size_t coords_per_group,
                              bool corrupt_adjoint) {
  cfg.model.validate();
  constexpr std::size_t kClasses = 4;
  constexpr std::size_t kCameras = 2;
  ModelBundle bundle = build_bundle(cfg, kClasses, kCameras);
  Rng init_rng(mix_seed({cfg.seed, 0x1217}));
  bundle.model->init_params(init_rng);
  Model& model = *bundle.model;
  const PatchifyConfig pcfg = cfg.model.patchify();
  const PatchGrid& grid = model.grid();

  // Synthetic 2-image batch: two identities, two cameras.
  Rng data_rng(mix_seed({cfg.seed, 0xda7a}));
  const std::size_t ppc = pcfg.patch * pcfg.patch * 3;
  Tensor patches = data_rng.uniform_tensor({2, grid.m, ppc}, -1.0, 1.0);
  const std::vector<int> labels{0, 1};
  const std::vector<int> cams{0, 1};
  const LossWeights weights = effective_weights(cfg);

  auto loss_value = [&]() {
    FeatureSetBatch fsb = model.forward(patches, cams);
    return total_loss(fsb, labels, bundle.bank, weights,
                      bundle.neck ? &*bundle.neck : nullptr, true)
        .total;
  };

  // One backward pass records every adjoint.
  model.params().zero_grads();
  Tensor loss = loss_value();
  backward(loss);

  std::vector<std::pair<std::string, std::vector<Scalar>>> grads;
  for (const std::string& name : model.params().names()) {
    if (!model.params().trainable(name)) continue;
    Tensor& p = model.params().at(name);
    grads.emplace_back(name, p.has_grad()
                                 ? p.grad()
                                 : std::vector<Scalar>(p.numel(), 0.0));
  }
  if (corrupt_adjoint && !grads.empty()) {
    grads.front().second.front() += 1.0;
  }

  GradCheckReport report;
  const Scalar h = 1e-5;
  Rng coord_rng(mix_seed({cfg.seed, 0xc0cd}));
  bool first_group = true;
  for (auto& [name, ad] : grads) {
    Tensor& p = model.params().at(name);
    std::vector<std::size_t> coords(p.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > coords_per_group) {
      for (std::size_t i = 0; i < coords_per_group; ++i) {
        std::swap(coords[i], coords[i + coord_rng.index(coords.size() - i)]);
      }
      coords.resize(coords_per_group);
    }
    if (corrupt_adjoint && first_group) {
      coords[0] = 0;  // make sure the corrupted entry is audited
    }
    first_group = false;
    Scalar worst = 0;
    {
      NoGradGuard ng;
      for (std::size_t idx : coords) {
        const Scalar saved = p.data()[idx];
        p.data()[idx] = saved + h;
        const Scalar fp = loss_value().item();
        p.data()[idx] = saved - h;
        const Scalar fm = loss_value().item();
        p.data()[idx] = saved;
        const Scalar fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst,
                         std::abs(ad[idx] - fd) / std::max(1.0, std::abs(fd)));
      }
    }
    report.groups.emplace_back(name, worst);
    report.max_err = std::max(report.max_err, worst);
  }
  return report;
}

}  // namespace pf
