#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "partformer/trainer.hpp"

namespace fs = std::filesystem;

namespace {

pf::RunConfig assemble_config(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
  pf::RunConfig cfg;
  if (!config_path.empty()) pf::load_config_file(cfg, config_path);
  for (const std::string& o : overrides) pf::apply_override(cfg, o);
  return cfg;
}

void print_eval(const pf::EvalOutput& ev) {
  std::cout << "queries: " << ev.num_query << "  gallery: " << ev.num_gallery
            << "  skipped: " << ev.report.skipped_queries << "\n";
  std::cout << "mAP:    " << ev.report.map << "\n";
  std::cout << "Rank-1: " << ev.report.rank(1) << "\n";
  std::cout << "Rank-5: " << ev.report.rank(5) << "\n";
  std::cout << "mean off-diagonal attention gram: " << ev.offdiag_gram << "\n";
}

void write_eval_json(const pf::EvalOutput& ev, const std::string& path) {
  nlohmann::json j;
  j["map"] = ev.report.map;
  j["rank1"] = ev.report.rank(1);
  j["rank5"] = ev.report.rank(5);
  j["num_query"] = ev.num_query;
  j["num_gallery"] = ev.num_gallery;
  j["skipped_queries"] = ev.report.skipped_queries;
  j["offdiag_attention_gram"] = ev.offdiag_gram;
  const std::size_t topk = std::min<std::size_t>(ev.report.cmc.size(), 50);
  j["cmc"] = std::vector<double>(ev.report.cmc.begin(),
                                 ev.report.cmc.begin() + topk);
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"PartFormer re-identification toolkit"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, list_path, out_path;
  std::vector<std::string> overrides;
  std::size_t gc_coords = 16;
  bool gc_corrupt = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (key = value lines)");
    cmd->add_option("--set", overrides, "override, e.g. --set optim.epochs=5");
  };

  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train);
  CLI::App* eval = app.add_subcommand("evaluate", "CMC/mAP retrieval eval");
  add_common(eval);
  eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  CLI::App* extract = app.add_subcommand("extract", "write a feature file");
  add_common(extract);
  extract->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  extract->add_option("--list", list_path, "text file of image paths")
      ->required();
  extract->add_option("--out", out_path, "output feature container");
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient audit");
  add_common(gradcheck);
  gradcheck->add_option("--coords", gc_coords, "coordinates per tensor");
  gradcheck->add_flag("--corrupt", gc_corrupt,
                      "deliberately corrupt one adjoint (self-test)");
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth);

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    pf::RunConfig cfg = assemble_config(config_path, overrides);
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    std::ofstream log((fs::path(cfg.out_dir) / "train_log.jsonl").string());
    pf::TrainResult res = pf::train_run(cfg, &log);
    std::cout << "steps: " << res.curve.size() << "\n";
    std::cout << "final checkpoint: " << res.final_ckpt << "\n";
    std::cout << "best checkpoint:  " << res.best_ckpt << "\n";
    print_eval(res.final_eval);
    write_eval_json(res.final_eval,
                    (fs::path(cfg.out_dir) / "eval_report.json").string());
    return 0;
  }
  if (eval->parsed()) {
    pf::RunConfig cfg = assemble_config(config_path, overrides);
    pf::EvalOutput ev = pf::evaluate_run(cfg, ckpt_path);
    print_eval(ev);
    fs::create_directories(cfg.out_dir);
    write_eval_json(ev, (fs::path(cfg.out_dir) / "eval_report.json").string());
    return 0;
  }
  if (extract->parsed()) {
    pf::RunConfig cfg = assemble_config(config_path, overrides);
    std::ifstream list(list_path);
    if (!list) throw pf::ConfigError("cannot open list file " + list_path);
    std::vector<std::string> paths;
    std::string line;
    while (std::getline(list, line)) {
      if (!line.empty()) paths.push_back(line);
    }
    if (out_path.empty()) {
      fs::create_directories(cfg.out_dir);
      out_path = (fs::path(cfg.out_dir) / "features.pfck").string();
    }
    pf::ExtractResult res = pf::extract_run(cfg, ckpt_path, paths, out_path);
    std::cout << "wrote " << res.written << " feature rows to " << out_path
              << "\n";
    for (const std::string& f : res.failed) {
      std::cerr << "skipped: " << f << "\n";
    }
    return res.failed.empty() ? 0 : 1;
  }
  if (gradcheck->parsed()) {
    pf::RunConfig cfg = assemble_config(config_path, overrides);
    pf::GradCheckReport rep = pf::gradcheck_run(cfg, gc_coords, gc_corrupt);
    for (const auto& [name, err] : rep.groups) {
      std::cout << name << "  max_rel_err=" << err << "\n";
    }
    std::cout << "overall max_rel_err=" << rep.max_err << "\n";
    if (rep.max_err > 1e-4) {
      std::cerr << "gradient check FAILED (tolerance 1e-4)\n";
      return 2;
    }
    std::cout << "gradient check passed\n";
    return 0;
  }
  if (synth->parsed()) {
    pf::RunConfig cfg = assemble_config(config_path, overrides);
    cfg.synth.validate();
    pf::synth_generate(cfg.synth, cfg.data_root);
    std::cout << "synthetic dataset written to " << cfg.data_root << "\n";
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const pf::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const pf::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
