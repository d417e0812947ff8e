#include "partformer/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace pf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out{};
  const auto* end = v.data() + v.size();
  auto res = std::from_chars(v.data(), end, out);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  return parse_size(key, v);
}

Scalar parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const Scalar out = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(out)) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::string fmt_real(Scalar v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

#define SIZE_FIELD(NAME, REF)                                              \
  Field {                                                                  \
    NAME, [](RunConfig& c, const std::string& v) { c.REF = parse_size(NAME, v); }, \
        [](const RunConfig& c) { return std::to_string(c.REF); }           \
  }
#define REAL_FIELD(NAME, REF)                                              \
  Field {                                                                  \
    NAME, [](RunConfig& c, const std::string& v) { c.REF = parse_real(NAME, v); }, \
        [](const RunConfig& c) { return fmt_real(c.REF); }                 \
  }
#define BOOL_FIELD(NAME, REF)                                              \
  Field {                                                                  \
    NAME, [](RunConfig& c, const std::string& v) { c.REF = parse_bool(NAME, v); }, \
        [](const RunConfig& c) { return c.REF ? "true" : "false"; }        \
  }
#define STR_FIELD(NAME, REF)                                              \
  Field {                                                                 \
    NAME, [](RunConfig& c, const std::string& v) { c.REF = v; },          \
        [](const RunConfig& c) { return c.REF; }                          \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      SIZE_FIELD("model.dim", model.dim),
      SIZE_FIELD("model.blocks", model.blocks),
      SIZE_FIELD("model.heads", model.heads),
      SIZE_FIELD("model.hdb_heads", model.hdb_heads),
      SIZE_FIELD("model.patch", model.patch),
      SIZE_FIELD("model.stride", model.stride),
      SIZE_FIELD("model.height", model.height),
      SIZE_FIELD("model.width", model.width),
      REAL_FIELD("model.sie_weight", model.sie_weight),
      BOOL_FIELD("flags.enable_hdb", model.enable_hdb),
      BOOL_FIELD("flags.hdb_residual", model.hdb_residual),
      BOOL_FIELD("flags.hdb_ffn", model.hdb_ffn),
      BOOL_FIELD("flags.hdb_use_cls", model.hdb_use_cls),
      BOOL_FIELD("flags.enable_adc", enable_adc),
      BOOL_FIELD("flags.enable_cdc", enable_cdc),
      BOOL_FIELD("flags.neck", neck),
      REAL_FIELD("loss.alpha", alpha),
      REAL_FIELD("loss.beta", beta),
      REAL_FIELD("optim.base_lr", base_lr),
      REAL_FIELD("optim.weight_decay", weight_decay),
      REAL_FIELD("optim.warmup_frac", warmup_frac),
      REAL_FIELD("optim.final_lr_frac", final_lr_frac),
      REAL_FIELD("optim.momentum", momentum),
      SIZE_FIELD("optim.epochs", epochs),
      SIZE_FIELD("sampler.p", sampler_p),
      SIZE_FIELD("sampler.k", sampler_k),
      Field{"seed",
            [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
            [](const RunConfig& c) { return std::to_string(c.seed); }},
      STR_FIELD("data.root", data_root),
      STR_FIELD("out.dir", out_dir),
      SIZE_FIELD("eval.period", eval_period),
      SIZE_FIELD("synth.num_ids", synth.num_ids),
      SIZE_FIELD("synth.cams", synth.cams),
      SIZE_FIELD("synth.images_per_id_per_cam", synth.images_per_id_per_cam),
      SIZE_FIELD("synth.height", synth.height),
      SIZE_FIELD("synth.width", synth.width),
      SIZE_FIELD("synth.parts_per_identity", synth.parts_per_identity),
      REAL_FIELD("synth.camera_tint_strength", synth.camera_tint_strength),
      REAL_FIELD("synth.noise_sigma", synth.noise_sigma),
      SIZE_FIELD("synth.query_per_id_per_cam", synth.query_per_id_per_cam),
      SIZE_FIELD("synth.gallery_per_id_per_cam", synth.gallery_per_id_per_cam),
      Field{"synth.seed",
            [](RunConfig& c, const std::string& v) {
              c.synth.seed = parse_u64("synth.seed", v);
            },
            [](const RunConfig& c) { return std::to_string(c.synth.seed); }},
  };
  return f;
}

#undef SIZE_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD
#undef STR_FIELD

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const Field& f : fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void load_lines(RunConfig& cfg, std::istream& in, const std::string& origin) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected 'key = value'");
    }
    set_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (alpha < 0) throw ConfigError("loss.alpha must be >= 0");
  if (beta < 0) throw ConfigError("loss.beta must be >= 0");
  if (base_lr < 0) throw ConfigError("optim.base_lr must be >= 0");
  if (weight_decay < 0) throw ConfigError("optim.weight_decay must be >= 0");
  if (warmup_frac < 0 || warmup_frac >= 1) {
    throw ConfigError("optim.warmup_frac must be in [0, 1)");
  }
  if (final_lr_frac < 0 || final_lr_frac > 1) {
    throw ConfigError("optim.final_lr_frac must be in [0, 1]");
  }
  if (momentum < 0 || momentum >= 1) {
    throw ConfigError("optim.momentum must be in [0, 1)");
  }
  if (epochs < 1) throw ConfigError("optim.epochs must be >= 1");
  if (sampler_p < 1 || sampler_k < 1) {
    throw ConfigError("sampler.p and sampler.k must be >= 1");
  }
  if (sampler_p < 2) {
    throw ConfigError("sampler.p must be >= 2 so batches contain negatives");
  }
  if (data_root.empty()) throw ConfigError("data.root must be set");
  if (out_dir.empty()) throw ConfigError("out.dir must be set");
  synth.validate();
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  load_lines(cfg, in, path);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const Field& f : fields()) {
    os << f.key << " = " << f.get(cfg) << "\n";
  }
  return os.str();
}

void load_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  load_lines(cfg, in, "<config echo>");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace pf
