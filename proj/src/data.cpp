#include "partformer/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <regex>
#include <set>
#include <tuple>

namespace fs = std::filesystem;

namespace pf {

std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (std::uint64_t p : parts) {
    std::uint64_t z = h + 0x9e3779b97f4a7c15ULL + p;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    h = z ^ (z >> 31);
  }
  return h;
}

std::optional<std::pair<int, int>> parse_market_name(const std::string& name) {
  static const std::regex re(R"(^(-?\d+)_c(\d+)_(.+)\.png$)");
  std::smatch m;
  if (!std::regex_match(name, m, re)) return std::nullopt;
  try {
    return std::make_pair(std::stoi(m[1].str()), std::stoi(m[2].str()));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

DatasetScan scan_dataset(const std::string& root) {
  DatasetScan scan;
  const std::pair<const char*, Split> dirs[] = {
      {"train", Split::kTrain}, {"query", Split::kQuery},
      {"gallery", Split::kGallery}};
  std::set<int> train_ids;
  int max_cam = -1;
  for (const auto& [sub, split] : dirs) {
    const fs::path dir = fs::path(root) / sub;
    if (!fs::is_directory(dir)) {
      throw DataError("dataset split directory missing: " + dir.string());
    }
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file()) names.push_back(entry.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    for (const std::string& name : names) {
      auto parsed = parse_market_name(name);
      if (!parsed) {
        scan.warnings.push_back("skipped malformed filename: " +
                                (dir / name).string());
        continue;
      }
      auto [id, raw_cam] = *parsed;
      if (raw_cam < 1) {
        scan.warnings.push_back("skipped non-positive camera id: " +
                                (dir / name).string());
        continue;
      }
      if (split == Split::kTrain && id == -1) {
        scan.warnings.push_back("skipped junk id in train split: " +
                                (dir / name).string());
        continue;
      }
      Sample s;
      s.path = (dir / name).string();
      s.id = id;
      s.cam = raw_cam - 1;  // Market camera names are 1-based
      s.split = split;
      max_cam = std::max(max_cam, s.cam);
      switch (split) {
        case Split::kTrain:
          train_ids.insert(id);
          scan.train.push_back(std::move(s));
          break;
        case Split::kQuery:
          scan.query.push_back(std::move(s));
          break;
        case Split::kGallery:
          scan.gallery.push_back(std::move(s));
          break;
      }
    }
  }
  int next = 0;
  for (int id : train_ids) scan.class_of_id[id] = next++;
  scan.num_classes = train_ids.size();
  scan.num_cameras = static_cast<std::size_t>(max_cam + 1);
  return scan;
}

// ---- synthetic benchmark --------------------------------------------------------

void SynthConfig::validate() const {
  if (num_ids < 1 || cams < 1 || images_per_id_per_cam < 1 ||
      query_per_id_per_cam < 1 || gallery_per_id_per_cam < 1) {
    throw ConfigError("synth: all counts must be >= 1");
  }
  if (height < 8 || width < 8) throw ConfigError("synth: image too small");
  if (parts_per_identity < 1 || height % parts_per_identity != 0) {
    throw ConfigError("synth: parts_per_identity must tile the image height");
  }
  if (camera_tint_strength < 0 || camera_tint_strength >= 1.0) {
    throw ConfigError("synth: camera_tint_strength must be in [0, 1)");
  }
  if (noise_sigma < 0) throw ConfigError("synth: noise_sigma must be >= 0");
}

namespace {

struct BandStyle {
  Scalar color[3];
  std::size_t stripe_period;
  std::size_t stripe_phase;
};

struct IdentityStyle {
  std::vector<BandStyle> bands;
};

std::uint8_t clamp_u8(Scalar v) {
  return static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, std::round(v))));
}

}  // namespace

void synth_generate(const SynthConfig& cfg, const std::string& root) {
  cfg.validate();
  // Appearance of every identity and camera, drawn in a fixed order.
  Rng style_rng(mix_seed({cfg.seed, 0xa11ce}));
  std::vector<IdentityStyle> ids(cfg.num_ids);
  const std::size_t periods[] = {4, 6, 8};
  for (auto& ident : ids) {
    ident.bands.resize(cfg.parts_per_identity);
    for (auto& band : ident.bands) {
      for (Scalar& ch : band.color) ch = style_rng.uniform(40.0, 215.0);
      band.stripe_period = periods[style_rng.index(3)];
      band.stripe_phase = style_rng.index(band.stripe_period);
    }
  }
  std::vector<std::array<Scalar, 3>> tints(cfg.cams);
  for (auto& t : tints) {
    for (Scalar& ch : t) {
      ch = style_rng.uniform(1.0 - cfg.camera_tint_strength,
                             1.0 + cfg.camera_tint_strength);
    }
  }

  const std::size_t band_h = cfg.height / cfg.parts_per_identity;
  auto render = [&](std::size_t id, std::size_t cam, std::size_t k,
                    std::size_t split_tag) {
    Rng noise(mix_seed({cfg.seed, split_tag, id, cam, k}));
    ImageU8 img;
    img.height = cfg.height;
    img.width = cfg.width;
    img.rgb.resize(cfg.height * cfg.width * 3);
    for (std::size_t y = 0; y < cfg.height; ++y) {
      const BandStyle& band = ids[id].bands[y / band_h];
      const bool lit =
          ((y + band.stripe_phase) % band.stripe_period) < band.stripe_period / 2;
      const Scalar stripe = lit ? 1.0 : 0.6;
      for (std::size_t x = 0; x < cfg.width; ++x) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          Scalar v = band.color[ch] * stripe * tints[cam][ch];
          if (cfg.noise_sigma > 0) v += noise.normal(0.0, cfg.noise_sigma);
          img.at(y, x, ch) = clamp_u8(v);
        }
      }
    }
    return img;
  };

  const std::tuple<const char*, std::size_t, std::size_t> splits[] = {
      {"train", 0, cfg.images_per_id_per_cam},
      {"query", 1, cfg.query_per_id_per_cam},
      {"gallery", 2, cfg.gallery_per_id_per_cam}};
  for (const auto& [sub, tag, count] : splits) {
    const fs::path dir = fs::path(root) / sub;
    fs::create_directories(dir);
    for (std::size_t id = 0; id < cfg.num_ids; ++id) {
      for (std::size_t cam = 0; cam < cfg.cams; ++cam) {
        for (std::size_t k = 0; k < count; ++k) {
          char name[64];
          std::snprintf(name, sizeof(name), "%04zu_c%zu_%06zu.png", id, cam + 1,
                        k);
          png_write((dir / name).string(), render(id, cam, k, tag));
        }
      }
    }
  }
}

// ---- augmentation ----------------------------------------------------------------

ImageU8 flip_horizontal(const ImageU8& img) {
  ImageU8 out = img;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        out.at(y, x, ch) = img.at(y, img.width - 1 - x, ch);
      }
    }
  }
  return out;
}

ImageU8 pad_random_crop(const ImageU8& img, std::size_t pad, Rng& rng) {
  const std::size_t dy = rng.index(2 * pad + 1);
  const std::size_t dx = rng.index(2 * pad + 1);
  ImageU8 out;
  out.height = img.height;
  out.width = img.width;
  out.rgb.assign(img.rgb.size(), 0);
  // Reading the padded image at offset (dy, dx) == shifting by (pad - dy).
  for (std::size_t y = 0; y < img.height; ++y) {
    const long sy = static_cast<long>(y + dy) - static_cast<long>(pad);
    if (sy < 0 || sy >= static_cast<long>(img.height)) continue;
    for (std::size_t x = 0; x < img.width; ++x) {
      const long sx = static_cast<long>(x + dx) - static_cast<long>(pad);
      if (sx < 0 || sx >= static_cast<long>(img.width)) continue;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        out.at(y, x, ch) = img.at(static_cast<std::size_t>(sy),
                                  static_cast<std::size_t>(sx), ch);
      }
    }
  }
  return out;
}

std::optional<EraseRect> random_erase(ImageU8& img, Rng& rng) {
  const Scalar area = static_cast<Scalar>(img.height * img.width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const Scalar target = rng.uniform(0.02, 0.2) * area;
    const Scalar aspect = rng.uniform(0.3, 3.3);
    const auto rh = static_cast<std::size_t>(std::round(std::sqrt(target * aspect)));
    const auto rw = static_cast<std::size_t>(std::round(std::sqrt(target / aspect)));
    if (rh < 1 || rw < 1 || rh > img.height || rw > img.width) continue;
    const Scalar frac = static_cast<Scalar>(rh * rw) / area;
    if (frac < 0.02 || frac > 0.2) continue;  // rounding pushed it out of range
    EraseRect r;
    r.h = rh;
    r.w = rw;
    r.y = rng.index(img.height - rh + 1);
    r.x = rng.index(img.width - rw + 1);
    Scalar mean[3] = {0, 0, 0};
    for (std::size_t p = 0; p < img.height * img.width; ++p) {
      for (std::size_t ch = 0; ch < 3; ++ch) mean[ch] += img.rgb[p * 3 + ch];
    }
    for (std::size_t ch = 0; ch < 3; ++ch) mean[ch] /= area;
    for (std::size_t y = r.y; y < r.y + r.h; ++y) {
      for (std::size_t x = r.x; x < r.x + r.w; ++x) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          img.at(y, x, ch) = clamp_u8(mean[ch]);
        }
      }
    }
    return r;
  }
  return std::nullopt;
}

ImageU8 augment(const ImageU8& img, Rng& rng) {
  ImageU8 out = rng.uniform(0.0, 1.0) < 0.5 ? flip_horizontal(img) : img;
  out = pad_random_crop(out, 4, rng);
  if (rng.uniform(0.0, 1.0) < 0.5) random_erase(out, rng);
  return out;
}

// ---- PK sampling -------------------------------------------------------------------

namespace {

template <typename T>
void fisher_yates(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.index(i)]);
  }
}

}  // namespace

PkSampler::PkSampler(std::vector<int> class_labels, std::size_t p,
                     std::size_t k, std::uint64_t seed)
    : p_(p), k_(k), seed_(seed) {
  if (p < 1 || k < 1) throw ConfigError("pk sampler: P and K must be >= 1");
  int max_class = -1;
  for (int c : class_labels) max_class = std::max(max_class, c);
  by_class_.resize(max_class + 1);
  for (std::size_t i = 0; i < class_labels.size(); ++i) {
    if (class_labels[i] < 0) throw ContractError("pk sampler: negative class");
    by_class_[class_labels[i]].push_back(i);
  }
  std::erase_if(by_class_, [](const auto& v) { return v.empty(); });
  if (by_class_.size() < p_) {
    throw ConfigError("pk sampler: need at least P=" + std::to_string(p_) +
                      " identities, dataset has " +
                      std::to_string(by_class_.size()));
  }
}

std::size_t PkSampler::batches_per_epoch() const {
  return (by_class_.size() + p_ - 1) / p_;
}

std::vector<std::vector<std::size_t>> PkSampler::epoch_batches() {
  Rng rng(mix_seed({seed_, 0xba7c4, epoch_}));
  ++epoch_;
  std::vector<std::size_t> cls_order(by_class_.size());
  for (std::size_t i = 0; i < cls_order.size(); ++i) cls_order[i] = i;
  fisher_yates(cls_order, rng);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < cls_order.size(); start += p_) {
    std::vector<std::size_t> group(
        cls_order.begin() + start,
        cls_order.begin() + std::min(start + p_, cls_order.size()));
    // Pad a short tail group with identities not already in it.
    while (group.size() < p_) {
      const std::size_t cand = cls_order[rng.index(cls_order.size())];
      if (std::find(group.begin(), group.end(), cand) == group.end()) {
        group.push_back(cand);
      }
    }
    std::vector<std::size_t> batch;
    batch.reserve(p_ * k_);
    for (std::size_t cls : group) {
      const auto& pool = by_class_[cls];
      if (pool.size() >= k_) {
        std::vector<std::size_t> picks = pool;
        fisher_yates(picks, rng);
        batch.insert(batch.end(), picks.begin(), picks.begin() + k_);
      } else {
        for (std::size_t j = 0; j < k_; ++j) {
          batch.push_back(pool[rng.index(pool.size())]);
        }
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace pf
