#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "partformer/image.hpp"
#include "partformer/tensor.hpp"

namespace pf {

// splitmix64-style combiner for deriving independent per-item RNG streams.
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

enum class Split { kTrain, kQuery, kGallery };

struct Sample {
  std::string path;
  int id = 0;   // raw identity from the filename; -1 marks junk
  int cam = 0;  // remapped to a contiguous 0-based index
  Split split = Split::kTrain;
};

// Market-style directory: root/{train,query,gallery}/<id>_c<cam>_<suffix>.png
struct DatasetScan {
  std::vector<Sample> train;
  std::vector<Sample> query;
  std::vector<Sample> gallery;
  std::map<int, int> class_of_id;  // train identity -> contiguous class index
  std::size_t num_classes = 0;
  std::size_t num_cameras = 0;
  std::vector<std::string> warnings;  // malformed / skipped files
};

// Parses "<id>_c<cam>_<suffix>.png"; returns (id, raw camera number).
std::optional<std::pair<int, int>> parse_market_name(const std::string& name);

DatasetScan scan_dataset(const std::string& root);

// ---- synthetic benchmark -----------------------------------------------------

// Identities are stacks of horizontal bands with per-identity colors and
// stripe textures; cameras apply a fixed per-channel tint; every image gets
// i.i.d. pixel noise. Deterministic for a fixed seed.
struct SynthConfig {
  std::size_t num_ids = 50;
  std::size_t cams = 4;
  std::size_t images_per_id_per_cam = 6;
  std::size_t height = 64;
  std::size_t width = 32;
  std::size_t parts_per_identity = 4;  // horizontal bands; must tile height
  Scalar camera_tint_strength = 0.25;
  Scalar noise_sigma = 12.0;  // in 8-bit pixel units
  std::size_t query_per_id_per_cam = 1;
  std::size_t gallery_per_id_per_cam = 2;
  std::uint64_t seed = 7;

  void validate() const;  // throws ConfigError
};

void synth_generate(const SynthConfig& cfg, const std::string& root);

// ---- augmentation --------------------------------------------------------------

struct EraseRect {
  std::size_t y, x, h, w;
};

ImageU8 flip_horizontal(const ImageU8& img);
// Pad by `pad` pixels (zero fill) and crop back to the original size at a
// random offset.
ImageU8 pad_random_crop(const ImageU8& img, std::size_t pad, Rng& rng);
// Random erasing: rectangle covering 2-20% of the image area, aspect ratio
// in [0.3, 3.3], filled with the per-channel image mean. Returns the rect
// actually erased, or nullopt when no geometry fit within 10 attempts.
std::optional<EraseRect> random_erase(ImageU8& img, Rng& rng);

// flip(p=0.5) -> pad 4 + random crop -> erase(p=0.5).
ImageU8 augment(const ImageU8& img, Rng& rng);

// ---- PK batch sampling -----------------------------------------------------------

// Yields batches of P distinct identities x K instances. Identities with
// fewer than K images are sampled with replacement. Every identity appears
// at least once per epoch. Deterministic for (seed, epoch).
class PkSampler {
 public:
  PkSampler(std::vector<int> class_labels, std::size_t p, std::size_t k,
            std::uint64_t seed);

  // Sample indices grouped into batches for the next epoch.
  std::vector<std::vector<std::size_t>> epoch_batches();
  std::size_t batches_per_epoch() const;
  std::size_t batch_size() const { return p_ * k_; }

 private:
  std::vector<std::vector<std::size_t>> by_class_;
  std::size_t p_, k_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
};

}  // namespace pf
