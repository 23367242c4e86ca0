#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "latentlab/tensor.hpp"

namespace latentlab {

// Attribute space of the procedural shape images. Cardinalities:
// count 3 (1..3 shapes), background 8, primary type 3 (disc/square/triangle),
// primary color 6, primary cell 16 (4x4 position grid).
struct Attributes {
  int count = 1;
  int background = 0;
  int primary_type = 0;
  int primary_color = 0;
  int primary_cell = 0;
};

inline constexpr std::array<int, 5> kAttributeCards = {3, 8, 3, 6, 16};
// Expected attribute-match fraction for independent uniform guesses:
// mean(1/3, 1/8, 1/3, 1/6, 1/16).
inline constexpr double kChanceConsistency =
    (1.0 / 3 + 1.0 / 8 + 1.0 / 3 + 1.0 / 6 + 1.0 / 16) / 5.0;

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kCondDim = 64;

struct DatasetItem {
  Attributes attrs;
  // distractors are strictly smaller shapes at cells >= 2 cells (Chebyshev)
  // from the primary; count-1 of them.
  std::vector<int> distractor_cells;
  std::vector<int> distractor_types;
  std::vector<int> distractor_colors;
};

// Deterministic procedural image stream: index -> (attributes, image).
// With a nonzero size cap, indices wrap (the same finite set revisited, for
// dataset-size ablations); cap 0 means the stream never repeats.
class SyntheticDataset {
 public:
  explicit SyntheticDataset(std::uint64_t seed, std::uint64_t size_cap = 0)
      : seed_(seed), cap_(size_cap) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t size_cap() const { return cap_; }
  std::uint64_t effective_index(std::uint64_t index) const {
    return cap_ == 0 ? index : index % cap_;
  }

  DatasetItem item(std::uint64_t index) const;
  Attributes attributes(std::uint64_t index) const { return item(index).attrs; }
  // [3, 32, 32] channel-major, values in [-1, 1].
  std::vector<float> image(std::uint64_t index) const;
  // Batch of images as a [n, 3, 32, 32] tensor.
  Tensor image_batch(std::uint64_t first_index, std::size_t n) const;

 private:
  std::uint64_t seed_;
  std::uint64_t cap_;
};

// Renders one item to [-1, 1] pixels (exposed for tests and probes).
std::vector<float> render_item(const DatasetItem& item);

// Fixed random projection of the one-hot attribute concatenation to a
// kCondDim vector. Independent of the dataset seed so every run shares one
// conditioning space.
Tensor cond_embedding(const Attributes& attrs);

// All background / shape palette colors as [-1, 1] RGB triples.
const std::array<std::array<float, 3>, 8>& background_palette();
const std::array<std::array<float, 3>, 6>& shape_palette();

}  // namespace latentlab
