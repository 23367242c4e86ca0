#include "latentlab/dataset.hpp"

#include <cmath>
#include <cstdlib>

#include "latentlab/rng.hpp"

namespace latentlab {

namespace {

constexpr int kGrid = 4;       // position cells per side
constexpr int kCell = 8;       // pixels per cell
constexpr int kPrimaryR = 5;   // primary shape half-extent, px
constexpr int kDistractR = 2;  // distractor half-extent, px

// Muted backgrounds vs saturated shape colors; the palettes share no entry,
// so a shape is visible on every background.
const std::array<std::array<float, 3>, 8> kBackgrounds = {{
    {-0.75f, -0.75f, -0.75f},  // near black
    {0.55f, 0.55f, 0.55f},     // light gray
    {-0.55f, -0.55f, 0.05f},   // navy
    {-0.55f, 0.00f, -0.55f},   // dark green
    {0.10f, -0.25f, -0.60f},   // brown
    {-0.15f, -0.60f, 0.00f},   // purple
    {-0.60f, 0.05f, 0.10f},    // teal
    {0.80f, 0.75f, 0.55f},     // cream
}};

const std::array<std::array<float, 3>, 6> kShapeColors = {{
    {1.0f, -0.80f, -0.80f},  // red
    {-0.80f, 1.0f, -0.80f},  // green
    {-0.60f, -0.60f, 1.0f},  // blue
    {1.0f, 1.0f, -0.80f},    // yellow
    {1.0f, -0.80f, 1.0f},    // magenta
    {-0.80f, 1.0f, 1.0f},    // cyan
}};

int cheby(int cell_a, int cell_b) {
  int ra = cell_a / kGrid, ca = cell_a % kGrid;
  int rb = cell_b / kGrid, cb = cell_b % kGrid;
  return std::max(std::abs(ra - rb), std::abs(ca - cb));
}

// True if the shape covers pixel offset (dx, dy) from its center.
bool covers(int type, int r, int dx, int dy) {
  switch (type) {
    case 0:  // disc
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::max(std::abs(dx), std::abs(dy)) <= r;
    default:  // upward triangle: apex at dy = -r, base at dy = +r
      return dy >= -r && dy <= r && 2 * std::abs(dx) <= dy + r;
  }
}

void paint(std::vector<float>& img, int cell, int type, int color_idx, int r) {
  const auto& col = kShapeColors[static_cast<std::size_t>(color_idx)];
  const int side = static_cast<int>(kImageSide);
  int cx = (cell % kGrid) * kCell + kCell / 2;
  int cy = (cell / kGrid) * kCell + kCell / 2;
  for (int y = std::max(0, cy - r); y <= std::min(side - 1, cy + r); ++y) {
    for (int x = std::max(0, cx - r); x <= std::min(side - 1, cx + r); ++x) {
      if (!covers(type, r, x - cx, y - cy)) continue;
      for (int c = 0; c < 3; ++c) {
        img[static_cast<std::size_t>(c) * kImageSide * kImageSide +
            static_cast<std::size_t>(y) * kImageSide +
            static_cast<std::size_t>(x)] = col[static_cast<std::size_t>(c)];
      }
    }
  }
}

}  // namespace

const std::array<std::array<float, 3>, 8>& background_palette() {
  return kBackgrounds;
}
const std::array<std::array<float, 3>, 6>& shape_palette() {
  return kShapeColors;
}

DatasetItem SyntheticDataset::item(std::uint64_t index) const {
  RngStream rng(seed_, effective_index(index));
  DatasetItem it;
  it.attrs.count = 1 + static_cast<int>(rng.uniform_int(3));
  it.attrs.background = static_cast<int>(rng.uniform_int(8));
  it.attrs.primary_type = static_cast<int>(rng.uniform_int(3));
  it.attrs.primary_color = static_cast<int>(rng.uniform_int(6));
  it.attrs.primary_cell = static_cast<int>(rng.uniform_int(16));
  for (int k = 0; k + 1 < it.attrs.count; ++k) {
    std::vector<int> allowed;
    for (int cell = 0; cell < kGrid * kGrid; ++cell) {
      if (cheby(cell, it.attrs.primary_cell) < 2) continue;
      bool used = false;
      for (int d : it.distractor_cells) used = used || d == cell;
      if (!used) allowed.push_back(cell);
    }
    it.distractor_cells.push_back(
        allowed[rng.uniform_int(allowed.size())]);
    it.distractor_types.push_back(static_cast<int>(rng.uniform_int(3)));
    it.distractor_colors.push_back(static_cast<int>(rng.uniform_int(6)));
  }
  return it;
}

std::vector<float> render_item(const DatasetItem& it) {
  std::vector<float> img(3 * kImageSide * kImageSide);
  const auto& bg = kBackgrounds[static_cast<std::size_t>(it.attrs.background)];
  for (int c = 0; c < 3; ++c) {
    float v = bg[static_cast<std::size_t>(c)];
    for (std::size_t p = 0; p < kImageSide * kImageSide; ++p) {
      img[static_cast<std::size_t>(c) * kImageSide * kImageSide + p] = v;
    }
  }
  paint(img, it.attrs.primary_cell, it.attrs.primary_type,
        it.attrs.primary_color, kPrimaryR);
  for (std::size_t k = 0; k < it.distractor_cells.size(); ++k) {
    paint(img, it.distractor_cells[k], it.distractor_types[k],
          it.distractor_colors[k], kDistractR);
  }
  return img;
}

std::vector<float> SyntheticDataset::image(std::uint64_t index) const {
  return render_item(item(index));
}

Tensor SyntheticDataset::image_batch(std::uint64_t first_index,
                                     std::size_t n) const {
  std::vector<float> data;
  data.reserve(n * 3 * kImageSide * kImageSide);
  for (std::size_t i = 0; i < n; ++i) {
    auto img = image(first_index + i);
    data.insert(data.end(), img.begin(), img.end());
  }
  return Tensor::from({n, 3, kImageSide, kImageSide}, std::move(data));
}

Tensor cond_embedding(const Attributes& attrs) {
  constexpr std::size_t kOneHot = 3 + 8 + 3 + 6 + 16;
  // One fixed projection shared by every dataset instance.
  static const std::vector<float> proj = [] {
    RngStream rng(0x436f6e64, 0);  // independent of any dataset seed
    std::vector<float> w(kOneHot * kCondDim);
    const double scale = 1.0 / std::sqrt(5.0);  // five active rows per item
    for (auto& v : w) v = static_cast<float>(rng.normal() * scale);
    return w;
  }();
  std::array<std::size_t, 5> hot = {
      static_cast<std::size_t>(attrs.count - 1),
      3 + static_cast<std::size_t>(attrs.background),
      3 + 8 + static_cast<std::size_t>(attrs.primary_type),
      3 + 8 + 3 + static_cast<std::size_t>(attrs.primary_color),
      3 + 8 + 3 + 6 + static_cast<std::size_t>(attrs.primary_cell)};
  std::vector<float> out(kCondDim, 0.0f);
  for (std::size_t row : hot) {
    for (std::size_t k = 0; k < kCondDim; ++k) {
      out[k] += proj[row * kCondDim + k];
    }
  }
  return Tensor::from({kCondDim}, std::move(out));
}

}  // namespace latentlab
