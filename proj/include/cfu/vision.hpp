#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <queue>
#include <span>
#include <vector>

#include "cfu/error.hpp"
#include "cfu/image.hpp"
#include "cfu/types.hpp"

namespace cfu::vision {

/// Axis-aligned box in continuous pixel coordinates (pixel (x, y) spans
/// [x, x+1) x [y, y+1)).
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;
  double score = 1.0;
  ColonyClass cls = ColonyClass::unknown;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  bool is_valid() const { return x_min < x_max && y_min < y_max; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Linear-decay soft-NMS gated at `iou_threshold`. Boxes are selected in
/// descending current score (ties: lower input index first); every later box
/// overlapping the selection by more than the gate is scaled by (1 - IoU).
/// Survivors are returned in selection order with their decayed scores.
inline std::vector<Box> soft_nms(std::vector<Box> boxes, double iou_threshold = 0.4, double score_floor = 0.05) {
  require(iou_threshold >= 0.0 && iou_threshold <= 1.0, "iou_threshold", "must be in [0, 1]");
  for (const auto& b : boxes) {
    require(b.score >= 0.0 && b.score <= 1.0, "score", "must be in [0, 1]");
    require(b.is_valid(), "box", "requires x_min < x_max and y_min < y_max");
  }
  std::vector<Box> out;
  out.reserve(boxes.size());
  std::vector<bool> taken(boxes.size(), false);
  for (std::size_t round = 0; round < boxes.size(); ++round) {
    std::size_t best = boxes.size();
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (!taken[i] && (best == boxes.size() || boxes[i].score > boxes[best].score)) best = i;
    }
    taken[best] = true;
    const Box& sel = boxes[best];
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (taken[i]) continue;
      const double overlap = iou(sel, boxes[i]);
      if (overlap > iou_threshold) boxes[i].score *= 1.0 - overlap;
    }
    out.push_back(sel);
  }
  std::erase_if(out, [&](const Box& b) { return b.score < score_floor; });
  return out;
}

// ---------------------------------------------------------------------------
// Quality statistics
// ---------------------------------------------------------------------------

/// Fraction of the shorter side used as the analysis disc for blur, glare
/// and speckle. Contrast is measured over the whole frame.
inline constexpr double kAnalysisFraction = 0.42;
inline constexpr int kGlareCutoff = 250;

struct QualityStats {
  double blur_metric = 0.0;     // variance of the 4-neighbour Laplacian
  double glare_fraction = 0.0;  // share of pixels >= 250
  double speckle_energy = 0.0;  // mean squared residual against a 3x3 box mean
  double contrast = 0.0;        // 95th minus 5th percentile intensity
};

inline void validate_image(const GrayImage& img, int min_side = 64) {
  require(img.width >= min_side && img.height >= min_side, "image",
          "side must be >= " + std::to_string(min_side) + " px");
  require(img.size() == static_cast<std::size_t>(img.width) * img.height, "image",
          "expected one 8-bit sample per pixel");
}

/// Nearest-rank percentile of a 256-bin histogram.
inline int histogram_percentile(const std::array<std::uint64_t, 256>& hist, std::uint64_t total, double p) {
  const auto rank = static_cast<std::uint64_t>(std::ceil(p * static_cast<double>(total)));
  std::uint64_t cum = 0;
  for (int v = 0; v < 256; ++v) {
    cum += hist[v];
    if (cum >= std::max<std::uint64_t>(rank, 1)) return v;
  }
  return 255;
}

inline QualityStats quality_stats(const GrayImage& img) {
  validate_image(img);
  const Disc disc = Disc::centered(img, kAnalysisFraction);
  QualityStats st;

  double lap_sum = 0.0, lap_sq = 0.0, speck = 0.0;
  std::uint64_t n_inner = 0, n_disc = 0, n_glare = 0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (!disc.contains_pixel(x, y)) continue;
      ++n_disc;
      if (img.at(x, y) >= kGlareCutoff) ++n_glare;
      if (x == 0 || y == 0 || x == img.width - 1 || y == img.height - 1) continue;
      const double c = img.at(x, y);
      const double lap = static_cast<double>(img.at(x - 1, y)) + img.at(x + 1, y) + img.at(x, y - 1) +
                         img.at(x, y + 1) - 4.0 * c;
      lap_sum += lap;
      lap_sq += lap * lap;
      double box = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) box += img.at(x + dx, y + dy);
      const double resid = c - box / 9.0;
      speck += resid * resid;
      ++n_inner;
    }
  }
  if (n_inner > 0) {
    const double mean = lap_sum / static_cast<double>(n_inner);
    st.blur_metric = std::max(0.0, lap_sq / static_cast<double>(n_inner) - mean * mean);
    st.speckle_energy = speck / static_cast<double>(n_inner);
  }
  st.glare_fraction = n_disc > 0 ? static_cast<double>(n_glare) / static_cast<double>(n_disc) : 0.0;

  std::array<std::uint64_t, 256> hist{};
  for (auto v : img.pixels) ++hist[v];
  st.contrast = histogram_percentile(hist, img.size(), 0.95) - histogram_percentile(hist, img.size(), 0.05);
  return st;
}

// ---------------------------------------------------------------------------
// Connected components
// ---------------------------------------------------------------------------

struct Pixel {
  int x = 0;
  int y = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

struct Component {
  std::vector<Pixel> pixels;

  std::size_t area() const { return pixels.size(); }

  Box bbox() const {
    Box b{std::numeric_limits<double>::max(), std::numeric_limits<double>::max(),
          std::numeric_limits<double>::lowest(), std::numeric_limits<double>::lowest(), 1.0, ColonyClass::unknown};
    for (const auto& p : pixels) {
      b.x_min = std::min<double>(b.x_min, p.x);
      b.y_min = std::min<double>(b.y_min, p.y);
      b.x_max = std::max<double>(b.x_max, p.x + 1);
      b.y_max = std::max<double>(b.y_max, p.y + 1);
    }
    return b;
  }

  /// Centroid of pixel centers.
  std::pair<double, double> centroid() const {
    double sx = 0.0, sy = 0.0;
    for (const auto& p : pixels) {
      sx += p.x + 0.5;
      sy += p.y + 0.5;
    }
    const double n = static_cast<double>(std::max<std::size_t>(pixels.size(), 1));
    return {sx / n, sy / n};
  }

  double mean_intensity(const GrayImage& img) const {
    double s = 0.0;
    for (const auto& p : pixels) s += img.at(p.x, p.y);
    return pixels.empty() ? 0.0 : s / static_cast<double>(pixels.size());
  }
};

inline constexpr std::array<std::array<int, 2>, 8> kNeighbors8{
    {{-1, -1}, {0, -1}, {1, -1}, {-1, 0}, {1, 0}, {-1, 1}, {0, 1}, {1, 1}}};

/// 8-connected components of pixels strictly darker than `threshold` whose
/// centers lie inside `roi`. Components are ordered by their first pixel in
/// raster order.
inline std::vector<Component> segment_components(const GrayImage& img, int threshold, const Disc& roi) {
  validate_image(img, 1);
  const int w = img.width, h = img.height;
  std::vector<std::uint8_t> fg(img.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) fg[static_cast<std::size_t>(y) * w + x] = img.at(x, y) < threshold && roi.contains_pixel(x, y);

  std::vector<Component> out;
  std::vector<Pixel> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto& seed = fg[static_cast<std::size_t>(y) * w + x];
      if (!seed) continue;
      seed = 0;
      Component comp;
      stack.push_back({x, y});
      while (!stack.empty()) {
        const Pixel p = stack.back();
        stack.pop_back();
        comp.pixels.push_back(p);
        for (const auto& [dx, dy] : kNeighbors8) {
          const int nx = p.x + dx, ny = p.y + dy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          auto& f = fg[static_cast<std::size_t>(ny) * w + nx];
          if (f) {
            f = 0;
            stack.push_back({nx, ny});
          }
        }
      }
      std::sort(comp.pixels.begin(), comp.pixels.end(),
                [](const Pixel& a, const Pixel& b) { return a.y != b.y ? a.y < b.y : a.x < b.x; });
      out.push_back(std::move(comp));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distance transform and peaks
// ---------------------------------------------------------------------------

/// Exact squared Euclidean distance from each foreground pixel to the nearest
/// background pixel (Felzenszwalb-Huttenlocher lower envelope). Everything
/// outside the grid counts as background. Values are exact integers.
inline std::vector<double> squared_distance_transform(std::span<const std::uint8_t> mask, int w, int h) {
  const int pw = w + 2, ph = h + 2;
  constexpr double kInf = 1e20;
  std::vector<double> f(static_cast<std::size_t>(pw) * ph, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask[static_cast<std::size_t>(y) * w + x]) f[static_cast<std::size_t>(y + 1) * pw + x + 1] = kInf;

  auto pass = [](std::vector<double>& line) {
    const int n = static_cast<int>(line.size());
    std::vector<double> d(n);
    std::vector<int> v(n);
    std::vector<double> z(n + 1);
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    auto meet = [&](int q, int p) {
      return ((line[q] + static_cast<double>(q) * q) - (line[p] + static_cast<double>(p) * p)) / (2.0 * (q - p));
    };
    for (int q = 1; q < n; ++q) {
      double s = meet(q, v[k]);
      while (s <= z[k]) {
        --k;
        s = meet(q, v[k]);
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
      while (z[k + 1] < q) ++k;
      const double dq = q - v[k];
      d[q] = dq * dq + line[v[k]];
    }
    line = std::move(d);
  };

  std::vector<double> line;
  for (int x = 0; x < pw; ++x) {
    line.resize(ph);
    for (int y = 0; y < ph; ++y) line[y] = f[static_cast<std::size_t>(y) * pw + x];
    pass(line);
    for (int y = 0; y < ph; ++y) f[static_cast<std::size_t>(y) * pw + x] = line[y];
  }
  for (int y = 0; y < ph; ++y) {
    line.assign(f.begin() + static_cast<std::ptrdiff_t>(y) * pw, f.begin() + static_cast<std::ptrdiff_t>(y + 1) * pw);
    pass(line);
    std::copy(line.begin(), line.end(), f.begin() + static_cast<std::ptrdiff_t>(y) * pw);
  }

  std::vector<double> out(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out[static_cast<std::size_t>(y) * w + x] = f[static_cast<std::size_t>(y + 1) * pw + x + 1];
  return out;
}

struct Peak {
  double x = 0.0;  // plateau centroid, pixel-center coordinates
  double y = 0.0;
  double sq_height = 0.0;
  std::vector<Pixel> plateau;
};

/// Regional maxima of a squared-distance field (8-connected plateaus with no
/// strictly higher neighbour) at least `min_sq_height` high, thinned by
/// non-maximum suppression: peaks are visited by descending height (ties in
/// raster order of their first pixel) and dropped when within `nms_radius`
/// of an already accepted peak.
inline std::vector<Peak> find_peaks(std::span<const double> field, int w, int h, double min_sq_height,
                                    double nms_radius) {
  std::vector<std::uint8_t> seen(field.size(), 0);
  std::vector<Peak> candidates;
  std::vector<Pixel> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * w + x;
      const double v = field[idx];
      if (seen[idx] || v <= 0.0) continue;
      Peak pk;
      pk.sq_height = v;
      bool maximal = true;
      seen[idx] = 1;
      stack.push_back({x, y});
      while (!stack.empty()) {
        const Pixel p = stack.back();
        stack.pop_back();
        pk.plateau.push_back(p);
        for (const auto& [dx, dy] : kNeighbors8) {
          const int nx = p.x + dx, ny = p.y + dy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const std::size_t n = static_cast<std::size_t>(ny) * w + nx;
          if (field[n] > v) maximal = false;
          if (field[n] == v && !seen[n]) {
            seen[n] = 1;
            stack.push_back({nx, ny});
          }
        }
      }
      if (!maximal || v < min_sq_height) continue;
      double sx = 0.0, sy = 0.0;
      for (const auto& p : pk.plateau) {
        sx += p.x + 0.5;
        sy += p.y + 0.5;
      }
      pk.x = sx / static_cast<double>(pk.plateau.size());
      pk.y = sy / static_cast<double>(pk.plateau.size());
      candidates.push_back(std::move(pk));
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Peak& a, const Peak& b) { return a.sq_height > b.sq_height; });
  std::vector<Peak> accepted;
  for (auto& c : candidates) {
    const bool suppressed = std::any_of(accepted.begin(), accepted.end(), [&](const Peak& a) {
      return std::hypot(a.x - c.x, a.y - c.y) <= nms_radius;
    });
    if (!suppressed) accepted.push_back(std::move(c));
  }
  return accepted;
}

// ---------------------------------------------------------------------------
// Watershed
// ---------------------------------------------------------------------------

inline constexpr double kSeedNmsRadius = 3.0;

/// Splits a fused blob along distance-transform ridges. Seeds are the
/// regional maxima of the blob's Euclidean distance map after 3 px
/// suppression; every pixel is flooded from the highest-distance frontier,
/// so the pieces partition the parent. A blob with one seed is returned
/// unchanged. Seeds lower than `min_seed_sq_height` (squared distance) are
/// ignored, which keeps boundary jitter from spawning fragments.
inline std::vector<Component> watershed_split(const Component& comp, double nms_radius = kSeedNmsRadius,
                                              double min_seed_sq_height = 0.0) {
  if (comp.pixels.size() <= 1) return {comp};
  int x0 = comp.pixels.front().x, x1 = x0, y0 = comp.pixels.front().y, y1 = y0;
  for (const auto& p : comp.pixels) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const int w = x1 - x0 + 1, h = y1 - y0 + 1;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
  for (const auto& p : comp.pixels) mask[static_cast<std::size_t>(p.y - y0) * w + (p.x - x0)] = 1;
  const auto dist = squared_distance_transform(mask, w, h);
  const auto seeds = find_peaks(dist, w, h, min_seed_sq_height, nms_radius);
  if (seeds.size() <= 1) return {comp};

  std::vector<int> label(mask.size(), -1);
  struct Item {
    double priority;
    std::uint64_t order;
    int x, y, lab;
    bool operator<(const Item& o) const {
      return priority != o.priority ? priority < o.priority : order > o.order;
    }
  };
  std::priority_queue<Item> pq;
  std::uint64_t order = 0;
  auto push_neighbors = [&](int x, int y, int lab) {
    for (const auto& [dx, dy] : kNeighbors8) {
      const int nx = x + dx, ny = y + dy;
      if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
      const std::size_t n = static_cast<std::size_t>(ny) * w + nx;
      if (mask[n] && label[n] < 0) pq.push({dist[n], order++, nx, ny, lab});
    }
  };
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    for (const auto& p : seeds[s].plateau) label[static_cast<std::size_t>(p.y) * w + p.x] = static_cast<int>(s);
  }
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    for (const auto& p : seeds[s].plateau) push_neighbors(p.x, p.y, static_cast<int>(s));
  }
  while (!pq.empty()) {
    const Item it = pq.top();
    pq.pop();
    const std::size_t idx = static_cast<std::size_t>(it.y) * w + it.x;
    if (label[idx] >= 0) continue;
    label[idx] = it.lab;
    push_neighbors(it.x, it.y, it.lab);
  }

  std::vector<Component> parts(seeds.size());
  for (const auto& p : comp.pixels) {
    const int lab = label[static_cast<std::size_t>(p.y - y0) * w + (p.x - x0)];
    parts[static_cast<std::size_t>(std::max(lab, 0))].pixels.push_back(p);
  }
  std::erase_if(parts, [](const Component& c) { return c.pixels.empty(); });
  return parts;
}

/// Background level estimate: median intensity inside `roi`.
inline double median_in_disc(const GrayImage& img, const Disc& roi) {
  std::array<std::uint64_t, 256> hist{};
  std::uint64_t n = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (roi.contains_pixel(x, y)) {
        ++hist[img.at(x, y)];
        ++n;
      }
  if (n == 0) return 0.0;
  return histogram_percentile(hist, n, 0.5);
}

}  // namespace cfu::vision
