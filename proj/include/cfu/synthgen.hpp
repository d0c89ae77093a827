#pragma once

// Deterministic synthetic Petri-dish renderer with exact ground truth.
//
// Scene model (all intensities on the 0..255 scale before quantization):
//   outside the dish      70 + N(0, 4)
//   agar                  190 + N(0, 4), 1 px antialiased rim
//   colony darkening      c * (1 - u^4), u = d / r_eff, c = colony_contrast
//                         bacteria: r_eff = r; mold: r_eff = r * (1 - 0.15 * lobe(theta))
//                         with a concentric ring texture. Overlaps take the max darkening.
//   glare                 saturated ellipse, area = 0.18 * intensity * analysis-disc area
//   blur                  separable Gaussian, sigma = 6 * intensity px
//   condensation          per-pixel multiplicative speckle, sigma = 0.4 * intensity
//   contamination         turbid film mixing toward a blotchy mid-grey texture,
//                         opacity min(1, 5 * intensity)
//
// RNG draw order is part of the format: base noise (row-major), colony
// sampling, then artifact parameters and artifact noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfu/error.hpp"
#include "cfu/image.hpp"
#include "cfu/rng.hpp"
#include "cfu/types.hpp"

namespace cfu::synthgen {

inline constexpr double kAgarLevel = 190.0;
inline constexpr double kOutsideLevel = 70.0;
inline constexpr double kTextureSigma = 4.0;
inline constexpr std::uint32_t kMaxColonies = 200;
inline constexpr double kPlacementGap = 3.0;
/// Fraction of the image side used by quality measurements; glare is sized
/// relative to this disc.
inline constexpr double kAnalysisFraction = 0.42;

enum class ArtifactKind { none, glare, blur, condensation, contamination };

inline std::string_view to_string(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::none: return "none";
    case ArtifactKind::glare: return "glare";
    case ArtifactKind::blur: return "blur";
    case ArtifactKind::condensation: return "condensation";
    case ArtifactKind::contamination: return "contamination";
  }
  return "none";
}

inline ArtifactKind artifact_from_string(std::string_view s) {
  for (auto k : {ArtifactKind::none, ArtifactKind::glare, ArtifactKind::blur,
                 ArtifactKind::condensation, ArtifactKind::contamination}) {
    if (to_string(k) == s) return k;
  }
  fail(ErrorCode::validation, "artifact.kind: unknown artifact '" + std::string(s) + "'");
}

struct ArtifactSpec {
  ArtifactKind kind = ArtifactKind::none;
  double intensity = 0.0;
};

struct RadiusRange {
  double min = 5.0;
  double max = 30.0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int image_side = 512;
  double plate_radius = 230.0;
  double colony_count_mean = 12.0;
  RadiusRange colony_radius_range{};
  /// Probability that a colony is mold rather than bacteria.
  double class_mix = 0.3;
  bool overlap_allowed = false;
  /// Peak darkening of a colony relative to the agar (0.6 = center at 40%).
  double colony_contrast = 0.6;
  ArtifactSpec artifact{};
  /// Empty means "plate-<seed>".
  std::string plate_id;

  std::string resolved_id() const { return plate_id.empty() ? "plate-" + std::to_string(seed) : plate_id; }
};

struct Colony {
  double x = 0.0;
  double y = 0.0;
  double radius = 0.0;
  ColonyClass cls = ColonyClass::bacteria;

  friend bool operator==(const Colony&, const Colony&) = default;
};

struct GroundTruth {
  std::vector<Colony> colonies;
  bool valid = true;
  std::uint32_t true_count = 0;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

/// Validity rule: invalid iff intensity >= 0.3 (glare, blur, condensation)
/// or >= 0.2 (contamination).
inline bool plate_is_valid(const ArtifactSpec& a) {
  switch (a.kind) {
    case ArtifactKind::none: return true;
    case ArtifactKind::contamination: return a.intensity < 0.2;
    default: return a.intensity < 0.3;
  }
}

inline void validate(const SceneSpec& s) {
  require(s.image_side >= 64, "image_side", "must be >= 64");
  require(s.plate_radius > 0 && s.plate_radius < s.image_side / 2.0, "plate_radius",
          "must be in (0, image_side/2)");
  require(std::isfinite(s.colony_count_mean) && s.colony_count_mean >= 0, "colony_count_mean",
          "must be a finite non-negative mean");
  const auto& rr = s.colony_radius_range;
  require(rr.min <= rr.max, "colony_radius_range", "min must be <= max");
  require(rr.min >= 2.0 && rr.max <= s.image_side / 8.0, "colony_radius_range",
          "must lie within [2, image_side/8]");
  require(rr.max + kPlacementGap < s.plate_radius, "colony_radius_range", "colonies do not fit on the plate");
  require(s.class_mix >= 0.0 && s.class_mix <= 1.0, "class_mix", "must be a probability");
  require(s.colony_contrast > 0.0 && s.colony_contrast <= 1.0, "colony_contrast", "must be in (0, 1]");
  require(s.artifact.intensity >= 0.0 && s.artifact.intensity <= 1.0, "artifact.intensity",
          "must be in [0, 1]");
  require(s.artifact.kind != ArtifactKind::none || s.artifact.intensity == 0.0, "artifact.intensity",
          "must be 0 when kind is none");
}

struct RenderedPlate {
  GrayImage image;
  GroundTruth truth;
};

namespace detail {

struct ColonyShape {
  Colony colony;
  int lobes = 0;  // 0 for bacteria
  double phase = 0.0;
};

inline void gaussian_blur(std::vector<double>& buf, int w, int h, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += kernel[i + radius];
  }
  for (auto& k : kernel) k /= sum;
  std::vector<double> tmp(buf.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = std::clamp(x + i, 0, w - 1);
        acc += kernel[i + radius] * buf[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = std::clamp(y + i, 0, h - 1);
        acc += kernel[i + radius] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      buf[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
}

/// Bilinear upsampling of a coarse random lattice; values in roughly [-1, 1].
inline std::vector<double> smooth_noise(Rng& rng, int w, int h, int cells) {
  std::vector<double> lattice(static_cast<std::size_t>(cells + 1) * (cells + 1));
  for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
  std::vector<double> out(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    const double gy = (y + 0.5) / h * cells;
    const int iy = std::min(static_cast<int>(gy), cells - 1);
    const double fy = gy - iy;
    for (int x = 0; x < w; ++x) {
      const double gx = (x + 0.5) / w * cells;
      const int ix = std::min(static_cast<int>(gx), cells - 1);
      const double fx = gx - ix;
      auto at = [&](int i, int j) { return lattice[static_cast<std::size_t>(j) * (cells + 1) + i]; };
      const double top = at(ix, iy) * (1 - fx) + at(ix + 1, iy) * fx;
      const double bot = at(ix, iy + 1) * (1 - fx) + at(ix + 1, iy + 1) * fx;
      out[static_cast<std::size_t>(y) * w + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

inline std::vector<ColonyShape> place_colonies(const SceneSpec& spec, Rng& rng) {
  const double c = spec.image_side / 2.0;
  const std::uint32_t wanted = std::min(rng.poisson(spec.colony_count_mean), kMaxColonies);
  std::vector<ColonyShape> placed;
  placed.reserve(wanted);
  for (std::uint32_t i = 0; i < wanted; ++i) {
    ColonyShape shape;
    shape.colony.radius = rng.uniform(spec.colony_radius_range.min, spec.colony_radius_range.max);
    const bool mold = rng.bernoulli(spec.class_mix);
    shape.colony.cls = mold ? ColonyClass::mold : ColonyClass::bacteria;
    shape.lobes = mold ? static_cast<int>(rng.uniform_int(3, 5)) : 0;
    shape.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double r = shape.colony.radius;
    const double reach = spec.plate_radius - r - kPlacementGap;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const double rad = reach * std::sqrt(rng.uniform());
      const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double x = c + rad * std::cos(ang);
      const double y = c + rad * std::sin(ang);
      ok = true;
      if (!spec.overlap_allowed) {
        for (const auto& other : placed) {
          const double dx = other.colony.x - x;
          const double dy = other.colony.y - y;
          if (std::hypot(dx, dy) <= r + other.colony.radius + kPlacementGap) {
            ok = false;
            break;
          }
        }
      }
      if (ok) {
        shape.colony.x = x;
        shape.colony.y = y;
      }
    }
    if (ok) placed.push_back(shape);
  }
  return placed;
}

inline void render_colonies(const std::vector<ColonyShape>& shapes, double contrast, int side,
                            std::vector<double>& darkening) {
  for (const auto& s : shapes) {
    const auto& col = s.colony;
    const int x0 = std::max(0, static_cast<int>(std::floor(col.x - col.radius)) - 1);
    const int x1 = std::min(side - 1, static_cast<int>(std::ceil(col.x + col.radius)) + 1);
    const int y0 = std::max(0, static_cast<int>(std::floor(col.y - col.radius)) - 1);
    const int y1 = std::min(side - 1, static_cast<int>(std::ceil(col.y + col.radius)) + 1);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - col.x;
        const double dy = y + 0.5 - col.y;
        const double d = std::hypot(dx, dy);
        double r_eff = col.radius;
        if (s.lobes > 0) {
          const double theta = std::atan2(dy, dx);
          r_eff *= 1.0 - 0.15 * (0.5 + 0.5 * std::sin(s.lobes * theta + s.phase));
        }
        if (d >= r_eff) continue;
        const double u = d / r_eff;
        const double u2 = u * u;
        // Concentric rings on mold, faded toward the rim so they never cut the outline.
        const double texture =
            s.lobes > 0 ? 1.0 - 0.3 * (1.0 - u) * (0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * d / 4.0)) : 1.0;
        const double dark = contrast * (1.0 - u2 * u2) * texture;
        auto& slot = darkening[static_cast<std::size_t>(y) * side + x];
        slot = std::max(slot, dark);
      }
    }
  }
}

inline void apply_artifact(const SceneSpec& spec, Rng& rng, std::vector<double>& px) {
  const int side = spec.image_side;
  const double c = side / 2.0;
  const double intensity = spec.artifact.intensity;
  switch (spec.artifact.kind) {
    case ArtifactKind::none:
      return;
    case ArtifactKind::glare: {
      const double disc_r = kAnalysisFraction * side;
      const double area = 0.18 * intensity * std::numbers::pi * disc_r * disc_r;
      const double ratio = 1.6;
      const double a = std::sqrt(area * ratio / std::numbers::pi);
      const double b = area / (std::numbers::pi * a);
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double reach = std::max(0.0, disc_r - a);
      const double rad = reach * std::sqrt(rng.uniform());
      const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double ex = c + rad * std::cos(ang);
      const double ey = c + rad * std::sin(ang);
      const double ca = std::cos(angle);
      const double sa = std::sin(angle);
      for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
          const double dx = x + 0.5 - ex;
          const double dy = y + 0.5 - ey;
          const double u = (dx * ca + dy * sa) / a;
          const double v = (-dx * sa + dy * ca) / b;
          if (u * u + v * v <= 1.0) px[static_cast<std::size_t>(y) * side + x] = 255.0;
        }
      }
      return;
    }
    case ArtifactKind::blur:
      gaussian_blur(px, side, side, 6.0 * intensity);
      return;
    case ArtifactKind::condensation: {
      const double sigma = 0.4 * intensity;
      for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
          const double n = rng.normal();
          if (std::hypot(x + 0.5 - c, y + 0.5 - c) <= spec.plate_radius) {
            px[static_cast<std::size_t>(y) * side + x] *= 1.0 + sigma * n;
          }
        }
      }
      return;
    }
    case ArtifactKind::contamination: {
      const double opacity = std::min(1.0, 5.0 * intensity);
      const auto blotch = smooth_noise(rng, side, side, 8);
      for (std::size_t i = 0; i < px.size(); ++i) {
        const double film = 130.0 + 5.0 * blotch[i];
        px[i] = (1.0 - opacity) * px[i] + opacity * film;
      }
      return;
    }
  }
}

}  // namespace detail

/// Renders one plate. Identical specs produce byte-identical images.
inline RenderedPlate generate_plate(const SceneSpec& spec) {
  validate(spec);
  const int side = spec.image_side;
  const double c = side / 2.0;
  Rng rng(spec.seed);

  std::vector<double> px(static_cast<std::size_t>(side) * side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double d = std::hypot(x + 0.5 - c, y + 0.5 - c);
      const double inside = std::clamp(spec.plate_radius - d + 0.5, 0.0, 1.0);
      const double level = inside * kAgarLevel + (1.0 - inside) * kOutsideLevel;
      px[static_cast<std::size_t>(y) * side + x] = level + kTextureSigma * rng.normal();
    }
  }

  const auto shapes = detail::place_colonies(spec, rng);
  std::vector<double> darkening(px.size(), 0.0);
  detail::render_colonies(shapes, spec.colony_contrast, side, darkening);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] *= 1.0 - darkening[i];

  detail::apply_artifact(spec, rng, px);

  RenderedPlate out;
  out.image = GrayImage(side, side);
  for (std::size_t i = 0; i < px.size(); ++i) {
    out.image.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(px[i]), 0L, 255L));
  }
  for (const auto& s : shapes) out.truth.colonies.push_back(s.colony);
  out.truth.true_count = static_cast<std::uint32_t>(out.truth.colonies.size());
  out.truth.valid = plate_is_valid(spec.artifact);
  return out;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const GroundTruth& gt) {
  nlohmann::json cols = nlohmann::json::array();
  for (const auto& c : gt.colonies) {
    cols.push_back({{"x", c.x}, {"y", c.y}, {"radius", c.radius}, {"class", std::string(to_string(c.cls))}});
  }
  return {{"colonies", cols}, {"valid", gt.valid}, {"true_count", gt.true_count}};
}

inline GroundTruth ground_truth_from_json(const nlohmann::json& j) {
  GroundTruth gt;
  for (const auto& c : j.at("colonies")) {
    gt.colonies.push_back({c.at("x").get<double>(), c.at("y").get<double>(), c.at("radius").get<double>(),
                           colony_class_from_string(c.at("class").get<std::string>())});
  }
  gt.valid = j.at("valid").get<bool>();
  gt.true_count = j.at("true_count").get<std::uint32_t>();
  require(gt.true_count == gt.colonies.size(), "true_count", "must equal the number of colonies");
  return gt;
}

inline nlohmann::json to_json(const SceneSpec& s) {
  return {{"seed", s.seed},
          {"image_side", s.image_side},
          {"plate_radius", s.plate_radius},
          {"colony_count_mean", s.colony_count_mean},
          {"colony_radius_range", {s.colony_radius_range.min, s.colony_radius_range.max}},
          {"class_mix", s.class_mix},
          {"overlap_allowed", s.overlap_allowed},
          {"colony_contrast", s.colony_contrast},
          {"artifact", {{"kind", std::string(to_string(s.artifact.kind))}, {"intensity", s.artifact.intensity}}}};
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string plate_id;
  std::string image;         // relative to the manifest directory
  std::string ground_truth;  // relative to the manifest directory
  bool valid = true;
  std::uint32_t true_count = 0;
};

struct Manifest {
  std::filesystem::path dir;
  std::vector<ManifestEntry> plates;

  std::size_t invalid_count() const {
    return static_cast<std::size_t>(std::count_if(plates.begin(), plates.end(), [](const auto& e) { return !e.valid; }));
  }
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json plates = nlohmann::json::array();
  for (const auto& e : m.plates) {
    plates.push_back({{"plate_id", e.plate_id},
                      {"image", e.image},
                      {"ground_truth", e.ground_truth},
                      {"valid", e.valid},
                      {"true_count", e.true_count}});
  }
  return {{"version", 1}, {"plates", plates}};
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::storage, "cannot write manifest " + path.string());
  out << to_json(m).dump(2) << '\n';
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::not_found, "manifest not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::validation, std::string("manifest: ") + e.what());
  }
  Manifest m;
  m.dir = path.parent_path();
  for (const auto& e : j.at("plates")) {
    m.plates.push_back({e.at("plate_id").get<std::string>(), e.at("image").get<std::string>(),
                        e.at("ground_truth").get<std::string>(), e.at("valid").get<bool>(),
                        e.at("true_count").get<std::uint32_t>()});
  }
  return m;
}

/// Renders every spec into `out_dir` as <plate_id>.png plus <plate_id>.json.
/// The manifest itself is returned, not written; see write_manifest.
inline Manifest generate_batch(const std::vector<SceneSpec>& specs, const std::filesystem::path& out_dir) {
  std::set<std::string> ids;
  for (const auto& s : specs) {
    validate(s);
    if (!ids.insert(s.resolved_id()).second) {
      fail(ErrorCode::conflict, "duplicate plate_id " + s.resolved_id(), {{"plate_id", s.resolved_id()}});
    }
  }
  Manifest manifest;
  manifest.dir = out_dir;
  if (specs.empty()) return manifest;

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    fail(ErrorCode::storage, "output directory not writable: " + out_dir.string());
  }
  for (const auto& spec : specs) {
    const auto id = spec.resolved_id();
    const auto plate = generate_plate(spec);
    ManifestEntry entry{id, id + ".png", id + ".json", plate.truth.valid, plate.truth.true_count};
    write_png(out_dir / entry.image, plate.image);
    auto sidecar = to_json(plate.truth);
    sidecar["plate_id"] = id;
    sidecar["scene"] = to_json(spec);
    std::ofstream gt(out_dir / entry.ground_truth, std::ios::trunc);
    if (!gt) fail(ErrorCode::storage, "cannot write " + (out_dir / entry.ground_truth).string());
    gt << sidecar.dump(2) << '\n';
    manifest.plates.push_back(std::move(entry));
  }
  return manifest;
}

/// Mixed workload: exactly round(invalid_frac * count) plates carry an
/// artifact well above the validity cut-off; the rest are clean or carry a
/// mild sub-threshold artifact.
inline std::vector<SceneSpec> make_workload(std::uint64_t seed, std::size_t count, double invalid_frac,
                                            const SceneSpec& base = {}) {
  require(invalid_frac >= 0.0 && invalid_frac <= 1.0, "invalid_frac", "must be in [0, 1]");
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const auto n_invalid = static_cast<std::size_t>(std::llround(invalid_frac * static_cast<double>(count)));
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  for (std::size_t i = count; i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
  }
  std::vector<bool> invalid(count, false);
  for (std::size_t i = 0; i < n_invalid; ++i) invalid[order[i]] = true;

  static constexpr ArtifactKind kKinds[] = {ArtifactKind::glare, ArtifactKind::blur, ArtifactKind::condensation,
                                            ArtifactKind::contamination};
  std::vector<SceneSpec> specs;
  specs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec s = base;
    s.seed = seed * 1000003ULL + i;
    s.plate_id = "plate-" + std::to_string(seed) + "-" + std::to_string(i);
    s.colony_count_mean = rng.uniform(0.0, 2.0 * base.colony_count_mean);
    const auto kind = kKinds[rng.uniform_int(0, 3)];
    if (invalid[i]) {
      s.artifact = {kind, rng.uniform(kind == ArtifactKind::contamination ? 0.3 : 0.45, 1.0)};
    } else if (rng.bernoulli(0.3)) {
      s.artifact = {kind, rng.uniform(0.02, 0.08)};
    } else {
      s.artifact = {};
    }
    specs.push_back(std::move(s));
  }
  return specs;
}

}  // namespace cfu::synthgen
