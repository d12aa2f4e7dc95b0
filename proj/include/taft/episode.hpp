#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "taft/errors.hpp"
#include "taft/rng.hpp"

namespace taft {

enum class ShapeFamily : int { disk = 0, square, triangle, ring, cross, diagonal_bar };
enum class TextureKind : int { solid = 0, checker };
enum class Phase : int { train = 0, test };

inline constexpr int kNumClasses = 12;

struct ClassSpec {
  int class_id = 0;
  ShapeFamily family = ShapeFamily::disk;
  TextureKind texture = TextureKind::solid;
};

inline ClassSpec class_spec(int class_id) {
  if (class_id < 0 || class_id >= kNumClasses) {
    throw ConfigError("class id out of range: " + std::to_string(class_id));
  }
  return ClassSpec{class_id, static_cast<ShapeFamily>(class_id / 2),
                   static_cast<TextureKind>(class_id % 2)};
}

// Three consecutive class ids form each split's held-out test set.
struct SplitConfig {
  int split_index = 0;
  std::array<int, 3> test_class_ids{};
  std::array<int, 9> train_class_ids{};

  static SplitConfig make(int split_index) {
    if (split_index < 0 || split_index > 3) {
      throw ConfigError("split index out of range: " + std::to_string(split_index));
    }
    SplitConfig cfg;
    cfg.split_index = split_index;
    for (int i = 0; i < 3; ++i) cfg.test_class_ids[static_cast<size_t>(i)] = 3 * split_index + i;
    int t = 0;
    for (int c = 0; c < kNumClasses; ++c) {
      if (c < 3 * split_index || c > 3 * split_index + 2) {
        cfg.train_class_ids[static_cast<size_t>(t++)] = c;
      }
    }
    return cfg;
  }

  bool is_test(int class_id) const {
    return class_id >= test_class_ids[0] && class_id <= test_class_ids[2];
  }
};

// One rendered image/mask pair. Images are row-major 3xHxW doubles in [0,1];
// masks are 0/1 bytes.
struct Instance {
  int h = 0, w = 0;
  std::vector<double> image;
  std::vector<uint8_t> mask;
};

struct Episode {
  int class_id = 0;
  uint64_t seed = 0;
  int canvas = 0;
  std::vector<Instance> support;
  std::vector<Instance> query;
};

namespace detail {

inline bool family_rotates(ShapeFamily f) {
  return f != ShapeFamily::disk && f != ShapeFamily::ring;
}

// Indicator of the canonical shape at the origin, half-extent `half`, in
// already-derotated coordinates.
inline bool shape_covers(ShapeFamily family, double x, double y, double half) {
  switch (family) {
    case ShapeFamily::disk:
      return x * x + y * y <= half * half;
    case ShapeFamily::square:
      return std::abs(x) <= half && std::abs(y) <= half;
    case ShapeFamily::triangle: {
      // Equilateral, circumradius `half`, apex up.
      const double v0x = 0.0, v0y = half;
      const double v1x = -0.8660254037844386 * half, v1y = -0.5 * half;
      const double v2x = 0.8660254037844386 * half, v2y = -0.5 * half;
      auto edge = [x, y](double ax, double ay, double bx, double by) {
        return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
      };
      const double e0 = edge(v0x, v0y, v1x, v1y);
      const double e1 = edge(v1x, v1y, v2x, v2y);
      const double e2 = edge(v2x, v2y, v0x, v0y);
      return (e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0);
    }
    case ShapeFamily::ring: {
      const double rr = x * x + y * y;
      const double inner = 0.55 * half;
      return rr <= half * half && rr >= inner * inner;
    }
    case ShapeFamily::cross: {
      const double arm = 0.3 * half;
      return (std::abs(x) <= half && std::abs(y) <= arm) ||
             (std::abs(y) <= half && std::abs(x) <= arm);
    }
    case ShapeFamily::diagonal_bar: {
      // Bar along the main diagonal of the canonical frame.
      const double inv_sqrt2 = 0.7071067811865476;
      const double u = (x + y) * inv_sqrt2;
      const double v = (y - x) * inv_sqrt2;
      return std::abs(u) <= half && std::abs(v) <= 0.25 * half;
    }
  }
  return false;
}

struct Placement {
  double cx, cy, half, cos_t, sin_t;
};

inline std::vector<uint8_t> rasterize(ShapeFamily family, const Placement& p, int canvas,
                                      int64_t& area) {
  std::vector<uint8_t> mask(static_cast<size_t>(canvas) * canvas, 0);
  area = 0;
  for (int y = 0; y < canvas; ++y) {
    const double py = y + 0.5 - p.cy;
    for (int x = 0; x < canvas; ++x) {
      const double px = x + 0.5 - p.cx;
      const double rx = p.cos_t * px + p.sin_t * py;
      const double ry = -p.sin_t * px + p.cos_t * py;
      if (shape_covers(family, rx, ry, p.half)) {
        mask[static_cast<size_t>(y) * canvas + x] = 1;
        ++area;
      }
    }
  }
  return mask;
}

}  // namespace detail

inline constexpr double kMinAreaFraction = 0.02;
inline constexpr double kMaxAreaFraction = 0.60;
inline constexpr int kPlacementAttempts = 100;

// Renders one instance: the shape at a random pose on a low-frequency noise
// background, with the exact coverage mask. Pose draws are rejected until the
// foreground area lands inside [2%, 60%] of the canvas.
inline Instance render_instance(const ClassSpec& spec, Rng& rng, int canvas = 64) {
  if (canvas < 16 || canvas % 16 != 0) {
    throw ConfigError("canvas must be a positive multiple of 16, got " + std::to_string(canvas));
  }
  Instance inst;
  inst.h = inst.w = canvas;

  detail::Placement place{};
  int64_t area = 0;
  bool accepted = false;
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    place.cx = rng.uniform(0.2, 0.8) * canvas;
    place.cy = rng.uniform(0.2, 0.8) * canvas;
    place.half = 0.5 * rng.uniform(0.2, 0.6) * canvas;
    double theta = 0.0;
    if (detail::family_rotates(spec.family)) theta = rng.uniform(0.0, 6.283185307179586);
    place.cos_t = std::cos(theta);
    place.sin_t = std::sin(theta);
    inst.mask = detail::rasterize(spec.family, place, canvas, area);
    const double fraction = static_cast<double>(area) / (static_cast<double>(canvas) * canvas);
    if (fraction >= kMinAreaFraction && fraction <= kMaxAreaFraction) {
      accepted = true;
      break;
    }
  }
  if (!accepted) {
    throw GenerationError("no placement met the area bounds after " +
                          std::to_string(kPlacementAttempts) + " attempts (class " +
                          std::to_string(spec.class_id) + ")");
  }

  const double base[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
  const double alt[3] = {1.0 - base[0], 1.0 - base[1], 1.0 - base[2]};
  const double cell = std::max(2.0, canvas / 16.0);

  // Low-frequency background: a coarse random grid per channel, bilinearly
  // upsampled, plus zero-mean uniform noise with standard deviation 0.1.
  constexpr int kGrid = 4;
  double grid[3][kGrid * kGrid];
  for (auto& channel : grid) {
    for (auto& v : channel) v = rng.uniform(0.1, 0.9);
  }
  const double noise_half_width = 0.1 * 1.7320508075688772;

  const int64_t plane = static_cast<int64_t>(canvas) * canvas;
  inst.image.assign(static_cast<size_t>(3) * plane, 0.0);
  for (int y = 0; y < canvas; ++y) {
    const double gy = static_cast<double>(y) * (kGrid - 1) / (canvas - 1);
    const int gy0 = static_cast<int>(gy);
    const int gy1 = std::min(gy0 + 1, kGrid - 1);
    const double wy = gy - gy0;
    for (int x = 0; x < canvas; ++x) {
      const double gx = static_cast<double>(x) * (kGrid - 1) / (canvas - 1);
      const int gx0 = static_cast<int>(gx);
      const int gx1 = std::min(gx0 + 1, kGrid - 1);
      const double wx = gx - gx0;
      const size_t px = static_cast<size_t>(y) * canvas + x;
      const bool fg = inst.mask[px] != 0;

      bool dark_cell = false;
      if (fg && spec.texture == TextureKind::checker) {
        const double cpx = x + 0.5 - place.cx;
        const double cpy = y + 0.5 - place.cy;
        const double rx = place.cos_t * cpx + place.sin_t * cpy;
        const double ry = -place.sin_t * cpx + place.cos_t * cpy;
        const int64_t ix = static_cast<int64_t>(std::floor(rx / cell));
        const int64_t iy = static_cast<int64_t>(std::floor(ry / cell));
        dark_cell = ((ix + iy) & 1) != 0;
      }

      for (int c = 0; c < 3; ++c) {
        double v;
        if (fg) {
          v = dark_cell ? alt[c] : base[c];
        } else {
          const double* g = grid[c];
          const double top = g[gy0 * kGrid + gx0] + (g[gy0 * kGrid + gx1] - g[gy0 * kGrid + gx0]) * wx;
          const double bot = g[gy1 * kGrid + gx0] + (g[gy1 * kGrid + gx1] - g[gy1 * kGrid + gx0]) * wx;
          v = top + (bot - top) * wy + rng.uniform(-noise_half_width, noise_half_width);
        }
        inst.image[static_cast<size_t>(c) * plane + px] = std::min(1.0, std::max(0.0, v));
      }
    }
  }
  return inst;
}

// Class choice for an episode seed, uniform over the phase's class set.
inline int sample_episode_class(const SplitConfig& split, Phase phase, uint64_t seed) {
  Rng rng(mix64(seed, 0xC1A55ULL));
  if (phase == Phase::test) {
    return split.test_class_ids[rng.uniform_index(split.test_class_ids.size())];
  }
  return split.train_class_ids[rng.uniform_index(split.train_class_ids.size())];
}

// Builds a full episode from a seed. Instance sub-seeds depend only on the
// episode seed and the instance's role and index, so the query set is
// identical across different shot counts.
inline Episode sample_episode(const SplitConfig& split, Phase phase, int shots, int queries,
                              uint64_t seed, int canvas = 64) {
  if (shots < 1 || queries < 1) {
    throw ConfigError("episode needs at least one support and one query instance");
  }
  Episode ep;
  ep.seed = seed;
  ep.canvas = canvas;
  ep.class_id = sample_episode_class(split, phase, seed);
  const ClassSpec spec = class_spec(ep.class_id);
  ep.support.reserve(static_cast<size_t>(shots));
  for (int i = 0; i < shots; ++i) {
    Rng rng(mix64(seed, 0x5000ULL + static_cast<uint64_t>(i)));
    ep.support.push_back(render_instance(spec, rng, canvas));
  }
  ep.query.reserve(static_cast<size_t>(queries));
  for (int i = 0; i < queries; ++i) {
    Rng rng(mix64(seed, 0x9000ULL + static_cast<uint64_t>(i)));
    ep.query.push_back(render_instance(spec, rng, canvas));
  }
  return ep;
}

// Fixed-class episode used by evaluation, where the class is externally
// chosen rather than drawn from the phase set.
inline Episode sample_class_episode(int class_id, int shots, int queries, uint64_t seed,
                                    int canvas = 64) {
  if (shots < 1 || queries < 1) {
    throw ConfigError("episode needs at least one support and one query instance");
  }
  Episode ep;
  ep.seed = seed;
  ep.canvas = canvas;
  ep.class_id = class_id;
  const ClassSpec spec = class_spec(class_id);
  for (int i = 0; i < shots; ++i) {
    Rng rng(mix64(seed, 0x5000ULL + static_cast<uint64_t>(i)));
    ep.support.push_back(render_instance(spec, rng, canvas));
  }
  for (int i = 0; i < queries; ++i) {
    Rng rng(mix64(seed, 0x9000ULL + static_cast<uint64_t>(i)));
    ep.query.push_back(render_instance(spec, rng, canvas));
  }
  return ep;
}

}  // namespace taft
