#include "consistentid/synth_faces.hpp"

#include "consistentid/errors.hpp"
#include "consistentid/rng.hpp"

#include <cmath>

namespace cid {

namespace {

// Colors are snapped to 8-bit levels so PNG round trips are lossless.
double q8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }
Rgb q8(Rgb c) { return {q8(c[0]), q8(c[1]), q8(c[2])}; }

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

Rgb scaled(const Rgb& c, double s) { return {c[0] * s, c[1] * s, c[2] * s}; }

bool in_ellipse(int dx, int dy, double rx, double ry) {
  const double u = dx / rx;
  const double v = dy / ry;
  return u * u + v * v <= 1.0;
}

constexpr int kBackground = -1;

}  // namespace

std::uint64_t corpus_identity_seed(std::uint64_t corpus_seed, int identity_index) {
  return derive_seed({corpus_seed, static_cast<std::uint64_t>(identity_index)});
}

std::array<int, 2> pose_offset(std::uint64_t identity_seed, std::uint64_t pose_seed) {
  if (pose_seed == 0) return {0, 0};
  Rng rng(derive_seed({identity_seed, pose_seed, 0x706f7365ULL}));
  return {rng.uniform_int(-1, 1), rng.uniform_int(-1, 1)};
}

IdentitySpec generate_identity(std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0x6964ULL}));
  IdentitySpec id;
  id.seed = seed;

  const Rgb light{0.96, 0.82, 0.70};
  const Rgb dark{0.38, 0.24, 0.16};
  Rgb skin = lerp(light, dark, rng.uniform());
  for (double& c : skin) c += rng.uniform(-0.04, 0.04);
  id.skin_tone = q8(skin);
  id.face_radius_x = rng.uniform(4.5, 5.5);
  id.face_radius_y = rng.uniform(5.5, 6.5);

  auto& eyes = id.region_params[0];
  eyes.offset_x = rng.uniform_int(2, 3);
  eyes.offset_y = -rng.uniform_int(2, 3);
  eyes.radius_x = rng.uniform(0.6, 1.5);
  eyes.radius_y = rng.uniform(0.5, 1.0);
  eyes.color = q8(Rgb{rng.uniform(0.0, 0.75), rng.uniform(0.0, 0.75), rng.uniform(0.0, 0.75)});

  auto& mouth = id.region_params[1];
  mouth.offset_x = 0;
  mouth.offset_y = rng.uniform_int(3, 4);
  mouth.radius_x = rng.uniform(1.0, 2.4);
  mouth.radius_y = rng.uniform(0.5, 0.9);
  mouth.color = q8(Rgb{rng.uniform(0.45, 0.95), rng.uniform(0.05, 0.45), rng.uniform(0.1, 0.5)});

  auto& ears = id.region_params[2];
  ears.offset_x = static_cast<int>(std::floor(id.face_radius_x - 0.6));
  ears.offset_y = -rng.uniform_int(0, 1);
  ears.radius_x = rng.uniform(0.5, 0.9);
  ears.radius_y = rng.uniform(0.8, 1.6);
  ears.color = q8(scaled(id.skin_tone, rng.uniform(0.72, 0.9)));

  auto& nose = id.region_params[3];
  nose.offset_x = 0;
  nose.offset_y = rng.uniform_int(0, 1);
  nose.radius_x = rng.uniform(0.0, 1.2);
  nose.radius_y = rng.uniform(0.5, 1.5);
  nose.color = q8(scaled(id.skin_tone, rng.uniform(0.6, 0.85)));

  auto& other = id.region_params[4];
  other.radius_x = id.face_radius_x;
  other.radius_y = id.face_radius_y;
  other.color = id.skin_tone;

  id.age = rng.uniform_int(18, 80);
  id.gender = rng.bernoulli(0.5) ? Gender::male : Gender::female;
  return id;
}

SyntheticFace render_face(const IdentitySpec& identity, std::uint64_t pose_seed,
                          const std::set<RegionLabel>& drop_regions, const SynthConfig& config) {
  if (config.cell <= 0 || config.height % config.cell != 0 || config.width % config.cell != 0) {
    throw ConfigError("render_face: image size must be a multiple of the cell size");
  }
  const int gh = config.grid_height();
  const int gw = config.grid_width();
  const auto [jx, jy] = pose_offset(identity.seed, pose_seed);
  const int cx = gw / 2 + jx;
  const int cy = gh / 2 + jy;

  std::vector<int> labels(static_cast<std::size_t>(gh) * gw, kBackground);
  std::vector<bool> outline(labels.size(), false);
  auto cell = [&](int x, int y) -> int& { return labels[static_cast<std::size_t>(y) * gw + x]; };

  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      if (in_ellipse(x - cx, y - cy, identity.face_radius_x, identity.face_radius_y)) {
        cell(x, y) = index_of(RegionLabel::face_other);
        outline[static_cast<std::size_t>(y) * gw + x] = true;
      }
    }
  }

  // Anchor cells of each region (center cells), painted last so they always survive.
  std::vector<std::pair<RegionLabel, std::array<int, 2>>> anchors;
  auto paint = [&](RegionLabel label, int ax, int ay, auto&& inside) {
    for (int y = 0; y < gh; ++y) {
      for (int x = 0; x < gw; ++x) {
        if (!outline[static_cast<std::size_t>(y) * gw + x]) continue;
        if (inside(x - ax, y - ay)) cell(x, y) = index_of(label);
      }
    }
    anchors.push_back({label, {ax, ay}});
  };

  const RegionParams& ears = identity.region(RegionLabel::ears);
  for (int side : {-1, 1}) {
    paint(RegionLabel::ears, cx + side * ears.offset_x, cy + ears.offset_y,
          [&](int dx, int dy) { return in_ellipse(dx, dy, ears.radius_x, ears.radius_y); });
  }
  const RegionParams& nose = identity.region(RegionLabel::nose);
  paint(RegionLabel::nose, cx, cy + nose.offset_y,
        [&](int dx, int dy) { return std::abs(dx) <= nose.radius_x && std::abs(dy) <= nose.radius_y; });
  const RegionParams& eyes = identity.region(RegionLabel::eyes);
  for (int side : {-1, 1}) {
    paint(RegionLabel::eyes, cx + side * eyes.offset_x, cy + eyes.offset_y,
          [&](int dx, int dy) { return in_ellipse(dx, dy, eyes.radius_x, eyes.radius_y); });
  }
  const RegionParams& mouth = identity.region(RegionLabel::mouth);
  paint(RegionLabel::mouth, cx, cy + mouth.offset_y,
        [&](int dx, int dy) { return in_ellipse(dx, dy, mouth.radius_x, mouth.radius_y); });
  for (const auto& [label, at] : anchors) {
    if (outline[static_cast<std::size_t>(at[1]) * gw + at[0]]) cell(at[0], at[1]) = index_of(label);
  }

  Rng bg_rng(derive_seed({identity.seed, pose_seed, 0x6267ULL}));
  const Rgb background = q8(Rgb{bg_rng.uniform(0.1, 0.9), bg_rng.uniform(0.1, 0.9), bg_rng.uniform(0.1, 0.9)});

  SyntheticFace face;
  face.identity = identity;
  face.pose_seed = pose_seed;
  face.background = background;
  face.image = Image(config.height, config.width, 3);
  face.face_outline = Mask(config.height, config.width);
  std::array<Mask, kRegionCount> masks;
  masks.fill(Mask(config.height, config.width));

  for (int py = 0; py < config.height; ++py) {
    for (int px = 0; px < config.width; ++px) {
      const int gx = px / config.cell;
      const int gy = py / config.cell;
      const int label = cell(gx, gy);
      Rgb color = background;
      if (label != kBackground) {
        const auto region = static_cast<RegionLabel>(label);
        face.face_outline.at(py, px) = 1;
        if (drop_regions.count(region)) {
          color = identity.skin_tone;
        } else {
          color = identity.region(region).color;
          masks[static_cast<std::size_t>(label)].at(py, px) = 1;
        }
      }
      for (int c = 0; c < 3; ++c) face.image.at(py, px, c) = color[static_cast<std::size_t>(c)];
    }
  }
  face.masks = RegionMaskSet::from_masks(std::move(masks));
  return face;
}

std::vector<SyntheticFace> build_corpus(int n_identities, int images_per_identity, std::uint64_t seed,
                                        const SynthConfig& config) {
  if (n_identities < 1) throw ConfigError("build_corpus: n_identities must be >= 1");
  if (images_per_identity < 0) throw ConfigError("build_corpus: images_per_identity must be >= 0");
  std::vector<SyntheticFace> corpus;
  corpus.reserve(static_cast<std::size_t>(n_identities) * images_per_identity);
  for (int i = 0; i < n_identities; ++i) {
    const IdentitySpec id = generate_identity(corpus_identity_seed(seed, i));
    for (int k = 0; k < images_per_identity; ++k) {
      corpus.push_back(render_face(id, static_cast<std::uint64_t>(k), {}, config));
    }
  }
  return corpus;
}

std::string face_id(const SyntheticFace& face) {
  return "id" + std::to_string(face.identity.seed) + "_p" + std::to_string(face.pose_seed);
}

}  // namespace cid
