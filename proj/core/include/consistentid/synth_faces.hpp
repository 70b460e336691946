#pragma once

// Procedural toy faces with exact region masks.
//
// Faces are laid out on a coarse cell grid (default 16x16 cells of 4x4 pixels) so every
// region is a union of whole cells. Each region is an ellipse or rectangle anchored on a
// cell center, which guarantees at least one cell (16 pixels) per present region. Regions
// are painted into a single label map, so supports are pairwise disjoint by construction.

#include "consistentid/image.hpp"
#include "consistentid/regions.hpp"

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace cid {

struct SynthConfig {
  int height = 64;
  int width = 64;
  int cell = 4;

  int grid_height() const { return height / cell; }
  int grid_width() const { return width / cell; }
};

using Rgb = std::array<double, 3>;

// Offsets are in cells relative to the face center cell. Paired regions (eyes, ears) are
// mirrored at +/- offset_x.
struct RegionParams {
  int offset_x = 0;
  int offset_y = 0;
  double radius_x = 0.0;
  double radius_y = 0.0;
  Rgb color{};

  friend bool operator==(const RegionParams&, const RegionParams&) = default;
};

enum class Gender { female, male };

struct IdentitySpec {
  std::uint64_t seed = 0;
  std::array<RegionParams, kRegionCount> region_params{};
  Rgb skin_tone{};
  double face_radius_x = 0.0;
  double face_radius_y = 0.0;
  // Attribute proxies used for dataset statistics and captions; not rendered.
  int age = 0;
  Gender gender = Gender::female;

  const RegionParams& region(RegionLabel label) const {
    return region_params[static_cast<std::size_t>(index_of(label))];
  }
  friend bool operator==(const IdentitySpec&, const IdentitySpec&) = default;
};

struct SyntheticFace {
  Image image;
  RegionMaskSet masks;
  IdentitySpec identity;
  std::uint64_t pose_seed = 0;
  Mask face_outline;
  Rgb background{};
};

IdentitySpec generate_identity(std::uint64_t seed);

SyntheticFace render_face(const IdentitySpec& identity, std::uint64_t pose_seed,
                          const std::set<RegionLabel>& drop_regions = {}, const SynthConfig& config = {});

// Identity i uses seed derive_seed({seed, i}); pose k of every identity uses pose_seed k.
// Ordered identity-major.
std::vector<SyntheticFace> build_corpus(int n_identities, int images_per_identity, std::uint64_t seed,
                                        const SynthConfig& config = {});

std::uint64_t corpus_identity_seed(std::uint64_t corpus_seed, int identity_index);

// "id<identity seed>_p<pose seed>".
std::string face_id(const SyntheticFace& face);

// Pose jitter in cells for (identity seed, pose seed); pose 0 is always centered.
std::array<int, 2> pose_offset(std::uint64_t identity_seed, std::uint64_t pose_seed);

}  // namespace cid
