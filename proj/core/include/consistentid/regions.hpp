#pragma once

#include "consistentid/image.hpp"

#include <array>
#include <optional>
#include <string_view>

namespace cid {

// Canonical order; every region index in the project follows it.
enum class RegionLabel : int { eyes = 0, mouth = 1, ears = 2, nose = 3, face_other = 4 };

inline constexpr int kRegionCount = 5;
inline constexpr std::array<RegionLabel, kRegionCount> kRegionOrder = {
    RegionLabel::eyes, RegionLabel::mouth, RegionLabel::ears, RegionLabel::nose, RegionLabel::face_other};

constexpr int index_of(RegionLabel label) { return static_cast<int>(label); }

std::string_view region_name(RegionLabel label);
std::optional<RegionLabel> region_from_name(std::string_view name);
// The word replaced by the facial delimiter in region descriptions.
std::string_view region_keyword(RegionLabel label);

using RegionFlags = std::array<bool, kRegionCount>;

struct RegionMaskSet {
  std::array<Mask, kRegionCount> masks;
  RegionFlags presence{};

  static RegionMaskSet from_masks(std::array<Mask, kRegionCount> masks);
  static RegionMaskSet empty(int height, int width);

  const Mask& operator[](RegionLabel label) const { return masks[static_cast<std::size_t>(index_of(label))]; }
  int present_count() const;
  int height() const { return masks[0].height; }
  int width() const { return masks[0].width; }
  // Union of all region masks (the whole-face mask).
  Mask union_mask() const;

  friend bool operator==(const RegionMaskSet&, const RegionMaskSet&) = default;
};

}  // namespace cid
