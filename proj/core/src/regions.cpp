#include "consistentid/regions.hpp"

#include "consistentid/errors.hpp"

namespace cid {

namespace {
constexpr std::array<std::string_view, kRegionCount> kNames = {"eyes", "mouth", "ears", "nose", "face_other"};
constexpr std::array<std::string_view, kRegionCount> kKeywords = {"eyes", "mouth", "ears", "nose", "face"};
}  // namespace

std::string_view region_name(RegionLabel label) { return kNames[static_cast<std::size_t>(index_of(label))]; }

std::string_view region_keyword(RegionLabel label) {
  return kKeywords[static_cast<std::size_t>(index_of(label))];
}

std::optional<RegionLabel> region_from_name(std::string_view name) {
  for (RegionLabel label : kRegionOrder) {
    if (region_name(label) == name) return label;
  }
  return std::nullopt;
}

RegionMaskSet RegionMaskSet::from_masks(std::array<Mask, kRegionCount> masks) {
  RegionMaskSet set;
  for (int j = 0; j < kRegionCount; ++j) {
    const Mask& m = masks[static_cast<std::size_t>(j)];
    if (m.height != masks[0].height || m.width != masks[0].width) throw ShapeError("region masks differ in shape");
    set.presence[static_cast<std::size_t>(j)] = !m.empty();
  }
  set.masks = std::move(masks);
  return set;
}

RegionMaskSet RegionMaskSet::empty(int height, int width) {
  std::array<Mask, kRegionCount> masks;
  masks.fill(Mask(height, width));
  return from_masks(std::move(masks));
}

int RegionMaskSet::present_count() const {
  int n = 0;
  for (bool p : presence) n += p ? 1 : 0;
  return n;
}

Mask RegionMaskSet::union_mask() const {
  Mask out(height(), width());
  for (const Mask& m : masks) {
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] |= m.data[i];
  }
  return out;
}

}  // namespace cid
