#pragma once

#include "consistentid/image.hpp"
#include "consistentid/regions.hpp"
#include "consistentid/synth_faces.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace cid {

inline constexpr int kCropSize = 16;

// Segmentation seam. Implementations may ignore image_stem; file-backed ones use it to
// locate per-image mask files.
class FaceParser {
 public:
  virtual ~FaceParser() = default;
  virtual RegionMaskSet parse(const Image& image, std::string_view image_stem) const = 0;
};

// Returns the exact ground-truth masks of registered synthetic faces, looked up by image
// content. Unregistered images parse as "no face".
class GroundTruthStub final : public FaceParser {
 public:
  GroundTruthStub() = default;
  explicit GroundTruthStub(const std::vector<SyntheticFace>& faces);
  void add(const SyntheticFace& face);
  std::size_t size() const { return registry_.size(); }
  RegionMaskSet parse(const Image& image, std::string_view image_stem) const override;

 private:
  std::map<std::string, RegionMaskSet> registry_;
};

// Loads `<image_stem>.mask.<label>.pgm` from the first search directory that has it.
class FileMaskParser final : public FaceParser {
 public:
  explicit FileMaskParser(std::vector<std::filesystem::path> search_dirs);
  RegionMaskSet parse(const Image& image, std::string_view image_stem) const override;

 private:
  std::vector<std::filesystem::path> search_dirs_;
};

// Returns one fixed mask set for any image of matching size: a pose-aligned parser for
// generated images, which share the reference face's layout.
class ReferenceAlignedParser final : public FaceParser {
 public:
  explicit ReferenceAlignedParser(RegionMaskSet masks) : masks_(std::move(masks)) {}
  RegionMaskSet parse(const Image& image, std::string_view image_stem) const override;

 private:
  RegionMaskSet masks_;
};

std::string mask_file_name(std::string_view image_stem, RegionLabel label);

// Validates the adapter output (shape, binary values) and recomputes presence flags.
RegionMaskSet parse_face(const Image& image, const FaceParser& parser, std::string_view image_stem = {});

struct RegionCrops {
  std::array<Image, kRegionCount> crops;
  Image face;       // image masked by face_mask
  Mask face_mask;   // union of region masks

  const Image& operator[](RegionLabel label) const { return crops[static_cast<std::size_t>(index_of(label))]; }
};

// Each crop holds the masked pixels of its region's tight bounding box, placed at the
// top-left of a kCropSize x kCropSize zero patch. Boxes larger than the patch are
// box-filtered down to fit, preserving aspect ratio.
RegionCrops crop_regions(const Image& image, const RegionMaskSet& masks);

// Block area-average binarized at 0.5 (ties active).
Mask downsample_mask(const Mask& mask, int height, int width);

}  // namespace cid
