#include "consistentid/face_parsing.hpp"

#include "consistentid/digest.hpp"
#include "consistentid/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cid {

namespace {

std::string image_digest(const Image& image) {
  std::vector<std::uint8_t> bytes(3 * sizeof(int) + image.data.size() * sizeof(double));
  const int dims[3] = {image.height, image.width, image.channels};
  std::memcpy(bytes.data(), dims, sizeof(dims));
  std::memcpy(bytes.data() + sizeof(dims), image.data.data(), image.data.size() * sizeof(double));
  return sha256_hex(bytes);
}

struct Box {
  int y0 = 0, x0 = 0, y1 = -1, x1 = -1;  // inclusive
  int height() const { return y1 - y0 + 1; }
  int width() const { return x1 - x0 + 1; }
};

Box bounding_box(const Mask& m) {
  Box b{m.height, m.width, -1, -1};
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      b.y0 = std::min(b.y0, y);
      b.x0 = std::min(b.x0, x);
      b.y1 = std::max(b.y1, y);
      b.x1 = std::max(b.x1, x);
    }
  }
  return b;
}

}  // namespace

GroundTruthStub::GroundTruthStub(const std::vector<SyntheticFace>& faces) {
  for (const auto& f : faces) add(f);
}

void GroundTruthStub::add(const SyntheticFace& face) { registry_[image_digest(face.image)] = face.masks; }

RegionMaskSet GroundTruthStub::parse(const Image& image, std::string_view) const {
  auto it = registry_.find(image_digest(image));
  if (it == registry_.end()) return RegionMaskSet::empty(image.height, image.width);
  return it->second;
}

FileMaskParser::FileMaskParser(std::vector<std::filesystem::path> search_dirs)
    : search_dirs_(std::move(search_dirs)) {}

std::string mask_file_name(std::string_view image_stem, RegionLabel label) {
  return std::string(image_stem) + ".mask." + std::string(region_name(label)) + ".pgm";
}

RegionMaskSet FileMaskParser::parse(const Image& image, std::string_view image_stem) const {
  if (image_stem.empty()) throw ParserFailure("file mask parser needs an image stem");
  std::array<Mask, kRegionCount> masks;
  int files_found = 0;
  for (RegionLabel label : kRegionOrder) {
    const std::string name = mask_file_name(image_stem, label);
    bool found = false;
    for (const auto& dir : search_dirs_) {
      const auto path = dir / name;
      if (std::filesystem::exists(path)) {
        masks[static_cast<std::size_t>(index_of(label))] = read_pgm(path);
        found = true;
        ++files_found;
        break;
      }
    }
    // A missing file means the region is absent.
    if (!found) masks[static_cast<std::size_t>(index_of(label))] = Mask(image.height, image.width);
  }
  if (files_found == 0) throw ParserFailure("no mask files found for image '" + std::string(image_stem) + "'");
  return RegionMaskSet::from_masks(std::move(masks));
}

RegionMaskSet ReferenceAlignedParser::parse(const Image& image, std::string_view) const {
  if (image.height != masks_.height() || image.width != masks_.width()) {
    throw ParserFailure("reference-aligned parser: image size differs from reference masks");
  }
  return masks_;
}

RegionMaskSet parse_face(const Image& image, const FaceParser& parser, std::string_view image_stem) {
  RegionMaskSet raw = parser.parse(image, image_stem);
  std::array<Mask, kRegionCount> masks;
  for (int j = 0; j < kRegionCount; ++j) {
    Mask& m = raw.masks[static_cast<std::size_t>(j)];
    if (m.height != image.height || m.width != image.width || m.data.size() != static_cast<std::size_t>(image.height) * image.width) {
      throw ParserFailure("parser returned a mask of the wrong shape for region " +
                          std::string(region_name(static_cast<RegionLabel>(j))));
    }
    for (auto v : m.data) {
      if (v > 1) throw ParserFailure("parser returned non-binary mask values");
    }
    masks[static_cast<std::size_t>(j)] = std::move(m);
  }
  return RegionMaskSet::from_masks(std::move(masks));
}

RegionCrops crop_regions(const Image& image, const RegionMaskSet& masks) {
  if (masks.height() != image.height || masks.width() != image.width) throw ShapeError("crop_regions: mask/image size mismatch");
  RegionCrops out;
  out.face_mask = masks.union_mask();
  out.face = Image(image.height, image.width, image.channels);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (!out.face_mask.at(y, x)) continue;
      for (int c = 0; c < image.channels; ++c) out.face.at(y, x, c) = image.at(y, x, c);
    }
  }
  for (int j = 0; j < kRegionCount; ++j) {
    const Mask& m = masks.masks[static_cast<std::size_t>(j)];
    Image crop(kCropSize, kCropSize, image.channels);
    const Box b = bounding_box(m);
    if (b.y1 >= 0) {
      if (b.height() <= kCropSize && b.width() <= kCropSize) {
        for (int y = 0; y < b.height(); ++y) {
          for (int x = 0; x < b.width(); ++x) {
            if (!m.at(b.y0 + y, b.x0 + x)) continue;
            for (int c = 0; c < image.channels; ++c) crop.at(y, x, c) = image.at(b.y0 + y, b.x0 + x, c);
          }
        }
      } else {
        const double s = static_cast<double>(kCropSize) / std::max(b.height(), b.width());
        const int oh = std::max(1, static_cast<int>(std::lround(b.height() * s)));
        const int ow = std::max(1, static_cast<int>(std::lround(b.width() * s)));
        for (int oy = 0; oy < oh; ++oy) {
          const int sy0 = b.y0 + oy * b.height() / oh;
          const int sy1 = std::max(sy0 + 1, b.y0 + (oy + 1) * b.height() / oh);
          for (int ox = 0; ox < ow; ++ox) {
            const int sx0 = b.x0 + ox * b.width() / ow;
            const int sx1 = std::max(sx0 + 1, b.x0 + (ox + 1) * b.width() / ow);
            const double n = static_cast<double>((sy1 - sy0) * (sx1 - sx0));
            for (int c = 0; c < image.channels; ++c) {
              double acc = 0.0;
              for (int y = sy0; y < sy1; ++y) {
                for (int x = sx0; x < sx1; ++x) acc += m.at(y, x) ? image.at(y, x, c) : 0.0;
              }
              crop.at(oy, ox, c) = acc / n;
            }
          }
        }
      }
    }
    out.crops[static_cast<std::size_t>(j)] = std::move(crop);
  }
  return out;
}

Mask downsample_mask(const Mask& mask, int height, int width) {
  if (height <= 0 || width <= 0 || height > mask.height || width > mask.width || mask.height % height != 0 ||
      mask.width % width != 0) {
    throw DimensionError("downsample_mask: " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " is not divisible into " + std::to_string(height) + "x" + std::to_string(width));
  }
  const int fy = mask.height / height;
  const int fx = mask.width / width;
  const int block = fy * fx;
  Mask out(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      int active = 0;
      for (int dy = 0; dy < fy; ++dy) {
        for (int dx = 0; dx < fx; ++dx) active += mask.at(y * fy + dy, x * fx + dx);
      }
      // mean >= 0.5 in exact integer arithmetic
      out.at(y, x) = (2 * active >= block) ? 1 : 0;
    }
  }
  return out;
}

}  // namespace cid
