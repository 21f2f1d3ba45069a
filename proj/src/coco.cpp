#include "groundseg/coco.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace groundseg::coco {

MaskRLE decode_compressed_counts(std::string_view s, int height, int width) {
  MaskRLE rle;
  rle.height = height;
  rle.width = width;
  std::vector<std::int64_t> cnts;
  std::size_t p = 0;
  while (p < s.size()) {
    std::int64_t x = 0;
    int k = 0;
    bool more = true;
    while (more) {
      if (p >= s.size()) throw Error("truncated compressed RLE");
      const int c = static_cast<int>(s[p]) - 48;
      if (c < 0 || c > 63) throw Error("invalid character in compressed RLE");
      x |= static_cast<std::int64_t>(c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= -(static_cast<std::int64_t>(1) << (5 * k));
    }
    if (cnts.size() > 2) x += cnts[cnts.size() - 2];
    if (x < 0) throw Error("negative run in compressed RLE");
    cnts.push_back(x);
  }
  rle.counts.assign(cnts.begin(), cnts.end());
  std::uint64_t total = 0;
  for (const auto c : rle.counts) total += c;
  if (total != static_cast<std::uint64_t>(height) * static_cast<std::uint64_t>(width)) {
    throw Error("compressed RLE covers " + std::to_string(total) + " pixels, expected " +
                std::to_string(static_cast<std::int64_t>(height) * width));
  }
  return rle;
}

BinaryMask rasterize_polygons(const nlohmann::json& polygons, int height, int width) {
  BinaryMask mask(height, width);
  for (const auto& poly : polygons) {
    const auto pts = poly.get<std::vector<double>>();
    if (pts.size() < 6 || pts.size() % 2 != 0) throw Error("polygon needs at least three x,y pairs");
    const std::size_t n = pts.size() / 2;
    for (int r = 0; r < height; ++r) {
      const double y = r + 0.5;
      std::vector<double> xs;
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const double yi = pts[2 * i + 1];
        const double yj = pts[2 * j + 1];
        if ((yi > y) != (yj > y)) {
          const double xi = pts[2 * i];
          const double xj = pts[2 * j];
          xs.push_back(xi + (y - yi) * (xj - xi) / (yj - yi));
        }
      }
      std::sort(xs.begin(), xs.end());
      for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
        for (int c = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5))); c < width && c + 0.5 < xs[k + 1]; ++c) {
          mask.set(r, c);
        }
      }
    }
  }
  return mask;
}

MaskRLE segmentation_mask(const nlohmann::json& seg, int height, int width) {
  if (seg.is_array()) return rle_encode(rasterize_polygons(seg, height, width));
  if (!seg.is_object() || !seg.contains("counts")) throw Error("unsupported segmentation encoding");
  const auto& counts = seg.at("counts");
  if (seg.contains("size")) {
    const auto size = seg.at("size").get<std::vector<int>>();
    if (size.size() != 2 || size[0] != height || size[1] != width) throw Error("segmentation size disagrees with image");
  }
  if (counts.is_string()) return decode_compressed_counts(counts.get<std::string>(), height, width);
  nlohmann::json j{{"size", {height, width}}, {"counts", counts}};
  return rle_from_json(j);
}

DatasetManifest convert(const nlohmann::json& coco, const ConvertOptions& options) {
  struct ImageInfo {
    std::string file_name;
    int width = 0;
    int height = 0;
  };
  std::map<std::int64_t, ImageInfo> images;
  for (const auto& im : coco.at("images")) {
    images[im.at("id").get<std::int64_t>()] = {im.at("file_name").get<std::string>(), im.at("width").get<int>(),
                                               im.at("height").get<int>()};
  }
  std::map<std::int64_t, std::string> categories;
  for (const auto& c : coco.value("categories", nlohmann::json::array())) {
    categories[c.at("id").get<std::int64_t>()] = c.at("name").get<std::string>();
  }

  DatasetManifest m;
  std::size_t skipped = 0;
  for (const auto& ann : coco.at("annotations")) {
    if (options.skip_crowd && ann.value("iscrowd", 0) == 1) {
      ++skipped;
      continue;
    }
    const auto ann_id = ann.at("id").get<std::int64_t>();
    const auto img_it = images.find(ann.at("image_id").get<std::int64_t>());
    if (img_it == images.end()) throw Error("annotation " + std::to_string(ann_id) + " names an unknown image");
    const auto& info = img_it->second;
    MaskRLE mask = segmentation_mask(ann.at("segmentation"), info.height, info.width);
    if (rle_area(mask) == 0) {
      ++skipped;
      continue;
    }
    std::vector<std::string> prompts;
    if (ann.contains("sentences")) {
      for (const auto& s : ann.at("sentences")) prompts.push_back(s.is_string() ? s.get<std::string>() : s.at("sent").get<std::string>());
    } else {
      const auto cat = categories.find(ann.at("category_id").get<std::int64_t>());
      if (cat == categories.end()) throw Error("annotation " + std::to_string(ann_id) + " names an unknown category");
      prompts.push_back(cat->second);
    }
    const std::string image_id = std::filesystem::path(info.file_name).stem().string();
    for (std::size_t k = 0; k < prompts.size(); ++k) {
      Sample s;
      s.sample_id = "coco:" + std::to_string(ann_id) + (prompts.size() > 1 ? ":" + std::to_string(k) : "");
      s.image = {image_id, info.file_name, info.width, info.height};
      s.prompt = prompts[k];
      s.mask = mask;
      s.concept_family = ConceptFamily::entities;
      s.split = options.split;
      s.provenance = options.provenance;
      validate_sample(s);
      m.samples.push_back(std::move(s));
    }
  }
  m.metadata["generator"] = "convert-coco";
  m.metadata["provenance"] = to_string(options.provenance);
  m.metadata["skipped_annotations"] = std::to_string(skipped);
  return m;
}

}  // namespace groundseg::coco
