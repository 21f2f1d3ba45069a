#pragma once

// Converts COCO-style instance annotations into a dataset manifest.

#include <string>
#include <string_view>

#include <json.hpp>

#include "groundseg/core.hpp"
#include "groundseg/mask.hpp"

namespace groundseg::coco {

/// Decodes the compact string form of a COCO RLE (column-major counts).
[[nodiscard]] MaskRLE decode_compressed_counts(std::string_view s, int height, int width);

/// Fills polygons ([x0, y0, x1, y1, ...] lists, even-odd rule) sampling pixel centres.
[[nodiscard]] BinaryMask rasterize_polygons(const nlohmann::json& polygons, int height, int width);

/// The mask of one annotation's "segmentation" field (polygons, RLE or compressed RLE).
[[nodiscard]] MaskRLE segmentation_mask(const nlohmann::json& segmentation, int height, int width);

struct ConvertOptions {
  Provenance provenance = Provenance::coco_instances;
  Split split = Split::train;
  bool skip_crowd = true;
};

/// One sample per annotation, prompted with its category name (or, when the
/// annotation carries "sentences", one sample per sentence). Image uris are
/// the COCO file_name values.
[[nodiscard]] DatasetManifest convert(const nlohmann::json& coco, const ConvertOptions& options = {});

}  // namespace groundseg::coco
