#pragma once

// Benchmark scoring: per-sample-mean IoU (gIoU), cumulative IoU (cIoU) and
// per-concept report tables.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundseg/core.hpp"
#include "groundseg/mask.hpp"

namespace groundseg {

struct EvalPair {
  std::string sample_id;
  ConceptFamily concept_family = ConceptFamily::entities;
  BinaryMask gt;
  BinaryMask pred;
};

/// Mean per-sample IoU x 100. Empty ground truth scores 1 only for an empty prediction.
[[nodiscard]] double giou(const std::vector<EvalPair>& pairs);

/// Summed intersections over summed unions x 100; 100 when every union is empty.
[[nodiscard]] double ciou(const std::vector<EvalPair>& pairs);

struct ConceptReport {
  double overall_giou = 0.0;
  double overall_ciou = 0.0;
  std::size_t n = 0;
  // Absent buckets are omitted rather than reported as zero.
  std::map<ConceptFamily, double> per_concept_giou;
  std::map<ConceptFamily, double> per_concept_ciou;
  std::map<ConceptFamily, std::size_t> per_concept_n;
};

[[nodiscard]] ConceptReport per_concept_report(const std::vector<EvalPair>& pairs);

/// JSON form; concept keys follow the fixed All, Ent., Spat., Rel., Aff., Phys. order.
[[nodiscard]] nlohmann::ordered_json report_to_json(const ConceptReport& report);

/// Aligned plain-text table with columns All, Ent., Spat., Rel., Aff., Phys.
[[nodiscard]] std::string report_to_table(const ConceptReport& report, const std::string& row_label);

}  // namespace groundseg
