#include "groundseg/metrics.hpp"

#include <algorithm>
#include <cstdio>

namespace groundseg {

namespace {

void require_non_empty(const std::vector<EvalPair>& pairs) {
  if (pairs.empty()) throw Error("cannot score an empty list of pairs");
}

}  // namespace

double giou(const std::vector<EvalPair>& pairs) {
  require_non_empty(pairs);
  double sum = 0.0;
  for (const auto& p : pairs) sum += binary_iou(p.gt, p.pred);
  return 100.0 * sum / static_cast<double>(pairs.size());
}

double ciou(const std::vector<EvalPair>& pairs) {
  require_non_empty(pairs);
  std::uint64_t inter = 0;
  std::uint64_t uni = 0;
  for (const auto& p : pairs) {
    const auto oc = overlap_counts(p.gt, p.pred);
    inter += oc.intersection;
    uni += oc.union_;
  }
  if (uni == 0) return 100.0;
  return 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
}

ConceptReport per_concept_report(const std::vector<EvalPair>& pairs) {
  require_non_empty(pairs);
  ConceptReport report;
  report.n = pairs.size();
  report.overall_giou = giou(pairs);
  report.overall_ciou = ciou(pairs);
  std::map<ConceptFamily, std::vector<EvalPair>> buckets;
  for (const auto& p : pairs) buckets[p.concept_family].push_back(p);
  for (const auto& [c, bucket] : buckets) {
    report.per_concept_giou[c] = giou(bucket);
    report.per_concept_ciou[c] = ciou(bucket);
    report.per_concept_n[c] = bucket.size();
  }
  return report;
}

nlohmann::ordered_json report_to_json(const ConceptReport& report) {
  nlohmann::ordered_json j;
  j["n"] = report.n;
  auto cell = [](double giou_v, double ciou_v, std::size_t n) {
    nlohmann::ordered_json c;
    c["giou"] = giou_v;
    c["ciou"] = ciou_v;
    c["n"] = n;
    return c;
  };
  j["columns"] = nlohmann::ordered_json::object();
  j["columns"]["All"] = cell(report.overall_giou, report.overall_ciou, report.n);
  for (const auto c : kAllConcepts) {
    const auto it = report.per_concept_giou.find(c);
    if (it == report.per_concept_giou.end()) continue;
    j["columns"][std::string(short_label(c))] =
        cell(it->second, report.per_concept_ciou.at(c), report.per_concept_n.at(c));
  }
  return j;
}

std::string report_to_table(const ConceptReport& report, const std::string& row_label) {
  std::string out;
  char buf[256];
  const int label_w = std::max<int>(10, static_cast<int>(row_label.size()) + 5);
  std::snprintf(buf, sizeof buf, "%-*s", label_w, "Metric");
  out += buf;
  std::snprintf(buf, sizeof buf, " %8s", "All");
  out += buf;
  for (const auto c : kAllConcepts) {
    std::snprintf(buf, sizeof buf, " %8s", std::string(short_label(c)).c_str());
    out += buf;
  }
  out += "\n";
  auto row = [&](const std::string& name, double overall, const std::map<ConceptFamily, double>& per) {
    std::snprintf(buf, sizeof buf, "%-*s", label_w, name.c_str());
    out += buf;
    std::snprintf(buf, sizeof buf, " %8.2f", overall);
    out += buf;
    for (const auto c : kAllConcepts) {
      const auto it = per.find(c);
      if (it == per.end()) {
        std::snprintf(buf, sizeof buf, " %8s", "-");
      } else {
        std::snprintf(buf, sizeof buf, " %8.2f", it->second);
      }
      out += buf;
    }
    out += "\n";
  };
  row(row_label + " gIoU", report.overall_giou, report.per_concept_giou);
  row(row_label + " cIoU", report.overall_ciou, report.per_concept_ciou);
  return out;
}

}  // namespace groundseg
