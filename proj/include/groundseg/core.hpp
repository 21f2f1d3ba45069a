#pragma once

// Domain records shared across the framework and the line-delimited manifest format.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "groundseg/mask.hpp"

namespace groundseg {

enum class ConceptFamily { entities, spatial_layout, relations_events, affordances_functions, physics_safety };

inline constexpr std::array<ConceptFamily, 5> kAllConcepts{
    ConceptFamily::entities, ConceptFamily::spatial_layout, ConceptFamily::relations_events,
    ConceptFamily::affordances_functions, ConceptFamily::physics_safety};

enum class Split { sam_seeded, human_annotated, train };
inline constexpr std::array<Split, 3> kAllSplits{Split::sam_seeded, Split::human_annotated, Split::train};

enum class Provenance { engine, coco_instances, coco_panoptic, refcoco, synthetic_test };

[[nodiscard]] std::string_view to_string(ConceptFamily c);
[[nodiscard]] std::string_view to_string(Split s);
[[nodiscard]] std::string_view to_string(Provenance p);
/// Short column header used in report tables ("Ent.", "Spat.", ...).
[[nodiscard]] std::string_view short_label(ConceptFamily c);

[[nodiscard]] ConceptFamily concept_from_string(std::string_view s);
[[nodiscard]] Split split_from_string(std::string_view s);
[[nodiscard]] Provenance provenance_from_string(std::string_view s);

struct ImageRecord {
  std::string image_id;
  std::string uri;
  int width = 0;
  int height = 0;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct Sample {
  std::string sample_id;
  ImageRecord image;
  std::string prompt;
  MaskRLE mask;
  ConceptFamily concept_family = ConceptFamily::entities;
  Split split = Split::train;
  Provenance provenance = Provenance::engine;
  bool is_negative = false;

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// Throws Error describing the first violated Sample invariant.
void validate_sample(const Sample& sample);

[[nodiscard]] nlohmann::ordered_json sample_to_json(const Sample& sample);
[[nodiscard]] Sample sample_from_json(const nlohmann::json& j);

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;

  int schema_version = kSchemaVersion;
  std::map<std::string, std::string> metadata;
  std::vector<Sample> samples;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Parses a manifest file. Errors carry the offending 1-based line number.
[[nodiscard]] DatasetManifest load_manifest(const std::filesystem::path& path);
[[nodiscard]] DatasetManifest parse_manifest(std::string_view text);

/// Canonical serialization: header line then one sample per line, keys in fixed order.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
[[nodiscard]] std::string serialize_manifest(const DatasetManifest& manifest);

struct SplitStats {
  std::size_t total = 0;
  std::map<Split, std::size_t> per_split;
  std::map<ConceptFamily, std::size_t> per_concept;
  double prompt_word_mean = 0.0;
  double prompt_word_std = 0.0;
};

[[nodiscard]] SplitStats manifest_stats(const DatasetManifest& manifest);
[[nodiscard]] nlohmann::ordered_json stats_to_json(const SplitStats& stats);

/// Whitespace-delimited token count.
[[nodiscard]] std::size_t word_count(std::string_view text);

/// Writes `content` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace groundseg
