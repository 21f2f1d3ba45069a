#include "groundseg/core.hpp"

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace groundseg {

namespace {

template <typename E, std::size_t N>
E enum_from(std::string_view s, const std::array<std::pair<E, std::string_view>, N>& table,
            std::string_view what) {
  for (const auto& [e, name] : table) {
    if (name == s) return e;
  }
  throw Error("unknown " + std::string(what) + " '" + std::string(s) + "'");
}

constexpr std::array<std::pair<ConceptFamily, std::string_view>, 5> kConceptNames{{
    {ConceptFamily::entities, "entities"},
    {ConceptFamily::spatial_layout, "spatial_layout"},
    {ConceptFamily::relations_events, "relations_events"},
    {ConceptFamily::affordances_functions, "affordances_functions"},
    {ConceptFamily::physics_safety, "physics_safety"},
}};

constexpr std::array<std::pair<Split, std::string_view>, 3> kSplitNames{{
    {Split::sam_seeded, "sam_seeded"},
    {Split::human_annotated, "human_annotated"},
    {Split::train, "train"},
}};

constexpr std::array<std::pair<Provenance, std::string_view>, 5> kProvenanceNames{{
    {Provenance::engine, "engine"},
    {Provenance::coco_instances, "coco_instances"},
    {Provenance::coco_panoptic, "coco_panoptic"},
    {Provenance::refcoco, "refcoco"},
    {Provenance::synthetic_test, "synthetic_test"},
}};

template <typename E, std::size_t N>
std::string_view name_of(E e, const std::array<std::pair<E, std::string_view>, N>& table) {
  for (const auto& [v, name] : table) {
    if (v == e) return name;
  }
  return "?";
}

}  // namespace

std::string_view to_string(ConceptFamily c) { return name_of(c, kConceptNames); }
std::string_view to_string(Split s) { return name_of(s, kSplitNames); }
std::string_view to_string(Provenance p) { return name_of(p, kProvenanceNames); }

std::string_view short_label(ConceptFamily c) {
  switch (c) {
    case ConceptFamily::entities: return "Ent.";
    case ConceptFamily::spatial_layout: return "Spat.";
    case ConceptFamily::relations_events: return "Rel.";
    case ConceptFamily::affordances_functions: return "Aff.";
    case ConceptFamily::physics_safety: return "Phys.";
  }
  return "?";
}

ConceptFamily concept_from_string(std::string_view s) { return enum_from(s, kConceptNames, "concept"); }
Split split_from_string(std::string_view s) { return enum_from(s, kSplitNames, "split"); }
Provenance provenance_from_string(std::string_view s) {
  return enum_from(s, kProvenanceNames, "provenance");
}

void validate_sample(const Sample& s) {
  if (s.sample_id.empty()) throw Error("empty sample_id");
  if (s.image.image_id.empty()) throw Error("sample " + s.sample_id + ": empty image_id");
  if (s.image.width < 1 || s.image.height < 1) {
    throw DimensionError("sample " + s.sample_id + ": image dimensions must be positive");
  }
  if (s.prompt.empty()) throw Error("sample " + s.sample_id + ": empty prompt");
  if (s.mask.height != s.image.height || s.mask.width != s.image.width) {
    throw DimensionError("sample " + s.sample_id + ": mask " + std::to_string(s.mask.height) + "x" +
                         std::to_string(s.mask.width) + " does not match image " +
                         std::to_string(s.image.height) + "x" + std::to_string(s.image.width));
  }
  const bool empty = rle_area(s.mask) == 0;
  if (s.is_negative != empty) {
    throw Error("sample " + s.sample_id + ": is_negative must hold exactly when the mask is empty");
  }
}

nlohmann::ordered_json sample_to_json(const Sample& s) {
  nlohmann::ordered_json j;
  j["sample_id"] = s.sample_id;
  j["image_id"] = s.image.image_id;
  j["image_uri"] = s.image.uri;
  j["width"] = s.image.width;
  j["height"] = s.image.height;
  j["prompt"] = s.prompt;
  j["mask_rle"] = rle_to_json(s.mask);
  j["concept"] = to_string(s.concept_family);
  j["split"] = to_string(s.split);
  j["provenance"] = to_string(s.provenance);
  j["is_negative"] = s.is_negative;
  return j;
}

Sample sample_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys{"sample_id", "image_id", "image_uri", "width",
                                           "height",    "prompt",   "mask_rle",  "concept",
                                           "split",     "provenance", "is_negative"};
  if (!j.is_object()) throw Error("sample record must be a JSON object");
  for (const auto& key : kKeys) {
    if (!j.contains(key)) throw Error("missing key '" + key + "'");
  }
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.contains(key)) throw Error("unknown key '" + key + "'");
  }
  Sample s;
  s.sample_id = j.at("sample_id").get<std::string>();
  s.image.image_id = j.at("image_id").get<std::string>();
  s.image.uri = j.at("image_uri").get<std::string>();
  s.image.width = j.at("width").get<int>();
  s.image.height = j.at("height").get<int>();
  s.prompt = j.at("prompt").get<std::string>();
  s.mask = rle_from_json(j.at("mask_rle"));
  s.concept_family = concept_from_string(j.at("concept").get<std::string>());
  s.split = split_from_string(j.at("split").get<std::string>());
  s.provenance = provenance_from_string(j.at("provenance").get<std::string>());
  s.is_negative = j.at("is_negative").get<bool>();
  validate_sample(s);
  return s;
}

DatasetManifest parse_manifest(std::string_view text) {
  DatasetManifest m;
  std::unordered_map<std::string, std::size_t> seen_ids;
  std::unordered_map<std::string, ImageRecord> images;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto end = text.find('\n', pos);
    const std::string_view line =
        text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos);
    pos = end == std::string_view::npos ? text.size() : end + 1;
    ++line_no;
    if (line.empty()) {
      if (pos >= text.size()) break;
      throw ParseError(line_no, "blank line");
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (line_no == 1 && j.is_object() && j.contains("schema_version") && !j.contains("sample_id")) {
      const int version = j.at("schema_version").get<int>();
      if (version > DatasetManifest::kSchemaVersion || version < 1) {
        throw ParseError(line_no, "unsupported schema_version " + std::to_string(version));
      }
      m.schema_version = version;
      if (j.contains("metadata")) {
        for (const auto& [k, v] : j.at("metadata").items()) {
          if (!v.is_string()) throw ParseError(line_no, "metadata values must be strings");
          m.metadata[k] = v.get<std::string>();
        }
      }
      continue;
    }
    Sample s;
    try {
      s = sample_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("bad field type: ") + e.what());
    } catch (const Error& e) {
      throw ParseError(line_no, e.what());
    }
    if (const auto it = seen_ids.find(s.sample_id); it != seen_ids.end()) {
      throw ParseError(line_no, "duplicate sample_id '" + s.sample_id + "' (first on line " +
                                    std::to_string(it->second) + ")");
    }
    seen_ids.emplace(s.sample_id, line_no);
    if (const auto it = images.find(s.image.image_id); it != images.end() && !(it->second == s.image)) {
      throw ParseError(line_no, "image_id '" + s.image.image_id + "' redeclared with different uri or size");
    }
    images.emplace(s.image.image_id, s.image);
    m.samples.push_back(std::move(s));
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

std::string serialize_manifest(const DatasetManifest& m) {
  nlohmann::ordered_json header;
  header["schema_version"] = m.schema_version;
  header["metadata"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : m.metadata) header["metadata"][k] = v;
  std::string out = header.dump();
  out.push_back('\n');
  std::set<std::string> ids;
  for (const auto& s : m.samples) {
    validate_sample(s);
    if (!ids.insert(s.sample_id).second) throw Error("duplicate sample_id '" + s.sample_id + "'");
    out += sample_to_json(s).dump();
    out.push_back('\n');
  }
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  static std::atomic<std::uint64_t> counter{0};
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid()) + "." + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string() + ": " + ec.message());
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_manifest(manifest));
}

std::size_t word_count(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (const char ch : text) {
    const bool space = ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' || ch == '\v';
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

SplitStats manifest_stats(const DatasetManifest& manifest) {
  SplitStats st;
  st.total = manifest.samples.size();
  double sum = 0.0;
  for (const auto& s : manifest.samples) {
    ++st.per_split[s.split];
    ++st.per_concept[s.concept_family];
    sum += static_cast<double>(word_count(s.prompt));
  }
  if (st.total == 0) return st;
  const double n = static_cast<double>(st.total);
  st.prompt_word_mean = sum / n;
  double sq = 0.0;
  for (const auto& s : manifest.samples) {
    const double d = static_cast<double>(word_count(s.prompt)) - st.prompt_word_mean;
    sq += d * d;
  }
  st.prompt_word_std = std::sqrt(sq / n);
  return st;
}

nlohmann::ordered_json stats_to_json(const SplitStats& st) {
  nlohmann::ordered_json j;
  j["total"] = st.total;
  j["per_split"] = nlohmann::ordered_json::object();
  for (const auto s : kAllSplits) {
    const auto it = st.per_split.find(s);
    j["per_split"][std::string(to_string(s))] = it == st.per_split.end() ? 0 : it->second;
  }
  j["per_concept"] = nlohmann::ordered_json::object();
  for (const auto c : kAllConcepts) {
    const auto it = st.per_concept.find(c);
    j["per_concept"][std::string(to_string(c))] = it == st.per_concept.end() ? 0 : it->second;
  }
  j["prompt_word_mean"] = st.prompt_word_mean;
  j["prompt_word_std"] = st.prompt_word_std;
  return j;
}

}  // namespace groundseg
