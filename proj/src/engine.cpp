#include "groundseg/engine.hpp"

#include <algorithm>
#include <cctype>
#include <exception>
#include <fstream>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "groundseg/hashing.hpp"
#include "groundseg/overlay.hpp"

namespace groundseg::engine {

using backends::ResponseSchema;
using backends::Verdict;
using backends::VlmRequest;

// ---- templates --------------------------------------------------------------------

std::string to_string(TemplateKind k) {
  switch (k) {
    case TemplateKind::scene: return "scene";
    case TemplateKind::mask_verify: return "mask_verify";
    case TemplateKind::mask_compare: return "mask_compare";
    case TemplateKind::positive: return "positive";
    case TemplateKind::align_verify: return "align_verify";
    case TemplateKind::negative_generation: return "negative_generation";
    case TemplateKind::negative_verification: return "negative_verification";
  }
  return "scene";
}

const std::vector<std::string>& template_placeholders(TemplateKind kind) {
  static const std::map<TemplateKind, std::vector<std::string>> kTable{
      {TemplateKind::scene, {"max_regions", "max_words", "min_regions"}},
      {TemplateKind::mask_verify, {"description"}},
      {TemplateKind::mask_compare, {"description"}},
      {TemplateKind::positive, {"concept", "max_prompts", "regions"}},
      {TemplateKind::align_verify, {"prompt"}},
      {TemplateKind::negative_generation, {"concept", "count", "positives"}},
      {TemplateKind::negative_verification, {"prompt"}},
  };
  return kTable.at(kind);
}

bool concept_specific(TemplateKind kind) {
  return kind != TemplateKind::scene && kind != TemplateKind::mask_verify && kind != TemplateKind::mask_compare;
}

namespace {

const std::regex& placeholder_re() {
  static const std::regex re(R"(\{([a-z_]+)\})");
  return re;
}

std::set<std::string> placeholders_in(const std::string& text) {
  std::set<std::string> out;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), placeholder_re()); it != std::sregex_iterator(); ++it) {
    out.insert((*it)[1].str());
  }
  return out;
}

void check_template(const MetaPromptTemplate& t, const std::string& where) {
  const auto& need = template_placeholders(t.kind);
  const std::set<std::string> want(need.begin(), need.end());
  const auto have = placeholders_in(t.text);
  for (const auto& n : want) {
    if (!have.contains(n)) throw ConfigError(where + ": missing placeholder {" + n + "}");
  }
  for (const auto& n : have) {
    if (!want.contains(n)) throw ConfigError(where + ": unknown placeholder {" + n + "}");
  }
}

std::string template_where(const MetaPromptTemplate& t) {
  return (t.concept_family ? std::string(to_string(*t.concept_family)) : "common") + "/" + to_string(t.kind) + ".txt";
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Readable names substituted for {concept}.
std::string concept_title(ConceptFamily c) {
  switch (c) {
    case ConceptFamily::entities: return "Entities";
    case ConceptFamily::spatial_layout: return "Spatial & Layout";
    case ConceptFamily::relations_events: return "Relations & Events";
    case ConceptFamily::affordances_functions: return "Affordances & Functions";
    case ConceptFamily::physics_safety: return "Physics & Safety";
  }
  return "";
}

}  // namespace

std::string render_template(const std::string& text, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t last = 0;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), placeholder_re()); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    const auto found = values.find(m[1].str());
    if (found == values.end()) throw ConfigError("no value for placeholder {" + m[1].str() + "}");
    out.append(text, last, static_cast<std::size_t>(m.position(0)) - last);
    out += found->second;
    last = static_cast<std::size_t>(m.position(0) + m.length(0));
  }
  out.append(text, last, std::string::npos);
  return out;
}

TemplateRegistry TemplateRegistry::load(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw ConfigError("template directory " + root.string() + " does not exist");
  TemplateRegistry reg;
  for (const auto kind : kAllTemplateKinds) {
    const auto common = root / "common" / (to_string(kind) + ".txt");
    if (std::filesystem::exists(common)) reg.set({std::nullopt, kind, read_text(common)});
    if (!concept_specific(kind)) continue;
    for (const auto c : kAllConcepts) {
      const auto specific = root / std::string(to_string(c)) / (to_string(kind) + ".txt");
      if (std::filesystem::exists(specific)) reg.set({c, kind, read_text(specific)});
    }
  }
  reg.validate();
  return reg;
}

void TemplateRegistry::set(MetaPromptTemplate t) {
  check_template(t, template_where(t));
  if (t.concept_family) {
    specific_[{static_cast<int>(*t.concept_family), static_cast<int>(t.kind)}] = std::move(t);
  } else {
    common_[static_cast<int>(t.kind)] = std::move(t);
  }
}

const MetaPromptTemplate& TemplateRegistry::get(TemplateKind kind, std::optional<ConceptFamily> c) const {
  if (c && concept_specific(kind)) {
    const auto it = specific_.find({static_cast<int>(*c), static_cast<int>(kind)});
    if (it != specific_.end()) return it->second;
  }
  const auto it = common_.find(static_cast<int>(kind));
  if (it == common_.end()) {
    throw ConfigError("no " + to_string(kind) + " template" + (c ? " for " + std::string(to_string(*c)) : std::string()));
  }
  return it->second;
}

std::string TemplateRegistry::render(TemplateKind kind, std::optional<ConceptFamily> c,
                                     const std::map<std::string, std::string>& values) const {
  return render_template(get(kind, c).text, values);
}

void TemplateRegistry::validate() const {
  for (const auto kind : kAllTemplateKinds) {
    if (!concept_specific(kind)) {
      (void)get(kind);
      continue;
    }
    for (const auto c : kAllConcepts) (void)get(kind, c);
  }
}

// ---- caching --------------------------------------------------------------------------

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

std::string ResponseCache::key(const std::string& stage, const std::string& backend_id, const nlohmann::json& request) {
  return sha256_hex(canonical_json(nlohmann::json{{"stage", stage}, {"backend", backend_id}, {"request", request}}));
}

std::filesystem::path ResponseCache::path_for(const std::string& key) const {
  return dir_ / key.substr(0, 2) / (key + ".json");
}

std::optional<nlohmann::json> ResponseCache::get(const std::string& key) {
  const auto p = path_for(key);
  std::ifstream in(p, std::ios::binary);
  if (!in) {
    ++misses_;
    return std::nullopt;
  }
  try {
    auto j = nlohmann::json::parse(in);
    ++hits_;
    return j;
  } catch (const nlohmann::json::parse_error&) {
    // A torn or hand-edited entry is treated as absent and rewritten.
    ++misses_;
    return std::nullopt;
  }
}

void ResponseCache::put(const std::string& key, const nlohmann::json& value) {
  write_file_atomic(path_for(key), value.dump());
}

backends::VlmResponse CachedVlm::complete(const VlmRequest& req) {
  const auto k = ResponseCache::key("vlm:" + req.task, inner_.id(), backends::request_json(req));
  if (auto hit = cache_.get(k)) return {hit->at("text").get<std::string>(), std::nullopt, 0.0};
  auto r = inner_.complete(req);
  cache_.put(k, {{"text", r.text}});
  return r;
}

BoundingBox CachedDetector::detect(const RgbImage& image, const std::string& image_id, const std::string& text) {
  const nlohmann::json request{{"image", image_digest(image)}, {"image_id", image_id}, {"text", text}};
  const auto k = ResponseCache::key("detect", inner_.id(), request);
  if (auto hit = cache_.get(k)) {
    if (hit->at("box").is_null()) throw backends::NoDetection(hit->value("detail", "no detection"));
    const auto b = hit->at("box").get<std::vector<int>>();
    return {b.at(0), b.at(1), b.at(2), b.at(3)};
  }
  try {
    const BoundingBox b = inner_.detect(image, image_id, text);
    cache_.put(k, {{"box", {b.x_min, b.y_min, b.x_max, b.y_max}}});
    return b;
  } catch (const backends::NoDetection& e) {
    cache_.put(k, {{"box", nullptr}, {"detail", e.what()}});
    throw;
  }
}

namespace {

nlohmann::json candidates_to_json(const std::vector<backends::SegmenterCandidate>& cands) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cands) arr.push_back({{"mask", rle_to_json(rle_encode(c.mask))}, {"score", c.score}});
  return arr;
}

std::vector<backends::SegmenterCandidate> candidates_from_json(const nlohmann::json& arr) {
  std::vector<backends::SegmenterCandidate> out;
  for (const auto& c : arr) out.push_back({rle_decode(rle_from_json(c.at("mask"))), c.at("score").get<double>()});
  return out;
}

}  // namespace

backends::SegmenterCandidate CachedSegmenter::segment_from_box(const RgbImage& image, const BoundingBox& box) {
  const nlohmann::json request{{"image", image_digest(image)}, {"box", {box.x_min, box.y_min, box.x_max, box.y_max}}};
  const auto k = ResponseCache::key("segment_box", inner_.id(), request);
  if (auto hit = cache_.get(k)) return candidates_from_json(*hit).at(0);
  auto c = inner_.segment_from_box(image, box);
  cache_.put(k, candidates_to_json({c}));
  return c;
}

std::vector<backends::SegmenterCandidate> CachedSegmenter::segment_from_grid(const RgbImage& image,
                                                                             const std::vector<std::pair<int, int>>& points) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& [r, c] : points) pts.push_back({r, c});
  const nlohmann::json request{{"image", image_digest(image)}, {"points", pts}};
  const auto k = ResponseCache::key("segment_grid", inner_.id(), request);
  if (auto hit = cache_.get(k)) return candidates_from_json(*hit);
  auto cands = inner_.segment_from_grid(image, points);
  cache_.put(k, candidates_to_json(cands));
  return cands;
}

// ---- audit -------------------------------------------------------------------------------

nlohmann::ordered_json audit_to_json(const AuditRow& row) {
  nlohmann::ordered_json j;
  j["image_id"] = row.image_id;
  j["stage"] = row.stage;
  j["event"] = row.event;
  j["item"] = row.item;
  j["reason"] = row.reason;
  j["detail"] = row.detail;
  return j;
}

AuditRow audit_from_json(const nlohmann::json& j) {
  return {j.at("image_id").get<std::string>(), j.at("stage").get<std::string>(), j.at("event").get<std::string>(),
          j.at("item").get<std::string>(),     j.at("reason").get<std::string>(), j.value("detail", "")};
}

// ---- configuration ---------------------------------------------------------------------------

void EngineConfig::validate() const {
  if (concepts.empty()) throw ConfigError("engine needs at least one concept");
  if (std::set<ConceptFamily>(concepts.begin(), concepts.end()).size() != concepts.size()) {
    throw ConfigError("engine concepts contain duplicates");
  }
  if (min_descriptions < 1 || max_descriptions < min_descriptions) {
    throw ConfigError("engine needs 1 <= min_descriptions <= max_descriptions");
  }
  if (max_description_words < 1) throw ConfigError("max_description_words must be positive");
  if (max_prompts_per_concept < 1) throw ConfigError("max_prompts_per_concept must be positive");
  if (grid_side < 1) throw ConfigError("grid_side must be positive");
  if (grid_box_dilation < 0.0) throw ConfigError("grid_box_dilation must be >= 0");
  if (overlay_alpha < 0.0F || overlay_alpha > 1.0F) throw ConfigError("overlay_alpha must lie in [0, 1]");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  try {
    vlm.validate();
    detector.validate();
    segmenter.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

nlohmann::ordered_json to_json(const EngineConfig& c) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json concepts = nlohmann::ordered_json::array();
  for (const auto cf : c.concepts) concepts.push_back(std::string(to_string(cf)));
  j["concepts"] = concepts;
  j["min_descriptions"] = c.min_descriptions;
  j["max_descriptions"] = c.max_descriptions;
  j["max_description_words"] = c.max_description_words;
  j["max_prompts_per_concept"] = c.max_prompts_per_concept;
  j["grid_side"] = c.grid_side;
  j["grid_box_dilation"] = c.grid_box_dilation;
  j["overlay_alpha"] = c.overlay_alpha;
  j["workers"] = c.workers;
  j["split"] = std::string(to_string(c.split));
  j["generate_negatives"] = c.generate_negatives;
  j["refine_seed_masks"] = c.refine_seed_masks;
  j["seed"] = c.seed;
  j["templates_dir"] = c.templates_dir.string();
  j["vlm"] = backends::to_json(c.vlm);
  j["detector"] = backends::to_json(c.detector);
  j["segmenter"] = backends::to_json(c.segmenter);
  return j;
}

EngineConfig engine_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys{
      "concepts",  "min_descriptions", "max_descriptions", "max_description_words", "max_prompts_per_concept",
      "grid_side", "grid_box_dilation", "overlay_alpha",   "workers",               "split",
      "generate_negatives", "refine_seed_masks", "seed",   "templates_dir",         "vlm",
      "detector",  "segmenter"};
  if (!j.is_object()) throw ConfigError("engine config must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (!kKeys.contains(k)) throw ConfigError("engine config: unknown key '" + k + "'");
  }
  EngineConfig c;
  try {
    if (j.contains("concepts")) {
      c.concepts.clear();
      for (const auto& s : j.at("concepts")) c.concepts.push_back(concept_from_string(s.get<std::string>()));
    }
    c.min_descriptions = j.value("min_descriptions", c.min_descriptions);
    c.max_descriptions = j.value("max_descriptions", c.max_descriptions);
    c.max_description_words = j.value("max_description_words", c.max_description_words);
    c.max_prompts_per_concept = j.value("max_prompts_per_concept", c.max_prompts_per_concept);
    c.grid_side = j.value("grid_side", c.grid_side);
    c.grid_box_dilation = j.value("grid_box_dilation", c.grid_box_dilation);
    c.overlay_alpha = j.value("overlay_alpha", c.overlay_alpha);
    c.workers = j.value("workers", c.workers);
    if (j.contains("split")) c.split = split_from_string(j.at("split").get<std::string>());
    c.generate_negatives = j.value("generate_negatives", c.generate_negatives);
    c.refine_seed_masks = j.value("refine_seed_masks", c.refine_seed_masks);
    c.seed = j.value("seed", c.seed);
    c.templates_dir = j.value("templates_dir", c.templates_dir.string());
    if (j.contains("vlm")) c.vlm = backends::backend_config_from_json(j.at("vlm"));
    if (j.contains("detector")) c.detector = backends::backend_config_from_json(j.at("detector"));
    if (j.contains("segmenter")) c.segmenter = backends::backend_config_from_json(j.at("segmenter"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("engine config: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("engine config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- helpers -----------------------------------------------------------------------------------

namespace {

std::vector<std::string> normalized_tokens(const std::string& text) {
  std::string s;
  s.reserve(text.size());
  for (const char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    s.push_back(std::isalnum(u) ? static_cast<char>(std::tolower(u)) : ' ');
  }
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string normalized(const std::string& text) {
  std::string out;
  for (const auto& t : normalized_tokens(text)) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

bool contains_sequence(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

std::string join_indices(const std::vector<int>& v) {
  std::string s;
  for (const int i : v) s += (s.empty() ? "" : ",") + std::to_string(i);
  return s;
}

std::string safe_name(const std::string& id) {
  std::string s;
  for (const char ch : id) {
    const auto u = static_cast<unsigned char>(ch);
    s.push_back(std::isalnum(u) || ch == '-' || ch == '_' || ch == '.' ? ch : '_');
  }
  return s.substr(0, 80) + "-" + sha256_hex(id).substr(0, 8);
}

}  // namespace

bool is_trivial_prompt(const std::string& prompt, const std::vector<std::string>& accepted_descriptions) {
  auto tokens = normalized_tokens(prompt);
  if (tokens.size() < 2 || tokens[0] != "segment") return false;
  std::size_t start = 1;
  if (tokens[1] == "the" || tokens[1] == "a" || tokens[1] == "an") start = 2;
  const std::vector<std::string> category(tokens.begin() + static_cast<std::ptrdiff_t>(start), tokens.end());
  if (category.empty()) return false;
  int matches = 0;
  for (const auto& d : accepted_descriptions) {
    if (contains_sequence(normalized_tokens(d), category)) ++matches;
  }
  return matches == 1;
}

// ---- engine --------------------------------------------------------------------------------------

Engine::Engine(const EngineConfig& cfg, const TemplateRegistry& templates, backends::VlmClient& vlm,
               backends::Detector& detector, backends::Segmenter& segmenter)
    : cfg_(cfg), templates_(templates), vlm_(vlm), detector_(detector), segmenter_(segmenter) {}

void Engine::drop(const std::string& image_id, const std::string& stage, const std::string& item,
                  const std::string& reason, const std::string& detail) {
  note("drop", image_id, stage, item, reason, detail);
}

void Engine::note(const std::string& event, const std::string& image_id, const std::string& stage,
                  const std::string& item, const std::string& reason, const std::string& detail) {
  audit_.push_back({image_id, stage, event, item, reason, detail});
}

RgbImage Engine::overlay(const RgbImage& image, const std::vector<std::pair<int, const BinaryMask*>>& marks) const {
  std::vector<MarkedRegion> regions;
  regions.reserve(marks.size());
  for (const auto& [idx, m] : marks) regions.push_back({idx, *m});
  return render_marks_overlay(image, regions, OverlayOptions{cfg_.overlay_alpha});
}

std::vector<RegionDescription> Engine::stage1_describe(const ImageRecord& record, const RgbImage& image) {
  const std::string& id = record.image_id;
  VlmRequest req;
  req.task = "scene";
  req.user_text = templates_.render(TemplateKind::scene, std::nullopt,
                                    {{"min_regions", std::to_string(cfg_.min_descriptions)},
                                     {"max_regions", std::to_string(cfg_.max_descriptions)},
                                     {"max_words", std::to_string(cfg_.max_description_words)}});
  req.images = {image};
  req.response_schema = ResponseSchema::json_object;
  req.context = {{"image_id", id}};

  nlohmann::json parsed;
  try {
    parsed = *backends::vlm_complete(vlm_, req).parsed;
  } catch (const backends::SchemaError& e) {
    drop(id, "stage1", "image", "unparseable", e.what());
    return {};
  } catch (const backends::BackendError& e) {
    drop(id, "stage1", "image", "backend", e.what());
    return {};
  }
  if (!parsed.contains("regions") || !parsed.at("regions").is_array()) {
    drop(id, "stage1", "image", "malformed_response", "expected a \"regions\" array");
    return {};
  }

  std::vector<RegionDescription> kept;
  int index = 0;
  for (const auto& entry : parsed.at("regions")) {
    ++index;
    const std::string item = "region:" + std::to_string(index);
    if (!entry.is_string()) {
      drop(id, "stage1", item, "malformed", "description is not a string");
      continue;
    }
    const auto text = entry.get<std::string>();
    const auto words = word_count(text);
    if (words == 0) {
      drop(id, "stage1", item, "empty_description");
    } else if (words > static_cast<std::size_t>(cfg_.max_description_words)) {
      drop(id, "stage1", item, "too_long", std::to_string(words) + " words: " + text);
    } else if (kept.size() >= static_cast<std::size_t>(cfg_.max_descriptions)) {
      drop(id, "stage1", item, "over_limit", text);
    } else {
      kept.push_back({index, text, id});
    }
  }
  if (kept.empty()) {
    drop(id, "stage1", "image", "no_descriptions");
  } else if (kept.size() < static_cast<std::size_t>(cfg_.min_descriptions)) {
    note("flag", id, "stage1", "image", "low_yield", std::to_string(kept.size()) + " descriptions");
  }
  return kept;
}

std::optional<GroundedRegion> Engine::stage2_ground(const RgbImage& image, const RegionDescription& desc) {
  const std::string item = "region:" + std::to_string(desc.index);
  GroundedRegion region;
  region.description = desc;
  try {
    bool clamped = false;
    region.box = backends::detect_region(detector_, image, desc.image_id, desc.text, &clamped);
    if (clamped) note("flag", desc.image_id, "stage2", item, "box_clamped");
    region.initial_mask = backends::segment_from_box(segmenter_, image, region.box).mask;
  } catch (const backends::NoDetection& e) {
    drop(desc.image_id, "stage2", item, "no_detection", e.what());
    return std::nullopt;
  } catch (const backends::BackendError& e) {
    drop(desc.image_id, "stage2", item, "backend", e.what());
    return std::nullopt;
  }
  if (region.initial_mask.count() == 0) {
    drop(desc.image_id, "stage2", item, "empty_mask");
    return std::nullopt;
  }
  return region;
}

GroundedRegion Engine::stage3_verify(const RgbImage& image, GroundedRegion region) {
  const auto& desc = region.description;
  const std::string item = "region:" + std::to_string(desc.index);
  VlmRequest req;
  req.task = "mask_verify";
  req.user_text = templates_.render(TemplateKind::mask_verify, std::nullopt, {{"description", desc.text}});
  req.images = {image, overlay(image, {{desc.index, &region.initial_mask}})};
  req.response_schema = ResponseSchema::accept_reject;
  req.context = {{"image_id", desc.image_id}, {"region", desc.index}, {"description", desc.text}};
  try {
    const auto verdict = backends::verdict_from_string(backends::vlm_complete(vlm_, req).parsed->get<std::string>());
    region.verdicts["consistency"] = verdict;
    if (verdict == Verdict::reject) drop(desc.image_id, "stage3", item, "consistency_reject", desc.text);
  } catch (const backends::SchemaError& e) {
    region.verdicts["consistency"] = Verdict::reject;
    drop(desc.image_id, "stage3", item, "unparseable", e.raw_text());
  } catch (const backends::BackendError& e) {
    region.verdicts["consistency"] = Verdict::reject;
    drop(desc.image_id, "stage3", item, "backend", e.what());
  }
  return region;
}

GroundedRegion Engine::stage3_refine(const RgbImage& image, GroundedRegion region) {
  const auto& desc = region.description;
  const auto v = region.verdicts.find("consistency");
  if (v == region.verdicts.end() || v->second != Verdict::accept) {
    throw Error("stage3_refine needs a region that passed the consistency check");
  }
  const std::string item = "region:" + std::to_string(desc.index);
  region.final_mask = region.initial_mask;
  region.selected = "original";

  const auto bbox = mask_bbox(region.initial_mask);
  const BoundingBox area = dilate_box(*bbox, cfg_.grid_box_dilation, image.width, image.height);
  std::vector<backends::SegmenterCandidate> cands;
  try {
    cands = backends::segment_from_grid(segmenter_, image, backends::point_grid(area, cfg_.grid_side));
  } catch (const backends::BackendError& e) {
    note("warning", desc.image_id, "stage3", item, "refine_backend", e.what());
    return region;
  }
  const BinaryMask* best = nullptr;
  double best_iou = -1.0;
  for (const auto& c : cands) {
    if (c.mask.count() == 0) continue;
    const double iou = binary_iou(c.mask, region.initial_mask);
    if (iou > best_iou) {
      best_iou = iou;
      best = &c.mask;
    }
  }
  if (best == nullptr) {
    note("warning", desc.image_id, "stage3", item, "no_grid_candidates");
    return region;
  }
  region.refined_mask = *best;
  if (*best == region.initial_mask) return region;

  VlmRequest req;
  req.task = "mask_compare";
  req.user_text = templates_.render(TemplateKind::mask_compare, std::nullopt, {{"description", desc.text}});
  req.images = {image, overlay(image, {{desc.index, &region.initial_mask}}), overlay(image, {{desc.index, &*best}})};
  req.response_schema = ResponseSchema::json_object;
  req.context = {{"image_id", desc.image_id}, {"region", desc.index}, {"description", desc.text}};
  try {
    const auto parsed = *backends::vlm_complete(vlm_, req).parsed;
    const std::string choice = parsed.value("choice", "");
    if (choice == "refined") {
      region.final_mask = *best;
      region.selected = "refined";
    } else if (choice != "original") {
      note("warning", desc.image_id, "stage3", item, "compare_unparseable", parsed.dump());
    }
  } catch (const backends::SchemaError& e) {
    note("warning", desc.image_id, "stage3", item, "compare_unparseable", e.raw_text());
  } catch (const backends::BackendError& e) {
    note("warning", desc.image_id, "stage3", item, "compare_backend", e.what());
  }
  return region;
}

std::vector<CandidatePrompt> Engine::stage4_generate(const ImageRecord& record, const RgbImage& image,
                                                     const std::vector<GroundedRegion>& regions, ConceptFamily c) {
  const std::string& id = record.image_id;
  const std::string cname(to_string(c));
  if (regions.empty()) throw Error("stage4_generate needs at least one accepted region");

  std::vector<std::pair<int, const BinaryMask*>> marks;
  std::set<int> valid;
  std::vector<std::string> descriptions;
  std::string listing;
  nlohmann::json indices = nlohmann::json::array();
  for (const auto& r : regions) {
    if (!r.final_mask) throw Error("stage4_generate needs refined regions");
    marks.emplace_back(r.description.index, &*r.final_mask);
    valid.insert(r.description.index);
    descriptions.push_back(r.description.text);
    listing += std::to_string(r.description.index) + ". " + r.description.text + "\n";
    indices.push_back(r.description.index);
  }

  VlmRequest req;
  req.task = "positive";
  req.user_text = templates_.render(TemplateKind::positive, c,
                                    {{"concept", concept_title(c)},
                                     {"regions", listing},
                                     {"max_prompts", std::to_string(cfg_.max_prompts_per_concept)}});
  req.images = {image, overlay(image, marks)};
  req.response_schema = ResponseSchema::json_object;
  req.context = {{"image_id", id}, {"concept", cname}, {"regions", indices}};

  nlohmann::json parsed;
  try {
    parsed = *backends::vlm_complete(vlm_, req).parsed;
  } catch (const backends::SchemaError& e) {
    drop(id, "stage4", "concept:" + cname, "unparseable", e.raw_text());
    return {};
  } catch (const backends::BackendError& e) {
    drop(id, "stage4", "concept:" + cname, "backend", e.what());
    return {};
  }
  if (!parsed.contains("prompts") || !parsed.at("prompts").is_array()) {
    drop(id, "stage4", "concept:" + cname, "malformed_response", "expected a \"prompts\" array");
    return {};
  }

  std::vector<CandidatePrompt> kept;
  std::set<std::string> seen;
  int k = 0;
  for (const auto& entry : parsed.at("prompts")) {
    ++k;
    const std::string item = "prompt:" + cname + ":" + std::to_string(k);
    const bool well_formed = entry.is_object() && entry.contains("prompt") && entry.at("prompt").is_string() &&
                             entry.contains("regions") && entry.at("regions").is_array() &&
                             !entry.at("regions").empty() &&
                             std::all_of(entry.at("regions").begin(), entry.at("regions").end(),
                                         [](const auto& x) { return x.is_number_integer(); });
    if (!well_formed || word_count(entry.at("prompt").get<std::string>()) == 0) {
      drop(id, "stage4", item, "malformed", entry.dump());
      continue;
    }
    CandidatePrompt p;
    p.prompt = entry.at("prompt").get<std::string>();
    p.concept_family = c;
    std::set<int> idx;
    for (const auto& x : entry.at("regions")) idx.insert(x.get<int>());
    p.region_indices.assign(idx.begin(), idx.end());
    const bool dangling = std::any_of(idx.begin(), idx.end(), [&](int i) { return !valid.contains(i); });
    if (dangling) {
      drop(id, "stage4", item, "dangling_region", p.prompt + " -> [" + join_indices(p.region_indices) + "]");
    } else if (is_trivial_prompt(p.prompt, descriptions)) {
      drop(id, "stage4", item, "trivial", p.prompt);
    } else if (!seen.insert(normalized(p.prompt)).second) {
      drop(id, "stage4", item, "duplicate", p.prompt);
    } else if (kept.size() >= static_cast<std::size_t>(cfg_.max_prompts_per_concept)) {
      drop(id, "stage4", item, "over_limit", p.prompt);
    } else {
      kept.push_back(std::move(p));
    }
  }
  return kept;
}

CandidatePrompt Engine::stage5_align(const ImageRecord& record, const RgbImage& image, CandidatePrompt prompt,
                                     const BinaryMask& union_mask) {
  const std::string cname(to_string(prompt.concept_family));
  const std::string item = "prompt:" + cname + ":" + prompt.prompt;
  VlmRequest req;
  req.task = "align_verify";
  req.user_text = templates_.render(TemplateKind::align_verify, prompt.concept_family, {{"prompt", prompt.prompt}});
  req.images = {image, overlay(image, {{1, &union_mask}})};
  req.response_schema = ResponseSchema::accept_reject;
  req.context = {{"image_id", record.image_id}, {"concept", cname}, {"prompt", prompt.prompt},
                 {"regions", prompt.region_indices}};
  try {
    prompt.aligned = backends::verdict_from_string(backends::vlm_complete(vlm_, req).parsed->get<std::string>());
    if (*prompt.aligned == Verdict::reject) drop(record.image_id, "stage5", item, "align_reject");
  } catch (const backends::SchemaError& e) {
    prompt.aligned = Verdict::reject;
    drop(record.image_id, "stage5", item, "unparseable", e.raw_text());
  } catch (const backends::BackendError& e) {
    prompt.aligned = Verdict::reject;
    drop(record.image_id, "stage5", item, "backend", e.what());
  }
  return prompt;
}

std::vector<Sample> Engine::generate_negatives(const ImageRecord& record, const RgbImage& image,
                                               const std::vector<GroundedRegion>& regions, ConceptFamily c,
                                               const std::vector<std::string>& positive_prompts,
                                               std::size_t max_count) {
  (void)regions;
  const std::string& id = record.image_id;
  const std::string cname(to_string(c));
  std::string listing;
  for (const auto& p : positive_prompts) listing += "- " + p + "\n";

  VlmRequest req;
  req.task = "negative_generation";
  req.user_text = templates_.render(TemplateKind::negative_generation, c,
                                    {{"concept", concept_title(c)},
                                     {"positives", listing},
                                     {"count", std::to_string(max_count)}});
  req.images = {image};
  req.response_schema = ResponseSchema::json_object;
  req.context = {{"image_id", id}, {"concept", cname}};

  nlohmann::json parsed;
  try {
    parsed = *backends::vlm_complete(vlm_, req).parsed;
  } catch (const backends::SchemaError& e) {
    drop(id, "negatives", "concept:" + cname, "unparseable", e.raw_text());
    return {};
  } catch (const backends::BackendError& e) {
    drop(id, "negatives", "concept:" + cname, "backend", e.what());
    return {};
  }
  if (!parsed.contains("prompts") || !parsed.at("prompts").is_array()) {
    drop(id, "negatives", "concept:" + cname, "malformed_response", "expected a \"prompts\" array");
    return {};
  }

  std::set<std::string> seen;
  for (const auto& p : positive_prompts) seen.insert(normalized(p));
  std::vector<Sample> out;
  int k = 0;
  for (const auto& entry : parsed.at("prompts")) {
    ++k;
    const std::string item = "negative:" + cname + ":" + std::to_string(k);
    if (!entry.is_string() || word_count(entry.get<std::string>()) == 0) {
      drop(id, "negatives", item, "malformed", entry.dump());
      continue;
    }
    const auto text = entry.get<std::string>();
    if (!seen.insert(normalized(text)).second) {
      drop(id, "negatives", item, "duplicate", text);
      continue;
    }
    if (out.size() >= max_count) {
      drop(id, "negatives", item, "over_pairing", text);
      continue;
    }
    VlmRequest check;
    check.task = "negative_verification";
    check.user_text = templates_.render(TemplateKind::negative_verification, c, {{"prompt", text}});
    check.images = {image};
    check.response_schema = ResponseSchema::accept_reject;
    check.context = {{"image_id", id}, {"concept", cname}, {"prompt", text}};
    try {
      const auto v = backends::verdict_from_string(backends::vlm_complete(vlm_, check).parsed->get<std::string>());
      if (v == Verdict::reject) {
        drop(id, "negatives", item, "negative_reject", text);
        continue;
      }
    } catch (const backends::SchemaError& e) {
      drop(id, "negatives", item, "unparseable", e.raw_text());
      continue;
    } catch (const backends::BackendError& e) {
      drop(id, "negatives", item, "backend", e.what());
      continue;
    }
    Sample s;
    s.sample_id = id + ":" + cname + ":n" + std::to_string(out.size() + 1);
    s.image = record;
    s.prompt = text;
    s.mask = rle_encode(BinaryMask(record.height, record.width));
    s.concept_family = c;
    s.split = cfg_.split;
    s.provenance = Provenance::engine;
    s.is_negative = true;
    out.push_back(std::move(s));
  }
  return out;
}

ImageOutcome Engine::process_image(const ImageRecord& record, const RgbImage& image,
                                   const std::vector<SeedRegion>* seeds,
                                   const std::function<void(const std::string&)>& on_stage) {
  if (image.height != record.height || image.width != record.width) {
    throw DimensionError("image " + record.image_id + " is " + std::to_string(image.height) + "x" +
                         std::to_string(image.width) + " but its record says " + std::to_string(record.height) + "x" +
                         std::to_string(record.width));
  }
  audit_.clear();
  const auto mark = [&](const std::string& stage) {
    if (on_stage) on_stage(stage);
  };
  const std::string& id = record.image_id;
  ImageOutcome outcome;
  outcome.image_id = id;
  const auto finish = [&]() {
    outcome.audit = std::move(audit_);
    audit_.clear();
    return outcome;
  };

  std::vector<GroundedRegion> grounded;
  if (seeds != nullptr) {
    int index = 0;
    for (const auto& seed : *seeds) {
      ++index;
      const std::string item = "region:" + std::to_string(index);
      if (seed.mask.height() != image.height || seed.mask.width() != image.width) {
        drop(id, "seed", item, "dimension_mismatch");
        continue;
      }
      const auto box = mask_bbox(seed.mask);
      if (!box) {
        drop(id, "seed", item, "empty_mask");
        continue;
      }
      GroundedRegion r;
      r.description = {index, seed.description, id};
      r.box = *box;
      r.initial_mask = seed.mask;
      grounded.push_back(std::move(r));
    }
    mark("stage1");
    mark("stage2");
  } else {
    const auto descriptions = stage1_describe(record, image);
    mark("stage1");
    if (descriptions.empty()) return finish();
    for (const auto& d : descriptions) {
      if (auto r = stage2_ground(image, d)) grounded.push_back(std::move(*r));
    }
    mark("stage2");
  }

  std::vector<GroundedRegion> accepted;
  for (auto& r : grounded) {
    r = stage3_verify(image, std::move(r));
    if (r.verdicts.at("consistency") != Verdict::accept) continue;
    if (seeds != nullptr && !cfg_.refine_seed_masks) {
      r.final_mask = r.initial_mask;
      r.selected = "original";
    } else {
      r = stage3_refine(image, std::move(r));
    }
    accepted.push_back(std::move(r));
  }
  mark("stage3");
  if (accepted.empty()) {
    note("flag", id, "stage3", "image", "no_accepted_regions");
    return finish();
  }

  std::map<int, const GroundedRegion*> by_index;
  for (const auto& r : accepted) by_index[r.description.index] = &r;

  std::vector<std::pair<ConceptFamily, std::vector<CandidatePrompt>>> generated;
  for (const auto c : cfg_.concepts) generated.emplace_back(c, stage4_generate(record, image, accepted, c));
  mark("stage4");

  std::map<ConceptFamily, std::vector<std::string>> positives;
  for (auto& [c, prompts] : generated) {
    const std::string cname(to_string(c));
    for (auto& p : prompts) {
      BinaryMask u(image.height, image.width);
      for (const int i : p.region_indices) u = mask_union(u, *by_index.at(i)->final_mask);
      p = stage5_align(record, image, std::move(p), u);
      if (p.aligned != Verdict::accept) continue;
      Sample s;
      s.sample_id = id + ":" + cname + ":p" + std::to_string(positives[c].size() + 1);
      s.image = record;
      s.prompt = p.prompt;
      s.mask = rle_encode(u);
      s.concept_family = c;
      s.split = cfg_.split;
      s.provenance = Provenance::engine;
      s.is_negative = false;
      positives[c].push_back(p.prompt);
      outcome.samples.push_back(std::move(s));
    }
  }
  mark("stage5");

  if (cfg_.generate_negatives) {
    for (const auto c : cfg_.concepts) {
      const auto it = positives.find(c);
      if (it == positives.end() || it->second.empty()) continue;
      auto negs = generate_negatives(record, image, accepted, c, it->second, it->second.size());
      for (auto& s : negs) outcome.samples.push_back(std::move(s));
    }
  }
  mark("negatives");
  return finish();
}

// ---- runs ------------------------------------------------------------------------------------------

RunInputs scan_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("image directory " + dir.string() + " does not exist");
  RunInputs in;
  in.image_root = dir;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::set<std::string> ids;
  for (const auto& f : files) {
    const auto id = f.stem().string();
    if (!ids.insert(id).second) throw ConfigError("two images share the id '" + id + "'");
    const RgbImage img = load_image(f);
    in.images.push_back({id, f.filename().string(), img.width, img.height});
  }
  return in;
}

std::map<std::string, std::vector<SeedRegion>> seeds_from_manifest(const DatasetManifest& manifest) {
  std::map<std::string, std::vector<SeedRegion>> out;
  for (const auto& s : manifest.samples) {
    if (s.is_negative) continue;
    out[s.image.image_id].push_back({s.prompt, rle_decode(s.mask)});
  }
  return out;
}

nlohmann::ordered_json to_json(const RunSummary& s) {
  nlohmann::ordered_json j;
  j["run_id"] = s.run_id;
  j["images"] = s.images;
  j["images_resumed"] = s.images_resumed;
  j["images_processed"] = s.images_processed;
  j["images_failed"] = s.images_failed;
  j["positives"] = s.positives;
  j["negatives"] = s.negatives;
  j["drops"] = s.drops;
  j["cache_hits"] = s.cache_hits;
  j["cache_misses"] = s.cache_misses;
  return j;
}

namespace {

std::filesystem::path state_path(const std::filesystem::path& out, const std::string& image_id) {
  return out / "state" / (safe_name(image_id) + ".json");
}

struct ImageState {
  std::vector<std::string> markers;
  bool done = false;
  ImageOutcome outcome;
};

std::optional<ImageState> read_state(const std::filesystem::path& out, const std::string& image_id) {
  std::ifstream in(state_path(out, image_id), std::ios::binary);
  if (!in) return std::nullopt;
  try {
    const auto j = nlohmann::json::parse(in);
    ImageState st;
    st.markers = j.at("markers").get<std::vector<std::string>>();
    st.done = j.at("done").get<bool>();
    st.outcome.image_id = image_id;
    if (st.done) {
      for (const auto& s : j.at("samples")) st.outcome.samples.push_back(sample_from_json(s));
      for (const auto& a : j.at("audit")) st.outcome.audit.push_back(audit_from_json(a));
    }
    return st;
  } catch (const std::exception&) {
    // Unreadable state means the image simply runs again; the cache makes that cheap.
    return std::nullopt;
  }
}

void write_state(const std::filesystem::path& out, const std::string& image_id, const ImageState& st) {
  nlohmann::ordered_json j;
  j["image_id"] = image_id;
  j["markers"] = st.markers;
  j["done"] = st.done;
  nlohmann::ordered_json samples = nlohmann::ordered_json::array();
  nlohmann::ordered_json audit = nlohmann::ordered_json::array();
  if (st.done) {
    for (const auto& s : st.outcome.samples) samples.push_back(sample_to_json(s));
    for (const auto& a : st.outcome.audit) audit.push_back(audit_to_json(a));
  }
  j["samples"] = samples;
  j["audit"] = audit;
  write_file_atomic(state_path(out, image_id), j.dump() + "\n");
}

std::string compute_run_id(const RunInputs& inputs, const EngineConfig& cfg) {
  nlohmann::ordered_json cfg_json = to_json(cfg);
  cfg_json.erase("workers");  // scheduling does not change results
  nlohmann::json images = nlohmann::json::array();
  for (const auto& r : inputs.images) images.push_back({r.image_id, r.uri});
  nlohmann::json seeds = nlohmann::json::object();
  for (const auto& [id, regions] : inputs.seeds) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : regions) arr.push_back({r.description, rle_to_json(rle_encode(r.mask))});
    seeds[id] = arr;
  }
  return sha256_hex(canonical_json({{"config", cfg_json}, {"images", images}, {"seeds", seeds}})).substr(0, 16);
}

}  // namespace

std::vector<std::string> stage_markers(const std::filesystem::path& out, const std::string& image_id) {
  const auto st = read_state(out, image_id);
  return st ? st->markers : std::vector<std::string>{};
}

RunSummary run_pipeline(const RunInputs& inputs, const EngineConfig& cfg, const TemplateRegistry& templates,
                        const Backends& bk, const std::filesystem::path& out, const RunHooks& hooks) {
  cfg.validate();
  templates.validate();
  if (bk.vlm == nullptr || bk.detector == nullptr || bk.segmenter == nullptr) {
    throw ConfigError("run_pipeline needs a VLM, a detector and a segmenter");
  }
  std::set<std::string> ids;
  for (const auto& r : inputs.images) {
    if (!ids.insert(r.image_id).second) throw ConfigError("duplicate image id '" + r.image_id + "'");
  }

  std::filesystem::create_directories(out / "state");
  RunSummary summary;
  summary.run_id = compute_run_id(inputs, cfg);
  summary.images = inputs.images.size();

  const auto run_file = out / "run.json";
  if (std::filesystem::exists(run_file)) {
    std::ifstream in(run_file);
    const auto previous = nlohmann::json::parse(in, nullptr, false);
    if (previous.is_discarded() || previous.value("run_id", "") != summary.run_id) {
      throw ConfigError(out.string() + " holds a different run; use a fresh output directory");
    }
  } else {
    nlohmann::ordered_json j;
    j["run_id"] = summary.run_id;
    j["config"] = to_json(cfg);
    write_file_atomic(run_file, j.dump(2) + "\n");
  }

  ResponseCache cache(out / "cache");
  CachedVlm vlm(*bk.vlm, cache);
  CachedDetector detector(*bk.detector, cache);
  CachedSegmenter segmenter(*bk.segmenter, cache);

  const std::size_t n = inputs.images.size();
  std::vector<std::optional<ImageOutcome>> outcomes(n);
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < n; ++i) {
    if (auto st = read_state(out, inputs.images[i].image_id); st && st->done) {
      outcomes[i] = std::move(st->outcome);
      ++summary.images_resumed;
    } else {
      todo.push_back(i);
    }
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr fatal;
  std::size_t finished = 0;
  std::vector<std::optional<AuditRow>> failures(n);

  auto worker = [&]() {
    Engine engine(cfg, templates, vlm, detector, segmenter);
    while (!abort.load()) {
      const std::size_t t = next.fetch_add(1);
      if (t >= todo.size()) return;
      const std::size_t i = todo[t];
      ImageRecord record = inputs.images[i];
      try {
        const RgbImage image = load_image(inputs.image_root / record.uri);
        record.width = image.width;
        record.height = image.height;
        const auto seed_it = inputs.seeds.find(record.image_id);
        const std::vector<SeedRegion>* seeds = seed_it == inputs.seeds.end() ? nullptr : &seed_it->second;
        ImageState st;
        auto outcome = engine.process_image(record, image, seeds, [&](const std::string& stage) {
          st.markers.push_back(stage);
          write_state(out, record.image_id, st);
        });
        st.done = true;
        st.markers.emplace_back("done");
        st.outcome = outcome;
        write_state(out, record.image_id, st);
        std::lock_guard lock(mu);
        outcomes[i] = std::move(outcome);
        ++summary.images_processed;
        ++finished;
      } catch (const ConfigError&) {
        std::lock_guard lock(mu);
        if (!fatal) fatal = std::current_exception();
        abort = true;
      } catch (const Error& e) {
        std::lock_guard lock(mu);
        failures[i] = AuditRow{record.image_id, "run", "drop", "image", "image_error", e.what()};
        ++summary.images_failed;
        ++finished;
      } catch (...) {
        std::lock_guard lock(mu);
        if (!fatal) fatal = std::current_exception();
        abort = true;
      }
      if (hooks.after_image && !abort.load()) {
        std::lock_guard lock(mu);
        try {
          hooks.after_image(finished);
        } catch (...) {
          if (!fatal) fatal = std::current_exception();
          abort = true;
        }
      }
    }
  };

  const int nworkers = std::max(1, std::min<int>(cfg.workers, static_cast<int>(todo.size())));
  if (nworkers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < nworkers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  DatasetManifest manifest;
  manifest.metadata["generator"] = "groundseg-engine";
  manifest.metadata["run_id"] = summary.run_id;
  manifest.metadata["split"] = std::string(to_string(cfg.split));
  std::string audit_text;
  for (std::size_t i = 0; i < n; ++i) {
    if (outcomes[i]) {
      for (const auto& s : outcomes[i]->samples) {
        manifest.samples.push_back(s);
        (s.is_negative ? summary.negatives : summary.positives)++;
      }
      for (const auto& a : outcomes[i]->audit) {
        audit_text += audit_to_json(a).dump() + "\n";
        if (a.event == "drop") ++summary.drops;
      }
    } else if (failures[i]) {
      audit_text += audit_to_json(*failures[i]).dump() + "\n";
      ++summary.drops;
    }
  }
  save_manifest(manifest, out / "manifest.jsonl");
  write_file_atomic(out / "audit.jsonl", audit_text);
  summary.cache_hits = cache.hits();
  summary.cache_misses = cache.misses();
  return summary;
}

}  // namespace groundseg::engine
