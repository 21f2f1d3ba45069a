#pragma once

// Generate-and-verify data engine: scene descriptions, grounding, mask
// verification and refinement, concept prompts, alignment checks and negative
// prompts. Every backend call is cached by content hash and every image keeps
// a state file so interrupted runs resume without re-querying.

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundseg/backends.hpp"
#include "groundseg/core.hpp"
#include "groundseg/image.hpp"
#include "groundseg/mask.hpp"

namespace groundseg::engine {

class ConfigError : public Error {
 public:
  using Error::Error;
};

// ---- templates --------------------------------------------------------------------

enum class TemplateKind { scene, mask_verify, mask_compare, positive, align_verify, negative_generation, negative_verification };

inline constexpr std::array<TemplateKind, 7> kAllTemplateKinds{
    TemplateKind::scene,        TemplateKind::mask_verify,         TemplateKind::mask_compare,
    TemplateKind::positive,     TemplateKind::align_verify,        TemplateKind::negative_generation,
    TemplateKind::negative_verification};

[[nodiscard]] std::string to_string(TemplateKind k);

/// Placeholders the stage using `kind` substitutes. A template must use all of them and no others.
[[nodiscard]] const std::vector<std::string>& template_placeholders(TemplateKind kind);

struct MetaPromptTemplate {
  std::optional<ConceptFamily> concept_family;  // empty for the shared fallback
  TemplateKind kind = TemplateKind::scene;
  std::string text;
};

/// Substitutes `{name}` placeholders. Braces around anything that is not a bare
/// lower-case identifier are literal text.
[[nodiscard]] std::string render_template(const std::string& text, const std::map<std::string, std::string>& values);

/// False for scene, mask_verify and mask_compare, which are asked before any concept applies.
[[nodiscard]] bool concept_specific(TemplateKind kind);

/// Templates loaded from `<root>/<concept>/<kind>.txt`, falling back to
/// `<root>/common/<kind>.txt`. Concept-independent kinds only use `common/`.
class TemplateRegistry {
 public:
  /// Loads and validates. Throws ConfigError on a missing file or a placeholder mismatch.
  static TemplateRegistry load(const std::filesystem::path& root);

  void set(MetaPromptTemplate t);
  [[nodiscard]] const MetaPromptTemplate& get(TemplateKind kind, std::optional<ConceptFamily> c = std::nullopt) const;
  [[nodiscard]] std::string render(TemplateKind kind, std::optional<ConceptFamily> c,
                                   const std::map<std::string, std::string>& values) const;
  /// Throws ConfigError when a needed template is missing or uses the wrong placeholders.
  void validate() const;

 private:
  std::map<std::pair<int, int>, MetaPromptTemplate> specific_;
  std::map<int, MetaPromptTemplate> common_;
};

// ---- caching --------------------------------------------------------------------------

/// Content-addressed JSON store under `dir`; writes are atomic.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir);

  /// SHA-256 over (stage, backend id, canonical request JSON).
  [[nodiscard]] static std::string key(const std::string& stage, const std::string& backend_id,
                                       const nlohmann::json& request);
  [[nodiscard]] std::optional<nlohmann::json> get(const std::string& key);
  void put(const std::string& key, const nlohmann::json& value);

  [[nodiscard]] std::size_t hits() const { return hits_.load(); }
  [[nodiscard]] std::size_t misses() const { return misses_.load(); }

 private:
  [[nodiscard]] std::filesystem::path path_for(const std::string& key) const;

  std::filesystem::path dir_;
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> misses_{0};
};

/// Backend decorators that consult the cache before calling through. Only
/// definitive answers are stored; transport failures are not.
class CachedVlm : public backends::VlmClient {
 public:
  CachedVlm(backends::VlmClient& inner, ResponseCache& cache) : inner_(inner), cache_(cache) {}
  [[nodiscard]] std::string id() const override { return inner_.id(); }
  [[nodiscard]] backends::VlmResponse complete(const backends::VlmRequest& req) override;

 private:
  backends::VlmClient& inner_;
  ResponseCache& cache_;
};

class CachedDetector : public backends::Detector {
 public:
  CachedDetector(backends::Detector& inner, ResponseCache& cache) : inner_(inner), cache_(cache) {}
  [[nodiscard]] std::string id() const override { return inner_.id(); }
  [[nodiscard]] BoundingBox detect(const RgbImage& image, const std::string& image_id, const std::string& text) override;

 private:
  backends::Detector& inner_;
  ResponseCache& cache_;
};

class CachedSegmenter : public backends::Segmenter {
 public:
  CachedSegmenter(backends::Segmenter& inner, ResponseCache& cache) : inner_(inner), cache_(cache) {}
  [[nodiscard]] std::string id() const override { return inner_.id(); }
  [[nodiscard]] backends::SegmenterCandidate segment_from_box(const RgbImage& image, const BoundingBox& box) override;
  [[nodiscard]] std::vector<backends::SegmenterCandidate> segment_from_grid(
      const RgbImage& image, const std::vector<std::pair<int, int>>& points) override;

 private:
  backends::Segmenter& inner_;
  ResponseCache& cache_;
};

// ---- stage records ------------------------------------------------------------------------

struct RegionDescription {
  int index = 0;  // 1-based position in the scene response
  std::string text;
  std::string image_id;
};

struct GroundedRegion {
  RegionDescription description;
  BoundingBox box;
  BinaryMask initial_mask;
  std::optional<BinaryMask> refined_mask;
  std::optional<BinaryMask> final_mask;
  std::map<std::string, backends::Verdict> verdicts;  // "consistency"
  std::string selected;                              // "original" or "refined" after refinement
};

struct CandidatePrompt {
  std::string prompt;
  ConceptFamily concept_family = ConceptFamily::entities;
  std::vector<int> region_indices;
  std::optional<backends::Verdict> aligned;
};

/// One row of the audit log. `event` is "drop" for every discarded item,
/// "flag" for notes that do not discard anything, "warning" for fallbacks.
struct AuditRow {
  std::string image_id;
  std::string stage;
  std::string event;
  std::string item;
  std::string reason;
  std::string detail;

  friend bool operator==(const AuditRow&, const AuditRow&) = default;
};

[[nodiscard]] nlohmann::ordered_json audit_to_json(const AuditRow& row);
[[nodiscard]] AuditRow audit_from_json(const nlohmann::json& j);

// ---- configuration ---------------------------------------------------------------------------

struct EngineConfig {
  std::vector<ConceptFamily> concepts{kAllConcepts.begin(), kAllConcepts.end()};
  int min_descriptions = 5;
  int max_descriptions = 7;
  int max_description_words = 15;
  int max_prompts_per_concept = 3;
  int grid_side = 16;
  double grid_box_dilation = 0.10;
  float overlay_alpha = 0.45F;
  int workers = 1;
  Split split = Split::train;  // train for synthesis, sam_seeded for benchmark curation
  bool generate_negatives = true;
  bool refine_seed_masks = false;
  std::uint64_t seed = 0;
  std::filesystem::path templates_dir = "templates";
  backends::BackendConfig vlm = backends::backend_config("mock");
  backends::BackendConfig detector = backends::backend_config("mock");
  backends::BackendConfig segmenter = backends::backend_config("flood_fill");

  void validate() const;
};

[[nodiscard]] nlohmann::ordered_json to_json(const EngineConfig& c);
/// Unknown keys are rejected; missing keys keep their defaults.
[[nodiscard]] EngineConfig engine_config_from_json(const nlohmann::json& j);

// ---- per-image engine -------------------------------------------------------------------------

/// Everything a single image produced.
struct ImageOutcome {
  std::string image_id;
  std::vector<Sample> samples;
  std::vector<AuditRow> audit;
};

/// Seed regions for one image (benchmark mode): stand in for Stages 1 and 2.
struct SeedRegion {
  std::string description;
  BinaryMask mask;
};

/// Stage operations over one image. Backends passed in are used as is; wrap
/// them in the Cached* decorators for caching.
class Engine {
 public:
  Engine(const EngineConfig& cfg, const TemplateRegistry& templates, backends::VlmClient& vlm,
         backends::Detector& detector, backends::Segmenter& segmenter);

  /// Audit rows produced so far by the stage calls on this object.
  [[nodiscard]] const std::vector<AuditRow>& audit() const { return audit_; }
  void clear_audit() { audit_.clear(); }

  [[nodiscard]] std::vector<RegionDescription> stage1_describe(const ImageRecord& record, const RgbImage& image);
  [[nodiscard]] std::optional<GroundedRegion> stage2_ground(const RgbImage& image, const RegionDescription& desc);
  /// Sets verdicts["consistency"]. Unparseable or failed calls count as reject.
  [[nodiscard]] GroundedRegion stage3_verify(const RgbImage& image, GroundedRegion region);
  /// Requires an accepted region; sets refined_mask, final_mask and selected.
  [[nodiscard]] GroundedRegion stage3_refine(const RgbImage& image, GroundedRegion region);
  /// `regions` are the accepted ones; their final masks form the overlay.
  [[nodiscard]] std::vector<CandidatePrompt> stage4_generate(const ImageRecord& record, const RgbImage& image,
                                                             const std::vector<GroundedRegion>& regions,
                                                             ConceptFamily concept_family);
  [[nodiscard]] CandidatePrompt stage5_align(const ImageRecord& record, const RgbImage& image, CandidatePrompt prompt,
                                             const BinaryMask& union_mask);
  /// At most `max_count` verified negatives with empty masks.
  [[nodiscard]] std::vector<Sample> generate_negatives(const ImageRecord& record, const RgbImage& image,
                                                       const std::vector<GroundedRegion>& regions,
                                                       ConceptFamily concept_family,
                                                       const std::vector<std::string>& positive_prompts,
                                                       std::size_t max_count);

  /// Runs every stage over one image. `seeds` replaces Stages 1-2 when given.
  /// `on_stage` is told each completed stage name.
  [[nodiscard]] ImageOutcome process_image(const ImageRecord& record, const RgbImage& image,
                                           const std::vector<SeedRegion>* seeds = nullptr,
                                           const std::function<void(const std::string&)>& on_stage = {});

 private:
  void drop(const std::string& image_id, const std::string& stage, const std::string& item, const std::string& reason,
            const std::string& detail = "");
  void note(const std::string& event, const std::string& image_id, const std::string& stage, const std::string& item,
            const std::string& reason, const std::string& detail = "");
  [[nodiscard]] RgbImage overlay(const RgbImage& image, const std::vector<std::pair<int, const BinaryMask*>>& marks) const;

  const EngineConfig& cfg_;
  const TemplateRegistry& templates_;
  backends::VlmClient& vlm_;
  backends::Detector& detector_;
  backends::Segmenter& segmenter_;
  std::vector<AuditRow> audit_;
};

/// Normalized "segment the <category>" test against the accepted region descriptions.
[[nodiscard]] bool is_trivial_prompt(const std::string& prompt, const std::vector<std::string>& accepted_descriptions);

// ---- runs ---------------------------------------------------------------------------------------

struct RunInputs {
  std::vector<ImageRecord> images;
  std::filesystem::path image_root;  // image uris are relative to it
  std::map<std::string, std::vector<SeedRegion>> seeds;  // by image_id; empty outside benchmark mode
};

/// Every image file (png, jpg, jpeg) under `dir`, sorted by file name; ids are the file stems.
[[nodiscard]] RunInputs scan_images(const std::filesystem::path& dir);

/// Groups a seed-mask manifest by image; each sample's prompt becomes the region description.
[[nodiscard]] std::map<std::string, std::vector<SeedRegion>> seeds_from_manifest(const DatasetManifest& manifest);

struct Backends {
  backends::VlmClient* vlm = nullptr;
  backends::Detector* detector = nullptr;
  backends::Segmenter* segmenter = nullptr;
};

struct RunSummary {
  std::string run_id;
  std::size_t images = 0;
  std::size_t images_resumed = 0;  // loaded from a finished state file
  std::size_t images_processed = 0;
  std::size_t images_failed = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t drops = 0;
  std::size_t cache_hits = 0;
  std::size_t cache_misses = 0;
};

[[nodiscard]] nlohmann::ordered_json to_json(const RunSummary& s);

struct RunHooks {
  /// Called after each image finishes, with the number finished so far in this
  /// invocation. Throwing aborts the run (used to simulate a kill).
  std::function<void(std::size_t)> after_image;
};

/// Runs the engine over `inputs`, writing `out/manifest.jsonl`, `out/audit.jsonl`,
/// `out/cache/` and `out/state/`. Images with a finished state file are loaded,
/// not reprocessed. Outputs list images in input order, so they do not depend on
/// worker scheduling.
RunSummary run_pipeline(const RunInputs& inputs, const EngineConfig& cfg, const TemplateRegistry& templates,
                        const Backends& backends, const std::filesystem::path& out, const RunHooks& hooks = {});

/// Stage markers recorded for `image_id` under `out/state/`; empty when none.
[[nodiscard]] std::vector<std::string> stage_markers(const std::filesystem::path& out, const std::string& image_id);

}  // namespace groundseg::engine
