#pragma once

// Clients for the external services the data engine consumes: a VLM, an
// open-vocabulary detector and a promptable segmenter. Each has a live HTTP
// implementation and deterministic offline mocks.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "groundseg/error.hpp"
#include "groundseg/image.hpp"
#include "groundseg/mask.hpp"

namespace groundseg::backends {

enum class ResponseSchema { free_text, json_object, accept_reject };
enum class Verdict { accept, reject };

[[nodiscard]] std::string to_string(ResponseSchema s);
[[nodiscard]] std::string to_string(Verdict v);
[[nodiscard]] Verdict verdict_from_string(const std::string& s);

struct VlmRequest {
  std::string task;  // engine stage asking, e.g. "scene" or "mask_verify"
  std::string system_text;
  std::string user_text;
  std::vector<RgbImage> images;  // at most four
  ResponseSchema response_schema = ResponseSchema::free_text;
  // Structured facts about the request (image id, concept, region indices).
  // Live clients ignore it; mocks answer from it; it is part of the request hash.
  nlohmann::json context = nlohmann::json::object();

  void validate() const;
};

/// Canonical JSON of a request. Images are represented by their digests.
[[nodiscard]] nlohmann::json request_json(const VlmRequest& req);
/// SHA-256 of the canonical request JSON; names fixture files.
[[nodiscard]] std::string request_hash(const VlmRequest& req);

struct VlmResponse {
  std::string text;
  std::optional<nlohmann::json> parsed;  // present iff the schema is structured
  double latency_ms = 0.0;
};

struct SegmenterCandidate {
  BinaryMask mask;
  double score = 0.0;
};

struct BackendConfig {
  std::string kind;  // "http", "mock", "box_fill", "flood_fill"
  std::string endpoint;
  std::string api_key_env;
  std::string model;
  int timeout_ms = 60000;
  int max_retries = 3;
  int backoff_initial_ms = 500;
  std::optional<std::uint64_t> seed;
  std::filesystem::path fixtures_dir;
  nlohmann::json options = nlohmann::json::object();  // passed through to live services

  void validate() const;
};

/// Default-valued config of the given kind.
[[nodiscard]] inline BackendConfig backend_config(std::string kind) {
  BackendConfig c;
  c.kind = std::move(kind);
  return c;
}

[[nodiscard]] nlohmann::ordered_json to_json(const BackendConfig& c);
/// Unknown keys are rejected.
[[nodiscard]] BackendConfig backend_config_from_json(const nlohmann::json& j);

class BackendError : public Error {
 public:
  BackendError(const std::string& what, bool transient) : Error(what), transient_(transient) {}
  [[nodiscard]] bool transient() const { return transient_; }

 private:
  bool transient_;
};

/// The response did not satisfy the requested schema. Carries the raw text.
class SchemaError : public Error {
 public:
  SchemaError(const std::string& what, std::string raw) : Error(what), raw_(std::move(raw)) {}
  [[nodiscard]] const std::string& raw_text() const { return raw_; }

 private:
  std::string raw_;
};

/// The detector found nothing for the description.
class NoDetection : public Error {
 public:
  using Error::Error;
};

/// Strict parsing of a response body under `schema`.
///
/// accept_reject: the trimmed text must be "accept" or "reject" (any case,
/// one optional trailing period). json_object: a JSON object, optionally
/// wrapped in a markdown code fence.
[[nodiscard]] std::optional<nlohmann::json> parse_response(const std::string& text, ResponseSchema schema);

/// Calls `fn` up to 1 + max_retries times while it throws a transient
/// BackendError, sleeping backoff_initial_ms * 2^k between attempts.
template <typename F>
auto with_retries(const BackendConfig& cfg, F&& fn, std::atomic<int>* attempts = nullptr,
                  const std::function<void(int)>& sleep_ms = {}) -> decltype(fn()) {
  for (int attempt = 0;; ++attempt) {
    if (attempts != nullptr) ++*attempts;
    try {
      return fn();
    } catch (const BackendError& e) {
      if (!e.transient() || attempt >= cfg.max_retries) throw;
      const int delay = cfg.backoff_initial_ms << attempt;
      if (sleep_ms) {
        sleep_ms(delay);
      } else {
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
      }
    }
  }
}

class VlmClient {
 public:
  virtual ~VlmClient() = default;
  [[nodiscard]] virtual std::string id() const = 0;
  /// Returns the raw answer; callers run parse_response.
  [[nodiscard]] virtual VlmResponse complete(const VlmRequest& req) = 0;
};

class Detector {
 public:
  virtual ~Detector() = default;
  [[nodiscard]] virtual std::string id() const = 0;
  /// Raw box from the backend, possibly out of bounds. Throws NoDetection.
  [[nodiscard]] virtual BoundingBox detect(const RgbImage& image, const std::string& image_id,
                                           const std::string& text) = 0;
};

class Segmenter {
 public:
  virtual ~Segmenter() = default;
  [[nodiscard]] virtual std::string id() const = 0;
  [[nodiscard]] virtual SegmenterCandidate segment_from_box(const RgbImage& image, const BoundingBox& box) = 0;
  /// One candidate per point at most, in point order; may return fewer.
  [[nodiscard]] virtual std::vector<SegmenterCandidate> segment_from_grid(const RgbImage& image,
                                                                          const std::vector<std::pair<int, int>>& points) = 0;
};

/// Completes the request and parses it. Throws SchemaError on a strict-schema miss.
[[nodiscard]] VlmResponse vlm_complete(VlmClient& client, const VlmRequest& req);

/// Detector call with the result clamped to the image. `clamped` reports whether clamping changed it.
[[nodiscard]] BoundingBox detect_region(Detector& det, const RgbImage& image, const std::string& image_id,
                                        const std::string& text, bool* clamped = nullptr);

/// Validates the box, checks the returned mask's dimensions.
[[nodiscard]] SegmenterCandidate segment_from_box(Segmenter& seg, const RgbImage& image, const BoundingBox& box);

/// Validates the points and removes candidates whose masks equal an earlier one.
[[nodiscard]] std::vector<SegmenterCandidate> segment_from_grid(Segmenter& seg, const RgbImage& image,
                                                                const std::vector<std::pair<int, int>>& points);

/// `side` x `side` uniform grid of (row, col) points over `box` (cell centres).
[[nodiscard]] std::vector<std::pair<int, int>> point_grid(const BoundingBox& box, int side);

// ---- mocks ----------------------------------------------------------------------

/// Hand-written description of a fixture image, used by the synthetic mocks.
///
/// {"image_id": "...",
///  "regions": [{"description": "...", "box": [x0,y0,x1,y1], "verify": "accept",
///               "compare": "refined"}],          (box omitted: detector finds nothing)
///  "prompts": {"<concept>": [{"prompt": "...", "regions": [1, 3], "align": "accept"}]},
///  "negatives": {"<concept>": [{"prompt": "...", "absent": true}]}}
///
/// Region indices are 1-based positions in "regions", which is also the order
/// the scene call reports descriptions in.
struct SceneFixture {
  struct Region {
    std::string description;
    std::optional<BoundingBox> box;
    std::string verify = "accept";  // raw answer text, may be deliberately malformed
    std::string compare = "refined";
  };
  struct Prompt {
    std::string prompt;
    nlohmann::json regions;  // passed through verbatim so fixtures can script malformed answers
    std::string align = "accept";
  };
  struct Negative {
    std::string prompt;
    bool absent = true;
  };
  std::string image_id;
  std::vector<Region> regions;
  std::map<std::string, std::vector<Prompt>> prompts;
  std::map<std::string, std::vector<Negative>> negatives;
};

[[nodiscard]] SceneFixture scene_from_json(const nlohmann::json& j);

/// Scenes keyed by image id.
class SceneBook {
 public:
  void add(SceneFixture scene);
  /// Loads every *.json file in `dir`.
  void load_directory(const std::filesystem::path& dir);
  [[nodiscard]] const SceneFixture* find(const std::string& image_id) const;
  [[nodiscard]] bool empty() const { return scenes_.empty(); }

 private:
  std::map<std::string, SceneFixture> scenes_;
};

/// Call counting shared by the mocks; tests read it to prove cache behaviour.
struct CallCounter {
  std::atomic<std::size_t> calls{0};
};

/// VLM mock. Answers from `fixtures/vlm/<request_hash>.json` ({"text": ...})
/// when such a file exists, otherwise from the scene book. Pure in (request, seed).
class MockVlm : public VlmClient {
 public:
  MockVlm(std::shared_ptr<const SceneBook> scenes, std::filesystem::path fixtures_dir, std::uint64_t seed);
  [[nodiscard]] std::string id() const override { return "mock-vlm"; }
  [[nodiscard]] VlmResponse complete(const VlmRequest& req) override;
  [[nodiscard]] std::size_t calls() const { return counter_.calls.load(); }

 private:
  [[nodiscard]] std::string synthesize(const VlmRequest& req) const;

  std::shared_ptr<const SceneBook> scenes_;
  std::filesystem::path fixtures_dir_;
  std::uint64_t seed_;
  CallCounter counter_;
};

/// Detector mock keyed by (image_id, description) through the scene book.
class MockDetector : public Detector {
 public:
  explicit MockDetector(std::shared_ptr<const SceneBook> scenes) : scenes_(std::move(scenes)) {}
  [[nodiscard]] std::string id() const override { return "mock-detector"; }
  [[nodiscard]] BoundingBox detect(const RgbImage& image, const std::string& image_id,
                                   const std::string& text) override;
  [[nodiscard]] std::size_t calls() const { return counter_.calls.load(); }

 private:
  std::shared_ptr<const SceneBook> scenes_;
  CallCounter counter_;
};

/// Segmenter mock: the box interior for box prompts; the 4-connected
/// component of the point's exact colour for point prompts.
class BoxFillSegmenter : public Segmenter {
 public:
  [[nodiscard]] std::string id() const override { return "box-fill"; }
  [[nodiscard]] SegmenterCandidate segment_from_box(const RgbImage& image, const BoundingBox& box) override;
  [[nodiscard]] std::vector<SegmenterCandidate> segment_from_grid(const RgbImage& image,
                                                                  const std::vector<std::pair<int, int>>& points) override;
  [[nodiscard]] std::size_t calls() const { return counter_.calls.load(); }

 protected:
  CallCounter counter_;
};

/// Like BoxFillSegmenter, but box prompts return the colour component at the
/// box centre clipped to the box (falling back to the box when that is empty).
class FloodFillSegmenter : public BoxFillSegmenter {
 public:
  [[nodiscard]] std::string id() const override { return "flood-fill"; }
  [[nodiscard]] SegmenterCandidate segment_from_box(const RgbImage& image, const BoundingBox& box) override;
};

/// Pixels 4-connected to (row, col) with exactly the same colour.
[[nodiscard]] BinaryMask color_component(const RgbImage& image, int row, int col);

// ---- live clients -----------------------------------------------------------------

/// Chat-completions style JSON over HTTP(S) with base64 PNG images.
class HttpVlm : public VlmClient {
 public:
  explicit HttpVlm(BackendConfig cfg);
  [[nodiscard]] std::string id() const override;
  [[nodiscard]] VlmResponse complete(const VlmRequest& req) override;

 private:
  BackendConfig cfg_;
};

/// POST {"image": <png b64>, "text": ..., "options": ...} -> {"box": [x0,y0,x1,y1] | null}.
class HttpDetector : public Detector {
 public:
  explicit HttpDetector(BackendConfig cfg);
  [[nodiscard]] std::string id() const override;
  [[nodiscard]] BoundingBox detect(const RgbImage& image, const std::string& image_id,
                                   const std::string& text) override;

 private:
  BackendConfig cfg_;
};

/// POST {"image", "box" | "points"} -> {"masks": [{"size":[H,W], "counts":[...], "score": s}]}.
class HttpSegmenter : public Segmenter {
 public:
  explicit HttpSegmenter(BackendConfig cfg);
  [[nodiscard]] std::string id() const override;
  [[nodiscard]] SegmenterCandidate segment_from_box(const RgbImage& image, const BoundingBox& box) override;
  [[nodiscard]] std::vector<SegmenterCandidate> segment_from_grid(const RgbImage& image,
                                                                  const std::vector<std::pair<int, int>>& points) override;

 private:
  BackendConfig cfg_;
};

/// POSTs JSON to `endpoint` with bearer auth from `api_key_env`; retries transient failures.
[[nodiscard]] nlohmann::json http_post_json(const BackendConfig& cfg, const nlohmann::json& body);

/// Instantiates a client from config. Mock kinds need `scenes`.
[[nodiscard]] std::unique_ptr<VlmClient> make_vlm(const BackendConfig& cfg, std::shared_ptr<const SceneBook> scenes);
[[nodiscard]] std::unique_ptr<Detector> make_detector(const BackendConfig& cfg, std::shared_ptr<const SceneBook> scenes);
[[nodiscard]] std::unique_ptr<Segmenter> make_segmenter(const BackendConfig& cfg);

}  // namespace groundseg::backends
