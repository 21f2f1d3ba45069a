#include "groundseg/backends.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

#include <httplib.h>

#include "groundseg/hashing.hpp"

namespace groundseg::backends {

std::string to_string(ResponseSchema s) {
  switch (s) {
    case ResponseSchema::free_text: return "free_text";
    case ResponseSchema::json_object: return "json_object";
    case ResponseSchema::accept_reject: return "accept_reject";
  }
  return "free_text";
}

std::string to_string(Verdict v) { return v == Verdict::accept ? "accept" : "reject"; }

Verdict verdict_from_string(const std::string& s) {
  if (s == "accept") return Verdict::accept;
  if (s == "reject") return Verdict::reject;
  throw Error("verdict must be accept or reject, got '" + s + "'");
}

void VlmRequest::validate() const {
  if (user_text.empty() && images.empty()) throw Error("VLM request needs user text or images");
  if (images.size() > 4) throw Error("VLM request carries " + std::to_string(images.size()) + " images (max 4)");
}

nlohmann::json request_json(const VlmRequest& req) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& img : req.images) images.push_back(image_digest(img));
  return nlohmann::json{{"task", req.task},
                        {"system_text", req.system_text},
                        {"user_text", req.user_text},
                        {"images", images},
                        {"response_schema", to_string(req.response_schema)},
                        {"context", req.context}};
}

std::string request_hash(const VlmRequest& req) { return sha256_hex(canonical_json(request_json(req))); }

void BackendConfig::validate() const {
  static const std::set<std::string> kKinds{"http", "mock", "box_fill", "flood_fill"};
  if (!kKinds.contains(kind)) throw Error("backend kind must be one of http, mock, box_fill, flood_fill; got '" + kind + "'");
  if (timeout_ms <= 0) throw Error("backend timeout_ms must be positive");
  if (max_retries < 0) throw Error("backend max_retries must be >= 0");
  if (backoff_initial_ms < 0) throw Error("backend backoff_initial_ms must be >= 0");
  if (kind == "http" && endpoint.empty()) throw Error("http backend needs an endpoint");
}

nlohmann::ordered_json to_json(const BackendConfig& c) {
  nlohmann::ordered_json j;
  j["kind"] = c.kind;
  j["endpoint"] = c.endpoint;
  j["api_key_env"] = c.api_key_env;
  j["model"] = c.model;
  j["timeout_ms"] = c.timeout_ms;
  j["max_retries"] = c.max_retries;
  j["backoff_initial_ms"] = c.backoff_initial_ms;
  j["seed"] = c.seed ? nlohmann::ordered_json(*c.seed) : nlohmann::ordered_json(nullptr);
  j["fixtures_dir"] = c.fixtures_dir.string();
  j["options"] = c.options;
  return j;
}

BackendConfig backend_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys{"kind",       "endpoint",           "api_key_env", "model",
                                           "timeout_ms", "max_retries",        "seed",        "fixtures_dir",
                                           "options",    "backoff_initial_ms"};
  if (!j.is_object()) throw Error("backend config must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (!kKeys.contains(k)) throw Error("backend config: unknown key '" + k + "'");
  }
  BackendConfig c;
  c.kind = j.value("kind", "");
  c.endpoint = j.value("endpoint", "");
  c.api_key_env = j.value("api_key_env", "");
  c.model = j.value("model", "");
  c.timeout_ms = j.value("timeout_ms", c.timeout_ms);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.backoff_initial_ms = j.value("backoff_initial_ms", c.backoff_initial_ms);
  if (j.contains("seed") && !j.at("seed").is_null()) c.seed = j.at("seed").get<std::uint64_t>();
  c.fixtures_dir = j.value("fixtures_dir", "");
  if (j.contains("options")) c.options = j.at("options");
  c.validate();
  return c;
}

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char ch) { return !std::isspace(ch); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string lower(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

}  // namespace

std::optional<nlohmann::json> parse_response(const std::string& text, ResponseSchema schema) {
  switch (schema) {
    case ResponseSchema::free_text: return std::nullopt;
    case ResponseSchema::accept_reject: {
      std::string t = lower(trim(text));
      if (!t.empty() && t.back() == '.') t.pop_back();
      if (t != "accept" && t != "reject") throw SchemaError("expected accept or reject", text);
      return nlohmann::json(t);
    }
    case ResponseSchema::json_object: {
      std::string t = trim(text);
      if (t.starts_with("```")) {
        const auto first_nl = t.find('\n');
        const auto last_fence = t.rfind("```");
        if (first_nl == std::string::npos || last_fence <= first_nl) throw SchemaError("unterminated code fence", text);
        t = t.substr(first_nl + 1, last_fence - first_nl - 1);
      }
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(t);
      } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError(std::string("malformed JSON: ") + e.what(), text);
      }
      if (!j.is_object()) throw SchemaError("expected a JSON object", text);
      return j;
    }
  }
  return std::nullopt;
}

VlmResponse vlm_complete(VlmClient& client, const VlmRequest& req) {
  req.validate();
  VlmResponse r = client.complete(req);
  r.parsed = parse_response(r.text, req.response_schema);
  return r;
}

BoundingBox detect_region(Detector& det, const RgbImage& image, const std::string& image_id, const std::string& text,
                          bool* clamped) {
  if (text.empty()) throw Error("detect_region needs a non-empty description");
  const BoundingBox raw = det.detect(image, image_id, text);
  BoundingBox b{std::clamp(raw.x_min, 0, image.width), std::clamp(raw.y_min, 0, image.height),
                std::clamp(raw.x_max, 0, image.width), std::clamp(raw.y_max, 0, image.height)};
  if (clamped != nullptr) *clamped = !(b == raw);
  if (b.x_max <= b.x_min || b.y_max <= b.y_min) throw NoDetection("box for '" + text + "' lies outside the image");
  return b;
}

SegmenterCandidate segment_from_box(Segmenter& seg, const RgbImage& image, const BoundingBox& box) {
  if (!box.valid_within(image.width, image.height)) throw Error("segment_from_box: box outside the image");
  SegmenterCandidate c = seg.segment_from_box(image, box);
  if (c.mask.height() != image.height || c.mask.width() != image.width) {
    throw DimensionError("segmenter returned a mask of the wrong size");
  }
  if (!std::isfinite(c.score)) throw Error("segmenter returned a non-finite score");
  return c;
}

std::vector<SegmenterCandidate> segment_from_grid(Segmenter& seg, const RgbImage& image,
                                                  const std::vector<std::pair<int, int>>& points) {
  if (points.empty()) throw Error("segment_from_grid needs at least one point");
  for (const auto& [r, c] : points) {
    if (r < 0 || c < 0 || r >= image.height || c >= image.width) throw Error("grid point outside the image");
  }
  std::vector<SegmenterCandidate> out;
  for (auto& cand : seg.segment_from_grid(image, points)) {
    if (cand.mask.height() != image.height || cand.mask.width() != image.width) {
      throw DimensionError("segmenter returned a mask of the wrong size");
    }
    const bool dup = std::any_of(out.begin(), out.end(), [&](const auto& o) { return o.mask == cand.mask; });
    if (!dup) out.push_back(std::move(cand));
  }
  return out;
}

std::vector<std::pair<int, int>> point_grid(const BoundingBox& box, int side) {
  std::vector<std::pair<int, int>> pts;
  if (side <= 0 || box.width() <= 0 || box.height() <= 0) return pts;
  std::set<std::pair<int, int>> seen;
  for (int i = 0; i < side; ++i) {
    const int r = box.y_min + static_cast<int>((i + 0.5) * box.height() / side);
    for (int j = 0; j < side; ++j) {
      const int c = box.x_min + static_cast<int>((j + 0.5) * box.width() / side);
      if (seen.insert({r, c}).second) pts.emplace_back(r, c);
    }
  }
  return pts;
}

// ---- scenes -----------------------------------------------------------------------

SceneFixture scene_from_json(const nlohmann::json& j) {
  SceneFixture s;
  s.image_id = j.at("image_id").get<std::string>();
  const nlohmann::json regions = j.value("regions", nlohmann::json::array());
  const nlohmann::json prompts = j.value("prompts", nlohmann::json::object());
  const nlohmann::json negatives = j.value("negatives", nlohmann::json::object());
  for (const auto& r : regions) {
    SceneFixture::Region reg;
    reg.description = r.at("description").get<std::string>();
    if (r.contains("box") && !r.at("box").is_null()) {
      const auto b = r.at("box").get<std::vector<int>>();
      if (b.size() != 4) throw Error("scene box must have four numbers");
      reg.box = BoundingBox{b[0], b[1], b[2], b[3]};
    }
    reg.verify = r.value("verify", reg.verify);
    reg.compare = r.value("compare", reg.compare);
    s.regions.push_back(std::move(reg));
  }
  for (const auto& [concept_name, list] : prompts.items()) {
    for (const auto& p : list) {
      SceneFixture::Prompt pr;
      pr.prompt = p.at("prompt").get<std::string>();
      pr.regions = p.at("regions");
      pr.align = p.value("align", pr.align);
      s.prompts[concept_name].push_back(std::move(pr));
    }
  }
  for (const auto& [concept_name, list] : negatives.items()) {
    for (const auto& n : list) {
      s.negatives[concept_name].push_back({n.at("prompt").get<std::string>(), n.value("absent", true)});
    }
  }
  return s;
}

void SceneBook::add(SceneFixture scene) {
  const std::string id = scene.image_id;
  scenes_[id] = std::move(scene);
}

void SceneBook::load_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("scene directory " + dir.string() + " does not exist");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f);
    try {
      add(scene_from_json(nlohmann::json::parse(in)));
    } catch (const nlohmann::json::exception& e) {
      throw Error("scene " + f.string() + ": " + e.what());
    }
  }
}

const SceneFixture* SceneBook::find(const std::string& image_id) const {
  const auto it = scenes_.find(image_id);
  return it == scenes_.end() ? nullptr : &it->second;
}

// ---- mocks ------------------------------------------------------------------------

MockVlm::MockVlm(std::shared_ptr<const SceneBook> scenes, std::filesystem::path fixtures_dir, std::uint64_t seed)
    : scenes_(std::move(scenes)), fixtures_dir_(std::move(fixtures_dir)), seed_(seed) {}

VlmResponse MockVlm::complete(const VlmRequest& req) {
  ++counter_.calls;
  const std::string hash = request_hash(req);
  VlmResponse r;
  // Simulated latency derived from (request, seed) so responses stay pure.
  r.latency_ms = static_cast<double>(std::stoull(sha256_hex(hash + std::to_string(seed_)).substr(0, 6), nullptr, 16) % 900) + 100.0;
  if (!fixtures_dir_.empty()) {
    const auto f = fixtures_dir_ / "vlm" / (hash + ".json");
    if (std::filesystem::exists(f)) {
      std::ifstream in(f);
      r.text = nlohmann::json::parse(in).at("text").get<std::string>();
      return r;
    }
  }
  r.text = synthesize(req);
  return r;
}

std::string MockVlm::synthesize(const VlmRequest& req) const {
  const auto& ctx = req.context;
  const std::string image_id = ctx.value("image_id", "");
  const SceneFixture* scene = scenes_ ? scenes_->find(image_id) : nullptr;
  if (scene == nullptr) throw BackendError("mock VLM has no scene for image '" + image_id + "'", false);

  auto region_by_description = [&](const std::string& d) -> const SceneFixture::Region* {
    for (const auto& r : scene->regions) {
      if (r.description == d) return &r;
    }
    return nullptr;
  };
  const std::string concept_name = ctx.value("concept", "");

  if (req.task == "scene") {
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& r : scene->regions) regions.push_back(r.description);
    return nlohmann::json{{"regions", regions}}.dump();
  }
  if (req.task == "mask_verify") {
    const auto* r = region_by_description(ctx.value("description", ""));
    return r != nullptr ? r->verify : "reject";
  }
  if (req.task == "mask_compare") {
    const auto* r = region_by_description(ctx.value("description", ""));
    return nlohmann::json{{"choice", r != nullptr ? r->compare : "original"}}.dump();
  }
  if (req.task == "positive") {
    nlohmann::json prompts = nlohmann::json::array();
    if (const auto it = scene->prompts.find(concept_name); it != scene->prompts.end()) {
      for (const auto& p : it->second) prompts.push_back({{"prompt", p.prompt}, {"regions", p.regions}});
    }
    return nlohmann::json{{"prompts", prompts}}.dump();
  }
  if (req.task == "align_verify") {
    if (const auto it = scene->prompts.find(concept_name); it != scene->prompts.end()) {
      for (const auto& p : it->second) {
        if (p.prompt == ctx.value("prompt", "")) return p.align;
      }
    }
    return "reject";
  }
  if (req.task == "negative_generation") {
    nlohmann::json prompts = nlohmann::json::array();
    if (const auto it = scene->negatives.find(concept_name); it != scene->negatives.end()) {
      for (const auto& n : it->second) prompts.push_back(n.prompt);
    }
    return nlohmann::json{{"prompts", prompts}}.dump();
  }
  if (req.task == "negative_verification") {
    if (const auto it = scene->negatives.find(concept_name); it != scene->negatives.end()) {
      for (const auto& n : it->second) {
        if (n.prompt == ctx.value("prompt", "")) return n.absent ? "accept" : "reject";
      }
    }
    return "reject";
  }
  throw BackendError("mock VLM does not know task '" + req.task + "'", false);
}

BoundingBox MockDetector::detect(const RgbImage& /*image*/, const std::string& image_id, const std::string& text) {
  ++counter_.calls;
  const SceneFixture* scene = scenes_ ? scenes_->find(image_id) : nullptr;
  if (scene != nullptr) {
    for (const auto& r : scene->regions) {
      if (r.description == text && r.box) return *r.box;
    }
  }
  throw NoDetection("no detection for '" + text + "' in " + image_id);
}

BinaryMask color_component(const RgbImage& image, int row, int col) {
  BinaryMask m(image.height, image.width);
  const std::array<std::uint8_t, 3> seed{image.at(row, col, 0), image.at(row, col, 1), image.at(row, col, 2)};
  auto same = [&](int r, int c) {
    return image.at(r, c, 0) == seed[0] && image.at(r, c, 1) == seed[1] && image.at(r, c, 2) == seed[2];
  };
  std::deque<std::pair<int, int>> queue{{row, col}};
  m.set(row, col);
  while (!queue.empty()) {
    const auto [r, c] = queue.front();
    queue.pop_front();
    constexpr int kDr[4] = {-1, 1, 0, 0};
    constexpr int kDc[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
      const int nr = r + kDr[k];
      const int nc = c + kDc[k];
      if (nr < 0 || nc < 0 || nr >= image.height || nc >= image.width || m.at(nr, nc) || !same(nr, nc)) continue;
      m.set(nr, nc);
      queue.emplace_back(nr, nc);
    }
  }
  return m;
}

SegmenterCandidate BoxFillSegmenter::segment_from_box(const RgbImage& image, const BoundingBox& box) {
  ++counter_.calls;
  BinaryMask m(image.height, image.width);
  m.fill_rect(box.x_min, box.y_min, box.x_max, box.y_max);
  return {std::move(m), 1.0};
}

std::vector<SegmenterCandidate> BoxFillSegmenter::segment_from_grid(const RgbImage& image,
                                                                    const std::vector<std::pair<int, int>>& points) {
  ++counter_.calls;
  std::vector<SegmenterCandidate> out;
  out.reserve(points.size());
  for (const auto& [r, c] : points) out.push_back({color_component(image, r, c), 1.0});
  return out;
}

SegmenterCandidate FloodFillSegmenter::segment_from_box(const RgbImage& image, const BoundingBox& box) {
  ++counter_.calls;
  const int cy = (box.y_min + box.y_max - 1) / 2;
  const int cx = (box.x_min + box.x_max - 1) / 2;
  BinaryMask comp = color_component(image, cy, cx);
  BinaryMask clipped(image.height, image.width);
  for (int r = box.y_min; r < box.y_max; ++r) {
    for (int c = box.x_min; c < box.x_max; ++c) {
      if (comp.at(r, c)) clipped.set(r, c);
    }
  }
  if (clipped.count() == 0) clipped.fill_rect(box.x_min, box.y_min, box.x_max, box.y_max);
  return {std::move(clipped), 1.0};
}

// ---- live clients ---------------------------------------------------------------------

nlohmann::json http_post_json(const BackendConfig& cfg, const nlohmann::json& body) {
  const auto scheme_end = cfg.endpoint.find("://");
  if (scheme_end == std::string::npos) throw Error("endpoint must start with http:// or https://");
  const auto path_start = cfg.endpoint.find('/', scheme_end + 3);
  const std::string origin = cfg.endpoint.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : cfg.endpoint.substr(path_start);

  httplib::Headers headers;
  if (!cfg.api_key_env.empty()) {
    const char* key = std::getenv(cfg.api_key_env.c_str());
    if (key == nullptr) throw Error("environment variable " + cfg.api_key_env + " is not set");
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  const std::string payload = body.dump();
  return with_retries(cfg, [&]() {
    httplib::Client client(origin);
    const auto secs = cfg.timeout_ms / 1000;
    const auto usecs = (cfg.timeout_ms % 1000) * 1000;
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) throw BackendError("request to " + cfg.endpoint + " failed: " + httplib::to_string(res.error()), true);
    if (res->status == 429 || res->status >= 500) {
      throw BackendError(cfg.endpoint + " returned HTTP " + std::to_string(res->status), true);
    }
    if (res->status >= 400) {
      throw BackendError(cfg.endpoint + " returned HTTP " + std::to_string(res->status) + ": " + res->body, false);
    }
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error&) {
      throw BackendError(cfg.endpoint + " returned a non-JSON body", false);
    }
  });
}

namespace {

std::string png_b64(const RgbImage& img) { return base64_encode(encode_png(img)); }

std::vector<SegmenterCandidate> parse_masks(const nlohmann::json& j, const RgbImage& image) {
  std::vector<SegmenterCandidate> out;
  const nlohmann::json masks = j.value("masks", nlohmann::json::array());
  for (const auto& m : masks) {
    SegmenterCandidate c{rle_decode(rle_from_json(m)), m.value("score", 0.0)};
    if (c.mask.height() != image.height || c.mask.width() != image.width) {
      throw BackendError("segmenter mask size differs from the image", false);
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

HttpVlm::HttpVlm(BackendConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

std::string HttpVlm::id() const { return "http-vlm:" + cfg_.model + "@" + cfg_.endpoint; }

VlmResponse HttpVlm::complete(const VlmRequest& req) {
  nlohmann::json content = nlohmann::json::array();
  if (!req.user_text.empty()) content.push_back({{"type", "text"}, {"text", req.user_text}});
  for (const auto& img : req.images) {
    content.push_back({{"type", "image_url"}, {"image_url", {{"url", "data:image/png;base64," + png_b64(img)}}}});
  }
  nlohmann::json messages = nlohmann::json::array();
  if (!req.system_text.empty()) messages.push_back({{"role", "system"}, {"content", req.system_text}});
  messages.push_back({{"role", "user"}, {"content", content}});
  nlohmann::json body{{"model", cfg_.model}, {"messages", messages}};
  if (req.response_schema == ResponseSchema::json_object) body["response_format"] = {{"type", "json_object"}};
  for (const auto& [k, v] : cfg_.options.items()) body[k] = v;

  const auto start = std::chrono::steady_clock::now();
  const nlohmann::json res = http_post_json(cfg_, body);
  VlmResponse r;
  r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  try {
    r.text = res.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw BackendError("VLM response lacks choices[0].message.content", false);
  }
  return r;
}

HttpDetector::HttpDetector(BackendConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

std::string HttpDetector::id() const { return "http-detector:" + cfg_.model + "@" + cfg_.endpoint; }

BoundingBox HttpDetector::detect(const RgbImage& image, const std::string& /*image_id*/, const std::string& text) {
  const nlohmann::json res =
      http_post_json(cfg_, {{"image", png_b64(image)}, {"text", text}, {"options", cfg_.options}});
  if (!res.contains("box") || res.at("box").is_null()) throw NoDetection("detector found nothing for '" + text + "'");
  const auto b = res.at("box").get<std::vector<double>>();
  if (b.size() != 4) throw BackendError("detector box must have four numbers", false);
  return BoundingBox{static_cast<int>(std::floor(b[0])), static_cast<int>(std::floor(b[1])),
                     static_cast<int>(std::ceil(b[2])), static_cast<int>(std::ceil(b[3]))};
}

HttpSegmenter::HttpSegmenter(BackendConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

std::string HttpSegmenter::id() const { return "http-segmenter:" + cfg_.model + "@" + cfg_.endpoint; }

SegmenterCandidate HttpSegmenter::segment_from_box(const RgbImage& image, const BoundingBox& box) {
  const nlohmann::json res = http_post_json(
      cfg_, {{"image", png_b64(image)}, {"box", {box.x_min, box.y_min, box.x_max, box.y_max}}, {"options", cfg_.options}});
  auto masks = parse_masks(res, image);
  if (masks.empty()) throw BackendError("segmenter returned no mask for the box", false);
  return *std::max_element(masks.begin(), masks.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
}

std::vector<SegmenterCandidate> HttpSegmenter::segment_from_grid(const RgbImage& image,
                                                                 const std::vector<std::pair<int, int>>& points) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& [r, c] : points) pts.push_back({c, r});
  return parse_masks(http_post_json(cfg_, {{"image", png_b64(image)}, {"points", pts}, {"options", cfg_.options}}), image);
}

std::unique_ptr<VlmClient> make_vlm(const BackendConfig& cfg, std::shared_ptr<const SceneBook> scenes) {
  cfg.validate();
  if (cfg.kind == "http") return std::make_unique<HttpVlm>(cfg);
  if (cfg.kind == "mock") return std::make_unique<MockVlm>(std::move(scenes), cfg.fixtures_dir, cfg.seed.value_or(0));
  throw Error("VLM backend kind must be http or mock");
}

std::unique_ptr<Detector> make_detector(const BackendConfig& cfg, std::shared_ptr<const SceneBook> scenes) {
  cfg.validate();
  if (cfg.kind == "http") return std::make_unique<HttpDetector>(cfg);
  if (cfg.kind == "mock") return std::make_unique<MockDetector>(std::move(scenes));
  throw Error("detector backend kind must be http or mock");
}

std::unique_ptr<Segmenter> make_segmenter(const BackendConfig& cfg) {
  cfg.validate();
  if (cfg.kind == "http") return std::make_unique<HttpSegmenter>(cfg);
  if (cfg.kind == "box_fill") return std::make_unique<BoxFillSegmenter>();
  if (cfg.kind == "flood_fill" || cfg.kind == "mock") return std::make_unique<FloodFillSegmenter>();
  throw Error("segmenter backend kind must be http, box_fill, flood_fill or mock");
}

}  // namespace groundseg::backends
