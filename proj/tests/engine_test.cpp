#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <unistd.h>

#include "engine_fixtures.hpp"
#include "groundseg/engine.hpp"

using namespace groundseg;
using namespace groundseg::engine;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gs_engine_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const TemplateRegistry& repo_templates() {
  static const TemplateRegistry reg = TemplateRegistry::load(GROUNDSEG_TEMPLATES_DIR);
  return reg;
}

/// Mock backends over the fixture scenes, with call counters.
struct Rig {
  std::shared_ptr<backends::SceneBook> book = fixtures::fixture_book();
  backends::MockVlm vlm{book, "", 5};
  backends::MockDetector detector{book};
  backends::FloodFillSegmenter segmenter;
  EngineConfig cfg;

  Backends backends() { return {&vlm, &detector, &segmenter}; }
  std::size_t calls() const { return vlm.calls() + detector.calls() + segmenter.calls(); }
};

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> rows;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  }
  return rows;
}

std::vector<AuditRow> drops_of(const std::vector<AuditRow>& audit, const std::string& reason) {
  std::vector<AuditRow> out;
  for (const auto& a : audit) {
    if (a.event == "drop" && a.reason == reason) out.push_back(a);
  }
  return out;
}

RunInputs fixture_inputs(const fs::path& dir) {
  fixtures::write_fixtures(dir);
  return scan_images(dir / "images");
}

const fixtures::FixtureImage& fixture(const std::string& id) {
  static const auto all = fixtures::fixture_images();
  for (const auto& f : all) {
    if (f.id == id) return f;
  }
  throw std::runtime_error("no fixture " + id);
}

ImageRecord record_of(const std::string& id) { return {id, id + ".png", 128, 96}; }

BinaryMask rect_mask(int h, int w, int x0, int y0, int x1, int y1) {
  BinaryMask m(h, w);
  m.fill_rect(x0, y0, x1, y1);
  return m;
}

}  // namespace

// ---- templates ------------------------------------------------------------------

TEST(Templates, RepositoryRegistryCoversEveryConceptAndKind) {
  const auto& reg = repo_templates();
  for (const auto c : kAllConcepts) {
    const auto text = reg.render(TemplateKind::positive, c,
                                 {{"concept", "X"}, {"regions", "1. a\n"}, {"max_prompts", "3"}});
    EXPECT_NE(text.find("1. a"), std::string::npos);
    EXPECT_EQ(text.find("{regions}"), std::string::npos);
    // JSON braces in the answer format survive rendering.
    EXPECT_NE(text.find(R"({"prompts": [)"), std::string::npos);
  }
  EXPECT_NE(reg.render(TemplateKind::scene, std::nullopt, {{"min_regions", "5"}, {"max_regions", "7"}, {"max_words", "15"}})
                .find("at most 15 words"),
            std::string::npos);
}

TEST(Templates, PlaceholderContractIsEnforced) {
  TemplateRegistry reg;
  EXPECT_THROW(reg.set({std::nullopt, TemplateKind::mask_verify, "Is this right?"}), ConfigError);
  EXPECT_THROW(reg.set({std::nullopt, TemplateKind::mask_verify, "{description} {prompt}"}), ConfigError);
  EXPECT_NO_THROW(reg.set({std::nullopt, TemplateKind::mask_verify, "Check {description}. Reply {\"a\": 1}"}));
  EXPECT_THROW(reg.validate(), ConfigError);  // other kinds missing
  EXPECT_EQ(render_template("a {x} b {x}", {{"x", "1"}}), "a 1 b 1");
  EXPECT_THROW((void)render_template("{y}", {}), ConfigError);
}

TEST(Templates, ConceptFileOverridesCommonAndMissingFilesFail) {
  const auto dir = scratch("templates");
  fs::copy(GROUNDSEG_TEMPLATES_DIR, dir / "t", fs::copy_options::recursive);
  std::ofstream(dir / "t" / "common" / "align_verify.txt") << "shared {prompt}";
  fs::create_directories(dir / "t" / "physics_safety");
  std::ofstream(dir / "t" / "physics_safety" / "align_verify.txt") << "physics {prompt}";
  const auto reg = TemplateRegistry::load(dir / "t");
  EXPECT_EQ(reg.render(TemplateKind::align_verify, ConceptFamily::physics_safety, {{"prompt", "p"}}), "physics p");
  EXPECT_EQ(reg.render(TemplateKind::align_verify, ConceptFamily::entities, {{"prompt", "p"}}), "shared p");

  fs::remove(dir / "t" / "entities" / "positive.txt");
  EXPECT_THROW((void)TemplateRegistry::load(dir / "t"), ConfigError);
  std::ofstream(dir / "t" / "entities" / "positive.txt") << "{concept} {regions}";  // {max_prompts} missing
  EXPECT_THROW((void)TemplateRegistry::load(dir / "t"), ConfigError);
  fs::remove_all(dir);
}

// ---- config and cache ---------------------------------------------------------------

TEST(EngineConfigJson, RoundTripAndValidation) {
  EngineConfig c;
  c.concepts = {ConceptFamily::physics_safety, ConceptFamily::entities};
  c.workers = 3;
  c.split = Split::sam_seeded;
  c.vlm.seed = 9;
  const auto back = engine_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(back.concepts, c.concepts);
  EXPECT_EQ(back.workers, 3);
  EXPECT_EQ(back.split, Split::sam_seeded);
  EXPECT_EQ(back.vlm.seed, 9U);
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_THROW((void)engine_config_from_json({{"max_prompt", 3}}), ConfigError);
  EXPECT_THROW((void)engine_config_from_json({{"concepts", {"entities", "entities"}}}), ConfigError);
  EXPECT_THROW((void)engine_config_from_json({{"concepts", {"weather"}}}), ConfigError);
  EXPECT_THROW((void)engine_config_from_json({{"min_descriptions", 8}}), ConfigError);
}

TEST(Cache, KeyCoversStageBackendAndRequest) {
  const nlohmann::json req{{"a", 1}, {"b", 2}};
  const nlohmann::json reordered = nlohmann::json::parse(R"({"b": 2, "a": 1})");
  EXPECT_EQ(ResponseCache::key("s", "x", req), ResponseCache::key("s", "x", reordered));
  EXPECT_NE(ResponseCache::key("s", "x", req), ResponseCache::key("t", "x", req));
  EXPECT_NE(ResponseCache::key("s", "x", req), ResponseCache::key("s", "y", req));
}

TEST(Cache, CachedVlmCallsThroughOnceAndIgnoresTornEntries) {
  const auto dir = scratch("cache");
  Rig rig;
  ResponseCache cache(dir);
  CachedVlm vlm(rig.vlm, cache);
  backends::VlmRequest req;
  req.task = "scene";
  req.user_text = "describe";
  req.context = {{"image_id", "desk"}};
  const auto first = vlm.complete(req).text;
  EXPECT_EQ(vlm.complete(req).text, first);
  EXPECT_EQ(rig.vlm.calls(), 1U);
  EXPECT_EQ(cache.hits(), 1U);

  // Truncate the stored entry: it is treated as a miss and refilled.
  const auto key = ResponseCache::key("vlm:scene", rig.vlm.id(), backends::request_json(req));
  std::ofstream(dir / key.substr(0, 2) / (key + ".json"), std::ios::trunc) << "{\"te";
  EXPECT_EQ(vlm.complete(req).text, first);
  EXPECT_EQ(rig.vlm.calls(), 2U);
  fs::remove_all(dir);
}

TEST(Cache, NoDetectionIsCachedTransportFailureIsNot) {
  const auto dir = scratch("cache_det");
  Rig rig;
  ResponseCache cache(dir);
  CachedDetector det(rig.detector, cache);
  const RgbImage img(96, 128);
  EXPECT_THROW((void)det.detect(img, "kitchen", "silver knife lying beside the plate"), backends::NoDetection);
  EXPECT_THROW((void)det.detect(img, "kitchen", "silver knife lying beside the plate"), backends::NoDetection);
  EXPECT_EQ(rig.detector.calls(), 1U);

  struct Flaky : backends::Detector {
    int calls = 0;
    std::string id() const override { return "flaky"; }
    BoundingBox detect(const RgbImage&, const std::string&, const std::string&) override {
      ++calls;
      throw backends::BackendError("timeout", true);
    }
  } flaky;
  CachedDetector cf(flaky, cache);
  EXPECT_THROW((void)cf.detect(img, "kitchen", "x"), backends::BackendError);
  EXPECT_THROW((void)cf.detect(img, "kitchen", "x"), backends::BackendError);
  EXPECT_EQ(flaky.calls, 2);
  fs::remove_all(dir);
}

// ---- stages -----------------------------------------------------------------------------

TEST(Stage1, SixteenWordDescriptionDropped) {
  Rig rig;
  Engine eng(rig.cfg, repo_templates(), rig.vlm, rig.detector, rig.segmenter);
  const auto img = fixtures::fixture_pixels(fixture("kitchen"));
  const auto descs = eng.stage1_describe(record_of("kitchen"), img);
  std::vector<int> idx;
  for (const auto& d : descs) idx.push_back(d.index);
  EXPECT_EQ(idx, (std::vector<int>{1, 2, 3, 4, 6, 7}));
  const auto long_drops = drops_of(eng.audit(), "too_long");
  ASSERT_EQ(long_drops.size(), 1U);
  EXPECT_EQ(long_drops[0].item, "region:5");
  EXPECT_EQ(word_count(nlohmann::json::parse(fixtures::kKitchenScene)["regions"][4]["description"].get<std::string>()), 16U);
}

TEST(Stage1, TruncatesToSevenAndFlagsLowYield) {
  auto book = std::make_shared<backends::SceneBook>();
  nlohmann::json scene{{"image_id", "many"}, {"regions", nlohmann::json::array()}};
  for (int i = 1; i <= 9; ++i) scene["regions"].push_back({{"description", "object number " + std::to_string(i)}});
  book->add(backends::scene_from_json(scene));
  book->add(backends::scene_from_json(nlohmann::json::parse(fixtures::kDeskScene)));
  backends::MockVlm vlm(book, "", 0);
  backends::MockDetector det(book);
  backends::BoxFillSegmenter seg;
  EngineConfig cfg;
  Engine eng(cfg, repo_templates(), vlm, det, seg);
  const RgbImage img(10, 10);
  const auto descs = eng.stage1_describe({"many", "many.png", 10, 10}, img);
  ASSERT_EQ(descs.size(), 7U);
  EXPECT_EQ(descs.back().text, "object number 7");
  const auto over = drops_of(eng.audit(), "over_limit");
  ASSERT_EQ(over.size(), 2U);
  EXPECT_EQ(over[0].item, "region:8");
  EXPECT_EQ(over[1].item, "region:9");

  eng.clear_audit();
  EXPECT_EQ(eng.stage1_describe(record_of("desk"), img).size(), 3U);
  ASSERT_EQ(eng.audit().size(), 1U);
  EXPECT_EQ(eng.audit()[0].event, "flag");
  EXPECT_EQ(eng.audit()[0].reason, "low_yield");
}

TEST(Stage2, DetectionMissesAndClampedBoxes) {
  Rig rig;
  Engine eng(rig.cfg, repo_templates(), rig.vlm, rig.detector, rig.segmenter);
  const auto img = fixtures::fixture_pixels(fixture("street"));
  const auto sky = eng.stage2_ground(img, {5, "bright sky above the street", "street"});
  ASSERT_TRUE(sky.has_value());
  EXPECT_EQ(sky->box, (BoundingBox{0, 0, 128, 8}));
  EXPECT_EQ(sky->initial_mask.height(), 96);
  EXPECT_EQ(sky->initial_mask.width(), 128);
  EXPECT_EQ(sky->initial_mask.count(), 128U * 8U);
  EXPECT_EQ(eng.audit().at(0).reason, "box_clamped");

  const auto kimg = fixtures::fixture_pixels(fixture("kitchen"));
  EXPECT_FALSE(eng.stage2_ground(kimg, {6, "silver knife lying beside the plate", "kitchen"}).has_value());
  EXPECT_EQ(drops_of(eng.audit(), "no_detection").size(), 1U);

  // Flood fill from the box centre, clipped to the box: the plate box is inside the plate.
  const auto plate = eng.stage2_ground(kimg, {2, "blue plate in the middle of the table", "kitchen"});
  EXPECT_EQ(plate->initial_mask, rect_mask(96, 128, 47, 52, 78, 73));
}

TEST(Stage3, VerifyAcceptRejectAndUnparseable) {
  Rig rig;
  Engine eng(rig.cfg, repo_templates(), rig.vlm, rig.detector, rig.segmenter);
  const auto kimg = fixtures::fixture_pixels(fixture("kitchen"));
  auto table = eng.stage3_verify(kimg, *eng.stage2_ground(kimg, {7, "wooden table surface under the objects", "kitchen"}));
  EXPECT_EQ(table.verdicts.at("consistency"), backends::Verdict::reject);
  EXPECT_THROW((void)eng.stage3_refine(kimg, table), Error);
  auto mug = eng.stage3_verify(kimg, *eng.stage2_ground(kimg, {1, "red mug on the left side of the table", "kitchen"}));
  EXPECT_EQ(mug.verdicts.at("consistency"), backends::Verdict::accept);

  const auto simg = fixtures::fixture_pixels(fixture("street"));
  auto sky = eng.stage3_verify(simg, *eng.stage2_ground(simg, {5, "bright sky above the street", "street"}));
  EXPECT_EQ(sky.verdicts.at("consistency"), backends::Verdict::reject);
  const auto bad = drops_of(eng.audit(), "unparseable");
  ASSERT_EQ(bad.size(), 1U);
  EXPECT_EQ(bad[0].detail, "It looks right to me");
  EXPECT_EQ(drops_of(eng.audit(), "consistency_reject").size(), 1U);
}

TEST(Stage3, RefinePicksHighestIouCandidateAndHonoursComparer) {
  Rig rig;
  Engine eng(rig.cfg, repo_templates(), rig.vlm, rig.detector, rig.segmenter);
  const auto kimg = fixtures::fixture_pixels(fixture("kitchen"));
  auto plate = eng.stage3_verify(kimg, *eng.stage2_ground(kimg, {2, "blue plate in the middle of the table", "kitchen"}));
  const auto before = rig.vlm.calls();
  plate = eng.stage3_refine(kimg, plate);
  const auto full_plate = rect_mask(96, 128, 45, 50, 80, 75);
  ASSERT_TRUE(plate.refined_mask.has_value());
  EXPECT_EQ(*plate.refined_mask, full_plate);
  EXPECT_EQ(*plate.final_mask, full_plate);
  EXPECT_EQ(plate.selected, "refined");
  EXPECT_EQ(rig.vlm.calls(), before + 1);  // one comparison

  // The comparer defaults to the mock answer "refined"; a scene saying
  // "original" keeps the initial mask.
  auto book = std::make_shared<backends::SceneBook>();
  auto scene = nlohmann::json::parse(fixtures::kKitchenScene);
  scene["regions"][1]["compare"] = "original";
  book->add(backends::scene_from_json(scene));
  backends::MockVlm vlm(book, "", 0);
  backends::MockDetector det(book);
  Engine eng2(rig.cfg, repo_templates(), vlm, det, rig.segmenter);
  auto p2 = eng2.stage3_refine(kimg, eng2.stage3_verify(kimg, *eng2.stage2_ground(kimg, {2, "blue plate in the middle of the table", "kitchen"})));
  EXPECT_EQ(*p2.final_mask, p2.initial_mask);
  EXPECT_EQ(p2.selected, "original");
}

TEST(Stage3, ArgmaxTiesGoToFirstCandidateAndEmptyGridFallsBack) {
  // Scripted segmenter: candidates with known IoUs against the initial mask.
  struct Scripted : backends::Segmenter {
    std::vector<backends::SegmenterCandidate> grid;
    std::string id() const override { return "scripted"; }
    backends::SegmenterCandidate segment_from_box(const RgbImage& img, const BoundingBox& b) override {
      return {rect_mask(img.height, img.width, b.x_min, b.y_min, b.x_max, b.y_max), 1.0};
    }
    std::vector<backends::SegmenterCandidate> segment_from_grid(const RgbImage&, const std::vector<std::pair<int, int>>&) override {
      return grid;
    }
  } seg;
  Rig rig;
  Engine eng(rig.cfg, repo_templates(), rig.vlm, rig.detector, seg);
  const auto img = fixtures::fixture_pixels(fixture("kitchen"));
  GroundedRegion r;
  r.description = {1, "red mug on the left side of the table", "kitchen"};
  r.box = {0, 0, 10, 10};
  r.initial_mask = rect_mask(96, 128, 0, 0, 10, 10);  // 100 px
  r.verdicts["consistency"] = backends::Verdict::accept;

  // IoUs: 0.3, 0.9, 0.7, then a second 0.9 that must not win.
  const auto a = rect_mask(96, 128, 0, 0, 3, 10);   // 30/100
  const auto b = rect_mask(96, 128, 0, 0, 10, 9);   // 90/100
  const auto c = rect_mask(96, 128, 0, 0, 7, 10);   // 70/100
  const auto d = rect_mask(96, 128, 0, 0, 9, 10);   // 90/100
  ASSERT_DOUBLE_EQ(binary_iou(b, r.initial_mask), 0.9);
  ASSERT_DOUBLE_EQ(binary_iou(d, r.initial_mask), 0.9);
  seg.grid = {{a, 1}, {b, 1}, {c, 1}, {d, 1}};
  const auto refined = eng.stage3_refine(img, r);
  EXPECT_EQ(*refined.refined_mask, b);

  seg.grid.clear();
  eng.clear_audit();
  const auto fallback = eng.stage3_refine(img, r);
  EXPECT_FALSE(fallback.refined_mask.has_value());
  EXPECT_EQ(*fallback.final_mask, r.initial_mask);
  ASSERT_EQ(eng.audit().size(), 1U);
  EXPECT_EQ(eng.audit()[0].event, "warning");
  EXPECT_EQ(eng.audit()[0].reason, "no_grid_candidates");
}

TEST(Stage4, TrivialRuleMatchesOnlySoleInstances) {
  const std::vector<std::string> one_car{"red car parked along the curb", "yellow street sign on a pole"};
  EXPECT_TRUE(is_trivial_prompt("segment the car", one_car));
  EXPECT_TRUE(is_trivial_prompt("Segment a Car.", one_car));
  EXPECT_TRUE(is_trivial_prompt("segment car", one_car));
  EXPECT_FALSE(is_trivial_prompt("the car", one_car));
  EXPECT_FALSE(is_trivial_prompt("segment the car nearest the sign", one_car));
  const std::vector<std::string> two_cars{"red car parked along the curb", "blue car in the lane"};
  EXPECT_FALSE(is_trivial_prompt("segment the car", two_cars));
  const std::vector<std::string> carpet{"grey carpet on the floor"};
  EXPECT_FALSE(is_trivial_prompt("segment the car", carpet));
  EXPECT_TRUE(is_trivial_prompt("segment the street sign", one_car));
}

TEST(Stage4, DanglingTrivialMalformedAndCap) {
  const auto dir = scratch("stage4");
  Rig rig;
  fixtures::write_fixtures(dir);
  auto inputs = scan_images(dir / "images");
  const auto summary = run_pipeline(inputs, rig.cfg, repo_templates(), rig.backends(), dir / "out");
  std::vector<AuditRow> audit;
  for (const auto& j : read_jsonl(dir / "out" / "audit.jsonl")) audit.push_back(audit_from_json(j));
  const auto manifest = load_manifest(dir / "out" / "manifest.jsonl");
  std::set<std::string> prompts;
  for (const auto& s : manifest.samples) prompts.insert(s.prompt);

  // The single-car "segment the car" and the single-mug equivalent.
  const auto trivial = drops_of(audit, "trivial");
  ASSERT_EQ(trivial.size(), 2U);
  EXPECT_EQ(trivial[0].image_id, "kitchen");
  EXPECT_EQ(trivial[1].image_id, "street");
  EXPECT_EQ(trivial[1].detail, "segment the car");
  EXPECT_FALSE(prompts.contains("segment the car"));
  EXPECT_FALSE(prompts.contains("segment the mug"));

  // Region 9 does not exist; region 7 exists but failed verification.
  const auto dangling = drops_of(audit, "dangling_region");
  ASSERT_EQ(dangling.size(), 2U);
  EXPECT_EQ(dangling[0].item, "prompt:entities:3");
  EXPECT_EQ(dangling[1].item, "prompt:spatial_layout:2");
  EXPECT_FALSE(prompts.contains("everything on the shelf"));
  EXPECT_FALSE(prompts.contains("what everything rests on"));

  EXPECT_EQ(drops_of(audit, "malformed").size(), 2U);
  const auto capped = drops_of(audit, "over_limit");
  ASSERT_EQ(capped.size(), 1U);
  EXPECT_EQ(capped[0].detail, "a surface to rest a mug on");
  for (const auto c : kAllConcepts) {
    std::map<std::string, int> per_image;
    for (const auto& s : manifest.samples) {
      if (!s.is_negative && s.concept_family == c) ++per_image[s.image.image_id];
    }
    for (const auto& [id, n] : per_image) EXPECT_LE(n, 3) << id;
  }
  EXPECT_EQ(summary.positives, 12U);
  EXPECT_EQ(summary.negatives, 8U);
  fs::remove_all(dir);
}

TEST(Stage5, RejectedCandidatesNeverReachTheManifest) {
  const auto dir = scratch("stage5");
  Rig rig;
  const auto inputs = fixture_inputs(dir);
  (void)run_pipeline(inputs, rig.cfg, repo_templates(), rig.backends(), dir / "out");
  std::vector<AuditRow> audit;
  for (const auto& j : read_jsonl(dir / "out" / "audit.jsonl")) audit.push_back(audit_from_json(j));
  const auto rejected = drops_of(audit, "align_reject");
  ASSERT_EQ(rejected.size(), 1U);
  const auto manifest = load_manifest(dir / "out" / "manifest.jsonl");
  for (const auto& s : manifest.samples) EXPECT_NE(s.prompt, "things you could eat a meal off");
  fs::remove_all(dir);
}

TEST(Stage5, MultiRegionPromptMaskIsPixelUnion) {
  Rig rig;
  Engine eng(rig.cfg, repo_templates(), rig.vlm, rig.detector, rig.segmenter);
  const auto kimg = fixtures::fixture_pixels(fixture("kitchen"));
  const auto out = eng.process_image(record_of("kitchen"), kimg);
  const auto mug = rect_mask(96, 128, 10, 40, 30, 70);
  const auto bottle = rect_mask(96, 128, 100, 20, 115, 75);
  const auto plate = rect_mask(96, 128, 45, 50, 80, 75);
  bool seen_union = false;
  for (const auto& s : out.samples) {
    if (s.prompt == "containers that could hold a drink") {
      seen_union = true;
      EXPECT_EQ(rle_area(s.mask), mug.count() + bottle.count());
      EXPECT_EQ(rle_decode(s.mask), mask_union(mug, bottle));
    }
    // The plate's verified mask is the refined one, never the clipped initial box.
    if (!s.is_negative && rle_decode(s.mask) == rect_mask(96, 128, 47, 52, 78, 73)) ADD_FAILURE() << s.sample_id;
  }
  EXPECT_TRUE(seen_union);
  (void)plate;
}

TEST(Negatives, PairingCountEmptyMasksAndVerification) {
  Rig rig;
  Engine eng(rig.cfg, repo_templates(), rig.vlm, rig.detector, rig.segmenter);
  for (const auto& f : fixtures::fixture_images()) {
    const auto out = eng.process_image(record_of(f.id), fixtures::fixture_pixels(f));
    std::map<ConceptFamily, int> pos;
    std::map<ConceptFamily, int> neg;
    for (const auto& s : out.samples) {
      EXPECT_NO_THROW(validate_sample(s));
      if (s.is_negative) {
        ++neg[s.concept_family];
        EXPECT_EQ(rle_area(s.mask), 0U);
        EXPECT_NE(s.prompt, "segment the red mug");  // verifier says it is present
      } else {
        ++pos[s.concept_family];
        EXPECT_GT(rle_area(s.mask), 0U);
      }
    }
    for (const auto& [c, n] : neg) EXPECT_LE(n, pos[c]) << f.id << " " << to_string(c);
    if (f.id == "kitchen") {
      EXPECT_EQ(neg[ConceptFamily::entities], 2);
      EXPECT_EQ(pos[ConceptFamily::entities], 2);
      EXPECT_EQ(drops_of(out.audit, "over_pairing").size(), 1U);
      EXPECT_EQ(drops_of(out.audit, "negative_reject").size(), 1U);
    }
    if (f.id == "desk") EXPECT_EQ(neg[ConceptFamily::affordances_functions], 3);
  }
}

// ---- whole runs -----------------------------------------------------------------------------

TEST(Pipeline, DeterministicAcrossRunsAndWorkerCounts) {
  const auto dir = scratch("determinism");
  const auto inputs = fixture_inputs(dir);
  std::vector<std::string> manifests;
  std::vector<std::string> audits;
  for (const int workers : {1, 1, 3}) {
    Rig rig;
    rig.cfg.workers = workers;
    const auto out = dir / ("out" + std::to_string(manifests.size()));
    (void)run_pipeline(inputs, rig.cfg, repo_templates(), rig.backends(), out);
    manifests.push_back(slurp(out / "manifest.jsonl"));
    audits.push_back(slurp(out / "audit.jsonl"));
  }
  EXPECT_FALSE(manifests[0].empty());
  EXPECT_EQ(manifests[0], manifests[1]);
  EXPECT_EQ(audits[0], audits[1]);
  EXPECT_EQ(manifests[0], manifests[2]);
  EXPECT_EQ(audits[0], audits[2]);
  // Manifest reloads and re-serializes byte-identically.
  EXPECT_EQ(serialize_manifest(parse_manifest(manifests[0])), manifests[0]);
  fs::remove_all(dir);
}

TEST(Pipeline, KilledRunResumesWithoutDuplicateBackendCalls) {
  const auto dir = scratch("resume");
  const auto inputs = fixture_inputs(dir);

  Rig full;
  (void)run_pipeline(inputs, full.cfg, repo_templates(), full.backends(), dir / "full");

  struct Killed {};
  Rig first;
  RunHooks hooks;
  hooks.after_image = [](std::size_t done) {
    if (done == 2) throw Killed{};
  };
  EXPECT_THROW((void)run_pipeline(inputs, first.cfg, repo_templates(), first.backends(), dir / "run", hooks), Killed);
  EXPECT_EQ(stage_markers(dir / "run", "desk").back(), "done");
  EXPECT_EQ(stage_markers(dir / "run", "kitchen").back(), "done");
  EXPECT_TRUE(stage_markers(dir / "run", "street").empty());
  EXPECT_FALSE(fs::exists(dir / "run" / "manifest.jsonl"));

  // The third image alone, for the expected number of calls.
  Rig third;
  RunInputs only_street = inputs;
  only_street.images = {inputs.images[2]};
  (void)run_pipeline(only_street, third.cfg, repo_templates(), third.backends(), dir / "street_only");

  Rig second;
  const auto summary = run_pipeline(inputs, second.cfg, repo_templates(), second.backends(), dir / "run");
  EXPECT_EQ(summary.images_resumed, 2U);
  EXPECT_EQ(summary.images_processed, 1U);
  EXPECT_EQ(second.calls(), third.calls());
  EXPECT_EQ(first.calls() + second.calls(), full.calls());
  EXPECT_EQ(slurp(dir / "run" / "manifest.jsonl"), slurp(dir / "full" / "manifest.jsonl"));
  EXPECT_EQ(slurp(dir / "run" / "audit.jsonl"), slurp(dir / "full" / "audit.jsonl"));

  // With the state files gone, replays are served entirely from the cache.
  fs::remove_all(dir / "run" / "state");
  Rig replay;
  const auto again = run_pipeline(inputs, replay.cfg, repo_templates(), replay.backends(), dir / "run");
  EXPECT_EQ(replay.calls(), 0U);
  EXPECT_EQ(again.cache_misses, 0U);
  EXPECT_GT(again.cache_hits, 0U);
  EXPECT_EQ(slurp(dir / "run" / "manifest.jsonl"), slurp(dir / "full" / "manifest.jsonl"));
  fs::remove_all(dir);
}

TEST(Pipeline, StageMarkersAreOrderedPrefixes) {
  const auto dir = scratch("markers");
  const auto inputs = fixture_inputs(dir);
  Rig rig;
  (void)run_pipeline(inputs, rig.cfg, repo_templates(), rig.backends(), dir / "out");
  const std::vector<std::string> order{"stage1", "stage2", "stage3", "stage4", "stage5", "negatives", "done"};
  for (const auto& img : inputs.images) {
    const auto m = stage_markers(dir / "out", img.image_id);
    ASSERT_EQ(m, order) << img.image_id;
  }
  fs::remove_all(dir);
}

TEST(Pipeline, EveryDropHasExactlyOneAuditRow) {
  const auto dir = scratch("audit");
  const auto inputs = fixture_inputs(dir);
  Rig rig;
  const auto summary = run_pipeline(inputs, rig.cfg, repo_templates(), rig.backends(), dir / "out");
  std::map<std::pair<std::string, std::string>, int> drops;
  std::set<std::string> reasons;
  for (const auto& j : read_jsonl(dir / "out" / "audit.jsonl")) {
    const auto a = audit_from_json(j);
    if (a.event != "drop") continue;
    ++drops[{a.image_id, a.item}];
    reasons.insert(a.reason);
    EXPECT_FALSE(a.reason.empty());
  }
  for (const auto& [k, n] : drops) EXPECT_EQ(n, 1) << k.first << " " << k.second;
  EXPECT_EQ(drops.size(), summary.drops);
  // Hand count over the fixtures: kitchen 9, street 2, desk 4.
  EXPECT_EQ(summary.drops, 15U);
  const std::set<std::string> expected{"too_long",       "no_detection",    "consistency_reject", "unparseable",
                                       "trivial",        "dangling_region", "malformed",          "over_limit",
                                       "align_reject",   "negative_reject", "over_pairing"};
  EXPECT_EQ(reasons, expected);

  // Every scene region either survives into some positive or has a drop row.
  const auto manifest = load_manifest(dir / "out" / "manifest.jsonl");
  for (const auto& s : manifest.samples) {
    EXPECT_FALSE(drops.contains({s.image.image_id, "prompt:" + std::string(to_string(s.concept_family)) + ":" + s.prompt}));
  }
  fs::remove_all(dir);
}

TEST(Pipeline, OutputDirectoryOfAnotherRunIsRefused) {
  const auto dir = scratch("other_run");
  const auto inputs = fixture_inputs(dir);
  Rig rig;
  (void)run_pipeline(inputs, rig.cfg, repo_templates(), rig.backends(), dir / "out");
  Rig other;
  other.cfg.max_prompts_per_concept = 2;
  EXPECT_THROW((void)run_pipeline(inputs, other.cfg, repo_templates(), other.backends(), dir / "out"), ConfigError);
  // Worker count does not change the run identity.
  Rig parallel;
  parallel.cfg.workers = 2;
  EXPECT_NO_THROW((void)run_pipeline(inputs, parallel.cfg, repo_templates(), parallel.backends(), dir / "out"));
  fs::remove_all(dir);
}

TEST(Pipeline, UnreadableImageIsIsolated) {
  const auto dir = scratch("broken");
  auto inputs = fixture_inputs(dir);
  std::ofstream(dir / "images" / "kitchen.png", std::ios::trunc) << "not a png";
  Rig rig;
  const auto summary = run_pipeline(inputs, rig.cfg, repo_templates(), rig.backends(), dir / "out");
  EXPECT_EQ(summary.images_failed, 1U);
  EXPECT_EQ(summary.images_processed, 2U);
  const auto manifest = load_manifest(dir / "out" / "manifest.jsonl");
  for (const auto& s : manifest.samples) EXPECT_NE(s.image.image_id, "kitchen");
  bool logged = false;
  for (const auto& j : read_jsonl(dir / "out" / "audit.jsonl")) logged |= j["reason"] == "image_error";
  EXPECT_TRUE(logged);
  fs::remove_all(dir);
}

TEST(Pipeline, SeedMasksSkipGrounding) {
  const auto dir = scratch("seeds");
  auto inputs = fixture_inputs(dir);
  inputs.images = {inputs.images[1]};  // kitchen
  ASSERT_EQ(inputs.images[0].image_id, "kitchen");
  // Human seeds use the scene's descriptions so the mock verifier recognises them.
  inputs.seeds["kitchen"] = {
      {"red mug on the left side of the table", rect_mask(96, 128, 10, 40, 30, 70)},
      {"blue plate in the middle of the table", rect_mask(96, 128, 47, 52, 78, 73)},
      {"tall green bottle standing at the right edge", rect_mask(96, 128, 100, 20, 115, 75)},
      {"yellow cutting board behind the blue plate", rect_mask(96, 128, 40, 20, 90, 45)},
  };
  Rig rig;
  rig.cfg.split = Split::human_annotated;
  (void)run_pipeline(inputs, rig.cfg, repo_templates(), rig.backends(), dir / "out");
  EXPECT_EQ(rig.detector.calls(), 0U);
  EXPECT_EQ(rig.segmenter.calls(), 0U);  // refinement is off for human seeds by default
  const auto manifest = load_manifest(dir / "out" / "manifest.jsonl");
  ASSERT_FALSE(manifest.samples.empty());
  for (const auto& s : manifest.samples) EXPECT_EQ(s.split, Split::human_annotated);

  Rig refine;
  refine.cfg.refine_seed_masks = true;
  (void)run_pipeline(inputs, refine.cfg, repo_templates(), refine.backends(), dir / "out_refined");
  EXPECT_GT(refine.segmenter.calls(), 0U);
  fs::remove_all(dir);
}
