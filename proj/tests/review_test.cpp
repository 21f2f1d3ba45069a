#include <gtest/gtest.h>

#include <atomic>
#include <barrier>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include <unistd.h>

#include <httplib.h>

#include "groundseg/image.hpp"
#include "groundseg/review.hpp"

using namespace groundseg;
using namespace groundseg::review;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gs_review_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<Candidate> make_candidates(int n, const fs::path& dir = {}) {
  std::vector<Candidate> out;
  for (int i = 0; i < n; ++i) {
    Candidate c;
    c.candidate_id = "img" + std::to_string(i / 3) + ":entities:p" + std::to_string(i % 3);
    c.sample.sample_id = c.candidate_id;
    c.sample.image = {"img" + std::to_string(i / 3), "img.png", 4, 3};
    c.sample.prompt = "prompt " + std::to_string(i);
    BinaryMask m(3, 4);
    m.set(1, i % 4);
    c.sample.mask = rle_encode(m);
    c.ai_suggestion = i % 4 == 3 ? Decision::reject : Decision::accept;
    if (!dir.empty()) {
      c.plain_uri = dir / "plain.png";
      c.overlay_uri = dir / "overlay.png";
    }
    out.push_back(std::move(c));
  }
  return out;
}

struct FakeClock {
  std::shared_ptr<std::atomic<std::int64_t>> t = std::make_shared<std::atomic<std::int64_t>>(1'700'000'000'000);
  Clock fn() const {
    return [t = t] { return t->load(); };
  }
};

StoreOptions fast(const FakeClock& clock) {
  StoreOptions o;
  o.clock = clock.fn();
  o.fsync = false;
  return o;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST(Queue, OldestPendingFirstAndEmptyQueue) {
  const auto dir = scratch("queue");
  FakeClock clock;
  ReviewStore store(make_candidates(3), dir / "verdicts.jsonl", fast(clock));
  const auto first = store.next_candidate("alice");
  ASSERT_TRUE(first);
  EXPECT_EQ(first->candidate_id, store.candidates()[0].candidate_id);
  EXPECT_EQ(store.snapshot()->states[0].status, Status::assigned);
  EXPECT_EQ(store.snapshot()->states[0].lease_expires_ms, clock.t->load() + 10 * 60 * 1000);
  // The same session gets its held candidate back.
  EXPECT_EQ(store.next_candidate("alice")->candidate_id, first->candidate_id);
  EXPECT_EQ(store.next_candidate("bob")->candidate_id, store.candidates()[1].candidate_id);
  EXPECT_EQ(store.next_candidate("carol")->candidate_id, store.candidates()[2].candidate_id);
  EXPECT_FALSE(store.next_candidate("dave").has_value());
  for (const auto& [who, i] : std::vector<std::pair<std::string, int>>{{"alice", 0}, {"bob", 1}, {"carol", 2}}) {
    store.record_verdict(store.candidates()[static_cast<std::size_t>(i)].candidate_id, Decision::accept, who);
  }
  EXPECT_FALSE(store.next_candidate("alice").has_value());
  fs::remove_all(dir);
}

TEST(Queue, ConcurrentSessionsNeverShareACandidate) {
  const auto dir = scratch("race");
  for (int iter = 0; iter < 1000; ++iter) {
    const auto log = dir / ("log" + std::to_string(iter) + ".jsonl");
    FakeClock clock;
    ReviewStore store(make_candidates(3), log, fast(clock));
    std::barrier sync(2);
    std::optional<Candidate> got[2];
    std::jthread a([&] {
      sync.arrive_and_wait();
      got[0] = store.next_candidate("s1");
    });
    std::jthread b([&] {
      sync.arrive_and_wait();
      got[1] = store.next_candidate("s2");
    });
    a.join();
    b.join();
    ASSERT_TRUE(got[0] && got[1]);
    ASSERT_NE(got[0]->candidate_id, got[1]->candidate_id) << "iteration " << iter;
    const auto snap = store.snapshot();
    std::set<std::string> holders;
    for (const auto& st : snap->states) {
      if (st.status == Status::assigned) holders.insert(st.assigned_to);
    }
    ASSERT_EQ(holders, (std::set<std::string>{"s1", "s2"}));
    fs::remove(log);
  }
  fs::remove_all(dir);
}

TEST(Queue, TwoSessionsDrainingDecideEachCandidateOnce) {
  const auto dir = scratch("drain");
  FakeClock clock;
  ReviewStore store(make_candidates(400), dir / "verdicts.jsonl", fast(clock));
  std::vector<std::string> seen[2];
  auto worker = [&](int k) {
    const std::string session = "s" + std::to_string(k);
    while (const auto c = store.next_candidate(session)) {
      seen[k].push_back(c->candidate_id);
      store.record_verdict(c->candidate_id, k == 0 ? Decision::accept : Decision::reject, session);
    }
  };
  {
    std::jthread t0(worker, 0);
    std::jthread t1(worker, 1);
  }
  std::set<std::string> all(seen[0].begin(), seen[0].end());
  for (const auto& id : seen[1]) EXPECT_TRUE(all.insert(id).second) << id << " assigned twice";
  EXPECT_EQ(all.size(), 400U);
  EXPECT_EQ(store.snapshot()->verdicts.size(), 400U);
  EXPECT_EQ(store.export_accepted().samples.size(), seen[0].size());
  fs::remove_all(dir);
}

TEST(Queue, ExpiredLeaseReturnsToThePool) {
  const auto dir = scratch("lease");
  FakeClock clock;
  ReviewStore store(make_candidates(1), dir / "verdicts.jsonl", fast(clock));
  const auto id = store.next_candidate("alice")->candidate_id;
  EXPECT_FALSE(store.next_candidate("bob").has_value());
  *clock.t += 10 * 60 * 1000 - 1;
  EXPECT_FALSE(store.next_candidate("bob").has_value());
  *clock.t += 1;
  ASSERT_EQ(store.next_candidate("bob")->candidate_id, id);
  EXPECT_THROW(store.record_verdict(id, Decision::accept, "alice"), ConflictError);
  EXPECT_EQ(store.record_verdict(id, Decision::accept, "bob").annotator_id, "bob");
  fs::remove_all(dir);
}

TEST(Verdicts, IdempotentConflictAndUnknown) {
  const auto dir = scratch("verdicts");
  FakeClock clock;
  const auto log = dir / "verdicts.jsonl";
  ReviewStore store(make_candidates(3), log, fast(clock));
  const auto& ids = store.candidates();
  EXPECT_THROW(store.record_verdict(ids[0].candidate_id, Decision::accept, "alice"), ConflictError);  // never assigned
  (void)store.next_candidate("alice");
  const auto rec = store.record_verdict(ids[0].candidate_id, Decision::accept, "alice", "looks right");
  EXPECT_EQ(store.snapshot()->states[0].status, Status::decided);
  const auto lines = line_count(log);
  *clock.t += 5000;
  EXPECT_EQ(store.record_verdict(ids[0].candidate_id, Decision::accept, "alice"), rec);
  EXPECT_EQ(line_count(log), lines);
  EXPECT_THROW(store.record_verdict(ids[0].candidate_id, Decision::reject, "alice"), ConflictError);
  EXPECT_THROW(store.record_verdict(ids[0].candidate_id, Decision::accept, "bob"), ConflictError);
  EXPECT_THROW(store.record_verdict("nope", Decision::accept, "alice"), UnknownCandidate);
  (void)store.next_candidate("bob");
  EXPECT_THROW(store.record_verdict(ids[1].candidate_id, Decision::accept, "alice"), ConflictError);
  EXPECT_EQ(rec.reason, std::optional<std::string>("looks right"));
  EXPECT_EQ(rec.ai_suggestion_at_decision, Decision::accept);
  fs::remove_all(dir);
}

TEST(Verdicts, ReplayReconstructsIdenticalState) {
  const auto dir = scratch("replay");
  const auto log = dir / "verdicts.jsonl";
  FakeClock clock;
  std::shared_ptr<const ReviewStore::Snapshot> before;
  {
    ReviewStore store(make_candidates(9), log, fast(clock));
    for (int i = 0; i < 6; ++i) {
      const std::string s = "s" + std::to_string(i % 2);
      const auto c = store.next_candidate(s);
      *clock.t += 1234;
      if (i != 4) store.record_verdict(c->candidate_id, i % 3 == 0 ? Decision::reject : Decision::accept, s, i == 1 ? std::optional<std::string>("dup") : std::nullopt);
    }
    (void)store.next_candidate("s9");  // a live lease survives the restart too
    before = store.snapshot();
  }
  {
    ReviewStore again(make_candidates(9), log, fast(clock));
    EXPECT_EQ(again.snapshot()->states, before->states);
    EXPECT_EQ(again.snapshot()->verdicts, before->verdicts);
  }
  // A torn final line (crash mid-append) is discarded; earlier lines are kept.
  std::ofstream(log, std::ios::app) << R"({"event":"verdict","candidate_id":"img)";
  {
    ReviewStore again(make_candidates(9), log, fast(clock));
    EXPECT_EQ(again.snapshot()->states, before->states);
    // And the log is writable again afterwards.
    const auto c = again.next_candidate("s7");
    ASSERT_TRUE(c);
    again.record_verdict(c->candidate_id, Decision::accept, "s7");
  }
  ReviewStore third(make_candidates(9), log, fast(clock));
  EXPECT_EQ(third.snapshot()->verdicts.size(), before->verdicts.size() + 1);

  // A corrupt line in the middle is an error, not silently skipped.
  const auto bad = dir / "bad.jsonl";
  std::ofstream(bad) << "{not json}\n";
  EXPECT_THROW(ReviewStore(make_candidates(1), bad, fast(clock)), ParseError);
  fs::remove_all(dir);
}

TEST(Export, ExactlyTheAcceptedSet) {
  const auto dir = scratch("export");
  FakeClock clock;
  ReviewStore store(make_candidates(4), dir / "verdicts.jsonl", fast(clock));
  EXPECT_TRUE(store.export_accepted(dir / "empty.jsonl").samples.empty());
  EXPECT_TRUE(load_manifest(dir / "empty.jsonl").samples.empty());

  const std::vector<Decision> decisions{Decision::accept, Decision::reject, Decision::accept};
  std::set<std::string> accepted;
  std::set<std::string> rejected;
  for (const auto d : decisions) {
    const auto c = store.next_candidate("a");
    store.record_verdict(c->candidate_id, d, "a");
    (d == Decision::accept ? accepted : rejected).insert(c->candidate_id);
  }
  const auto m = store.export_accepted(dir / "accepted.jsonl");
  ASSERT_EQ(m.samples.size(), 2U);
  const auto loaded = load_manifest(dir / "accepted.jsonl");
  EXPECT_EQ(loaded.samples, m.samples);
  std::set<std::string> exported;
  for (const auto& s : loaded.samples) exported.insert(s.sample_id);
  EXPECT_EQ(exported, accepted);
  std::set<std::string> decided;
  for (const auto& v : store.snapshot()->verdicts) decided.insert(v.candidate_id);
  std::set<std::string> both = exported;
  both.insert(rejected.begin(), rejected.end());
  EXPECT_EQ(both, decided);
  for (const auto& id : rejected) EXPECT_FALSE(exported.contains(id));
  fs::remove_all(dir);
}

TEST(Agreement, SevenOfTenAndEdgeCases) {
  std::vector<VerdictRecord> v;
  for (int i = 0; i < 10; ++i) {
    VerdictRecord r;
    r.candidate_id = "c" + std::to_string(i);
    r.ai_suggestion_at_decision = i < 8 ? Decision::accept : Decision::reject;
    // Humans agree on 0..5 (accept) and 8 (reject); disagree on 6, 7 and 9.
    r.decision = (i < 6) ? Decision::accept : (i == 8 ? Decision::reject : (i == 9 ? Decision::accept : Decision::reject));
    v.push_back(r);
  }
  const auto a = agreement_of(v);
  EXPECT_EQ(a.n_decided, 10U);
  EXPECT_NEAR(a.agreement_rate, 0.700, 1e-12);
  EXPECT_EQ(a.confusion[0][0], 6U);
  EXPECT_EQ(a.confusion[0][1], 2U);
  EXPECT_EQ(a.confusion[1][0], 1U);
  EXPECT_EQ(a.confusion[1][1], 1U);
  EXPECT_EQ(a.confusion[0][0] + a.confusion[0][1] + a.confusion[1][0] + a.confusion[1][1], a.n_decided);

  for (auto& r : v) r.decision = r.ai_suggestion_at_decision;
  const auto all = agreement_of(v);
  EXPECT_DOUBLE_EQ(all.agreement_rate, 1.0);
  EXPECT_EQ(all.confusion[0][1] + all.confusion[1][0], 0U);
  EXPECT_THROW((void)agreement_of({}), Error);
}

TEST(Agreement, ComputedFromTheStoreLog) {
  const auto dir = scratch("agree");
  FakeClock clock;
  ReviewStore store(make_candidates(10), dir / "verdicts.jsonl", fast(clock));
  EXPECT_THROW((void)store.agreement_report(), Error);
  // Suggestions are reject for i % 4 == 3 (candidates 3 and 7).
  int k = 0;
  while (const auto c = store.next_candidate("h")) {
    const bool agree = k < 7;
    const Decision d = agree ? c->ai_suggestion : (c->ai_suggestion == Decision::accept ? Decision::reject : Decision::accept);
    store.record_verdict(c->candidate_id, d, "h");
    ++k;
  }
  EXPECT_NEAR(store.agreement_report().agreement_rate, 0.700, 1e-12);
  fs::remove_all(dir);
}

// ---- HTTP -----------------------------------------------------------------------------------

class HttpFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = scratch("http");
    RgbImage img(3, 4);
    img.set_pixel(1, 1, 255, 0, 0);
    save_png(img, dir / "plain.png");
    img.set_pixel(1, 2, 0, 255, 0);
    save_png(img, dir / "overlay.png");
    fs::create_directories(dir / "ui");
    std::ofstream(dir / "ui" / "index.html") << "<!doctype html><title>review</title>";
    store = std::make_unique<ReviewStore>(make_candidates(3, dir), dir / "verdicts.jsonl", fast(clock));
    server = std::make_unique<ReviewServer>(*store, ServerOptions{dir / "ui", dir / "export.jsonl"});
    port = server->bind("127.0.0.1", 0);
    thread = std::thread([this] { server->listen(); });
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    for (int i = 0; i < 100 && !client->Get("/api/stats"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  void TearDown() override {
    server->stop();
    thread.join();
    fs::remove_all(dir);
  }

  httplib::Result post_verdict(const nlohmann::json& body) {
    return client->Post("/api/verdicts", body.dump(), "application/json");
  }

  fs::path dir;
  FakeClock clock;
  std::unique_ptr<ReviewStore> store;
  std::unique_ptr<ReviewServer> server;
  std::unique_ptr<httplib::Client> client;
  std::thread thread;
  int port = 0;
};

TEST_F(HttpFixture, ReviewRoundTrip) {
  auto r = client->Get("/api/candidates/next?session=ann1");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  const auto c = nlohmann::json::parse(r->body)["candidate"];
  EXPECT_EQ(c["candidate_id"], "img0:entities:p0");
  EXPECT_EQ(c["status"], "assigned");
  EXPECT_EQ(c["ai_suggestion"], "accept");

  auto img = client->Get(c["overlay_url"].get<std::string>());
  ASSERT_TRUE(img);
  EXPECT_EQ(img->status, 200);
  EXPECT_EQ(img->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(img->body.substr(1, 3), "PNG");
  auto plain = client->Get(c["plain_url"].get<std::string>());
  EXPECT_NE(plain->body, img->body);
  EXPECT_EQ(client->Get("/api/images/img0:entities:p0?variant=thumb")->status, 400);
  EXPECT_EQ(client->Get("/api/images/nope")->status, 404);

  const nlohmann::json verdict{{"candidate_id", c["candidate_id"]}, {"decision", "accept"}, {"annotator_id", "ann1"}};
  auto v1 = post_verdict(verdict);
  ASSERT_EQ(v1->status, 200);
  auto v2 = post_verdict(verdict);  // double submit
  ASSERT_EQ(v2->status, 200);
  EXPECT_EQ(v1->body, v2->body);
  EXPECT_EQ(store->snapshot()->verdicts.size(), 1U);
  auto flip = verdict;
  flip["decision"] = "reject";
  EXPECT_EQ(post_verdict(flip)->status, 409);
  EXPECT_EQ(post_verdict({{"candidate_id", "zzz"}, {"decision", "accept"}, {"annotator_id", "a"}})->status, 404);
  EXPECT_EQ(post_verdict({{"candidate_id", "zzz"}, {"decision", "maybe"}, {"annotator_id", "a"}})->status, 400);
  EXPECT_EQ(post_verdict({{"candidate_id", "zzz"}, {"decision", "accept"}, {"annotator", "a"}})->status, 400);
  EXPECT_EQ(client->Post("/api/verdicts", "{", "application/json")->status, 400);
  EXPECT_EQ(client->Get("/api/candidates/next")->status, 400);

  const auto c2 = nlohmann::json::parse(client->Get("/api/candidates/next?session=ann1")->body)["candidate"];
  ASSERT_EQ(post_verdict({{"candidate_id", c2["candidate_id"]}, {"decision", "reject"}, {"annotator_id", "ann1"},
                          {"reason", "duplicate object"}})
                ->status,
            200);

  const auto stats = nlohmann::json::parse(client->Get("/api/stats")->body);
  EXPECT_EQ(stats["decided"], 2);
  EXPECT_EQ(stats["accepted"], 1);
  EXPECT_EQ(stats["pending"], 1);
  EXPECT_DOUBLE_EQ(stats["agreement"]["agreement_rate"].get<double>(), 0.5);

  const auto exported = nlohmann::json::parse(client->Get("/api/export")->body);
  EXPECT_EQ(exported["count"], 1);
  EXPECT_EQ(exported["sample_ids"], nlohmann::json::array({"img0:entities:p0"}));
  EXPECT_EQ(load_manifest(dir / "export.jsonl").samples.size(), 1U);

  auto index = client->Get("/");
  ASSERT_TRUE(index);
  EXPECT_EQ(index->status, 200);
  EXPECT_NE(index->body.find("<title>review</title>"), std::string::npos);

  const auto last = nlohmann::json::parse(client->Get("/api/candidates/next?session=ann2")->body)["candidate"];
  EXPECT_EQ(last["candidate_id"], "img0:entities:p2");
  EXPECT_TRUE(nlohmann::json::parse(client->Get("/api/candidates/next?session=ann3")->body)["candidate"].is_null());
}

TEST(Candidates, FromManifestRendersOverlaysAndRoundTrips) {
  const auto dir = scratch("cands");
  RgbImage img(6, 8);
  save_png(img, dir / "a.png");
  DatasetManifest m;
  for (int i = 0; i < 3; ++i) {
    Sample s;
    s.sample_id = "a:entities:" + std::string(i == 2 ? "n0" : "p" + std::to_string(i));
    s.image = {"a", "a.png", 8, 6};
    s.prompt = "p" + std::to_string(i);
    BinaryMask mask(6, 8);
    if (i < 2) mask.fill_rect(1, 1, 4, 4);
    s.mask = rle_encode(mask);
    s.is_negative = i == 2;
    m.samples.push_back(s);
  }
  const auto cands = candidates_from_manifest(m, dir, dir / "overlays");
  ASSERT_EQ(cands.size(), 2U);
  for (const auto& c : cands) {
    EXPECT_TRUE(fs::exists(c.overlay_uri));
    EXPECT_EQ(load_image(c.overlay_uri).width, 8);
  }
  EXPECT_NE(load_image(cands[0].overlay_uri).data, img.data);
  save_candidates(cands, dir / "candidates.jsonl");
  EXPECT_EQ(load_candidates(dir / "candidates.jsonl"), cands);
  fs::remove_all(dir);
}
