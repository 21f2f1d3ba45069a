#include <gtest/gtest.h>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <httplib.h>

#include "engine_fixtures.hpp"
#include "groundseg/core.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string quote(const std::string& s) {
  std::string q = "'";
  for (const char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / ("gs_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fixtures::write_fixtures(root / "fx");
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static Result run(const std::vector<std::string>& args) {
    std::string cmd = quote(GROUNDSEG_CLI);
    for (const auto& a : args) cmd += " " + quote(a);
    const auto out = root / "stdout.txt";
    const auto err = root / "stderr.txt";
    cmd += " >" + quote(out.string()) + " 2>" + quote(err.string());
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  static std::string path(const std::string& rel) { return (root / rel).string(); }

  static void write(const std::string& rel, const std::string& text) {
    fs::create_directories((root / rel).parent_path());
    std::ofstream(root / rel) << text;
  }

  static inline fs::path root;
};

// A COCO file over the fixture images: box polygons for a few blocks, one crowd region.
const char* kCoco = R"({
  "images": [
    {"id": 1, "file_name": "kitchen.png", "width": 128, "height": 96},
    {"id": 2, "file_name": "street.png", "width": 128, "height": 96}
  ],
  "categories": [{"id": 1, "name": "cup"}, {"id": 2, "name": "car"}, {"id": 3, "name": "bottle"}],
  "annotations": [
    {"id": 10, "image_id": 1, "category_id": 1, "iscrowd": 0, "segmentation": [[10, 40, 30, 40, 30, 70, 10, 70]]},
    {"id": 11, "image_id": 1, "category_id": 3, "iscrowd": 0, "segmentation": [[100, 20, 115, 20, 115, 75, 100, 75]]},
    {"id": 12, "image_id": 2, "category_id": 2, "iscrowd": 0, "segmentation": [[20, 50, 70, 50, 70, 80, 20, 80]]},
    {"id": 13, "image_id": 2, "category_id": 2, "iscrowd": 1, "segmentation": {"size": [96, 128], "counts": [12288]}}
  ]
})";

const char* kTinyConfig = R"({
  "model": {"image_size": 32, "patch_stride": 8, "d_img": 8, "d_dec": 8, "d_t": 8, "decoder_heads": 2,
            "prompt_layers": 1, "prompt_heads": 2, "max_text_tokens": 96, "lora_rank": 2},
  "train": {"total_steps": 2, "warmup_steps": 1, "batch_size": 2, "grad_accum": 1}
})";

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"dataset", "stats", "--manifest", "x", "--bogus"}).code, 2);
  const auto r = run({"train", "--phase", "2", "--manifest", "m", "--images", "i", "--out", path("t")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--init-checkpoint"), std::string::npos);
  write("bad_config.json", R"({"engine": {"max_prompt": 2}})");
  EXPECT_EQ(run({"engine", "run", "--images", path("fx/images"), "--out", path("bad"), "--config",
                 path("bad_config.json")})
                .code,
            2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(Cli, OperationalFailureExitsOne) {
  EXPECT_EQ(run({"dataset", "stats", "--manifest", path("missing.jsonl")}).code, 1);
  EXPECT_EQ(run({"engine", "resume", "--out", path("nothing_here")}).code, 1);
}

TEST_F(Cli, EngineRunResumeAndStats) {
  const auto a = run({"engine", "run", "--images", path("fx/images"), "--out", path("eng_a"), "--fixtures", path("fx"),
                      "--seed", "3"});
  ASSERT_EQ(a.code, 0) << a.err;
  const auto summary = nlohmann::json::parse(a.out);
  EXPECT_EQ(summary["positives"], 12);
  EXPECT_EQ(summary["negatives"], 8);
  EXPECT_TRUE(fs::exists(path("eng_a/audit.jsonl")));
  EXPECT_TRUE(fs::exists(path("eng_a/resolved_config.json")));
  EXPECT_NE(a.err.find("resolved config"), std::string::npos);
  const auto resolved = nlohmann::json::parse(slurp(path("eng_a/resolved_config.json")));
  EXPECT_EQ(resolved["engine"]["seed"], 3);
  EXPECT_EQ(resolved["model"]["seed"], 3);
  EXPECT_EQ(resolved["train"]["seed"], 3);

  const auto manifest = slurp(path("eng_a/manifest.jsonl"));
  const auto b = run({"engine", "run", "--images", path("fx/images"), "--out", path("eng_b"), "--fixtures", path("fx"),
                      "--seed", "3"});
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(slurp(path("eng_b/manifest.jsonl")), manifest);

  // Resume of a finished run loads every image from state.
  const auto r = run({"engine", "resume", "--out", path("eng_a")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out)["images_resumed"], 3);
  EXPECT_EQ(slurp(path("eng_a/manifest.jsonl")), manifest);

  const auto s = run({"dataset", "stats", "--manifest", path("eng_a/manifest.jsonl")});
  ASSERT_EQ(s.code, 0);
  EXPECT_EQ(nlohmann::json::parse(s.out)["total"], 20);
}

TEST_F(Cli, ConvertTrainEvalReport) {
  write("coco.json", kCoco);
  write("tiny.json", kTinyConfig);
  const auto c = run({"dataset", "convert-coco", path("coco.json"), "--out", path("data/coco.jsonl")});
  ASSERT_EQ(c.code, 0) << c.err;
  const auto coco = groundseg::load_manifest(path("data/coco.jsonl"));
  ASSERT_EQ(coco.samples.size(), 3U);  // the crowd annotation is skipped
  EXPECT_EQ(groundseg::rle_area(coco.samples[0].mask), 20U * 30U);
  EXPECT_EQ(coco.samples[0].prompt, "cup");

  const auto t1 = run({"train", "--phase", "1", "--manifest", path("data/coco.jsonl"), "--images", path("fx/images"),
                       "--out", path("p1"), "--config", path("tiny.json"), "--seed", "4"});
  ASSERT_EQ(t1.code, 0) << t1.err;
  ASSERT_TRUE(fs::exists(path("p1/final.ckpt")));
  EXPECT_TRUE(fs::exists(path("p1/loss.csv")));

  // Phase 2 mixes the engine output with the pretraining data.
  ASSERT_EQ(run({"engine", "run", "--images", path("fx/images"), "--out", path("eng_t"), "--fixtures", path("fx")}).code, 0);
  auto mixed = coco;
  for (const auto& s : groundseg::load_manifest(path("eng_t/manifest.jsonl")).samples) mixed.samples.push_back(s);
  groundseg::save_manifest(mixed, path("data/mixed.jsonl"));
  const auto t2 = run({"train", "--phase", "2", "--init-checkpoint", path("p1/final.ckpt"), "--manifest",
                       path("data/mixed.jsonl"), "--images", path("fx/images"), "--out", path("p2"), "--config",
                       path("tiny.json")});
  ASSERT_EQ(t2.code, 0) << t2.err;

  const auto e = run({"eval", "--checkpoint", path("p2/final.ckpt"), "--manifest", path("eng_t/manifest.jsonl"),
                      "--images", path("fx/images"), "--out", path("ev"), "--threshold", "0.5"});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("All samples gIoU"), std::string::npos);
  const auto report = nlohmann::json::parse(slurp(path("ev/report.json")));
  EXPECT_EQ(report["with_negatives"]["n"], 20);
  EXPECT_EQ(report["positives_only"]["n"], 12);

  const auto r = run({"report", path("ev/predictions.jsonl"), "--manifest", path("eng_t/manifest.jsonl"), "--out",
                      path("rep")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(path("rep/report.json")), slurp(path("ev/report.json")));

  // An impossible threshold predicts nothing: negatives score 1, positives 0.
  const auto z = run({"eval", "--checkpoint", path("p2/final.ckpt"), "--manifest", path("eng_t/manifest.jsonl"),
                      "--images", path("fx/images"), "--out", path("ev0"), "--threshold", "1.01"});
  ASSERT_EQ(z.code, 0);
  const auto zr = nlohmann::json::parse(slurp(path("ev0/report.json")));
  EXPECT_NEAR(zr["with_negatives"]["columns"]["All"]["giou"].get<double>(), 100.0 * 8.0 / 20.0, 1e-9);
  EXPECT_NEAR(zr["positives_only"]["columns"]["All"]["giou"].get<double>(), 0.0, 1e-12);
}

TEST_F(Cli, ServeAnswersAndStopsOnSigterm) {
  ASSERT_EQ(run({"engine", "run", "--images", path("fx/images"), "--out", path("eng_s"), "--fixtures", path("fx")}).code, 0);
  fs::create_directories(path("ui"));
  write("ui/index.html", "<!doctype html><title>ui</title>");
  write("serve.json", R"({"review": {"ui_dir": ")" + path("ui") + R"("}})");

  // Pick a free port.
  const int sock = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ASSERT_EQ(::bind(sock, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  socklen_t len = sizeof addr;
  ::getsockname(sock, reinterpret_cast<sockaddr*>(&addr), &len);
  const int port = ntohs(addr.sin_port);
  ::close(sock);

  const pid_t pid = ::fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    const std::string p = std::to_string(port);
    const std::string m = path("eng_s/manifest.jsonl");
    const std::string i = path("fx/images");
    const std::string o = path("review");
    const std::string c = path("serve.json");
    if (std::freopen("/dev/null", "w", stderr) == nullptr) ::_exit(126);
    ::execl(GROUNDSEG_CLI, GROUNDSEG_CLI, "serve", "--manifest", m.c_str(), "--images", i.c_str(), "--out", o.c_str(),
            "--port", p.c_str(), "--config", c.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  httplib::Client client("127.0.0.1", port);
  httplib::Result stats;
  for (int k = 0; k < 200 && !(stats = client.Get("/api/stats")); ++k) {
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
  }
  ASSERT_TRUE(stats);
  EXPECT_EQ(nlohmann::json::parse(stats->body)["n_candidates"], 12);
  const auto next = nlohmann::json::parse(client.Get("/api/candidates/next?session=t")->body)["candidate"];
  const auto v = client.Post("/api/verdicts",
                             nlohmann::json{{"candidate_id", next["candidate_id"]}, {"decision", "accept"},
                                            {"annotator_id", "t"}}
                                 .dump(),
                             "application/json");
  EXPECT_EQ(v->status, 200);
  EXPECT_EQ(nlohmann::json::parse(client.Get("/api/export")->body)["count"], 1);
  EXPECT_EQ(client.Get("/")->status, 200);
  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  EXPECT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
  EXPECT_EQ(groundseg::load_manifest(path("review/accepted.jsonl")).samples.size(), 1U);
  EXPECT_TRUE(fs::exists(path("review/verdicts.jsonl")));
}
