#pragma once

// Human verification of candidate prompt-mask pairs: a lease-based work queue
// over an append-only event log, plus the HTTP front end.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundseg/core.hpp"
#include "groundseg/error.hpp"

namespace groundseg::review {

enum class Decision { accept, reject };
enum class Status { pending, assigned, decided };

[[nodiscard]] std::string to_string(Decision d);
[[nodiscard]] std::string to_string(Status s);
[[nodiscard]] Decision decision_from_string(std::string_view s);

class UnknownCandidate : public Error {
 public:
  using Error::Error;
};

/// The candidate is decided differently, or held by someone else.
class ConflictError : public Error {
 public:
  using Error::Error;
};

struct Candidate {
  std::string candidate_id;
  Sample sample;
  std::filesystem::path overlay_uri;
  std::filesystem::path plain_uri;
  Decision ai_suggestion = Decision::accept;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

[[nodiscard]] nlohmann::ordered_json candidate_to_json(const Candidate& c);
[[nodiscard]] Candidate candidate_from_json(const nlohmann::json& j);

/// candidates.jsonl: one candidate object per line.
[[nodiscard]] std::vector<Candidate> load_candidates(const std::filesystem::path& path);
void save_candidates(const std::vector<Candidate>& candidates, const std::filesystem::path& path);

/// One candidate per manifest sample (negatives skipped), with overlays
/// rendered into `overlay_dir`. Every suggestion is "accept" because engine
/// output has already passed the automatic verifiers.
[[nodiscard]] std::vector<Candidate> candidates_from_manifest(const DatasetManifest& manifest,
                                                              const std::filesystem::path& image_root,
                                                              const std::filesystem::path& overlay_dir);

struct VerdictRecord {
  std::string candidate_id;
  Decision decision = Decision::accept;
  std::string annotator_id;
  std::int64_t decided_at_ms = 0;
  Decision ai_suggestion_at_decision = Decision::accept;
  std::optional<std::string> reason;

  friend bool operator==(const VerdictRecord&, const VerdictRecord&) = default;
};

[[nodiscard]] nlohmann::ordered_json verdict_to_json(const VerdictRecord& v);

struct CandidateState {
  Status status = Status::pending;
  std::string assigned_to;
  std::int64_t lease_expires_ms = 0;
  std::optional<VerdictRecord> verdict;

  friend bool operator==(const CandidateState&, const CandidateState&) = default;
};

struct AgreementStats {
  std::size_t n_decided = 0;
  double agreement_rate = 0.0;
  // confusion[ai][human], index 0 = accept, 1 = reject.
  std::size_t confusion[2][2] = {{0, 0}, {0, 0}};
};

[[nodiscard]] nlohmann::ordered_json agreement_to_json(const AgreementStats& a);

/// Agreement over a list of verdicts. Throws Error when the list is empty.
[[nodiscard]] AgreementStats agreement_of(const std::vector<VerdictRecord>& verdicts);

using Clock = std::function<std::int64_t()>;
[[nodiscard]] std::int64_t system_now_ms();
[[nodiscard]] std::string format_timestamp(std::int64_t ms);

struct StoreOptions {
  std::int64_t lease_ms = 10 * 60 * 1000;
  Clock clock = system_now_ms;
  bool fsync = true;
};

/// Queue state. Every mutation is appended to the log before it becomes
/// visible, so replaying the log on start rebuilds the exact state.
class ReviewStore {
 public:
  ReviewStore(std::vector<Candidate> candidates, std::filesystem::path log_path, StoreOptions options = {});
  ~ReviewStore();
  ReviewStore(const ReviewStore&) = delete;
  ReviewStore& operator=(const ReviewStore&) = delete;

  /// The session's live lease if it holds one (renewed), otherwise the oldest
  /// pending or lease-expired candidate. nullopt when nothing is available.
  [[nodiscard]] std::optional<Candidate> next_candidate(const std::string& session);

  /// Identical resubmissions return the stored record without a new log line.
  VerdictRecord record_verdict(const std::string& candidate_id, Decision decision, const std::string& annotator_id,
                               std::optional<std::string> reason = std::nullopt);

  /// Accepted samples in candidate order; written to `out_path` when given.
  DatasetManifest export_accepted(const std::optional<std::filesystem::path>& out_path = std::nullopt) const;

  /// Throws Error when nothing has been decided.
  [[nodiscard]] AgreementStats agreement_report() const;

  struct Snapshot {
    std::vector<CandidateState> states;
    std::vector<VerdictRecord> verdicts;  // in commit order
  };
  /// Consistent view without blocking on an in-flight commit.
  [[nodiscard]] std::shared_ptr<const Snapshot> snapshot() const;

  [[nodiscard]] const std::vector<Candidate>& candidates() const { return candidates_; }
  [[nodiscard]] const Candidate& candidate(const std::string& id) const;
  [[nodiscard]] nlohmann::ordered_json stats_json() const;
  [[nodiscard]] std::int64_t now() const { return options_.clock(); }

 private:
  void replay();
  void apply(const nlohmann::json& event, Snapshot& s);
  void commit(const nlohmann::ordered_json& event, Snapshot next);
  [[nodiscard]] std::size_t index_of(const std::string& id) const;

  std::vector<Candidate> candidates_;
  std::map<std::string, std::size_t> index_;
  std::filesystem::path log_path_;
  StoreOptions options_;
  int log_fd_ = -1;

  std::mutex write_mutex_;  // single writer: log append + state swap
  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const Snapshot> snapshot_;
};

struct ServerOptions {
  std::filesystem::path ui_dir;  // static assets served at "/"
  std::filesystem::path export_path;
};

/// HTTP JSON API over a store.
class ReviewServer {
 public:
  ReviewServer(ReviewStore& store, ServerOptions options);
  ~ReviewServer();

  /// Binds to `port` (0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace groundseg::review
