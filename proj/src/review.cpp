#include "groundseg/review.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

#include <httplib.h>

#include "groundseg/hashing.hpp"
#include "groundseg/image.hpp"
#include "groundseg/overlay.hpp"

namespace groundseg::review {

namespace fs = std::filesystem;

std::string to_string(Decision d) { return d == Decision::accept ? "accept" : "reject"; }

std::string to_string(Status s) {
  switch (s) {
    case Status::pending: return "pending";
    case Status::assigned: return "assigned";
    case Status::decided: return "decided";
  }
  return "pending";
}

Decision decision_from_string(std::string_view s) {
  if (s == "accept") return Decision::accept;
  if (s == "reject") return Decision::reject;
  throw Error("decision must be \"accept\" or \"reject\", got \"" + std::string(s) + "\"");
}

std::int64_t system_now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string format_timestamp(std::int64_t ms) {
  const std::time_t secs = static_cast<std::time_t>(ms / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms % 1000));
  return buf;
}

// ---- candidates ---------------------------------------------------------------------

nlohmann::ordered_json candidate_to_json(const Candidate& c) {
  nlohmann::ordered_json j;
  j["candidate_id"] = c.candidate_id;
  j["sample"] = sample_to_json(c.sample);
  j["overlay_uri"] = c.overlay_uri.string();
  j["plain_uri"] = c.plain_uri.string();
  j["ai_suggestion"] = to_string(c.ai_suggestion);
  return j;
}

Candidate candidate_from_json(const nlohmann::json& j) {
  try {
    Candidate c;
    c.candidate_id = j.at("candidate_id").get<std::string>();
    c.sample = sample_from_json(j.at("sample"));
    c.overlay_uri = j.at("overlay_uri").get<std::string>();
    c.plain_uri = j.at("plain_uri").get<std::string>();
    c.ai_suggestion = decision_from_string(j.at("ai_suggestion").get<std::string>());
    if (c.candidate_id.empty()) throw Error("candidate_id must be non-empty");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("candidate: ") + e.what());
  }
}

std::vector<Candidate> load_candidates(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Candidate> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(candidate_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw ParseError(static_cast<std::size_t>(line_no), path.string() + ": " + e.what());
    }
  }
  return out;
}

void save_candidates(const std::vector<Candidate>& candidates, const fs::path& path) {
  std::string text;
  for (const auto& c : candidates) text += candidate_to_json(c).dump() + "\n";
  write_file_atomic(path, text);
}

std::vector<Candidate> candidates_from_manifest(const DatasetManifest& manifest, const fs::path& image_root,
                                                const fs::path& overlay_dir) {
  fs::create_directories(overlay_dir);
  std::vector<Candidate> out;
  std::map<std::string, RgbImage> images;
  for (const auto& s : manifest.samples) {
    if (s.is_negative) continue;
    auto it = images.find(s.image.image_id);
    if (it == images.end()) it = images.emplace(s.image.image_id, load_image(image_root / s.image.uri)).first;
    Candidate c;
    c.candidate_id = s.sample_id;
    c.sample = s;
    c.plain_uri = image_root / s.image.uri;
    c.overlay_uri = overlay_dir / ("overlay-" + sha256_hex(s.sample_id).substr(0, 16) + ".png");
    save_png(render_marks_overlay(it->second, {{1, rle_decode(s.mask)}}, OverlayOptions{0.45F}), c.overlay_uri);
    out.push_back(std::move(c));
  }
  return out;
}

// ---- verdicts and agreement ---------------------------------------------------------------------

nlohmann::ordered_json verdict_to_json(const VerdictRecord& v) {
  nlohmann::ordered_json j;
  j["candidate_id"] = v.candidate_id;
  j["decision"] = to_string(v.decision);
  j["annotator_id"] = v.annotator_id;
  j["decided_at"] = format_timestamp(v.decided_at_ms);
  j["decided_at_ms"] = v.decided_at_ms;
  j["ai_suggestion_at_decision"] = to_string(v.ai_suggestion_at_decision);
  if (v.reason) j["reason"] = *v.reason;
  return j;
}

namespace {

VerdictRecord verdict_from_json(const nlohmann::json& j) {
  VerdictRecord v;
  v.candidate_id = j.at("candidate_id").get<std::string>();
  v.decision = decision_from_string(j.at("decision").get<std::string>());
  v.annotator_id = j.at("annotator_id").get<std::string>();
  v.decided_at_ms = j.at("decided_at_ms").get<std::int64_t>();
  v.ai_suggestion_at_decision = decision_from_string(j.at("ai_suggestion_at_decision").get<std::string>());
  if (j.contains("reason")) v.reason = j.at("reason").get<std::string>();
  return v;
}

int slot(Decision d) { return d == Decision::accept ? 0 : 1; }

bool live(const CandidateState& st, std::int64_t now) {
  return st.status == Status::assigned && st.lease_expires_ms > now;
}

}  // namespace

AgreementStats agreement_of(const std::vector<VerdictRecord>& verdicts) {
  if (verdicts.empty()) throw Error("agreement needs at least one decided candidate");
  AgreementStats a;
  std::size_t agree = 0;
  for (const auto& v : verdicts) {
    ++a.confusion[slot(v.ai_suggestion_at_decision)][slot(v.decision)];
    if (v.decision == v.ai_suggestion_at_decision) ++agree;
  }
  a.n_decided = verdicts.size();
  a.agreement_rate = static_cast<double>(agree) / static_cast<double>(a.n_decided);
  return a;
}

nlohmann::ordered_json agreement_to_json(const AgreementStats& a) {
  nlohmann::ordered_json j;
  j["n_decided"] = a.n_decided;
  j["agreement_rate"] = a.agreement_rate;
  j["confusion"] = {{"ai_accept", {{"human_accept", a.confusion[0][0]}, {"human_reject", a.confusion[0][1]}}},
                    {"ai_reject", {{"human_accept", a.confusion[1][0]}, {"human_reject", a.confusion[1][1]}}}};
  return j;
}

// ---- store ----------------------------------------------------------------------------------------

ReviewStore::ReviewStore(std::vector<Candidate> candidates, fs::path log_path, StoreOptions options)
    : candidates_(std::move(candidates)), log_path_(std::move(log_path)), options_(std::move(options)) {
  if (options_.lease_ms <= 0) throw Error("lease must be positive");
  for (std::size_t i = 0; i < candidates_.size(); ++i) {
    if (!index_.emplace(candidates_[i].candidate_id, i).second) {
      throw Error("duplicate candidate_id " + candidates_[i].candidate_id);
    }
  }
  if (log_path_.has_parent_path()) fs::create_directories(log_path_.parent_path());
  replay();
  log_fd_ = ::open(log_path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (log_fd_ < 0) throw IoError("cannot open verdict log " + log_path_.string());
}

ReviewStore::~ReviewStore() {
  if (log_fd_ >= 0) ::close(log_fd_);
}

std::size_t ReviewStore::index_of(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw UnknownCandidate("unknown candidate " + id);
  return it->second;
}

const Candidate& ReviewStore::candidate(const std::string& id) const { return candidates_[index_of(id)]; }

void ReviewStore::apply(const nlohmann::json& event, Snapshot& s) {
  const auto type = event.at("event").get<std::string>();
  const std::size_t i = index_of(event.at("candidate_id").get<std::string>());
  auto& st = s.states[i];
  if (type == "assign") {
    if (st.status == Status::decided) throw Error("assignment of a decided candidate");
    st.status = Status::assigned;
    st.assigned_to = event.at("session").get<std::string>();
    st.lease_expires_ms = event.at("expires_ms").get<std::int64_t>();
  } else if (type == "verdict") {
    if (st.status == Status::decided) throw Error("second verdict for " + candidates_[i].candidate_id);
    auto v = verdict_from_json(event);
    st.status = Status::decided;
    st.verdict = v;
    s.verdicts.push_back(std::move(v));
  } else {
    throw Error("unknown event " + type);
  }
}

void ReviewStore::replay() {
  Snapshot s;
  s.states.resize(candidates_.size());
  std::ifstream in(log_path_, std::ios::binary);
  if (in) {
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    std::size_t pos = 0;
    int line_no = 0;
    while (pos < text.size()) {
      const std::size_t nl = text.find('\n', pos);
      ++line_no;
      if (nl == std::string::npos) {
        // A torn final write from a crash: the line was never acknowledged, drop it.
        fs::resize_file(log_path_, pos);
        break;
      }
      const std::string line = text.substr(pos, nl - pos);
      pos = nl + 1;
      if (line.empty()) continue;
      try {
        apply(nlohmann::json::parse(line), s);
      } catch (const std::exception& e) {
        throw ParseError(static_cast<std::size_t>(line_no), log_path_.string() + ": " + e.what());
      }
    }
  }
  snapshot_ = std::make_shared<const Snapshot>(std::move(s));
}

void ReviewStore::commit(const nlohmann::ordered_json& event, Snapshot next) {
  const std::string line = event.dump() + "\n";
  std::size_t written = 0;
  while (written < line.size()) {
    const auto n = ::write(log_fd_, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("append to verdict log failed");
    }
    written += static_cast<std::size_t>(n);
  }
  if (options_.fsync && ::fsync(log_fd_) != 0) throw IoError("fsync of verdict log failed");
  auto ptr = std::make_shared<const Snapshot>(std::move(next));
  std::lock_guard lock(snapshot_mutex_);
  snapshot_ = std::move(ptr);
}

std::shared_ptr<const ReviewStore::Snapshot> ReviewStore::snapshot() const {
  std::lock_guard lock(snapshot_mutex_);
  return snapshot_;
}

std::optional<Candidate> ReviewStore::next_candidate(const std::string& session) {
  if (session.empty()) throw Error("session must be non-empty");
  std::lock_guard lock(write_mutex_);
  Snapshot next = *snapshot();
  const auto now = options_.clock();
  std::optional<std::size_t> pick;
  for (std::size_t i = 0; i < next.states.size() && !pick; ++i) {
    if (live(next.states[i], now) && next.states[i].assigned_to == session) pick = i;
  }
  for (std::size_t i = 0; i < next.states.size() && !pick; ++i) {
    const auto& st = next.states[i];
    if (st.status == Status::pending || (st.status == Status::assigned && !live(st, now))) pick = i;
  }
  if (!pick) return std::nullopt;
  nlohmann::ordered_json event;
  event["event"] = "assign";
  event["candidate_id"] = candidates_[*pick].candidate_id;
  event["session"] = session;
  event["at_ms"] = now;
  event["expires_ms"] = now + options_.lease_ms;
  apply(nlohmann::json::parse(event.dump()), next);
  commit(event, std::move(next));
  return candidates_[*pick];
}

VerdictRecord ReviewStore::record_verdict(const std::string& candidate_id, Decision decision,
                                          const std::string& annotator_id, std::optional<std::string> reason) {
  if (annotator_id.empty()) throw Error("annotator_id must be non-empty");
  const std::size_t i = index_of(candidate_id);
  std::lock_guard lock(write_mutex_);
  Snapshot next = *snapshot();
  const auto& st = next.states[i];
  if (st.status == Status::decided) {
    if (st.verdict->annotator_id == annotator_id && st.verdict->decision == decision) return *st.verdict;
    throw ConflictError("candidate " + candidate_id + " was already decided (" + to_string(st.verdict->decision) +
                        " by " + st.verdict->annotator_id + ")");
  }
  if (st.status == Status::pending) throw ConflictError("candidate " + candidate_id + " is not assigned");
  if (st.assigned_to != annotator_id) {
    throw ConflictError("candidate " + candidate_id + " is assigned to another session");
  }
  VerdictRecord v;
  v.candidate_id = candidate_id;
  v.decision = decision;
  v.annotator_id = annotator_id;
  v.decided_at_ms = options_.clock();
  v.ai_suggestion_at_decision = candidates_[i].ai_suggestion;
  v.reason = std::move(reason);
  nlohmann::ordered_json event = verdict_to_json(v);
  event["event"] = "verdict";
  apply(nlohmann::json::parse(event.dump()), next);
  commit(event, std::move(next));
  return v;
}

DatasetManifest ReviewStore::export_accepted(const std::optional<fs::path>& out_path) const {
  const auto snap = snapshot();
  DatasetManifest m;
  m.metadata["generator"] = "review";
  for (std::size_t i = 0; i < candidates_.size(); ++i) {
    const auto& st = snap->states[i];
    if (st.status == Status::decided && st.verdict->decision == Decision::accept) m.samples.push_back(candidates_[i].sample);
  }
  if (out_path) {
    if (out_path->has_parent_path()) fs::create_directories(out_path->parent_path());
    save_manifest(m, *out_path);
  }
  return m;
}

AgreementStats ReviewStore::agreement_report() const { return agreement_of(snapshot()->verdicts); }

nlohmann::ordered_json ReviewStore::stats_json() const {
  const auto snap = snapshot();
  const auto now = options_.clock();
  std::size_t pending = 0;
  std::size_t assigned = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  for (const auto& st : snap->states) {
    if (st.status == Status::decided) {
      (st.verdict->decision == Decision::accept ? accepted : rejected) += 1;
    } else if (live(st, now)) {
      ++assigned;
    } else {
      ++pending;
    }
  }
  nlohmann::ordered_json j;
  j["n_candidates"] = candidates_.size();
  j["pending"] = pending;
  j["assigned"] = assigned;
  j["decided"] = accepted + rejected;
  j["accepted"] = accepted;
  j["rejected"] = rejected;
  j["agreement"] = snap->verdicts.empty() ? nlohmann::ordered_json(nullptr)
                                          : agreement_to_json(agreement_of(snap->verdicts));
  return j;
}

// ---- HTTP -------------------------------------------------------------------------------------------

struct ReviewServer::Impl {
  ReviewStore& store;
  ServerOptions options;
  httplib::Server server;

  Impl(ReviewStore& s, ServerOptions o) : store(s), options(std::move(o)) {}
};

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, nlohmann::ordered_json{{"error", message}});
}

std::string url_escape(const std::string& s) {
  std::string out;
  static const char* hex = "0123456789ABCDEF";
  for (const char ch : s) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u) || ch == '-' || ch == '_' || ch == '.' || ch == '~' || ch == ':') {
      out.push_back(ch);
    } else {
      out += '%';
      out += hex[u >> 4];
      out += hex[u & 15];
    }
  }
  return out;
}

nlohmann::ordered_json api_candidate(const Candidate& c, const ReviewStore& store) {
  nlohmann::ordered_json j;
  j["candidate_id"] = c.candidate_id;
  j["prompt"] = c.sample.prompt;
  j["concept_family"] = to_string(c.sample.concept_family);
  j["image_id"] = c.sample.image.image_id;
  j["width"] = c.sample.image.width;
  j["height"] = c.sample.image.height;
  j["ai_suggestion"] = to_string(c.ai_suggestion);
  j["overlay_url"] = "/api/images/" + url_escape(c.candidate_id) + "?variant=overlay";
  j["plain_url"] = "/api/images/" + url_escape(c.candidate_id) + "?variant=plain";
  const auto snap = store.snapshot();
  const auto& st = snap->states[static_cast<std::size_t>(&c - store.candidates().data())];
  j["status"] = to_string(st.status);
  j["lease_expires_at"] = format_timestamp(st.lease_expires_ms);
  j["sample"] = sample_to_json(c.sample);
  return j;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename F>
void guarded(httplib::Response& res, F&& fn) {
  try {
    fn();
  } catch (const UnknownCandidate& e) {
    send_error(res, 404, e.what());
  } catch (const ConflictError& e) {
    send_error(res, 409, e.what());
  } catch (const IoError& e) {
    send_error(res, 500, e.what());
  } catch (const Error& e) {
    send_error(res, 400, e.what());
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 400, e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

}  // namespace

ReviewServer::ReviewServer(ReviewStore& store, ServerOptions options)
    : impl_(std::make_unique<Impl>(store, std::move(options))) {
  auto& srv = impl_->server;
  Impl* impl = impl_.get();

  srv.Get("/api/candidates/next", [impl](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto session = req.get_param_value("session");
      if (session.empty()) throw Error("query parameter session is required");
      const auto c = impl->store.next_candidate(session);
      send_json(res, 200, {{"candidate", c ? api_candidate(impl->store.candidate(c->candidate_id), impl->store)
                                           : nlohmann::ordered_json(nullptr)}});
    });
  });

  srv.Post("/api/verdicts", [impl](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = nlohmann::json::parse(req.body);
      if (!body.is_object()) throw Error("body must be a JSON object");
      for (const auto& [k, v] : body.items()) {
        if (k != "candidate_id" && k != "decision" && k != "annotator_id" && k != "reason") {
          throw Error("unknown field " + k);
        }
      }
      std::optional<std::string> reason;
      if (body.contains("reason") && !body.at("reason").is_null()) reason = body.at("reason").get<std::string>();
      const auto v = impl->store.record_verdict(body.at("candidate_id").get<std::string>(),
                                                decision_from_string(body.at("decision").get<std::string>()),
                                                body.at("annotator_id").get<std::string>(), reason);
      send_json(res, 200, verdict_to_json(v));
    });
  });

  srv.Get(R"(/api/images/([^/]+))", [impl](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto& c = impl->store.candidate(req.matches[1].str());
      const auto variant = req.has_param("variant") ? req.get_param_value("variant") : std::string("overlay");
      if (variant != "overlay" && variant != "plain") throw Error("variant must be overlay or plain");
      const fs::path p = variant == "overlay" ? c.overlay_uri : c.plain_uri;
      if (!fs::exists(p)) throw UnknownCandidate("image file missing for " + c.candidate_id);
      std::string body = p.extension() == ".png" ? read_bytes(p) : encode_png(load_image(p));
      res.status = 200;
      res.set_content(std::move(body), "image/png");
    });
  });

  srv.Get("/api/stats", [impl](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, impl->store.stats_json()); });
  });

  srv.Get("/api/export", [impl](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      std::optional<fs::path> path;
      if (!impl->options.export_path.empty()) path = impl->options.export_path;
      const auto m = impl->store.export_accepted(path);
      nlohmann::ordered_json ids = nlohmann::ordered_json::array();
      for (const auto& s : m.samples) ids.push_back(s.sample_id);
      send_json(res, 200, {{"count", m.samples.size()},
                           {"path", path ? nlohmann::ordered_json(path->string()) : nlohmann::ordered_json(nullptr)},
                           {"sample_ids", ids}});
    });
  });

  if (!impl_->options.ui_dir.empty()) {
    if (!srv.set_mount_point("/", impl_->options.ui_dir.string())) {
      throw IoError("ui directory not found: " + impl_->options.ui_dir.string());
    }
  }
}

ReviewServer::~ReviewServer() { stop(); }

int ReviewServer::bind(const std::string& host, int port) {
  auto& srv = impl_->server;
  if (port == 0) {
    const int p = srv.bind_to_any_port(host);
    if (p < 0) throw IoError("cannot bind " + host);
    return p;
  }
  if (!srv.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void ReviewServer::listen() { impl_->server.listen_after_bind(); }

void ReviewServer::stop() { impl_->server.stop(); }

}  // namespace groundseg::review
