#pragma once

// Annotation project store and its HTTP front end.
//
// The project lives in one append-only JSON-lines file. Every mutation is
// appended and fsync'ed before it is applied in memory, so an acknowledged
// request survives a crash; reopening replays the file. A torn final line
// (crash mid-write) is dropped and truncated away.
//
// Record types:
//   {"type":"project","version":1}
//   {"type":"comment","id","platform","text","language"}
//   {"type":"annotator","id"}
//   {"type":"label","comment_id","annotator_id","label","language","timestamp","revision"[,"previous"]}
//   {"type":"skip","comment_id","annotator_id","timestamp"}

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "httplib.h"
#include "json.hpp"

// resolv.h (via httplib) defines _res, an identifier Eigen uses
#ifdef _res
#undef _res
#endif

#include "hsd/corpus.hpp"
#include "hsd/csv.hpp"
#include "hsd/error.hpp"
#include "hsd/metrics.hpp"

namespace hsd::annotation {

using Clock = std::function<std::chrono::system_clock::time_point()>;

inline std::string iso8601(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

enum class TaskStatus { pending, labeled, skipped };

inline std::string to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::pending: return "pending";
    case TaskStatus::labeled: return "labeled";
    case TaskStatus::skipped: return "skipped";
  }
  return "?";
}

struct AnnotationTask {
  std::string comment_id;
  std::string raw_text;
  Platform platform = Platform::other;
  TaskStatus status = TaskStatus::pending;
  std::optional<std::string> assigned_to;
  std::size_t labeled_by_annotator = 0;
  std::size_t total = 0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"comment_id", comment_id},
                     {"raw_text", raw_text},
                     {"platform", std::string(hsd::to_string(platform))},
                     {"status", to_string(status)},
                     {"assigned_to", assigned_to ? nlohmann::json(*assigned_to) : nlohmann::json(nullptr)},
                     {"position", {{"labeled", labeled_by_annotator}, {"total", total}}}};
    return j;
  }
};

struct LabelRecord {
  std::string comment_id;
  std::string annotator_id;
  Label label = Label::not_hate;
  Language language = Language::english;
  std::string timestamp;
  int revision = 1;
  std::uint64_t first_seq = 0;  // order of the first submission for this pair
};

struct SubmitResult {
  std::size_t labeled_count = 0;  // comments with at least one label
  int revision = 1;
};

enum class ExportStrategy { unanimous, majority, first };

inline ExportStrategy parse_strategy(std::string_view s) {
  if (s == "unanimous") return ExportStrategy::unanimous;
  if (s == "majority") return ExportStrategy::majority;
  if (s == "first") return ExportStrategy::first;
  throw ValidationError("strategy", "unknown export strategy '" + std::string(s) +
                                        "' (expected unanimous, majority or first)");
}

struct ExportResult {
  Dataset dataset;
  std::size_t excluded = 0;
  std::vector<std::string> warnings;
};

// Resolves one comment's labels (in first-submission order) by strategy.
inline std::optional<Label> resolve(std::span<const Label> labels, ExportStrategy strategy) {
  if (labels.empty()) return std::nullopt;
  switch (strategy) {
    case ExportStrategy::first:
      return labels.front();
    case ExportStrategy::unanimous:
      for (Label l : labels)
        if (l != labels.front()) return std::nullopt;
      return labels.front();
    case ExportStrategy::majority: {
      std::size_t hate = 0;
      for (Label l : labels) hate += l == Label::hate;
      const std::size_t other = labels.size() - hate;
      if (hate > other) return Label::hate;
      if (other > hate) return Label::not_hate;
      return std::nullopt;
    }
  }
  return std::nullopt;
}

class Store {
 public:
  static constexpr std::chrono::seconds kDefaultLease{300};

  // Creates a new project file from a dataset; fails if the file exists.
  static void create(const std::filesystem::path& path, const Dataset& comments,
                     const std::vector<std::string>& annotators = {}) {
    if (std::filesystem::exists(path)) throw ConfigError("project file already exists: " + path.string());
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ostringstream os;
    os << nlohmann::json{{"type", "project"}, {"version", 1}}.dump() << '\n';
    for (const auto& c : comments)
      os << nlohmann::json{{"type", "comment"},
                           {"id", c.id},
                           {"platform", std::string(hsd::to_string(c.platform))},
                           {"text", c.raw_text},
                           {"language", std::string(hsd::to_string(c.language))}}
                .dump()
         << '\n';
    for (const auto& a : annotators) os << nlohmann::json{{"type", "annotator"}, {"id", a}}.dump() << '\n';
    const std::string tmp = path.string() + ".tmp";
    write_all_synced(tmp, os.str(), O_CREAT | O_TRUNC | O_WRONLY);
    std::filesystem::rename(tmp, path);
  }

  explicit Store(std::filesystem::path path, Clock clock = std::chrono::system_clock::now,
                 std::chrono::seconds lease = kDefaultLease)
      : path_(std::move(path)), clock_(std::move(clock)), lease_(lease) {
    replay();
    fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND);
    if (fd_ < 0) throw Error("cannot open project file for appending: " + path_.string());
  }

  ~Store() {
    if (fd_ >= 0) ::close(fd_);
  }
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  const std::filesystem::path& path() const { return path_; }

  // Lines dropped from the end of the file while replaying (0 or 1).
  std::size_t torn_lines() const { return torn_; }

  void register_annotator(const std::string& id) {
    if (id.empty()) throw ValidationError("annotator_id", "annotator id must be non-empty");
    std::unique_lock lock(mu_);
    if (annotator_set_.count(id)) return;
    append({{"type", "annotator"}, {"id", id}});
    add_annotator(id);
  }

  std::vector<std::string> annotators() const {
    std::shared_lock lock(mu_);
    return annotators_;
  }

  // First comment, in import order, that this annotator has neither labeled,
  // skipped, nor currently holds a lease on. The returned task is leased to
  // the annotator until it is labeled/skipped or the lease expires.
  std::optional<AnnotationTask> next_task(const std::string& annotator) {
    std::unique_lock lock(mu_);
    require_annotator(annotator);
    const auto now = clock_();
    auto& leases = leases_[annotator];
    for (auto it = leases.begin(); it != leases.end();)
      it = it->second <= now ? leases.erase(it) : std::next(it);
    for (std::size_t i = 0; i < comments_.size(); ++i) {
      const auto& id = comments_[i].id;
      if (labels_.count({id, annotator}) || skips_.count({id, annotator}) || leases.count(i)) continue;
      leases[i] = now + lease_;
      return task_for(i, annotator);
    }
    return std::nullopt;
  }

  SubmitResult submit_label(const std::string& comment_id, const std::string& annotator_id,
                            const std::string& label, const std::string& language) {
    const auto l = parse_label(label);
    if (!l) throw ValidationError("label", "invalid label '" + label + "' (expected hate or not_hate)");
    const auto lang = parse_language(language);
    if (!lang || *lang == Language::unknown)
      throw ValidationError("language", "invalid language '" + language + "' (expected english, hindi or hinglish)");
    std::unique_lock lock(mu_);
    require_comment(comment_id);
    require_annotator(annotator_id);
    nlohmann::json rec{{"type", "label"},
                       {"comment_id", comment_id},
                       {"annotator_id", annotator_id},
                       {"label", std::string(hsd::to_string(*l))},
                       {"language", std::string(hsd::to_string(*lang))},
                       {"timestamp", iso8601(clock_())}};
    const auto prev = labels_.find({comment_id, annotator_id});
    rec["revision"] = prev == labels_.end() ? 1 : prev->second.revision + 1;
    if (prev != labels_.end())
      rec["previous"] = {{"label", std::string(hsd::to_string(prev->second.label))},
                         {"language", std::string(hsd::to_string(prev->second.language))},
                         {"timestamp", prev->second.timestamp}};
    append(rec);
    const int revision = apply_label(rec);
    leases_[annotator_id].erase(index_.at(comment_id));
    return {labeled_comments_.size(), revision};
  }

  void skip(const std::string& comment_id, const std::string& annotator_id) {
    std::unique_lock lock(mu_);
    require_comment(comment_id);
    require_annotator(annotator_id);
    if (skips_.count({comment_id, annotator_id})) return;
    append({{"type", "skip"}, {"comment_id", comment_id}, {"annotator_id", annotator_id},
            {"timestamp", iso8601(clock_())}});
    skips_.insert({comment_id, annotator_id});
    leases_[annotator_id].erase(index_.at(comment_id));
  }

  std::vector<LabelRecord> labels() const {
    std::shared_lock lock(mu_);
    std::vector<LabelRecord> out;
    for (const auto& [key, rec] : labels_) out.push_back(rec);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first_seq < b.first_seq; });
    return out;
  }

  std::size_t label_count() const {
    std::shared_lock lock(mu_);
    return labels_.size();
  }

  // Kappa over the comments both annotators have labeled.
  metrics::AgreementReport agreement(const std::string& a, const std::string& b) const {
    std::shared_lock lock(mu_);
    require_annotator(a);
    require_annotator(b);
    std::vector<Label> la, lb;
    for (const auto& c : comments_) {
      const auto ia = labels_.find({c.id, a});
      const auto ib = labels_.find({c.id, b});
      if (ia == labels_.end() || ib == labels_.end()) continue;
      la.push_back(ia->second.label);
      lb.push_back(ib->second.label);
    }
    if (la.empty()) throw DataError("annotators '" + a + "' and '" + b + "' have zero overlap");
    return metrics::cohen_kappa(la, lb);
  }

  ExportResult export_labeled(ExportStrategy strategy) const {
    std::shared_lock lock(mu_);
    ExportResult out;
    std::vector<Comment> rows;
    for (const auto& c : comments_) {
      std::vector<const LabelRecord*> recs;
      for (const auto& a : annotators_)
        if (const auto it = labels_.find({c.id, a}); it != labels_.end()) recs.push_back(&it->second);
      if (recs.empty()) continue;
      std::sort(recs.begin(), recs.end(), [](auto* x, auto* y) { return x->first_seq < y->first_seq; });
      std::vector<Label> votes;
      for (auto* r : recs) votes.push_back(r->label);
      const auto resolved = resolve(votes, strategy);
      if (!resolved) {
        ++out.excluded;
        continue;
      }
      Comment e = c;
      e.gold_label = resolved;
      e.language = modal_language(recs);
      for (auto* r : recs) e.annotator_labels[r->annotator_id] = r->label;
      rows.push_back(std::move(e));
    }
    out.dataset = Dataset("annotations", std::move(rows));
    if (out.dataset.empty()) out.warnings.push_back("no comments resolved under this strategy");
    return out;
  }

  nlohmann::json stats() const {
    std::shared_lock lock(mu_);
    std::size_t counts[3] = {0, 0, 0};
    for (std::size_t i = 0; i < comments_.size(); ++i) ++counts[static_cast<int>(status_of(i))];
    nlohmann::json per = nlohmann::json::object();
    for (const auto& a : annotators_) per[a] = {{"labeled", 0}, {"skipped", 0}};
    for (const auto& [key, rec] : labels_) per[key.second]["labeled"] = per[key.second]["labeled"].get<int>() + 1;
    for (const auto& key : skips_) per[key.second]["skipped"] = per[key.second]["skipped"].get<int>() + 1;
    return {{"total", comments_.size()},
            {"by_status", {{"pending", counts[0]}, {"labeled", counts[1]}, {"skipped", counts[2]}}},
            {"labels", labels_.size()},
            {"annotators", per}};
  }

  std::size_t comment_count() const {
    std::shared_lock lock(mu_);
    return comments_.size();
  }

 private:
  using Key = std::pair<std::string, std::string>;  // (comment, annotator)

  static void write_all_synced(const std::string& path, const std::string& data, int flags) {
    const int fd = ::open(path.c_str(), flags, 0644);
    if (fd < 0) throw Error("cannot open " + path);
    const bool ok = write_fully(fd, data) && ::fsync(fd) == 0;
    ::close(fd);
    if (!ok) throw Error("write failed: " + path);
  }

  static bool write_fully(int fd, const std::string& data) {
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      off += static_cast<std::size_t>(n);
    }
    return true;
  }

  void append(const nlohmann::json& rec) {
    const std::string line = rec.dump() + "\n";
    if (!write_fully(fd_, line) || ::fsync(fd_) != 0) throw Error("cannot persist to " + path_.string());
  }

  void replay() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw DataError("cannot open project file: " + path_.string());
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0, line_no = 0, good_end = 0;
    while (pos < content.size()) {
      const std::size_t nl = content.find('\n', pos);
      ++line_no;
      const bool complete = nl != std::string::npos;
      const std::string line = content.substr(pos, complete ? nl - pos : std::string::npos);
      const std::size_t next = complete ? nl + 1 : content.size();
      nlohmann::json rec;
      bool parsed = true;
      try {
        rec = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        parsed = false;
      }
      if (!complete || !parsed) {
        if (next >= content.size()) {
          ++torn_;
          break;
        }
        throw DataError(path_.string() + ":" + std::to_string(line_no) + ": corrupt project record");
      }
      try {
        apply(rec);
      } catch (const nlohmann::json::exception& e) {
        throw DataError(path_.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
      good_end = next;
      pos = next;
    }
    if (!saw_header_) throw DataError(path_.string() + " is not an annotation project file");
    if (torn_) std::filesystem::resize_file(path_, good_end);
  }

  void apply(const nlohmann::json& rec) {
    const std::string type = rec.at("type").get<std::string>();
    if (type == "project") {
      saw_header_ = true;
    } else if (type == "comment") {
      Comment c;
      c.id = rec.at("id").get<std::string>();
      c.platform = parse_platform(rec.value("platform", "other"));
      c.raw_text = rec.at("text").get<std::string>();
      c.language = parse_language(rec.value("language", "unknown")).value_or(Language::unknown);
      index_.emplace(c.id, comments_.size());
      comments_.push_back(std::move(c));
    } else if (type == "annotator") {
      add_annotator(rec.at("id").get<std::string>());
    } else if (type == "label") {
      apply_label(rec);
    } else if (type == "skip") {
      skips_.insert({rec.at("comment_id").get<std::string>(), rec.at("annotator_id").get<std::string>()});
    }
  }

  int apply_label(const nlohmann::json& rec) {
    LabelRecord r;
    r.comment_id = rec.at("comment_id").get<std::string>();
    r.annotator_id = rec.at("annotator_id").get<std::string>();
    r.label = parse_label(rec.at("label").get<std::string>()).value();
    r.language = parse_language(rec.at("language").get<std::string>()).value();
    r.timestamp = rec.value("timestamp", "");
    Key key{r.comment_id, r.annotator_id};
    auto it = labels_.find(key);
    if (it == labels_.end()) {
      r.revision = 1;
      r.first_seq = seq_++;
      labels_.emplace(key, r);
    } else {
      r.revision = it->second.revision + 1;
      r.first_seq = it->second.first_seq;
      it->second = r;
    }
    labeled_comments_.insert(r.comment_id);
    return r.revision;
  }

  void add_annotator(const std::string& id) {
    if (annotator_set_.insert(id).second) annotators_.push_back(id);
  }

  void require_annotator(const std::string& id) const {
    if (!annotator_set_.count(id)) throw NotFoundError("unknown annotator '" + id + "' (register it first)");
  }

  void require_comment(const std::string& id) const {
    if (!index_.count(id)) throw NotFoundError("unknown comment_id '" + id + "'");
  }

  TaskStatus status_of(std::size_t i) const {
    const auto& id = comments_[i].id;
    if (labeled_comments_.count(id)) return TaskStatus::labeled;
    for (const auto& a : annotators_)
      if (skips_.count({id, a})) return TaskStatus::skipped;
    return TaskStatus::pending;
  }

  AnnotationTask task_for(std::size_t i, const std::string& annotator) const {
    const auto& c = comments_[i];
    AnnotationTask t;
    t.comment_id = c.id;
    t.raw_text = c.raw_text;
    t.platform = c.platform;
    t.status = status_of(i);
    t.assigned_to = annotator;
    t.total = comments_.size();
    for (const auto& cc : comments_) t.labeled_by_annotator += labels_.count({cc.id, annotator});
    return t;
  }

  static Language modal_language(const std::vector<const LabelRecord*>& recs) {
    std::map<Language, std::size_t> counts;
    for (auto* r : recs) ++counts[r->language];
    Language best = recs.front()->language;
    std::size_t best_n = 0;
    for (auto* r : recs)  // ties go to the earliest submission
      if (counts[r->language] > best_n) {
        best = r->language;
        best_n = counts[r->language];
      }
    return best;
  }

  std::filesystem::path path_;
  Clock clock_;
  std::chrono::seconds lease_;
  int fd_ = -1;
  mutable std::shared_mutex mu_;

  bool saw_header_ = false;
  std::size_t torn_ = 0;
  std::vector<Comment> comments_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> annotators_;
  std::set<std::string> annotator_set_;
  std::map<Key, LabelRecord> labels_;
  std::set<std::string> labeled_comments_;
  std::set<Key> skips_;
  std::uint64_t seq_ = 0;
  std::map<std::string, std::map<std::size_t, std::chrono::system_clock::time_point>> leases_;
};

// ---------------------------------------------------------------------------
// HTTP

inline std::string export_csv(const Dataset& d) {
  std::ostringstream os;
  write_csv(d, os);
  return os.str();
}

class Server {
 public:
  Server(Store& store, std::filesystem::path static_dir = {}) : store_(store) {
    // SO_REUSEADDR only: httplib's default SO_REUSEPORT would let a second
    // server share an occupied port silently
    http_.set_socket_options([](socket_t sock) {
      int yes = 1;
      ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    routes();
    if (!static_dir.empty() && std::filesystem::is_directory(static_dir))
      http_.set_mount_point("/", static_dir.string());
    else
      http_.Get("/", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(kFallbackPage, "text/html; charset=utf-8");
      });
  }

  // Binds to host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? http_.bind_to_any_port(host) : (http_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error("cannot listen on " + host + ":" + std::to_string(port) + " (address in use?)");
    return bound;
  }

  // Blocks serving requests until stop().
  void run() { http_.listen_after_bind(); }
  void stop() { http_.stop(); }
  void wait_until_ready() const { http_.wait_until_ready(); }

 private:
  static constexpr const char* kFallbackPage =
      "<!doctype html><meta charset=utf-8><title>annotation</title>"
      "<p>Annotation API: /api/tasks/next, /api/labels, /api/skip, /api/annotators, "
      "/api/agreement, /api/export, /api/stats</p>";

  static void json_reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <typename F>
  static httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ValidationError& e) {
        json_reply(res, 400, {{"error", e.what()}, {"field", e.field()}});
      } catch (const NotFoundError& e) {
        json_reply(res, 404, {{"error", e.what()}});
      } catch (const nlohmann::json::exception& e) {
        json_reply(res, 400, {{"error", std::string("bad request body: ") + e.what()}});
      } catch (const DataError& e) {
        json_reply(res, 409, {{"error", e.what()}});
      } catch (const std::exception& e) {
        json_reply(res, 500, {{"error", e.what()}});
      }
    };
  }

  static std::string required(const httplib::Request& req, const std::string& name) {
    if (!req.has_param(name)) throw ValidationError(name, "missing query parameter '" + name + "'");
    return req.get_param_value(name);
  }

  static std::string field(const nlohmann::json& body, const std::string& name) {
    if (!body.contains(name) || !body[name].is_string())
      throw ValidationError(name, "missing or non-string field '" + name + "'");
    return body[name].get<std::string>();
  }

  void routes() {
    http_.Get("/api/tasks/next", guarded([this](const httplib::Request& req, httplib::Response& res) {
                const auto task = store_.next_task(required(req, "annotator"));
                if (task)
                  json_reply(res, 200, task->to_json());
                else
                  res.status = 204;
              }));
    http_.Post("/api/labels", guarded([this](const httplib::Request& req, httplib::Response& res) {
                 const auto body = nlohmann::json::parse(req.body);
                 const auto r = store_.submit_label(field(body, "comment_id"), field(body, "annotator_id"),
                                                    field(body, "label"), field(body, "language"));
                 json_reply(res, 200, {{"labeled_count", r.labeled_count}, {"revision", r.revision}});
               }));
    http_.Post("/api/skip", guarded([this](const httplib::Request& req, httplib::Response& res) {
                 const auto body = nlohmann::json::parse(req.body);
                 store_.skip(field(body, "comment_id"), field(body, "annotator_id"));
                 json_reply(res, 200, {{"ok", true}});
               }));
    http_.Post("/api/annotators", guarded([this](const httplib::Request& req, httplib::Response& res) {
                 const auto body = nlohmann::json::parse(req.body);
                 store_.register_annotator(field(body, "id"));
                 json_reply(res, 200, {{"annotators", store_.annotators()}});
               }));
    http_.Get("/api/annotators", guarded([this](const httplib::Request&, httplib::Response& res) {
                json_reply(res, 200, {{"annotators", store_.annotators()}});
              }));
    http_.Get("/api/agreement", guarded([this](const httplib::Request& req, httplib::Response& res) {
                json_reply(res, 200, metrics::to_json(store_.agreement(required(req, "a"), required(req, "b"))));
              }));
    http_.Get("/api/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
                const auto result = store_.export_labeled(parse_strategy(required(req, "strategy")));
                res.set_header("X-Excluded-Count", std::to_string(result.excluded));
                if (!result.warnings.empty()) res.set_header("X-Warning", result.warnings.front());
                res.set_content(export_csv(result.dataset), "text/csv; charset=utf-8");
              }));
    http_.Get("/api/stats", guarded([this](const httplib::Request&, httplib::Response& res) {
                json_reply(res, 200, store_.stats());
              }));
  }

  Store& store_;
  httplib::Server http_;
};

}  // namespace hsd::annotation
