#pragma once

// Review service: persisted review cases, a bounded promptbook of approved
// exemplars, an append-only decision audit log, and the HTTP API used by the
// review UI. State lives as plain files in one directory:
//
//   config.json  rules.txt  templates.txt  kg.tsv  test.features
//   checkpoint.bin  metrics.jsonl  rounds.jsonl  labeled.json
//   cases.json  promptbook.json  exemplars.jsonl  audit.jsonl  feedback.jsonl

#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <queue>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "nsmrg/generation.hpp"
#include "nsmrg/training.hpp"

namespace nsmrg {

inline constexpr const char* kStateEnv = "NSMRG_STATE";
inline constexpr const char* kDefaultStateDir = "nsmrg-state";

/// Explicit path, else $NSMRG_STATE, else ./nsmrg-state.
inline std::string resolve_state_dir(const std::string& explicit_path = "") {
    if (!explicit_path.empty()) return explicit_path;
    if (const char* env = std::getenv(kStateEnv); env && *env) return env;
    return kDefaultStateDir;
}

namespace state_files {
inline std::string path(const std::string& dir, const char* name) { return (std::filesystem::path(dir) / name).string(); }
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kRules = "rules.txt";
inline constexpr const char* kTemplates = "templates.txt";
inline constexpr const char* kKg = "kg.tsv";
inline constexpr const char* kFeatures = "test.features";
inline constexpr const char* kCheckpoint = "checkpoint.bin";
inline constexpr const char* kMetrics = "metrics.jsonl";
inline constexpr const char* kRounds = "rounds.jsonl";
inline constexpr const char* kLabeled = "labeled.json";
inline constexpr const char* kCases = "cases.json";
inline constexpr const char* kPromptbook = "promptbook.json";
inline constexpr const char* kExemplars = "exemplars.jsonl";
inline constexpr const char* kAudit = "audit.jsonl";
inline constexpr const char* kFeedback = "feedback.jsonl";
}  // namespace state_files

/// Write to a sibling temp file, then rename over the target.
inline void write_file_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StateError("cannot write " + tmp);
        out << text;
        if (!out) throw StateError("short write on " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw StateError("cannot move " + tmp + " into place");
}

inline std::string read_file_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StateError("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void append_line(const std::string& path, const std::string& line) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw StateError("cannot append to " + path);
    out << line << '\n';
}

/// Checks the {"format", "version"} header of a versioned JSON document.
inline void check_format(const json& j, const char* format, int version, const std::string& where) {
    if (!j.is_object() || j.value("format", "") != format) throw StateError(where + ": not a " + format + " file");
    if (j.value("version", 0) != version)
        throw VersionError(where + ": " + format + " version " + std::to_string(j.value("version", 0)) +
                           " unsupported (expected " + std::to_string(version) + ")");
}

// ---------------------------------------------------------------------------
// Feature files.
//
//   nsmrg-features 1
//   sample <id> <rows> <cols>
//   <cols numbers>            (rows lines)
// ---------------------------------------------------------------------------

struct FeatureSample {
    std::size_t id = 0;
    Tensor x;
};

inline constexpr int kFeaturesVersion = 1;

inline std::string format_features(const std::vector<FeatureSample>& samples) {
    std::string out = "nsmrg-features " + std::to_string(kFeaturesVersion) + "\n";
    char buf[40];
    for (const auto& s : samples) {
        out += "sample " + std::to_string(s.id) + " " + std::to_string(s.x.rows) + " " + std::to_string(s.x.cols) + "\n";
        for (std::size_t i = 0; i < s.x.rows; ++i) {
            for (std::size_t j = 0; j < s.x.cols; ++j) {
                std::snprintf(buf, sizeof buf, "%.17g", s.x(i, j));
                if (j) out += ' ';
                out += buf;
            }
            out += '\n';
        }
    }
    return out;
}

inline std::vector<FeatureSample> parse_features(std::string_view text) {
    std::vector<FeatureSample> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t n = 0;
    auto next = [&]() -> bool {
        while (std::getline(in, line)) {
            ++n;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!detail::trim(line).empty()) return true;
        }
        return false;
    };
    if (!next()) throw ParseError(1, 1, "feature file is empty");
    {
        std::istringstream h(line);
        std::string magic;
        int version = 0;
        h >> magic >> version;
        if (magic != "nsmrg-features") throw ParseError(n, 1, "expected header 'nsmrg-features <version>'");
        if (version != kFeaturesVersion)
            throw VersionError("feature file version " + std::to_string(version) + " unsupported");
    }
    while (next()) {
        std::istringstream h(line);
        std::string tag;
        long long id = -1, rows = -1, cols = -1;
        h >> tag >> id >> rows >> cols;
        if (tag != "sample" || h.fail() || id < 0 || rows <= 0 || cols <= 0)
            throw ParseError(n, 1, "expected 'sample <id> <rows> <cols>'");
        FeatureSample s;
        s.id = static_cast<std::size_t>(id);
        s.x = Tensor(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
        for (std::size_t i = 0; i < s.x.rows; ++i) {
            if (!next()) throw ParseError(n + 1, 1, "feature file truncated inside sample " + std::to_string(s.id));
            const char* p = line.c_str();
            for (std::size_t j = 0; j < s.x.cols; ++j) {
                while (*p == ' ' || *p == '\t') ++p;
                char* end = nullptr;
                const double v = std::strtod(p, &end);
                if (end == p || !std::isfinite(v))
                    throw ParseError(n, static_cast<std::size_t>(p - line.c_str()) + 1,
                                     "expected " + std::to_string(s.x.cols) + " finite numbers");
                s.x(i, j) = v;
                p = end;
            }
            while (*p == ' ' || *p == '\t') ++p;
            if (*p) throw ParseError(n, static_cast<std::size_t>(p - line.c_str()) + 1, "extra values on row");
        }
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<FeatureSample> load_features(const std::string& path) { return parse_features(read_file_text(path)); }

// ---------------------------------------------------------------------------
// Review cases.
// ---------------------------------------------------------------------------

enum class CaseStatus { Pending, Approved, Edited, Rejected };

inline const char* to_string(CaseStatus s) {
    switch (s) {
        case CaseStatus::Pending: return "pending";
        case CaseStatus::Approved: return "approved";
        case CaseStatus::Edited: return "edited";
        case CaseStatus::Rejected: return "rejected";
    }
    return "?";
}

inline CaseStatus parse_case_status(std::string_view s) {
    for (auto c : {CaseStatus::Pending, CaseStatus::Approved, CaseStatus::Edited, CaseStatus::Rejected})
        if (s == to_string(c)) return c;
    throw DomainError("unknown case status '" + std::string(s) + "'");
}

struct DecisionRecord {
    std::string action;  // approve | edit | reject
    std::string editor;
    std::uint64_t timestamp_ms = 0;
    std::vector<std::string> clauses;  // edited clause set
};

struct RuleStep {
    std::string rule_id;
    std::string name;
    std::string formula;
    double activation = 0.0;
    json nodes;  // [{kind, value, left, right, concept}]
};

struct ReviewCase {
    std::string id;
    std::size_t sample = 0;
    Draft draft;
    std::vector<std::string> concept_names;
    Vec concepts;
    std::vector<RuleStep> chain;
    Vec embedding;
    double entropy = 0.0;
    CaseStatus status = CaseStatus::Pending;
    std::optional<DecisionRecord> decision;

    bool flagged() const { return draft.review_required; }
};

namespace case_detail {

inline const char* node_kind(const RuleNode& n) {
    switch (n.kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Not: return "not";
        case OpKind::And: return "and";
        case OpKind::Or: return "or";
        case OpKind::Blend: return "blend";
    }
    return "?";
}

}  // namespace case_detail

/// Builds the reviewable record from one inference, including per-node rule values.
inline ReviewCase make_case(std::string id, std::size_t sample, const InferenceResult& r, const Model& m) {
    ReviewCase c;
    c.id = std::move(id);
    c.sample = sample;
    c.draft = r.draft;
    c.concept_names = m.rules.concepts;
    c.concepts = r.forward.concepts;
    c.embedding = r.forward.embedding;
    c.entropy = r.entropy;
    for (std::size_t j = 0; j < m.rule_count(); ++j) {
        const auto& e = m.rules.rules[j];
        RuleStep step{e.tree.id, e.tree.name, render_formula(e.tree, m.rules.concepts), r.forward.rules[j],
                      json::array()};
        for (std::size_t k = 0; k < e.tree.nodes.size(); ++k) {
            const auto& n = e.tree.nodes[k];
            json node = {{"kind", case_detail::node_kind(n)},
                         {"value", k < r.node_values[j].values.size() ? r.node_values[j].values[k] : 0.0}};
            if (n.kind == OpKind::Leaf) node["concept"] = m.rules.concepts.at(n.concept_index);
            if (n.left >= 0) node["left"] = n.left;
            if (n.right >= 0) node["right"] = n.right;
            if (n.kind == OpKind::Blend) node["alpha"] = sigmoid(e.tree.gates.data.at(n.gate));
            step.nodes.push_back(std::move(node));
        }
        c.chain.push_back(std::move(step));
    }
    return c;
}

inline json to_json(const DecisionRecord& d) {
    return {{"action", d.action}, {"editor", d.editor}, {"timestamp_ms", d.timestamp_ms}, {"clauses", d.clauses}};
}

inline DecisionRecord decision_from_json(const json& j) {
    return {j.at("action").get<std::string>(), j.at("editor").get<std::string>(),
            j.at("timestamp_ms").get<std::uint64_t>(), j.at("clauses").get<std::vector<std::string>>()};
}

inline json to_json(const ReviewCase& c) {
    json chain = json::array();
    for (const auto& s : c.chain)
        chain.push_back({{"rule_id", s.rule_id},
                         {"name", s.name},
                         {"formula", s.formula},
                         {"activation", s.activation},
                         {"nodes", s.nodes}});
    json concepts = json::array();
    for (std::size_t k = 0; k < c.concepts.size(); ++k)
        concepts.push_back({{"name", k < c.concept_names.size() ? c.concept_names[k] : std::to_string(k)},
                            {"probability", c.concepts[k]}});
    return {{"id", c.id},
            {"sample", c.sample},
            {"status", to_string(c.status)},
            {"entropy", c.entropy},
            {"flagged", c.flagged()},
            {"draft", to_json(c.draft)},
            {"concepts", concepts},
            {"chain", chain},
            {"embedding", c.embedding},
            {"decision", c.decision ? to_json(*c.decision) : json(nullptr)}};
}

inline ReviewCase case_from_json(const json& j) {
    ReviewCase c;
    c.id = j.at("id").get<std::string>();
    c.sample = j.at("sample").get<std::size_t>();
    c.status = parse_case_status(j.at("status").get<std::string>());
    c.entropy = j.at("entropy").get<double>();
    c.draft = draft_from_json(j.at("draft"));
    for (const auto& cj : j.at("concepts")) {
        c.concept_names.push_back(cj.at("name").get<std::string>());
        c.concepts.push_back(cj.at("probability").get<double>());
    }
    for (const auto& s : j.at("chain"))
        c.chain.push_back({s.at("rule_id").get<std::string>(), s.at("name").get<std::string>(),
                           s.at("formula").get<std::string>(), s.at("activation").get<double>(), s.at("nodes")});
    c.embedding = j.at("embedding").get<Vec>();
    if (!j.at("decision").is_null()) c.decision = decision_from_json(j.at("decision"));
    return c;
}

/// Flagged first, then entropy descending, then id.
inline bool queue_before(const ReviewCase& a, const ReviewCase& b) {
    if (a.flagged() != b.flagged()) return a.flagged();
    if (a.entropy != b.entropy) return a.entropy > b.entropy;
    return a.id < b.id;
}

// ---------------------------------------------------------------------------
// Promptbook.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kPromptbookCapacity = 50;
inline constexpr int kPromptbookVersion = 1;

struct PromptEntry {
    Vec embedding;
    std::string fragment;
    std::string provenance;  // case id
    std::uint64_t approved_at = 0;
    std::map<int, int> polarities;
    Vec soft_prompt;  // opaque, kept for format fidelity

    friend bool operator==(const PromptEntry&, const PromptEntry&) = default;
};

inline json to_json(const PromptEntry& e) {
    json pol = json::object();
    for (const auto& [k, p] : e.polarities) pol[std::to_string(k)] = p;
    return {{"embedding", e.embedding},     {"fragment", e.fragment},   {"provenance", e.provenance},
            {"approved_at", e.approved_at}, {"polarities", pol},        {"soft_prompt", e.soft_prompt}};
}

inline PromptEntry prompt_entry_from_json(const json& j) {
    PromptEntry e;
    e.embedding = j.at("embedding").get<Vec>();
    e.fragment = j.at("fragment").get<std::string>();
    e.provenance = j.at("provenance").get<std::string>();
    e.approved_at = j.at("approved_at").get<std::uint64_t>();
    for (const auto& [k, p] : j.at("polarities").items()) e.polarities[std::stoi(k)] = p.get<int>();
    e.soft_prompt = j.at("soft_prompt").get<Vec>();
    return e;
}

/// Bounded FIFO of approved exemplars; the oldest entry leaves first.
class Promptbook {
public:
    explicit Promptbook(std::size_t capacity = kPromptbookCapacity) : capacity_(capacity) {
        if (capacity == 0) throw ConfigError("promptbook capacity must be positive");
    }

    /// Returns the evicted entry, if any.
    std::optional<PromptEntry> add(PromptEntry e) {
        std::optional<PromptEntry> evicted;
        if (entries_.size() == capacity_) {
            evicted = std::move(entries_.front());
            entries_.pop_front();
        }
        entries_.push_back(std::move(e));
        return evicted;
    }

    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    const std::deque<PromptEntry>& entries() const { return entries_; }

    friend bool operator==(const Promptbook&, const Promptbook&) = default;

private:
    std::size_t capacity_;
    std::deque<PromptEntry> entries_;
};

inline json to_json(const Promptbook& p) {
    json entries = json::array();
    for (const auto& e : p.entries()) entries.push_back(to_json(e));
    return {{"format", "nsmrg-promptbook"}, {"version", kPromptbookVersion}, {"capacity", p.capacity()},
            {"entries", entries}};
}

inline Promptbook promptbook_from_json(const json& j) {
    check_format(j, "nsmrg-promptbook", kPromptbookVersion, "promptbook");
    Promptbook p(j.at("capacity").get<std::size_t>());
    for (const auto& e : j.at("entries")) p.add(prompt_entry_from_json(e));
    return p;
}

// ---------------------------------------------------------------------------
// Audit log. One record per decision; approvals and edits carry the exact
// promptbook entry they produced, so replay rebuilds the promptbook.
// ---------------------------------------------------------------------------

inline constexpr int kAuditVersion = 1;

struct AuditEntry {
    std::size_t seq = 0;
    std::string case_id;
    DecisionRecord decision;
    std::optional<PromptEntry> entry;

    friend bool operator==(const AuditEntry& a, const AuditEntry& b) {
        return a.seq == b.seq && a.case_id == b.case_id && to_json(a.decision) == to_json(b.decision) &&
               a.entry == b.entry;
    }
};

inline json to_json(const AuditEntry& a) {
    return {{"version", kAuditVersion},
            {"seq", a.seq},
            {"case", a.case_id},
            {"decision", to_json(a.decision)},
            {"entry", a.entry ? to_json(*a.entry) : json(nullptr)}};
}

inline AuditEntry audit_from_json(const json& j) {
    if (j.value("version", 0) != kAuditVersion)
        throw VersionError("audit record version " + std::to_string(j.value("version", 0)) + " unsupported");
    AuditEntry a;
    a.seq = j.at("seq").get<std::size_t>();
    a.case_id = j.at("case").get<std::string>();
    a.decision = decision_from_json(j.at("decision"));
    if (!j.at("entry").is_null()) a.entry = prompt_entry_from_json(j.at("entry"));
    return a;
}

inline std::vector<AuditEntry> load_audit(const std::string& path) {
    std::vector<AuditEntry> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(audit_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError(n, 1, std::string("audit log: ") + e.what());
        }
    }
    return out;
}

inline Promptbook replay_promptbook(const std::vector<AuditEntry>& log, std::size_t capacity = kPromptbookCapacity) {
    Promptbook p(capacity);
    for (const auto& a : log)
        if (a.entry) p.add(*a.entry);
    return p;
}

// ---------------------------------------------------------------------------
// Single-writer command queue.
// ---------------------------------------------------------------------------

class CommandQueue {
public:
    CommandQueue() : worker_([this] { run(); }) {}
    ~CommandQueue() {
        {
            std::lock_guard lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        worker_.join();
    }

    CommandQueue(const CommandQueue&) = delete;
    CommandQueue& operator=(const CommandQueue&) = delete;

    template <class F>
    auto submit(F f) -> std::future<decltype(f())> {
        using R = decltype(f());
        auto task = std::make_shared<std::packaged_task<R()>>(std::move(f));
        auto fut = task->get_future();
        {
            std::lock_guard lock(mu_);
            jobs_.push([task] { (*task)(); });
        }
        cv_.notify_one();
        return fut;
    }

private:
    void run() {
        for (;;) {
            std::function<void()> job;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [this] { return stop_ || !jobs_.empty(); });
                if (jobs_.empty()) return;
                job = std::move(jobs_.front());
                jobs_.pop();
            }
            job();
        }
    }

    std::mutex mu_;
    std::condition_variable cv_;
    std::queue<std::function<void()>> jobs_;
    bool stop_ = false;
    std::thread worker_;
};

// ---------------------------------------------------------------------------
// Service core (transport independent).
// ---------------------------------------------------------------------------

struct DecisionRequest {
    std::string action;
    std::string editor;
    std::vector<std::string> clauses;
};

/// Field name -> message. Empty when the body is valid.
inline std::map<std::string, std::string> validate_decision(const json& body, DecisionRequest* out = nullptr) {
    std::map<std::string, std::string> errors;
    if (!body.is_object()) {
        errors["body"] = "expected a JSON object";
        return errors;
    }
    DecisionRequest r;
    if (!body.contains("action") || !body["action"].is_string())
        errors["action"] = "required, one of approve, edit, reject";
    else {
        r.action = body["action"].get<std::string>();
        if (r.action != "approve" && r.action != "edit" && r.action != "reject")
            errors["action"] = "must be one of approve, edit, reject";
    }
    if (!body.contains("editor") || !body["editor"].is_string() || body["editor"].get<std::string>().empty())
        errors["editor"] = "required non-empty string";
    else
        r.editor = body["editor"].get<std::string>();
    if (body.contains("clauses")) {
        const auto& c = body["clauses"];
        bool ok = c.is_array();
        if (ok)
            for (const auto& s : c) ok = ok && s.is_string() && !detail::trim(s.get<std::string>()).empty();
        if (!ok)
            errors["clauses"] = "must be an array of non-empty strings";
        else
            r.clauses = c.get<std::vector<std::string>>();
    }
    if (r.action == "edit" && !errors.count("clauses") && r.clauses.empty())
        errors["clauses"] = "an edit needs at least one clause";
    for (const auto& [k, v] : body.items())
        if (k != "action" && k != "editor" && k != "clauses") errors[k] = "unknown field";
    if (errors.empty() && out) *out = std::move(r);
    return errors;
}

struct ServiceOptions {
    std::size_t promptbook_capacity = kPromptbookCapacity;
    std::function<std::uint64_t()> clock;  // wall-clock ms; defaults to system time
};

class ReviewService {
public:
    explicit ReviewService(std::string state_dir, ServiceOptions opts = {})
        : dir_(std::move(state_dir)), opts_(std::move(opts)), promptbook_(opts_.promptbook_capacity) {
        if (!opts_.clock)
            opts_.clock = [] {
                return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                                      std::chrono::system_clock::now().time_since_epoch())
                                                      .count());
            };
        std::filesystem::create_directories(dir_);
        load();
    }

    const std::string& state_dir() const { return dir_; }

    // Reads: shared lock, consistent snapshot.

    std::vector<ReviewCase> queue() const {
        std::shared_lock lock(mu_);
        std::vector<ReviewCase> out;
        for (const auto& [id, c] : cases_)
            if (c.status == CaseStatus::Pending) out.push_back(c);
        std::sort(out.begin(), out.end(), queue_before);
        return out;
    }

    std::optional<ReviewCase> find(const std::string& id) const {
        std::shared_lock lock(mu_);
        const auto it = cases_.find(id);
        if (it == cases_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t case_count() const {
        std::shared_lock lock(mu_);
        return cases_.size();
    }

    Promptbook promptbook() const {
        std::shared_lock lock(mu_);
        return promptbook_;
    }

    ExemplarStore exemplars() const {
        std::shared_lock lock(mu_);
        return store_;
    }

    std::vector<AuditEntry> audit() const {
        std::shared_lock lock(mu_);
        return audit_;
    }

    /// Last record of metrics.jsonl, if any.
    std::optional<MetricsRecord> metrics() const {
        const auto p = state_files::path(dir_, state_files::kMetrics);
        if (!std::filesystem::exists(p)) return std::nullopt;
        const auto all = load_metrics(p);
        if (all.empty()) return std::nullopt;
        return all.back();
    }

    // Writes: funneled through the command queue.

    void add_case(ReviewCase c) {
        writer_.submit([&] {
            std::unique_lock lock(mu_);
            if (cases_.count(c.id)) throw StateError("case " + c.id + " already exists");
            if (c.status != CaseStatus::Pending || c.decision) throw StateError("new cases must be pending");
            cases_[c.id] = std::move(c);
            save_cases();
        }).get();
    }

    /// Unknown case: LookupError. Already decided: StateError. Bad request: ArgumentError.
    ReviewCase decide(const std::string& id, const DecisionRequest& req) {
        return writer_.submit([&] {
            std::unique_lock lock(mu_);
            return apply(id, req);
        }).get();
    }

private:
    ReviewCase apply(const std::string& id, const DecisionRequest& req) {
        const auto it = cases_.find(id);
        if (it == cases_.end()) throw LookupError("unknown case " + id);
        ReviewCase& c = it->second;
        if (c.status != CaseStatus::Pending) throw StateError("case " + id + " already " + to_string(c.status));
        if (req.action != "approve" && req.action != "edit" && req.action != "reject")
            throw ArgumentError("unknown action " + req.action);
        if (req.action == "edit" && req.clauses.empty()) throw ArgumentError("an edit needs at least one clause");

        DecisionRecord d{req.action, req.editor, opts_.clock(), req.clauses};
        AuditEntry a{audit_.size() + 1, id, d, std::nullopt};
        if (req.action != "reject") {
            PromptEntry e;
            e.embedding = c.embedding;
            e.provenance = id;
            e.approved_at = d.timestamp_ms;
            if (req.action == "approve") {
                e.fragment = c.draft.text();
                for (const auto& cl : c.draft.clauses)
                    for (const auto& [k, p] : cl.claims) e.polarities[k] = p;
            } else {
                // Claims survive only for draft clauses kept verbatim.
                for (const auto& t : req.clauses) e.fragment += (e.fragment.empty() ? "" : " ") + t;
                for (const auto& cl : c.draft.clauses)
                    if (std::find(req.clauses.begin(), req.clauses.end(), cl.text) != req.clauses.end())
                        for (const auto& [k, p] : cl.claims) e.polarities[k] = p;
            }
            a.entry = e;
        }

        // Persist the audit record first: it is the source of truth for replay.
        append_line(state_files::path(dir_, state_files::kAudit), to_json(a).dump());
        audit_.push_back(a);
        if (a.entry) {
            promptbook_.add(*a.entry);
            if (norm2(a.entry->embedding) > 0.0) {
                ExemplarRecord r{a.entry->embedding, a.entry->fragment, a.entry->polarities, id, true, 0};
                store_.add(r);
                ExemplarStore::append_to_file(state_files::path(dir_, state_files::kExemplars), r);
            }
            write_file_atomic(state_files::path(dir_, state_files::kPromptbook), to_json(promptbook_).dump(1) + "\n");
        }
        json correction = json::array();
        for (const auto& t : (req.action == "edit" ? req.clauses : std::vector<std::string>{})) correction.push_back(t);
        append_line(state_files::path(dir_, state_files::kFeedback),
                    json{{"version", 1}, {"case", id}, {"action", req.action}, {"draft", to_json(c.draft)},
                         {"correction", correction}}
                        .dump());
        c.status = req.action == "approve" ? CaseStatus::Approved
                   : req.action == "edit"  ? CaseStatus::Edited
                                           : CaseStatus::Rejected;
        c.decision = d;
        save_cases();
        return c;
    }

    void save_cases() const {
        json arr = json::array();
        for (const auto& [id, c] : cases_) arr.push_back(to_json(c));
        write_file_atomic(state_files::path(dir_, state_files::kCases),
                          json{{"format", "nsmrg-cases"}, {"version", 1}, {"cases", arr}}.dump() + "\n");
    }

    void load() {
        const auto cases_path = state_files::path(dir_, state_files::kCases);
        if (std::filesystem::exists(cases_path)) {
            json j;
            try {
                j = json::parse(read_file_text(cases_path));
            } catch (const json::parse_error& e) {
                throw StateError(cases_path + ": " + e.what());
            }
            check_format(j, "nsmrg-cases", 1, cases_path);
            for (const auto& cj : j.at("cases")) {
                auto c = case_from_json(cj);
                cases_[c.id] = std::move(c);
            }
        }
        audit_ = load_audit(state_files::path(dir_, state_files::kAudit));
        const auto pb_path = state_files::path(dir_, state_files::kPromptbook);
        const Promptbook replayed = replay_promptbook(audit_, opts_.promptbook_capacity);
        if (std::filesystem::exists(pb_path)) {
            promptbook_ = promptbook_from_json(json::parse(read_file_text(pb_path)));
            if (!(promptbook_ == replayed))
                throw ConsistencyError("promptbook.json disagrees with the audit log replay");
        } else {
            promptbook_ = replayed;
        }
        store_ = ExemplarStore::load(state_files::path(dir_, state_files::kExemplars));
    }

    std::string dir_;
    ServiceOptions opts_;
    mutable std::shared_mutex mu_;
    std::map<std::string, ReviewCase> cases_;
    Promptbook promptbook_;
    ExemplarStore store_;
    std::vector<AuditEntry> audit_;
    CommandQueue writer_;
};

// ---------------------------------------------------------------------------
// HTTP transport.
// ---------------------------------------------------------------------------

inline constexpr const char* kTokenHeader = "X-Review-Token";

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::string token;       // required in X-Review-Token when non-empty
    std::string static_dir;  // optional UI build served at /
};

inline json queue_item(const ReviewCase& c) {
    return {{"id", c.id},
            {"sample", c.sample},
            {"status", to_string(c.status)},
            {"entropy", c.entropy},
            {"flagged", c.flagged()},
            {"flags", c.draft.flags.size()},
            {"confidence", c.draft.confidence},
            {"text", c.draft.text()}};
}

class ReviewServer {
public:
    ReviewServer(ReviewService& svc, ServerOptions opts) : svc_(svc), opts_(std::move(opts)) {
        // httplib's default adds SO_REUSEPORT, which would let a second server share a busy port.
        http_.set_socket_options([](socket_t sock) {
            int yes = 1;
            setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof yes);
        });
        routes();
    }
    ~ReviewServer() { stop(); }

    ReviewServer(const ReviewServer&) = delete;
    ReviewServer& operator=(const ReviewServer&) = delete;

    /// Binds and serves on a background thread. Returns the bound port.
    int start() {
        int port = opts_.port;
        if (port == 0) {
            port = http_.bind_to_any_port(opts_.host);
            if (port < 0) throw StateError("cannot bind any port on " + opts_.host);
        } else if (!http_.bind_to_port(opts_.host, port)) {
            throw StateError("port " + std::to_string(port) + " on " + opts_.host + " is busy or unavailable");
        }
        port_ = port;
        thread_ = std::thread([this] { http_.listen_after_bind(); });
        return port_;
    }

    void stop() {
        http_.stop();
        if (thread_.joinable()) thread_.join();
    }

    /// Blocks until stop() is called from elsewhere.
    void wait() {
        if (thread_.joinable()) thread_.join();
    }

    int port() const { return port_; }

private:
    static void reply(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    void routes() {
        http_.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", "*");
            if (req.method == "OPTIONS") {
                res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
                res.set_header("Access-Control-Allow-Headers", std::string("Content-Type, ") + kTokenHeader);
                res.status = 204;
                return httplib::Server::HandlerResponse::Handled;
            }
            if (!opts_.token.empty() && req.path.rfind("/api/", 0) == 0 &&
                req.get_header_value(kTokenHeader) != opts_.token) {
                reply(res, 401, {{"error", "missing or wrong " + std::string(kTokenHeader) + " header"}});
                return httplib::Server::HandlerResponse::Handled;
            }
            return httplib::Server::HandlerResponse::Unhandled;
        });
        http_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
            res.set_content(json{{"error", res.status == 404 ? "not found" : httplib::status_message(res.status)}}.dump(),
                            "application/json");
            return httplib::Server::HandlerResponse::Handled;
        });
        http_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string what = "internal error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                what = e.what();
            } catch (...) {
            }
            reply(res, 500, {{"error", what}});
        });

        http_.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
            reply(res, 200,
                  {{"status", "ok"},
                   {"version", 1},
                   {"cases", svc_.case_count()},
                   {"pending", svc_.queue().size()},
                   {"promptbook", svc_.promptbook().size()}});
        });
        http_.Get("/api/queue", [this](const httplib::Request&, httplib::Response& res) {
            json arr = json::array();
            for (const auto& c : svc_.queue()) arr.push_back(queue_item(c));
            reply(res, 200, arr);
        });
        http_.Get(R"(/api/case/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            const auto c = svc_.find(req.matches[1]);
            if (!c) return reply(res, 404, {{"error", "unknown case " + std::string(req.matches[1])}});
            reply(res, 200, to_json(*c));
        });
        http_.Post(R"(/api/case/([^/]+)/decision)", [this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            json body;
            try {
                body = json::parse(req.body);
            } catch (const json::parse_error&) {
                return reply(res, 400, {{"errors", {{"body", "invalid JSON"}}}});
            }
            DecisionRequest dr;
            const auto errors = validate_decision(body, &dr);
            if (!errors.empty()) return reply(res, 400, {{"errors", errors}});
            try {
                reply(res, 200, to_json(svc_.decide(id, dr)));
            } catch (const LookupError& e) {
                reply(res, 404, {{"error", e.what()}});
            } catch (const StateError& e) {
                reply(res, 409, {{"error", e.what()}});
            } catch (const ArgumentError& e) {
                reply(res, 400, {{"errors", {{"body", e.what()}}}});
            }
        });
        http_.Get("/api/metrics", [this](const httplib::Request&, httplib::Response& res) {
            const auto m = svc_.metrics();
            reply(res, 200, m ? to_json(*m) : json::object());
        });
        if (!opts_.static_dir.empty() && !http_.set_mount_point("/", opts_.static_dir))
            throw StateError("static directory " + opts_.static_dir + " does not exist");
    }

    ReviewService& svc_;
    ServerOptions opts_;
    httplib::Server http_;
    std::thread thread_;
    int port_ = 0;
};

}  // namespace nsmrg
