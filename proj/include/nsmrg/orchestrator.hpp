#pragma once

// In-process agent layer: signed request/response messages over a bus with
// per-agent serial mailboxes, a file-backed knowledge graph with a TTL cache,
// and a coordinator that resolves slot values by weighted vote.

#include <atomic>
#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nsmrg/core.hpp"
#include "nsmrg/generation.hpp"
#include "nsmrg/model.hpp"

namespace nsmrg {

// ---------------------------------------------------------------------------
// Messages.
// ---------------------------------------------------------------------------

struct AgentMessage {
    std::string sender;
    std::string recipient;
    std::uint64_t timestamp_ms = 0;
    std::string correlation_id;
    std::optional<json> evidence;
    std::optional<json> claims;
    std::optional<json> templates;
    std::optional<Vec> confidence;
    std::optional<std::string> action_req;
    std::uint64_t signature = 0;

    /// Canonical payload: every field except the signature.
    json payload() const {
        json j = {{"sender", sender}, {"recipient", recipient}, {"timestamp_ms", timestamp_ms},
                  {"correlation_id", correlation_id}};
        if (evidence) j["evidence"] = *evidence;
        if (claims) j["claims"] = *claims;
        if (templates) j["templates"] = *templates;
        if (confidence) j["confidence"] = *confidence;
        if (action_req) j["action_req"] = *action_req;
        return j;
    }
};

/// Keyed FNV-1a over key, sender and the canonical payload. Integrity only,
/// not an authentication scheme.
inline std::uint64_t message_digest(const AgentMessage& m, std::string_view key) {
    std::uint64_t h = fnv1a(key);
    h = fnv1a("\x1f", h);
    h = fnv1a(m.sender, h);
    h = fnv1a("\x1f", h);
    return fnv1a(m.payload().dump(), h);
}

inline void sign(AgentMessage& m, std::string_view key) { m.signature = message_digest(m, key); }
inline bool verify_signature(const AgentMessage& m, std::string_view key) {
    return m.signature == message_digest(m, key);
}

inline json to_json(const AgentMessage& m) {
    json j = m.payload();
    j["signature"] = m.signature;
    return j;
}

// ---------------------------------------------------------------------------
// Bus.
// ---------------------------------------------------------------------------

struct AuditRecord {
    std::uint64_t timestamp_ms = 0;
    std::string event;  // request | response | error
    std::string correlation_id;
    std::string sender;
    std::string recipient;
    std::string detail;
};

inline json to_json(const AuditRecord& r) {
    return {{"ts", r.timestamp_ms}, {"event", r.event},         {"correlation_id", r.correlation_id},
            {"sender", r.sender},   {"recipient", r.recipient}, {"detail", r.detail}};
}

using MillisClock = std::function<std::uint64_t()>;

inline MillisClock steady_millis() {
    const auto start = std::chrono::steady_clock::now();
    return [start] {
        return static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count());
    };
}

/// Handlers fill the response fields; the bus sets routing, timing and the signature.
using AgentHandler = std::function<void(const AgentMessage& request, AgentMessage& response)>;

class MessageBus {
public:
    explicit MessageBus(std::string key, MillisClock clock = steady_millis())
        : key_(std::move(key)), clock_(std::move(clock)) {}

    MessageBus(const MessageBus&) = delete;
    MessageBus& operator=(const MessageBus&) = delete;

    /// Register every agent before the first dispatch; re-registering an id
    /// while requests are in flight is not supported.
    void register_agent(const std::string& id, AgentHandler handler) {
        std::unique_lock lock(registry_mu_);
        auto& slot = agents_[id];
        slot = std::make_unique<Agent>();
        slot->handler = std::move(handler);
    }

    bool has_agent(const std::string& id) const {
        std::shared_lock lock(registry_mu_);
        return agents_.count(id) > 0;
    }

    /// Appends every audit record to `path` as one JSON object per line.
    void set_audit_file(std::string path) {
        std::lock_guard lock(audit_mu_);
        audit_path_ = std::move(path);
    }

    /// Unsigned request with a unique correlation id; seal() it after filling.
    AgentMessage request(const std::string& sender, const std::string& recipient) {
        AgentMessage m;
        m.sender = sender;
        m.recipient = recipient;
        m.correlation_id = "corr-" + std::to_string(next_corr_.fetch_add(1) + 1);
        m.timestamp_ms = clock_();
        return m;
    }

    void seal(AgentMessage& m) const { sign(m, key_); }

    /// Routes a request to its recipient. Exactly one of: a signed response
    /// with the same correlation id, or a logged error followed by a throw.
    AgentMessage dispatch(const AgentMessage& req) {
        Agent* agent = nullptr;
        {
            std::shared_lock lock(registry_mu_);
            const auto it = agents_.find(req.recipient);
            if (it != agents_.end()) agent = it->second.get();
        }
        if (!agent) fail<RoutingError>(req, "unknown recipient '" + req.recipient + "'");
        if (!verify_signature(req, key_)) fail<SignatureError>(req, "signature mismatch, message rejected");
        if (req.confidence)
            for (double c : *req.confidence)
                if (!(c >= 0.0 && c <= 1.0)) fail<DomainError>(req, "confidence entry outside [0,1]");

        log({clock_(), "request", req.correlation_id, req.sender, req.recipient, req.action_req.value_or("")});
        AgentMessage resp;
        resp.sender = req.recipient;
        resp.recipient = req.sender;
        resp.correlation_id = req.correlation_id;
        try {
            std::lock_guard mailbox(agent->mu);
            agent->handler(req, resp);
        } catch (const std::exception& e) {
            log({clock_(), "error", req.correlation_id, req.sender, req.recipient, e.what()});
            throw;
        }
        resp.sender = req.recipient;
        resp.recipient = req.sender;
        resp.correlation_id = req.correlation_id;
        resp.timestamp_ms = clock_();
        sign(resp, key_);
        log({resp.timestamp_ms, "response", resp.correlation_id, resp.sender, resp.recipient, ""});
        return resp;
    }

    /// request + seal + dispatch in one call.
    AgentMessage send(const std::string& sender, const std::string& recipient,
                      const std::function<void(AgentMessage&)>& fill) {
        AgentMessage m = request(sender, recipient);
        if (fill) fill(m);
        seal(m);
        return dispatch(m);
    }

    std::vector<AuditRecord> audit() const {
        std::lock_guard lock(audit_mu_);
        return audit_;
    }

private:
    struct Agent {
        AgentHandler handler;
        std::mutex mu;
    };

    template <class E>
    [[noreturn]] void fail(const AgentMessage& req, const std::string& what) {
        log({clock_(), "error", req.correlation_id, req.sender, req.recipient, what});
        throw E(what);
    }

    void log(AuditRecord r) {
        std::lock_guard lock(audit_mu_);
        if (!audit_path_.empty()) {
            std::ofstream out(audit_path_, std::ios::app);
            out << to_json(r).dump() << '\n';
        }
        audit_.push_back(std::move(r));
    }

    std::string key_;
    MillisClock clock_;
    mutable std::shared_mutex registry_mu_;
    std::map<std::string, std::unique_ptr<Agent>> agents_;
    std::atomic<std::uint64_t> next_corr_{0};
    mutable std::mutex audit_mu_;
    std::vector<AuditRecord> audit_;
    std::string audit_path_;
};

// ---------------------------------------------------------------------------
// Knowledge graph.
// ---------------------------------------------------------------------------

inline constexpr double kDefaultPlausibility = 0.5;

using SecondsClock = std::function<double()>;

inline SecondsClock steady_seconds() {
    return [] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
    };
}

/// Symmetric concept-pair plausibility. A file-backed graph caches each
/// looked-up pair for `ttl` seconds and re-reads the file once it expires.
class KnowledgeGraph {
public:
    explicit KnowledgeGraph(double default_score = kDefaultPlausibility)
        : state_(std::make_shared<State>()) {
        check_score(default_score, "default score");
        state_->default_score = default_score;
    }

    static KnowledgeGraph parse(std::string_view text, double default_score = kDefaultPlausibility) {
        KnowledgeGraph g(default_score);
        g.state_->table = parse_table(text);
        return g;
    }

    static KnowledgeGraph open(const std::string& path, double ttl_seconds, SecondsClock clock = steady_seconds(),
                               double default_score = kDefaultPlausibility) {
        if (!(ttl_seconds >= 0.0)) throw ConfigError("knowledge graph TTL must be >= 0");
        KnowledgeGraph g(default_score);
        g.state_->path = path;
        g.state_->ttl = ttl_seconds;
        g.state_->clock = std::move(clock);
        g.state_->table = parse_table(read_file(path));
        return g;
    }

    void set(const std::string& a, const std::string& b, double score) {
        check_score(score, "score");
        std::lock_guard lock(state_->mu);
        state_->table[key(a, b)] = score;
        state_->cache.erase(key(a, b));
    }

    double plausibility(const std::string& a, const std::string& b) const {
        State& s = *state_;
        std::lock_guard lock(s.mu);
        const auto k = key(a, b);
        if (s.path.empty()) return lookup(s, k);
        const double now = s.clock();
        const auto it = s.cache.find(k);
        if (it != s.cache.end() && now - it->second.fetched < s.ttl) return it->second.score;
        if (it != s.cache.end()) {
            s.table = parse_table(read_file(s.path));
            ++s.reloads;
        }
        const double v = lookup(s, k);
        s.cache[k] = {v, now};
        return v;
    }

    double default_score() const { return state_->default_score; }
    std::size_t size() const {
        std::lock_guard lock(state_->mu);
        return state_->table.size();
    }
    std::size_t reloads() const {
        std::lock_guard lock(state_->mu);
        return state_->reloads;
    }

    /// Index-based view for decoding; the graph outlives copies of the function.
    KgScoreFn score_fn(std::vector<std::string> concepts) const {
        auto self = *this;
        return [self, concepts = std::move(concepts)](int a, int b) {
            return self.plausibility(concepts.at(static_cast<std::size_t>(a)), concepts.at(static_cast<std::size_t>(b)));
        };
    }

private:
    using Key = std::pair<std::string, std::string>;
    struct Cached {
        double score;
        double fetched;
    };
    struct State {
        std::map<Key, double> table;
        double default_score = kDefaultPlausibility;
        std::string path;
        double ttl = 0.0;
        SecondsClock clock;
        std::map<Key, Cached> cache;
        std::size_t reloads = 0;
        std::mutex mu;
    };

    static Key key(const std::string& a, const std::string& b) { return a <= b ? Key{a, b} : Key{b, a}; }

    static double lookup(const State& s, const Key& k) {
        const auto it = s.table.find(k);
        return it == s.table.end() ? s.default_score : it->second;
    }

    static void check_score(double v, const char* what) {
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError(std::string("knowledge graph ") + what + " outside [0,1]");
    }

    static std::string read_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw StateError("cannot read knowledge graph " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    static std::map<Key, double> parse_table(std::string_view text) {
        std::map<Key, double> out;
        std::istringstream in{std::string(text)};
        std::string line;
        std::size_t n = 0;
        bool header = false;
        while (std::getline(in, line)) {
            ++n;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (!header) {
                if (line != "concept_a\tconcept_b\tscore")
                    throw ParseError(n, 1, "knowledge graph header must be 'concept_a<TAB>concept_b<TAB>score'");
                header = true;
                continue;
            }
            const auto cols = detail::split(line, '\t');
            if (cols.size() != 3) throw ParseError(n, 1, "expected three tab-separated columns");
            double v = 0.0;
            try {
                std::size_t used = 0;
                v = std::stod(cols[2], &used);
                if (used != cols[2].size()) throw std::invalid_argument("trailing");
            } catch (const std::logic_error&) {
                throw ParseError(n, cols[0].size() + cols[1].size() + 3, "score is not a number");
            }
            if (!(v >= 0.0 && v <= 1.0))
                throw ParseError(n, cols[0].size() + cols[1].size() + 3, "score outside [0,1]");
            out[key(cols[0], cols[1])] = v;
        }
        if (!header) throw ParseError(n ? n : 1, 1, "knowledge graph is empty");
        return out;
    }

    std::shared_ptr<State> state_;
};

/// Unordered pairs of positively claimed concepts.
inline std::vector<std::pair<std::string, std::string>> claim_pairs(const std::vector<Claim>& claims,
                                                                    const std::vector<std::string>& concepts) {
    std::vector<std::string> pos;
    for (const auto& [k, p] : claims)
        if (p > 0) pos.push_back(concepts.at(static_cast<std::size_t>(k)));
    std::sort(pos.begin(), pos.end());
    pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
    std::vector<std::pair<std::string, std::string>> out;
    for (std::size_t i = 0; i < pos.size(); ++i)
        for (std::size_t j = i + 1; j < pos.size(); ++j) out.emplace_back(pos[i], pos[j]);
    return out;
}

/// gamma times the least plausible claimed pair. No pairs leaves gamma unchanged.
inline double confidence_adjust(double gamma, const std::vector<double>& pair_scores) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw DomainError("confidence_adjust: gamma outside [0,1]");
    double m = 1.0;
    for (double s : pair_scores) {
        if (!(s >= 0.0 && s <= 1.0)) throw DomainError("confidence_adjust: plausibility outside [0,1]");
        m = std::min(m, s);
    }
    return gamma * m;
}

inline double confidence_adjust(double gamma, const std::vector<std::pair<std::string, std::string>>& pairs,
                                const KnowledgeGraph& g) {
    std::vector<double> scores;
    for (const auto& [a, b] : pairs) scores.push_back(g.plausibility(a, b));
    return confidence_adjust(gamma, scores);
}

// ---------------------------------------------------------------------------
// Coordinator.
// ---------------------------------------------------------------------------

struct SlotCandidate {
    std::string value;
    double gamma = 0.0;
    std::string agent;
};

struct SlotResolution {
    std::string slot;
    std::string value;
    double support = 0.0;
    bool uncertain = false;  // exact tie, smallest value taken
    std::size_t candidates = 0;
};

/// Weighted vote: argmax over values of the summed gamma * priority. Each
/// value's weights are summed in ascending order so the result does not
/// depend on candidate order.
inline SlotResolution coordinate_slot(const std::string& slot, const std::vector<SlotCandidate>& candidates,
                                      const std::map<std::string, double>& priorities = {}) {
    if (candidates.empty()) throw CoordinationError("coordinate_slot: no candidates for slot '" + slot + "'");
    std::map<std::string, std::vector<double>> weights;
    for (const auto& c : candidates) {
        if (!(c.gamma >= 0.0 && c.gamma <= 1.0))
            throw DomainError("coordinate_slot: gamma outside [0,1] for agent '" + c.agent + "'");
        const auto it = priorities.find(c.agent);
        const double pri = it == priorities.end() ? 1.0 : it->second;
        weights[c.value].push_back(c.gamma * pri);
    }
    SlotResolution r{slot, "", -1.0, false, candidates.size()};
    for (auto& [value, ws] : weights) {  // map order: ascending value
        std::sort(ws.begin(), ws.end());
        double sum = 0.0;
        for (double w : ws) sum += w;
        if (sum > r.support) {
            r.value = value;
            r.support = sum;
            r.uncertain = false;
        } else if (sum == r.support) {
            r.uncertain = true;
        }
    }
    return r;
}

class Coordinator {
public:
    void set_priority(const std::string& agent, double p) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw DomainError("agent priority must be finite and >= 0");
        std::lock_guard lock(mu_);
        priorities_[agent] = p;
    }

    SlotResolution resolve(const std::string& slot, const std::vector<SlotCandidate>& candidates) {
        std::map<std::string, double> pri;
        std::mutex* slot_mu = nullptr;
        {
            std::lock_guard lock(mu_);
            pri = priorities_;
            auto& m = slot_mu_[slot];
            if (!m) m = std::make_unique<std::mutex>();
            slot_mu = m.get();
        }
        std::lock_guard slot_lock(*slot_mu);
        auto r = coordinate_slot(slot, candidates, pri);
        std::lock_guard lock(mu_);
        log_.push_back(r);
        return r;
    }

    std::vector<SlotResolution> log() const {
        std::lock_guard lock(mu_);
        return log_;
    }

private:
    mutable std::mutex mu_;
    std::map<std::string, double> priorities_;
    std::map<std::string, std::unique_ptr<std::mutex>> slot_mu_;
    std::vector<SlotResolution> log_;
};

// ---------------------------------------------------------------------------
// The five agents. Visual evidence, reasoning and generation adapt the model
// and decoder; knowledge answers plausibility queries; the verifier checks
// drafts for polarity clashes.
// ---------------------------------------------------------------------------

inline constexpr const char* kVisualAgent = "visual";
inline constexpr const char* kKnowledgeAgent = "knowledge";
inline constexpr const char* kReasoningAgent = "reasoning";
inline constexpr const char* kGenerationAgent = "generation";
inline constexpr const char* kVerifierAgent = "verifier";
inline constexpr const char* kCoordinatorId = "coordinator";

namespace agent_detail {

inline json tensor_json(const Tensor& t) {
    json rows = json::array();
    for (std::size_t i = 0; i < t.rows; ++i) {
        const auto r = t.row(i);
        rows.push_back(Vec(r.begin(), r.end()));
    }
    return rows;
}

inline Tensor tensor_from_json(const json& j) {
    const auto rows = j.get<std::vector<Vec>>();
    if (rows.empty()) throw DimensionError("feature matrix has no rows");
    Tensor t(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != t.cols) throw DimensionError("feature matrix rows are ragged");
        std::copy(rows[i].begin(), rows[i].end(), t.row(i).begin());
    }
    return t;
}

inline const json& need(const std::optional<json>& field, const char* name) {
    if (!field) throw StructureError(std::string("message is missing the '") + name + "' field");
    return *field;
}

}  // namespace agent_detail

struct AgentSystemOptions {
    DecodeOptions decode;
    std::size_t n_r = 3;
    double review_threshold = kReviewThreshold;
    std::string key = "nsmrg-bus";
};

struct PipelineResult {
    Forward forward;
    Draft draft;
    std::vector<std::string> correlation_ids;
};

/// Owns the bus and registers the five agents over shared read-only state.
class AgentSystem {
public:
    AgentSystem(const Model& model, const TemplateLibrary& templates, const ExemplarStore* store, KnowledgeGraph kg,
                AgentSystemOptions opts = {}, MillisClock clock = steady_millis())
        : model_(model), templates_(templates), store_(store), kg_(std::move(kg)), opts_(std::move(opts)),
          bus_(opts_.key, std::move(clock)) {
        using namespace agent_detail;
        bus_.register_agent(kVisualAgent, [this](const AgentMessage& req, AgentMessage& resp) {
            const Tensor x = tensor_from_json(need(req.evidence, "evidence").at("x"));
            const Forward f = forward(model_, x);
            resp.evidence = json{{"embedding", f.embedding}, {"pooled", f.pooled},
                                 {"concepts", f.concepts},   {"template_logits", f.template_logits},
                                 {"numeric", f.numeric}};
            resp.confidence = f.concepts;
        });
        bus_.register_agent(kKnowledgeAgent, [this](const AgentMessage& req, AgentMessage& resp) {
            Vec scores;
            for (const auto& pair : need(req.claims, "claims"))
                scores.push_back(kg_.plausibility(pair.at(0).get<std::string>(), pair.at(1).get<std::string>()));
            resp.evidence = json{{"plausibility", scores}};
            resp.confidence = scores;
        });
        bus_.register_agent(kReasoningAgent, [this](const AgentMessage& req, AgentMessage& resp) {
            const Vec c = need(req.evidence, "evidence").at("concepts").get<Vec>();
            Vec rules(model_.rule_count());
            json nodes = json::array();
            for (std::size_t j = 0; j < rules.size(); ++j) {
                RuleEvalCache cache;
                rules[j] = eval_rule_tree(model_.rules.rules[j].tree, c, &cache);
                nodes.push_back(cache.values);
            }
            resp.evidence = json{{"rules", rules}, {"nodes", nodes}};
            resp.confidence = rules;
        });
        bus_.register_agent(kGenerationAgent, [this](const AgentMessage& req, AgentMessage& resp) {
            const auto& ev = need(req.evidence, "evidence");
            Forward f;
            f.embedding = ev.at("embedding").get<Vec>();
            f.pooled = ev.at("pooled").get<Vec>();
            f.concepts = ev.at("concepts").get<Vec>();
            f.rules = ev.at("rules").get<Vec>();
            f.template_logits = ev.at("template_logits").get<Vec>();
            f.numeric = ev.at("numeric").get<Vec>();
            const auto clauses = decode_forward(model_, templates_, f, kg_.score_fn(model_.rules.concepts), opts_.decode);
            static const ExemplarStore empty;
            const ExemplarStore& s = store_ ? *store_ : empty;
            std::vector<Retrieved> hits;
            if (!s.empty() && norm2(f.embedding) > 0.0) hits = retrieve(f.embedding, s, opts_.n_r);
            const Draft d = fill_templates(clauses, hits, s, templates_);
            resp.templates = to_json(d);
            Vec conf;
            for (const auto& c : d.clauses) conf.push_back(std::clamp(c.confidence, 0.0, 1.0));
            resp.confidence = conf;
        });
        bus_.register_agent(kVerifierAgent, [this](const AgentMessage& req, AgentMessage& resp) {
            const Draft d = verify_draft(draft_from_json(need(req.templates, "templates")), opts_.review_threshold);
            resp.templates = to_json(d);
            Vec scores;
            for (const auto& fl : d.flags) scores.push_back(fl.score);
            resp.confidence = scores;
            resp.action_req = d.review_required ? "review" : "none";
        });
    }

    AgentSystem(const AgentSystem&) = delete;
    AgentSystem& operator=(const AgentSystem&) = delete;

    MessageBus& bus() { return bus_; }
    Coordinator& coordinator() { return coordinator_; }
    const KnowledgeGraph& knowledge() const { return kg_; }

    /// visual -> reasoning -> generation -> knowledge (per clause) -> verifier.
    /// Clause confidences come back penalized by claim-pair plausibility.
    PipelineResult run(const Tensor& x) {
        using namespace agent_detail;
        PipelineResult out;
        auto track = [&](const AgentMessage& m) { out.correlation_ids.push_back(m.correlation_id); };

        const auto vis = bus_.send(kCoordinatorId, kVisualAgent, [&](AgentMessage& m) {
            m.evidence = json{{"x", tensor_json(x)}};
            m.action_req = "encode";
        });
        track(vis);
        const auto& ve = *vis.evidence;

        const auto rea = bus_.send(kCoordinatorId, kReasoningAgent, [&](AgentMessage& m) {
            m.evidence = json{{"concepts", ve.at("concepts")}};
            m.action_req = "evaluate_rules";
        });
        track(rea);

        json gen_ev = ve;
        gen_ev["rules"] = rea.evidence->at("rules");
        const auto gen = bus_.send(kCoordinatorId, kGenerationAgent, [&](AgentMessage& m) {
            m.evidence = gen_ev;
            m.action_req = "draft";
        });
        track(gen);

        Draft draft = draft_from_json(*gen.templates);
        for (auto& c : draft.clauses) {
            const auto pairs = claim_pairs(c.claims, model_.rules.concepts);
            if (pairs.empty()) continue;
            json claims = json::array();
            for (const auto& [a, b] : pairs) claims.push_back({a, b});
            const auto kn = bus_.send(kCoordinatorId, kKnowledgeAgent, [&](AgentMessage& m) {
                m.claims = claims;
                m.action_req = "plausibility";
            });
            track(kn);
            c.confidence = confidence_adjust(std::clamp(c.confidence, 0.0, 1.0), *kn.confidence);
        }
        if (!draft.clauses.empty()) {
            double sum = 0.0;
            for (const auto& c : draft.clauses) sum += c.confidence;
            draft.confidence = sum / static_cast<double>(draft.clauses.size());
        }

        const auto ver = bus_.send(kCoordinatorId, kVerifierAgent, [&](AgentMessage& m) {
            m.templates = to_json(draft);
            m.action_req = "verify";
        });
        track(ver);
        out.draft = draft_from_json(*ver.templates);

        out.forward.embedding = ve.at("embedding").get<Vec>();
        out.forward.pooled = ve.at("pooled").get<Vec>();
        out.forward.concepts = ve.at("concepts").get<Vec>();
        out.forward.rules = rea.evidence->at("rules").get<Vec>();
        out.forward.template_logits = ve.at("template_logits").get<Vec>();
        out.forward.numeric = ve.at("numeric").get<Vec>();
        return out;
    }

private:
    const Model& model_;
    const TemplateLibrary& templates_;
    const ExemplarStore* store_;
    KnowledgeGraph kg_;
    AgentSystemOptions opts_;
    MessageBus bus_;
    Coordinator coordinator_;
};

}  // namespace nsmrg
