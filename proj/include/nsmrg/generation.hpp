#pragma once

// Clause generation: template inventory, rule decoding with weighted slot
// votes, cosine retrieval over an exemplar store, provenance-tracked template
// filling, polarity-clash verification and BLEU / ROUGE-L scoring.

#include <cctype>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nsmrg/core.hpp"
#include "nsmrg/logic.hpp"

namespace nsmrg {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Template inventory.
// ---------------------------------------------------------------------------

enum class SlotKind { Laterality, Region, Measurement, Qualifier, ConceptPhrase };

inline const char* to_string(SlotKind k) {
    switch (k) {
        case SlotKind::Laterality: return "laterality";
        case SlotKind::Region: return "region";
        case SlotKind::Measurement: return "measurement";
        case SlotKind::Qualifier: return "qualifier";
        case SlotKind::ConceptPhrase: return "concept-phrase";
    }
    return "?";
}

inline std::optional<SlotKind> parse_slot_kind(std::string_view s) {
    if (s == "laterality") return SlotKind::Laterality;
    if (s == "region") return SlotKind::Region;
    if (s == "measurement") return SlotKind::Measurement;
    if (s == "qualifier") return SlotKind::Qualifier;
    if (s == "concept-phrase") return SlotKind::ConceptPhrase;
    return std::nullopt;
}

struct SlotSpec {
    std::string name;
    SlotKind kind = SlotKind::ConceptPhrase;
    bool required = true;
    std::vector<std::string> vocabulary;  // values retrieval may supply
};

struct TemplateSkeleton {
    std::string id;
    std::string text;
    std::vector<SlotSpec> slots;

    const SlotSpec* slot(std::string_view name) const {
        for (const auto& s : slots)
            if (s.name == name) return &s;
        return nullptr;
    }
};

inline std::vector<std::string> template_placeholders(std::string_view text) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] != '{') continue;
        const auto e = text.find('}', i);
        if (e == std::string_view::npos) break;
        out.emplace_back(text.substr(i + 1, e - i - 1));
        i = e;
    }
    return out;
}

inline constexpr int kTemplateLibraryVersion = 1;

struct TemplateLibrary {
    std::vector<TemplateSkeleton> templates;

    std::size_t size() const { return templates.size(); }

    int index_of(std::string_view id) const {
        for (std::size_t i = 0; i < templates.size(); ++i)
            if (templates[i].id == id) return static_cast<int>(i);
        return -1;
    }

    const TemplateSkeleton& at(std::string_view id) const {
        const int i = index_of(id);
        if (i < 0) throw LibraryError("unknown template '" + std::string(id) + "'");
        return templates[i];
    }
};

///   nsmrg-templates 1
///   T01 | {laterality} pleural effusion {extent}. | laterality:laterality:required; extent:qualifier:optional:layering/loculated
inline TemplateLibrary parse_template_library(std::string_view text) {
    TemplateLibrary lib;
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    bool saw_header = false;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto line = detail::trim(raw);
        if (line.empty() || line[0] == '#') continue;
        if (!saw_header) {
            std::istringstream hs(line);
            std::string magic;
            int version = 0;
            hs >> magic >> version;
            if (magic != "nsmrg-templates") throw ParseError(line_no, 1, "missing 'nsmrg-templates' header");
            if (version != kTemplateLibraryVersion)
                throw VersionError("template library version " + std::to_string(version) + " unsupported");
            saw_header = true;
            continue;
        }
        const auto fields = detail::split(raw, '|');
        if (fields.size() != 3) throw ParseError(line_no, 1, "expected 'id | skeleton | slots'");
        TemplateSkeleton t;
        t.id = detail::trim(fields[0]);
        t.text = detail::trim(fields[1]);
        if (t.id.empty()) throw ParseError(line_no, 1, "empty template id");
        if (lib.index_of(t.id) >= 0) throw ParseError(line_no, 1, "duplicate template id '" + t.id + "'");
        for (const auto& part : detail::split(fields[2], ';')) {
            const auto spec = detail::trim(part);
            if (spec.empty()) continue;
            const auto bits = detail::split(spec, ':');
            if (bits.size() < 3 || bits.size() > 4) throw ParseError(line_no, 1, "bad slot spec '" + spec + "'");
            SlotSpec s;
            s.name = detail::trim(bits[0]);
            const auto kind = parse_slot_kind(detail::trim(bits[1]));
            if (!kind) throw ParseError(line_no, 1, "unknown slot kind '" + detail::trim(bits[1]) + "'");
            s.kind = *kind;
            const auto req = detail::trim(bits[2]);
            if (req != "required" && req != "optional") throw ParseError(line_no, 1, "expected required|optional");
            s.required = req == "required";
            if (bits.size() == 4)
                for (const auto& v : detail::split(bits[3], '/'))
                    if (auto tv = detail::trim(v); !tv.empty()) s.vocabulary.push_back(tv);
            t.slots.push_back(std::move(s));
        }
        for (const auto& ph : template_placeholders(t.text))
            if (!t.slot(ph)) throw ParseError(line_no, 1, "placeholder {" + ph + "} missing from slot schema of " + t.id);
        lib.templates.push_back(std::move(t));
    }
    if (!saw_header) throw ParseError(1, 1, "missing 'nsmrg-templates' header");
    return lib;
}

inline TemplateLibrary load_template_library(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LibraryError("cannot open template library " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_template_library(ss.str());
}

/// Load-time check that every rule maps to known templates.
inline void validate_library(const RuleLibrary& rules, const TemplateLibrary& templates) {
    for (const auto& r : rules.rules) {
        if (r.templates.empty()) throw LibraryError("rule " + r.tree.id + " maps to no template");
        for (const auto& t : r.templates)
            if (templates.index_of(t) < 0)
                throw LibraryError("rule " + r.tree.id + " references unknown template '" + t + "'");
    }
}

// ---------------------------------------------------------------------------
// Clauses and drafts.
// ---------------------------------------------------------------------------

enum class Provenance { Rule, Retrieval, Regressor };
enum class Qualifier { None, Possible, CannotExclude };

inline const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::Rule: return "rule";
        case Provenance::Retrieval: return "retrieval";
        case Provenance::Regressor: return "regressor";
    }
    return "?";
}

inline const char* to_string(Qualifier q) {
    switch (q) {
        case Qualifier::None: return "none";
        case Qualifier::Possible: return "possible";
        case Qualifier::CannotExclude: return "cannot exclude";
    }
    return "?";
}

inline Provenance parse_provenance(std::string_view s) {
    for (auto p : {Provenance::Rule, Provenance::Retrieval, Provenance::Regressor})
        if (s == to_string(p)) return p;
    throw DomainError("unknown provenance '" + std::string(s) + "'");
}

inline Qualifier parse_qualifier(std::string_view s) {
    for (auto q : {Qualifier::None, Qualifier::Possible, Qualifier::CannotExclude})
        if (s == to_string(q)) return q;
    throw DomainError("unknown qualifier '" + std::string(s) + "'");
}

struct SlotValue {
    std::string name;
    std::string value;
    Provenance provenance = Provenance::Rule;
    double confidence = 1.0;
    std::vector<std::string> vocabulary;  // competing values, for paraphrase checks
};

/// (concept index, +1 / -1)
using Claim = std::pair<int, int>;

struct Clause {
    std::string text;
    std::size_t rule_index = 0;
    std::string rule_id;
    std::string template_id;
    std::vector<SlotValue> slots;
    Qualifier qualifier = Qualifier::None;
    double activation = 0.0;
    double confidence = 0.0;
    std::vector<Claim> claims;

    const SlotValue* slot(std::string_view name) const {
        for (const auto& s : slots)
            if (s.name == name) return &s;
        return nullptr;
    }

    /// Factual identity: rule, template and rule-derived categorical slots.
    /// Numeric and retrieval-filled slots are excluded.
    std::string key() const {
        std::vector<std::string> parts;
        for (const auto& s : slots)
            if (s.provenance == Provenance::Rule) parts.push_back(s.name + "=" + s.value);
        std::sort(parts.begin(), parts.end());
        std::string k = rule_id + "|" + template_id;
        for (const auto& p : parts) k += "|" + p;
        return k;
    }
};

inline const std::string kNoFindingsText = "No acute findings.";

inline std::string render_clause(const TemplateSkeleton& t, const std::vector<SlotValue>& slots, Qualifier q) {
    std::string out;
    const auto& s = t.text;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '{') {
            const auto e = s.find('}', i);
            const auto name = s.substr(i + 1, e - i - 1);
            for (const auto& v : slots)
                if (v.name == name) out += v.value;
            i = e;
        } else {
            out += s[i];
        }
    }
    // Collapse whitespace left by empty slots and drop spaces before punctuation.
    std::string clean;
    for (char c : out) {
        if (c == ' ' && (clean.empty() || clean.back() == ' ')) continue;
        if ((c == '.' || c == ',') && !clean.empty() && clean.back() == ' ') clean.pop_back();
        clean += c;
    }
    while (!clean.empty() && clean.back() == ' ') clean.pop_back();
    if (clean.empty()) return clean;
    if (q == Qualifier::None) {
        clean[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(clean[0])));
        return clean;
    }
    clean[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(clean[0])));
    return (q == Qualifier::Possible ? "Possible " : "Cannot exclude ") + clean;
}

struct Evidence {
    std::size_t exemplar = 0;  // insertion index in the store
    double similarity = 0.0;
    std::string fragment;
    std::map<int, int> polarities;
};

struct VerifierFlag {
    std::size_t clause = 0;
    std::size_t exemplar = 0;
    int concept_index = -1;
    double score = 0.0;
};

struct Draft {
    std::vector<Clause> clauses;
    std::vector<std::vector<Evidence>> evidence;  // per clause
    double confidence = 1.0;
    std::vector<VerifierFlag> flags;
    std::vector<std::string> warnings;
    bool review_required = false;

    std::string text() const {
        if (clauses.empty()) return kNoFindingsText;
        std::string t;
        for (const auto& c : clauses) {
            if (!t.empty()) t += ' ';
            t += c.text;
        }
        return t;
    }

    std::vector<std::string> clause_keys() const {
        std::vector<std::string> out;
        for (const auto& c : clauses) out.push_back(c.key());
        return out;
    }

    struct LedgerEntry {
        std::size_t clause;
        std::string slot;
        Provenance provenance;
        double confidence;
    };
    std::vector<LedgerEntry> provenance_ledger() const {
        std::vector<LedgerEntry> out;
        for (std::size_t i = 0; i < clauses.size(); ++i)
            for (const auto& s : clauses[i].slots) out.push_back({i, s.name, s.provenance, s.confidence});
        return out;
    }
};

// ---------------------------------------------------------------------------
// Weighted slot vote.
// ---------------------------------------------------------------------------

struct SlotDecision {
    std::string value;
    Qualifier qualifier = Qualifier::None;
    double support = 0.0;  // winning weight / total weight
};

/// Summed weight per distinct value, best first; exact ties by lexicographic value.
inline std::vector<std::pair<std::string, double>> tally_votes(
    const std::vector<std::pair<std::string, double>>& candidates) {
    std::map<std::string, double> sums;
    for (const auto& [v, w] : candidates) sums[v] += w;
    std::vector<std::pair<std::string, double>> out(sums.begin(), sums.end());
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return out;
}

inline constexpr double kVoteMargin = 0.05;

inline SlotDecision resolve_slot_conflicts(const std::vector<std::pair<std::string, double>>& candidates,
                                           double margin = kVoteMargin) {
    if (candidates.empty()) throw ArgumentError("resolve_slot_conflicts: no candidates");
    double total = 0.0;
    for (const auto& [v, w] : candidates) {
        if (w < 0.0) throw ArgumentError("resolve_slot_conflicts: negative weight for '" + v + "'");
        total += w;
    }
    const auto tally = tally_votes(candidates);
    SlotDecision d{tally[0].first, Qualifier::None, total > 0.0 ? tally[0].second / total : 1.0};
    if (tally.size() > 1 && tally[0].second - tally[1].second < margin) d.qualifier = Qualifier::Possible;
    return d;
}

// ---------------------------------------------------------------------------
// Rule decoding.
// ---------------------------------------------------------------------------

/// Knowledge-graph consistency between two concept indices, in [0,1].
using KgScoreFn = std::function<double(int, int)>;

struct DecodeOptions {
    double fire_threshold = 0.5;  // rules below this activation emit no clause
    double hard_threshold = 0.5;  // concept hardening for slot instantiation
    double vote_margin = kVoteMargin;
    double cannot_exclude_band = 0.0;  // activations in [fire, fire+band) get "cannot exclude"
};

struct DecodeContext {
    const RuleLibrary& rules;
    const TemplateLibrary& templates;
    std::span<const double> activations;      // R
    std::span<const double> concepts;         // K
    std::span<const double> template_scores;  // one per template in library order
    std::map<std::string, double> numeric;    // regressor outputs by name
    KgScoreFn kg;
    DecodeOptions opts;
};

/// Literals satisfied under the hard mask: positive leaves that are on and
/// negated leaves that are off.
inline std::vector<Claim> satisfied_literals(const RuleTree& t, const HardConceptMask& mask) {
    std::vector<Claim> out;
    std::vector<std::pair<int, bool>> stack{{t.root(), false}};
    while (!stack.empty()) {
        auto [i, negated] = stack.back();
        stack.pop_back();
        const auto& n = t.nodes[i];
        if (n.kind == OpKind::Leaf) {
            const bool on = mask.bits[n.concept_index] != 0;
            if (!negated && on) out.emplace_back(n.concept_index, +1);
            if (negated && !on) out.emplace_back(n.concept_index, -1);
        } else if (n.kind == OpKind::Not) {
            stack.emplace_back(n.left, !negated);
        } else {
            stack.emplace_back(n.right, negated);
            stack.emplace_back(n.left, negated);
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

inline std::string format_measurement(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", std::round(v * 10.0) / 10.0);
    return buf;
}

inline std::vector<Clause> decode_rules(std::span<const std::size_t> top, const DecodeContext& ctx) {
    if (ctx.template_scores.size() != ctx.templates.size())
        throw DimensionError("decode_rules: template score count != template library size");
    const auto mask = harden(ctx.concepts, ctx.opts.hard_threshold);
    std::vector<Clause> out;
    for (const std::size_t j : top) {
        if (j >= ctx.rules.size()) throw ArgumentError("decode_rules: rule index out of range");
        const double act = ctx.activations[j];
        if (act < ctx.opts.fire_threshold) continue;
        const auto& entry = ctx.rules.rules[j];
        if (entry.templates.empty()) throw LibraryError("rule " + entry.tree.id + " maps to no template");

        // Template choice: highest selection score among the rule's templates.
        int best = -1;
        for (const auto& tid : entry.templates) {
            const int ti = ctx.templates.index_of(tid);
            if (ti < 0) throw LibraryError("rule " + entry.tree.id + " references unknown template '" + tid + "'");
            if (best < 0 || ctx.template_scores[ti] > ctx.template_scores[best]) best = ti;
        }
        const auto& tpl = ctx.templates.templates[best];

        Clause c;
        c.rule_index = j;
        c.rule_id = entry.tree.id;
        c.template_id = tpl.id;
        c.activation = act;
        c.confidence = act;
        c.claims = satisfied_literals(entry.tree, mask);
        const auto leaves = entry.tree.leaf_concepts();
        const int anchor = leaves.empty() ? -1 : leaves.front();
        bool unresolved = false;
        bool near_tie = false;

        for (const auto& spec : tpl.slots) {
            const SlotBinding* binding = nullptr;
            for (const auto& b : entry.slots)
                if (b.slot == spec.name) binding = &b;
            if (!binding) {
                if (spec.required) unresolved = true;
                continue;
            }
            if (binding->numeric()) {
                const auto it = ctx.numeric.find(binding->regressor);
                if (it == ctx.numeric.end()) {
                    if (spec.required) unresolved = true;
                    continue;
                }
                c.slots.push_back({spec.name, format_measurement(it->second), Provenance::Regressor, act, {}});
                continue;
            }
            std::vector<std::pair<std::string, double>> candidates;
            std::vector<std::string> vocab;
            for (const auto& [k, value] : binding->concept_values) {
                vocab.push_back(value);
                if (!mask.bits[k]) continue;
                const double kg = (ctx.kg && anchor >= 0) ? ctx.kg(anchor, k) : 1.0;
                candidates.emplace_back(value, act * ctx.concepts[k] * kg);
            }
            if (candidates.empty()) {
                if (spec.required) unresolved = true;
                continue;
            }
            const auto d = resolve_slot_conflicts(candidates, ctx.opts.vote_margin);
            if (d.qualifier != Qualifier::None) near_tie = true;
            c.slots.push_back({spec.name, d.value, Provenance::Rule, d.support, vocab});
            for (const auto& [k, value] : binding->concept_values)
                if (value == d.value && mask.bits[k]) c.claims.emplace_back(k, +1);
        }
        std::sort(c.claims.begin(), c.claims.end());
        c.claims.erase(std::unique(c.claims.begin(), c.claims.end()), c.claims.end());

        if (unresolved || near_tie)
            c.qualifier = Qualifier::Possible;
        else if (act < ctx.opts.fire_threshold + ctx.opts.cannot_exclude_band)
            c.qualifier = Qualifier::CannotExclude;
        c.text = render_clause(tpl, c.slots, c.qualifier);
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Exemplar store and retrieval.
// ---------------------------------------------------------------------------

struct ExemplarRecord {
    Vec embedding;
    std::string fragment;
    std::map<int, int> polarities;  // concept index -> +1 / -1
    std::string source;
    bool approved = false;
    std::size_t insertion = 0;
};

inline constexpr int kExemplarStoreVersion = 1;

inline json exemplar_to_json(const ExemplarRecord& r) {
    json pol = json::object();
    for (const auto& [k, p] : r.polarities) pol[std::to_string(k)] = p;
    return {{"embedding", r.embedding}, {"fragment", r.fragment}, {"polarities", pol},
            {"source", r.source},       {"approved", r.approved}};
}

inline ExemplarRecord exemplar_from_json(const json& j) {
    ExemplarRecord r;
    r.embedding = j.at("embedding").get<Vec>();
    r.fragment = j.at("fragment").get<std::string>();
    for (const auto& [k, p] : j.at("polarities").items()) r.polarities[std::stoi(k)] = p.get<int>();
    r.source = j.value("source", "");
    r.approved = j.value("approved", false);
    return r;
}

/// Append-only store. Insertion order is the retrieval tie-break.
class ExemplarStore {
public:
    std::size_t add(ExemplarRecord r) {
        if (norm2(r.embedding) <= 0.0) throw RetrievalError("exemplar embedding has zero norm");
        if (!records_.empty() && r.embedding.size() != records_.front().embedding.size())
            throw DimensionError("exemplar embedding width mismatch");
        for (const auto& [k, p] : r.polarities)
            if (k < 0 || (p != 1 && p != -1)) throw ArgumentError("exemplar polarity must be +1/-1 on a valid concept");
        r.insertion = records_.size();
        records_.push_back(std::move(r));
        return records_.back().insertion;
    }

    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }
    const ExemplarRecord& operator[](std::size_t i) const { return records_[i]; }
    const std::vector<ExemplarRecord>& records() const { return records_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw StateError("cannot write exemplar store " + path);
        out << json{{"format", "nsmrg-exemplars"}, {"version", kExemplarStoreVersion}}.dump() << '\n';
        for (const auto& r : records_) out << exemplar_to_json(r).dump() << '\n';
    }

    /// Appends one record to an existing file (or creates it with a header).
    static void append_to_file(const std::string& path, const ExemplarRecord& r) {
        std::ifstream probe(path);
        const bool fresh = !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
        probe.close();
        std::ofstream out(path, std::ios::app);
        if (!out) throw StateError("cannot append to exemplar store " + path);
        if (fresh) out << json{{"format", "nsmrg-exemplars"}, {"version", kExemplarStoreVersion}}.dump() << '\n';
        out << exemplar_to_json(r).dump() << '\n';
    }

    static ExemplarStore load(const std::string& path) {
        ExemplarStore s;
        std::ifstream in(path);
        if (!in) return s;
        std::string line;
        std::size_t line_no = 0;
        bool header = false;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception& e) {
                throw ParseError(line_no, 1, std::string("exemplar store: ") + e.what());
            }
            if (!header) {
                if (j.value("format", "") != "nsmrg-exemplars") throw ParseError(line_no, 1, "not an exemplar store");
                if (j.value("version", 0) != kExemplarStoreVersion)
                    throw VersionError("exemplar store version " + std::to_string(j.value("version", 0)) + " unsupported");
                header = true;
                continue;
            }
            s.add(exemplar_from_json(j));
        }
        return s;
    }

private:
    std::vector<ExemplarRecord> records_;
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("cosine_similarity: width mismatch");
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

struct Retrieved {
    std::size_t index = 0;
    double similarity = 0.0;
};

/// Top-n by cosine similarity, ties by insertion order.
inline std::vector<Retrieved> retrieve(std::span<const double> query, const ExemplarStore& store, std::size_t n) {
    if (norm2(query) <= 0.0) throw RetrievalError("retrieve: zero-norm query");
    std::vector<Retrieved> all;
    all.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) all.push_back({i, cosine_similarity(query, store[i].embedding)});
    const std::size_t take = std::min(n, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(),
                      [](const Retrieved& a, const Retrieved& b) {
                          return a.similarity > b.similarity || (a.similarity == b.similarity && a.index < b.index);
                      });
    all.resize(take);
    return all;
}

// ---------------------------------------------------------------------------
// Template filling and verification.
// ---------------------------------------------------------------------------

inline std::string lowercase(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

/// Whole-word, case-insensitive containment.
inline bool contains_phrase(std::string_view haystack, std::string_view needle) {
    const auto h = lowercase(haystack);
    const auto n = lowercase(needle);
    if (n.empty()) return false;
    for (std::size_t pos = h.find(n); pos != std::string::npos; pos = h.find(n, pos + 1)) {
        const bool left_ok = pos == 0 || !std::isalnum(static_cast<unsigned char>(h[pos - 1]));
        const std::size_t e = pos + n.size();
        const bool right_ok = e >= h.size() || !std::isalnum(static_cast<unsigned char>(h[e]));
        if (left_ok && right_ok) return true;
    }
    return false;
}

/// Same concept asserted with opposite polarity, or -1.
inline int polarity_clash(const std::vector<Claim>& claims, const std::map<int, int>& polarities) {
    for (const auto& [k, p] : claims) {
        const auto it = polarities.find(k);
        if (it != polarities.end() && it->second == -p) return k;
    }
    return -1;
}

inline bool shares_concept(const std::vector<Claim>& claims, const std::map<int, int>& polarities) {
    return std::any_of(claims.begin(), claims.end(), [&](const Claim& c) { return polarities.count(c.first) > 0; });
}

/// Attaches retrieved evidence to clauses sharing a concept, and lets
/// agreeing exemplars fill empty optional slots. Rule-derived bindings are
/// never overwritten; clashing exemplars stay attached for the verifier.
inline Draft fill_templates(const std::vector<Clause>& clauses, const std::vector<Retrieved>& retrieved,
                            const ExemplarStore& store, const TemplateLibrary& templates) {
    Draft d;
    d.clauses = clauses;
    d.evidence.resize(clauses.size());
    for (std::size_t ci = 0; ci < d.clauses.size(); ++ci) {
        auto& c = d.clauses[ci];
        const auto& tpl = templates.at(c.template_id);
        bool changed = false;
        for (const auto& r : retrieved) {
            const auto& rec = store[r.index];
            if (!shares_concept(c.claims, rec.polarities)) continue;
            d.evidence[ci].push_back({rec.insertion, r.similarity, rec.fragment, rec.polarities});
            if (polarity_clash(c.claims, rec.polarities) >= 0) continue;
            for (const auto& spec : tpl.slots) {
                if (spec.required || c.slot(spec.name)) continue;
                for (const auto& value : spec.vocabulary) {
                    if (!contains_phrase(rec.fragment, value)) continue;
                    c.slots.push_back({spec.name, value, Provenance::Retrieval, std::clamp(r.similarity, 0.0, 1.0),
                                       spec.vocabulary});
                    changed = true;
                    break;
                }
            }
        }
        if (changed) c.text = render_clause(tpl, c.slots, c.qualifier);
    }
    double sum = 0.0;
    for (const auto& c : d.clauses) sum += c.confidence;
    d.confidence = d.clauses.empty() ? 1.0 : sum / static_cast<double>(d.clauses.size());
    return d;
}

inline constexpr double kReviewThreshold = 0.5;

/// Rule-based entailment stand-in: a (claim, evidence) pair scores 1 when the
/// evidence asserts a claimed concept with the opposite polarity.
inline Draft verify_draft(Draft d, double threshold = kReviewThreshold) {
    d.flags.clear();
    d.review_required = false;
    for (std::size_t ci = 0; ci < d.clauses.size(); ++ci) {
        const auto& ev = ci < d.evidence.size() ? d.evidence[ci] : std::vector<Evidence>{};
        for (const auto& e : ev) {
            const int k = polarity_clash(d.clauses[ci].claims, e.polarities);
            const double score = k >= 0 ? 1.0 : 0.0;
            if (score >= threshold) {
                d.flags.push_back({ci, e.exemplar, k, score});
                d.review_required = true;
            }
        }
    }
    return d;
}

enum class ParaphraseMode { Identity, External };

using TextTransform = std::function<std::string(const std::string&)>;

/// Constrained rewrite: accepted only if every bound slot value survives and
/// no competing value from the same slot appears.
inline Draft paraphrase_pass(const Draft& d, ParaphraseMode mode, const TextTransform& transform = {},
                             double threshold = kReviewThreshold) {
    if (mode == ParaphraseMode::Identity) return d;
    if (!transform) throw ArgumentError("paraphrase_pass: external mode needs a transform");
    Draft out = d;
    for (auto& c : out.clauses) {
        const auto rewritten = transform(c.text);
        for (const auto& s : c.slots) {
            bool ok = contains_phrase(rewritten, s.value);
            for (const auto& alt : s.vocabulary)
                if (alt != s.value && contains_phrase(rewritten, alt) && !contains_phrase(c.text, alt)) ok = false;
            if (!ok) {
                Draft kept = d;
                kept.warnings.push_back("paraphrase rejected: slot '" + s.name + "' of clause " + c.rule_id +
                                        " was altered");
                return kept;
            }
        }
        c.text = rewritten;
    }
    return verify_draft(std::move(out), threshold);
}

// ---------------------------------------------------------------------------
// BLEU-1..4 and ROUGE-L.
// ---------------------------------------------------------------------------

/// Lowercased alphanumeric tokens; a '.' between digits stays inside the token.
inline std::vector<std::string> tokenize(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto c = static_cast<unsigned char>(s[i]);
        const bool decimal_point = c == '.' && !cur.empty() && std::isdigit(static_cast<unsigned char>(cur.back())) &&
                                   i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1]));
        if (std::isalnum(c) || decimal_point) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

struct TextScores {
    std::array<double, 4> bleu{};  // cumulative BLEU-1..4
    double rouge_l = 0.0;
    bool warning = false;
};

inline constexpr double kBleuSmoothing = 1e-9;

inline TextScores score_text(std::string_view candidate, std::string_view reference) {
    const auto cand = tokenize(candidate);
    const auto ref = tokenize(reference);
    TextScores s;
    if (cand.empty() || ref.empty()) {
        s.warning = true;
        return s;
    }
    std::array<double, 4> log_p{};
    bool any_unigram = false;
    for (std::size_t n = 1; n <= 4; ++n) {
        std::map<std::vector<std::string>, int> ref_counts;
        for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
        std::map<std::vector<std::string>, int> cand_counts;
        for (std::size_t i = 0; i + n <= cand.size(); ++i) ++cand_counts[{cand.begin() + i, cand.begin() + i + n}];
        double matched = 0.0;
        double total = 0.0;
        for (const auto& [g, cnt] : cand_counts) {
            total += cnt;
            const auto it = ref_counts.find(g);
            if (it != ref_counts.end()) matched += std::min(cnt, it->second);
        }
        if (n == 1) any_unigram = matched > 0.0;
        const double p = matched > 0.0 ? matched / total : kBleuSmoothing / std::max(1.0, total);
        log_p[n - 1] = std::log(p);
    }
    if (any_unigram) {
        const double c = static_cast<double>(cand.size());
        const double r = static_cast<double>(ref.size());
        const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
        double acc = 0.0;
        for (std::size_t n = 1; n <= 4; ++n) {
            acc += log_p[n - 1];
            s.bleu[n - 1] = bp * std::exp(acc / static_cast<double>(n));
        }
    }
    // LCS for ROUGE-L (F1).
    std::vector<std::vector<int>> lcs(cand.size() + 1, std::vector<int>(ref.size() + 1, 0));
    for (std::size_t i = 1; i <= cand.size(); ++i)
        for (std::size_t j = 1; j <= ref.size(); ++j)
            lcs[i][j] = cand[i - 1] == ref[j - 1] ? lcs[i - 1][j - 1] + 1 : std::max(lcs[i - 1][j], lcs[i][j - 1]);
    const double l = lcs[cand.size()][ref.size()];
    if (l > 0.0) {
        const double p = l / static_cast<double>(cand.size());
        const double r = l / static_cast<double>(ref.size());
        s.rouge_l = 2.0 * p * r / (p + r);
    }
    return s;
}

// ---------------------------------------------------------------------------
// JSON views (CLI output, service payloads).
// ---------------------------------------------------------------------------

inline json to_json(const Clause& c) {
    json slots = json::array();
    for (const auto& s : c.slots)
        slots.push_back({{"name", s.name}, {"value", s.value}, {"provenance", to_string(s.provenance)},
                         {"confidence", s.confidence}, {"vocabulary", s.vocabulary}});
    json claims = json::array();
    for (const auto& [k, p] : c.claims) claims.push_back({{"concept", k}, {"polarity", p}});
    return {{"text", c.text},         {"rule_id", c.rule_id},       {"rule_index", c.rule_index},
            {"template_id", c.template_id}, {"slots", slots},       {"qualifier", to_string(c.qualifier)},
            {"activation", c.activation},   {"confidence", c.confidence}, {"claims", claims}};
}

inline json to_json(const Draft& d) {
    json clauses = json::array();
    for (std::size_t i = 0; i < d.clauses.size(); ++i) {
        json c = to_json(d.clauses[i]);
        json ev = json::array();
        if (i < d.evidence.size())
            for (const auto& e : d.evidence[i]) {
                json pol = json::object();
                for (const auto& [k, p] : e.polarities) pol[std::to_string(k)] = p;
                ev.push_back({{"exemplar", e.exemplar}, {"similarity", e.similarity}, {"fragment", e.fragment},
                              {"polarities", pol}});
            }
        c["evidence"] = ev;
        clauses.push_back(std::move(c));
    }
    json flags = json::array();
    for (const auto& f : d.flags)
        flags.push_back({{"clause", f.clause}, {"exemplar", f.exemplar}, {"concept", f.concept_index}, {"score", f.score}});
    return {{"text", d.text()},   {"clauses", clauses},   {"confidence", d.confidence},
            {"flags", flags},     {"warnings", d.warnings}, {"review_required", d.review_required}};
}

inline Clause clause_from_json(const json& j) {
    Clause c;
    c.text = j.at("text").get<std::string>();
    c.rule_id = j.at("rule_id").get<std::string>();
    c.rule_index = j.at("rule_index").get<std::size_t>();
    c.template_id = j.at("template_id").get<std::string>();
    c.qualifier = parse_qualifier(j.at("qualifier").get<std::string>());
    c.activation = j.at("activation").get<double>();
    c.confidence = j.at("confidence").get<double>();
    for (const auto& s : j.at("slots")) {
        SlotValue v{s.at("name").get<std::string>(), s.at("value").get<std::string>(),
                    parse_provenance(s.at("provenance").get<std::string>()), s.at("confidence").get<double>(), {}};
        if (s.contains("vocabulary")) v.vocabulary = s["vocabulary"].get<std::vector<std::string>>();
        c.slots.push_back(std::move(v));
    }
    for (const auto& cl : j.at("claims")) c.claims.emplace_back(cl.at("concept").get<int>(), cl.at("polarity").get<int>());
    return c;
}

/// Inverse of to_json(Draft). Malformed input raises StructureError.
inline Draft draft_from_json(const json& j) {
    try {
        Draft d;
        for (const auto& cj : j.at("clauses")) {
            d.clauses.push_back(clause_from_json(cj));
            auto& ev = d.evidence.emplace_back();
            if (!cj.contains("evidence")) continue;
            for (const auto& e : cj["evidence"]) {
                Evidence x{e.at("exemplar").get<std::size_t>(), e.at("similarity").get<double>(),
                           e.at("fragment").get<std::string>(), {}};
                for (const auto& [k, p] : e.at("polarities").items()) x.polarities[std::stoi(k)] = p.get<int>();
                ev.push_back(std::move(x));
            }
        }
        d.confidence = j.at("confidence").get<double>();
        for (const auto& f : j.at("flags"))
            d.flags.push_back({f.at("clause").get<std::size_t>(), f.at("exemplar").get<std::size_t>(),
                               f.at("concept").get<int>(), f.at("score").get<double>()});
        d.warnings = j.at("warnings").get<std::vector<std::string>>();
        d.review_required = j.at("review_required").get<bool>();
        return d;
    } catch (const json::exception& e) {
        throw StructureError(std::string("draft json: ") + e.what());
    } catch (const std::logic_error& e) {
        throw StructureError(std::string("draft json: ") + e.what());
    }
}

}  // namespace nsmrg
