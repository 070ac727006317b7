#pragma once

// Soft-logic algebra over [0,1] and rule trees built from it.
//
// Default family is product t-norm / probabilistic sum / complement. Internal
// BLEND nodes mix conjunction and disjunction with a learnable gate
//   node(u, v; a) = a * AND(u, v) + (1 - a) * OR(u, v),
// where a = sigmoid(raw) and raw is the unconstrained optimizer parameter.

#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nsmrg/core.hpp"

namespace nsmrg {

enum class OpKind { Leaf, And, Or, Not, Blend };

enum class OperatorFamily { Product, MinMax, Lukasiewicz, Godel };

inline const char* to_string(OperatorFamily f) {
    switch (f) {
        case OperatorFamily::Product: return "product";
        case OperatorFamily::MinMax: return "minmax";
        case OperatorFamily::Lukasiewicz: return "lukasiewicz";
        case OperatorFamily::Godel: return "godel";
    }
    return "?";
}

inline OperatorFamily parse_operator_family(std::string_view s) {
    if (s == "product") return OperatorFamily::Product;
    if (s == "minmax") return OperatorFamily::MinMax;
    if (s == "lukasiewicz") return OperatorFamily::Lukasiewicz;
    if (s == "godel") return OperatorFamily::Godel;
    throw ConfigError("unknown operator family '" + std::string(s) + "'");
}

struct LogicOperator {
    OpKind kind = OpKind::And;
    double alpha = 0.5;  // BLEND only
};

inline constexpr double kDomainSlack = 1e-9;

inline void check_unit(double x, const char* what) {
    if (!(x >= -kDomainSlack && x <= 1.0 + kDomainSlack))
        throw DomainError(std::string(what) + ": value " + std::to_string(x) + " outside [0,1]");
}

/// Value and partial derivatives of a binary family operator. Non-smooth
/// families take the first (left) branch at ties.
struct BinaryEval {
    double value;
    double d_a;
    double d_b;
};

inline BinaryEval t_norm(OperatorFamily f, double a, double b) {
    switch (f) {
        case OperatorFamily::Product: return {a * b, b, a};
        case OperatorFamily::MinMax:
        case OperatorFamily::Godel: return a <= b ? BinaryEval{a, 1.0, 0.0} : BinaryEval{b, 0.0, 1.0};
        case OperatorFamily::Lukasiewicz: {
            const double s = a + b - 1.0;
            return s > 0.0 ? BinaryEval{s, 1.0, 1.0} : BinaryEval{0.0, 0.0, 0.0};
        }
    }
    return {0, 0, 0};
}

inline BinaryEval t_conorm(OperatorFamily f, double a, double b) {
    switch (f) {
        // 1-(1-a)(1-b) rather than a+b-ab: with exact complements this keeps
        // OR(1,x)=1 and De Morgan bitwise exact.
        case OperatorFamily::Product: return {1.0 - (1.0 - a) * (1.0 - b), 1.0 - b, 1.0 - a};
        case OperatorFamily::MinMax:
        case OperatorFamily::Godel: return a >= b ? BinaryEval{a, 1.0, 0.0} : BinaryEval{b, 0.0, 1.0};
        case OperatorFamily::Lukasiewicz: {
            const double s = a + b;
            return s < 1.0 ? BinaryEval{s, 1.0, 1.0} : BinaryEval{1.0, 0.0, 0.0};
        }
    }
    return {0, 0, 0};
}

/// Negation value and derivative. Godel uses the intuitionistic negation.
inline std::pair<double, double> negate(OperatorFamily f, double a) {
    if (f == OperatorFamily::Godel) return {a == 0.0 ? 1.0 : 0.0, 0.0};
    return {1.0 - a, -1.0};
}

inline double node_blend(double u, double v, double alpha, OperatorFamily f = OperatorFamily::Product) {
    check_unit(u, "node_blend");
    check_unit(v, "node_blend");
    check_unit(alpha, "node_blend alpha");
    return alpha * t_norm(f, u, v).value + (1.0 - alpha) * t_conorm(f, u, v).value;
}

/// d node / d alpha = AND(u,v) - OR(u,v); for the product family 2uv - u - v.
inline double node_blend_dalpha(double u, double v, OperatorFamily f = OperatorFamily::Product) {
    return t_norm(f, u, v).value - t_conorm(f, u, v).value;
}

inline double apply_operator(LogicOperator op, double a, std::optional<double> b = std::nullopt,
                             OperatorFamily f = OperatorFamily::Product) {
    check_unit(a, "apply_operator");
    if (op.kind == OpKind::Not) {
        if (b) throw ArgumentError("apply_operator: NOT takes one argument");
        return negate(f, a).first;
    }
    if (op.kind == OpKind::Leaf) throw ArgumentError("apply_operator: leaf is not an operator");
    if (!b) throw ArgumentError("apply_operator: binary operator needs two arguments");
    check_unit(*b, "apply_operator");
    switch (op.kind) {
        case OpKind::And: return t_norm(f, a, *b).value;
        case OpKind::Or: return t_conorm(f, a, *b).value;
        case OpKind::Blend: return node_blend(a, *b, op.alpha, f);
        default: break;
    }
    throw ArgumentError("apply_operator: bad operator");
}

// ---------------------------------------------------------------------------
// Rule trees.
// ---------------------------------------------------------------------------

inline constexpr double kGateClamp = 1e-12;

inline double gate_raw_from_alpha(double alpha) { return logit(std::clamp(alpha, kGateClamp, 1.0 - kGateClamp)); }

struct RuleNode {
    OpKind kind = OpKind::Leaf;
    int concept_index = -1;  // Leaf
    int left = -1;           // child node indices (Not uses left only)
    int right = -1;
    int gate = -1;  // Blend: index into RuleTree::gates
};

/// Binary soft-logic tree. Nodes are stored children-before-parents; the
/// last node is the root. Gates hold unconstrained logits.
struct RuleTree {
    std::string id;
    std::string name;
    std::vector<RuleNode> nodes;
    Tensor gates{1, 0};
    OperatorFamily family = OperatorFamily::Product;

    int root() const { return static_cast<int>(nodes.size()) - 1; }
    std::size_t gate_count() const { return gates.cols; }
    double alpha(std::size_t g) const { return sigmoid(gates.data[g]); }

    // Builders return the new node index.
    int leaf(int concept_index) { return push({OpKind::Leaf, concept_index, -1, -1, -1}); }
    int not_(int child) { return push({OpKind::Not, -1, child, -1, -1}); }
    int and_(int a, int b) { return push({OpKind::And, -1, a, b, -1}); }
    int or_(int a, int b) { return push({OpKind::Or, -1, a, b, -1}); }
    int blend(int a, int b, double alpha0) {
        gates.data.push_back(gate_raw_from_alpha(alpha0));
        gates.cols = gates.data.size();
        gates.rows = 1;
        return push({OpKind::Blend, -1, a, b, static_cast<int>(gates.cols) - 1});
    }

    std::vector<int> leaf_concepts() const {
        std::vector<int> out;
        for (const auto& n : nodes)
            if (n.kind == OpKind::Leaf) out.push_back(n.concept_index);
        return out;
    }

    bool has_not() const {
        return std::any_of(nodes.begin(), nodes.end(), [](const RuleNode& n) { return n.kind == OpKind::Not; });
    }

    /// Structural validation against a concept count.
    void validate(std::size_t concept_count) const {
        if (nodes.empty()) throw StructureError("rule " + id + ": empty tree");
        std::vector<int> parents(nodes.size(), 0);
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const auto& n = nodes[i];
            auto child_ok = [&](int c) { return c >= 0 && static_cast<std::size_t>(c) < i; };
            switch (n.kind) {
                case OpKind::Leaf:
                    if (n.concept_index < 0 || static_cast<std::size_t>(n.concept_index) >= concept_count)
                        throw StructureError("rule " + id + ": leaf references concept " +
                                             std::to_string(n.concept_index) + " but K=" +
                                             std::to_string(concept_count));
                    break;
                case OpKind::Not:
                    if (!child_ok(n.left)) throw StructureError("rule " + id + ": dangling NOT child");
                    ++parents[n.left];
                    break;
                case OpKind::Blend:
                    if (n.gate < 0 || static_cast<std::size_t>(n.gate) >= gate_count())
                        throw StructureError("rule " + id + ": blend node without gate");
                    [[fallthrough]];
                case OpKind::And:
                case OpKind::Or:
                    if (!child_ok(n.left) || !child_ok(n.right))
                        throw StructureError("rule " + id + ": dangling binary child");
                    ++parents[n.left];
                    ++parents[n.right];
                    break;
            }
        }
        for (std::size_t i = 0; i + 1 < nodes.size(); ++i)
            if (parents[i] != 1) throw StructureError("rule " + id + ": node " + std::to_string(i) + " is not a tree node");
    }

private:
    int push(RuleNode n) {
        nodes.push_back(n);
        return static_cast<int>(nodes.size()) - 1;
    }
};

struct RuleEvalCache {
    Vec values;  // per node
    std::uint64_t input_hash = 0;
};

inline std::uint64_t rule_input_hash(const RuleTree& t, std::span<const double> concepts) {
    return fnv1a(std::span<const double>(t.gates.data), fnv1a(concepts));
}

/// Bottom-up evaluation; node values land in `cache` for backprop and explanations.
inline double eval_rule_tree(const RuleTree& t, std::span<const double> concepts, RuleEvalCache* cache = nullptr) {
    if (t.nodes.empty()) throw StructureError("rule " + t.id + ": empty tree");
    Vec vals(t.nodes.size());
    for (std::size_t i = 0; i < t.nodes.size(); ++i) {
        const auto& n = t.nodes[i];
        switch (n.kind) {
            case OpKind::Leaf: {
                if (n.concept_index < 0 || static_cast<std::size_t>(n.concept_index) >= concepts.size())
                    throw StructureError("rule " + t.id + ": dangling leaf index " + std::to_string(n.concept_index));
                const double c = concepts[n.concept_index];
                check_unit(c, "eval_rule_tree");
                vals[i] = std::clamp(c, 0.0, 1.0);
                break;
            }
            case OpKind::Not: vals[i] = negate(t.family, vals[n.left]).first; break;
            case OpKind::And: vals[i] = t_norm(t.family, vals[n.left], vals[n.right]).value; break;
            case OpKind::Or: vals[i] = t_conorm(t.family, vals[n.left], vals[n.right]).value; break;
            case OpKind::Blend: {
                const double a = t.alpha(n.gate);
                const double u = vals[n.left];
                const double v = vals[n.right];
                vals[i] = a * t_norm(t.family, u, v).value + (1.0 - a) * t_conorm(t.family, u, v).value;
                break;
            }
        }
    }
    const double out = vals.back();
    if (cache) {
        cache->values = std::move(vals);
        cache->input_hash = rule_input_hash(t, concepts);
    }
    return out;
}

struct RuleGradient {
    Vec d_concepts;  // K
    Vec d_alpha;     // per gate, w.r.t. alpha
    Vec d_raw;       // per gate, w.r.t. the raw logit
};

/// Exact reverse pass. `concepts` must be the input the cache was built from.
inline RuleGradient backprop_rule_tree(const RuleTree& t, const RuleEvalCache& cache, double upstream,
                                       std::span<const double> concepts) {
    if (cache.values.size() != t.nodes.size() || cache.input_hash != rule_input_hash(t, concepts))
        throw ConsistencyError("backprop_rule_tree: cache of rule " + t.id + " is stale");
    RuleGradient g{Vec(concepts.size(), 0.0), Vec(t.gate_count(), 0.0), Vec(t.gate_count(), 0.0)};
    Vec adj(t.nodes.size(), 0.0);
    adj.back() = upstream;
    const auto& vals = cache.values;
    for (std::size_t ii = t.nodes.size(); ii-- > 0;) {
        const auto& n = t.nodes[ii];
        const double up = adj[ii];
        switch (n.kind) {
            case OpKind::Leaf: g.d_concepts[n.concept_index] += up; break;
            case OpKind::Not: adj[n.left] += up * negate(t.family, vals[n.left]).second; break;
            case OpKind::And: {
                const auto e = t_norm(t.family, vals[n.left], vals[n.right]);
                adj[n.left] += up * e.d_a;
                adj[n.right] += up * e.d_b;
                break;
            }
            case OpKind::Or: {
                const auto e = t_conorm(t.family, vals[n.left], vals[n.right]);
                adj[n.left] += up * e.d_a;
                adj[n.right] += up * e.d_b;
                break;
            }
            case OpKind::Blend: {
                const double a = t.alpha(n.gate);
                const auto tn = t_norm(t.family, vals[n.left], vals[n.right]);
                const auto tc = t_conorm(t.family, vals[n.left], vals[n.right]);
                adj[n.left] += up * (a * tn.d_a + (1.0 - a) * tc.d_a);
                adj[n.right] += up * (a * tn.d_b + (1.0 - a) * tc.d_b);
                const double da = up * (tn.value - tc.value);
                g.d_alpha[n.gate] += da;
                g.d_raw[n.gate] += da * a * (1.0 - a);
                break;
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Hardening with a straight-through backward contract.
// ---------------------------------------------------------------------------

struct HardConceptMask {
    std::vector<std::uint8_t> bits;
    double threshold = 0.5;

    Vec as_values() const { return Vec(bits.begin(), bits.end()); }
};

inline HardConceptMask harden(std::span<const double> concepts, double threshold = 0.5) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ArgumentError("harden: threshold must lie in (0,1)");
    HardConceptMask m{std::vector<std::uint8_t>(concepts.size()), threshold};
    for (std::size_t k = 0; k < concepts.size(); ++k) m.bits[k] = concepts[k] >= threshold ? 1 : 0;
    return m;
}

/// Backward of harden: the upstream gradient passes through unchanged.
inline Vec harden_backward(std::span<const double> upstream) { return Vec(upstream.begin(), upstream.end()); }

/// Rule indices sorted by activation descending, ties by ascending index.
inline std::vector<std::size_t> top_h_rules(std::span<const double> activations, std::size_t h) {
    if (h < 1 || h > activations.size())
        throw ArgumentError("top_h_rules: H=" + std::to_string(h) + " outside [1," + std::to_string(activations.size()) + "]");
    std::vector<std::size_t> idx(activations.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return activations[a] > activations[b]; });
    idx.resize(h);
    return idx;
}

// ---------------------------------------------------------------------------
// Rule library file.
//
//   nsmrg-rules 1
//   concepts effusion left right ...
//   # id | name | formula | templates | slot bindings
//   R1 | pleural_effusion | effusion BLEND(0.5) NOT pneumothorax | T01,T02 | laterality=left>left,right>right; size=@effusion_size
//
// Formula grammar (binary operators share one precedence, left-associative):
//   expr  := unary (binop unary)*
//   unary := NOT unary | '(' expr ')' | concept
//   binop := AND | OR | BLEND(number)
// ---------------------------------------------------------------------------

inline constexpr int kRuleLibraryVersion = 1;

/// How a clause slot is bound: categorical slots pick among concept-backed
/// values, numeric slots read a named regressor.
struct SlotBinding {
    std::string slot;
    std::vector<std::pair<int, std::string>> concept_values;
    std::string regressor;

    bool numeric() const { return !regressor.empty(); }
};

struct RuleEntry {
    RuleTree tree;
    std::vector<std::string> templates;
    std::vector<SlotBinding> slots;
    std::string formula_text;
};

struct RuleLibrary {
    std::vector<std::string> concepts;
    std::vector<RuleEntry> rules;

    std::size_t size() const { return rules.size(); }

    int concept_index(std::string_view name) const {
        for (std::size_t i = 0; i < concepts.size(); ++i)
            if (concepts[i] == name) return static_cast<int>(i);
        return -1;
    }

    void set_family(OperatorFamily f) {
        for (auto& r : rules) r.tree.family = f;
    }

    std::vector<std::string> regressors() const {
        std::vector<std::string> out;
        for (const auto& r : rules)
            for (const auto& s : r.slots)
                if (s.numeric() && std::find(out.begin(), out.end(), s.regressor) == out.end()) out.push_back(s.regressor);
        return out;
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == sep) {
            out.emplace_back(s.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

class FormulaParser {
public:
    FormulaParser(std::string_view text, const RuleLibrary& lib, RuleTree& tree, std::size_t line, std::size_t col0)
        : text_(text), lib_(lib), tree_(tree), line_(line), col0_(col0) {}

    void parse() {
        skip_ws();
        if (pos_ >= text_.size()) fail("empty formula");
        parse_expr();
        skip_ws();
        if (pos_ != text_.size()) fail("unexpected '" + std::string(1, text_[pos_]) + "'");
    }

private:
    [[noreturn]] void fail(const std::string& msg, std::size_t at = std::string::npos) const {
        throw ParseError(line_, col0_ + (at == std::string::npos ? pos_ : at), msg);
    }

    void skip_ws() {
        while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t')) ++pos_;
    }

    std::string_view peek_word() const {
        std::size_t e = pos_;
        while (e < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[e])) || text_[e] == '_')) ++e;
        return text_.substr(pos_, e - pos_);
    }

    int parse_expr() {
        int lhs = parse_unary();
        while (true) {
            skip_ws();
            if (pos_ >= text_.size() || text_[pos_] == ')') return lhs;
            const std::size_t op_at = pos_;
            const auto word = peek_word();
            if (word == "AND") {
                pos_ += 3;
                lhs = tree_.and_(lhs, parse_unary());
            } else if (word == "OR") {
                pos_ += 2;
                lhs = tree_.or_(lhs, parse_unary());
            } else if (word == "BLEND") {
                pos_ += 5;
                const double a0 = parse_alpha();
                const int rhs = parse_unary();
                lhs = tree_.blend(lhs, rhs, a0);
            } else {
                fail("expected AND, OR or BLEND(alpha)", op_at);
            }
        }
    }

    double parse_alpha() {
        skip_ws();
        if (pos_ >= text_.size() || text_[pos_] != '(') fail("expected '(' after BLEND");
        ++pos_;
        skip_ws();
        const std::size_t start = pos_;
        while (pos_ < text_.size() && (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.' ||
                                       text_[pos_] == 'e' || text_[pos_] == '-' || text_[pos_] == '+'))
            ++pos_;
        double a = 0.0;
        const auto res = std::from_chars(text_.data() + start, text_.data() + pos_, a);
        if (res.ec != std::errc() || res.ptr != text_.data() + pos_) fail("bad BLEND weight", start);
        if (!(a >= 0.0 && a <= 1.0)) fail("BLEND weight must lie in [0,1]", start);
        skip_ws();
        if (pos_ >= text_.size() || text_[pos_] != ')') fail("expected ')' after BLEND weight");
        ++pos_;
        return a;
    }

    int parse_unary() {
        skip_ws();
        if (pos_ >= text_.size()) fail("unexpected end of formula");
        if (text_[pos_] == '(') {
            ++pos_;
            const int inner = parse_expr();
            skip_ws();
            if (pos_ >= text_.size() || text_[pos_] != ')') fail("expected ')'");
            ++pos_;
            return inner;
        }
        const std::size_t at = pos_;
        const auto word = peek_word();
        if (word.empty()) fail("unexpected '" + std::string(1, text_[pos_]) + "'");
        if (word == "NOT") {
            pos_ += 3;
            return tree_.not_(parse_unary());
        }
        if (word == "AND" || word == "OR" || word == "BLEND") fail("operator '" + std::string(word) + "' without left operand");
        const int idx = lib_.concept_index(word);
        if (idx < 0) fail("unknown concept '" + std::string(word) + "'", at);
        pos_ += word.size();
        return tree_.leaf(idx);
    }

    std::string_view text_;
    const RuleLibrary& lib_;
    RuleTree& tree_;
    std::size_t line_;
    std::size_t col0_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline RuleLibrary parse_rule_library(std::string_view text) {
    RuleLibrary lib;
    std::size_t line_no = 0;
    bool saw_header = false;
    bool saw_concepts = false;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        const std::string_view raw = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        const std::string line = detail::trim(raw);
        if (line.empty() || line[0] == '#') {
            if (end == text.size()) break;
            continue;
        }
        if (!saw_header) {
            std::istringstream hs(line);
            std::string magic;
            int version = 0;
            hs >> magic >> version;
            if (magic != "nsmrg-rules") throw ParseError(line_no, 1, "missing 'nsmrg-rules' header");
            if (version != kRuleLibraryVersion)
                throw VersionError("rule library version " + std::to_string(version) + " unsupported (expected " +
                                   std::to_string(kRuleLibraryVersion) + ")");
            saw_header = true;
        } else if (!saw_concepts) {
            std::istringstream cs(line);
            std::string kw;
            cs >> kw;
            if (kw != "concepts") throw ParseError(line_no, 1, "expected 'concepts' line");
            for (std::string c; cs >> c;) {
                if (lib.concept_index(c) >= 0) throw ParseError(line_no, 1, "duplicate concept '" + c + "'");
                lib.concepts.push_back(c);
            }
            if (lib.concepts.empty()) throw ParseError(line_no, 1, "no concepts declared");
            saw_concepts = true;
        } else {
            const auto fields = detail::split(raw, '|');
            if (fields.size() < 4 || fields.size() > 5)
                throw ParseError(line_no, 1, "expected 'id | name | formula | templates [| slots]'");
            RuleEntry e;
            e.tree.id = detail::trim(fields[0]);
            e.tree.name = detail::trim(fields[1]);
            if (e.tree.id.empty()) throw ParseError(line_no, 1, "empty rule id");
            for (const auto& r : lib.rules)
                if (r.tree.id == e.tree.id) throw ParseError(line_no, 1, "duplicate rule id '" + e.tree.id + "'");
            const std::size_t formula_col = fields[0].size() + fields[1].size() + 3;  // 1-based column of field 3
            e.formula_text = detail::trim(fields[2]);
            const std::size_t lead = fields[2].find_first_not_of(" \t");
            detail::FormulaParser(e.formula_text, lib, e.tree, line_no,
                                  formula_col + (lead == std::string::npos ? 0 : lead))
                .parse();
            for (const auto& t : detail::split(fields[3], ',')) {
                const auto id = detail::trim(t);
                if (!id.empty()) e.templates.push_back(id);
            }
            if (e.templates.empty()) throw LibraryError("rule " + e.tree.id + " maps to no template");
            if (fields.size() == 5) {
                for (const auto& part : detail::split(fields[4], ';')) {
                    const auto spec = detail::trim(part);
                    if (spec.empty()) continue;
                    const auto eq = spec.find('=');
                    if (eq == std::string::npos) throw ParseError(line_no, 1, "slot binding without '=': " + spec);
                    SlotBinding b;
                    b.slot = detail::trim(spec.substr(0, eq));
                    const auto rhs = detail::trim(spec.substr(eq + 1));
                    if (!rhs.empty() && rhs[0] == '@') {
                        b.regressor = rhs.substr(1);
                    } else {
                        for (const auto& cv : detail::split(rhs, ',')) {
                            const auto gt = cv.find('>');
                            if (gt == std::string::npos) throw ParseError(line_no, 1, "expected concept>value in " + spec);
                            const auto cname = detail::trim(cv.substr(0, gt));
                            const int ci = lib.concept_index(cname);
                            if (ci < 0) {
                                const auto col = std::string_view(raw).find(cname);
                                throw ParseError(line_no, col == std::string::npos ? 1 : col + 1,
                                                 "unknown concept '" + cname + "'");
                            }
                            b.concept_values.emplace_back(ci, detail::trim(cv.substr(gt + 1)));
                        }
                    }
                    e.slots.push_back(std::move(b));
                }
            }
            e.tree.validate(lib.concepts.size());
            lib.rules.push_back(std::move(e));
        }
        if (end == text.size()) break;
    }
    if (!saw_header) throw ParseError(1, 1, "missing 'nsmrg-rules' header");
    if (!saw_concepts) throw ParseError(line_no, 1, "missing 'concepts' line");
    if (lib.rules.empty()) throw LibraryError("rule library declares no rules");
    return lib;
}

inline RuleLibrary load_rule_library(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LibraryError("cannot open rule library " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_rule_library(ss.str());
}

/// Infix rendering with current gate values, for explanations.
inline std::string render_formula(const RuleTree& t, const std::vector<std::string>& concepts, int node = -1) {
    if (node < 0) node = t.root();
    const auto& n = t.nodes[node];
    auto child = [&](int c) {
        const auto& cn = t.nodes[c];
        const auto s = render_formula(t, concepts, c);
        return (cn.kind == OpKind::Leaf || cn.kind == OpKind::Not) ? s : "(" + s + ")";
    };
    switch (n.kind) {
        case OpKind::Leaf: return concepts.at(n.concept_index);
        case OpKind::Not: return "NOT " + child(n.left);
        case OpKind::And: return child(n.left) + " AND " + child(n.right);
        case OpKind::Or: return child(n.left) + " OR " + child(n.right);
        case OpKind::Blend: {
            std::ostringstream os;
            os.precision(3);
            os << child(n.left) << " BLEND(" << t.alpha(n.gate) << ") " << child(n.right);
            return os.str();
        }
    }
    return {};
}

}  // namespace nsmrg
