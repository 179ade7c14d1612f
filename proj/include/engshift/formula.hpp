#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "engshift/common.hpp"

namespace engshift {

enum class Parametrization { nb1_linear, nb2_quadratic, gaussian_ar1 };

inline std::string to_string(Parametrization p) {
    switch (p) {
        case Parametrization::nb1_linear: return "nb1_linear";
        case Parametrization::nb2_quadratic: return "nb2_quadratic";
        case Parametrization::gaussian_ar1: return "gaussian_ar1";
    }
    return "nb1_linear";
}

inline Parametrization parse_parametrization(const std::string& s) {
    if (s == "nb1_linear" || s == "nb1" || s == "NB1") return Parametrization::nb1_linear;
    if (s == "nb2_quadratic" || s == "nb2" || s == "NB2") return Parametrization::nb2_quadratic;
    if (s == "gaussian_ar1" || s == "ar1") return Parametrization::gaussian_ar1;
    throw ConfigError("unknown parametrization: " + s);
}

// A fixed-effect term is a product of atoms, e.g. {"quality"} or
// {"quality","epoch"}; an atom is a column name or log(column).
struct FixedTerm {
    std::vector<std::string> atoms;  // empty = intercept

    std::string name() const {
        if (atoms.empty()) return "1";
        std::string s = atoms[0];
        for (size_t i = 1; i < atoms.size(); ++i) s += ":" + atoms[i];
        return s;
    }
    friend bool operator==(const FixedTerm&, const FixedTerm&) = default;
};

struct RandomTerm {
    bool intercept = true;
    std::vector<std::string> slopes;    // factor/numeric atoms beside the intercept
    std::vector<std::string> grouping;  // colon-joined grouping columns

    std::string name() const {
        std::string lhs = intercept ? "1" : "0";
        for (const auto& s : slopes) lhs += "+" + s;
        std::string g = grouping.empty() ? "" : grouping[0];
        for (size_t i = 1; i < grouping.size(); ++i) g += ":" + grouping[i];
        return "(" + lhs + "|" + g + ")";
    }
};

struct FormulaSide {
    bool intercept = true;
    std::vector<FixedTerm> fixed;  // excluding the intercept
    std::vector<RandomTerm> random;
};

struct FormulaSpec {
    FormulaSide mean;
    FormulaSide dispersion;
    Parametrization parametrization = Parametrization::nb1_linear;
};

namespace detail {

inline std::string strip_ws(const std::string& s) {
    std::string out;
    for (char c : s)
        if (c != ' ' && c != '\t' && c != '\n') out.push_back(c);
    return out;
}

inline std::vector<std::string> split_top(const std::string& s, char sep) {
    std::vector<std::string> out;
    int depth = 0;
    std::string cur;
    for (char c : s) {
        if (c == '(') ++depth;
        if (c == ')') --depth;
        if (c == sep && depth == 0) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline bool valid_atom(const std::string& a) {
    if (a.empty()) return false;
    if (a.starts_with("log(") && a.back() == ')') return valid_atom(a.substr(4, a.size() - 5));
    for (char c : a)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) return false;
    return true;
}

} // namespace detail

// Parses one model side written in the mixed-model mini-language, e.g.
//   "quality*epoch + (1|outlet) + (1|outlet:epoch) + (1+quality|year:month:day)"
// '*' expands to main effects plus interactions; an intercept is implicit
// unless a bare "0" term is present.
inline FormulaSide parse_formula(const std::string& text) {
    FormulaSide side;
    const std::string s = detail::strip_ws(text);
    if (s.empty() || s == "1") return side;
    auto add_fixed = [&](const FixedTerm& t) {
        if (std::find(side.fixed.begin(), side.fixed.end(), t) == side.fixed.end())
            side.fixed.push_back(t);
    };
    for (const std::string& chunk : detail::split_top(s, '+')) {
        if (chunk.empty()) throw ConfigError("formula: empty term in '" + text + "'");
        if (chunk == "1") continue;
        if (chunk == "0" || chunk == "-1") {
            side.intercept = false;
            continue;
        }
        if (chunk.front() == '(' && chunk.back() == ')' &&
            chunk.find('|') != std::string::npos) {
            const std::string inner = chunk.substr(1, chunk.size() - 2);
            const auto bar = inner.find('|');
            RandomTerm rt;
            for (const std::string& a : detail::split_top(inner.substr(0, bar), '+')) {
                if (a == "1") rt.intercept = true;
                else if (a == "0") rt.intercept = false;
                else if (detail::valid_atom(a)) rt.slopes.push_back(a);
                else throw ConfigError("formula: bad random-effect design atom '" + a + "'");
            }
            for (const std::string& g : detail::split_top(inner.substr(bar + 1), ':')) {
                if (!detail::valid_atom(g))
                    throw ConfigError("formula: bad grouping factor '" + g + "'");
                rt.grouping.push_back(g);
            }
            if (rt.grouping.empty())
                throw ConfigError("formula: random term without grouping factor");
            side.random.push_back(std::move(rt));
            continue;
        }
        // fixed-effect chunk: '*' products expand to all non-empty subsets
        std::vector<std::vector<std::string>> groups;
        for (const std::string& part : detail::split_top(chunk, '*')) {
            std::vector<std::string> atoms;
            for (const std::string& a : detail::split_top(part, ':')) {
                if (!detail::valid_atom(a))
                    throw ConfigError("formula: bad term atom '" + a + "' in '" + text + "'");
                atoms.push_back(a);
            }
            groups.push_back(std::move(atoms));
        }
        const size_t g = groups.size();
        std::vector<std::vector<size_t>> subsets;
        for (size_t mask = 1; mask < (size_t{1} << g); ++mask) {
            std::vector<size_t> sel;
            for (size_t b = 0; b < g; ++b)
                if (mask & (size_t{1} << b)) sel.push_back(b);
            subsets.push_back(std::move(sel));
        }
        std::sort(subsets.begin(), subsets.end(), [](const auto& a, const auto& b) {
            if (a.size() != b.size()) return a.size() < b.size();
            return a < b;
        });
        for (const auto& sel : subsets) {
            FixedTerm t;
            for (size_t b : sel)
                for (const auto& a : groups[b]) t.atoms.push_back(a);
            add_fixed(t);
        }
    }
    return side;
}

inline std::string format_formula(const FormulaSide& side) {
    std::string s = side.intercept ? "1" : "0";
    for (const auto& t : side.fixed) s += " + " + t.name();
    for (const auto& r : side.random) s += " + " + r.name();
    return s;
}

} // namespace engshift
