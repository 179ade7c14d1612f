#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "engshift/common.hpp"
#include "engshift/formula.hpp"
#include "engshift/table.hpp"

namespace engshift {

// ---------------------------------------------------------------------------
// Column-store data frame feeding the model builders. Factors carry an
// explicit level registry so treatment coding and prediction are stable.
// ---------------------------------------------------------------------------

struct FactorColumn {
    std::vector<std::string> levels;
    std::vector<int> codes;
    std::unordered_map<std::string, int> index;

    int level_of(const std::string& name) const {
        auto it = index.find(name);
        return it == index.end() ? -1 : it->second;
    }
};

class DataFrame {
public:
    size_t nrows = 0;

    void add_numeric(const std::string& name, std::vector<double> values) {
        check_size(name, values.size());
        numeric_[name] = std::move(values);
    }

    // levels may be pre-registered to fix their order; new labels append
    void add_factor(const std::string& name, const std::vector<std::string>& values,
                    std::vector<std::string> levels = {}) {
        check_size(name, values.size());
        FactorColumn col;
        col.levels = std::move(levels);
        for (size_t i = 0; i < col.levels.size(); ++i)
            col.index[col.levels[i]] = static_cast<int>(i);
        col.codes.reserve(values.size());
        for (const auto& v : values) {
            auto it = col.index.find(v);
            if (it == col.index.end()) {
                const int code = static_cast<int>(col.levels.size());
                col.levels.push_back(v);
                col.index[v] = code;
                col.codes.push_back(code);
            } else {
                col.codes.push_back(it->second);
            }
        }
        factors_[name] = std::move(col);
    }

    bool has_numeric(const std::string& name) const { return numeric_.contains(name); }
    bool has_factor(const std::string& name) const { return factors_.contains(name); }

    const std::vector<double>& numeric(const std::string& name) const {
        auto it = numeric_.find(name);
        if (it == numeric_.end()) throw SchemaError("no numeric column '" + name + "'");
        return it->second;
    }
    const FactorColumn& factor(const std::string& name) const {
        auto it = factors_.find(name);
        if (it == factors_.end()) throw SchemaError("no factor column '" + name + "'");
        return it->second;
    }

private:
    void check_size(const std::string& name, size_t n) {
        if (nrows == 0 && numeric_.empty() && factors_.empty()) nrows = n;
        if (n != nrows)
            throw SchemaError("column '" + name + "' length mismatch");
    }

    std::map<std::string, std::vector<double>> numeric_;
    std::map<std::string, FactorColumn> factors_;
};

// ---------------------------------------------------------------------------
// Design info: everything needed to rebuild fixed and random design rows for
// new data (prediction, EMM grids).
// ---------------------------------------------------------------------------

namespace design_detail {

struct Atom {
    std::string column;
    bool is_log = false;
    bool is_factor = false;
    std::vector<std::string> levels;  // factor levels frozen at build time
    std::unordered_map<std::string, int> level_index;

    // frozen index of row i's level; levels are matched by name so prediction
    // frames may register levels in any order
    int frozen_level(const DataFrame& df, size_t i) const {
        const auto& col = df.factor(column);
        const std::string& name = col.levels[static_cast<size_t>(col.codes[i])];
        auto it = level_index.find(name);
        if (it == level_index.end())
            throw PredictionError("unseen level '" + name + "' of factor '" + column + "'");
        return it->second;
    }
};

inline Atom resolve_atom(const std::string& atom, const DataFrame& df) {
    Atom a;
    a.is_log = atom.starts_with("log(");
    a.column = a.is_log ? atom.substr(4, atom.size() - 5) : atom;
    if (df.has_factor(a.column)) {
        if (a.is_log) throw ConfigError("log() of factor column '" + a.column + "'");
        a.is_factor = true;
        a.levels = df.factor(a.column).levels;
        for (size_t l = 0; l < a.levels.size(); ++l)
            a.level_index[a.levels[l]] = static_cast<int>(l);
    } else if (!df.has_numeric(a.column)) {
        throw SchemaError("model column '" + a.column + "' not in data");
    }
    return a;
}

// one fixed term expands into >= 0 columns (products of dummies / numerics)
struct TermColumns {
    std::vector<std::string> names;
    // per column, per atom: required factor level (-1 = numeric atom)
    std::vector<std::vector<int>> level_choice;
};

inline TermColumns expand_term(const std::vector<Atom>& atoms, const std::string&) {
    TermColumns out;
    out.names.push_back("");
    out.level_choice.push_back({});
    for (const auto& a : atoms) {
        TermColumns next;
        for (size_t c = 0; c < out.names.size(); ++c) {
            if (a.is_factor) {
                for (size_t l = 1; l < a.levels.size(); ++l) {  // treatment coding
                    std::string nm = out.names[c];
                    if (!nm.empty()) nm += ":";
                    nm += a.column + "[" + a.levels[l] + "]";
                    next.names.push_back(nm);
                    auto lc = out.level_choice[c];
                    lc.push_back(static_cast<int>(l));
                    next.level_choice.push_back(std::move(lc));
                }
            } else {
                std::string nm = out.names[c];
                if (!nm.empty()) nm += ":";
                nm += (a.is_log ? "log(" + a.column + ")" : a.column);
                next.names.push_back(nm);
                auto lc = out.level_choice[c];
                lc.push_back(-1);
                next.level_choice.push_back(std::move(lc));
            }
        }
        out = std::move(next);
    }
    return out;
}

} // namespace design_detail

class FixedDesign {
public:
    FixedDesign() = default;

    FixedDesign(const FormulaSide& side, const DataFrame& df) {
        if (side.intercept) {
            names_.push_back("(Intercept)");
            terms_.push_back({});
        }
        for (const auto& term : side.fixed) {
            std::vector<design_detail::Atom> atoms;
            for (const auto& a : term.atoms) atoms.push_back(design_detail::resolve_atom(a, df));
            auto cols = design_detail::expand_term(atoms, term.name());
            for (size_t c = 0; c < cols.names.size(); ++c) {
                names_.push_back(cols.names[c]);
                TermCol tc;
                for (size_t k = 0; k < atoms.size(); ++k)
                    tc.push_back({atoms[k], cols.level_choice[c][k]});
                terms_.push_back(std::move(tc));
            }
        }
        kept_.resize(names_.size());
        for (size_t i = 0; i < kept_.size(); ++i) kept_[i] = static_cast<long>(i);
    }

    long full_width() const { return static_cast<long>(names_.size()); }
    long width() const { return static_cast<long>(kept_.size()); }

    std::vector<std::string> kept_names() const {
        std::vector<std::string> out;
        for (long k : kept_) out.push_back(names_[static_cast<size_t>(k)]);
        return out;
    }
    std::vector<std::string> dropped_names() const { return dropped_; }
    const std::vector<long>& kept_indices() const { return kept_; }
    const std::vector<std::string>& all_names() const { return names_; }

    // design row before aliased-column dropping
    Eigen::VectorXd full_row(const DataFrame& df, size_t i) const {
        Eigen::VectorXd x(full_width());
        for (size_t c = 0; c < terms_.size(); ++c) x(static_cast<long>(c)) = eval_col(terms_[c], df, i);
        return x;
    }

    Eigen::VectorXd row(const DataFrame& df, size_t i) const {
        const Eigen::VectorXd full = full_row(df, i);
        Eigen::VectorXd x(width());
        for (size_t k = 0; k < kept_.size(); ++k) x(static_cast<long>(k)) = full(kept_[k]);
        return x;
    }

    // restores a serialized kept-column selection by name
    void restrict_to(const std::vector<std::string>& kept_names) {
        kept_.clear();
        dropped_.clear();
        size_t k = 0;
        for (size_t c = 0; c < names_.size(); ++c) {
            if (k < kept_names.size() && names_[c] == kept_names[k]) {
                kept_.push_back(static_cast<long>(c));
                ++k;
            } else {
                dropped_.push_back(names_[c]);
            }
        }
        if (k != kept_names.size())
            throw SchemaError("serialized fit: kept columns do not match the formula expansion");
    }

    // drops aliased columns given representative rows and their weights
    void drop_aliased(const Eigen::MatrixXd& rows, const Eigen::VectorXd& weights) {
        const long p = full_width();
        Eigen::MatrixXd wx = rows;
        for (long r = 0; r < wx.rows(); ++r) wx.row(r) *= std::sqrt(weights(r));
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(wx);
        qr.setThreshold(1e-8);
        const long rank = qr.rank();
        if (rank == p) return;
        std::vector<char> keep(static_cast<size_t>(p), 0);
        const auto& perm = qr.colsPermutation().indices();
        for (long k = 0; k < rank; ++k) keep[static_cast<size_t>(perm(k))] = 1;
        kept_.clear();
        dropped_.clear();
        for (long c = 0; c < p; ++c) {
            if (keep[static_cast<size_t>(c)]) kept_.push_back(c);
            else dropped_.push_back(names_[static_cast<size_t>(c)]);
        }
    }

private:
    struct AtomChoice {
        design_detail::Atom atom;
        int level = -1;  // required level for factors, -1 for numerics
    };
    using TermCol = std::vector<AtomChoice>;

    double eval_col(const TermCol& tc, const DataFrame& df, size_t i) const {
        double v = 1.0;
        for (const auto& ac : tc) {
            if (ac.atom.is_factor) {
                const int code = ac.atom.frozen_level(df, i);
                v *= (code == ac.level) ? 1.0 : 0.0;
                if (v == 0.0) return 0.0;
            } else {
                double x = df.numeric(ac.atom.column)[i];
                if (ac.atom.is_log) {
                    if (!(x > 0.0))
                        throw DomainError("log() of nonpositive value in column '" +
                                          ac.atom.column + "'");
                    x = std::log(x);
                }
                v *= x;
            }
        }
        return v;
    }

    std::vector<std::string> names_;
    std::vector<TermCol> terms_;
    std::vector<long> kept_;
    std::vector<std::string> dropped_;
};

// Random-effect term design: block dimension and per-row design subvector
// (intercept plus slope atoms under treatment coding), with a grouping level
// registry shared between fitting and prediction.
class RandomDesign {
public:
    RandomDesign() = default;

    RandomDesign(const RandomTerm& term, const DataFrame& df) : term_(term) {
        if (term.intercept) coef_names_.push_back("(Intercept)");
        for (const auto& s : term.slopes) {
            auto atom = design_detail::resolve_atom(s, df);
            if (atom.is_factor) {
                for (size_t l = 1; l < atom.levels.size(); ++l)
                    coef_names_.push_back(atom.column + "[" + atom.levels[l] + "]");
            } else {
                coef_names_.push_back(atom.is_log ? "log(" + atom.column + ")" : s);
            }
            atoms_.push_back(std::move(atom));
        }
        if (coef_names_.empty())
            throw ConfigError("random term " + term.name() + " has an empty design");
    }

    int dim() const { return static_cast<int>(coef_names_.size()); }
    const std::vector<std::string>& coef_names() const { return coef_names_; }
    const std::string name() const { return term_.name(); }
    long n_levels() const { return static_cast<long>(level_names_.size()); }
    const std::vector<std::string>& level_names() const { return level_names_; }

    // lookup without registration; throws on unseen grouping levels
    long find_level(const DataFrame& df, size_t i) const {
        std::string key;
        for (const auto& g : term_.grouping) {
            if (!key.empty()) key += ":";
            const auto& col = df.factor(g);
            key += col.levels[static_cast<size_t>(col.codes[i])];
        }
        auto it = level_index_.find(key);
        if (it == level_index_.end())
            throw PredictionError("unseen level '" + key + "' of grouping '" + grouping_name() +
                                  "'");
        return it->second;
    }

    // grouping level of row i; registers new levels only when allowed
    long level(const DataFrame& df, size_t i, bool allow_new) {
        std::string key;
        for (const auto& g : term_.grouping) {
            if (!key.empty()) key += ":";
            const auto& col = df.factor(g);
            key += col.levels[static_cast<size_t>(col.codes[i])];
        }
        auto it = level_index_.find(key);
        if (it != level_index_.end()) return it->second;
        if (!allow_new)
            throw PredictionError("unseen level '" + key + "' of grouping '" +
                                  grouping_name() + "'");
        const long idx = static_cast<long>(level_names_.size());
        level_names_.push_back(key);
        level_index_.emplace(std::move(key), idx);
        return idx;
    }

    Eigen::VectorXd design_row(const DataFrame& df, size_t i) const {
        Eigen::VectorXd w(dim());
        int c = 0;
        if (term_.intercept) w(c++) = 1.0;
        for (const auto& atom : atoms_) {
            if (atom.is_factor) {
                const int code = atom.frozen_level(df, i);
                for (size_t l = 1; l < atom.levels.size(); ++l)
                    w(c++) = (code == static_cast<int>(l)) ? 1.0 : 0.0;
            } else {
                double x = df.numeric(atom.column)[i];
                if (atom.is_log) x = std::log(x);
                w(c++) = x;
            }
        }
        return w;
    }

    std::string grouping_name() const {
        std::string g = term_.grouping.empty() ? "" : term_.grouping[0];
        for (size_t i = 1; i < term_.grouping.size(); ++i) g += ":" + term_.grouping[i];
        return g;
    }

private:
    RandomTerm term_;
    std::vector<design_detail::Atom> atoms_;
    std::vector<std::string> coef_names_;
    std::vector<std::string> level_names_;
    std::unordered_map<std::string, long> level_index_;
};

// ---------------------------------------------------------------------------
// Model frame construction from the post table
// ---------------------------------------------------------------------------

// Epoch labels: -1 drops the row (no epoch assignment). Quality levels are
// registered in a fixed order so "low" is always the reference.
inline DataFrame model_frame_from_posts(const PostTable& posts, const OutletDirectory& outlets,
                                        const std::vector<int>* epoch_labels = nullptr) {
    std::unordered_map<std::string, const OutletMeta*> meta;
    for (const auto& o : outlets.outlets) meta[o.outlet_id] = &o;
    std::vector<double> y, n_posts;
    std::vector<std::string> quality, outlet, day, epoch, post_type;
    for (size_t i = 0; i < posts.records.size(); ++i) {
        const auto& r = posts.records[i];
        if (!r.reactions) continue;
        if (epoch_labels && (*epoch_labels)[i] < 0) continue;
        auto it = meta.find(r.outlet_id);
        if (it == meta.end()) throw SchemaError("post references unknown outlet: " + r.outlet_id);
        y.push_back(static_cast<double>(*r.reactions));
        n_posts.push_back(it->second->mean_posts);
        quality.push_back(to_string(it->second->quality));
        outlet.push_back(r.outlet_id);
        day.push_back(format_date(r.published_at.day));
        post_type.push_back(to_string(r.post_type));
        if (epoch_labels) epoch.push_back(std::to_string((*epoch_labels)[i]));
    }
    DataFrame df;
    df.add_numeric("reactions", std::move(y));
    df.add_numeric("n_posts", std::move(n_posts));
    df.add_factor("quality", quality, {"low", "medium", "high", "non_news"});
    df.add_factor("outlet", outlet);
    df.add_factor("day", day);
    df.add_factor("post_type", post_type);
    if (epoch_labels) {
        int max_e = 0;
        for (const auto& e : epoch) max_e = std::max(max_e, std::stoi(e));
        std::vector<std::string> levels;
        for (int e = 0; e <= max_e; ++e) levels.push_back(std::to_string(e));
        df.add_factor("epoch", epoch, levels);
    }
    return df;
}

} // namespace engshift
