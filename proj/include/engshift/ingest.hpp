#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "engshift/csv.hpp"
#include "engshift/linreg.hpp"
#include "engshift/table.hpp"

namespace engshift {

// ---------------------------------------------------------------------------
// Text normalization for duplicate keys: Unicode-lowercase, then strip every
// non-alphanumeric code point. Lowercasing covers ASCII, Latin-1, Latin
// Extended-A, Greek and Cyrillic; code points from other scripts pass through
// unchanged (they have no case or we do not fold them), which keeps the
// mapping idempotent.
// ---------------------------------------------------------------------------

namespace detail {

inline char32_t lower_cp(char32_t c) {
    if (c >= U'A' && c <= U'Z') return c + 32;
    if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 32;       // Latin-1
    if (c >= 0x100 && c <= 0x137 && (c % 2 == 0)) return c + 1;   // Latin Ext-A pairs
    if (c >= 0x139 && c <= 0x148 && (c % 2 == 1)) return c + 1;
    if (c >= 0x14A && c <= 0x177 && (c % 2 == 0)) return c + 1;
    if (c == 0x178) return 0xFF;
    if (c >= 0x179 && c <= 0x17E && (c % 2 == 1)) return c + 1;
    if (c >= 0x391 && c <= 0x3A9 && c != 0x3A2) return c + 32;    // Greek
    if (c >= 0x410 && c <= 0x42F) return c + 32;                  // Cyrillic
    if (c >= 0x400 && c <= 0x40F) return c + 80;
    return c;
}

inline bool is_alnum_cp(char32_t c) {
    if (c < 0x80)
        return (c >= U'0' && c <= U'9') || (c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z');
    // Latin-1 punctuation/symbol block, except the letters within it
    if (c <= 0xBF) return c == 0xAA || c == 0xB5 || c == 0xBA;
    if (c == 0xD7 || c == 0xF7) return false;
    // general punctuation, arrows, math/technical symbols, dingbats
    if (c >= 0x2000 && c <= 0x2BFF) return false;
    if (c >= 0x3000 && c <= 0x303F) return false;  // CJK punctuation
    if (c >= 0xFE00 && c <= 0xFE0F) return false;  // variation selectors
    if (c >= 0xFF01 && c <= 0xFF0F) return false;  // fullwidth punctuation
    if (c >= 0x1F000) return false;                // emoji and symbol planes
    return true;  // letters and digits of other scripts
}

// Decodes UTF-8; invalid bytes are treated as Latin-1 so normalization never
// throws on dirty input.
inline std::u32string decode_utf8(const std::string& s) {
    std::u32string out;
    out.reserve(s.size());
    size_t i = 0;
    const auto n = s.size();
    while (i < n) {
        const auto b0 = static_cast<unsigned char>(s[i]);
        char32_t cp = 0;
        size_t len = 1;
        if (b0 < 0x80) {
            cp = b0;
        } else if ((b0 >> 5) == 0x6 && i + 1 < n) {
            cp = b0 & 0x1F;
            len = 2;
        } else if ((b0 >> 4) == 0xE && i + 2 < n) {
            cp = b0 & 0x0F;
            len = 3;
        } else if ((b0 >> 3) == 0x1E && i + 3 < n) {
            cp = b0 & 0x07;
            len = 4;
        } else {
            out.push_back(b0);
            ++i;
            continue;
        }
        bool ok = true;
        for (size_t k = 1; k < len; ++k) {
            const auto bk = static_cast<unsigned char>(s[i + k]);
            if ((bk >> 6) != 0x2) { ok = false; break; }
            cp = (cp << 6) | (bk & 0x3F);
        }
        if (!ok) {
            out.push_back(b0);
            ++i;
            continue;
        }
        out.push_back(cp);
        i += len;
    }
    return out;
}

inline void encode_utf8(char32_t cp, std::string& out) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

} // namespace detail

inline std::string normalize_text(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (char32_t cp : detail::decode_utf8(text)) {
        cp = detail::lower_cp(cp);
        if (detail::is_alnum_cp(cp)) detail::encode_utf8(cp, out);
    }
    return out;
}

struct DedupKey {
    std::string normalized_text;
    Timestamp published_at;
    Source source = Source::primary_feed;

    friend bool operator==(const DedupKey&, const DedupKey&) = default;
};

inline DedupKey make_dedup_key(const PostRecord& r) {
    return DedupKey{normalize_text(r.text), r.published_at, r.source};
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

// Maps logical field names to input column names; defaults match the
// documented schema.
struct ColumnSchema {
    std::map<std::string, std::string> columns = {
        {"post_id", "post_id"},       {"outlet_id", "outlet_id"},
        {"published_at", "published_at"}, {"post_type", "post_type"},
        {"author_is_page", "author_is_page"}, {"text", "text"},
        {"reactions", "reactions"},   {"comments", "comments"},
        {"views", "views"},           {"source", "source"}};
    char delimiter = ',';
};

struct RejectedRow {
    size_t row_number = 0;  // 1-based data row index
    std::string reason;
    std::vector<std::string> fields;
};

struct ParseResult {
    PostTable table;
    std::vector<RejectedRow> rejects;
};

namespace detail {

inline std::optional<std::int64_t> parse_count(const std::string& s, std::string& err) {
    if (s.empty()) return std::nullopt;
    size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(s, &pos);
    } catch (...) {
        err = "malformed count '" + s + "'";
        return std::nullopt;
    }
    if (pos != s.size()) {
        err = "malformed count '" + s + "'";
        return std::nullopt;
    }
    if (v < 0) {
        err = "negative count " + s;
        return std::nullopt;
    }
    return v;
}

inline std::optional<bool> parse_bool(const std::string& s) {
    if (s == "true" || s == "TRUE" || s == "True" || s == "1") return true;
    if (s == "false" || s == "FALSE" || s == "False" || s == "0") return false;
    return std::nullopt;
}

} // namespace detail

inline ParseResult parse_posts(std::istream& in, const ColumnSchema& schema = {}) {
    const CsvTable csv = read_csv(in, schema.delimiter);
    std::map<std::string, size_t> col;
    for (const auto& [field, name] : schema.columns) {
        auto idx = csv.column(name);
        if (!idx) throw SchemaError("missing mandatory column: " + name);
        col[field] = *idx;
    }
    const auto imputed_col = csv.column("imputed_flag");

    ParseResult out;
    std::set<std::string> seen_ids;
    size_t rowno = 0;
    for (const auto& row : csv.rows) {
        ++rowno;
        auto reject = [&](const std::string& reason) {
            out.rejects.push_back({rowno, reason, row});
        };
        if (row.size() < csv.header.size()) {
            reject("wrong field count");
            continue;
        }
        auto field = [&](const std::string& f) -> const std::string& { return row[col.at(f)]; };

        PostRecord rec;
        rec.post_id = field("post_id");
        if (rec.post_id.empty()) { reject("missing post_id"); continue; }
        if (!seen_ids.insert(rec.post_id).second) { reject("duplicate post_id " + rec.post_id); continue; }
        rec.outlet_id = field("outlet_id");
        if (rec.outlet_id.empty()) { reject("missing outlet_id"); continue; }
        try {
            rec.published_at = parse_timestamp(field("published_at"));
        } catch (const SchemaError& e) {
            reject(e.what());
            continue;
        }
        auto pt = parse_post_type(field("post_type"));
        if (!pt) { reject("unknown post_type '" + field("post_type") + "'"); continue; }
        rec.post_type = *pt;
        auto page = detail::parse_bool(field("author_is_page"));
        if (!page) { reject("malformed author_is_page '" + field("author_is_page") + "'"); continue; }
        rec.author_is_page = *page;
        rec.text = field("text");
        std::string err;
        rec.reactions = detail::parse_count(field("reactions"), err);
        if (!err.empty()) { reject("reactions: " + err); continue; }
        rec.comments = detail::parse_count(field("comments"), err);
        if (!err.empty()) { reject("comments: " + err); continue; }
        rec.views = detail::parse_count(field("views"), err);
        if (!err.empty()) { reject("views: " + err); continue; }
        auto src = parse_source(field("source"));
        if (!src) { reject("unknown source '" + field("source") + "'"); continue; }
        rec.source = *src;
        if (imputed_col && row[*imputed_col] == "1") rec.imputed = true;
        out.table.records.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deduplication
// ---------------------------------------------------------------------------

struct DedupResult {
    PostTable table;
    std::int64_t removed = 0;
};

// Duplicate classes share (normalized text, timestamp), ignoring source.
// Across sources the primary_feed record wins; within a source the record
// with more reactions wins, ties broken by smaller post_id. Surviving
// records keep their input order.
inline DedupResult deduplicate(const PostTable& table) {
    struct Key {
        std::string text;
        Timestamp at;
        bool operator==(const Key&) const = default;
    };
    struct KeyHash {
        size_t operator()(const Key& k) const {
            return std::hash<std::string>()(k.text) ^
                   (std::hash<std::int64_t>()(k.at.day * 86400 + k.at.seconds) * 1099511628211ULL);
        }
    };
    auto better = [](const PostRecord& a, const PostRecord& b) {
        if (a.source != b.source) return a.source == Source::primary_feed;
        const std::int64_t ra = a.reactions.value_or(-1), rb = b.reactions.value_or(-1);
        if (ra != rb) return ra > rb;
        return a.post_id < b.post_id;
    };
    std::unordered_map<Key, size_t, KeyHash> best;  // key -> index into table
    std::vector<char> keep(table.records.size(), 0);
    for (size_t i = 0; i < table.records.size(); ++i) {
        Key k{normalize_text(table.records[i].text), table.records[i].published_at};
        auto it = best.find(k);
        if (it == best.end()) {
            best.emplace(std::move(k), i);
            keep[i] = 1;
        } else if (better(table.records[i], table.records[it->second])) {
            keep[it->second] = 0;
            it->second = i;
            keep[i] = 1;
        }
    }
    DedupResult out;
    for (size_t i = 0; i < table.records.size(); ++i) {
        if (keep[i]) out.table.records.push_back(table.records[i]);
        else ++out.removed;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Validity filtering
// ---------------------------------------------------------------------------

struct CleaningConfig {
    std::set<PostType> allowed_types = {PostType::status, PostType::link, PostType::photo,
                                        PostType::video};
    DayNumber window_start = days_from_civil(2016, 1, 1);
    DayNumber window_end = days_from_civil(2025, 2, 13);  // inclusive
    bool require_page_author = true;
};

using CleaningReport = std::map<std::string, std::int64_t>;

struct FilterResult {
    PostTable table;
    CleaningReport removed;
};

inline FilterResult filter_valid(const PostTable& table, const CleaningConfig& rules) {
    FilterResult out;
    for (const auto& r : table.records) {
        if (rules.require_page_author && !r.author_is_page) {
            ++out.removed["author_not_page"];
            continue;
        }
        if (!rules.allowed_types.contains(r.post_type)) {
            ++out.removed["type_" + to_string(r.post_type)];
            continue;
        }
        if (r.published_at.day < rules.window_start || r.published_at.day > rules.window_end) {
            ++out.removed["outside_window"];
            continue;
        }
        out.table.records.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Views proxy regression (views ~ reactions [+ comments])
// ---------------------------------------------------------------------------

struct ProxyFit {
    double intercept = 0.0;
    double slope_reactions = 0.0;
    std::optional<double> slope_comments;
    double se_intercept = 0.0;
    double se_reactions = 0.0;
    std::optional<double> se_comments;
    double adjusted_r2 = 0.0;
    double r_views_reactions = 0.0;
    std::optional<double> r_views_comments;
    long n = 0;
};

inline ProxyFit fit_views_proxy(const PostTable& table, bool include_comments = false) {
    std::vector<double> views, reactions, comments;
    for (const auto& r : table.records) {
        if (!r.views || !r.reactions) continue;
        if (include_comments && !r.comments) continue;
        views.push_back(static_cast<double>(*r.views));
        reactions.push_back(static_cast<double>(*r.reactions));
        comments.push_back(r.comments ? static_cast<double>(*r.comments) : 0.0);
    }
    const auto n = static_cast<long>(views.size());
    if (n < 3) throw InsufficientDataError("fit_views_proxy: fewer than 3 complete rows");
    const long p = include_comments ? 3 : 2;
    Eigen::MatrixXd X(n, p);
    Eigen::VectorXd y(n);
    for (long i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        X(i, 1) = reactions[static_cast<size_t>(i)];
        if (include_comments) X(i, 2) = comments[static_cast<size_t>(i)];
        y(i) = views[static_cast<size_t>(i)];
    }
    for (long j = 1; j < p; ++j) {
        const double v = (X.col(j).array() - X.col(j).mean()).square().sum();
        if (v == 0.0) throw SingularError("fit_views_proxy: zero variance in predictor");
    }
    const OlsFit f = ols(X, y);
    ProxyFit out;
    out.intercept = f.coef(0);
    out.slope_reactions = f.coef(1);
    out.se_intercept = f.se(0);
    out.se_reactions = f.se(1);
    out.adjusted_r2 = f.adjusted_r2;
    out.n = n;
    out.r_views_reactions = pearson(views, reactions);
    if (include_comments) {
        out.slope_comments = f.coef(2);
        out.se_comments = f.se(2);
        out.r_views_comments = pearson(views, comments);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reaction imputation model (reactions ~ views + outlet + views:outlet + video)
// ---------------------------------------------------------------------------

struct ImputationFit {
    double intercept = 0.0;
    double views_slope = 0.0;          // slope for the reference outlet
    double video_coef = 0.0;
    std::map<std::string, double> outlet_offset;       // reference outlet maps to 0
    std::map<std::string, double> outlet_interaction;  // reference and flagged outlets map to 0
    std::vector<std::string> unidentifiable;           // outlets using the pooled slope
    double r2 = 0.0;
    long n = 0;

    double predict(const std::string& outlet_id, double views, bool video) const {
        double off = 0.0, inter = 0.0;
        if (auto it = outlet_offset.find(outlet_id); it != outlet_offset.end()) off = it->second;
        if (auto it = outlet_interaction.find(outlet_id); it != outlet_interaction.end())
            inter = it->second;
        return intercept + off + (views_slope + inter) * views + (video ? video_coef : 0.0);
    }
};

inline ImputationFit fit_imputation(const PostTable& table) {
    struct Row {
        std::string outlet;
        double views, reactions;
        bool video;
    };
    std::vector<Row> rows;
    std::map<std::string, long> outlet_n;
    std::map<std::string, double> outlet_views_min, outlet_views_max;
    for (const auto& r : table.records) {
        if (!r.views || !r.reactions) continue;
        const double v = static_cast<double>(*r.views);
        rows.push_back({r.outlet_id, v, static_cast<double>(*r.reactions),
                        r.post_type == PostType::video});
        auto [it, fresh] = outlet_n.try_emplace(r.outlet_id, 0);
        ++it->second;
        if (fresh) {
            outlet_views_min[r.outlet_id] = v;
            outlet_views_max[r.outlet_id] = v;
        } else {
            outlet_views_min[r.outlet_id] = std::min(outlet_views_min[r.outlet_id], v);
            outlet_views_max[r.outlet_id] = std::max(outlet_views_max[r.outlet_id], v);
        }
    }
    const auto n = static_cast<long>(rows.size());
    if (n < 3) throw InsufficientDataError("fit_imputation: fewer than 3 complete rows");

    // reference = first outlet in sorted order; its offset and interaction are 0
    std::vector<std::string> outlets;
    for (const auto& [o, cnt] : outlet_n) outlets.push_back(o);
    ImputationFit fit;
    std::vector<std::string> offset_outlets(outlets.begin() + 1, outlets.end());
    std::vector<std::string> inter_outlets;
    for (size_t i = 1; i < outlets.size(); ++i) {
        const auto& o = outlets[i];
        if (outlet_n[o] >= 2 && outlet_views_max[o] > outlet_views_min[o])
            inter_outlets.push_back(o);
        else
            fit.unidentifiable.push_back(o);
    }
    bool any_video = false, any_nonvideo = false;
    for (const auto& r : rows) (r.video ? any_video : any_nonvideo) = true;
    const bool use_video = any_video && any_nonvideo;

    const long p = 2 + static_cast<long>(offset_outlets.size()) +
                   static_cast<long>(inter_outlets.size()) + (use_video ? 1 : 0);
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, p);
    Eigen::VectorXd y(n);
    std::map<std::string, long> offset_col, inter_col;
    long next = 2;
    for (const auto& o : offset_outlets) offset_col[o] = next++;
    for (const auto& o : inter_outlets) inter_col[o] = next++;
    const long video_col = use_video ? next++ : -1;
    for (long i = 0; i < n; ++i) {
        const auto& r = rows[static_cast<size_t>(i)];
        X(i, 0) = 1.0;
        X(i, 1) = r.views;
        if (auto it = offset_col.find(r.outlet); it != offset_col.end()) X(i, it->second) = 1.0;
        if (auto it = inter_col.find(r.outlet); it != inter_col.end()) X(i, it->second) = r.views;
        if (use_video && r.video) X(i, video_col) = 1.0;
        y(i) = r.reactions;
    }
    const OlsFit f = ols(X, y);
    fit.intercept = f.coef(0);
    fit.views_slope = f.coef(1);
    fit.video_coef = use_video ? f.coef(video_col) : 0.0;
    for (const auto& o : outlets) {
        fit.outlet_offset[o] = 0.0;
        fit.outlet_interaction[o] = 0.0;
    }
    for (const auto& [o, c] : offset_col) fit.outlet_offset[o] = f.coef(c);
    for (const auto& [o, c] : inter_col) fit.outlet_interaction[o] = f.coef(c);
    fit.r2 = f.r2;
    fit.n = n;
    return fit;
}

struct ImputationReport {
    std::int64_t imputed = 0;
    std::int64_t unimputable = 0;
};

struct ImputeResult {
    PostTable table;
    ImputationReport report;
};

// Missing reactions are replaced by the model prediction, clamped at zero
// and rounded half-up; observed values are never touched.
inline ImputeResult impute_reactions(const PostTable& table, const ImputationFit& fit) {
    ImputeResult out;
    out.table = table;
    for (auto& r : out.table.records) {
        if (r.reactions) continue;
        if (!r.views) {
            ++out.report.unimputable;
            continue;
        }
        const double pred = fit.predict(r.outlet_id, static_cast<double>(*r.views),
                                        r.post_type == PostType::video);
        const double clamped = std::max(0.0, pred);
        r.reactions = static_cast<std::int64_t>(std::floor(clamped + 0.5));
        r.imputed = true;
        ++out.report.imputed;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Table serialization (documented schema plus imputed_flag)
// ---------------------------------------------------------------------------

inline CsvTable posts_to_csv(const PostTable& table) {
    CsvTable out;
    out.header = {"post_id", "outlet_id", "published_at", "post_type", "author_is_page",
                  "text",    "reactions", "comments",     "views",     "source",
                  "imputed_flag"};
    auto count_str = [](const std::optional<std::int64_t>& v) {
        return v ? std::to_string(*v) : std::string();
    };
    for (const auto& r : table.records) {
        out.rows.push_back({r.post_id, r.outlet_id, format_timestamp(r.published_at),
                            to_string(r.post_type), r.author_is_page ? "true" : "false", r.text,
                            count_str(r.reactions), count_str(r.comments), count_str(r.views),
                            to_string(r.source), r.imputed ? "1" : "0"});
    }
    return out;
}

inline CsvTable outlets_to_csv(const OutletDirectory& dir) {
    CsvTable out;
    out.header = {"outlet_id", "name", "sector", "quality", "mean_posts"};
    for (const auto& o : dir.outlets)
        out.rows.push_back({o.outlet_id, o.name, to_string(o.sector), to_string(o.quality),
                            format_double(o.mean_posts)});
    return out;
}

inline OutletDirectory outlets_from_csv(const CsvTable& csv) {
    OutletDirectory dir;
    for (const auto& name : {"outlet_id", "sector", "quality", "mean_posts"})
        if (!csv.column(name)) throw SchemaError(std::string("outlet table: missing column ") + name);
    const auto id_c = *csv.column("outlet_id");
    const auto name_c = csv.column("name");
    const auto sec_c = *csv.column("sector");
    const auto q_c = *csv.column("quality");
    const auto mp_c = *csv.column("mean_posts");
    for (const auto& row : csv.rows) {
        OutletMeta m;
        m.outlet_id = row[id_c];
        m.name = name_c ? row[*name_c] : row[id_c];
        m.sector = row[sec_c] == "news" ? Sector::news : Sector::non_news;
        auto q = parse_quality(row[q_c]);
        if (!q) throw SchemaError("outlet table: unknown quality '" + row[q_c] + "'");
        m.quality = *q;
        m.mean_posts = std::stod(row[mp_c]);
        dir.outlets.push_back(std::move(m));
    }
    dir.validate();
    return dir;
}

} // namespace engshift
