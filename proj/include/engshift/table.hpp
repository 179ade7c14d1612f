#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "engshift/common.hpp"
#include "engshift/dates.hpp"

namespace engshift {

enum class PostType { status, link, photo, video, event, music, unknown };

enum class Source { primary_feed, library };

enum class Sector { news, non_news };

enum class Quality { low, medium, high, non_news };

inline std::string to_string(PostType t) {
    switch (t) {
        case PostType::status: return "status";
        case PostType::link: return "link";
        case PostType::photo: return "photo";
        case PostType::video: return "video";
        case PostType::event: return "event";
        case PostType::music: return "music";
        case PostType::unknown: return "unknown";
    }
    return "unknown";
}

inline std::optional<PostType> parse_post_type(const std::string& s) {
    if (s == "status") return PostType::status;
    if (s == "link") return PostType::link;
    if (s == "photo") return PostType::photo;
    if (s == "video") return PostType::video;
    if (s == "event") return PostType::event;
    if (s == "music") return PostType::music;
    if (s == "unknown" || s.empty()) return PostType::unknown;
    return std::nullopt;
}

inline std::string to_string(Source s) {
    return s == Source::primary_feed ? "primary_feed" : "library";
}

inline std::optional<Source> parse_source(const std::string& s) {
    if (s == "primary_feed") return Source::primary_feed;
    if (s == "library") return Source::library;
    return std::nullopt;
}

inline std::string to_string(Quality q) {
    switch (q) {
        case Quality::low: return "low";
        case Quality::medium: return "medium";
        case Quality::high: return "high";
        case Quality::non_news: return "non_news";
    }
    return "non_news";
}

inline std::optional<Quality> parse_quality(const std::string& s) {
    if (s == "low") return Quality::low;
    if (s == "medium") return Quality::medium;
    if (s == "high") return Quality::high;
    if (s == "non_news") return Quality::non_news;
    return std::nullopt;
}

inline std::string to_string(Sector s) { return s == Sector::news ? "news" : "non_news"; }

struct PostRecord {
    std::string post_id;
    std::string outlet_id;
    Timestamp published_at;
    PostType post_type = PostType::unknown;
    bool author_is_page = true;
    std::string text;
    std::optional<std::int64_t> reactions;
    std::optional<std::int64_t> comments;
    std::optional<std::int64_t> views;
    Source source = Source::primary_feed;
    bool imputed = false;
};

struct OutletMeta {
    std::string outlet_id;
    std::string name;
    Sector sector = Sector::news;
    Quality quality = Quality::low;
    double mean_posts = 1.0;  // average posts per period (n_posts covariate)
};

struct PostTable {
    std::vector<PostRecord> records;

    size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
};

struct OutletDirectory {
    std::vector<OutletMeta> outlets;

    const OutletMeta& get(const std::string& outlet_id) const {
        for (const auto& o : outlets)
            if (o.outlet_id == outlet_id) return o;
        throw SchemaError("unknown outlet_id: " + outlet_id);
    }

    void validate() const {
        for (const auto& o : outlets) {
            const bool nn_sector = o.sector == Sector::non_news;
            const bool nn_quality = o.quality == Quality::non_news;
            if (nn_sector != nn_quality)
                throw SchemaError("outlet " + o.outlet_id +
                                  ": sector is non_news iff quality is non_news");
            if (!(o.mean_posts > 0.0))
                throw SchemaError("outlet " + o.outlet_id + ": mean_posts must be > 0");
        }
    }
};

} // namespace engshift
