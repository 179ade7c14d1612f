#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

#include "engshift/common.hpp"

namespace engshift {

// Calendar dates as days since 1970-01-01 (UTC). Conversions use the civil
// calendar algorithms of Howard Hinnant; no timezone handling, everything is
// UTC by contract.

using DayNumber = std::int64_t;

inline DayNumber days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const int era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return static_cast<DayNumber>(era) * 146097 + static_cast<DayNumber>(doe) - 719468;
}

inline void civil_from_days(DayNumber z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const DayNumber era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const int yr = static_cast<int>(yoe) + static_cast<int>(era) * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y = yr + (m <= 2);
}

struct Timestamp {
    DayNumber day = 0;      // calendar day
    int seconds = 0;        // seconds within the day, [0, 86400)

    friend bool operator==(const Timestamp&, const Timestamp&) = default;
    friend auto operator<=>(const Timestamp&, const Timestamp&) = default;
};

inline bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Accepts YYYY-MM-DD optionally followed by [T ]HH:MM:SS and an optional
// trailing 'Z'. Throws SchemaError on anything else.
inline Timestamp parse_timestamp(const std::string& s) {
    auto bad = [&]() -> Timestamp {
        throw SchemaError("unparseable timestamp: '" + s + "'");
    };
    if (s.size() < 10) return bad();
    for (int i : {0, 1, 2, 3, 5, 6, 8, 9})
        if (!is_digit(s[static_cast<size_t>(i)])) return bad();
    if (s[4] != '-' || s[7] != '-') return bad();
    int y = std::stoi(s.substr(0, 4));
    int mo = std::stoi(s.substr(5, 2));
    int d = std::stoi(s.substr(8, 2));
    if (mo < 1 || mo > 12 || d < 1 || d > 31) return bad();
    Timestamp ts;
    ts.day = days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d));
    // round-trip check rejects impossible dates like Feb 30
    {
        int yy; unsigned mm, dd;
        civil_from_days(ts.day, yy, mm, dd);
        if (yy != y || static_cast<int>(mm) != mo || static_cast<int>(dd) != d) return bad();
    }
    if (s.size() == 10) return ts;
    size_t i = 10;
    if (s[i] != 'T' && s[i] != ' ') return bad();
    ++i;
    if (s.size() < i + 8) return bad();
    for (size_t k : {i, i + 1, i + 3, i + 4, i + 6, i + 7})
        if (!is_digit(s[k])) return bad();
    if (s[i + 2] != ':' || s[i + 5] != ':') return bad();
    int hh = std::stoi(s.substr(i, 2));
    int mi = std::stoi(s.substr(i + 3, 2));
    int ss = std::stoi(s.substr(i + 6, 2));
    if (hh > 23 || mi > 59 || ss > 60) return bad();
    if (ss == 60) ss = 59;  // fold leap seconds
    i += 8;
    if (i < s.size()) {
        if (!(i + 1 == s.size() && s[i] == 'Z')) return bad();
    }
    ts.seconds = hh * 3600 + mi * 60 + ss;
    return ts;
}

inline std::string format_date(DayNumber day) {
    int y; unsigned m, d;
    civil_from_days(day, y, m, d);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", y, m, d);
    return buf;
}

inline std::string format_timestamp(const Timestamp& ts) {
    int hh = ts.seconds / 3600, mi = (ts.seconds / 60) % 60, ss = ts.seconds % 60;
    char buf[24];
    std::snprintf(buf, sizeof(buf), "T%02d:%02d:%02dZ", hh, mi, ss);
    return format_date(ts.day) + buf;
}

inline DayNumber parse_date(const std::string& s) {
    Timestamp ts = parse_timestamp(s);
    return ts.day;
}

} // namespace engshift
