#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "engshift/common.hpp"

namespace engshift {

// Delimited-text handling with RFC-4180-style quoting. Files may start with
// "# key=value" metadata lines ahead of the header row; the reader collects
// them and the writer emits them.

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::unordered_map<std::string, std::string> metadata;

    std::optional<size_t> column(const std::string& name) const {
        for (size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        return std::nullopt;
    }
};

inline CsvTable read_csv(std::istream& in, char delim = ',') {
    CsvTable t;
    bool have_header = false;
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false, in_quoted_field = false, at_line_start = true, comment = false;
    std::string comment_line;

    auto end_record = [&]() {
        fields.push_back(std::move(field));
        field.clear();
        in_quoted_field = false;
        if (!have_header) {
            t.header = std::move(fields);
            have_header = true;
        } else {
            t.rows.push_back(std::move(fields));
        }
        fields.clear();
        at_line_start = true;
    };
    auto end_comment = [&]() {
        const auto eq = comment_line.find('=');
        if (eq != std::string::npos) {
            std::string key = comment_line.substr(1, eq - 1);
            while (!key.empty() && key.front() == ' ') key.erase(key.begin());
            while (!key.empty() && key.back() == ' ') key.pop_back();
            t.metadata[key] = comment_line.substr(eq + 1);
        }
        comment_line.clear();
        comment = false;
        at_line_start = true;
    };

    char c;
    while (in.get(c)) {
        if (comment) {
            if (c == '\n') end_comment();
            else if (c != '\r') comment_line.push_back(c);
            continue;
        }
        if (at_line_start && !have_header && c == '#' && !quoted) {
            comment = true;
            comment_line = "#";
            continue;
        }
        at_line_start = false;
        if (quoted) {
            if (c == '"') {
                if (in.peek() == '"') {
                    in.get(c);
                    field.push_back('"');
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"' && field.empty() && !in_quoted_field) {
            quoted = true;
            in_quoted_field = true;
        } else if (c == delim) {
            fields.push_back(std::move(field));
            field.clear();
            in_quoted_field = false;
        } else if (c == '\n') {
            if (!field.empty() && field.back() == '\r') field.pop_back();
            if (field.empty() && fields.empty() && !in_quoted_field)
                at_line_start = true;  // blank line
            else
                end_record();
        } else {
            field.push_back(c);
        }
    }
    if (quoted) throw SchemaError("unterminated quote at end of input");
    if (comment) end_comment();
    if (!field.empty() || !fields.empty() || in_quoted_field) end_record();
    if (!have_header) throw SchemaError("empty delimited input: no header row");
    return t;
}

inline CsvTable read_csv_file(const std::string& path, char delim = ',') {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    return read_csv(in, delim);
}

inline std::string csv_escape(const std::string& s, char delim) {
    bool needs = false;
    for (char c : s)
        if (c == delim || c == '"' || c == '\n' || c == '\r') { needs = true; break; }
    if (!needs) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += '"';
    return out;
}

inline void write_csv(std::ostream& out, const CsvTable& t, char delim = ',') {
    for (const auto& [k, v] : std::map<std::string, std::string>(t.metadata.begin(), t.metadata.end()))
        out << "# " << k << "=" << v << "\n";
    for (size_t i = 0; i < t.header.size(); ++i)
        out << (i ? std::string(1, delim) : "") << csv_escape(t.header[i], delim);
    out << "\n";
    for (const auto& row : t.rows) {
        for (size_t i = 0; i < row.size(); ++i)
            out << (i ? std::string(1, delim) : "") << csv_escape(row[i], delim);
        out << "\n";
    }
}

inline void write_csv_file(const std::string& path, const CsvTable& t, char delim = ',') {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write file: " + path);
    write_csv(out, t, delim);
}

// round-trip formatting for doubles in delimited outputs
inline std::string format_double(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

} // namespace engshift
