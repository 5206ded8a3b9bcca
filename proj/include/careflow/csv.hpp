#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "careflow/error.hpp"

namespace careflow::csv {

// Splits one CSV line into fields. Handles RFC-4180 quoting ("" escapes a
// quote inside a quoted field); a trailing \r is stripped so LF and CRLF
// files parse identically.
inline void split_line(std::string_view line, std::vector<std::string>& out) {
    out.clear();
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::string cell;
    cell.reserve(32);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cell += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cell += c;
            }
        } else if (c == '"' && cell.empty()) {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cell);
            cell.clear();
        } else {
            cell += c;
        }
    }
    out.push_back(cell);
}

inline std::string escape(std::string_view field) {
    bool needs_quote = field.find_first_of(",\"\n\r") != std::string_view::npos;
    if (!needs_quote) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

// Streaming row reader: one line in memory at a time, so peak memory is
// independent of file size. Tracks 1-based line numbers for provenance.
class Reader {
  public:
    explicit Reader(std::string path) : path_(std::move(path)), in_(path_) {
        if (!in_.is_open()) throw Error(ErrorKind::MissingFile, "cannot open " + path_, path_);
    }

    // Reads the next row; false at end of file. Empty lines are skipped.
    bool next(std::vector<std::string>& row) {
        while (std::getline(in_, line_)) {
            ++line_no_;
            if (line_.empty() || (line_.size() == 1 && line_[0] == '\r')) continue;
            strip_bom(line_);
            split_line(line_, row);
            return true;
        }
        return false;
    }

    const std::string& path() const noexcept { return path_; }
    std::int64_t line_no() const noexcept { return line_no_; }

    [[noreturn]] void fail(const std::string& message) const {
        throw Error(ErrorKind::MalformedRow, message, path_, line_no_);
    }

  private:
    static void strip_bom(std::string& s) {
        if (s.size() >= 3 && static_cast<unsigned char>(s[0]) == 0xEF &&
            static_cast<unsigned char>(s[1]) == 0xBB && static_cast<unsigned char>(s[2]) == 0xBF) {
            s.erase(0, 3);
        }
    }

    std::string path_;
    std::ifstream in_;
    std::string line_;
    std::int64_t line_no_ = 0;
};

// Header-indexed reader for files where column order is not fixed (GTFS).
class HeaderReader {
  public:
    explicit HeaderReader(std::string path) : reader_(std::move(path)) {
        if (!reader_.next(header_)) {
            throw Error(ErrorKind::MalformedRow, "missing header row", reader_.path(), 0);
        }
    }

    // Index of a required column; throws with provenance when absent.
    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < header_.size(); ++i) {
            if (header_[i] == name) return i;
        }
        throw Error(ErrorKind::MalformedRow, "missing column '" + name + "'", reader_.path(), 1);
    }

    bool next(std::vector<std::string>& row) { return reader_.next(row); }

    std::string_view field(const std::vector<std::string>& row, std::size_t idx) const {
        if (idx >= row.size()) reader_.fail("row has too few fields");
        return row[idx];
    }

    const Reader& base() const noexcept { return reader_; }
    [[noreturn]] void fail(const std::string& message) const { reader_.fail(message); }

  private:
    Reader reader_;
    std::vector<std::string> header_;
};

class Writer {
  public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_.is_open()) throw Error(ErrorKind::Io, "cannot write " + path, path);
    }

    void row(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out_ << ',';
            out_ << escape(fields[i]);
        }
        out_ << '\n';
    }

    void raw_line(std::string_view line) { out_ << line << '\n'; }

  private:
    std::ofstream out_;
};

inline std::optional<std::int64_t> parse_int(std::string_view s) {
    std::int64_t v = 0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    auto [p, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || p != last) return std::nullopt;
    return v;
}

inline std::optional<double> parse_double(std::string_view s) {
    if (s.empty()) return std::nullopt;
    // from_chars<double> is available in libstdc++ 11
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
    return v;
}

}  // namespace careflow::csv
