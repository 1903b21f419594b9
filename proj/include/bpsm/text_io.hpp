#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bpsm/errors.hpp"

namespace bpsm::text_io {

/// Rows of a headed comma-separated numeric table.
struct Table {
  std::string header;  // first line, empty for an empty file
  std::vector<std::vector<double>> rows;
};

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline double parse_double(std::string_view field, const std::string& source, std::size_t line) {
  field = trim(field);
  double value = 0.0;
  const auto* begin = field.data();
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (field.empty() || ec != std::errc() || ptr != end) {
    throw ParseError(source, line, "non-numeric field '" + std::string(field) + "'");
  }
  return value;
}

/// Parses `text`. The first line must start with `header_prefix`; every
/// following non-blank line must have exactly `columns` numeric fields.
/// Empty input yields an empty table.
inline Table parse_table(const std::string& text, std::string_view header_prefix, std::size_t columns,
                         const std::string& source = "<memory>") {
  Table table;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto content = trim(line);
    if (line_no == 1) {
      if (content.empty() && in.peek() == std::char_traits<char>::eof()) return table;
      if (content.substr(0, header_prefix.size()) != header_prefix) {
        throw ParseError(source, line_no, "expected header '" + std::string(header_prefix) + "'");
      }
      table.header = std::string(content);
      continue;
    }
    if (content.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (true) {
      const auto comma = content.find(',', start);
      row.push_back(parse_double(content.substr(start, comma - start), source, line_no));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (row.size() != columns) {
      throw ParseError(source, line_no,
                       "expected " + std::to_string(columns) + " columns, got " + std::to_string(row.size()));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Table read_table(const std::filesystem::path& path, std::string_view header_prefix,
                        std::size_t columns) {
  return parse_table(read_file(path), header_prefix, columns, path.string());
}

/// Shortest-safe lossless formatting (17 significant digits).
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << content;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace bpsm::text_io
