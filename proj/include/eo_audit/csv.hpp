#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eo_audit/common.hpp"

namespace eo::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  // 1-based physical line on which each row starts (header is line 1).
  std::vector<std::size_t> lines;

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
};

// Comma-separated, double-quote quoting, "" escapes, LF or CRLF records.
// Quoted fields may span lines. A trailing newline does not add a row and
// blank lines are skipped.
inline Table parse(std::string_view text) {
  Table table;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  bool after_quote = false;
  bool record_quoted = false;
  bool have_header = false;
  std::size_t line = 1;
  std::size_t record_line = 1;

  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
    after_quote = false;
  };
  auto end_record = [&] {
    bool blank = record.size() == 1 && record[0].empty() && !record_quoted;
    if (!blank) {
      if (!have_header) {
        table.header = std::move(record);
        have_header = true;
      } else {
        table.rows.push_back(std::move(record));
        table.lines.push_back(record_line);
      }
    }
    record.clear();
    record_quoted = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
          after_quote = true;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && !field_started) {
      in_quotes = true;
      field_started = true;
      record_quoted = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      // folded into the following '\n'
    } else if (c == '\n') {
      end_field();
      end_record();
      ++line;
      record_line = line;
    } else {
      if (after_quote)
        throw InputError(
            fmt::format("csv: unexpected character after closing quote on line {}", line));
      field.push_back(c);
      field_started = true;
    }
  }
  if (in_quotes)
    throw InputError(
        fmt::format("csv: unterminated quoted field starting on line {}", record_line));
  if (field_started || !record.empty() || record_quoted) {
    end_field();
    end_record();
  }
  return table;
}

inline bool needs_quotes(std::string_view f) {
  if (f.empty()) return false;
  if (f.front() == ' ' || f.back() == ' ') return true;
  return f.find_first_of(",\"\r\n") != std::string_view::npos;
}

inline std::string quote(std::string_view f) {
  if (!needs_quotes(f)) return std::string(f);
  std::string out = "\"";
  for (char c : f) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline std::string format_row(std::span<const std::string> fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out.push_back(',');
    out += quote(fields[i]);
  }
  out.push_back('\n');
  return out;
}

inline std::string format(std::span<const std::string> header,
                          std::span<const std::vector<std::string>> rows) {
  std::string out = format_row(header);
  for (const auto& r : rows) out += format_row(r);
  return out;
}

}  // namespace eo::csv
