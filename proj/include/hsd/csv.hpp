#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hsd/error.hpp"

namespace hsd::csv {

struct Record {
  std::size_t line = 0;  // 1-based line where the record starts
  std::vector<std::string> fields;
};

struct RowError {
  std::size_t line = 0;
  std::string message;
};

struct Table {
  std::vector<std::string> header;
  std::vector<Record> rows;
  std::vector<RowError> errors;

  // Column index by name, or -1.
  int column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

namespace detail {

// Splits RFC 4180 text into records. A record with an unterminated quote is
// reported as an error and parsing resumes at the next line.
inline void parse_records(std::string_view data, std::vector<Record>& out,
                          std::vector<RowError>& errors) {
  std::size_t i = 0, line = 1;
  if (data.substr(0, 3) == "\xEF\xBB\xBF") i = 3;
  while (i < data.size()) {
    Record rec;
    rec.line = line;
    std::string field;
    bool in_quotes = false, quoted = false, done = false, broken = false;
    const std::size_t rec_start = i, rec_line = line;
    while (!done) {
      if (i >= data.size()) {
        if (in_quotes) {
          errors.push_back({rec_line, "unterminated quoted field"});
          // resume after the first line of the broken record
          i = data.find('\n', rec_start);
          i = (i == std::string_view::npos) ? data.size() : i + 1;
          line = rec_line + 1;
          broken = true;
          break;
        }
        rec.fields.push_back(std::move(field));
        done = true;
        break;
      }
      const char c = data[i];
      if (in_quotes) {
        if (c == '"') {
          if (i + 1 < data.size() && data[i + 1] == '"') {
            field.push_back('"');
            i += 2;
          } else {
            in_quotes = false;
            ++i;
          }
        } else {
          if (c == '\n') ++line;
          field.push_back(c);
          ++i;
        }
        continue;
      }
      if (c == '"' && field.empty() && !quoted) {
        in_quotes = quoted = true;
        ++i;
      } else if (c == ',') {
        rec.fields.push_back(std::move(field));
        field.clear();
        quoted = false;
        ++i;
      } else if (c == '\r' && i + 1 < data.size() && data[i + 1] == '\n') {
        ++i;
      } else if (c == '\n') {
        rec.fields.push_back(std::move(field));
        ++i;
        ++line;
        done = true;
      } else {
        field.push_back(c);
        ++i;
      }
    }
    if (broken) continue;
    // blank lines are not records
    if (!(rec.fields.size() == 1 && rec.fields[0].empty())) out.push_back(std::move(rec));
  }
}

}  // namespace detail

inline Table parse(std::string_view data) {
  Table table;
  std::vector<Record> records;
  detail::parse_records(data, records, table.errors);
  if (records.empty()) return table;
  table.header = std::move(records.front().fields);
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].fields.size() != table.header.size()) {
      std::ostringstream msg;
      msg << "expected " << table.header.size() << " fields, found " << records[r].fields.size();
      table.errors.push_back({records[r].line, msg.str()});
      continue;
    }
    table.rows.push_back(std::move(records[r]));
  }
  return table;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Table read(const std::string& path) { return parse(read_file(path)); }

inline std::string escape(std::string_view field) {
  if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline void write_row(std::ostream& os, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) os << ',';
    os << escape(fields[i]);
  }
  os << '\n';
}

}  // namespace hsd::csv
