#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace surftrap::csv {

/// Shortest representation that parses back to the same double.
std::string format(double value);

/// Writes a row of doubles joined by commas, terminated by '\n'.
void write_row(std::ostream& out, const std::vector<double>& values);

/// Writes each line of `text` prefixed with "# ".
void write_comment_block(std::ostream& out, std::string_view text);

struct Table {
  std::vector<std::string> comments;  // '#' lines, prefix stripped
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const;  // throws Error(parse)
  double number(std::size_t row, std::size_t col) const;  // throws Error(parse)
};

/// Reads a comma-separated table with one header line. Blank lines are skipped and lines starting
/// with '#' are collected as comments.
Table read(std::istream& in);

double parse_double(std::string_view text);  // throws Error(parse)

}  // namespace surftrap::csv
