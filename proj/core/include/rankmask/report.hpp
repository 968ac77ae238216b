#pragma once

// Analysis reports and their csv / json / svg renderings.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace rankmask {

struct ReportRow {
  std::string label;
  std::vector<double> values;         // one per table column
  std::vector<std::string> run_ids;   // run behind each value; "-" for derived numbers

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct ReportTable {
  std::string name;
  std::vector<std::string> columns;
  std::vector<ReportRow> rows;

  const ReportRow& row(std::string_view label) const;
  double value(std::string_view row_label, std::string_view column) const;
  std::size_t column_index(std::string_view column) const;

  friend bool operator==(const ReportTable&, const ReportTable&) = default;
};

struct Report {
  std::string analysis;
  std::uint64_t config_hash = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<std::pair<std::string, std::string>> config;  // echo, in canonical order
  std::map<std::string, std::string> metadata;
  std::vector<ReportTable> tables;
  std::map<std::string, std::size_t> audit_reads;           // "phase/split" -> reads
  bool audit_passed = true;
  std::vector<std::string> artifacts;

  const ReportTable& table(std::string_view name) const;
};

enum class ReportFormat { csv, json, svg };

/// Long-form csv: one line per number with its table, row, column and run id.
std::string render_csv(const Report& report);
std::string render_json(const Report& report);
/// Bar chart of the first column of a table.
std::string render_svg(const ReportTable& table);

/// Parses csv written by render_csv back into tables.
std::vector<ReportTable> parse_report_csv(std::istream& in);

/// Writes report.csv, report.json and plots/<table>.svg under `dir`, as
/// selected, and appends the written paths (relative to dir) to
/// report.artifacts before rendering. Throws IoError.
void emit_report(Report& report, const std::filesystem::path& dir,
                 const std::vector<ReportFormat>& formats = {ReportFormat::csv, ReportFormat::json,
                                                            ReportFormat::svg});

/// Number formatting used in every rendering: shortest round-trip decimal.
std::string format_number(double v);

}  // namespace rankmask
