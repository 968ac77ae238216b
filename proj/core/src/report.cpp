#include "rankmask/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rankmask/error.hpp"
#include "rankmask/text.hpp"

namespace rankmask {

namespace {

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw IoError("unterminated quote in csv line");
  fields.push_back(std::move(cur));
  return fields;
}

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

std::string format_number(double v) { return text::format_double(v); }

std::size_t ReportTable::column_index(std::string_view column) const {
  auto it = std::find(columns.begin(), columns.end(), column);
  if (it == columns.end()) throw IndexError("table '" + name + "' has no column '" + std::string(column) + "'");
  return static_cast<std::size_t>(it - columns.begin());
}

const ReportRow& ReportTable::row(std::string_view label) const {
  for (const ReportRow& r : rows) {
    if (r.label == label) return r;
  }
  throw IndexError("table '" + name + "' has no row '" + std::string(label) + "'");
}

double ReportTable::value(std::string_view row_label, std::string_view column) const {
  return row(row_label).values.at(column_index(column));
}

const ReportTable& Report::table(std::string_view name) const {
  for (const ReportTable& t : tables) {
    if (t.name == name) return t;
  }
  throw IndexError("report has no table '" + std::string(name) + "'");
}

std::string render_csv(const Report& report) {
  std::string out = "table,row,column,value,run_id\n";
  for (const ReportTable& t : report.tables) {
    for (const ReportRow& r : t.rows) {
      for (std::size_t c = 0; c < t.columns.size(); ++c) {
        out += csv_field(t.name) + ',' + csv_field(r.label) + ',' + csv_field(t.columns[c]) + ',' +
               format_number(r.values.at(c)) + ',' + csv_field(c < r.run_ids.size() ? r.run_ids[c] : "-") + '\n';
      }
    }
  }
  return out;
}

std::vector<ReportTable> parse_report_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "table,row,column,value,run_id") throw IoError("not a report csv");
  std::vector<ReportTable> tables;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = parse_csv_line(line);
    if (f.size() != 5) throw IoError("report csv line must have 5 fields");
    if (tables.empty() || tables.back().name != f[0]) tables.push_back(ReportTable{f[0], {}, {}});
    ReportTable& t = tables.back();
    bool new_row = t.rows.empty() || t.rows.back().label != f[1];
    if (!new_row) {
      new_row = t.rows.size() == 1 ? std::find(t.columns.begin(), t.columns.end(), f[2]) != t.columns.end()
                                   : t.rows.back().values.size() == t.columns.size();
    }
    if (new_row) t.rows.push_back(ReportRow{f[1], {}, {}});
    ReportRow& r = t.rows.back();
    if (t.rows.size() == 1) t.columns.push_back(f[2]);
    else if (r.values.size() >= t.columns.size() || t.columns[r.values.size()] != f[2]) {
      throw IoError("report csv columns are inconsistent in table '" + t.name + "'");
    }
    r.values.push_back(text::parse_double(f[3], "value"));
    r.run_ids.push_back(f[4]);
  }
  return tables;
}

std::string render_json(const Report& report) {
  using json = nlohmann::ordered_json;
  json j;
  j["analysis"] = report.analysis;
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(report.config_hash));
  j["config_hash"] = hash;
  j["seeds"] = report.seeds;
  json config = json::object();
  for (const auto& [k, v] : report.config) config[k] = v;
  j["config"] = std::move(config);
  json meta = json::object();
  for (const auto& [k, v] : report.metadata) meta[k] = v;
  j["metadata"] = std::move(meta);
  json tables = json::array();
  for (const ReportTable& t : report.tables) {
    json jt;
    jt["name"] = t.name;
    jt["columns"] = t.columns;
    json rows = json::array();
    for (const ReportRow& r : t.rows) {
      json jr;
      jr["label"] = r.label;
      jr["values"] = r.values;
      jr["run_ids"] = r.run_ids;
      rows.push_back(std::move(jr));
    }
    jt["rows"] = std::move(rows);
    tables.push_back(std::move(jt));
  }
  j["tables"] = std::move(tables);
  json audit;
  audit["passed"] = report.audit_passed;
  json reads = json::object();
  for (const auto& [k, n] : report.audit_reads) reads[k] = n;
  audit["reads"] = std::move(reads);
  j["audit"] = std::move(audit);
  j["artifacts"] = report.artifacts;
  return j.dump(2) + "\n";
}

std::string render_svg(const ReportTable& table) {
  constexpr double width = 640, height = 360, left = 60, right = 20, top = 40, bottom = 90;
  std::vector<double> values;
  for (const ReportRow& r : table.rows) values.push_back(r.values.empty() ? 0.0 : r.values[0]);
  double hi = 0.0, lo = 0.0;
  for (double v : values) {
    hi = std::max(hi, v);
    lo = std::min(lo, v);
  }
  if (hi == lo) hi = lo + 1.0;
  const double plot_h = height - top - bottom, plot_w = width - left - right;
  auto y_of = [&](double v) { return top + (hi - v) / (hi - lo) * plot_h; };

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"360\" viewBox=\"0 0 640 360\">\n";
  out += "<rect width=\"640\" height=\"360\" fill=\"white\"/>\n";
  out += "<text x=\"320\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
         xml_escape(table.name) + (table.columns.empty() ? "" : " (" + xml_escape(table.columns[0]) + ")") +
         "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    const std::string y = fixed(y_of(v), 1);
    out += "<line x1=\"" + fixed(left, 1) + "\" y1=\"" + y + "\" x2=\"" + fixed(width - right, 1) + "\" y2=\"" + y +
           "\" stroke=\"#ddd\"/>\n";
    out += "<text x=\"" + fixed(left - 6, 1) + "\" y=\"" + y +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" + fixed(v, 3) + "</text>\n";
  }
  const double slot = values.empty() ? plot_w : plot_w / static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = left + slot * static_cast<double>(i) + slot * 0.15;
    const double y0 = y_of(std::max(0.0, values[i])), y1 = y_of(std::min(0.0, values[i]));
    out += "<rect x=\"" + fixed(x, 1) + "\" y=\"" + fixed(y0, 1) + "\" width=\"" + fixed(slot * 0.7, 1) +
           "\" height=\"" + fixed(y1 - y0, 1) + "\" fill=\"#4878a8\"/>\n";
    const double cx = x + slot * 0.35;
    out += "<text x=\"" + fixed(cx, 1) + "\" y=\"" + fixed(y0 - 4, 1) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" + fixed(values[i], 3) +
           "</text>\n";
    out += "<text transform=\"translate(" + fixed(cx, 1) + "," + fixed(height - bottom + 12, 1) +
           ") rotate(35)\" font-family=\"sans-serif\" font-size=\"10\">" + xml_escape(table.rows[i].label) +
           "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

void emit_report(Report& report, const std::filesystem::path& dir, const std::vector<ReportFormat>& formats) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  auto wants = [&](ReportFormat f) { return std::find(formats.begin(), formats.end(), f) != formats.end(); };
  std::vector<std::pair<std::string, std::string>> svgs;
  if (wants(ReportFormat::svg)) {
    for (const ReportTable& t : report.tables) {
      svgs.emplace_back("plots/" + t.name + ".svg", render_svg(t));
      report.artifacts.push_back(svgs.back().first);
    }
  }
  if (wants(ReportFormat::csv)) report.artifacts.push_back("report.csv");
  if (wants(ReportFormat::json)) report.artifacts.push_back("report.json");
  std::sort(report.artifacts.begin(), report.artifacts.end());
  report.artifacts.erase(std::unique(report.artifacts.begin(), report.artifacts.end()), report.artifacts.end());

  if (!svgs.empty()) {
    std::filesystem::create_directories(dir / "plots", ec);
    if (ec) throw IoError("cannot create " + (dir / "plots").string() + ": " + ec.message());
  }
  for (const auto& [rel, content] : svgs) write_file(dir / rel, content);
  if (wants(ReportFormat::csv)) write_file(dir / "report.csv", render_csv(report));
  if (wants(ReportFormat::json)) write_file(dir / "report.json", render_json(report));
}

}  // namespace rankmask
