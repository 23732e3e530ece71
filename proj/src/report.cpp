#include "cni/report.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "cni/errors.hpp"

namespace cni {

namespace {

constexpr const char* kHeader =
    "config_id,variable,value,seed_count,clean_mean,clean_std,adv_mean,adv_std,wall_s";

std::string fmt6(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

double parse_double(const std::string& s, int lineno, const char* col) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("report: line " + std::to_string(lineno) + ": bad " + col + " value '" +
                      s + "'");
  }
}

}  // namespace

std::string report_to_csv(const RunReport& report) {
  std::vector<ReportRow> rows = report.rows;
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.value != b.value) return a.value < b.value;
    return a.config_id < b.config_id;
  });
  std::ostringstream os;
  os << kHeader << '\n';
  for (const ReportRow& r : rows) {
    if (r.config_id.find(',') != std::string::npos ||
        r.variable.find(',') != std::string::npos) {
      throw ContractError("report: commas not allowed in config_id/variable");
    }
    os << r.config_id << ',' << r.variable << ',' << fmt6(r.value) << ',' << r.seed_count << ','
       << fmt6(r.clean_mean) << ',' << fmt6(r.clean_std) << ',' << fmt6(r.adv_mean) << ','
       << fmt6(r.adv_std) << ',' << fmt6(r.wall_s) << '\n';
  }
  return os.str();
}

void emit_report(const RunReport& report, const std::filesystem::path& path) {
  std::string csv = report_to_csv(report);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report " + path.string());
  out << csv;
  if (!out) throw IoError("failed writing report " + path.string());
}

RunReport report_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("report: empty file, expected header");
  if (line != kHeader) {
    throw FormatError("report: bad header '" + line + "'");
  }
  RunReport report;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 9) {
      throw FormatError("report: line " + std::to_string(lineno) + ": expected 9 fields, got " +
                        std::to_string(f.size()));
    }
    ReportRow r;
    r.config_id = f[0];
    r.variable = f[1];
    r.value = parse_double(f[2], lineno, "value");
    r.seed_count = static_cast<int>(parse_double(f[3], lineno, "seed_count"));
    r.clean_mean = parse_double(f[4], lineno, "clean_mean");
    r.clean_std = parse_double(f[5], lineno, "clean_std");
    r.adv_mean = parse_double(f[6], lineno, "adv_mean");
    r.adv_std = parse_double(f[7], lineno, "adv_std");
    r.wall_s = parse_double(f[8], lineno, "wall_s");
    if (r.clean_std < 0.0 || r.adv_std < 0.0) {
      throw FormatError("report: line " + std::to_string(lineno) + ": negative std");
    }
    report.rows.push_back(std::move(r));
  }
  return report;
}

RunReport parse_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read report " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return report_from_csv(text);
}

void render_report(const RunReport& report, std::ostream& os) {
  os << std::left << std::setw(24) << "config" << std::setw(10) << "variable" << std::right
     << std::setw(10) << "value" << std::setw(7) << "seeds" << std::setw(19) << "clean acc"
     << std::setw(19) << "adv acc" << std::setw(10) << "wall[s]" << '\n';
  for (const ReportRow& r : report.rows) {
    std::ostringstream clean, adv;
    clean << std::fixed << std::setprecision(4) << r.clean_mean << " +- " << r.clean_std;
    adv << std::fixed << std::setprecision(4) << r.adv_mean << " +- " << r.adv_std;
    os << std::left << std::setw(24) << r.config_id << std::setw(10) << r.variable << std::right
       << std::setw(10) << std::fixed << std::setprecision(4) << r.value << std::setw(7)
       << r.seed_count << std::setw(19) << clean.str() << std::setw(19) << adv.str()
       << std::setw(10) << std::setprecision(2) << r.wall_s << '\n';
  }
}

}  // namespace cni
