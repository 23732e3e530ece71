#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace cni {

// One aggregated sweep configuration: accuracy statistics over seeds.
struct ReportRow {
  std::string config_id;
  std::string variable;  // swept variable name
  double value = 0.0;    // swept value (epsilon on the /255 scale)
  int seed_count = 0;
  double clean_mean = 0.0;
  double clean_std = 0.0;
  double adv_mean = 0.0;
  double adv_std = 0.0;
  double wall_s = 0.0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct RunReport {
  std::vector<ReportRow> rows;

  friend bool operator==(const RunReport&, const RunReport&) = default;
};

// CSV with the fixed header
//   config_id,variable,value,seed_count,clean_mean,clean_std,adv_mean,adv_std,wall_s
// floats printed with 6 decimals, rows ordered by value then config_id.
void emit_report(const RunReport& report, const std::filesystem::path& path);
std::string report_to_csv(const RunReport& report);

RunReport parse_report(const std::filesystem::path& path);
RunReport report_from_csv(const std::string& text);

// Human-readable table (the `report` subcommand).
void render_report(const RunReport& report, std::ostream& os);

}  // namespace cni
