#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "prosub/errors.hpp"

namespace prosub {

struct ReportRow {
  std::string method;
  int subnet_id = 0;
  long long params = 0;
  long long flops = 0;
  double top1_acc = 0.0;
  double latency_ms = 0.0;
};

inline constexpr const char* kReportHeader = "method,subnet_id,params,flops,top1_acc,latency_ms";

namespace detail {

inline std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace detail

// Writes the combined CSV (rows grouped by method in first-appearance order,
// descending FLOPs within a method) plus one two-column "flops accuracy"
// plot-data file per method. Returns true when there was nothing to report
// (header-only CSV, warning status). Output bytes depend only on the rows.
inline bool emit_report(const std::vector<ReportRow>& rows, const std::string& csv_path,
                        const std::string& plot_dir) {
  std::vector<std::string> method_order;
  std::map<std::string, std::vector<ReportRow>> by_method;
  for (const ReportRow& r : rows) {
    if (!by_method.count(r.method)) method_order.push_back(r.method);
    by_method[r.method].push_back(r);
  }

  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw DataError("cannot write " + csv_path);
  csv << kReportHeader << "\n";
  for (const std::string& method : method_order) {
    std::vector<ReportRow>& group = by_method[method];
    std::stable_sort(group.begin(), group.end(),
                     [](const ReportRow& a, const ReportRow& b) { return a.flops > b.flops; });
    for (const ReportRow& r : group)
      csv << r.method << "," << r.subnet_id << "," << r.params << "," << r.flops << ","
          << detail::fixed4(r.top1_acc) << "," << detail::fixed4(r.latency_ms) << "\n";
    std::ofstream plot(plot_dir + "/plot_" + method + ".dat", std::ios::trunc);
    if (!plot) throw DataError("cannot write plot data for method " + method);
    for (const ReportRow& r : group) plot << r.flops << " " << detail::fixed4(r.top1_acc) << "\n";
  }
  return rows.empty();
}

}  // namespace prosub
