#include "mvcond/report.hpp"

#include <cstdio>
#include <sstream>

namespace mvcond {

using nlohmann::json;

json report_to_json(const EvalReport& report, const ReportHeader& header) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"view_count", r.view_count},
                    {"elevation_deg", r.elevation_deg ? json(*r.elevation_deg) : json(nullptr)},
                    {"targets", r.targets},
                    {"latent_psnr", r.latent_psnr},
                    {"psnr", r.psnr},
                    {"ssim", r.ssim}});
  }
  return {{"format_version", 1},
          {"checkpoint", header.checkpoint},
          {"config_hash", header.config_hash},
          {"scenes", header.scenes},
          {"view_counts", header.view_counts},
          {"rows", rows}};
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "view_count,elevation_deg,targets,latent_psnr,psnr,ssim\n";
  char buf[160];
  for (const auto& r : report.rows) {
    const std::string elev = r.elevation_deg ? std::to_string(static_cast<long>(*r.elevation_deg)) : "all";
    std::snprintf(buf, sizeof buf, "%d,%s,%d,%.6f,%.6f,%.6f\n", r.view_count, elev.c_str(), r.targets, r.latent_psnr,
                  r.psnr, r.ssim);
    out << buf;
  }
  return out.str();
}

}  // namespace mvcond
