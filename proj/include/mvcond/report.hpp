#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "mvcond/training.hpp"

namespace mvcond {

struct ReportHeader {
  std::string checkpoint;
  std::string config_hash;
  int scenes = 0;
  std::vector<int> view_counts;
};

// Follows schemas/eval_report.schema.json.
nlohmann::json report_to_json(const EvalReport& report, const ReportHeader& header);
// One row per (view count, elevation); elevation "all" for the pooled row.
std::string report_to_csv(const EvalReport& report);

}  // namespace mvcond
