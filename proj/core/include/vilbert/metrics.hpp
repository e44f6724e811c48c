// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vilbert/common.hpp"

namespace vilbert {

struct MetricRow {
  int64_t epoch = 0;
  std::string split;
  std::string metric;
  real value = 0;
};

/// CSV with the fixed header `epoch,split,metric,value`; values in shortest
/// round-trip decimal form so identical runs produce identical bytes.
void write_metrics_csv(const std::string& path,
                       const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::string& path);

/// Last value for (split, metric), highest epoch wins; throws if absent.
real final_metric(const std::vector<MetricRow>& rows, const std::string& split,
                  const std::string& metric);
bool has_metric(const std::vector<MetricRow>& rows, const std::string& split,
                const std::string& metric);

}  // namespace vilbert
