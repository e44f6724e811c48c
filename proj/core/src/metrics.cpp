// SPDX-License-Identifier: Apache-2.0
#include "vilbert/metrics.hpp"

#include <fstream>

namespace vilbert {

void write_metrics_csv(const std::string& path,
                       const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "epoch,split,metric,value\n";
  for (const auto& r : rows) {
    out << r.epoch << "," << r.split << "," << r.metric << ","
        << format_real(r.value) << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::vector<MetricRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line) || line != "epoch,split,metric,value") {
    throw ParseError(path + ": missing metrics CSV header");
  }
  std::vector<MetricRow> rows;
  int64_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != 4) {
      throw ParseError(path + ": line " + std::to_string(line_no) +
                       ": expected 4 cells");
    }
    MetricRow r;
    r.epoch = parse_int(cells[0]);
    r.split = std::string(cells[1]);
    r.metric = std::string(cells[2]);
    r.value = parse_real(cells[3]);
    rows.push_back(std::move(r));
  }
  return rows;
}

bool has_metric(const std::vector<MetricRow>& rows, const std::string& split,
                const std::string& metric) {
  for (const auto& r : rows) {
    if (r.split == split && r.metric == metric) return true;
  }
  return false;
}

real final_metric(const std::vector<MetricRow>& rows, const std::string& split,
                  const std::string& metric) {
  const MetricRow* best = nullptr;
  for (const auto& r : rows) {
    if (r.split == split && r.metric == metric &&
        (best == nullptr || r.epoch >= best->epoch)) {
      best = &r;
    }
  }
  if (best == nullptr) {
    throw ContractError("no metric rows for (" + split + ", " + metric + ")");
  }
  return best->value;
}

}  // namespace vilbert
