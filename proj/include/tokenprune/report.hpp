#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace tokenprune {

inline constexpr const char* kCodeVersion = "tokenprune 0.1.0";

inline constexpr const char* kReportHeader =
    "scene_id,mode,ratio_requested,ratio_realized,pruning_accuracy,spearman,flops_relative,"
    "K,lambda,G,d_lowrank,seed";

struct ReportRow {
  int scene_id = 0;  // -1 marks an aggregate row (sweeps)
  std::string mode;
  double ratio_requested = 0.0;
  double ratio_realized = 0.0;
  double pruning_accuracy = 0.0;
  double spearman = 0.0;
  double flops_relative = 1.0;
  int skip_layers = 0;  // K column
  double lambda = 0.0;
  int n_estimator_layers = 0;  // G column
  int d_lowrank = 0;
  std::uint64_t seed = 0;

  bool operator==(const ReportRow&) const = default;
};

struct AggregateRow {
  std::string mode;
  double ratio_requested = 0.0;
  int skip_layers = 0;
  double lambda = 0.0;
  int n_estimator_layers = 0;
  int d_lowrank = 0;
  int count = 0;
  double mean_ratio_realized = 0.0, sd_ratio_realized = 0.0;
  double mean_pruning_accuracy = 0.0, sd_pruning_accuracy = 0.0;
  double mean_spearman = 0.0, sd_spearman = 0.0;
  double mean_flops_relative = 0.0, sd_flops_relative = 0.0;
};

struct Report {
  std::vector<ReportRow> rows;
  nlohmann::json config_echo;
  std::string code_version = kCodeVersion;
  double wall_clock_seconds = 0.0;
  nlohmann::json extra;  // loss history, eval summaries, calibration detail

  // Group means/sds over scenes, keyed by (mode, ratio_requested, K, lambda,
  // G, d_lowrank), in first-appearance order.
  std::vector<AggregateRow> aggregates() const;
};

// Writes `<path>` as CSV plus a JSON sidecar next to it (same stem, .json).
// Refuses reports with no rows.
void write_report(const Report& report, const std::filesystem::path& csv_path);
Report read_report(const std::filesystem::path& csv_path);

// 17-significant-digit formatting; round-trips doubles exactly.
std::string format_double(double v);

}  // namespace tokenprune
