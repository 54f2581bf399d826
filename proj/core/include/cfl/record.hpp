#pragma once

#include <filesystem>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

namespace cfl {

/// One row of per-iteration metrics.
struct RunRow {
  long iter = 0;
  double train_loss = 0.0;
  /// NaN when the run was not evaluated at this iteration.
  double eval_metric = std::numeric_limits<double>::quiet_NaN();
  double w_delta = 0.0;
  double wall_ms = 0.0;
};

/// Per-iteration metrics of one run. Iterations are strictly increasing.
class RunRecord {
 public:
  void append(const RunRow& row);
  const std::vector<RunRow>& rows() const noexcept { return rows_; }
  bool empty() const noexcept { return rows_.empty(); }
  const RunRow& back() const { return rows_.back(); }
  /// Last evaluated metric, NaN if none.
  double last_eval() const;
  double mean_w_delta() const;

 private:
  std::vector<RunRow> rows_;
};

/// CSV header: iter,train_loss,eval_metric,w_delta,wall_ms
inline constexpr const char* kRunCsvHeader = "iter,train_loss,eval_metric,w_delta,wall_ms";

/// Shortest round-trip decimal representation; empty string for NaN.
std::string format_real(double v);

void write_csv(std::ostream& os, const RunRecord& record);
void write_csv(const std::filesystem::path& path, const RunRecord& record);
RunRecord read_csv(const std::filesystem::path& path);

}  // namespace cfl
