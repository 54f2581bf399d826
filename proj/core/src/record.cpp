#include "cfl/record.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cfl/errors.hpp"

namespace cfl {

void RunRecord::append(const RunRow& row) {
  if (!rows_.empty() && row.iter <= rows_.back().iter) {
    throw StateError("RunRecord: iterations must be strictly increasing");
  }
  rows_.push_back(row);
}

double RunRecord::last_eval() const {
  for (auto it = rows_.rbegin(); it != rows_.rend(); ++it) {
    if (!std::isnan(it->eval_metric)) return it->eval_metric;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

double RunRecord::mean_w_delta() const {
  if (rows_.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows_) s += r.w_delta;
  return s / static_cast<double>(rows_.size());
}

std::string format_real(double v) {
  if (std::isnan(v)) return {};
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_csv(std::ostream& os, const RunRecord& record) {
  os << kRunCsvHeader << '\n';
  for (const auto& r : record.rows()) {
    os << r.iter << ',' << format_real(r.train_loss) << ',' << format_real(r.eval_metric) << ','
       << format_real(r.w_delta) << ',' << format_real(r.wall_ms) << '\n';
  }
}

void write_csv(const std::filesystem::path& path, const RunRecord& record) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_csv(os, record);
  if (!os) throw IoError("failed writing " + path.string());
}

namespace {

double parse_field(const std::string& f) {
  if (f.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto res = std::from_chars(f.data(), f.data() + f.size(), v);
  if (res.ec != std::errc{}) throw IoError("bad numeric field '" + f + "'");
  return v;
}

}  // namespace

RunRecord read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != kRunCsvHeader) throw IoError(path.string() + ": unexpected header");
  RunRecord rec;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 5) throw IoError(path.string() + ": expected 5 columns");
    RunRow r;
    r.iter = std::stol(f[0]);
    r.train_loss = parse_field(f[1]);
    r.eval_metric = parse_field(f[2]);
    r.w_delta = parse_field(f[3]);
    r.wall_ms = parse_field(f[4]);
    rec.append(r);
  }
  return rec;
}

}  // namespace cfl
