#pragma once

#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "autransfer/errors.hpp"
#include "autransfer/metrics.hpp"
#include "autransfer/tensor.hpp"
#include "autransfer/textio.hpp"

namespace autransfer {

constexpr const char* kScoresHeaderPrefix = "AUTRANSFER-SCORES v1";

/// One decision threshold per AU, each in the open interval (0, 1).
struct ThresholdVector {
  std::vector<double> thresholds;

  void validate() const {
    if (thresholds.empty()) throw ContractError("thresholds: empty vector");
    for (double t : thresholds) {
      if (!(t > 0.0 && t < 1.0)) {
        throw ContractError("thresholds: value " + format_double(t) + " outside (0, 1)");
      }
    }
  }

  static ThresholdVector uniform(std::size_t num_aus, double value) {
    ThresholdVector tv;
    tv.thresholds.assign(num_aus, value);
    tv.validate();
    return tv;
  }

  std::string to_line() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (i) os << ',';
      os << format_double(thresholds[i]);
    }
    return os.str();
  }
};

struct CalibrationResult {
  ThresholdVector thresholds;
  std::vector<double> best_f1;   // per AU, on the calibration data
  std::vector<bool> degenerate;  // no positive labels: every threshold ties at F1 = 0
};

/// 0.05, 0.10, ... 0.95. Built as i/20 so the midpoint 0.5 is exact.
inline std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 19; ++i) grid.push_back(static_cast<double>(i) / 20.0);
  return grid;
}

namespace detail {

inline double f1_at_threshold(const Tensor& scores, const BinaryMatrix& labels, std::size_t au,
                              double threshold) {
  std::size_t tp = 0, fp = 0, fn = 0;
  const std::size_t n = scores.rows(), a = scores.cols();
  auto sv = scores.values();
  for (std::size_t i = 0; i < n; ++i) {
    const bool pred = sv[i * a + au] >= threshold;
    const bool truth = labels(i, au) != 0;
    if (pred && truth) {
      ++tp;
    } else if (pred && !truth) {
      ++fp;
    } else if (!pred && truth) {
      ++fn;
    }
  }
  const double precision = (tp + fp) == 0 ? 0.0 : double(tp) / double(tp + fp);
  const double recall = (tp + fn) == 0 ? 0.0 : double(tp) / double(tp + fn);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

inline void require_scores(const Tensor& scores, const char* op) {
  require_matrix(scores, op);
  for (double v : scores.values()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError(std::string(op) + ": score " + format_double(v) + " outside [0, 1]");
    }
  }
}

}  // namespace detail

/// Independent exhaustive grid search per AU for the threshold that
/// maximizes that AU's F1 on the given scores. Ties break toward the
/// smallest grid value. The grid must contain 0.5 exactly; that grid
/// point is what makes calibrated macro-F1 on the calibration set never
/// fall below the uniform-0.5 baseline.
inline CalibrationResult calibrate_thresholds(const Tensor& scores, const BinaryMatrix& labels,
                                              std::span<const double> grid) {
  detail::require_scores(scores, "calibrate_thresholds");
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
    throw DimensionError("calibrate_thresholds: scores " + shape_string(scores.shape()) +
                         " vs labels " + std::to_string(labels.rows()) + "x" +
                         std::to_string(labels.cols()));
  }
  if (grid.empty()) throw ContractError("calibrate_thresholds: empty grid");
  bool has_midpoint = false;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] > 0.0 && grid[i] < 1.0)) {
      throw ContractError("calibrate_thresholds: grid value " + format_double(grid[i]) +
                          " outside (0, 1)");
    }
    if (i > 0 && grid[i] <= grid[i - 1]) {
      throw ContractError("calibrate_thresholds: grid must be strictly ascending");
    }
    if (grid[i] == 0.5) has_midpoint = true;
  }
  if (!has_midpoint) throw ContractError("calibrate_thresholds: grid must contain 0.5");

  const std::size_t aus = scores.cols();
  CalibrationResult result;
  result.thresholds.thresholds.resize(aus);
  result.best_f1.resize(aus);
  result.degenerate.resize(aus);
  for (std::size_t a = 0; a < aus; ++a) {
    double best_threshold = grid[0];
    double best = -1.0;
    for (double t : grid) {
      const double f1 = detail::f1_at_threshold(scores, labels, a, t);
      if (f1 > best) {
        best = f1;
        best_threshold = t;
      }
    }
    std::size_t positives = 0;
    for (std::size_t i = 0; i < labels.rows(); ++i) positives += labels(i, a);
    result.thresholds.thresholds[a] = best_threshold;
    result.best_f1[a] = best;
    result.degenerate[a] = positives == 0;
  }
  return result;
}

/// prediction = 1 iff score >= threshold, per AU. The boundary counts as
/// a positive so the rule is deterministic.
inline BinaryMatrix apply_thresholds(const Tensor& scores, const ThresholdVector& tv) {
  detail::require_scores(scores, "apply_thresholds");
  tv.validate();
  if (scores.cols() != tv.thresholds.size()) {
    throw DimensionError("apply_thresholds: scores " + shape_string(scores.shape()) + " vs " +
                         std::to_string(tv.thresholds.size()) + " thresholds");
  }
  BinaryMatrix out(scores.rows(), scores.cols());
  auto sv = scores.values();
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    for (std::size_t a = 0; a < scores.cols(); ++a) {
      out.set(i, a, sv[i * scores.cols() + a] >= tv.thresholds[a]);
    }
  }
  return out;
}

inline void write_thresholds(const ThresholdVector& tv, const std::string& path) {
  tv.validate();
  write_text_file(path, tv.to_line() + "\n");
}

inline ThresholdVector read_thresholds(const std::string& path) {
  auto in = open_for_read(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty thresholds file");
  ThresholdVector tv;
  for (const std::string& field : split(trim(line), ',')) {
    tv.thresholds.push_back(parse_double(field, 1));
  }
  for (double t : tv.thresholds) {
    if (!(t > 0.0 && t < 1.0)) {
      throw FormatError(path + ": threshold " + format_double(t) + " outside (0, 1)");
    }
  }
  return tv;
}

/// Validation scores paired with their labels, as written by finetune
/// and consumed by calibrate. One line per sample: the AU labels, then
/// the scores, comma-separated.
inline void write_scores(const Tensor& scores, const BinaryMatrix& labels,
                         const std::string& path) {
  detail::require_scores(scores, "write_scores");
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
    throw DimensionError("write_scores: scores " + shape_string(scores.shape()) + " vs labels " +
                         std::to_string(labels.rows()) + "x" + std::to_string(labels.cols()));
  }
  std::ostringstream os;
  os << kScoresHeaderPrefix << ',' << scores.cols() << '\n';
  auto sv = scores.values();
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    for (std::size_t a = 0; a < scores.cols(); ++a) {
      if (a) os << ',';
      os << static_cast<int>(labels(i, a));
    }
    for (std::size_t a = 0; a < scores.cols(); ++a) {
      os << ',' << format_double(sv[i * scores.cols() + a]);
    }
    os << '\n';
  }
  write_text_file(path, os.str());
}

inline std::pair<Tensor, BinaryMatrix> read_scores(const std::string& path) {
  auto in = open_for_read(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file, missing header");
  auto header = split(trim(line), ',');
  if (header.size() != 2 || header[0] != kScoresHeaderPrefix) {
    throw FormatError(path + ": bad header '" + line + "'");
  }
  const long long aus_field = parse_int(header[1], 1);
  if (aus_field <= 0) throw FormatError(path + ": non-positive AU count in header");
  const std::size_t aus = static_cast<std::size_t>(aus_field);

  std::vector<double> score_values;
  std::vector<std::uint8_t> label_values;
  std::size_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(line);
    if (body.empty()) continue;
    auto fields = split(body, ',');
    if (fields.size() != 2 * aus) {
      throw FormatError(path + ": line " + std::to_string(line_no) + ": " +
                        std::to_string(fields.size()) + " fields, expected " +
                        std::to_string(2 * aus));
    }
    for (std::size_t a = 0; a < aus; ++a) {
      const long long b = parse_int(fields[a], line_no);
      if (b != 0 && b != 1) {
        throw ParseError("line " + std::to_string(line_no) + ": label must be 0 or 1, got " +
                         fields[a]);
      }
      label_values.push_back(static_cast<std::uint8_t>(b));
    }
    for (std::size_t a = 0; a < aus; ++a) {
      const double v = parse_double(fields[aus + a], line_no);
      if (!(v >= 0.0 && v <= 1.0)) {
        throw FormatError(path + ": line " + std::to_string(line_no) + ": score " +
                          format_double(v) + " outside [0, 1]");
      }
      score_values.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw FormatError(path + ": no score rows");
  Tensor scores({rows, aus}, std::move(score_values));
  BinaryMatrix labels = BinaryMatrix::from(rows, aus, std::move(label_values));
  return {std::move(scores), std::move(labels)};
}

}  // namespace autransfer
