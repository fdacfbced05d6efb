#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "autransfer/errors.hpp"
#include "autransfer/textio.hpp"

namespace autransfer {

/// Row-major {0,1} matrix: one row per sample, one column per AU.
/// The 0/1 invariant is enforced at every entry point, so downstream
/// code may trust the contents.
class BinaryMatrix {
 public:
  BinaryMatrix() = default;
  BinaryMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0) {}

  static BinaryMatrix from(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> values) {
    if (values.size() != rows * cols) {
      throw DimensionError("binary matrix: " + std::to_string(values.size()) +
                           " values do not fill " + std::to_string(rows) + "x" +
                           std::to_string(cols));
    }
    for (std::uint8_t v : values) {
      if (v > 1) throw ContractError("binary matrix: non-binary label " + std::to_string(v));
    }
    BinaryMatrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_ = std::move(values);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  std::uint8_t operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  void set(std::size_t r, std::size_t c, bool v) { data_[r * cols_ + c] = v ? 1 : 0; }

  std::span<const std::uint8_t> data() const { return data_; }

  bool operator==(const BinaryMatrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> data_;
};

struct AuConfusion {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;
};

struct AuMetrics {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool degenerate = false;  // some 0/0 fell back to the 0 convention
};

struct MetricsReport {
  double accuracy = 0.0;  // elementwise over all cells for AU reports
  std::vector<AuMetrics> per_au;
  double macro_f1 = 0.0;

  // flat key=value block, one entry per line
  std::string to_text() const {
    std::ostringstream os;
    os << "accuracy=" << format_double(accuracy) << '\n';
    os << "macro_f1=" << format_double(macro_f1) << '\n';
    for (std::size_t a = 0; a < per_au.size(); ++a) {
      char tag[8];
      std::snprintf(tag, sizeof(tag), "au%02zu", a);
      const AuMetrics& m = per_au[a];
      os << tag << "_tp=" << m.tp << '\n';
      os << tag << "_fp=" << m.fp << '\n';
      os << tag << "_fn=" << m.fn << '\n';
      os << tag << "_tn=" << m.tn << '\n';
      os << tag << "_precision=" << format_double(m.precision) << '\n';
      os << tag << "_recall=" << format_double(m.recall) << '\n';
      os << tag << "_f1=" << format_double(m.f1) << '\n';
      os << tag << "_degenerate=" << (m.degenerate ? 1 : 0) << '\n';
    }
    return os.str();
  }
};

/// Fraction of exact matches between two label sequences.
inline double accuracy(std::span<const std::size_t> predictions,
                       std::span<const std::size_t> labels) {
  if (predictions.size() != labels.size()) {
    throw DimensionError("accuracy: " + std::to_string(predictions.size()) +
                         " predictions vs " + std::to_string(labels.size()) + " labels");
  }
  if (predictions.empty()) throw ContractError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

/// Per-AU confusion tally over binary predictions and labels.
inline std::vector<AuConfusion> confusion_counts(const BinaryMatrix& predictions,
                                                 const BinaryMatrix& labels) {
  if (predictions.rows() != labels.rows() || predictions.cols() != labels.cols()) {
    throw DimensionError("confusion_counts: shapes disagree: " +
                         std::to_string(predictions.rows()) + "x" +
                         std::to_string(predictions.cols()) + " vs " +
                         std::to_string(labels.rows()) + "x" + std::to_string(labels.cols()));
  }
  std::vector<AuConfusion> out(predictions.cols());
  for (std::size_t i = 0; i < predictions.rows(); ++i) {
    for (std::size_t a = 0; a < predictions.cols(); ++a) {
      const bool p = predictions(i, a) != 0;
      const bool y = labels(i, a) != 0;
      AuConfusion& c = out[a];
      if (p && y) {
        ++c.tp;
      } else if (p && !y) {
        ++c.fp;
      } else if (!p && y) {
        ++c.fn;
      } else {
        ++c.tn;
      }
    }
  }
  return out;
}

/// Per-AU precision/recall/F1 with the 0/0 -> 0 convention, elementwise
/// accuracy, and macro-F1 as the unweighted mean of per-AU F1.
inline MetricsReport f1_report(const BinaryMatrix& predictions, const BinaryMatrix& labels) {
  const auto counts = confusion_counts(predictions, labels);
  MetricsReport report;
  report.per_au.reserve(counts.size());
  std::size_t hits = 0;
  double f1_sum = 0.0;
  for (const AuConfusion& c : counts) {
    AuMetrics m;
    m.tp = c.tp;
    m.fp = c.fp;
    m.fn = c.fn;
    m.tn = c.tn;
    const bool no_p = (c.tp + c.fp) == 0;
    const bool no_r = (c.tp + c.fn) == 0;
    m.precision = no_p ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    m.recall = no_r ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    const bool no_f = (m.precision + m.recall) == 0.0;
    m.f1 = no_f ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    m.degenerate = no_p || no_r || no_f;
    f1_sum += m.f1;
    hits += c.tp + c.tn;
    report.per_au.push_back(m);
  }
  const std::size_t cells = predictions.rows() * predictions.cols();
  report.accuracy = cells == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(cells);
  report.macro_f1 = counts.empty() ? 0.0 : f1_sum / static_cast<double>(counts.size());
  return report;
}

}  // namespace autransfer
