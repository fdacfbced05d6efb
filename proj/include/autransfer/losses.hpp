#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "autransfer/errors.hpp"
#include "autransfer/metrics.hpp"
#include "autransfer/tensor.hpp"

namespace autransfer {

/// Mean categorical cross-entropy of raw logits against class indices.
///
/// Computed through log-sum-exp per row; the log of a softmax output is
/// never formed, so saturated logits cannot produce log(0).
inline Tensor cross_entropy(Tape& tape, Tensor logits,
                            std::span<const std::size_t> labels) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t batch = logits.rows(), classes = logits.cols();
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
  }
  for (std::size_t l : labels) {
    if (l >= classes) {
      throw ContractError("cross_entropy: label " + std::to_string(l) + " out of range [0, " +
                          std::to_string(classes) + ")");
    }
  }
  auto xv = logits.values();
  std::vector<double> probs(batch * classes);
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const double* row = &xv[i * classes];
    double mx = row[0];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < classes; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < classes; ++j) probs[i * classes + j] = std::exp(row[j] - lse);
    total += lse - row[labels[i]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(batch));
  std::vector<std::size_t> owned_labels(labels.begin(), labels.end());
  tape.record([logits, out, probs = std::move(probs), owned_labels = std::move(owned_labels),
               batch, classes]() mutable {
    if (!out.has_grad()) return;
    const double g = out.grad()[0] / static_cast<double>(batch);
    logits.ensure_grad();
    auto dx = logits.grad();
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t j = 0; j < classes; ++j) {
        const double onehot = j == owned_labels[i] ? 1.0 : 0.0;
        dx[i * classes + j] += g * (probs[i * classes + j] - onehot);
      }
    }
  });
  return out;
}

/// Mean per-AU binary cross-entropy of raw logits against multi-hot
/// labels, in the log-sigmoid (softplus) form that stays finite for
/// saturated logits. When pos_weights is supplied, the term of a
/// positive label in column j is scaled by pos_weights[j]; negative
/// terms keep weight 1.
inline Tensor multi_label_loss(Tape& tape, Tensor logits, BinaryMatrix labels,
                               std::span<const double> pos_weights = {}) {
  detail::require_matrix(logits, "multi_label_loss");
  const std::size_t batch = logits.rows(), aus = logits.cols();
  if (labels.rows() != batch || labels.cols() != aus) {
    throw DimensionError("multi_label_loss: logits " + shape_string(logits.shape()) +
                         " vs labels " + std::to_string(labels.rows()) + "x" +
                         std::to_string(labels.cols()));
  }
  if (!pos_weights.empty()) {
    if (pos_weights.size() != aus) {
      throw DimensionError("multi_label_loss: " + std::to_string(pos_weights.size()) +
                           " pos_weights for " + std::to_string(aus) + " AUs");
    }
    for (double w : pos_weights) {
      if (!(w > 0.0)) throw ContractError("multi_label_loss: pos_weights must be positive");
    }
  }
  auto xv = logits.values();
  const double denom = static_cast<double>(batch * aus);
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < aus; ++j) {
      const double z = xv[i * aus + j];
      const bool y = labels(i, j) != 0;
      const double t = y ? -z : z;  // elementwise loss is softplus(t)
      const double sp = t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
      const double w = (y && !pos_weights.empty()) ? pos_weights[j] : 1.0;
      total += w * sp;
    }
  }
  Tensor out = Tensor::scalar(total / denom);
  std::vector<double> owned_weights(pos_weights.begin(), pos_weights.end());
  tape.record([logits, out, labels, owned_weights = std::move(owned_weights), batch, aus,
               denom]() mutable {
    if (!out.has_grad()) return;
    const double g = out.grad()[0] / denom;
    logits.ensure_grad();
    auto dx = logits.grad();
    auto xv = logits.values();
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t j = 0; j < aus; ++j) {
        const double z = xv[i * aus + j];
        const double y = labels(i, j) != 0 ? 1.0 : 0.0;
        const double w = (y != 0.0 && !owned_weights.empty()) ? owned_weights[j] : 1.0;
        dx[i * aus + j] += g * w * (detail::stable_sigmoid(z) - y);
      }
    }
  });
  return out;
}

/// Per-AU ratio of negative to positive label counts. AUs with no
/// positives or no negatives fall back to 1.0.
inline std::vector<double> compute_pos_weights(const BinaryMatrix& labels) {
  if (labels.rows() == 0) throw ContractError("compute_pos_weights: empty label matrix");
  std::vector<double> out(labels.cols(), 1.0);
  for (std::size_t j = 0; j < labels.cols(); ++j) {
    std::size_t positives = 0;
    for (std::size_t i = 0; i < labels.rows(); ++i) positives += labels(i, j);
    const std::size_t negatives = labels.rows() - positives;
    if (positives > 0 && negatives > 0) {
      out[j] = static_cast<double>(negatives) / static_cast<double>(positives);
    }
  }
  return out;
}

}  // namespace autransfer
