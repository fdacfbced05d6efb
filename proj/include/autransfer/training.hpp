#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "autransfer/calibration.hpp"
#include "autransfer/data.hpp"
#include "autransfer/errors.hpp"
#include "autransfer/losses.hpp"
#include "autransfer/metrics.hpp"
#include "autransfer/model.hpp"
#include "autransfer/rng.hpp"
#include "autransfer/tensor.hpp"
#include "autransfer/textio.hpp"

namespace autransfer {

constexpr const char* kCheckpointHeader = "AUTRANSFER-CKPT v1";

struct TrainConfig {
  std::size_t epochs_stage1 = 30;
  std::size_t epochs_stage2 = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool shuffle = true;
  bool pos_weighting = false;
  std::size_t stage1_cv_folds = 5;      // 0 or 1 skips cross-validation
  double stage2_label_fraction = 1.0;   // share of stage-two training labels kept

  void validate() const {
    if (!(learning_rate > 0.0)) throw ContractError("train config: learning_rate must be > 0");
    if (batch_size == 0) throw ContractError("train config: batch_size must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ContractError("train config: momentum must be in [0, 1)");
    }
    if (!(stage2_label_fraction > 0.0 && stage2_label_fraction <= 1.0)) {
      throw ContractError("train config: stage2_label_fraction must be in (0, 1]");
    }
  }
};

/// Everything one run reports: loss curves, accuracies, metrics before
/// and after threshold calibration, and the configuration echo that
/// makes the run reproducible.
struct RunRecord {
  std::uint64_t seed = 0;
  std::vector<double> stage1_epoch_loss;
  std::vector<double> stage2_epoch_loss;
  double stage1_train_accuracy = -1.0;
  std::vector<double> fold_accuracies;
  double cv_mean_accuracy = -1.0;
  std::optional<MetricsReport> validation_report;  // stage two at uniform 0.5
  std::optional<MetricsReport> calibrated_report;  // stage two at tuned thresholds
  std::optional<ThresholdVector> thresholds;
  std::string config_echo;

  std::string to_text() const {
    std::ostringstream os;
    os << "seed=" << seed << '\n';
    if (!config_echo.empty()) os << config_echo;
    os << "stage1_epochs=" << stage1_epoch_loss.size() << '\n';
    if (!stage1_epoch_loss.empty()) {
      os << "stage1_first_loss=" << format_double(stage1_epoch_loss.front()) << '\n';
      os << "stage1_final_loss=" << format_double(stage1_epoch_loss.back()) << '\n';
    }
    if (stage1_train_accuracy >= 0.0) {
      os << "stage1_train_accuracy=" << format_double(stage1_train_accuracy) << '\n';
    }
    for (std::size_t f = 0; f < fold_accuracies.size(); ++f) {
      char key[32];
      std::snprintf(key, sizeof(key), "fold%02zu_accuracy", f);
      os << key << '=' << format_double(fold_accuracies[f]) << '\n';
    }
    if (cv_mean_accuracy >= 0.0) {
      os << "cv_mean_accuracy=" << format_double(cv_mean_accuracy) << '\n';
    }
    os << "stage2_epochs=" << stage2_epoch_loss.size() << '\n';
    if (!stage2_epoch_loss.empty()) {
      os << "stage2_first_loss=" << format_double(stage2_epoch_loss.front()) << '\n';
      os << "stage2_final_loss=" << format_double(stage2_epoch_loss.back()) << '\n';
    }
    if (validation_report) {
      os << "pre_macro_f1=" << format_double(validation_report->macro_f1) << '\n';
    }
    if (calibrated_report) {
      os << "post_macro_f1=" << format_double(calibrated_report->macro_f1) << '\n';
    }
    if (thresholds) os << "thresholds=" << thresholds->to_line() << '\n';
    if (validation_report) {
      std::istringstream block(validation_report->to_text());
      std::string line;
      while (std::getline(block, line)) os << "pre_" << line << '\n';
    }
    if (calibrated_report) {
      std::istringstream block(calibrated_report->to_text());
      std::string line;
      while (std::getline(block, line)) os << "post_" << line << '\n';
    }
    return os.str();
  }
};

inline std::string loss_curve_csv(std::span<const double> losses) {
  std::ostringstream os;
  os << "epoch,loss\n";
  for (std::size_t e = 0; e < losses.size(); ++e) {
    os << e << ',' << format_double(losses[e]) << '\n';
  }
  return os.str();
}

/// v <- momentum * v + grad; p <- p - lr * v, per trainable tensor.
/// Tensors without a grad buffer are treated as having zero gradient.
inline void sgd_step(std::span<Tensor> params, double learning_rate, double momentum,
                     std::vector<std::vector<double>>& velocity) {
  if (velocity.size() != params.size()) {
    velocity.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) velocity[i].assign(params[i].size(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = params[i].values();
    auto& vel = velocity[i];
    if (!params[i].has_grad()) {
      for (std::size_t j = 0; j < v.size(); ++j) {
        vel[j] *= momentum;
        v[j] -= learning_rate * vel[j];
      }
      continue;
    }
    auto g = params[i].grad();
    for (std::size_t j = 0; j < v.size(); ++j) {
      vel[j] = momentum * vel[j] + g[j];
      v[j] -= learning_rate * vel[j];
    }
  }
}

class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, double learning_rate, double momentum)
      : params_(std::move(params)), learning_rate_(learning_rate), momentum_(momentum) {
    velocity_.reserve(params_.size());
    for (const Tensor& p : params_) velocity_.emplace_back(p.size(), 0.0);
  }

  void step() { sgd_step(params_, learning_rate_, momentum_, velocity_); }
  void zero_grad() { autransfer::zero_grad(std::span<Tensor>(params_)); }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double learning_rate_;
  double momentum_;
};

// ---- dataset <-> tensor glue ----

inline Tensor features_tensor(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("features_tensor: empty index list");
  std::vector<double> values;
  values.reserve(indices.size() * ds.input_dim);
  for (std::size_t i : indices) {
    const Sample& s = ds.samples[i];
    values.insert(values.end(), s.features.begin(), s.features.end());
  }
  return Tensor({indices.size(), ds.input_dim}, std::move(values));
}

inline std::vector<std::size_t> expression_labels(const Dataset& ds,
                                                  std::span<const std::size_t> indices) {
  std::vector<std::size_t> labels;
  labels.reserve(indices.size());
  for (std::size_t i : indices) {
    const Sample& s = ds.samples[i];
    if (!s.expression) {
      throw ContractError("sample " + std::to_string(i) + " has no expression label");
    }
    labels.push_back(*s.expression);
  }
  return labels;
}

inline BinaryMatrix au_label_matrix(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<std::uint8_t> values;
  values.reserve(indices.size() * ds.num_aus);
  for (std::size_t i : indices) {
    const Sample& s = ds.samples[i];
    if (!s.au_labels) {
      throw ContractError("sample " + std::to_string(i) + " has no AU labels");
    }
    values.insert(values.end(), s.au_labels->begin(), s.au_labels->end());
  }
  return BinaryMatrix::from(indices.size(), ds.num_aus, std::move(values));
}

inline std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

inline std::vector<std::size_t> predict_expressions(const ModelParameters& params,
                                                    const Dataset& ds) {
  Tape tape;
  const auto idx = all_indices(ds);
  Tensor logits = forward_expression(tape, params, forward_features(tape, params, features_tensor(ds, idx)));
  return argmax_rows(logits);
}

inline double expression_accuracy(const ModelParameters& params, const Dataset& ds) {
  const auto idx = all_indices(ds);
  const auto labels = expression_labels(ds, idx);
  const auto preds = predict_expressions(params, ds);
  return accuracy(preds, labels);
}

/// Sigmoid AU scores for every sample, shape [N x num_aus].
inline Tensor au_scores(const ModelParameters& params, const Dataset& ds) {
  Tape tape;
  const auto idx = all_indices(ds);
  Tensor logits = forward_au(tape, params, forward_features(tape, params, features_tensor(ds, idx)));
  return sigmoid(tape, logits);
}

namespace detail {

inline void check_finite_loss(double loss, const char* stage, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw Error(std::string(stage) + ": loss diverged (non-finite) at epoch " +
                std::to_string(epoch));
  }
}

template <typename LossFn>
std::vector<double> run_epochs(ModelParameters& params, const Dataset& ds, std::size_t epochs,
                               const TrainConfig& cfg, std::uint64_t shuffle_seed,
                               const char* stage, LossFn&& batch_loss) {
  SgdOptimizer optimizer(params.trainable_tensors(), cfg.learning_rate, cfg.momentum);
  Rng shuffle_rng(shuffle_seed);
  std::vector<std::size_t> order(ds.samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> epoch_losses;
  epoch_losses.reserve(epochs);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    if (cfg.shuffle) shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> batch(&order[start], end - start);
      Tape tape;
      Tensor loss = batch_loss(tape, batch);
      backward(tape, loss);
      optimizer.step();
      optimizer.zero_grad();
      loss_sum += loss.item() * static_cast<double>(batch.size());
    }
    const double epoch_loss = loss_sum / static_cast<double>(order.size());
    detail::check_finite_loss(epoch_loss, stage, epoch);
    epoch_losses.push_back(epoch_loss);
  }
  return epoch_losses;
}

}  // namespace detail

/// Stage one: minimize expression cross-entropy by mini-batch SGD.
/// Shuffles per epoch from the config seed. Returns the per-epoch loss
/// curve and the final accuracy on the training data.
inline RunRecord train_stage_one(ModelParameters& params, const Dataset& ds,
                                 const TrainConfig& cfg) {
  cfg.validate();
  if (ds.samples.empty()) throw ContractError("train_stage_one: empty dataset");
  if (!params.expression_head) {
    throw ContractError("train_stage_one: parameters have no expression head");
  }
  const std::size_t classes = params.expression_head->out();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    if (!s.expression) {
      throw ContractError("train_stage_one: sample " + std::to_string(i) +
                          " has no expression label");
    }
    if (*s.expression >= classes) {
      throw ContractError("train_stage_one: sample " + std::to_string(i) + " label " +
                          std::to_string(*s.expression) + " out of range [0, " +
                          std::to_string(classes) + ")");
    }
  }
  if (ds.input_dim != params.input_dim()) {
    throw DimensionError("train_stage_one: dataset width " + std::to_string(ds.input_dim) +
                         " vs model input " + std::to_string(params.input_dim()));
  }

  RunRecord record;
  record.seed = cfg.seed;
  record.stage1_epoch_loss = detail::run_epochs(
      params, ds, cfg.epochs_stage1, cfg, derive_seed(cfg.seed, seed_stream::kStageOneShuffle),
      "stage one", [&](Tape& tape, std::span<const std::size_t> batch) {
        Tensor x = features_tensor(ds, batch);
        const auto labels = expression_labels(ds, batch);
        Tensor logits = forward_expression(tape, params, forward_features(tape, params, x));
        return cross_entropy(tape, logits, labels);
      });
  record.stage1_train_accuracy = expression_accuracy(params, ds);
  return record;
}

/// Stage two: minimize the multi-label AU loss over the trainable
/// blocks, honoring the freeze flag set at transfer. When a validation
/// set is supplied the record carries its metrics at uniform 0.5
/// thresholds.
inline RunRecord train_stage_two(ModelParameters& params, const Dataset& ds,
                                 const TrainConfig& cfg, const Dataset* validation = nullptr) {
  cfg.validate();
  if (ds.samples.empty()) throw ContractError("train_stage_two: empty dataset");
  const std::size_t aus = params.num_aus();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (!ds.samples[i].au_labels) {
      throw ContractError("train_stage_two: sample " + std::to_string(i) + " has no AU labels");
    }
  }
  if (ds.num_aus != aus) {
    throw DimensionError("train_stage_two: dataset has " + std::to_string(ds.num_aus) +
                         " AUs, model expects " + std::to_string(aus));
  }
  if (ds.input_dim != params.input_dim()) {
    throw DimensionError("train_stage_two: dataset width " + std::to_string(ds.input_dim) +
                         " vs model input " + std::to_string(params.input_dim()));
  }

  std::vector<double> pos_weights;
  if (cfg.pos_weighting) {
    pos_weights = compute_pos_weights(au_label_matrix(ds, all_indices(ds)));
  }

  RunRecord record;
  record.seed = cfg.seed;
  record.stage2_epoch_loss = detail::run_epochs(
      params, ds, cfg.epochs_stage2, cfg, derive_seed(cfg.seed, seed_stream::kStageTwoShuffle),
      "stage two", [&](Tape& tape, std::span<const std::size_t> batch) {
        Tensor x = features_tensor(ds, batch);
        const BinaryMatrix labels = au_label_matrix(ds, batch);
        Tensor logits = forward_au(tape, params, forward_features(tape, params, x));
        return multi_label_loss(tape, logits, labels, pos_weights);
      });

  if (validation) {
    const Tensor scores = au_scores(params, *validation);
    const BinaryMatrix labels = au_label_matrix(*validation, all_indices(*validation));
    record.validation_report =
        f1_report(apply_thresholds(scores, ThresholdVector::uniform(aus, 0.5)), labels);
  }
  return record;
}

// ---- checkpoints ----

/// Plain-text checkpoint: a version header, then one `[block name rows
/// cols]` section per parameter tensor with row-major values at full
/// round-trip precision. Saving the same parameters twice produces
/// identical bytes.
inline void save_checkpoint(ModelParameters& params, const std::string& path) {
  std::ostringstream os;
  os << kCheckpointHeader << '\n';
  for (auto& [name, tensor] : params.named_tensors()) {
    const std::size_t rows = tensor.rank() == 2 ? tensor.rows() : 1;
    const std::size_t cols = tensor.rank() == 2 ? tensor.cols() : tensor.size();
    os << "[block " << name << ' ' << rows << ' ' << cols << "]\n";
    auto v = tensor.values();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        if (c) os << ' ';
        os << format_double(v[r * cols + c]);
      }
      os << '\n';
    }
  }
  write_text_file(path, os.str());
}

namespace detail {

inline LinearLayer layer_from_blocks(
    const std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<double>>>& blocks,
    const std::string& base, const std::string& path) {
  auto w = blocks.find(base + ".weight");
  auto b = blocks.find(base + ".bias");
  if (w == blocks.end() || b == blocks.end()) {
    throw CheckpointError(path + ": missing block " + base);
  }
  if (b->second.first[0] != 1) {
    throw CheckpointError(path + ": bias block " + base + " must have one row");
  }
  LinearLayer layer;
  layer.weight = Tensor(w->second.first, w->second.second);
  layer.bias = Tensor({b->second.first[1]}, b->second.second);
  if (layer.bias.size() != layer.weight.cols()) {
    throw CheckpointError(path + ": bias width does not match weight for " + base);
  }
  return layer;
}

}  // namespace detail

/// Rebuilds a whole model from a checkpoint, or throws without leaving
/// partial state. Trainability flags reset to true; callers apply their
/// own freeze policy.
inline ModelParameters load_checkpoint(const std::string& path) {
  auto in = open_for_read(path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kCheckpointHeader) {
    throw CheckpointError(path + ": bad or missing checkpoint header");
  }
  std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<double>>> blocks;
  std::vector<std::string> order;
  std::string name;
  std::size_t rows = 0, cols = 0, row = 0;
  std::vector<double> values;
  std::size_t line_no = 1;
  auto finish_block = [&]() {
    if (name.empty()) return;
    if (row != rows) {
      throw CheckpointError(path + ": block " + name + " has " + std::to_string(row) +
                            " rows, declared " + std::to_string(rows));
    }
    blocks[name] = {{rows, cols}, std::move(values)};
    order.push_back(name);
    values = {};
  };
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(line);
    if (body.empty()) continue;
    if (body.front() == '[') {
      finish_block();
      std::istringstream hs(body);
      std::string tag, close;
      if (!(hs >> tag >> name >> rows >> cols >> close) || tag != "[block" || close != "]" ||
          rows == 0 || cols == 0) {
        throw CheckpointError(path + ": line " + std::to_string(line_no) +
                              ": bad block header '" + body + "'");
      }
      row = 0;
      values.clear();
      values.reserve(rows * cols);
      continue;
    }
    if (name.empty()) {
      throw CheckpointError(path + ": line " + std::to_string(line_no) +
                            ": values before any block header");
    }
    std::istringstream vs(body);
    std::size_t count = 0;
    double v;
    while (vs >> v) {
      values.push_back(v);
      ++count;
    }
    if (!vs.eof() || count != cols) {
      throw CheckpointError(path + ": line " + std::to_string(line_no) + ": expected " +
                            std::to_string(cols) + " values in block " + name);
    }
    ++row;
  }
  finish_block();

  std::size_t backbone_layers = 0;
  for (const std::string& key : order) {
    if (key.rfind("backbone", 0) == 0 && key.find(".weight") != std::string::npos) {
      ++backbone_layers;
    }
  }
  ModelParameters params;
  for (std::size_t i = 0; i < backbone_layers; ++i) {
    params.backbone.push_back(detail::layer_from_blocks(blocks, "backbone" + std::to_string(i), path));
  }
  if (blocks.count("expr_head.weight")) {
    params.expression_head = detail::layer_from_blocks(blocks, "expr_head", path);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    params.au_head[i] = detail::layer_from_blocks(blocks, "au_head" + std::to_string(i), path);
  }

  // shape chaining across blocks
  std::size_t width = params.input_dim();
  for (std::size_t i = 0; i < params.backbone.size(); ++i) {
    if (params.backbone[i].in() != width) {
      throw CheckpointError(path + ": backbone layer " + std::to_string(i) +
                            " does not chain from previous width " + std::to_string(width));
    }
    width = params.backbone[i].out();
  }
  if (params.expression_head && params.expression_head->in() != width) {
    throw CheckpointError(path + ": expression head does not chain from backbone");
  }
  if (params.au_head[0].in() != width || params.au_head[1].in() != params.au_head[0].out() ||
      params.au_head[2].in() != params.au_head[1].out()) {
    throw CheckpointError(path + ": AU head layers do not chain");
  }
  const std::size_t expected_blocks =
      params.backbone.size() + (params.expression_head ? 1 : 0) + 3;
  if (order.size() != expected_blocks * 2) {
    throw CheckpointError(path + ": unexpected extra blocks in checkpoint");
  }
  return params;
}

// ---- full pipeline ----

enum class PipelineMode { kTransfer, kScratch };

struct PipelineResult {
  RunRecord record;
  std::optional<ModelParameters> pretrained;  // stage-one result (transfer mode only)
  ModelParameters final_params;
  Dataset dataset;
  std::vector<std::size_t> validation_indices;
};

namespace detail {

inline std::string echo_configs(const GenConfig& gen, const ModelConfig& model,
                                const TrainConfig& train, PipelineMode mode) {
  std::ostringstream os;
  os << "mode=" << (mode == PipelineMode::kTransfer ? "transfer" : "scratch") << '\n';
  os << "gen_num_subjects=" << gen.num_subjects << '\n';
  os << "gen_samples_per_subject=" << gen.samples_per_subject << '\n';
  os << "gen_num_expressions=" << gen.num_expressions << '\n';
  os << "gen_num_aus=" << gen.num_aus << '\n';
  os << "gen_input_dim=" << gen.input_dim << '\n';
  os << "gen_noise_sigma=" << format_double(gen.noise_sigma) << '\n';
  os << "gen_subject_offset_sigma=" << format_double(gen.subject_offset_sigma) << '\n';
  os << "gen_au_flip_prob=" << format_double(gen.au_flip_prob) << '\n';
  os << "gen_imbalance_skew=" << format_double(gen.imbalance_skew) << '\n';
  os << "gen_seed=" << gen.seed << '\n';
  os << "model_input_dim=" << model.input_dim << '\n';
  os << "model_backbone=";
  for (std::size_t i = 0; i < model.backbone_layers.size(); ++i) {
    if (i) os << 'x';
    os << model.backbone_layers[i];
  }
  os << '\n';
  os << "model_num_expressions=" << model.num_expressions << '\n';
  os << "model_num_aus=" << model.num_aus << '\n';
  os << "model_au_head_hidden=" << model.au_head_hidden[0] << 'x' << model.au_head_hidden[1]
     << '\n';
  os << "model_freeze_backbone=" << (model.freeze_backbone_in_stage2 ? 1 : 0) << '\n';
  os << "train_epochs_stage1=" << train.epochs_stage1 << '\n';
  os << "train_epochs_stage2=" << train.epochs_stage2 << '\n';
  os << "train_batch_size=" << train.batch_size << '\n';
  os << "train_learning_rate=" << format_double(train.learning_rate) << '\n';
  os << "train_momentum=" << format_double(train.momentum) << '\n';
  os << "train_shuffle=" << (train.shuffle ? 1 : 0) << '\n';
  os << "train_pos_weighting=" << (train.pos_weighting ? 1 : 0) << '\n';
  os << "train_stage1_cv_folds=" << train.stage1_cv_folds << '\n';
  os << "train_stage2_label_fraction=" << format_double(train.stage2_label_fraction) << '\n';
  return os.str();
}

}  // namespace detail

/// Stage-one cross-validation: subject folds from the seed, a fresh
/// model per fold trained on the fold's training subjects, accuracy read
/// on its held-out subjects. Per-fold seeds derive from the fold index,
/// so results do not depend on execution order.
inline std::vector<double> crossval_stage_one(const Dataset& ds, const ModelConfig& model_cfg,
                                              const TrainConfig& train_cfg, std::size_t k) {
  const FoldSplit split =
      split_subject_folds(ds, k, derive_seed(train_cfg.seed, seed_stream::kFoldSplit));
  std::vector<double> accuracies(k, 0.0);
  for (std::size_t f = 0; f < k; ++f) {
    const std::uint64_t fold_seed =
        derive_seed(derive_seed(train_cfg.seed, seed_stream::kCrossvalFold), f);
    TrainConfig fold_cfg = train_cfg;
    fold_cfg.seed = fold_seed;
    ModelParameters fold_params =
        init_parameters(model_cfg, derive_seed(fold_seed, seed_stream::kInit));
    const Dataset train_ds = subset(ds, split.train_indices[f]);
    const Dataset val_ds = subset(ds, split.validation_indices[f]);
    train_stage_one(fold_params, train_ds, fold_cfg);
    accuracies[f] = expression_accuracy(fold_params, val_ds);
  }
  return accuracies;
}

/// The whole experiment: generate data, pretrain on expressions (with
/// subject-independent CV for the reported accuracy, then a retrain on
/// all data), transfer the backbone, fine-tune the AU head on a fixed
/// subject split, and calibrate per-AU thresholds on the validation
/// scores. Scratch mode skips pretraining and transfer and fine-tunes a
/// freshly initialized network instead; both modes share every seed
/// stream, so a zero-epoch stage one makes them coincide exactly.
inline PipelineResult run_pipeline(const GenConfig& gen_cfg, const ModelConfig& model_cfg,
                                   const TrainConfig& train_cfg, std::span<const double> grid,
                                   PipelineMode mode = PipelineMode::kTransfer) {
  gen_cfg.validate();
  model_cfg.validate();
  train_cfg.validate();
  if (gen_cfg.input_dim != model_cfg.input_dim || gen_cfg.num_aus != model_cfg.num_aus ||
      gen_cfg.num_expressions != model_cfg.num_expressions) {
    throw ContractError("run_pipeline: generator and model dimensions disagree");
  }

  PipelineResult result;
  result.dataset = generate_synthetic(gen_cfg);
  const Dataset& ds = result.dataset;

  RunRecord record;
  record.seed = train_cfg.seed;
  record.config_echo = detail::echo_configs(gen_cfg, model_cfg, train_cfg, mode);

  const std::uint64_t init_seed = derive_seed(train_cfg.seed, seed_stream::kInit);
  ModelParameters stage2_params;
  if (mode == PipelineMode::kTransfer) {
    if (train_cfg.stage1_cv_folds >= 2) {
      record.fold_accuracies =
          crossval_stage_one(ds, model_cfg, train_cfg, train_cfg.stage1_cv_folds);
      double sum = 0.0;
      for (double a : record.fold_accuracies) sum += a;
      record.cv_mean_accuracy = sum / static_cast<double>(record.fold_accuracies.size());
    }
    ModelParameters pretrained = init_parameters(model_cfg, init_seed);
    RunRecord stage1 = train_stage_one(pretrained, ds, train_cfg);
    record.stage1_epoch_loss = std::move(stage1.stage1_epoch_loss);
    record.stage1_train_accuracy = stage1.stage1_train_accuracy;
    stage2_params = transfer_backbone(pretrained, model_cfg, init_seed);
    result.pretrained = std::move(pretrained);
  } else {
    stage2_params = init_parameters(model_cfg, init_seed);
    stage2_params.expression_head.reset();
    stage2_params.backbone_trainable = !model_cfg.freeze_backbone_in_stage2;
  }

  const FoldSplit stage2_split =
      split_subject_folds(ds, 5, derive_seed(train_cfg.seed, seed_stream::kStageTwoSplit));
  std::vector<std::size_t> train_idx = stage2_split.train_indices[0];
  result.validation_indices = stage2_split.validation_indices[0];
  if (train_cfg.stage2_label_fraction < 1.0) {
    Rng rng(derive_seed(train_cfg.seed, seed_stream::kLabelSubsample));
    rng.shuffle(train_idx);
    const std::size_t keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::llround(train_cfg.stage2_label_fraction * double(train_idx.size()))));
    train_idx.resize(std::min(keep, train_idx.size()));
    std::sort(train_idx.begin(), train_idx.end());
  }
  const Dataset train_ds = subset(ds, train_idx);
  const Dataset val_ds = subset(ds, result.validation_indices);

  RunRecord stage2 = train_stage_two(stage2_params, train_ds, train_cfg, &val_ds);
  record.stage2_epoch_loss = std::move(stage2.stage2_epoch_loss);
  record.validation_report = std::move(stage2.validation_report);

  const Tensor scores = au_scores(stage2_params, val_ds);
  const BinaryMatrix val_labels = au_label_matrix(val_ds, all_indices(val_ds));
  const CalibrationResult calib = calibrate_thresholds(scores, val_labels, grid);
  record.thresholds = calib.thresholds;
  record.calibrated_report = f1_report(apply_thresholds(scores, calib.thresholds), val_labels);

  result.record = std::move(record);
  result.final_params = std::move(stage2_params);
  return result;
}

}  // namespace autransfer
