#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "autransfer/errors.hpp"
#include "autransfer/rng.hpp"
#include "autransfer/tensor.hpp"

namespace autransfer {

/// Topology of the backbone feature extractor plus the two task heads.
/// The AU head always has exactly two hidden layers; the expression head
/// is a single linear map.
struct ModelConfig {
  std::size_t input_dim = 64;
  std::vector<std::size_t> backbone_layers{128, 64};
  std::size_t num_expressions = 6;
  std::size_t num_aus = 12;
  std::array<std::size_t, 2> au_head_hidden{32, 16};
  bool freeze_backbone_in_stage2 = false;

  std::size_t feature_dim() const {
    return backbone_layers.empty() ? input_dim : backbone_layers.back();
  }

  void validate() const {
    if (input_dim == 0) throw ContractError("model config: input_dim must be positive");
    if (num_expressions == 0) {
      throw ContractError("model config: num_expressions must be positive");
    }
    if (num_aus == 0) throw ContractError("model config: num_aus must be positive");
    for (std::size_t w : backbone_layers) {
      if (w == 0) throw ContractError("model config: backbone widths must be positive");
    }
    for (std::size_t w : au_head_hidden) {
      if (w == 0) throw ContractError("model config: AU head widths must be positive");
    }
  }
};

struct LinearLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }
};

/// All weights and biases of the network, grouped by block, with a
/// trainability flag per block. The expression head is dropped after
/// transfer to the AU task.
struct ModelParameters {
  std::vector<LinearLayer> backbone;
  std::optional<LinearLayer> expression_head;
  std::array<LinearLayer, 3> au_head;
  bool backbone_trainable = true;
  bool expression_head_trainable = true;
  bool au_head_trainable = true;

  std::size_t input_dim() const {
    return backbone.empty() ? au_head[0].in() : backbone[0].in();
  }
  std::size_t feature_dim() const { return au_head[0].in(); }
  std::size_t num_aus() const { return au_head[2].out(); }

  std::vector<Tensor> trainable_tensors() {
    std::vector<Tensor> out;
    if (backbone_trainable) {
      for (auto& layer : backbone) {
        out.push_back(layer.weight);
        out.push_back(layer.bias);
      }
    }
    if (expression_head_trainable && expression_head) {
      out.push_back(expression_head->weight);
      out.push_back(expression_head->bias);
    }
    if (au_head_trainable) {
      for (auto& layer : au_head) {
        out.push_back(layer.weight);
        out.push_back(layer.bias);
      }
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named_tensors() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      out.emplace_back("backbone" + std::to_string(i) + ".weight", backbone[i].weight);
      out.emplace_back("backbone" + std::to_string(i) + ".bias", backbone[i].bias);
    }
    if (expression_head) {
      out.emplace_back("expr_head.weight", expression_head->weight);
      out.emplace_back("expr_head.bias", expression_head->bias);
    }
    for (std::size_t i = 0; i < au_head.size(); ++i) {
      out.emplace_back("au_head" + std::to_string(i) + ".weight", au_head[i].weight);
      out.emplace_back("au_head" + std::to_string(i) + ".bias", au_head[i].bias);
    }
    return out;
  }
};

namespace detail {

inline LinearLayer init_linear(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(fan_in * fan_out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  LinearLayer layer;
  layer.weight = Tensor({fan_in, fan_out}, std::move(w));
  layer.bias = Tensor({fan_out});
  return layer;
}

}  // namespace detail

/// Fresh parameters for the full network. Weights are drawn uniformly
/// from +-sqrt(6 / (fan_in + fan_out)); biases start at zero. The draw
/// order is fixed (backbone, expression head, AU head), so equal seeds
/// give bit-identical parameters.
inline ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ModelParameters params;
  std::size_t width = config.input_dim;
  for (std::size_t next : config.backbone_layers) {
    params.backbone.push_back(detail::init_linear(rng, width, next));
    width = next;
  }
  params.expression_head = detail::init_linear(rng, width, config.num_expressions);
  params.au_head[0] = detail::init_linear(rng, width, config.au_head_hidden[0]);
  params.au_head[1] = detail::init_linear(rng, config.au_head_hidden[0], config.au_head_hidden[1]);
  params.au_head[2] = detail::init_linear(rng, config.au_head_hidden[1], config.num_aus);
  return params;
}

/// Closed-form parameter count for a configuration: sum over all layers
/// of (fan_in + 1) * fan_out.
inline std::size_t parameter_count(const ModelConfig& config) {
  std::size_t total = 0;
  std::size_t width = config.input_dim;
  for (std::size_t next : config.backbone_layers) {
    total += (width + 1) * next;
    width = next;
  }
  total += (width + 1) * config.num_expressions;
  total += (width + 1) * config.au_head_hidden[0];
  total += (config.au_head_hidden[0] + 1) * config.au_head_hidden[1];
  total += (config.au_head_hidden[1] + 1) * config.num_aus;
  return total;
}

inline std::size_t parameter_count(ModelParameters& params) {
  std::size_t total = 0;
  for (auto& [name, tensor] : params.named_tensors()) total += tensor.size();
  return total;
}

/// Backbone pass: alternating linear and ReLU through every configured
/// hidden layer. With an empty backbone the input is the feature vector.
inline Tensor forward_features(Tape& tape, const ModelParameters& params, const Tensor& x) {
  detail::require_matrix(x, "forward_features");
  if (x.cols() != params.input_dim()) {
    throw DimensionError("forward_features: input width " + std::to_string(x.cols()) +
                         " does not match model input " + std::to_string(params.input_dim()));
  }
  Tensor h = x;
  for (const LinearLayer& layer : params.backbone) {
    h = relu(tape, add_bias(tape, matmul(tape, h, layer.weight), layer.bias));
  }
  return h;
}

/// Expression head: one linear map producing raw logits. The softmax
/// link lives inside the loss, not here.
inline Tensor forward_expression(Tape& tape, const ModelParameters& params,
                                 const Tensor& features) {
  if (!params.expression_head) {
    throw ContractError("forward_expression: expression head absent (dropped after transfer)");
  }
  return add_bias(tape, matmul(tape, features, params.expression_head->weight),
                  params.expression_head->bias);
}

/// AU head: linear -> ReLU -> linear -> ReLU -> linear, producing raw
/// logits. The sigmoid link lives inside the loss and scoring code.
inline Tensor forward_au(Tape& tape, const ModelParameters& params, const Tensor& features) {
  Tensor h = relu(tape, add_bias(tape, matmul(tape, features, params.au_head[0].weight),
                                 params.au_head[0].bias));
  h = relu(tape, add_bias(tape, matmul(tape, h, params.au_head[1].weight), params.au_head[1].bias));
  return add_bias(tape, matmul(tape, h, params.au_head[2].weight), params.au_head[2].bias);
}

/// Carries a pretrained backbone into a fresh stage-two model: backbone
/// weights are deep-copied, the AU head is freshly initialized from the
/// seed (identical to init_parameters with that seed), and the
/// expression head is dropped. The backbone stays trainable unless the
/// target config freezes it.
inline ModelParameters transfer_backbone(const ModelParameters& pretrained,
                                         const ModelConfig& target_config, std::uint64_t seed) {
  target_config.validate();
  if (pretrained.backbone.size() != target_config.backbone_layers.size()) {
    throw TransferError("transfer: pretrained backbone has " +
                        std::to_string(pretrained.backbone.size()) + " layers, target expects " +
                        std::to_string(target_config.backbone_layers.size()));
  }
  std::size_t width = target_config.input_dim;
  for (std::size_t i = 0; i < pretrained.backbone.size(); ++i) {
    const LinearLayer& layer = pretrained.backbone[i];
    if (layer.in() != width || layer.out() != target_config.backbone_layers[i]) {
      throw TransferError("transfer: backbone layer " + std::to_string(i) + " is " +
                          shape_string(layer.weight.shape()) + ", target expects [" +
                          std::to_string(width) + "x" +
                          std::to_string(target_config.backbone_layers[i]) + "]");
    }
    width = target_config.backbone_layers[i];
  }
  ModelParameters params = init_parameters(target_config, seed);
  for (std::size_t i = 0; i < params.backbone.size(); ++i) {
    params.backbone[i].weight = pretrained.backbone[i].weight.clone();
    params.backbone[i].bias = pretrained.backbone[i].bias.clone();
  }
  params.expression_head.reset();
  params.backbone_trainable = !target_config.freeze_backbone_in_stage2;
  return params;
}

/// Empty string when the parameters fit the configuration; otherwise a
/// description of the first mismatch.
inline std::string config_mismatch(const ModelParameters& params, const ModelConfig& config) {
  if (params.backbone.size() != config.backbone_layers.size()) {
    return "backbone has " + std::to_string(params.backbone.size()) + " layers, config expects " +
           std::to_string(config.backbone_layers.size());
  }
  std::size_t width = config.input_dim;
  for (std::size_t i = 0; i < params.backbone.size(); ++i) {
    if (params.backbone[i].in() != width || params.backbone[i].out() != config.backbone_layers[i]) {
      return "backbone layer " + std::to_string(i) + " is " +
             shape_string(params.backbone[i].weight.shape());
    }
    width = config.backbone_layers[i];
  }
  if (params.expression_head &&
      (params.expression_head->in() != width ||
       params.expression_head->out() != config.num_expressions)) {
    return "expression head is " + shape_string(params.expression_head->weight.shape());
  }
  const std::size_t au_dims[4] = {width, config.au_head_hidden[0], config.au_head_hidden[1],
                                  config.num_aus};
  for (std::size_t i = 0; i < 3; ++i) {
    if (params.au_head[i].in() != au_dims[i] || params.au_head[i].out() != au_dims[i + 1]) {
      return "AU head layer " + std::to_string(i) + " is " +
             shape_string(params.au_head[i].weight.shape());
    }
  }
  return "";
}

}  // namespace autransfer
