#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "autransfer/errors.hpp"
#include "autransfer/rng.hpp"
#include "autransfer/textio.hpp"

namespace autransfer {

constexpr const char* kDatasetHeaderPrefix = "AUTRANSFER-DATA v1";

/// One record: subject, optional expression class, optional multi-hot AU
/// labels, and a fixed-width feature vector. At least one label kind
/// must be present.
struct Sample {
  std::uint64_t subject_id = 0;
  std::optional<std::size_t> expression;
  std::optional<std::vector<std::uint8_t>> au_labels;
  std::vector<double> features;
};

struct Dataset {
  std::size_t input_dim = 0;
  std::size_t num_aus = 0;
  std::vector<Sample> samples;

  void validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Sample& s = samples[i];
      if (!s.expression && !s.au_labels) {
        throw ContractError("dataset: sample " + std::to_string(i) + " carries no label");
      }
      if (s.features.size() != input_dim) {
        throw DimensionError("dataset: sample " + std::to_string(i) + " has " +
                             std::to_string(s.features.size()) + " features, expected " +
                             std::to_string(input_dim));
      }
      if (s.au_labels && s.au_labels->size() != num_aus) {
        throw DimensionError("dataset: sample " + std::to_string(i) + " has " +
                             std::to_string(s.au_labels->size()) + " AU labels, expected " +
                             std::to_string(num_aus));
      }
    }
  }

  std::vector<std::uint64_t> distinct_subjects() const {
    std::set<std::uint64_t> ids;
    for (const Sample& s : samples) ids.insert(s.subject_id);
    return {ids.begin(), ids.end()};
  }
};

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.input_dim = ds.input_dim;
  out.num_aus = ds.num_aus;
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(ds.samples[i]);
  return out;
}

/// Generator parameters. Expression priors follow a geometric tilt:
/// prior(e) proportional to imbalance_skew^e, so 1.0 means uniform.
struct GenConfig {
  std::size_t num_subjects = 25;
  std::size_t samples_per_subject = 20;
  std::size_t num_expressions = 6;
  std::size_t num_aus = 12;
  std::size_t input_dim = 64;
  double noise_sigma = 0.3;
  double subject_offset_sigma = 0.5;
  double au_flip_prob = 0.05;
  double imbalance_skew = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_subjects == 0) throw ContractError("gen config: num_subjects must be positive");
    if (samples_per_subject == 0) {
      throw ContractError("gen config: samples_per_subject must be positive");
    }
    if (num_expressions == 0) {
      throw ContractError("gen config: num_expressions must be positive");
    }
    if (num_aus == 0) throw ContractError("gen config: num_aus must be positive");
    if (input_dim == 0) throw ContractError("gen config: input_dim must be positive");
    if (noise_sigma < 0.0) throw ContractError("gen config: noise_sigma must be >= 0");
    if (subject_offset_sigma < 0.0) {
      throw ContractError("gen config: subject_offset_sigma must be >= 0");
    }
    if (au_flip_prob < 0.0 || au_flip_prob > 1.0) {
      throw ContractError("gen config: au_flip_prob must be in [0, 1]");
    }
    if (!(imbalance_skew > 0.0)) throw ContractError("gen config: imbalance_skew must be > 0");
  }

  std::vector<double> expression_priors() const {
    std::vector<double> priors(num_expressions);
    double mass = 0.0;
    double p = 1.0;
    for (std::size_t e = 0; e < num_expressions; ++e) {
      priors[e] = p;
      mass += p;
      p *= imbalance_skew;
    }
    for (double& v : priors) v /= mass;
    return priors;
  }
};

/// Fixed expression-to-AU prototype table. The 6x12 default encodes six
/// basic-expression AU combinations; other sizes are generated from a
/// constant internal seed so the table never varies across runs or
/// dataset seeds. Rows are distinct and each has at least one active AU.
inline std::vector<std::vector<std::uint8_t>> expression_prototypes(std::size_t num_expressions,
                                                                    std::size_t num_aus) {
  if (num_expressions == 6 && num_aus == 12) {
    return {
        {0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0},
        {1, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0},
        {1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1},
        {1, 1, 1, 0, 1, 0, 0, 0, 0, 0, 0, 1},
        {0, 0, 1, 0, 1, 0, 0, 0, 1, 1, 0, 0},
        {0, 0, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0},
    };
  }
  if (num_aus < 64 && num_expressions > (1ull << num_aus) - 1) {
    throw ContractError("expression prototypes: cannot build " +
                        std::to_string(num_expressions) + " distinct nonzero templates over " +
                        std::to_string(num_aus) + " AUs");
  }
  Rng rng(derive_seed(0x41555452ull, num_expressions * 131 + num_aus));
  std::set<std::vector<std::uint8_t>> seen;
  std::vector<std::vector<std::uint8_t>> table;
  while (table.size() < num_expressions) {
    std::vector<std::uint8_t> row(num_aus, 0);
    std::size_t active = 0;
    for (auto& bit : row) {
      bit = rng.next_unit() < 0.3 ? 1 : 0;
      active += bit;
    }
    if (active == 0) continue;
    if (seen.insert(row).second) table.push_back(std::move(row));
  }
  return table;
}

/// Draws a dataset in which AU labels are noisy copies of the drawn
/// expression's prototype and features are a fixed linear mixture of AU
/// intensities plus a per-subject offset and white noise. Intensity is
/// 1.0 for prototype AUs that stay on and uniform(0.5, 1) for AUs the
/// flip noise turned on. Deterministic given the config.
inline Dataset generate_synthetic(const GenConfig& config) {
  config.validate();
  const auto priors = config.expression_priors();
  const auto prototypes = expression_prototypes(config.num_expressions, config.num_aus);
  Rng rng(config.seed);

  std::vector<double> mixing(config.input_dim * config.num_aus);
  for (double& v : mixing) v = rng.gaussian();

  Dataset ds;
  ds.input_dim = config.input_dim;
  ds.num_aus = config.num_aus;
  ds.samples.reserve(config.num_subjects * config.samples_per_subject);

  std::vector<double> offset(config.input_dim);
  std::vector<double> intensity(config.num_aus);
  for (std::uint64_t subject = 0; subject < config.num_subjects; ++subject) {
    for (double& v : offset) v = rng.gaussian() * config.subject_offset_sigma;
    for (std::size_t k = 0; k < config.samples_per_subject; ++k) {
      const double u = rng.next_unit();
      std::size_t expression = config.num_expressions - 1;
      double cumulative = 0.0;
      for (std::size_t e = 0; e < config.num_expressions; ++e) {
        cumulative += priors[e];
        if (u < cumulative) {
          expression = e;
          break;
        }
      }
      const auto& prototype = prototypes[expression];
      std::vector<std::uint8_t> au(config.num_aus);
      for (std::size_t j = 0; j < config.num_aus; ++j) {
        const bool flipped = rng.next_unit() < config.au_flip_prob;
        au[j] = flipped ? (1 - prototype[j]) : prototype[j];
        if (au[j] == 0) {
          intensity[j] = 0.0;
        } else {
          intensity[j] = prototype[j] ? 1.0 : rng.uniform(0.5, 1.0);
        }
      }
      Sample s;
      s.subject_id = subject;
      s.expression = expression;
      s.au_labels = au;
      s.features.resize(config.input_dim);
      for (std::size_t i = 0; i < config.input_dim; ++i) {
        double v = offset[i] + rng.gaussian() * config.noise_sigma;
        const double* mrow = &mixing[i * config.num_aus];
        for (std::size_t j = 0; j < config.num_aus; ++j) v += mrow[j] * intensity[j];
        s.features[i] = v;
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

/// Plain-text dataset file. Header names the widths; each sample is one
/// comma-separated line: subject, expression or -1, the AU fields (all
/// -1 when absent), then the features at full round-trip precision.
inline void write_dataset(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::ostringstream os;
  os << kDatasetHeaderPrefix << ',' << ds.input_dim << ',' << ds.num_aus << '\n';
  for (const Sample& s : ds.samples) {
    os << s.subject_id << ',';
    os << (s.expression ? static_cast<long long>(*s.expression) : -1);
    if (s.au_labels) {
      for (std::uint8_t b : *s.au_labels) os << ',' << static_cast<int>(b);
    } else {
      for (std::size_t j = 0; j < ds.num_aus; ++j) os << ",-1";
    }
    for (double f : s.features) os << ',' << format_double(f);
    os << '\n';
  }
  write_text_file(path, os.str());
}

inline Dataset read_dataset(const std::string& path) {
  auto in = open_for_read(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file, missing header");
  auto header = split(trim(line), ',');
  if (header.size() != 3 || header[0] != kDatasetHeaderPrefix) {
    throw FormatError(path + ": bad header '" + line + "'");
  }
  Dataset ds;
  const long long dim = parse_int(header[1], 1);
  const long long aus = parse_int(header[2], 1);
  if (dim <= 0 || aus <= 0) throw FormatError(path + ": non-positive widths in header");
  ds.input_dim = static_cast<std::size_t>(dim);
  ds.num_aus = static_cast<std::size_t>(aus);

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(line);
    if (body.empty()) continue;
    auto fields = split(body, ',');
    const std::size_t expected = 2 + ds.num_aus + ds.input_dim;
    if (fields.size() != expected) {
      throw FormatError(path + ": line " + std::to_string(line_no) + ": " +
                        std::to_string(fields.size()) + " fields, expected " +
                        std::to_string(expected));
    }
    Sample s;
    const long long subject = parse_int(fields[0], line_no);
    if (subject < 0) {
      throw ParseError("line " + std::to_string(line_no) + ": negative subject id");
    }
    s.subject_id = static_cast<std::uint64_t>(subject);
    const long long expression = parse_int(fields[1], line_no);
    if (expression < -1) {
      throw ParseError("line " + std::to_string(line_no) + ": expression must be >= -1, got " +
                       fields[1]);
    }
    if (expression >= 0) s.expression = static_cast<std::size_t>(expression);

    const long long first_au = parse_int(fields[2], line_no);
    if (first_au >= 0) {
      std::vector<std::uint8_t> au(ds.num_aus);
      for (std::size_t j = 0; j < ds.num_aus; ++j) {
        const long long b = parse_int(fields[2 + j], line_no);
        if (b != 0 && b != 1) {
          throw ParseError("line " + std::to_string(line_no) + ": AU field must be 0 or 1, got " +
                           fields[2 + j]);
        }
        au[j] = static_cast<std::uint8_t>(b);
      }
      s.au_labels = std::move(au);
    } else {
      for (std::size_t j = 0; j < ds.num_aus; ++j) {
        if (parse_int(fields[2 + j], line_no) != -1) {
          throw ParseError("line " + std::to_string(line_no) +
                           ": AU fields must be all -1 when labels are absent");
        }
      }
    }
    if (!s.expression && !s.au_labels) {
      throw ParseError("line " + std::to_string(line_no) + ": sample carries no label");
    }
    s.features.resize(ds.input_dim);
    for (std::size_t j = 0; j < ds.input_dim; ++j) {
      s.features[j] = parse_double(fields[2 + ds.num_aus + j], line_no);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Subject-level k-fold partition plus the derived per-fold sample index
/// lists. No subject ever appears on both sides of a fold.
struct FoldSplit {
  std::vector<std::vector<std::uint64_t>> fold_subjects;
  std::vector<std::vector<std::size_t>> validation_indices;
  std::vector<std::vector<std::size_t>> train_indices;
};

/// Shuffles the distinct subjects by seed and deals them round-robin
/// into k folds, so fold sizes differ by at most one.
inline FoldSplit split_subject_folds(const Dataset& ds, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ContractError("split_subject_folds: k must be positive");
  std::vector<std::uint64_t> subjects = ds.distinct_subjects();
  if (subjects.size() < k) {
    throw ContractError("split_subject_folds: " + std::to_string(subjects.size()) +
                        " subjects cannot fill " + std::to_string(k) + " folds");
  }
  Rng rng(seed);
  rng.shuffle(subjects);

  FoldSplit split;
  split.fold_subjects.resize(k);
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    split.fold_subjects[i % k].push_back(subjects[i]);
  }

  std::map<std::uint64_t, std::size_t> fold_of;
  for (std::size_t f = 0; f < k; ++f) {
    for (std::uint64_t id : split.fold_subjects[f]) fold_of[id] = f;
  }
  split.validation_indices.resize(k);
  split.train_indices.resize(k);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const std::size_t f = fold_of.at(ds.samples[i].subject_id);
    split.validation_indices[f].push_back(i);
    for (std::size_t other = 0; other < k; ++other) {
      if (other != f) split.train_indices[other].push_back(i);
    }
  }
  return split;
}

}  // namespace autransfer
