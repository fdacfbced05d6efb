// Command-line front end: data generation, the two training stages,
// threshold calibration, evaluation, and the end-to-end pipeline.
//
// Exit codes are a stable scripting contract:
//   0 success, 2 usage, 3 I/O, 4 format or shape conflict.
//
// Every run writes a manifest next to its outputs with the command name
// and the fully resolved configuration; `--config <manifest>` replays a
// run (command-line flags still win over file values).

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "autransfer/autransfer.hpp"

namespace {

using namespace autransfer;

constexpr const char* kArtifactVersion = "1.0.0";
constexpr const char* kManifestHeader = "# AUTRANSFER-MANIFEST v1";

// flag errors detected after CLI11 parsing (bad values, bad config keys)
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::size_t parse_size_field(const std::string& v) {
  char* end = nullptr;
  const unsigned long long n = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0') throw UsageError("not a non-negative integer: " + v);
  return static_cast<std::size_t>(n);
}

double parse_double_field(const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0') throw UsageError("not a number: " + v);
  return d;
}

bool parse_bool_field(const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw UsageError("not a boolean (0/1): " + v);
}

std::vector<std::size_t> parse_width_list(const std::string& v, const std::string& flag) {
  std::vector<std::size_t> widths;
  if (trim(v).empty()) return widths;
  for (const std::string& field : split(v, ',')) {
    try {
      widths.push_back(parse_size_field(trim(field)));
    } catch (const UsageError&) {
      throw UsageError(flag + ": bad width '" + field + "'");
    }
  }
  return widths;
}

/// Ordered set of replayable flags for one subcommand. Each entry knows
/// how to read its current value (manifest writing) and how to assign
/// from text (config overlay, applied only when the command line did
/// not set the flag).
class FlagRegistry {
 public:
  void add(std::string key, CLI::Option* option, std::function<void(const std::string&)> set,
           std::function<std::string()> get) {
    entries_.push_back({std::move(key), option, std::move(set), std::move(get)});
  }

  void bind_size(CLI::App* cmd, const std::string& flag, const std::string& key,
                 std::size_t& field, const std::string& help) {
    CLI::Option* opt = cmd->add_option(flag, field, help);
    add(
        key, opt, [&field](const std::string& v) { field = parse_size_field(v); },
        [&field]() { return std::to_string(field); });
  }

  void bind_u64(CLI::App* cmd, const std::string& flag, const std::string& key,
                std::uint64_t& field, const std::string& help) {
    CLI::Option* opt = cmd->add_option(flag, field, help);
    add(
        key, opt,
        [&field](const std::string& v) { field = static_cast<std::uint64_t>(parse_size_field(v)); },
        [&field]() { return std::to_string(field); });
  }

  void bind_double(CLI::App* cmd, const std::string& flag, const std::string& key, double& field,
                   const std::string& help) {
    CLI::Option* opt = cmd->add_option(flag, field, help);
    add(
        key, opt, [&field](const std::string& v) { field = parse_double_field(v); },
        [&field]() { return format_double(field); });
  }

  void bind_string(CLI::App* cmd, const std::string& flag, const std::string& key,
                   std::string& field, const std::string& help, bool required = false) {
    CLI::Option* opt = cmd->add_option(flag, field, help);
    if (required) opt->required();
    add(
        key, opt, [&field](const std::string& v) { field = v; }, [&field]() { return field; });
  }

  void bind_flag(CLI::App* cmd, const std::string& flag, const std::string& key, bool& field,
                 const std::string& help) {
    CLI::Option* opt = cmd->add_flag(flag, field, help);
    add(
        key, opt, [&field](const std::string& v) { field = parse_bool_field(v); },
        [&field]() { return std::string(field ? "1" : "0"); });
  }

  // file values fill only flags the command line left untouched
  void apply_overlay(const std::map<std::string, std::string>& file_values) {
    for (const auto& [key, value] : file_values) {
      const Entry* entry = find(key);
      if (entry == nullptr) throw UsageError("unknown config key: " + key);
      if (entry->option->count() > 0) continue;
      entry->set(value);
    }
  }

  std::string manifest(const std::string& command) const {
    std::ostringstream os;
    os << kManifestHeader << '\n';
    os << "command=" << command << '\n';
    os << "artifact_version=" << kArtifactVersion << '\n';
    for (const Entry& e : entries_) os << e.key << '=' << e.get() << '\n';
    return os.str();
  }

 private:
  struct Entry {
    std::string key;
    CLI::Option* option;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };

  const Entry* find(const std::string& key) const {
    for (const Entry& e : entries_) {
      if (e.key == key) return &e;
    }
    return nullptr;
  }

  std::vector<Entry> entries_;
};

std::map<std::string, std::string> read_config_file(const std::string& path,
                                                    const std::string& command) {
  if (!std::filesystem::exists(path)) throw IoError("no such config file: " + path);
  std::map<std::string, std::string> values;
  std::istringstream in(read_text_file(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const std::size_t eq = body.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ": line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key == "artifact_version") continue;
    if (key == "command") {
      if (value != command) {
        throw UsageError(path + ": manifest is for command '" + value + "', not '" + command +
                         "'");
      }
      continue;
    }
    values[key] = value;
  }
  return values;
}

void require_input_file(const std::string& path, const char* what) {
  if (!std::filesystem::exists(path)) {
    throw IoError(std::string("missing ") + what + ": " + path);
  }
}

void ensure_output_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create output directory: " + dir);
  }
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

// ---- shared option groups ----

struct ModelFlags {
  std::size_t input_dim = 64;
  std::string backbone = "128,64";
  std::size_t num_expressions = 6;
  std::size_t num_aus = 12;
  std::string au_hidden = "32,16";
  bool freeze_backbone = false;

  ModelConfig to_config() const {
    ModelConfig cfg;
    cfg.input_dim = input_dim;
    cfg.backbone_layers = parse_width_list(backbone, "--backbone");
    cfg.num_expressions = num_expressions;
    cfg.num_aus = num_aus;
    const auto hidden = parse_width_list(au_hidden, "--au-hidden");
    if (hidden.size() != 2) throw UsageError("--au-hidden: expected exactly two widths");
    cfg.au_head_hidden = {hidden[0], hidden[1]};
    cfg.freeze_backbone_in_stage2 = freeze_backbone;
    return cfg;
  }
};

void bind_model_flags(CLI::App* cmd, FlagRegistry& reg, ModelFlags& m, bool with_freeze) {
  reg.bind_size(cmd, "--input-dim", "input_dim", m.input_dim, "Feature vector width");
  reg.bind_string(cmd, "--backbone", "backbone", m.backbone,
                  "Backbone hidden widths, comma separated");
  reg.bind_size(cmd, "--num-expressions", "num_expressions", m.num_expressions,
                "Expression class count");
  reg.bind_size(cmd, "--num-aus", "num_aus", m.num_aus, "Action unit count");
  reg.bind_string(cmd, "--au-hidden", "au_hidden", m.au_hidden,
                  "AU head hidden widths (exactly two)");
  if (with_freeze) {
    reg.bind_flag(cmd, "--freeze-backbone", "freeze_backbone", m.freeze_backbone,
                  "Keep backbone weights fixed in stage two");
  }
}

struct GenFlags {
  std::size_t subjects = 25;
  std::size_t per_subject = 20;
  double noise_sigma = 0.3;
  double offset_sigma = 0.5;
  double flip_prob = 0.05;
  double skew = 1.0;

  GenConfig to_config(const ModelFlags& m, std::uint64_t seed) const {
    GenConfig cfg;
    cfg.num_subjects = subjects;
    cfg.samples_per_subject = per_subject;
    cfg.num_expressions = m.num_expressions;
    cfg.num_aus = m.num_aus;
    cfg.input_dim = m.input_dim;
    cfg.noise_sigma = noise_sigma;
    cfg.subject_offset_sigma = offset_sigma;
    cfg.au_flip_prob = flip_prob;
    cfg.imbalance_skew = skew;
    cfg.seed = seed;
    return cfg;
  }
};

void bind_gen_flags(CLI::App* cmd, FlagRegistry& reg, GenFlags& g) {
  reg.bind_size(cmd, "--subjects", "subjects", g.subjects, "Number of distinct subjects");
  reg.bind_size(cmd, "--per-subject", "per_subject", g.per_subject, "Samples per subject");
  reg.bind_double(cmd, "--noise-sigma", "noise_sigma", g.noise_sigma, "Feature noise sigma");
  reg.bind_double(cmd, "--offset-sigma", "offset_sigma", g.offset_sigma,
                  "Per-subject offset sigma");
  reg.bind_double(cmd, "--flip-prob", "flip_prob", g.flip_prob, "Per-AU label flip probability");
  reg.bind_double(cmd, "--skew", "skew", g.skew,
                  "Geometric tilt of expression priors (1 = uniform)");
}

struct TrainFlags {
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  bool no_shuffle = false;
  bool pos_weighting = false;

  TrainConfig to_config(std::uint64_t seed) const {
    TrainConfig cfg;
    cfg.batch_size = batch_size;
    cfg.learning_rate = learning_rate;
    cfg.momentum = momentum;
    cfg.seed = seed;
    cfg.shuffle = !no_shuffle;
    cfg.pos_weighting = pos_weighting;
    return cfg;
  }
};

void bind_train_flags(CLI::App* cmd, FlagRegistry& reg, TrainFlags& t, bool with_pos_weighting) {
  reg.bind_size(cmd, "--batch-size", "batch_size", t.batch_size, "Mini-batch size");
  reg.bind_double(cmd, "--lr", "learning_rate", t.learning_rate, "SGD learning rate");
  reg.bind_double(cmd, "--momentum", "momentum", t.momentum, "SGD momentum");
  reg.bind_flag(cmd, "--no-shuffle", "no_shuffle", t.no_shuffle, "Disable per-epoch shuffling");
  if (with_pos_weighting) {
    reg.bind_flag(cmd, "--pos-weighting", "pos_weighting", t.pos_weighting,
                  "Weight positive AU terms by the negative/positive ratio");
  }
}

std::vector<double> grid_from_flag(const std::string& grid_flag) {
  if (trim(grid_flag).empty()) return default_threshold_grid();
  std::vector<double> grid;
  for (const std::string& field : split(grid_flag, ',')) {
    grid.push_back(parse_double_field(trim(field)));
  }
  return grid;
}

void validate_configs(const std::function<void()>& body) {
  try {
    body();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
}

std::vector<std::size_t> indices_with_au_labels(const Dataset& ds) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (ds.samples[i].au_labels) idx.push_back(i);
  }
  return idx;
}

std::vector<std::size_t> indices_with_expression(const Dataset& ds) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (ds.samples[i].expression) idx.push_back(i);
  }
  return idx;
}

// ---- gen-data ----

struct GenDataArgs {
  ModelFlags model;
  GenFlags gen;
  std::uint64_t seed = 0;
  std::string output;
  std::string config_file;
};

void setup_gen_data(CLI::App* cmd, FlagRegistry& reg, GenDataArgs& a) {
  bind_gen_flags(cmd, reg, a.gen);
  reg.bind_size(cmd, "--input-dim", "input_dim", a.model.input_dim, "Feature vector width");
  reg.bind_size(cmd, "--num-expressions", "num_expressions", a.model.num_expressions,
                "Expression class count");
  reg.bind_size(cmd, "--num-aus", "num_aus", a.model.num_aus, "Action unit count");
  reg.bind_u64(cmd, "--seed", "seed", a.seed, "Generator seed");
  reg.bind_string(cmd, "-o,--output", "output", a.output, "Dataset file to write", true);
  cmd->add_option("--config", a.config_file, "key=value config file (flags win)");
}

int run_gen_data(const GenDataArgs& a, const FlagRegistry& reg) {
  GenConfig cfg = a.gen.to_config(a.model, a.seed);
  validate_configs([&] { cfg.validate(); });
  const Dataset ds = generate_synthetic(cfg);
  write_dataset(ds, a.output);
  write_text_file(a.output + ".manifest", reg.manifest("gen-data"));

  std::cout << "samples=" << ds.samples.size() << '\n';
  std::cout << "subjects=" << ds.distinct_subjects().size() << '\n';
  const double n = static_cast<double>(ds.samples.size());
  for (std::size_t j = 0; j < ds.num_aus; ++j) {
    double marginal = 0.0;
    for (const Sample& s : ds.samples) marginal += (*s.au_labels)[j];
    char key[32];
    std::snprintf(key, sizeof(key), "au%02zu_marginal", j);
    std::cout << key << '=' << format_double(marginal / n) << '\n';
  }
  std::cout << "output=" << a.output << '\n';
  return 0;
}

// ---- pretrain ----

struct PretrainArgs {
  ModelFlags model;
  TrainFlags train;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  std::string data;
  std::string output;
  std::string config_file;
};

void setup_pretrain(CLI::App* cmd, FlagRegistry& reg, PretrainArgs& a) {
  reg.bind_string(cmd, "--data", "data", a.data, "Dataset file", true);
  bind_model_flags(cmd, reg, a.model, false);
  bind_train_flags(cmd, reg, a.train, false);
  reg.bind_size(cmd, "--epochs", "epochs", a.epochs, "Stage-one epochs");
  reg.bind_u64(cmd, "--seed", "seed", a.seed, "Training seed");
  reg.bind_string(cmd, "-o,--output", "output", a.output, "Output directory", true);
  cmd->add_option("--config", a.config_file, "key=value config file (flags win)");
}

int run_pretrain(const PretrainArgs& a, const FlagRegistry& reg) {
  const ModelConfig mc = a.model.to_config();
  TrainConfig tc = a.train.to_config(a.seed);
  tc.epochs_stage1 = a.epochs;
  validate_configs([&] {
    mc.validate();
    tc.validate();
  });
  require_input_file(a.data, "dataset");
  const Dataset ds = read_dataset(a.data);

  ModelParameters params = init_parameters(mc, derive_seed(a.seed, seed_stream::kInit));
  const RunRecord record = train_stage_one(params, ds, tc);

  ensure_output_dir(a.output);
  save_checkpoint(params, join_path(a.output, "pretrained.ckpt"));
  write_text_file(join_path(a.output, "report.txt"), record.to_text());
  write_text_file(join_path(a.output, "stage1_loss.csv"),
                  loss_curve_csv(record.stage1_epoch_loss));
  write_text_file(join_path(a.output, "manifest.txt"), reg.manifest("pretrain"));
  std::cout << record.to_text();
  return 0;
}

// ---- crossval ----

struct CrossvalArgs {
  ModelFlags model;
  TrainFlags train;
  std::size_t epochs = 30;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::string data;
  std::string output;
  std::string config_file;
};

void setup_crossval(CLI::App* cmd, FlagRegistry& reg, CrossvalArgs& a) {
  reg.bind_string(cmd, "--data", "data", a.data, "Dataset file", true);
  bind_model_flags(cmd, reg, a.model, false);
  bind_train_flags(cmd, reg, a.train, false);
  reg.bind_size(cmd, "--epochs", "epochs", a.epochs, "Stage-one epochs per fold");
  reg.bind_size(cmd, "--k", "k", a.k, "Number of subject folds");
  reg.bind_u64(cmd, "--seed", "seed", a.seed, "Training seed");
  reg.bind_string(cmd, "-o,--output", "output", a.output, "Output directory", true);
  cmd->add_option("--config", a.config_file, "key=value config file (flags win)");
}

int run_crossval(const CrossvalArgs& a, const FlagRegistry& reg) {
  const ModelConfig mc = a.model.to_config();
  TrainConfig tc = a.train.to_config(a.seed);
  tc.epochs_stage1 = a.epochs;
  validate_configs([&] {
    mc.validate();
    tc.validate();
    if (a.k < 2) throw ContractError("--k must be at least 2");
  });
  require_input_file(a.data, "dataset");
  const Dataset ds = read_dataset(a.data);

  const std::vector<double> accuracies = crossval_stage_one(ds, mc, tc, a.k);
  std::ostringstream os;
  double sum = 0.0;
  for (std::size_t f = 0; f < accuracies.size(); ++f) {
    char key[32];
    std::snprintf(key, sizeof(key), "fold%02zu_accuracy", f);
    os << key << '=' << format_double(accuracies[f]) << '\n';
    sum += accuracies[f];
  }
  os << "mean_accuracy=" << format_double(sum / static_cast<double>(accuracies.size())) << '\n';

  ensure_output_dir(a.output);
  write_text_file(join_path(a.output, "report.txt"), os.str());
  write_text_file(join_path(a.output, "manifest.txt"), reg.manifest("crossval"));
  std::cout << os.str();
  return 0;
}

// ---- finetune ----

struct FinetuneArgs {
  ModelFlags model;
  TrainFlags train;
  std::size_t epochs = 30;
  double label_fraction = 1.0;
  std::uint64_t seed = 0;
  std::string data;
  std::string val_data;
  std::string checkpoint;
  std::string output;
  std::string config_file;
};

void setup_finetune(CLI::App* cmd, FlagRegistry& reg, FinetuneArgs& a) {
  reg.bind_string(cmd, "--data", "data", a.data, "Stage-two dataset file", true);
  reg.bind_string(cmd, "--checkpoint", "checkpoint", a.checkpoint, "Pretrained checkpoint", true);
  reg.bind_string(cmd, "--val-data", "val_data", a.val_data,
                  "Explicit validation dataset (default: internal subject split)");
  bind_model_flags(cmd, reg, a.model, true);
  bind_train_flags(cmd, reg, a.train, true);
  reg.bind_size(cmd, "--epochs", "epochs", a.epochs, "Stage-two epochs");
  reg.bind_double(cmd, "--label-fraction", "label_fraction", a.label_fraction,
                  "Fraction of training labels kept");
  reg.bind_u64(cmd, "--seed", "seed", a.seed, "Training seed");
  reg.bind_string(cmd, "-o,--output", "output", a.output, "Output directory", true);
  cmd->add_option("--config", a.config_file, "key=value config file (flags win)");
}

int run_finetune(const FinetuneArgs& a, const FlagRegistry& reg) {
  const ModelConfig mc = a.model.to_config();
  TrainConfig tc = a.train.to_config(a.seed);
  tc.epochs_stage2 = a.epochs;
  tc.stage2_label_fraction = a.label_fraction;
  validate_configs([&] {
    mc.validate();
    tc.validate();
  });
  require_input_file(a.data, "dataset");
  require_input_file(a.checkpoint, "checkpoint");
  const Dataset ds = read_dataset(a.data);

  const ModelParameters pretrained = load_checkpoint(a.checkpoint);
  // transfer_backbone rejects a backbone that does not fit the target
  // configuration; the checkpoint's AU head is replaced, so only the
  // backbone must match
  ModelParameters params =
      transfer_backbone(pretrained, mc, derive_seed(a.seed, seed_stream::kInit));

  Dataset train_ds;
  Dataset val_ds;
  if (!a.val_data.empty()) {
    require_input_file(a.val_data, "validation dataset");
    train_ds = ds;
    val_ds = read_dataset(a.val_data);
  } else {
    const FoldSplit split =
        split_subject_folds(ds, 5, derive_seed(a.seed, seed_stream::kStageTwoSplit));
    train_ds = subset(ds, split.train_indices[0]);
    val_ds = subset(ds, split.validation_indices[0]);
  }
  if (tc.stage2_label_fraction < 1.0) {
    std::vector<std::size_t> idx = all_indices(train_ds);
    Rng rng(derive_seed(a.seed, seed_stream::kLabelSubsample));
    rng.shuffle(idx);
    const std::size_t keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(tc.stage2_label_fraction * double(idx.size()))));
    idx.resize(std::min(keep, idx.size()));
    std::sort(idx.begin(), idx.end());
    train_ds = subset(train_ds, idx);
  }

  RunRecord record = train_stage_two(params, train_ds, tc, &val_ds);

  const Tensor scores = au_scores(params, val_ds);
  const BinaryMatrix labels = au_label_matrix(val_ds, all_indices(val_ds));

  ensure_output_dir(a.output);
  save_checkpoint(params, join_path(a.output, "finetuned.ckpt"));
  write_scores(scores, labels, join_path(a.output, "scores.csv"));
  write_text_file(join_path(a.output, "report.txt"), record.to_text());
  write_text_file(join_path(a.output, "stage2_loss.csv"),
                  loss_curve_csv(record.stage2_epoch_loss));
  write_text_file(join_path(a.output, "manifest.txt"), reg.manifest("finetune"));
  std::cout << record.to_text();
  return 0;
}

// ---- calibrate ----

struct CalibrateArgs {
  std::string scores;
  std::string grid_flag;
  std::string output;
  std::string config_file;
};

void setup_calibrate(CLI::App* cmd, FlagRegistry& reg, CalibrateArgs& a) {
  reg.bind_string(cmd, "--scores", "scores", a.scores, "Validation scores file", true);
  reg.bind_string(cmd, "--grid", "grid", a.grid_flag,
                  "Comma-separated thresholds (default 0.05..0.95 step 0.05)");
  reg.bind_string(cmd, "-o,--output", "output", a.output, "Output directory", true);
  cmd->add_option("--config", a.config_file, "key=value config file (flags win)");
}

int run_calibrate(const CalibrateArgs& a, const FlagRegistry& reg) {
  require_input_file(a.scores, "scores file");
  std::vector<double> grid;
  validate_configs([&] { grid = grid_from_flag(a.grid_flag); });
  const auto [scores, labels] = read_scores(a.scores);
  CalibrationResult result;
  try {
    result = calibrate_thresholds(scores, labels, grid);
  } catch (const ContractError& e) {
    throw UsageError(e.what());  // grid violations are flag mistakes
  }

  const double baseline =
      f1_report(apply_thresholds(scores, ThresholdVector::uniform(scores.cols(), 0.5)), labels)
          .macro_f1;
  const MetricsReport calibrated = f1_report(apply_thresholds(scores, result.thresholds), labels);

  std::ostringstream os;
  os << "pre_macro_f1=" << format_double(baseline) << '\n';
  os << "post_macro_f1=" << format_double(calibrated.macro_f1) << '\n';
  for (std::size_t j = 0; j < result.thresholds.thresholds.size(); ++j) {
    char key[32];
    std::snprintf(key, sizeof(key), "au%02zu", j);
    os << key << "_threshold=" << format_double(result.thresholds.thresholds[j]) << '\n';
    os << key << "_best_f1=" << format_double(result.best_f1[j]) << '\n';
    os << key << "_degenerate=" << (result.degenerate[j] ? 1 : 0) << '\n';
  }

  ensure_output_dir(a.output);
  write_thresholds(result.thresholds, join_path(a.output, "thresholds.txt"));
  write_text_file(join_path(a.output, "report.txt"), os.str());
  write_text_file(join_path(a.output, "manifest.txt"), reg.manifest("calibrate"));
  std::cout << os.str();
  return 0;
}

// ---- evaluate ----

struct EvaluateArgs {
  std::string data;
  std::string checkpoint;
  std::string thresholds;
  std::string output;
  std::string config_file;
};

void setup_evaluate(CLI::App* cmd, FlagRegistry& reg, EvaluateArgs& a) {
  reg.bind_string(cmd, "--data", "data", a.data, "Dataset file", true);
  reg.bind_string(cmd, "--checkpoint", "checkpoint", a.checkpoint, "Model checkpoint", true);
  reg.bind_string(cmd, "--thresholds", "thresholds", a.thresholds,
                  "Per-AU thresholds file (default: uniform 0.5)");
  reg.bind_string(cmd, "-o,--output", "output", a.output, "Output directory", true);
  cmd->add_option("--config", a.config_file, "key=value config file (flags win)");
}

int run_evaluate(const EvaluateArgs& a, const FlagRegistry& reg) {
  require_input_file(a.data, "dataset");
  require_input_file(a.checkpoint, "checkpoint");
  const Dataset ds = read_dataset(a.data);
  const ModelParameters params = load_checkpoint(a.checkpoint);

  std::ostringstream os;
  const auto au_idx = indices_with_au_labels(ds);
  if (!au_idx.empty()) {
    const Dataset au_ds = subset(ds, au_idx);
    ThresholdVector tv = ThresholdVector::uniform(params.num_aus(), 0.5);
    if (!a.thresholds.empty()) {
      require_input_file(a.thresholds, "thresholds file");
      tv = read_thresholds(a.thresholds);
      if (tv.thresholds.size() != params.num_aus()) {
        throw FormatError(a.thresholds + ": " + std::to_string(tv.thresholds.size()) +
                          " thresholds for a model with " + std::to_string(params.num_aus()) +
                          " AUs");
      }
    }
    const Tensor scores = au_scores(params, au_ds);
    const BinaryMatrix labels = au_label_matrix(au_ds, all_indices(au_ds));
    const MetricsReport report = f1_report(apply_thresholds(scores, tv), labels);
    os << "au_samples=" << au_idx.size() << '\n';
    os << report.to_text();
  }
  const auto expr_idx = indices_with_expression(ds);
  if (params.expression_head && !expr_idx.empty()) {
    const Dataset expr_ds = subset(ds, expr_idx);
    os << "expression_samples=" << expr_idx.size() << '\n';
    os << "expression_accuracy=" << format_double(expression_accuracy(params, expr_ds)) << '\n';
  }
  if (os.str().empty()) {
    throw ContractError("evaluate: dataset has no labels this checkpoint can score");
  }

  ensure_output_dir(a.output);
  write_text_file(join_path(a.output, "report.txt"), os.str());
  write_text_file(join_path(a.output, "manifest.txt"), reg.manifest("evaluate"));
  std::cout << os.str();
  return 0;
}

// ---- pipeline ----

struct PipelineArgs {
  ModelFlags model;
  GenFlags gen;
  TrainFlags train;
  std::size_t epochs_stage1 = 30;
  std::size_t epochs_stage2 = 30;
  std::size_t cv_folds = 5;
  double label_fraction = 1.0;
  bool scratch = false;
  std::string grid_flag;
  std::uint64_t seed = 0;
  std::string output;
  std::string config_file;
};

void setup_pipeline(CLI::App* cmd, FlagRegistry& reg, PipelineArgs& a) {
  bind_gen_flags(cmd, reg, a.gen);
  bind_model_flags(cmd, reg, a.model, true);
  bind_train_flags(cmd, reg, a.train, true);
  reg.bind_size(cmd, "--epochs-stage1", "epochs_stage1", a.epochs_stage1, "Stage-one epochs");
  reg.bind_size(cmd, "--epochs-stage2", "epochs_stage2", a.epochs_stage2, "Stage-two epochs");
  reg.bind_size(cmd, "--cv-folds", "cv_folds", a.cv_folds,
                "Stage-one cross-validation folds (0 disables)");
  reg.bind_double(cmd, "--label-fraction", "label_fraction", a.label_fraction,
                  "Fraction of stage-two training labels kept");
  reg.bind_flag(cmd, "--scratch", "scratch", a.scratch,
                "Skip pretraining and transfer; fine-tune a fresh network");
  reg.bind_string(cmd, "--grid", "grid", a.grid_flag, "Comma-separated calibration thresholds");
  reg.bind_u64(cmd, "--seed", "seed", a.seed, "Root seed for data, init, and shuffling");
  reg.bind_string(cmd, "-o,--output", "output", a.output, "Output directory", true);
  cmd->add_option("--config", a.config_file, "key=value config file (flags win)");
}

int run_pipeline_cmd(const PipelineArgs& a, const FlagRegistry& reg) {
  const ModelConfig mc = a.model.to_config();
  const GenConfig gc = a.gen.to_config(a.model, a.seed);
  TrainConfig tc = a.train.to_config(a.seed);
  tc.epochs_stage1 = a.epochs_stage1;
  tc.epochs_stage2 = a.epochs_stage2;
  tc.stage1_cv_folds = a.cv_folds;
  tc.stage2_label_fraction = a.label_fraction;
  std::vector<double> grid;
  validate_configs([&] {
    mc.validate();
    gc.validate();
    tc.validate();
    grid = grid_from_flag(a.grid_flag);
  });

  const PipelineMode mode = a.scratch ? PipelineMode::kScratch : PipelineMode::kTransfer;
  PipelineResult result = run_pipeline(gc, mc, tc, grid, mode);

  ensure_output_dir(a.output);
  write_dataset(result.dataset, join_path(a.output, "data.csv"));
  if (result.pretrained) {
    save_checkpoint(*result.pretrained, join_path(a.output, "pretrained.ckpt"));
  }
  save_checkpoint(result.final_params, join_path(a.output, "finetuned.ckpt"));
  write_text_file(join_path(a.output, "report.txt"), result.record.to_text());
  write_text_file(join_path(a.output, "stage1_loss.csv"),
                  loss_curve_csv(result.record.stage1_epoch_loss));
  write_text_file(join_path(a.output, "stage2_loss.csv"),
                  loss_curve_csv(result.record.stage2_epoch_loss));
  const Dataset val_ds = subset(result.dataset, result.validation_indices);
  const Tensor scores = au_scores(result.final_params, val_ds);
  const BinaryMatrix labels = au_label_matrix(val_ds, all_indices(val_ds));
  write_scores(scores, labels, join_path(a.output, "scores.csv"));
  if (result.record.thresholds) {
    write_thresholds(*result.record.thresholds, join_path(a.output, "thresholds.txt"));
  }
  write_text_file(join_path(a.output, "manifest.txt"), reg.manifest("pipeline"));
  std::cout << result.record.to_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage transfer learning for AU recognition, desk scale"};
  app.require_subcommand(1);

  GenDataArgs gen_args;
  PretrainArgs pretrain_args;
  CrossvalArgs crossval_args;
  FinetuneArgs finetune_args;
  CalibrateArgs calibrate_args;
  EvaluateArgs evaluate_args;
  PipelineArgs pipeline_args;
  FlagRegistry gen_reg, pretrain_reg, crossval_reg, finetune_reg, calibrate_reg, evaluate_reg,
      pipeline_reg;

  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  setup_gen_data(gen_cmd, gen_reg, gen_args);
  CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "Stage one: expression pretraining");
  setup_pretrain(pretrain_cmd, pretrain_reg, pretrain_args);
  CLI::App* crossval_cmd =
      app.add_subcommand("crossval", "Subject-independent cross-validation of stage one");
  setup_crossval(crossval_cmd, crossval_reg, crossval_args);
  CLI::App* finetune_cmd =
      app.add_subcommand("finetune", "Stage two: AU fine-tuning from a checkpoint");
  setup_finetune(finetune_cmd, finetune_reg, finetune_args);
  CLI::App* calibrate_cmd =
      app.add_subcommand("calibrate", "Per-AU threshold search on validation scores");
  setup_calibrate(calibrate_cmd, calibrate_reg, calibrate_args);
  CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a dataset");
  setup_evaluate(evaluate_cmd, evaluate_reg, evaluate_args);
  CLI::App* pipeline_cmd = app.add_subcommand("pipeline", "Full two-stage experiment");
  setup_pipeline(pipeline_cmd, pipeline_reg, pipeline_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen_cmd->parsed()) {
      if (!gen_args.config_file.empty()) {
        gen_reg.apply_overlay(read_config_file(gen_args.config_file, "gen-data"));
      }
      return run_gen_data(gen_args, gen_reg);
    }
    if (pretrain_cmd->parsed()) {
      if (!pretrain_args.config_file.empty()) {
        pretrain_reg.apply_overlay(read_config_file(pretrain_args.config_file, "pretrain"));
      }
      return run_pretrain(pretrain_args, pretrain_reg);
    }
    if (crossval_cmd->parsed()) {
      if (!crossval_args.config_file.empty()) {
        crossval_reg.apply_overlay(read_config_file(crossval_args.config_file, "crossval"));
      }
      return run_crossval(crossval_args, crossval_reg);
    }
    if (finetune_cmd->parsed()) {
      if (!finetune_args.config_file.empty()) {
        finetune_reg.apply_overlay(read_config_file(finetune_args.config_file, "finetune"));
      }
      return run_finetune(finetune_args, finetune_reg);
    }
    if (calibrate_cmd->parsed()) {
      if (!calibrate_args.config_file.empty()) {
        calibrate_reg.apply_overlay(read_config_file(calibrate_args.config_file, "calibrate"));
      }
      return run_calibrate(calibrate_args, calibrate_reg);
    }
    if (evaluate_cmd->parsed()) {
      if (!evaluate_args.config_file.empty()) {
        evaluate_reg.apply_overlay(read_config_file(evaluate_args.config_file, "evaluate"));
      }
      return run_evaluate(evaluate_args, evaluate_reg);
    }
    if (pipeline_cmd->parsed()) {
      if (!pipeline_args.config_file.empty()) {
        pipeline_reg.apply_overlay(read_config_file(pipeline_args.config_file, "pipeline"));
      }
      return run_pipeline_cmd(pipeline_args, pipeline_reg);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
