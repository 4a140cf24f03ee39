#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "deepcsp/connectivity.hpp"
#include "deepcsp/csp.hpp"
#include "deepcsp/epochs.hpp"
#include "deepcsp/models.hpp"
#include "deepcsp/synth.hpp"
#include "deepcsp/training.hpp"

namespace deepcsp::cli {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Registers options on one subcommand and remembers how to echo their values.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* add(const std::string& names, T& value, const std::string& help) {
    const std::string key = primary(names);
    echo_.push_back([key, &value](json& j) { j[key] = value; });
    return app_->add_option(names, value, help);
  }

  CLI::Option* flag(const std::string& name, bool& value, const std::string& help) {
    echo_.push_back([name, &value](json& j) { j[name] = value; });
    return app_->add_flag("--" + name + ",!--no-" + name, value, help);
  }

  json resolved() const {
    json j{{"command", app_->get_name()}};
    for (const auto& e : echo_) e(j);
    return j;
  }

  CLI::App* app() const { return app_; }

 private:
  static std::string primary(const std::string& names) {
    std::string first = names.substr(0, names.find(','));
    first.erase(0, first.find_first_not_of('-'));
    return first;
  }

  CLI::App* app_;
  std::vector<std::function<void(json&)>> echo_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw Error("failed writing " + path.string());
}

void echo_config(const fs::path& dir, const Flags& flags) {
  if (!dir.empty()) fs::create_directories(dir);
  write_text((dir.empty() ? fs::path(".") : dir) / "config.json", flags.resolved().dump(2) + "\n");
}

// Flag values from a JSON config, placed before the real arguments so that
// command-line flags override them.
std::vector<std::string> config_args(const fs::path& path, const std::string& command) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw UsageError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file " + path.string() + " must hold a JSON object");
  std::vector<std::string> args;
  for (const auto& [key, value] : j.items()) {
    if (key == "command") {
      if (value != command) {
        throw UsageError("config file " + path.string() + " is for `" + value.dump() +
                         "`, not `" + command + "`");
      }
      continue;
    }
    if (value.is_null()) continue;
    if (value.is_boolean()) {
      args.push_back((value.get<bool>() ? "--" : "--no-") + key);
    } else if (value.is_string()) {
      args.push_back("--" + key);
      args.push_back(value.get<std::string>());
    } else if (value.is_number()) {
      args.push_back("--" + key);
      args.push_back(value.dump());
    } else {
      throw UsageError("config key `" + key + "` must be a string, number or boolean");
    }
  }
  return args;
}

std::optional<fs::path> find_config(const std::vector<std::string>& args) {
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return fs::path(args[i + 1]);
    if (args[i].rfind("--config=", 0) == 0) return fs::path(args[i].substr(9));
  }
  return std::nullopt;
}

signal::Band band_of(double low, double high) {
  if (!(low >= 0.0 && high > low)) throw UsageError("band must satisfy 0 <= low < high");
  return {low, high};
}

void check_fraction(double f, const char* name, bool allow_zero) {
  if (!(f < 1.0) || !(allow_zero ? f >= 0.0 : f > 0.0)) {
    throw UsageError(std::string("--") + name + " must be in " + (allow_zero ? "[0, 1)" : "(0, 1)"));
  }
}

void check_compatible(const models::Model& model, const data::EpochSet& set,
                      const std::string& checkpoint, const std::string& data) {
  if (set.channels() != model.config.channels || set.fs != model.config.fs) {
    throw Error("checkpoint " + checkpoint + " expects " + std::to_string(model.config.channels) +
                " channels at " + std::to_string(model.config.fs) + " Hz, but " + data + " has " +
                std::to_string(set.channels()) + " channels at " + std::to_string(set.fs) + " Hz");
  }
}

// Held-out part of `set` under the same split train uses.
std::pair<data::EpochSet, data::EpochSet> holdout(const data::EpochSet& set, double fraction,
                                                  std::uint64_t seed) {
  if (fraction == 0.0) return {set, data::EpochSet{}};
  return data::split(set, fraction, seed, true);
}

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

// --- synth ---------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t channels = 15;
  std::size_t samples = 2560;
  double fs = 512.0;
  std::size_t trials = 100;
  double noise = 0.1;
  std::string mixing = "orthonormal";
  long planted_channel = -1;
  double band_low = signal::kMotorBand.low;
  double band_high = signal::kMotorBand.high;
  std::uint64_t seed = 42;
};

void add_synth(CLI::App& app, SynthArgs& a, std::vector<Flags>& flags) {
  auto* sub = app.add_subcommand("synth", "Generate a synthetic two-class epoch file");
  Flags f(sub);
  f.add("--out,-o", a.out, "Output epoch file")->required();
  f.add("--channels,--d", a.channels, "Channels D")->check(CLI::Range(2, 65535));
  f.add("--samples,--t", a.samples, "Samples per trial T")->check(CLI::PositiveNumber);
  f.add("--fs", a.fs, "Sampling rate in Hz")->check(CLI::PositiveNumber);
  f.add("--trials", a.trials, "Total trials, split evenly between the classes")->check(CLI::Range(2, 1 << 30));
  f.add("--noise", a.noise, "Sensor noise standard deviation")->check(CLI::NonNegativeNumber);
  f.add("--mixing", a.mixing, "Mixing matrix")
      ->check(CLI::IsMember({"orthonormal", "identity", "single-channel"}));
  f.add("--planted-channel", a.planted_channel,
        "Channel of source 0 for single-channel mixing (-1: drawn from the seed)");
  f.add("--band-low", a.band_low, "Source band lower edge in Hz");
  f.add("--band-high", a.band_high, "Source band upper edge in Hz");
  f.add("--seed", a.seed, "Random seed");
  flags.push_back(f);
}

int run_synth(const SynthArgs& a, const Flags& flags, std::ostream& out, std::ostream& err) {
  if (a.trials % 2 != 0) throw UsageError("--trials must be even (two balanced classes)");
  data::SynthSpec spec;
  spec.channels = a.channels;
  spec.samples = a.samples;
  spec.fs = a.fs;
  spec.trials_per_class = a.trials / 2;
  spec.noise = a.noise;
  spec.band = band_of(a.band_low, a.band_high);
  spec.seed = a.seed;
  if (a.mixing == "identity") spec.mixing = data::MixingKind::identity;
  if (a.mixing == "single-channel") spec.mixing = data::MixingKind::single_channel;
  if (a.planted_channel >= 0) spec.planted_channel = static_cast<std::size_t>(a.planted_channel);

  const auto result = data::synth_generate(spec);
  if (result.degenerate_profiles) err << "warning: class variance profiles are identical\n";
  const fs::path path(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  data::write_epochs(path, result.epochs);
  echo_config(path.parent_path(), flags);
  out << format("wrote %zu trials (%zu channels x %zu samples at %g Hz) to %s\n", result.epochs.size(),
                a.channels, a.samples, a.fs, a.out.c_str());
  return kExitOk;
}

// --- train ---------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string model = "shallow-deepcsp";
  std::size_t components = 4;
  std::size_t filters = 8;
  std::size_t graph_filters = 1;
  std::size_t hidden = 16;
  double lr_feature = 0.01;
  double lr_classifier = 0.1;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  std::size_t patience = 20;
  double validation_fraction = 0.2;
  double test_fraction = 0.2;
  double shrinkage = csp::kDefaultShrinkage;
  std::size_t chunk_size = 64;
  std::string estimator = "plv";
  double band_low = signal::kMotorBand.low;
  double band_high = signal::kMotorBand.high;
  double threshold = 0.0;
  bool self_loops = false;
  std::uint64_t seed = 42;
  std::size_t log_every = 10;
};

const std::vector<std::string> kMethods{"coh", "plv", "iplv", "pli", "dpli", "wpli", "dwpli"};

void add_train(CLI::App& app, TrainArgs& a, std::vector<Flags>& flags) {
  auto* sub = app.add_subcommand("train", "Train a Shallow DeepCSP or Shallow GCN model");
  Flags f(sub);
  f.add("--data,-d", a.data, "Input epoch file")->required();
  f.add("--out,-o", a.out, "Output directory")->required();
  f.add("--model", a.model, "Architecture")->check(CLI::IsMember({"shallow-deepcsp", "shallow-gcn"}));
  f.add("--components", a.components, "CSP components n per class")->check(CLI::PositiveNumber);
  f.add("--filters", a.filters, "Filters per temporal branch (shallow-deepcsp)")->check(CLI::PositiveNumber);
  f.add("--graph-filters", a.graph_filters, "GraphSage outputs per node (shallow-gcn)")
      ->check(CLI::PositiveNumber);
  f.add("--hidden", a.hidden, "Classifier hidden width")->check(CLI::PositiveNumber);
  f.add("--lr-feature", a.lr_feature, "Feature-extractor learning rate")->check(CLI::NonNegativeNumber);
  f.add("--lr-classifier", a.lr_classifier, "Classifier learning rate")->check(CLI::NonNegativeNumber);
  f.add("--batch-size", a.batch_size, "Classifier minibatch size")->check(CLI::PositiveNumber);
  f.add("--epochs", a.epochs, "Maximum epochs");
  f.add("--patience", a.patience, "Early-stopping patience in epochs (0 disables)");
  f.add("--validation-fraction", a.validation_fraction, "Share of training trials held for validation");
  f.add("--test-fraction", a.test_fraction, "Share of all trials held out as the test set");
  f.add("--shrinkage", a.shrinkage, "Covariance shrinkage factor")->check(CLI::NonNegativeNumber);
  f.add("--chunk-size", a.chunk_size, "Trials per recorded forward pass")->check(CLI::PositiveNumber);
  f.add("--estimator", a.estimator, "Connectivity estimator for the graph (shallow-gcn)")
      ->check(CLI::IsMember(kMethods));
  f.add("--band-low", a.band_low, "Connectivity band lower edge in Hz");
  f.add("--band-high", a.band_high, "Connectivity band upper edge in Hz");
  f.add("--threshold", a.threshold, "Drop graph edges below this weight");
  f.flag("self-loops", a.self_loops, "Keep self loops in the graph");
  f.add("--seed", a.seed, "Random seed for weights, splits and shuffling");
  f.add("--log-every", a.log_every, "Print progress every N epochs (0: quiet)");
  flags.push_back(f);
}

int run_train(const TrainArgs& a, const Flags& flags, std::ostream& out) {
  check_fraction(a.validation_fraction, "validation-fraction", true);
  check_fraction(a.test_fraction, "test-fraction", true);
  training::TrainConfig c;
  c.model.kind = *models::parse_model_kind(a.model);
  c.model.filters = a.filters;
  c.model.graph_filters = a.graph_filters;
  c.model.hidden = a.hidden;
  c.model.n_components = a.components;
  c.model.seed = a.seed;
  c.lr_feature = a.lr_feature;
  c.lr_classifier = a.lr_classifier;
  c.batch_size = a.batch_size;
  c.epochs = a.epochs;
  c.patience = a.patience;
  c.validation_fraction = a.validation_fraction;
  c.shrinkage = a.shrinkage;
  c.chunk_size = a.chunk_size;
  c.estimator = *connectivity::parse_method(a.estimator);
  c.connectivity.band = band_of(a.band_low, a.band_high);
  c.graph_threshold = a.threshold;
  c.self_loops = a.self_loops;

  const auto set = data::read_epochs(a.data);
  const auto [train_set, test_set] = holdout(set, a.test_fraction, a.seed);
  const fs::path dir(a.out);
  echo_config(dir, flags);

  auto result = training::train(train_set, c, [&](const training::EpochMetrics& m) {
    if (a.log_every == 0 || m.epoch % a.log_every != 0) return;
    out << format("epoch %4zu  deepcsp %.5f  top %.4f  train acc %.3f  val ce %.4f  val acc %.3f\n",
                  m.epoch, m.deepcsp_loss, m.top_mean, m.train_accuracy, m.val_cross_entropy,
                  m.val_accuracy);
    out.flush();
  });

  models::save_checkpoint(dir / "model.ckpt", result.model);
  training::write_metrics_jsonl(dir / "metrics.jsonl", result.history);
  write_text(dir / "filters.json", csp::filter_bank_to_json(result.model.bank));

  json summary{{"best_epoch", result.best_epoch},
               {"epochs_run", result.history.back().epoch},
               {"stopped_early", result.stopped_early},
               {"fit_trials", result.fit_indices.size()},
               {"validation_trials", result.validation_indices.size()},
               {"best", json::parse(training::epoch_metrics_json(result.history[result.best_epoch]))}};
  std::string test_note;
  if (test_set.size() > 0) {
    const auto m = training::evaluate(result.model, test_set);
    summary["test"] = json::parse(training::metrics_json(m));
    test_note = format(", test accuracy %.3f on %zu trials", m.accuracy, m.trials);
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  const auto& best = result.history[result.best_epoch];
  out << format("best epoch %zu: validation accuracy %.3f%s\n", result.best_epoch, best.val_accuracy,
                test_note.c_str());
  return kExitOk;
}

// --- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string part = "all";
  double test_fraction = 0.2;
  std::uint64_t seed = 42;
};

void add_eval(CLI::App& app, EvalArgs& a, std::vector<Flags>& flags) {
  auto* sub = app.add_subcommand("eval", "Score a checkpoint on an epoch file");
  Flags f(sub);
  f.add("--checkpoint,-c", a.checkpoint, "Model checkpoint")->required();
  f.add("--data,-d", a.data, "Input epoch file")->required();
  f.add("--out,-o", a.out, "Output directory for eval.json (optional)");
  f.add("--part", a.part, "Trials to score, using the same split as train")
      ->check(CLI::IsMember({"all", "train", "test"}));
  f.add("--test-fraction", a.test_fraction, "Held-out share used when splitting");
  f.add("--seed", a.seed, "Split seed");
  flags.push_back(f);
}

int run_eval(const EvalArgs& a, const Flags& flags, std::ostream& out) {
  check_fraction(a.test_fraction, "test-fraction", true);
  if (a.part != "all" && a.test_fraction == 0.0) throw UsageError("--part needs a non-zero --test-fraction");
  const auto model = models::load_checkpoint(a.checkpoint);
  const auto set = data::read_epochs(a.data);
  check_compatible(model, set, a.checkpoint, a.data);
  data::EpochSet scored = set;
  if (a.part != "all") {
    auto [train_set, test_set] = holdout(set, a.test_fraction, a.seed);
    scored = a.part == "train" ? train_set : test_set;
  }
  const std::string report = training::metrics_json(training::evaluate(model, scored));
  out << report;
  if (!a.out.empty()) {
    echo_config(a.out, flags);
    write_text(fs::path(a.out) / "eval.json", report);
  }
  return kExitOk;
}

// --- csp -----------------------------------------------------------------

struct CspArgs {
  std::string data;
  std::string out;
  std::size_t components = 2;
  std::size_t hidden = 16;
  double lr = 0.1;
  std::size_t batch_size = 64;
  std::size_t epochs = 100;
  double shrinkage = csp::kDefaultShrinkage;
  double test_fraction = 0.2;
  std::uint64_t seed = 42;
};

void add_csp(CLI::App& app, CspArgs& a, std::vector<Flags>& flags) {
  auto* sub = app.add_subcommand("csp", "Classical CSP features with the two-layer classifier");
  Flags f(sub);
  f.add("--data,-d", a.data, "Input epoch file")->required();
  f.add("--out,-o", a.out, "Output directory")->required();
  f.add("--components", a.components, "CSP components n per class")->check(CLI::PositiveNumber);
  f.add("--hidden", a.hidden, "Classifier hidden width")->check(CLI::PositiveNumber);
  f.add("--lr", a.lr, "Classifier learning rate")->check(CLI::NonNegativeNumber);
  f.add("--batch-size", a.batch_size, "Classifier minibatch size")->check(CLI::PositiveNumber);
  f.add("--epochs", a.epochs, "Classifier epochs");
  f.add("--shrinkage", a.shrinkage, "Covariance shrinkage factor")->check(CLI::NonNegativeNumber);
  f.add("--test-fraction", a.test_fraction, "Share of trials held out as the test set");
  f.add("--seed", a.seed, "Random seed");
  flags.push_back(f);
}

int run_csp(const CspArgs& a, const Flags& flags, std::ostream& out) {
  check_fraction(a.test_fraction, "test-fraction", true);
  const auto set = data::read_epochs(a.data);
  const auto [train_set, test_set] = holdout(set, a.test_fraction, a.seed);
  training::BaselineConfig c;
  c.n_components = a.components;
  c.hidden = a.hidden;
  c.lr = a.lr;
  c.batch_size = a.batch_size;
  c.epochs = a.epochs;
  c.shrinkage = a.shrinkage;
  c.seed = a.seed;
  const auto r = training::csp_baseline(train_set, test_set, c);

  const fs::path dir(a.out);
  echo_config(dir, flags);
  write_text(dir / "filters.json", csp::filter_bank_to_json(r.bank));
  json metrics{{"train", json::parse(training::metrics_json(r.train))}};
  if (test_set.size() > 0) metrics["test"] = json::parse(training::metrics_json(r.test));
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  out << format("train accuracy %.3f", r.train.accuracy);
  if (test_set.size() > 0) out << format(", test accuracy %.3f", r.test.accuracy);
  out << "\n";
  return kExitOk;
}

// --- connectivity --------------------------------------------------------

struct ConnectivityArgs {
  std::string data;
  std::string out;
  std::string method = "plv";
  double band_low = signal::kMotorBand.low;
  double band_high = signal::kMotorBand.high;
  std::size_t segment_length = 0;
  double overlap = 0.5;
  std::size_t fir_taps = 0;
};

void add_connectivity(CLI::App& app, ConnectivityArgs& a, std::vector<Flags>& flags) {
  auto* sub = app.add_subcommand("connectivity", "Trial-averaged channel connectivity matrix");
  Flags f(sub);
  f.add("--data,-d", a.data, "Input epoch file")->required();
  f.add("--out,-o", a.out, "Output directory")->required();
  f.add("--method", a.method, "Estimator")->check(CLI::IsMember(kMethods));
  f.add("--band-low", a.band_low, "Band lower edge in Hz");
  f.add("--band-high", a.band_high, "Band upper edge in Hz");
  f.add("--segment-length", a.segment_length, "Welch segment length for coh (0: about 1 s)");
  f.add("--overlap", a.overlap, "Welch segment overlap for coh");
  f.add("--fir-taps", a.fir_taps, "Band-pass taps for phase estimators (0: automatic)");
  flags.push_back(f);
}

int run_connectivity(const ConnectivityArgs& a, const Flags& flags, std::ostream& out) {
  check_fraction(a.overlap, "overlap", true);
  connectivity::Options o;
  o.band = band_of(a.band_low, a.band_high);
  o.segment_length = a.segment_length;
  o.overlap = a.overlap;
  o.fir_taps = a.fir_taps;
  const auto set = data::read_epochs(a.data);
  const auto g = connectivity::connectivity_matrix(set, *connectivity::parse_method(a.method), o);
  const fs::path dir(a.out);
  echo_config(dir, flags);
  write_text(dir / "connectivity.csv", connectivity::graph_csv(g));
  write_text(dir / "connectivity.json", connectivity::graph_sidecar_json(g));
  out << format("%s over %zu trials, %zu channels", a.method.c_str(), g.trials_used, set.channels());
  if (g.clamped) out << format(" (%zu values clamped)", g.clamped);
  out << "\n";
  return kExitOk;
}

// --- export --------------------------------------------------------------

struct ExportArgs {
  std::string data;
  std::string out;
  std::string checkpoint;
  std::string positions;
  std::size_t components = 4;
  std::size_t scatter_components = 2;
  double shrinkage = csp::kDefaultShrinkage;
};

void add_export(CLI::App& app, ExportArgs& a, std::vector<Flags>& flags) {
  auto* sub = app.add_subcommand("export", "Filter bank, feature scatter and topomap data");
  sub->alias("export-filters");
  Flags f(sub);
  f.add("--data,-d", a.data, "Input epoch file")->required();
  f.add("--out,-o", a.out, "Output directory")->required();
  f.add("--checkpoint,-c", a.checkpoint, "Model checkpoint; without one the scatter uses classical CSP");
  f.add("--positions", a.positions, "Channel positions JSON (default: positions stored in the data file)");
  f.add("--components", a.components, "CSP components per class for the topomap bank")
      ->check(CLI::PositiveNumber);
  f.add("--scatter-components", a.scatter_components, "Feature columns in scatter.csv")
      ->check(CLI::PositiveNumber);
  f.add("--shrinkage", a.shrinkage, "Covariance shrinkage factor")->check(CLI::NonNegativeNumber);
  flags.push_back(f);
}

int run_export(const ExportArgs& a, const Flags& flags, std::ostream& out) {
  const auto set = data::read_epochs(a.data);
  std::vector<data::Position> positions;
  if (!a.positions.empty()) {
    positions = data::read_positions_json(a.positions, set.channel_names);
  } else if (set.channel_positions) {
    positions = *set.channel_positions;
  } else {
    throw Error(a.data + " stores no channel positions; pass --positions");
  }

  auto spatial = csp::fit_filter_bank(set.trial_list(), set.labels, a.components, a.shrinkage);
  spatial.channel_names = set.channel_names;

  csp::SpatialFilterBank bank = spatial;
  std::vector<Tensor> features;
  if (!a.checkpoint.empty()) {
    const auto model = models::load_checkpoint(a.checkpoint);
    check_compatible(model, set, a.checkpoint, a.data);
    bank = model.bank;
    features = training::latent_features(model, set);
  } else {
    features = set.trial_list();
  }
  if (a.scatter_components > bank.size()) {
    throw UsageError("--scatter-components exceeds the " + std::to_string(bank.size()) + " filters");
  }

  const fs::path dir(a.out);
  echo_config(dir, flags);
  write_text(dir / "filters.json", csp::filter_bank_to_json(bank));
  write_text(dir / "scatter.csv", training::export_scatter(features, set.labels, bank, a.scatter_components));
  write_text(dir / "topomap.json", training::export_topomap(spatial, positions));
  out << "wrote filters.json, scatter.csv and topomap.json to " << a.out << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DeepCSP: trainable common spatial patterns for two-class EEG", "deepcsp"};
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(DEEPCSP_VERSION));
  app.footer(
      "Every command accepts --config FILE (a JSON object of flag values, as echoed to config.json);\n"
      "flags given on the command line take precedence.\n"
      "Exit codes: 0 success, 1 runtime failure, 2 usage error.");

  std::vector<Flags> flags;
  SynthArgs synth;
  TrainArgs train;
  EvalArgs eval;
  CspArgs csp_args;
  ConnectivityArgs conn;
  ExportArgs exp;
  add_synth(app, synth, flags);
  add_train(app, train, flags);
  add_eval(app, eval, flags);
  add_csp(app, csp_args, flags);
  add_connectivity(app, conn, flags);
  add_export(app, exp, flags);
  std::string ignored_config;
  for (auto& f : flags) {
    f.app()->add_option("--config", ignored_config, "JSON file of flag values");
  }

  std::vector<std::string> argv = args;
  try {
    if (!argv.empty() && argv.front().rfind("-", 0) != 0) {
      if (const auto path = find_config(argv)) {
        const auto* sub = app.get_subcommand_no_throw(argv.front());
        if (sub) {
          auto injected = config_args(*path, sub->get_name());
          argv.insert(argv.begin() + 1, injected.begin(), injected.end());
        }
      }
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  std::reverse(argv.begin(), argv.end());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const auto* chosen = app.get_subcommands().front();
    auto flags_of = [&](const CLI::App* sub) -> const Flags& {
      return *std::find_if(flags.begin(), flags.end(), [&](const Flags& f) { return f.app() == sub; });
    };
    const std::string name = chosen->get_name();
    if (name == "synth") return run_synth(synth, flags_of(chosen), out, err);
    if (name == "train") return run_train(train, flags_of(chosen), out);
    if (name == "eval") return run_eval(eval, flags_of(chosen), out);
    if (name == "csp") return run_csp(csp_args, flags_of(chosen), out);
    if (name == "connectivity") return run_connectivity(conn, flags_of(chosen), out);
    if (name == "export") return run_export(exp, flags_of(chosen), out);
    err << "unknown command " << name << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace deepcsp::cli
