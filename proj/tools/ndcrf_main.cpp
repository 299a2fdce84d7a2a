// ndcrf command line: filter / refine / train-overfit / eval.
//
// Exit codes: 0 success, 2 bad arguments, 3 I/O failure, 4 shape mismatch,
// 5 invalid configuration, 6 training divergence, 1 anything else.
// Each command prints a single-line JSON summary on stdout; diagnostics go
// to stderr. NDCRF_THREADS caps the OpenMP thread count.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"

#include "ndcrf/crf_rnn.hpp"
#include "ndcrf/densecrf.hpp"
#include "ndcrf/errors.hpp"
#include "ndcrf/image_io.hpp"
#include "ndcrf/npy.hpp"
#include "ndcrf/permutohedral.hpp"
#include "ndcrf/tensor.hpp"

namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void apply_thread_env() {
#ifdef _OPENMP
  const char* env = std::getenv("NDCRF_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end && *end == '\0' && v >= 1 && v <= 4096) {
    omp_set_num_threads(static_cast<int>(v));
  } else {
    std::cerr << "warning: ignoring invalid NDCRF_THREADS value '" << env
              << "'\n";
  }
#endif
}

ndcrf::CrfParams load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ndcrf::IoError("cannot open config file: " + path.string());
  njson j;
  try {
    j = njson::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ndcrf::ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  if (!j.is_object())
    throw ndcrf::ConfigError(path.string() + ": top level must be an object");

  static const std::set<std::string> known = {
      "theta_alpha", "theta_beta", "theta_gamma", "w", "mu", "iterations"};
  for (const auto& item : j.items()) {
    if (!known.count(item.key()))
      std::cerr << "warning: " << path.string() << ": unknown key \""
                << item.key() << "\" ignored\n";
  }

  ndcrf::CrfParams p;
  try {
    p.theta_alpha = j.at("theta_alpha").get<float>();
    p.theta_beta = j.at("theta_beta").get<float>();
    p.theta_gamma = j.at("theta_gamma").get<float>();
    if (j.contains("w")) {
      const auto& w = j.at("w");
      if (!w.is_array() || w.size() != 2)
        throw ndcrf::ConfigError(path.string() +
                                 ": \"w\" must be a two-element array");
      p.w1 = w.at(0).get<float>();
      p.w2 = w.at(1).get<float>();
    }
    if (j.contains("iterations")) p.iterations = j.at("iterations").get<int>();
    if (j.contains("mu")) {
      const auto& mu = j.at("mu");
      if (mu.is_string()) {
        if (mu.get<std::string>() != "potts")
          throw ndcrf::ConfigError(
              path.string() + ": the only string form of \"mu\" is \"potts\"");
        // Leave p.mu empty: Potts over however many labels show up.
      } else if (mu.is_array()) {
        p.mu = ndcrf::CompatibilityMatrix::from_rows(
            mu.get<std::vector<std::vector<float>>>());
      } else {
        throw ndcrf::ConfigError(path.string() +
                                 ": \"mu\" must be \"potts\" or a square matrix");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ndcrf::ConfigError(path.string() + ": " + e.what());
  }
  return p;
}

njson params_to_json(const ndcrf::CrfParams& p) {
  njson j;
  j["theta_alpha"] = p.theta_alpha;
  j["theta_beta"] = p.theta_beta;
  j["theta_gamma"] = p.theta_gamma;
  j["w"] = njson::array({p.w1, p.w2});
  if (p.mu.empty()) {
    j["mu"] = "potts";
  } else {
    njson rows = njson::array();
    for (int a = 0; a < p.mu.labels(); ++a) {
      njson row = njson::array();
      for (int b = 0; b < p.mu.labels(); ++b) row.push_back(p.mu.at(a, b));
      rows.push_back(std::move(row));
    }
    j["mu"] = std::move(rows);
  }
  j["iterations"] = p.iterations;
  return j;
}

void write_json_file(const njson& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ndcrf::IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw ndcrf::IoError("failed writing: " + path.string());
}

void emit_summary(const njson& j) { std::cout << j.dump() << "\n"; }

bool has_png_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

void write_labels_any(const ndcrf::LabelMap& labels, int k, const fs::path& path) {
  if (has_png_extension(path)) {
    ndcrf::write_label_png(labels, k, path);
  } else {
    ndcrf::write_labels(labels, path);
  }
}

// ---------------------------------------------------------------------------
// filter

struct FilterArgs {
  std::string input;
  std::string reference;
  std::string mode;
  double theta_alpha = 0.0;
  double theta_beta = 0.0;
  double theta_gamma = 0.0;
  std::string output;
  bool no_normalize = false;
};

void run_filter(const FilterArgs& a, const CLI::App& cmd) {
  const bool appearance = a.mode == "appearance";
  if (appearance) {
    if (cmd.count("--theta-alpha") == 0 || cmd.count("--theta-beta") == 0)
      throw CLI::RequiredError(
          "--theta-alpha and --theta-beta (appearance mode)");
  } else {
    if (cmd.count("--theta-gamma") == 0)
      throw CLI::RequiredError("--theta-gamma (smoothness mode)");
  }

  const ndcrf::Tensor input = ndcrf::read_tensor(a.input);
  const ndcrf::Tensor reference = ndcrf::read_image(a.reference);
  if (input.extents() != reference.extents())
    throw ndcrf::ShapeError("input and reference spatial extents differ");

  ndcrf::FeatureConfig fc;
  fc.mode = appearance ? ndcrf::FeatureMode::appearance
                       : ndcrf::FeatureMode::smoothness;
  fc.theta_alpha = static_cast<float>(a.theta_alpha);
  fc.theta_beta = static_cast<float>(a.theta_beta);
  fc.theta_gamma = static_cast<float>(a.theta_gamma);

  const auto t0 = Clock::now();
  const ndcrf::FeatureMatrix features = ndcrf::build_features(reference, fc);
  const ndcrf::Lattice lattice(features);
  const double build_ms = ms_since(t0);

  const auto t1 = Clock::now();
  std::vector<float> out = ndcrf::filter(lattice, input.storage(),
                                         input.channels(),
                                         {.normalize = !a.no_normalize});
  const double filter_ms = ms_since(t1);

  ndcrf::write_tensor(
      ndcrf::Tensor(input.extents(), input.channels(), std::move(out)),
      a.output);

  njson j;
  j["command"] = "filter";
  j["mode"] = a.mode;
  j["n_points"] = lattice.n_points();
  j["feature_dim"] = lattice.dim();
  j["n_vertices"] = lattice.n_vertices();
  j["normalized"] = !a.no_normalize;
  j["build_ms"] = build_ms;
  j["filter_ms"] = filter_ms;
  j["wall_ms"] = build_ms + filter_ms;
  j["output"] = a.output;
  emit_summary(j);
}

// ---------------------------------------------------------------------------
// refine

struct RefineArgs {
  std::string probs;
  std::string reference;
  std::string config;
  std::string output_q;
  std::string output_labels;
};

void run_refine(const RefineArgs& a) {
  const ndcrf::Tensor probs = ndcrf::read_tensor(a.probs);
  const ndcrf::Tensor reference = ndcrf::read_image(a.reference);
  const ndcrf::CrfParams params = load_config(a.config);

  const auto t0 = Clock::now();
  ndcrf::InferenceStats stats;
  const ndcrf::MeanFieldState state =
      ndcrf::mean_field_inference(reference, probs, params, &stats);
  const double wall_ms = ms_since(t0);

  ndcrf::write_tensor(state.q, a.output_q);
  if (!a.output_labels.empty()) {
    write_labels_any(ndcrf::argmax_channels(state.q), probs.channels(),
                     a.output_labels);
  }

  njson j;
  j["command"] = "refine";
  j["n_points"] = probs.voxels();
  j["k"] = probs.channels();
  j["iterations"] = params.iterations;
  j["max_delta_q"] = stats.max_delta_q;
  j["wall_ms"] = wall_ms;
  j["output_q"] = a.output_q;
  if (!a.output_labels.empty()) j["output_labels"] = a.output_labels;
  emit_summary(j);
}

// ---------------------------------------------------------------------------
// train-overfit

struct TrainArgs {
  std::string image;
  std::string labels;
  std::string config;
  double strength = 0.0;
  std::uint64_t seed = 0;
  double lr = 0.05;
  int steps = 300;
  std::string out_dir;
  bool train_mu = false;
};

void run_train(const TrainArgs& a) {
  if (!(a.strength >= 0.0 && a.strength < 1.0))
    throw CLI::ValidationError("--strength", "must lie in [0, 1)");
  if (!(a.lr >= 0.0) || !std::isfinite(a.lr))
    throw CLI::ValidationError("--lr", "must be finite and >= 0");
  if (a.steps < 0) throw CLI::ValidationError("--steps", "must be >= 0");

  const ndcrf::Tensor image = ndcrf::read_image(a.image);
  const ndcrf::LabelMap labels = ndcrf::read_labels(a.labels);

  int k = 2;
  for (std::uint8_t l : labels.labels) k = std::max(k, static_cast<int>(l) + 1);

  const ndcrf::CrfParams params = load_config(a.config);

  const fs::path out_dir(a.out_dir);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec)
    throw ndcrf::IoError("cannot create output directory " + out_dir.string() +
                         ": " + ec.message());

  const auto t0 = Clock::now();
  const ndcrf::Tensor probs = ndcrf::distort_labels(
      labels, k, a.seed, static_cast<float>(a.strength));
  ndcrf::write_tensor(probs, out_dir / "distorted_probs.npy");

  const ndcrf::LabelMap before = ndcrf::argmax_channels(probs);
  ndcrf::write_labels(before, out_dir / "labels_before.npy");
  if (labels.extents.size() == 2)
    ndcrf::write_label_png(before, k, out_dir / "labels_before.png");

  ndcrf::TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.steps = a.steps;
  cfg.train_mu = a.train_mu;
  cfg.seed = a.seed;

  const ndcrf::TrainResult result =
      ndcrf::train_overfit(image, probs, labels, params, cfg);

  ndcrf::write_history_csv(result.history, out_dir / "history.csv");
  write_json_file(params_to_json(result.params),
                  out_dir / "trained_params.json");

  const ndcrf::MeanFieldState refined =
      ndcrf::mean_field_inference(image, probs, result.params);
  const ndcrf::LabelMap after = ndcrf::argmax_channels(refined.q);
  ndcrf::write_labels(after, out_dir / "labels_after.npy");
  if (labels.extents.size() == 2)
    ndcrf::write_label_png(after, k, out_dir / "labels_after.png");
  const double wall_ms = ms_since(t0);

  njson j;
  j["command"] = "train-overfit";
  j["k"] = k;
  j["steps"] = cfg.steps;
  j["baseline_loss"] = result.history.front().loss;
  j["final_loss"] = result.history.back().loss;
  j["baseline_dice"] = result.history.front().dice;
  j["final_dice"] = result.history.back().dice;
  j["wall_ms"] = wall_ms;
  j["out_dir"] = a.out_dir;
  emit_summary(j);
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string pred;
  std::string truth;
  int label = -1;
  bool all_labels = false;
};

void run_eval(const EvalArgs& a, const CLI::App& cmd) {
  const ndcrf::LabelMap pred = ndcrf::read_labels(a.pred);
  const ndcrf::LabelMap truth = ndcrf::read_labels(a.truth);

  std::vector<int> wanted;
  if (cmd.count("--label") > 0 && !a.all_labels) {
    wanted.push_back(a.label);
  } else {
    int k = 0;
    for (std::uint8_t l : pred.labels) k = std::max(k, static_cast<int>(l) + 1);
    for (std::uint8_t l : truth.labels) k = std::max(k, static_cast<int>(l) + 1);
    for (int l = 0; l < k; ++l) wanted.push_back(l);
  }

  njson dice = njson::object();
  double sum = 0.0;
  for (int l : wanted) {
    const double d = ndcrf::dice_coefficient(pred, truth, l);
    dice[std::to_string(l)] = d;
    sum += d;
  }

  njson j;
  j["command"] = "eval";
  j["dice"] = std::move(dice);
  if (!wanted.empty()) j["mean_dice"] = sum / static_cast<double>(wanted.size());
  emit_summary(j);
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_env();

  CLI::App app{
      "Fully connected CRF tools: permutohedral-lattice Gaussian filtering, "
      "mean-field refinement, and overfit training"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ndcrf 0.1.0");

  FilterArgs fa;
  CLI::App* filter = app.add_subcommand(
      "filter", "High-dimensional Gaussian filter of a tensor");
  filter->add_option("--input", fa.input, "Input tensor (.npy, channels last)")
      ->required();
  filter->add_option("--reference", fa.reference,
                     "Reference image (.png or .npy)")
      ->required();
  filter->add_option("--mode", fa.mode, "Kernel type")
      ->required()
      ->check(CLI::IsMember({"appearance", "smoothness"}));
  filter->add_option("--theta-alpha", fa.theta_alpha,
                     "Appearance spatial std-dev")
      ->check(CLI::PositiveNumber);
  filter->add_option("--theta-beta", fa.theta_beta,
                     "Appearance intensity std-dev")
      ->check(CLI::PositiveNumber);
  filter->add_option("--theta-gamma", fa.theta_gamma,
                     "Smoothness spatial std-dev")
      ->check(CLI::PositiveNumber);
  filter->add_option("--output", fa.output, "Output tensor (.npy)")->required();
  filter->add_flag("--no-normalize", fa.no_normalize,
                   "Skip division by the filtered all-ones channel");
  filter->callback([&] { run_filter(fa, *filter); });

  RefineArgs ra;
  CLI::App* refine = app.add_subcommand(
      "refine", "Mean-field CRF refinement of per-voxel probabilities");
  refine->add_option("--probs", ra.probs, "Initial probabilities (.npy, N x k)")
      ->required();
  refine->add_option("--reference", ra.reference,
                     "Reference image (.png or .npy)")
      ->required();
  refine->add_option("--config", ra.config, "CRF parameter JSON")->required();
  refine->add_option("--output-q", ra.output_q, "Refined marginals (.npy)")
      ->required();
  refine->add_option("--output-labels", ra.output_labels,
                     "Optional argmax labels (.npy or .png)");
  refine->callback([&] { run_refine(ra); });

  TrainArgs ta;
  CLI::App* train = app.add_subcommand(
      "train-overfit", "Distort ground truth labels, then fit the CRF weights "
                       "back onto them by unrolled SGD");
  train->add_option("--image", ta.image, "Reference image (.png or .npy)")
      ->required();
  train->add_option("--labels", ta.labels, "Ground truth labels (.npy, uint8)")
      ->required();
  train->add_option("--config", ta.config, "Initial CRF parameter JSON")
      ->required();
  train->add_option("--strength", ta.strength,
                    "Label corruption strength in [0, 1)")
      ->required();
  train->add_option("--seed", ta.seed, "Corruption RNG seed");
  train->add_option("--lr", ta.lr, "SGD learning rate");
  train->add_option("--steps", ta.steps, "SGD step count");
  train->add_option("--out-dir", ta.out_dir, "Output directory")->required();
  train->add_flag("--train-mu", ta.train_mu,
                  "Also fit the off-diagonal compatibility entries");
  train->callback([&] { run_train(ta); });

  EvalArgs ea;
  CLI::App* eval = app.add_subcommand("eval", "Dice overlap of two label maps");
  eval->add_option("--pred", ea.pred, "Predicted labels (.npy)")->required();
  eval->add_option("--truth", ea.truth, "Ground truth labels (.npy)")->required();
  eval->add_option("--label", ea.label, "Evaluate this label only")
      ->check(CLI::NonNegativeNumber);
  eval->add_flag("--all-labels", ea.all_labels,
                 "Evaluate every label present in either map (default)");
  eval->callback([&] { run_eval(ea, *eval); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ndcrf::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ndcrf::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const ndcrf::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const ndcrf::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 6;
  } catch (const ndcrf::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
