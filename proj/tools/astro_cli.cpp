// SPDX-License-Identifier: Apache-2.0
// Command-line front end: training, evaluation and the verification suites.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "astro/checks.hpp"
#include "astro/config.hpp"
#include "astro/train.hpp"

namespace {

using namespace astro;

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

// Thrown for bad flag values detected after CLI11 parsing.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

int report(const CheckResult& r) {
  for (const auto& d : r.details) std::cout << "  " << d << "\n";
  std::cout << r.name << ": " << r.summary << "\n";
  if (!r.passed) {
    std::cout << "FAIL: " << r.first_failure << "\n";
    return kFailure;
  }
  std::cout << "PASS\n";
  return kOk;
}

// Check suites are written against 64-bit tolerances.
void require_f64_checks(const char* cmd) {
  if (precision_from_env(Precision::F64) != Precision::F64)
    throw UsageError(std::string(cmd) + " runs in 64-bit only; unset ASTRO_PRECISION or set it to f64");
}

GridSpec parse_torus(const std::string& s) {
  const auto x = s.find('x');
  std::size_t h = 0, w = 0;
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t a = 0, b = 0;
    h = std::stoul(s.substr(0, x), &a);
    w = std::stoul(s.substr(x + 1), &b);
    if (a != x || b != s.size() - x - 1) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw UsageError("--torus2d expects HxW, got \"" + s + "\"");
  }
  if (h == 0 || w == 0) throw UsageError("--torus2d sides must be positive");
  return {h, w, Topology::Torus};
}

template <class T>
int run_train(RunConfig cfg) {
  for (const auto& w : layout_warnings(cfg.model)) std::cerr << "warning: " << w << "\n";
  std::cout << metrics_header() << "\n";
  auto res = train<T>(cfg, &std::cout);
  std::cout << "trained " << res.epochs_run << " epochs; artifacts in " << cfg.out_dir << "\n";
  return kOk;
}

template <class T>
int run_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data, const std::string& format,
             std::size_t batch) {
  Rng rng(cfg.seed);
  auto model = build_model<T>(cfg.model, rng);
  load_checkpoint_into(checkpoint, checkpoint_tensors(model));
  const auto ds = load_dataset<T>(data, parse_data_format(format));
  const auto r = evaluate(model, ds, batch);
  std::printf("examples %zu\naccuracy %.6f\nloss %.6f\n", r.count, r.accuracy, r.loss);
  std::printf("class,error_contribution\n");
  for (std::size_t c = 0; c < r.class_error.size(); ++c) std::printf("%zu,%.6f\n", c, r.class_error[c]);
  return kOk;
}

int run_summarize(const RunConfig& cfg) {
  const auto s = summarize(cfg.model);
  std::printf("layout %s, %zux%zu input, %zu classes\n", cfg.model.layout.c_str(), cfg.model.image_size,
              cfg.model.image_size, cfg.model.num_classes);
  std::printf("%-10s %14s %16s\n", "stage", "params", "MACs/image");
  for (const auto& st : s.stages)
    std::printf("%-10s %14llu %16llu\n", st.name.c_str(), static_cast<unsigned long long>(st.params),
                static_cast<unsigned long long>(st.macs));
  std::printf("%-10s %14llu %16llu\n", "total", static_cast<unsigned long long>(s.params),
              static_cast<unsigned long long>(s.macs));
  Rng rng(0);
  auto model = build_model<float>(cfg.model, rng);
  const std::size_t enumerated = model.parameter_count();
  std::printf("enumerated parameters %zu\n", enumerated);
  for (const auto& w : layout_warnings(cfg.model)) std::printf("warning: %s\n", w.c_str());
  if (enumerated != s.params) {
    std::printf("FAIL: analytic count %llu differs from enumeration\n", static_cast<unsigned long long>(s.params));
    return kFailure;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid convolution/relative-attention image classifier: training and verification tool", "astro"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  std::string config_path, data_override, out_override;
  std::uint64_t seed_override = 0;
  train_cmd->add_option("--config", config_path, "Run config (key = value lines)")->required();
  auto* data_opt = train_cmd->add_option("--data", data_override, "Training data file (overrides train_data)");
  auto* out_opt = train_cmd->add_option("--out", out_override, "Output directory (overrides out_dir)");
  auto* seed_opt = train_cmd->add_option("--seed", seed_override, "Seed (overrides seed)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string ckpt_path, eval_data, eval_config, eval_format;
  std::size_t eval_batch = 256;
  eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset file")->required();
  eval_cmd->add_option("--config", eval_config, "Run config; defaults to run.cfg beside the checkpoint");
  eval_cmd->add_option("--format", eval_format, "gimg or cifar10-bin; defaults to the config's data_format");
  eval_cmd->add_option("--batch", eval_batch, "Evaluation batch size")->check(CLI::PositiveNumber);

  // checks
  std::uint64_t check_seed = 0;
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference check of every layer and block");
  grad_cmd->add_option("--seed", check_seed, "Seed for random inputs");

  auto* eq_cmd = app.add_subcommand("equivariance-check", "Cyclic-shift equivariance of relative attention on tori");
  std::size_t eq_n = 7, eq_d = 4, eq_instances = 100;
  std::string eq_torus = "4x4";
  eq_cmd->add_option("--n", eq_n, "Tokens on the 1-D torus (0 skips)");
  eq_cmd->add_option("--d", eq_d, "Feature dimension")->check(CLI::PositiveNumber);
  eq_cmd->add_option("--torus2d", eq_torus, "2-D torus HxW (\"none\" skips)");
  eq_cmd->add_option("--instances", eq_instances, "Random (input, bias) instances per grid")->check(CLI::PositiveNumber);
  eq_cmd->add_option("--seed", check_seed, "Seed");

  auto* ad_cmd = app.add_subcommand("adaptivity-check", "Attention weights depend on the input under a fixed bias");
  std::size_t ad_trials = 100;
  ad_cmd->add_option("--trials", ad_trials, "Random input pairs")->check(CLI::PositiveNumber);
  ad_cmd->add_option("--seed", check_seed, "Seed");

  auto* sampler_cmd = app.add_subcommand("sampler-check", "Per-class bounds of the stratified batch sampler");
  std::size_t s_batches = 500, s_batch = 256, s_classes = 10;
  sampler_cmd->add_option("--batches", s_batches, "Batches to draw per set")->check(CLI::PositiveNumber);
  sampler_cmd->add_option("--batch-size", s_batch, "Batch size")->check(CLI::PositiveNumber);
  sampler_cmd->add_option("--classes", s_classes, "Number of classes")->check(CLI::PositiveNumber);
  sampler_cmd->add_option("--seed", check_seed, "Seed");

  auto* sum_cmd = app.add_subcommand("summarize", "Per-stage parameter and MAC counts for a config");
  std::string sum_config;
  sum_cmd->add_option("--config", sum_config, "Run config")->required();

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic labelled gimg dataset");
  std::string synth_out;
  std::size_t synth_count = 256, synth_classes = 10, synth_size = 32;
  double synth_noise = 0.1;
  std::uint64_t synth_seed = 0;
  synth_cmd->add_option("--out", synth_out, "Output gimg file")->required();
  synth_cmd->add_option("--count", synth_count, "Number of images")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--classes", synth_classes, "Number of classes")->check(CLI::Range(1, 255));
  synth_cmd->add_option("--size", synth_size, "Image side")->check(CLI::Range(1, 65535));
  synth_cmd->add_option("--noise", synth_noise, "Pixel noise standard deviation")->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--seed", synth_seed, "Sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kUsage;
  }

  try {
    if (*train_cmd) {
      auto cfg = load_config(config_path);
      if (*data_opt) cfg.train_data = data_override;
      if (*out_opt) cfg.out_dir = out_override;
      if (*seed_opt) cfg.seed = seed_override;
      return precision_from_env(Precision::F32) == Precision::F64 ? run_train<double>(cfg) : run_train<float>(cfg);
    }
    if (*eval_cmd) {
      if (eval_config.empty()) eval_config = (std::filesystem::path(ckpt_path).parent_path() / "run.cfg").string();
      const auto cfg = load_config(eval_config);
      const auto fmt = eval_format.empty() ? cfg.data_format : eval_format;
      return precision_from_env(Precision::F32) == Precision::F64
                 ? run_eval<double>(cfg, ckpt_path, eval_data, fmt, eval_batch)
                 : run_eval<float>(cfg, ckpt_path, eval_data, fmt, eval_batch);
    }
    if (*grad_cmd) {
      require_f64_checks("grad-check");
      return report(run_grad_check_suite(check_seed));
    }
    if (*eq_cmd) {
      require_f64_checks("equivariance-check");
      std::vector<GridSpec> grids;
      if (eq_n > 0) grids.push_back(GridSpec::line(eq_n));
      if (eq_torus != "none") grids.push_back(parse_torus(eq_torus));
      if (grids.empty()) throw UsageError("nothing to check: --n 0 and --torus2d none");
      return report(run_equivariance_suite(grids, eq_d, eq_instances, check_seed));
    }
    if (*ad_cmd) {
      require_f64_checks("adaptivity-check");
      return report(run_adaptivity_suite(check_seed, ad_trials));
    }
    if (*sampler_cmd) return report(run_sampler_suite(s_batches, s_batch, s_classes, check_seed));
    if (*sum_cmd) return run_summarize(load_config(sum_config));
    if (*synth_cmd) {
      SyntheticSpec spec;
      spec.classes = synth_classes;
      spec.size = synth_size;
      spec.noise = synth_noise;
      Rng rng(synth_seed);
      write_gimg(synth_out, make_synthetic<float>(spec, synth_count, rng));
      std::cout << "wrote " << synth_count << " images to " << synth_out << "\n";
      return kOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
