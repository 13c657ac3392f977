// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "astro/checks.hpp"
#include "astro/config.hpp"
#include "astro/train.hpp"

#ifndef ASTRO_SOURCE_DIR
#error "ASTRO_SOURCE_DIR must point at the repository root"
#endif

using namespace astro;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed;
  std::string detail;
};

Outcome from(const CheckResult& r) { return {r.passed, r.passed ? r.summary : r.summary + "; first failure: " + r.first_failure}; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("astro_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig toy_config() { return load_config((fs::path(ASTRO_SOURCE_DIR) / "configs" / "toy.cfg").string()); }

template <class T>
Dataset<T> synthetic(std::size_t n, std::uint64_t seed) {
  SyntheticSpec s;
  Rng rng(seed);
  return make_synthetic<T>(s, n, rng);
}

// Learning-sanity settings: the toy model with regularisation switched off so
// that fitting speed is the only thing measured.
RunConfig sanity_config(std::size_t epochs, double stop_acc) {
  auto c = toy_config();
  c.out_dir = "";
  c.schedule.total_epochs = epochs;
  c.schedule.warmup_epochs = 1;
  c.schedule.base_lr = 3e-3;
  c.schedule.warmup_lr = 1e-3;
  c.batch_size = 64;
  c.mixup_alpha = 0;
  c.label_smoothing = 0;
  c.aug.num_layers = 0;
  c.model.drop_path_rate = 0;
  c.stop_train_acc = stop_acc;
  return c;
}

Outcome learning_sanity() {
  char buf[400];
  auto small = sanity_config(200, 0.99);
  const auto train_a = synthetic<float>(256, 101);
  Rng count_rng(0);
  const std::size_t params = build_model<float>(small.model, count_rng).parameter_count();
  auto a = train_on(small, train_a, Dataset<float>::empty(3, 32, 32, 10));
  const double acc_a = evaluate(a.model, train_a).accuracy;

  auto big = sanity_config(30, 0.99);
  const auto train_b = synthetic<float>(2000, 202), test_b = synthetic<float>(500, 303);
  auto b = train_on(big, train_b, Dataset<float>::empty(3, 32, 32, 10));
  const double acc_b = evaluate(b.model, test_b).accuracy;

  const bool ok = params <= 300000 && acc_a >= 0.99 && a.epochs_run <= 200 && acc_b >= 0.90;
  std::snprintf(buf, sizeof buf,
                "CCCT, %zu params, float32: 256 images -> train acc %.4f after %zu epochs (need >= 0.99 within 200); "
                "2000/500 split -> held-out acc %.4f after %zu epochs (need >= 0.90)",
                params, acc_a, a.epochs_run, acc_b, b.epochs_run);
  return {ok, buf};
}

Outcome layout_harness() {
  const auto root = scratch("layouts");
  const auto train = synthetic<float>(128, 11), val = synthetic<float>(64, 12);
  std::string detail;
  bool ok = true;
  std::string header;
  for (const std::string layout : {"CCCC", "CCCT", "CCTT", "CTTT"}) {
    auto c = toy_config();
    c.model.layout = layout;
    c.schedule.total_epochs = 3;
    c.out_dir = (root / layout).string();
    bool finite = true;
    std::string why;
    try {
      const auto res = train_on(c, train, val);
      for (const auto& r : res.rows)
        for (double v : {r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc}) finite = finite && std::isfinite(v);
      const auto csv = slurp(fs::path(c.out_dir) / "metrics.csv");
      const auto lines = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n'));
      const auto head = csv.substr(0, csv.find('\n'));
      if (header.empty()) header = head;
      if (lines != 4 || head != header || res.rows.size() != 3) finite = false, why = " (csv shape)";
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s%s val_acc %.3f loss %.3f", detail.empty() ? "" : "; ", layout.c_str(),
                    res.rows.back().val_acc, res.rows.back().train_loss);
      detail += buf;
    } catch (const std::exception& e) {
      finite = false;
      why = std::string(" (") + e.what() + ")";
      detail += (detail.empty() ? "" : "; ") + layout + " failed";
    }
    if (!finite) ok = false, detail += why;
  }
  return {ok, "3 epochs each, CSVs in " + root.string() + ": " + detail};
}

Outcome determinism() {
  auto c = toy_config();
  c.schedule.total_epochs = 2;
  c.record_wall_time = false;
  const auto train = synthetic<double>(96, 21), val = synthetic<double>(32, 22);
  const auto d1 = scratch("det1"), d2 = scratch("det2");
  c.out_dir = d1.string();
  auto r1 = train_on(c, train, val);
  c.out_dir = d2.string();
  train_on(c, train, val);
  const auto csv1 = slurp(d1 / "metrics.csv"), csv2 = slurp(d2 / "metrics.csv");
  const bool identical = !csv1.empty() && csv1 == csv2;

  Rng other(12345);
  auto fresh = build_model<double>(c.model, other);
  load_checkpoint_into((d1 / "last.ckpt").string(), checkpoint_tensors(fresh));
  const auto x = synthetic<double>(16, 23).images;
  const double dev = max_abs_diff(fresh.predict(x), r1.model.predict(x));
  char buf[200];
  std::snprintf(buf, sizeof buf, "64-bit metrics CSVs %s (%zu bytes); checkpoint round-trip logit deviation %.3e (tol 1e-10)",
                identical ? "byte-identical" : "DIFFER", csv1.size(), dev);
  return {identical && dev < 1e-10, buf};
}

Outcome schedule_endpoints() {
  Schedule s;  // warmup 1e-5 -> 2e-5 over 5 epochs, cosine to 0 over 300
  s.steps_per_epoch = 10;
  const double first = s.lr_at(0), warm_end = s.lr_at(s.warmup_steps() - 1), after = s.lr_at(s.warmup_steps()),
               last = s.lr_at(s.total_steps() - 1);
  const bool ok = first == 1e-5 && warm_end == 2e-5 && after == 2e-5 && last == 0.0;
  char buf[200];
  std::snprintf(buf, sizeof buf, "step 0 -> %.17g, warmup end -> %.17g, first cosine step -> %.17g, final step -> %.17g",
                first, warm_end, after, last);
  return {ok, buf};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;  // 0: no runtime bound
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite", 120, [] { return from(run_grad_check_suite(0)); }},
      {2, "torus shift equivariance", 30, [] { return from(run_equivariance_suite(standard_tori(), 4, 100, 0)); }},
      {3, "zero-bias and constant-input limits", 0, [] { return from(run_limits_suite(0)); }},
      {4, "input adaptivity", 0, [] { return from(run_adaptivity_suite(0, 100)); }},
      {5, "loop oracle equivalence", 0, [] { return from(run_oracle_suite(0)); }},
      {6, "stratified sampler bounds", 0, [] { return from(run_sampler_suite(500, 256, 10, 0)); }},
      {7, "mixup statistics", 0, [] { return from(run_mixup_suite(0, 100000, 1000)); }},
      {8, "stochastic depth", 0, [] { return from(run_drop_path_suite(0, 100000, 0.2)); }},
      {9, "learning sanity", 600, learning_sanity},
      {10, "layout harness", 0, layout_harness},
      {11, "determinism and checkpoint round trip", 0, determinism},
      {12, "schedule endpoints", 0, schedule_endpoints},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.passed = false;
      o.detail += "; over the " + std::to_string(static_cast<int>(c.budget_s)) + " s budget";
    }
    failures += !o.passed;
    std::printf("%s [%2d] %s: %s (%.1f s)\n", o.passed ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
