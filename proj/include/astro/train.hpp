// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "astro/checkpoint.hpp"
#include "astro/config.hpp"
#include "astro/data.hpp"
#include "astro/loss.hpp"
#include "astro/model.hpp"
#include "astro/optim.hpp"

namespace astro {

struct MetricsRow {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps taken so far
  double lr = 0;         // rate used by the epoch's last step
  double train_loss = 0;
  double train_acc = 0;  // argmax(logits) against argmax(mixed target), train mode
  double val_loss = 0;
  double val_acc = 0;
  double wall_seconds = 0;
};

inline const char* metrics_header() { return "epoch,step,lr,train_loss,train_acc,val_loss,val_acc,wall_seconds"; }

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f", r.epoch, r.step, r.lr, r.train_loss,
                r.train_acc, r.val_loss, r.val_acc, r.wall_seconds);
  return buf;
}

struct EvalResult {
  std::size_t count = 0;
  double accuracy = 0;
  double loss = 0;                  // mean unsmoothed cross entropy
  std::vector<double> class_error;  // misclassified in class c / count; sums to 1 - accuracy
};

namespace detail {

template <class T>
std::size_t argmax_row(const Tensor<T>& m, std::size_t row) {
  const std::size_t K = m.dim(1);
  std::size_t best = 0;
  for (std::size_t k = 1; k < K; ++k)
    if (m[row * K + k] > m[row * K + best]) best = k;
  return best;
}

template <class T>
void check_data_matches(const ModelConfig& cfg, const Dataset<T>& d, const std::string& what) {
  if (d.images.rank() != 4) throw ShapeError(what + ": images must be [M, C, H, W]");
  if (d.channels() != cfg.in_channels || d.height() != cfg.image_size || d.width() != cfg.image_size)
    throw ShapeError(what + ": images are " + std::to_string(d.channels()) + "x" + std::to_string(d.height()) + "x" +
                     std::to_string(d.width()) + " but the config expects " + std::to_string(cfg.in_channels) + "x" +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  if (d.num_classes != cfg.num_classes)
    throw ShapeError(what + ": data has " + std::to_string(d.num_classes) + " classes, config has " +
                     std::to_string(cfg.num_classes));
}

}  // namespace detail

/// Eval-mode accuracy, loss and per-class error contribution. Results do not
/// depend on `batch`.
template <class T>
EvalResult evaluate(Model<T>& model, const Dataset<T>& data, std::size_t batch = 256) {
  detail::check_data_matches(model.cfg, data, "evaluate");
  if (batch == 0) throw ConfigError("eval batch size must be positive");
  const std::size_t M = data.size(), K = data.num_classes;
  EvalResult r;
  r.count = M;
  r.class_error.assign(K, 0.0);
  if (M == 0) return r;
  std::size_t correct = 0;
  std::vector<std::size_t> wrong(K, 0);
  double loss_sum = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < M; start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(M, start + batch); ++i) idx.push_back(i);
    const auto logits = model.predict(data.gather_images(idx));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::size_t y = data.labels[idx[b]];
      // Per-example log-softmax in double so the sum is batch-size independent.
      double mx = static_cast<double>(logits[b * K]);
      for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(logits[b * K + k]));
      double se = 0;
      for (std::size_t k = 0; k < K; ++k) se += std::exp(static_cast<double>(logits[b * K + k]) - mx);
      loss_sum += mx + std::log(se) - static_cast<double>(logits[b * K + y]);
      if (detail::argmax_row(logits, b) == y) ++correct;
      else ++wrong[y];
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(M);
  r.loss = loss_sum / static_cast<double>(M);
  for (std::size_t c = 0; c < K; ++c) r.class_error[c] = static_cast<double>(wrong[c]) / static_cast<double>(M);
  return r;
}

template <class T>
struct TrainResult {
  Model<T> model;
  std::vector<MetricsRow> rows;
  std::vector<double> step_losses;
  std::size_t epochs_run = 0;
  double best_val_acc = -1;
};

template <class T>
NamedTensors<T> checkpoint_tensors(Model<T>& m) {
  auto out = m.parameters();
  for (auto& b : m.buffers()) out.push_back(b);
  return out;
}

/// Runs the full recipe on in-memory data. Writes run.cfg, metrics.csv,
/// best.ckpt and last.ckpt into cfg.out_dir unless out_dir is empty.
template <class T>
TrainResult<T> train_on(const RunConfig& cfg, const Dataset<T>& train_set, const Dataset<T>& val_set,
                        std::ostream* log = nullptr) {
  cfg.validate();
  detail::check_data_matches(cfg.model, train_set, "training data");
  detail::check_data_matches(cfg.model, val_set, "validation data");
  if (train_set.size() == 0) throw DataError("training data is empty");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t K = cfg.model.num_classes;

  Rng root(cfg.seed);
  Rng init_rng = root.split(), sampler_rng = root.split(), aug_rng = root.split(), mix_rng = root.split(),
      drop_rng = root.split();

  TrainResult<T> res;
  res.model = build_model<T>(cfg.model, init_rng);
  auto& model = res.model;
  const auto params = model.parameters();

  const std::size_t batch = std::min(cfg.batch_size, train_set.size());
  StratifiedSampler sampler(train_set.class_index, batch, sampler_rng, cfg.sampler_tolerance);
  Schedule sched = cfg.schedule;
  sched.steps_per_epoch = (train_set.size() + batch - 1) / batch;
  sched.validate();

  RAdam<T> opt(params, cfg.radam);
  Lookahead<T> la(params, cfg.lookahead_k, cfg.lookahead_alpha);

  const bool to_disk = !cfg.out_dir.empty();
  std::ofstream csv;
  std::filesystem::path dir(cfg.out_dir);
  if (to_disk) {
    std::filesystem::create_directories(dir);
    std::ofstream rc(dir / "run.cfg");
    rc << format_config(cfg);
    if (!rc) throw DataError("cannot write " + (dir / "run.cfg").string());
    csv.open(dir / "metrics.csv", std::ios::trunc);
    if (!csv) throw DataError("cannot create " + (dir / "metrics.csv").string());
    csv << metrics_header() << "\n";
  }

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= sched.total_epochs; ++epoch) {
    double loss_sum = 0, lr = 0;
    std::size_t hits = 0, seen = 0;
    for (std::size_t s = 0; s < sched.steps_per_epoch; ++s, ++step) {
      const auto idx = sampler.next();
      const auto labels = train_set.gather_labels(idx);
      LabeledBatch<T> b{train_set.gather_images(idx), smooth_labels<T>(labels, K, cfg.label_smoothing)};
      if (cfg.aug.num_layers > 0 && !cfg.aug.ops.empty()) b.images = augment(b.images, cfg.aug, aug_rng);
      if (cfg.mixup_alpha > 0) b = mixup(b, reversed(b), cfg.mixup_alpha, mix_rng);

      Tape<T> tape;
      auto logits = model.forward(tape, b.images, Mode::Train, &drop_rng);
      Var<T> loss = [&] {
        try {
          return cross_entropy_soft(logits, b.targets);
        } catch (const NonFiniteError& e) {
          throw NonFiniteError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + e.what());
        }
      }();
      tape.backward(loss);

      std::vector<Tensor<T>> grads;
      grads.reserve(params.size());
      for (const auto& p : params) grads.push_back(tape.grad_of(*p.tensor));
      if (cfg.grad_clip) {
        double sq = 0;
        for (const auto& g : grads)
          for (auto v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
        const double norm = std::sqrt(sq);
        if (norm > *cfg.grad_clip) {
          const T f = static_cast<T>(*cfg.grad_clip / norm);
          for (auto& g : grads)
            for (auto& v : g.data()) v *= f;
        }
      }
      lr = sched.lr_at(step);
      try {
        opt.step(grads, lr);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + e.what());
      }
      la.after_step();

      res.step_losses.push_back(static_cast<double>(loss.value().item()));
      loss_sum += res.step_losses.back() * static_cast<double>(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r)
        if (detail::argmax_row(logits.value(), r) == detail::argmax_row(b.targets, r)) ++hits;
      seen += idx.size();
    }

    MetricsRow row;
    row.epoch = epoch;
    row.step = step;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(seen);
    row.train_acc = static_cast<double>(hits) / static_cast<double>(seen);
    if (val_set.size() > 0) {
      const auto ev = evaluate(model, val_set, cfg.eval_batch_size);
      row.val_loss = ev.loss;
      row.val_acc = ev.accuracy;
    } else {
      row.val_loss = row.val_acc = std::nan("");
    }
    if (cfg.record_wall_time)
      row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.rows.push_back(row);
    res.epochs_run = epoch;

    if (to_disk) {
      csv << format_metrics_row(row) << "\n" << std::flush;
      if (!csv) throw DataError("write error on metrics.csv");
      const auto tensors = checkpoint_tensors(model);
      if (val_set.size() > 0 && row.val_acc > res.best_val_acc) save_checkpoint(dir / "best.ckpt", tensors);
      save_checkpoint(dir / "last.ckpt", tensors);
    }
    if (val_set.size() > 0) res.best_val_acc = std::max(res.best_val_acc, row.val_acc);
    if (log) *log << format_metrics_row(row) << "\n" << std::flush;

    if (cfg.stop_train_acc > 0 && evaluate(model, train_set, cfg.eval_batch_size).accuracy >= cfg.stop_train_acc) break;
  }
  return res;
}

/// Loads the configured data and trains. Without val_data the training file
/// is split by cfg.split (train, val, test) with a seeded shuffle.
template <class T>
TrainResult<T> train(const RunConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  if (cfg.train_data.empty()) throw ConfigError("train_data is not set");
  const auto fmt = parse_data_format(cfg.data_format);
  auto full = load_dataset<T>(cfg.train_data, fmt);
  if (!cfg.val_data.empty()) return train_on(cfg, full, load_dataset<T>(cfg.val_data, fmt), log);
  Rng split_rng(cfg.seed ^ 0x5851F42D4C957F2DULL);
  const auto parts = split_dataset(full, cfg.split, split_rng);
  return train_on(cfg, parts[0], parts[1], log);
}

}  // namespace astro
