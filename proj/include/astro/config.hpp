// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "astro/data.hpp"
#include "astro/error.hpp"
#include "astro/model.hpp"
#include "astro/optim.hpp"

namespace astro {

/// Everything a training run needs. Defaults reproduce the reference
/// training recipe; architecture defaults are toy-scale.
struct RunConfig {
  ModelConfig model;
  AugPolicy aug;
  Schedule schedule;  // steps_per_epoch is derived from the data at train time
  RAdamConfig radam;
  std::size_t lookahead_k = 5;
  double lookahead_alpha = 0.5;
  std::size_t batch_size = 256;
  std::size_t eval_batch_size = 256;
  double mixup_alpha = 0.8;  // 0 disables mixup
  double label_smoothing = 0.1;
  std::optional<double> grad_clip;  // global-norm clip; none by default
  double sampler_tolerance = 0.04;
  std::uint64_t seed = 0;
  std::string train_data;
  std::string val_data;  // empty: split train_data by `split`
  std::string data_format = "gimg";
  std::vector<double> split{0.8, 0.1, 0.1};
  std::string out_dir = "run";
  bool record_wall_time = true;
  double stop_train_acc = 0.0;  // > 0: stop after the first epoch whose clean train accuracy reaches it

  void validate() const {
    model.validate();
    Schedule s = schedule;
    s.steps_per_epoch = 1;
    s.validate();
    if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("batch sizes must be positive");
    if (!(mixup_alpha >= 0.0)) throw ConfigError("mixup_alpha must be >= 0");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must be in [0, 1)");
    if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive or none");
    if (!(radam.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (lookahead_k == 0) throw ConfigError("lookahead_k must be positive");
    if (!(lookahead_alpha >= 0.0 && lookahead_alpha <= 1.0)) throw ConfigError("lookahead_alpha must be in [0, 1]");
    if (!(sampler_tolerance >= 0.0)) throw ConfigError("sampler_tolerance must be >= 0");
    parse_data_format(data_format);
    if (split.size() != 3) throw ConfigError("split needs three fractions (train, val, test)");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got \"" + v + "\"");
  return d;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long n = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    n = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError(key + ": expected a non-negative integer, got \"" + v + "\"");
  return static_cast<std::size_t>(n);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got \"" + v + "\"");
}

inline std::string fmt(double d) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

template <class Seq>
std::string join(const Seq& s, const std::function<std::string(typename Seq::value_type)>& f) {
  std::string out;
  for (const auto& x : s) out += (out.empty() ? "" : ",") + f(x);
  return out;
}

inline AugOp parse_aug_op(const std::string& s) {
  for (auto op : all_aug_ops())
    if (to_string(op) == s) return op;
  throw ConfigError("unknown augmentation op \"" + s + "\"");
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, Field>& config_fields() {
  using S = std::string;
  auto sz = [](std::size_t RunConfig::*m) {
    return Field{[m](RunConfig& c, const S& v) { c.*m = to_size("", v); }, [m](const RunConfig& c) { return std::to_string(c.*m); }};
  };
  auto num = [](double RunConfig::*m) {
    return Field{[m](RunConfig& c, const S& v) { c.*m = to_double("", v); }, [m](const RunConfig& c) { return fmt(c.*m); }};
  };
  auto str = [](S RunConfig::*m) {
    return Field{[m](RunConfig& c, const S& v) { c.*m = v; }, [m](const RunConfig& c) { return c.*m; }};
  };
  auto four = [](std::array<std::size_t, 4> ModelConfig::*m) {
    return Field{[m](RunConfig& c, const S& v) {
                   auto items = split_list(v);
                   if (items.size() != 4) throw ConfigError("expected 4 comma-separated integers, got \"" + v + "\"");
                   for (std::size_t i = 0; i < 4; ++i) (c.model.*m)[i] = to_size("", items[i]);
                 },
                 [m](const RunConfig& c) {
                   const auto& a = c.model.*m;
                   return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) + "," +
                          std::to_string(a[3]);
                 }};
  };
  auto msz = [](std::size_t ModelConfig::*m) {
    return Field{[m](RunConfig& c, const S& v) { c.model.*m = to_size("", v); },
                 [m](const RunConfig& c) { return std::to_string(c.model.*m); }};
  };
  auto mnum = [](double ModelConfig::*m) {
    return Field{[m](RunConfig& c, const S& v) { c.model.*m = to_double("", v); },
                 [m](const RunConfig& c) { return fmt(c.model.*m); }};
  };
  static const std::map<std::string, Field> fields = {
      // architecture
      {"layout", {[](RunConfig& c, const S& v) { c.model.layout = v; }, [](const RunConfig& c) { return c.model.layout; }}},
      {"in_channels", msz(&ModelConfig::in_channels)},
      {"stem_channels", msz(&ModelConfig::stem_channels)},
      {"channels", four(&ModelConfig::channels)},
      {"depths", four(&ModelConfig::depths)},
      {"head_dim", msz(&ModelConfig::head_dim)},
      {"expansion", msz(&ModelConfig::expansion)},
      {"se_ratio", mnum(&ModelConfig::se_ratio)},
      {"num_classes", msz(&ModelConfig::num_classes)},
      {"image_size", msz(&ModelConfig::image_size)},
      {"stochastic_depth", mnum(&ModelConfig::drop_path_rate)},
      {"head_dropout", mnum(&ModelConfig::head_dropout)},
      // schedule
      {"epochs", {[](RunConfig& c, const S& v) { c.schedule.total_epochs = to_size("", v); },
                  [](const RunConfig& c) { return std::to_string(c.schedule.total_epochs); }}},
      {"warmup_epochs", {[](RunConfig& c, const S& v) { c.schedule.warmup_epochs = to_size("", v); },
                         [](const RunConfig& c) { return std::to_string(c.schedule.warmup_epochs); }}},
      {"base_lr", {[](RunConfig& c, const S& v) { c.schedule.base_lr = to_double("", v); },
                   [](const RunConfig& c) { return fmt(c.schedule.base_lr); }}},
      {"warmup_lr", {[](RunConfig& c, const S& v) { c.schedule.warmup_lr = to_double("", v); },
                     [](const RunConfig& c) { return fmt(c.schedule.warmup_lr); }}},
      {"min_lr", {[](RunConfig& c, const S& v) { c.schedule.min_lr = to_double("", v); },
                  [](const RunConfig& c) { return fmt(c.schedule.min_lr); }}},
      // optimizer
      {"optimizer", {[](RunConfig&, const S& v) {
                       if (v != "lookahead_radam") throw ConfigError("only lookahead_radam is supported, got \"" + v + "\"");
                     },
                     [](const RunConfig&) { return S("lookahead_radam"); }}},
      {"weight_decay", {[](RunConfig& c, const S& v) { c.radam.weight_decay = to_double("", v); },
                        [](const RunConfig& c) { return fmt(c.radam.weight_decay); }}},
      {"beta1", {[](RunConfig& c, const S& v) { c.radam.beta1 = to_double("", v); },
                 [](const RunConfig& c) { return fmt(c.radam.beta1); }}},
      {"beta2", {[](RunConfig& c, const S& v) { c.radam.beta2 = to_double("", v); },
                 [](const RunConfig& c) { return fmt(c.radam.beta2); }}},
      {"adam_eps", {[](RunConfig& c, const S& v) { c.radam.eps = to_double("", v); },
                    [](const RunConfig& c) { return fmt(c.radam.eps); }}},
      {"lookahead_k", sz(&RunConfig::lookahead_k)},
      {"lookahead_alpha", num(&RunConfig::lookahead_alpha)},
      {"grad_clip", {[](RunConfig& c, const S& v) {
                       if (v == "none") c.grad_clip.reset();
                       else c.grad_clip = to_double("", v);
                     },
                     [](const RunConfig& c) { return c.grad_clip ? fmt(*c.grad_clip) : S("none"); }}},
      {"ema", {[](RunConfig&, const S& v) {
                 if (v != "none") throw ConfigError("ema is not supported; only \"none\" is accepted");
               },
               [](const RunConfig&) { return S("none"); }}},
      // regularisation and data
      {"batch_size", sz(&RunConfig::batch_size)},
      {"eval_batch_size", sz(&RunConfig::eval_batch_size)},
      {"mixup_alpha", num(&RunConfig::mixup_alpha)},
      {"label_smoothing", num(&RunConfig::label_smoothing)},
      {"aug_layers", {[](RunConfig& c, const S& v) { c.aug.num_layers = to_size("", v); },
                      [](const RunConfig& c) { return std::to_string(c.aug.num_layers); }}},
      {"aug_ops", {[](RunConfig& c, const S& v) {
                     c.aug.ops.clear();
                     if (v == "none") return;
                     for (const auto& s : split_list(v)) c.aug.ops.push_back(parse_aug_op(s));
                   },
                   [](const RunConfig& c) {
                     return c.aug.ops.empty() ? S("none")
                                              : join<std::vector<AugOp>>(c.aug.ops, [](AugOp op) { return to_string(op); });
                   }}},
      {"center_crop", {[](RunConfig&, const S& v) {
                         if (to_bool("center_crop", v)) throw ConfigError("center_crop = true is not supported");
                       },
                       [](const RunConfig&) { return S("false"); }}},
      {"sampler_tolerance", num(&RunConfig::sampler_tolerance)},
      {"seed", {[](RunConfig& c, const S& v) { c.seed = to_size("", v); }, [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"train_data", str(&RunConfig::train_data)},
      {"val_data", str(&RunConfig::val_data)},
      {"data_format", str(&RunConfig::data_format)},
      {"split", {[](RunConfig& c, const S& v) {
                   c.split.clear();
                   for (const auto& s : split_list(v)) c.split.push_back(to_double("", s));
                 },
                 [](const RunConfig& c) { return join<std::vector<double>>(c.split, [](double d) { return fmt(d); }); }}},
      {"out_dir", str(&RunConfig::out_dir)},
      {"record_wall_time", {[](RunConfig& c, const S& v) { c.record_wall_time = to_bool("", v); },
                            [](const RunConfig& c) { return S(c.record_wall_time ? "true" : "false"); }}},
      {"stop_train_acc", num(&RunConfig::stop_train_acc)},
  };
  return fields;
}

}  // namespace detail

/// Applies `key = value` lines on top of `base`. `#` starts a comment.
/// Unknown keys, duplicate keys and malformed values are errors naming the line.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  const auto& fields = detail::config_fields();
  std::stringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key \"" + key + "\"");
    if (auto [pos, fresh] = seen.emplace(key, lineno); !fresh)
      throw ConfigError("line " + std::to_string(lineno) + ": \"" + key + "\" already set on line " +
                        std::to_string(pos->second));
    try {
      it->second.set(base, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + " (" + key + "): " + e.what());
    }
  }
  base.validate();
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Every key, one per line, in a form parse_config reads back unchanged.
inline std::string format_config(const RunConfig& c) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + " = " + field.get(c) + "\n";
  return out;
}

}  // namespace astro
