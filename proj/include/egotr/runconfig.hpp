// SPDX-License-Identifier: Apache-2.0
//
// Run configuration for the command-line tools. One flat key=value config
// file plus flag overrides produce a RunConfig; precedence is flag over
// file over built-in default. Unknown keys are rejected outright, and the
// full effective configuration can be echoed back out in a stable order,
// so every run directory carries a file that reproduces it exactly.

#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include "egotr/data.hpp"
#include "egotr/io.hpp"
#include "egotr/kv.hpp"
#include "egotr/model.hpp"

namespace egotr {

struct RunConfig {
  ModelConfig model;  // desk-scale defaults; full-size via model.* keys

  // Optimizer.
  double lr = 1e-4;
  double weight_decay = 0.03;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // Schedule and loss.
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double alpha = 10.0;
  double clip_norm = 1.0;  // 0 disables
  double lr_min = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t eval_every = 1;  // validation cadence in epochs

  // Inputs.
  std::string data_dir;    // dataset directory for train/eval/diagnose
  std::string checkpoint;  // model input for eval/diagnose
  std::string resume;      // checkpoint to continue training from
  std::string split = "test";
  GeneratorParams gen;  // generate command parameters

  // Run identity.
  std::uint64_t seed = 1;
  std::string out = "runs";

  void apply(const std::string& key, const std::string& value) {
    try {
      if (key == "model.embed_dim") model.embed_dim = parse_u64(value);
      else if (key == "model.depth") model.depth = parse_u64(value);
      else if (key == "model.num_heads") model.num_heads = parse_u64(value);
      else if (key == "model.stem_channels") {
        model.stem_channels.clear();
        for (const auto& part : split_list(value))
          model.stem_channels.push_back(parse_u64(part));
      } else if (key == "model.in_channels") model.in_channels = parse_u64(value);
      else if (key == "model.ground_h") model.ground_h = parse_u64(value);
      else if (key == "model.ground_w") model.ground_w = parse_u64(value);
      else if (key == "model.aerial_h") model.aerial_h = parse_u64(value);
      else if (key == "model.aerial_w") model.aerial_w = parse_u64(value);
      else if (key == "model.mode") model.mode = attention_mode_from_string(trim(value));
      else if (key == "model.use_pos_embed") model.use_pos_embed = parse_bool(value);
      else if (key == "model.use_polar") model.use_polar = parse_bool(value);
      else if (key == "model.normalize_descriptor") model.normalize_descriptor = parse_bool(value);
      else if (key == "optim.lr") lr = parse_f64(value);
      else if (key == "optim.weight_decay") weight_decay = parse_f64(value);
      else if (key == "optim.beta1") beta1 = parse_f64(value);
      else if (key == "optim.beta2") beta2 = parse_f64(value);
      else if (key == "optim.eps") eps = parse_f64(value);
      else if (key == "train.epochs") epochs = parse_u64(value);
      else if (key == "train.batch_size") batch_size = parse_u64(value);
      else if (key == "train.alpha") alpha = parse_f64(value);
      else if (key == "train.clip_norm") clip_norm = parse_f64(value);
      else if (key == "train.lr_min") lr_min = parse_f64(value);
      else if (key == "train.warmup_steps") warmup_steps = parse_u64(value);
      else if (key == "train.eval_every") eval_every = parse_u64(value);
      else if (key == "train.resume") resume = trim(value);
      else if (key == "data.dir") data_dir = trim(value);
      else if (key == "checkpoint") checkpoint = trim(value);
      else if (key == "split") split = trim(value);
      else if (key == "gen.pairs") gen.n_pairs = parse_u64(value);
      else if (key == "gen.seed") gen.seed = parse_u64(value);
      else if (key == "gen.aligned") gen.aligned = parse_bool(value);
      else if (key == "gen.ground_h") gen.sizes.ground_h = parse_u64(value);
      else if (key == "gen.ground_w") gen.sizes.ground_w = parse_u64(value);
      else if (key == "gen.aerial_s") gen.sizes.aerial_s = parse_u64(value);
      else if (key == "seed") seed = parse_u64(value);
      else if (key == "out") out = trim(value);
      else throw DataError("config: unknown key '" + key + "'");
    } catch (const DataError& e) {
      const std::string what = e.what();
      if (what.rfind("config:", 0) == 0) throw;
      throw DataError("config: key '" + key + "': " + what);
    }
  }

  // Parses `key=value` lines; blank lines and lines starting with '#' are
  // skipped. A key may appear at most once per file.
  void apply_text(const std::string& text) {
    std::set<std::string> seen;
    for (const std::string& raw : egotr::split(text, '\n')) {
      const std::string line = trim(raw);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw DataError("config: expected key=value, got '" + line + "'");
      const std::string key = trim(line.substr(0, eq));
      if (!seen.insert(key).second)
        throw DataError("config: duplicate key '" + key + "'");
      apply(key, line.substr(eq + 1));
    }
  }

  void apply_file(const std::filesystem::path& path) {
    apply_text(read_text_file(path));
  }

  // Full effective configuration, one key per line, fixed order. Feeding
  // the output back through apply_text reproduces the same RunConfig.
  std::string to_text() const {
    std::string s;
    auto put = [&](const char* k, const std::string& v) {
      s += std::string(k) + "=" + v + "\n";
    };
    for (const auto& [k, v] : model.to_kv()) put(("model." + k).c_str(), v);
    put("optim.lr", fmt_f64(lr));
    put("optim.weight_decay", fmt_f64(weight_decay));
    put("optim.beta1", fmt_f64(beta1));
    put("optim.beta2", fmt_f64(beta2));
    put("optim.eps", fmt_f64(eps));
    put("train.epochs", std::to_string(epochs));
    put("train.batch_size", std::to_string(batch_size));
    put("train.alpha", fmt_f64(alpha));
    put("train.clip_norm", fmt_f64(clip_norm));
    put("train.lr_min", fmt_f64(lr_min));
    put("train.warmup_steps", std::to_string(warmup_steps));
    put("train.eval_every", std::to_string(eval_every));
    put("train.resume", resume);
    put("data.dir", data_dir);
    put("checkpoint", checkpoint);
    put("split", split);
    put("gen.pairs", std::to_string(gen.n_pairs));
    put("gen.seed", std::to_string(gen.seed));
    put("gen.aligned", gen.aligned ? "1" : "0");
    put("gen.ground_h", std::to_string(gen.sizes.ground_h));
    put("gen.ground_w", std::to_string(gen.sizes.ground_w));
    put("gen.aerial_s", std::to_string(gen.sizes.aerial_s));
    put("seed", std::to_string(seed));
    put("out", out);
    return s;
  }

  void validate() const {
    model.validate();
    check_usage(lr > 0.0, "config: optim.lr must be positive");
    check_usage(weight_decay >= 0.0, "config: optim.weight_decay must be >= 0");
    check_usage(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0,
                "config: optimizer betas must lie in (0, 1)");
    check_usage(eps > 0.0, "config: optim.eps must be positive");
    check_usage(batch_size >= 2, "config: train.batch_size must be at least 2");
    check_usage(alpha > 0.0, "config: train.alpha must be positive");
    check_usage(clip_norm >= 0.0, "config: train.clip_norm must be >= 0");
    check_usage(lr_min >= 0.0 && lr_min <= lr,
                "config: train.lr_min must lie in [0, optim.lr]");
    check_usage(eval_every >= 1, "config: train.eval_every must be >= 1");
    split_from_string(split);  // throws on anything but train/val/test
  }

 private:
  // Comma-separated list, rejecting empties ("16,32,64").
  static std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> parts = egotr::split(trim(v), ',');
    for (const std::string& p : parts)
      if (trim(p).empty()) throw DataError("empty list element");
    return parts;
  }
};

}  // namespace egotr
