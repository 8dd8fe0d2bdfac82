// SPDX-License-Identifier: Apache-2.0
//
// egotr: cross-view geo-localization toolkit.
//
//   egotr generate --pairs 256 --seed 7 --out runs
//   egotr train    --data runs/generate-... --epochs 50 --mode self_cross
//   egotr eval     --checkpoint runs/train-.../best.ckpt --data ... --split test
//   egotr diagnose --checkpoint runs/train-.../best.ckpt --data ...
//
// Option precedence: command-line flag > --config file > built-in default.

#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "egotr/commands.hpp"
#include "egotr/runconfig.hpp"

namespace {

struct FlagSink {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out, data, ckpt, split, mode, resume;
  std::uint64_t pairs = 0, epochs = 0, batch = 0, warmup = 0, eval_every = 0;
  std::uint64_t ground_h = 0, ground_w = 0, aerial_s = 0;
  double lr = 0, wd = 0, alpha = 0, clip = 0;
  bool aligned = false, unaligned = false;
  bool no_pos = false, polar = false;
};

// Global and per-command options write into `fs`; only flags the user
// actually passed (count > 0) are copied onto the RunConfig afterwards.
void add_common(CLI::App* cmd, FlagSink& fs) {
  cmd->add_option("--config", fs.config_path, "key=value config file");
  cmd->add_option("--seed", fs.seed, "run seed");
  cmd->add_option("--out", fs.out, "parent directory for run outputs");
}

// True when the active subcommand defines `name` and the user passed it.
bool passed(const CLI::App* cmd, const std::string& name) {
  const CLI::Option* o = cmd->get_option_no_throw(name);
  return o != nullptr && o->count() > 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-view geo-localization toolkit"};
  app.require_subcommand(1);
  FlagSink fs;

  CLI::App* gen = app.add_subcommand("generate", "render a synthetic dataset");
  add_common(gen, fs);
  gen->add_option("--pairs", fs.pairs, "number of ground/aerial pairs");
  gen->add_flag("--aligned", fs.aligned, "panoramas keep heading 0");
  gen->add_flag("--unaligned", fs.unaligned, "random panorama headings");
  gen->add_option("--ground-h", fs.ground_h, "panorama height in px");
  gen->add_option("--ground-w", fs.ground_w, "panorama width in px");
  gen->add_option("--aerial-s", fs.aerial_s, "aerial raster side in px");

  CLI::App* tr = app.add_subcommand("train", "train a two-branch model");
  add_common(tr, fs);
  tr->add_option("--data", fs.data, "dataset directory");
  tr->add_option("--epochs", fs.epochs, "training epochs");
  tr->add_option("--batch", fs.batch, "pairs per batch");
  tr->add_option("--lr", fs.lr, "peak learning rate");
  tr->add_option("--weight-decay", fs.wd, "decoupled weight decay");
  tr->add_option("--alpha", fs.alpha, "triplet loss sharpness");
  tr->add_option("--clip-norm", fs.clip, "gradient norm cap, 0 disables");
  tr->add_option("--warmup", fs.warmup, "linear warmup steps");
  tr->add_option("--eval-every", fs.eval_every, "validation cadence, epochs");
  tr->add_option("--mode", fs.mode, "attention mode: self | self_cross");
  tr->add_flag("--no-pos-embed", fs.no_pos, "drop positional embeddings");
  tr->add_flag("--polar", fs.polar, "feed the aerial branch polar warps");
  tr->add_option("--resume", fs.resume, "checkpoint to continue from");

  CLI::App* ev = app.add_subcommand("eval", "retrieval metrics for a checkpoint");
  add_common(ev, fs);
  ev->add_option("--checkpoint", fs.ckpt, "model checkpoint");
  ev->add_option("--data", fs.data, "dataset directory");
  ev->add_option("--split", fs.split, "train | val | test");

  CLI::App* dg = app.add_subcommand("diagnose", "similarity and embedding reports");
  add_common(dg, fs);
  dg->add_option("--checkpoint", fs.ckpt, "model checkpoint");
  dg->add_option("--data", fs.data, "dataset directory");
  dg->add_option("--split", fs.split, "train | val | test");

  CLI11_PARSE(app, argc, argv);
  CLI::App* cmd = app.get_subcommands().front();

  try {
    egotr::RunConfig rc;
    if (passed(cmd, "--config")) rc.apply_file(fs.config_path);
    if (passed(cmd, "--seed")) {
      rc.seed = fs.seed;
      rc.gen.seed = fs.seed;
    }
    if (passed(cmd, "--out")) rc.out = fs.out;
    if (passed(cmd, "--pairs")) rc.gen.n_pairs = fs.pairs;
    if (passed(cmd, "--aligned") && passed(cmd, "--unaligned"))
      throw egotr::UsageError("generate: --aligned conflicts with --unaligned");
    if (passed(cmd, "--aligned")) rc.gen.aligned = true;
    if (passed(cmd, "--unaligned")) rc.gen.aligned = false;
    if (passed(cmd, "--ground-h")) rc.gen.sizes.ground_h = fs.ground_h;
    if (passed(cmd, "--ground-w")) rc.gen.sizes.ground_w = fs.ground_w;
    if (passed(cmd, "--aerial-s")) rc.gen.sizes.aerial_s = fs.aerial_s;
    if (passed(cmd, "--data")) rc.data_dir = fs.data;
    if (passed(cmd, "--epochs")) rc.epochs = fs.epochs;
    if (passed(cmd, "--batch")) rc.batch_size = fs.batch;
    if (passed(cmd, "--lr")) rc.lr = fs.lr;
    if (passed(cmd, "--weight-decay")) rc.weight_decay = fs.wd;
    if (passed(cmd, "--alpha")) rc.alpha = fs.alpha;
    if (passed(cmd, "--clip-norm")) rc.clip_norm = fs.clip;
    if (passed(cmd, "--warmup")) rc.warmup_steps = fs.warmup;
    if (passed(cmd, "--eval-every")) rc.eval_every = fs.eval_every;
    if (passed(cmd, "--mode"))
      rc.model.mode = egotr::attention_mode_from_string(fs.mode);
    if (passed(cmd, "--no-pos-embed")) rc.model.use_pos_embed = false;
    if (passed(cmd, "--polar")) rc.model.use_polar = true;
    if (passed(cmd, "--resume")) rc.resume = fs.resume;
    if (passed(cmd, "--checkpoint")) rc.checkpoint = fs.ckpt;
    if (passed(cmd, "--split")) rc.split = fs.split;

    if (cmd == gen) egotr::cmd_generate(rc, std::cout);
    else if (cmd == tr) egotr::cmd_train(rc, std::cout);
    else if (cmd == ev) egotr::cmd_eval(rc, std::cout);
    else egotr::cmd_diagnose(rc, std::cout);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
