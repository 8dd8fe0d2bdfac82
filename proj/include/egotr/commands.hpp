// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the CLI: dataset generation, training,
// retrieval evaluation, and model diagnostics. Each command materializes
// one fresh run directory named <command>-<utc stamp>-s<seed>[-n] under
// the configured parent and never writes into an existing one, so a
// sequence of runs is append-only. Every directory carries a config.txt
// echo of the complete effective configuration; given (config, seed) the
// produced checkpoints and CSV files are byte-identical across reruns
// (directory names are the only timestamped element).

#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "egotr/checkpoint.hpp"
#include "egotr/data.hpp"
#include "egotr/evaluation.hpp"
#include "egotr/io.hpp"
#include "egotr/model.hpp"
#include "egotr/runconfig.hpp"
#include "egotr/training.hpp"

namespace egotr {

// splitmix64 finalizer over (seed, salt): decorrelates per-epoch shuffle
// streams from the model-init seed without any shared state.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::string utc_stamp() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

// Creates runs/<command>-<stamp>-s<seed>, appending -2, -3, ... when the
// name is taken (reruns within one second). Never reuses a directory.
inline std::filesystem::path make_run_dir(const std::string& parent,
                                          const std::string& command,
                                          std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(parent);
  const std::string base =
      command + "-" + utc_stamp() + "-s" + std::to_string(seed);
  for (std::size_t n = 1;; ++n) {
    fs::path dir =
        fs::path(parent) / (n == 1 ? base : base + "-" + std::to_string(n));
    if (fs::create_directory(dir)) return dir;
  }
}

// ---------------------------------------------------------------------------
// generate

inline std::filesystem::path cmd_generate(const RunConfig& rc,
                                          std::ostream& log) {
  rc.validate();
  const Dataset ds = make_dataset(rc.gen);
  const std::filesystem::path dir =
      make_run_dir(rc.out, "generate", rc.gen.seed);
  write_dataset(dir, ds);
  write_text_file(dir / "config.txt", rc.to_text());
  const DatasetManifest& m = ds.manifest;
  log << "dataset " << dir.string() << "\n"
      << "  pairs " << m.params.n_pairs << " (train " << m.n_train() << ", val "
      << m.n_val() << ", test " << m.n_test() << ")\n"
      << "  ground " << m.params.sizes.ground_h << "x"
      << m.params.sizes.ground_w << ", aerial " << m.params.sizes.aerial_s
      << "x" << m.params.sizes.aerial_s << "\n"
      << "  aligned " << (m.params.aligned ? "yes" : "no") << ", seed "
      << m.params.seed << "\n";
  return dir;
}

// ---------------------------------------------------------------------------
// train

// Progress and optimizer state stored next to each checkpoint so an
// interrupted run can continue. Moments are kept bit-exact.
struct TrainProgress {
  std::uint64_t epochs_done = 0;
  std::uint64_t total_steps = 0;
  double best_val_r1 = -1.0;  // below any real recall; -1 means "none yet"
  std::uint64_t best_epoch = 0;
};

inline void save_train_state(const std::filesystem::path& path,
                             EgoTrModel<float>& model,
                             const OptimState<float>& st,
                             const TrainProgress& pr) {
  NamedBlobFile f;
  f.meta.emplace_back("kind", "train_state");
  f.meta.emplace_back("t", std::to_string(st.t));
  f.meta.emplace_back("epochs_done", std::to_string(pr.epochs_done));
  f.meta.emplace_back("total_steps", std::to_string(pr.total_steps));
  f.meta.emplace_back("best_val_r1", fmt_f64(pr.best_val_r1));
  f.meta.emplace_back("best_epoch", std::to_string(pr.best_epoch));
  if (!st.m.empty()) {
    std::size_t i = 0;
    model.visit_params([&](const std::string& name, Tensor<float>&) {
      Tensor<float> m({st.m[i].size()}), v({st.v[i].size()});
      std::copy(st.m[i].begin(), st.m[i].end(), m.data().begin());
      std::copy(st.v[i].begin(), st.v[i].end(), v.data().begin());
      f.tensors.emplace_back("m." + name, std::move(m));
      f.tensors.emplace_back("v." + name, std::move(v));
      ++i;
    });
  }
  f.write(path);
}

inline TrainProgress load_train_state(const std::filesystem::path& path,
                                      EgoTrModel<float>& model,
                                      OptimState<float>& st) {
  const NamedBlobFile f = NamedBlobFile::read(path);
  const KvMap meta = f.meta_map();
  const auto kind = meta.find("kind");
  if (kind == meta.end() || kind->second != "train_state")
    throw DataError(path.string() + ": not a train-state file");
  st.t = parse_u64(kv_need(meta, "t"));
  TrainProgress pr;
  pr.epochs_done = parse_u64(kv_need(meta, "epochs_done"));
  pr.total_steps = parse_u64(kv_need(meta, "total_steps"));
  pr.best_val_r1 = parse_f64(kv_need(meta, "best_val_r1"));
  pr.best_epoch = parse_u64(kv_need(meta, "best_epoch"));
  st.m.clear();
  st.v.clear();
  if (!f.tensors.empty()) {
    std::size_t i = 0;
    model.visit_params([&](const std::string& name, Tensor<float>& p) {
      if (i * 2 + 1 >= f.tensors.size())
        throw DataError(path.string() + ": truncated optimizer state");
      const auto& [mname, m] = f.tensors[i * 2];
      const auto& [vname, v] = f.tensors[i * 2 + 1];
      if (mname != "m." + name || vname != "v." + name)
        throw DataError(path.string() + ": state tensor order mismatch at '" +
                        mname + "'");
      if (m.numel() != p.numel() || v.numel() != p.numel())
        throw DataError(path.string() + ": moment size mismatch on '" + name +
                        "'");
      st.m.emplace_back(m.data().begin(), m.data().end());
      st.v.emplace_back(v.data().begin(), v.data().end());
      ++i;
    });
    if (i * 2 != f.tensors.size())
      throw DataError(path.string() + ": extra tensors in optimizer state");
  }
  return pr;
}

// The rendered geometry a model was built for has to match the dataset it
// is fed. In polar mode the aerial branch consumes the warp, which
// resamples any square aerial raster onto the panorama grid, so only the
// panorama geometry is pinned there.
inline void check_geometry(const ModelConfig& m, const GeneratorParams& g,
                           const std::string& what) {
  check_usage(m.ground_h == g.sizes.ground_h && m.ground_w == g.sizes.ground_w,
              what + ": model expects ground " + std::to_string(m.ground_h) +
                  "x" + std::to_string(m.ground_w) + ", dataset renders " +
                  std::to_string(g.sizes.ground_h) + "x" +
                  std::to_string(g.sizes.ground_w));
  if (!m.use_polar)
    check_usage(
        m.aerial_h == g.sizes.aerial_s && m.aerial_w == g.sizes.aerial_s,
        what + ": model expects aerial " + std::to_string(m.aerial_h) + "x" +
            std::to_string(m.aerial_w) + ", dataset renders " +
            std::to_string(g.sizes.aerial_s) + "x" +
            std::to_string(g.sizes.aerial_s));
}

namespace detail {

inline std::string epoch_stem(std::uint64_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%03llu",
                static_cast<unsigned long long>(epoch));
  return buf;
}

inline std::vector<CrossViewPair> split_pairs(const Dataset& ds, Split s) {
  std::vector<CrossViewPair> out;
  for (std::size_t i : ds.manifest.split_indices(s)) out.push_back(ds.pairs[i]);
  return out;
}

inline std::string recall_csv_cells(const RecallReport& r) {
  return fmt_f64(r.r_at_1) + "," + fmt_f64(r.r_at_5) + "," +
         fmt_f64(r.r_at_10) + "," + fmt_f64(r.r_at_1pct);
}

}  // namespace detail

inline std::filesystem::path cmd_train(const RunConfig& rc, std::ostream& log) {
  rc.validate();
  check_usage(!rc.data_dir.empty(), "train: data.dir is required");
  const Dataset ds = read_dataset(rc.data_dir);

  // Schedule arithmetic: a trailing training chunk only survives with at
  // least 2 pairs (a singleton has no in-batch negatives).
  const std::size_t n_train = ds.manifest.n_train();
  check_usage(n_train >= 2, "train: training split has " +
                                std::to_string(n_train) +
                                " pairs; need at least 2");
  const std::size_t steps_per_epoch =
      n_train / rc.batch_size + (n_train % rc.batch_size >= 2 ? 1 : 0);

  EgoTrModel<float> model = EgoTrModel<float>::init(rc.model, rc.seed);
  OptimState<float> st;
  st.base_lr = rc.lr;
  st.beta1 = rc.beta1;
  st.beta2 = rc.beta2;
  st.eps = rc.eps;
  st.weight_decay = rc.weight_decay;
  TrainProgress pr;
  pr.total_steps = std::uint64_t(rc.epochs) * steps_per_epoch;

  if (!rc.resume.empty()) {
    model = load_checkpoint(rc.resume);
    std::filesystem::path state_path = rc.resume;
    state_path.replace_extension(".state");
    pr = load_train_state(state_path, model, st);
    check_usage(pr.epochs_done < rc.epochs,
                "train: nothing to resume, checkpoint already covers " +
                    std::to_string(pr.epochs_done) + " epochs");
    // The cosine arc is fixed when a run starts; continuing under a
    // different horizon would silently change every remaining step.
    check_usage(pr.total_steps == std::uint64_t(rc.epochs) * steps_per_epoch,
                "train: resume horizon mismatch (state has " +
                    std::to_string(pr.total_steps) + " total steps, config "
                    "gives " +
                    std::to_string(std::uint64_t(rc.epochs) * steps_per_epoch) +
                    ")");
  }
  check_geometry(model.config, ds.manifest.params, "train");

  const std::filesystem::path dir = make_run_dir(rc.out, "train", rc.seed);
  // On resume the checkpoint's architecture wins over model.* flags; echo
  // what actually runs.
  RunConfig echo = rc;
  echo.model = model.config;
  write_text_file(dir / "config.txt", echo.to_text());

  const std::vector<CrossViewPair> val_pairs =
      detail::split_pairs(ds, Split::kVal);
  log << "train " << dir.string() << "\n  " << to_string(model.config.mode)
      << ", " << model.param_count() << " params, " << n_train
      << " train pairs, " << steps_per_epoch << " steps/epoch, "
      << rc.epochs << " epochs\n";
  if (val_pairs.empty())
    log << "  validation split is empty; best checkpoint tracking disabled\n";

  TrainConfig tc;
  tc.alpha = rc.alpha;
  tc.clip_norm = rc.clip_norm;
  tc.lr_min = rc.lr_min;
  tc.warmup_steps = rc.warmup_steps;
  tc.total_steps = pr.total_steps;

  std::string csv =
      "epoch,mean_loss,grad_norm,lr,val_r1,val_r5,val_r10,val_r1pct\n";
  if (rc.epochs == 0) {
    // Nothing to train: emit the initialization checkpoint alone.
    save_checkpoint(dir / "init.ckpt", model);
    save_train_state(dir / "init.state", model, st, pr);
    write_text_file(dir / "metrics.csv", csv);
    log << "  epochs=0: wrote initialization checkpoint only\n";
    return dir;
  }

  // Polar models train on warped aerials; materialize the training split
  // once so every epoch reuses the same resampled images.
  std::vector<CrossViewPair> train_warped;
  std::vector<std::size_t> warped_order;
  if (model.config.use_polar) {
    train_warped = prepare_for_model(model.config,
                                     detail::split_pairs(ds, Split::kTrain));
    warped_order.resize(train_warped.size());
    std::iota(warped_order.begin(), warped_order.end(), std::size_t{0});
  }

  std::uint64_t best_here = 0;  // best epoch whose checkpoint lives in dir
  for (std::uint64_t e = pr.epochs_done; e < rc.epochs; ++e) {
    const std::vector<TripletBatch<float>> batches =
        model.config.use_polar
            ? batch_iter(train_warped, warped_order, rc.batch_size,
                         mix_seed(rc.seed, e))
            : batch_iter(ds, Split::kTrain, rc.batch_size,
                         mix_seed(rc.seed, e));
    const EpochMetrics em = train_epoch(model, batches, st, tc);
    pr.epochs_done = e + 1;

    std::string val_cells = ",,,";
    std::string val_note;
    if (!val_pairs.empty() &&
        ((e + 1) % rc.eval_every == 0 || e + 1 == rc.epochs)) {
      const RecallReport vr = evaluate_retrieval(model, val_pairs);
      val_cells = detail::recall_csv_cells(vr);
      val_note = "  val r@1 " + fmt_f64(vr.r_at_1);
      if (vr.r_at_1 > pr.best_val_r1) {
        pr.best_val_r1 = vr.r_at_1;
        pr.best_epoch = e + 1;
        best_here = e + 1;
      }
    }
    csv += std::to_string(e + 1) + "," + fmt_f64(em.mean_loss) + "," +
           fmt_f64(em.grad_norm_mean) + "," + fmt_f64(em.lr_last) + "," +
           val_cells + "\n";
    write_text_file(dir / "metrics.csv", csv);

    const std::string stem = detail::epoch_stem(e + 1);
    save_checkpoint(dir / (stem + ".ckpt"), model);
    save_train_state(dir / (stem + ".state"), model, st, pr);
    log << "  epoch " << (e + 1) << "/" << rc.epochs << "  loss "
        << fmt_f64(em.mean_loss) << "  gnorm " << fmt_f64(em.grad_norm_mean)
        << "  lr " << fmt_f64(em.lr_last) << val_note << "\n";
  }

  if (best_here > 0) {
    std::filesystem::copy_file(dir / (detail::epoch_stem(best_here) + ".ckpt"),
                               dir / "best.ckpt");
    log << "  best val r@1 " << fmt_f64(pr.best_val_r1) << " at epoch "
        << best_here << "\n";
  } else if (pr.best_epoch > 0) {
    // The running best predates this resume; its checkpoint lives in the
    // source run directory, so no best.ckpt is written here.
    log << "  best val r@1 " << fmt_f64(pr.best_val_r1) << " at epoch "
        << pr.best_epoch << " precedes this run; best.ckpt not written\n";
  }
  return dir;
}

// ---------------------------------------------------------------------------
// eval

inline std::filesystem::path cmd_eval(const RunConfig& rc, std::ostream& log) {
  rc.validate();
  check_usage(!rc.checkpoint.empty(), "eval: checkpoint is required");
  check_usage(!rc.data_dir.empty(), "eval: data.dir is required");
  const EgoTrModel<float> model = load_checkpoint(rc.checkpoint);
  const Dataset ds = read_dataset(rc.data_dir);
  check_geometry(model.config, ds.manifest.params, "eval");
  const Split sp = split_from_string(rc.split);
  const std::vector<CrossViewPair> pairs = detail::split_pairs(ds, sp);
  check_usage(!pairs.empty(),
              "eval: split '" + rc.split + "' has no pairs");

  const RecallReport r = evaluate_retrieval(model, pairs);

  const std::filesystem::path dir = make_run_dir(rc.out, "eval", rc.seed);
  write_text_file(dir / "config.txt", rc.to_text());
  write_text_file(
      dir / "recall.csv",
      "split,index_size,query_count,k_1pct,r_at_1,r_at_5,r_at_10,r_at_1pct\n" +
          rc.split + "," + std::to_string(r.index_size) + "," +
          std::to_string(r.query_count) + "," + std::to_string(r.k_1pct) +
          "," + detail::recall_csv_cells(r) + "\n");
  log << "eval " << dir.string() << "\n  " << rc.split << " split, "
      << r.index_size << " references\n  r@1 " << fmt_f64(r.r_at_1) << "  r@5 "
      << fmt_f64(r.r_at_5) << "  r@10 " << fmt_f64(r.r_at_10) << "  r@1% "
      << fmt_f64(r.r_at_1pct) << " (k=" << r.k_1pct << ")\n";
  return dir;
}

// ---------------------------------------------------------------------------
// diagnose

inline std::filesystem::path cmd_diagnose(const RunConfig& rc,
                                          std::ostream& log) {
  rc.validate();
  check_usage(!rc.checkpoint.empty(), "diagnose: checkpoint is required");
  check_usage(!rc.data_dir.empty(), "diagnose: data.dir is required");
  const EgoTrModel<float> model = load_checkpoint(rc.checkpoint);
  const Dataset ds = read_dataset(rc.data_dir);
  check_geometry(model.config, ds.manifest.params, "diagnose");
  const Split sp = split_from_string(rc.split);
  const std::vector<CrossViewPair> pairs = detail::split_pairs(ds, sp);
  check_usage(!pairs.empty(),
              "diagnose: split '" + rc.split + "' has no pairs");

  const std::filesystem::path dir = make_run_dir(rc.out, "diagnose", rc.seed);
  write_text_file(dir / "config.txt", rc.to_text());

  // How much the class token keeps moving between a layer and the top:
  // one averaged cosine per layer, per branch.
  std::string sim_csv = "branch,layer,cosine\n";
  for (const Branch b : {Branch::kGround, Branch::kAerial}) {
    const std::vector<double> sims = cross_layer_similarity(model, b, pairs);
    for (std::size_t l = 0; l < sims.size(); ++l)
      sim_csv += to_string(b) + "," + std::to_string(l + 1) + "," +
                 fmt_f64(sims[l]) + "\n";
  }
  write_text_file(dir / "similarity.csv", sim_csv);

  // Positional-embedding structure. The gram matrix is emitted even when
  // the model never added the embeddings, flagged so readers cannot
  // mistake untrained noise for learned layout.
  const bool pos_used = model.config.use_pos_embed;
  const std::string flag =
      pos_used ? ""
               : "# positional embeddings disabled in this model: values "
                 "reflect untrained initialization\n";
  std::string adj_csv =
      flag +
      "branch,grid_h,grid_w,adjacent_mean,other_mean,adjacent_se,other_se,"
      "pooled_se,adjacent_count,other_count\n";
  for (const Branch b : {Branch::kGround, Branch::kAerial}) {
    const auto [h, w] = model.input_hw(b);
    const auto [gh, gw] = model.config.grid_hw(h, w);
    const Tensor<float> gram = pos_embed_gram(model.branch(b).pos_embed);
    std::string gram_csv = flag;
    for (std::size_t i = 0; i < gram.dim(0); ++i) {
      for (std::size_t j = 0; j < gram.dim(1); ++j)
        gram_csv += (j ? "," : "") + fmt_f64(double(gram.at(i, j)));
      gram_csv += "\n";
    }
    write_text_file(dir / ("pos_gram_" + to_string(b) + ".csv"), gram_csv);
    const AdjacencyStats a = pos_embed_adjacency(gram, gh, gw);
    adj_csv += to_string(b) + "," + std::to_string(gh) + "," +
               std::to_string(gw) + "," + fmt_f64(a.adjacent_mean) + "," +
               fmt_f64(a.other_mean) + "," + fmt_f64(a.adjacent_se) + "," +
               fmt_f64(a.other_se) + "," + fmt_f64(a.pooled_se) + "," +
               std::to_string(a.adjacent_count) + "," +
               std::to_string(a.other_count) + "\n";
  }
  write_text_file(dir / "pos_adjacency.csv", adj_csv);

  log << "diagnose " << dir.string() << "\n  " << rc.split << " split, "
      << pairs.size() << " pairs, depth " << model.config.depth << "\n";
  if (!pos_used)
    log << "  note: positional embeddings were disabled in this model\n";
  return dir;
}

}  // namespace egotr
