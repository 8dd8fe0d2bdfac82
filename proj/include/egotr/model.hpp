// SPDX-License-Identifier: Apache-2.0
//
// Two-branch cross-view model. Each branch owns a small convolutional stem
// (3x3 convs, stride 2, GELU after each), a linear patch projection over
// the stem's output cells, a learned class token and positional embedding,
// and a transformer encoder stack. Branches never share weights: the
// street-level panorama and the overhead image live in different visual
// domains. The descriptor is the class-token row of the final layer,
// L2-normalized unless configured otherwise.
//
// When polar warping is enabled the aerial branch consumes the warped
// aerial image, which has the panorama's height and width; the warp itself
// lives in the data module.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "egotr/attention.hpp"
#include "egotr/kv.hpp"
#include "egotr/tensor.hpp"

namespace egotr {

enum class Branch { kGround, kAerial };

inline std::string to_string(Branch b) {
  return b == Branch::kGround ? "ground" : "aerial";
}

struct ModelConfig {
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t num_heads = 4;
  std::vector<std::size_t> stem_channels = {16, 32, 64};
  std::size_t in_channels = 3;
  std::size_t ground_h = 64, ground_w = 256;
  std::size_t aerial_h = 128, aerial_w = 128;
  AttentionMode mode = AttentionMode::kSelfCross;
  bool use_pos_embed = true;
  bool use_polar = false;
  bool normalize_descriptor = true;

  // Small setup that trains in minutes on one core.
  static ModelConfig toy() { return ModelConfig{}; }

  // Full-size setup matching common ViT-Base dimensioning.
  static ModelConfig base() {
    ModelConfig c;
    c.embed_dim = 768;
    c.depth = 12;
    c.num_heads = 12;
    c.stem_channels = {64, 128, 256};
    c.ground_h = 128;
    c.ground_w = 512;
    c.aerial_h = 256;
    c.aerial_w = 256;
    return c;
  }

  std::size_t stem_stride() const { return std::size_t(1) << stem_channels.size(); }
  std::size_t stem_out_channels() const { return stem_channels.back(); }
  std::size_t ffn_dim() const { return 4 * embed_dim; }

  // Input extent seen by the aerial branch (the polar warp resamples the
  // aerial image onto the panorama's grid).
  std::pair<std::size_t, std::size_t> aerial_input_hw() const {
    return use_polar ? std::pair{ground_h, ground_w}
                     : std::pair{aerial_h, aerial_w};
  }

  std::pair<std::size_t, std::size_t> grid_hw(std::size_t h,
                                              std::size_t w) const {
    return {h / stem_stride(), w / stem_stride()};
  }
  std::size_t tokens(std::size_t h, std::size_t w) const {
    const auto [gh, gw] = grid_hw(h, w);
    return gh * gw;
  }

  void validate() const {
    check_usage(embed_dim > 0 && depth > 0 && num_heads > 0 &&
                    in_channels > 0,
                "model config: dimensions must be positive");
    check_usage(embed_dim % num_heads == 0,
                "model config: embed_dim " + std::to_string(embed_dim) +
                    " not divisible by " + std::to_string(num_heads) +
                    " heads");
    check_usage(!stem_channels.empty(), "model config: empty stem");
    if (use_polar)
      check_usage(aerial_h == aerial_w,
                  "model config: polar warp needs a square aerial image");
    const std::size_t s = stem_stride();
    const auto [ah, aw] = aerial_input_hw();
    for (const auto [h, w] : {std::pair{ground_h, ground_w},
                              std::pair{ah, aw}})
      check_usage(h > 0 && w > 0 && h % s == 0 && w % s == 0,
                  "model config: input " + std::to_string(h) + "x" +
                      std::to_string(w) + " not divisible by stem stride " +
                      std::to_string(s));
  }

  KvList to_kv() const {
    std::string stem;
    for (std::size_t i = 0; i < stem_channels.size(); ++i)
      stem += (i ? "," : "") + std::to_string(stem_channels[i]);
    return {
        {"embed_dim", std::to_string(embed_dim)},
        {"depth", std::to_string(depth)},
        {"num_heads", std::to_string(num_heads)},
        {"stem_channels", stem},
        {"in_channels", std::to_string(in_channels)},
        {"ground_h", std::to_string(ground_h)},
        {"ground_w", std::to_string(ground_w)},
        {"aerial_h", std::to_string(aerial_h)},
        {"aerial_w", std::to_string(aerial_w)},
        {"mode", to_string(mode)},
        {"use_pos_embed", use_pos_embed ? "1" : "0"},
        {"use_polar", use_polar ? "1" : "0"},
        {"normalize_descriptor", normalize_descriptor ? "1" : "0"},
    };
  }

  static ModelConfig from_kv(const KvMap& kv) {
    ModelConfig c;
    KvMap seen = kv;
    auto take = [&](const char* key) {
      const auto it = seen.find(key);
      if (it == seen.end())
        throw DataError(std::string("model config: missing key '") + key +
                        "'");
      std::string v = it->second;
      seen.erase(it);
      return v;
    };
    c.embed_dim = parse_u64(take("embed_dim"));
    c.depth = parse_u64(take("depth"));
    c.num_heads = parse_u64(take("num_heads"));
    c.stem_channels.clear();
    for (const auto& part : split(take("stem_channels"), ','))
      c.stem_channels.push_back(parse_u64(part));
    c.in_channels = parse_u64(take("in_channels"));
    c.ground_h = parse_u64(take("ground_h"));
    c.ground_w = parse_u64(take("ground_w"));
    c.aerial_h = parse_u64(take("aerial_h"));
    c.aerial_w = parse_u64(take("aerial_w"));
    c.mode = attention_mode_from_string(take("mode"));
    c.use_pos_embed = parse_bool(take("use_pos_embed"));
    c.use_polar = parse_bool(take("use_polar"));
    c.normalize_descriptor = parse_bool(take("normalize_descriptor"));
    if (!seen.empty())
      throw DataError("model config: unknown key '" + seen.begin()->first +
                      "'");
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct StemConv {
  Tensor<T> w;  // [Cout,Cin,3,3]
  Tensor<T> b;  // [Cout]
};

template <typename T>
struct BranchParams {
  std::vector<StemConv<T>> stem;
  Tensor<T> patch_proj;   // [C_stem, D]
  Tensor<T> class_token;  // [1, D]
  Tensor<T> pos_embed;    // [N+1, D]
  std::vector<EncoderLayerParams<T>> layers;
};

// Convolutional stem: each conv is 3x3, stride 2, pad 1, followed by GELU.
template <typename T>
Tensor<T> cnn_stem(Tape<T>& tape, const Tensor<T>& image,
                   const std::vector<StemConv<T>>& stem) {
  check_usage(!stem.empty(), "cnn_stem: no convolutions");
  Tensor<T> x = image;
  for (const auto& c : stem) x = gelu(tape, conv2d(tape, x, c.w, c.b, 2, 1));
  return x;
}

// Flattens stem features [C,Hf,Wf] to Hf*Wf tokens in row-major cell order
// (token k covers cell (k / Wf, k % Wf)), projects them to D, prepends the
// class token as row 0, and adds the positional embedding when enabled.
template <typename T>
Tensor<T> patchify(Tape<T>& tape, const Tensor<T>& features,
                   const Tensor<T>& proj, const Tensor<T>& x_class,
                   const Tensor<T>& x_pos, bool use_pos_embed) {
  check_dims(features.rank() == 3, "patchify: want [C,H,W] features");
  const std::size_t c = features.dim(0);
  const std::size_t n = features.dim(1) * features.dim(2);
  check_dims(proj.rank() == 2 && proj.dim(0) == c,
             "patchify: projection " + shape_str(proj.shape()) +
                 " for features " + shape_str(features.shape()));
  const std::size_t d = proj.dim(1);
  check_dims(x_class.rank() == 2 && x_class.dim(0) == 1 && x_class.dim(1) == d,
             "patchify: class token " + shape_str(x_class.shape()));
  Tensor<T> cells =
      transpose(tape, reshape(tape, features, {c, n}));  // [N, C]
  Tensor<T> tokens = matmul(tape, cells, proj);          // [N, D]
  Tensor<T> seq = concat_rows(tape, {x_class, tokens});  // [N+1, D]
  if (use_pos_embed) {
    check_dims(x_pos.rank() == 2 && x_pos.dim(0) == n + 1 && x_pos.dim(1) == d,
               "patchify: positional embedding " + shape_str(x_pos.shape()) +
                   " for " + std::to_string(n + 1) + " tokens");
    seq = add(tape, seq, x_pos);
  }
  return seq;
}

template <typename T>
struct EgoTrModel {
  ModelConfig config;
  BranchParams<T> ground, aerial;

  static EgoTrModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    EgoTrModel m;
    m.config = cfg;
    std::mt19937_64 rng(seed);
    const auto [ah, aw] = cfg.aerial_input_hw();
    init_branch(m.ground, cfg, cfg.ground_h, cfg.ground_w, rng);
    init_branch(m.aerial, cfg, ah, aw, rng);
    return m;
  }

  BranchParams<T>& branch(Branch which) {
    return which == Branch::kGround ? ground : aerial;
  }
  const BranchParams<T>& branch(Branch which) const {
    return which == Branch::kGround ? ground : aerial;
  }

  std::pair<std::size_t, std::size_t> input_hw(Branch which) const {
    return which == Branch::kGround
               ? std::pair{config.ground_h, config.ground_w}
               : config.aerial_input_hw();
  }

  // Stable parameter order shared by init, checkpoints and the optimizer.
  template <typename Fn>
  void visit_params(Fn&& fn) {
    visit_branch(ground, "ground.", fn);
    visit_branch(aerial, "aerial.", fn);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit_params(
        [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    visit_params([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  void set_requires_grad(bool rg) {
    visit_params(
        [&](const std::string&, Tensor<T>& t) { t.set_requires_grad(rg); });
  }

  void zero_grad() {
    visit_params([&](const std::string&, Tensor<T>& t) { t.zero_grad(); });
  }

  // Per-parameter L2 norms (and gradient norms when present), one line
  // each; attached to numeric failure reports.
  std::string param_norm_report() {
    std::ostringstream os;
    visit_params([&](const std::string& name, Tensor<T>& t) {
      double sq = 0;
      for (T v : t.data()) sq += double(v) * double(v);
      os << name << " numel=" << t.numel() << " norm=" << std::sqrt(sq);
      if (t.has_grad()) {
        double gq = 0;
        for (T v : t.grad()) gq += double(v) * double(v);
        os << " grad_norm=" << std::sqrt(gq);
      }
      os << '\n';
    });
    return os.str();
  }

 private:
  static void init_branch(BranchParams<T>& b, const ModelConfig& cfg,
                          std::size_t h, std::size_t w,
                          std::mt19937_64& rng) {
    std::size_t cin = cfg.in_channels;
    for (std::size_t cout : cfg.stem_channels) {
      StemConv<T> conv;
      conv.w = Tensor<T>({cout, cin, 3, 3});
      fill_normal(conv.w, rng, T(0), T(std::sqrt(2.0 / double(cin * 9))));
      conv.b = Tensor<T>({cout});
      b.stem.push_back(std::move(conv));
      cin = cout;
    }
    const std::size_t d = cfg.embed_dim;
    const T std02 = T(0.02);
    b.patch_proj = Tensor<T>({cfg.stem_out_channels(), d});
    fill_normal(b.patch_proj, rng, T(0), std02);
    b.class_token = Tensor<T>({1, d});
    fill_normal(b.class_token, rng, T(0), std02);
    b.pos_embed = Tensor<T>({cfg.tokens(h, w) + 1, d});
    fill_normal(b.pos_embed, rng, T(0), std02);
    for (std::size_t l = 0; l < cfg.depth; ++l)
      b.layers.push_back(
          init_encoder_layer<T>(d, cfg.num_heads, cfg.ffn_dim(), rng));
  }

  template <typename Fn>
  static void visit_branch(BranchParams<T>& b, const std::string& prefix,
                           Fn& fn) {
    for (std::size_t i = 0; i < b.stem.size(); ++i) {
      fn(prefix + "stem" + std::to_string(i) + ".w", b.stem[i].w);
      fn(prefix + "stem" + std::to_string(i) + ".b", b.stem[i].b);
    }
    fn(prefix + "patch_proj", b.patch_proj);
    fn(prefix + "class_token", b.class_token);
    fn(prefix + "pos_embed", b.pos_embed);
    for (std::size_t l = 0; l < b.layers.size(); ++l)
      visit_layer_params(b.layers[l], prefix + "layer" + std::to_string(l) +
                                          ".",
                         fn);
  }
};

// Full branch forward: image to descriptor. Optionally captures the
// residual stream after every encoder layer for diagnostics.
template <typename T>
Tensor<T> forward_descriptor(Tape<T>& tape, const EgoTrModel<T>& model,
                             const Tensor<T>& image, Branch which,
                             std::vector<Tensor<T>>* layer_outputs = nullptr) {
  const auto [h, w] = model.input_hw(which);
  check_dims(image.rank() == 3 && image.dim(0) == model.config.in_channels &&
                 image.dim(1) == h && image.dim(2) == w,
             "forward: " + to_string(which) + " image " +
                 shape_str(image.shape()) + ", want [" +
                 std::to_string(model.config.in_channels) + "," +
                 std::to_string(h) + "," + std::to_string(w) + "]");
  const BranchParams<T>& b = model.branch(which);
  Tensor<T> feats = cnn_stem(tape, image, b.stem);
  Tensor<T> tokens = patchify(tape, feats, b.patch_proj, b.class_token,
                              b.pos_embed, model.config.use_pos_embed);
  StackResult<T> enc =
      encoder_stack(tape, tokens, b.layers, model.config.mode);
  if (layer_outputs != nullptr) *layer_outputs = enc.layer_outputs;
  Tensor<T> cls = take_row(tape, enc.out, 0);
  return model.config.normalize_descriptor ? l2_normalize(tape, cls) : cls;
}

template <typename T>
struct PairOutput {
  Tensor<T> ground_desc, aerial_desc;
  std::vector<Tensor<T>> ground_layers, aerial_layers;
};

template <typename T>
PairOutput<T> forward_pair(Tape<T>& tape, const EgoTrModel<T>& model,
                           const Tensor<T>& ground_img,
                           const Tensor<T>& aerial_img) {
  PairOutput<T> out;
  out.ground_desc = forward_descriptor(tape, model, ground_img,
                                       Branch::kGround, &out.ground_layers);
  out.aerial_desc = forward_descriptor(tape, model, aerial_img,
                                       Branch::kAerial, &out.aerial_layers);
  return out;
}

}  // namespace egotr
