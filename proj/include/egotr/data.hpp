// SPDX-License-Identifier: Apache-2.0
//
// Synthetic cross-view dataset: procedural scenes rendered as a ground
// panorama plus a top-down aerial view, a polar warp that resamples the
// aerial image onto panorama coordinates, deterministic splits, disk
// layout, and batch assembly for the trainer.
//
// Geometry conventions, pinned for all tests:
//  - World coordinates u (east) and v (north), 1 unit = aerial_size/16
//    pixels. The camera sits at the origin at eye height 1.
//  - Azimuth alpha = atan2(-u, v), counterclockwise from north, matching
//    panorama column alpha * W / (2 pi) at heading 0.
//  - The polar warp samples continuous aerial coordinates x (up from the
//    bottom edge) and y (left-to-right column): target pixel (i, j) reads
//    x = S/2 + (S/2) * (H-i)/H * cos(2 pi j / W),
//    y = S/2 - (S/2) * (H-i)/H * sin(2 pi j / W),
//    bilinear, taps outside the raster read the background color.
//  - A heading change is exactly a cyclic column roll of the panorama.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "egotr/io.hpp"
#include "egotr/kv.hpp"
#include "egotr/tensor.hpp"
#include "egotr/training.hpp"

namespace egotr {

enum class Shape2D { kSquare, kCircle, kTriangle };

// Local coordinates in [-1,1]^2; ly = +1 on the apex (north/up) side.
inline bool inside_shape(Shape2D s, double lx, double ly) {
  switch (s) {
    case Shape2D::kSquare:
      return std::abs(lx) <= 1.0 && std::abs(ly) <= 1.0;
    case Shape2D::kCircle:
      return lx * lx + ly * ly <= 1.0;
    case Shape2D::kTriangle:
      return ly >= -1.0 && ly <= 1.0 && std::abs(lx) <= (1.0 - ly) / 2.0;
  }
  throw UsageError("inside_shape: unknown shape class");
}

struct SceneObject {
  Shape2D shape = Shape2D::kSquare;
  double u = 0, v = 0;     // world position
  double width = 1;        // footprint side / diameter, world units
  double height = 1;       // vertical extent, world units
  float color[3] = {1, 1, 1};
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::uint32_t heading_cols = 0;  // camera yaw as a panorama column roll
  float background[3] = {0.1f, 0.1f, 0.1f};
  std::vector<SceneObject> objects;

  // Deterministic scene draw: 5..15 objects on rings around the camera.
  static SceneSpec random(std::uint64_t seed) {
    SceneSpec s;
    s.seed = seed;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01{0.0, 1.0};
    for (float& c : s.background) c = float(0.05 + 0.40 * u01(rng));
    std::uniform_int_distribution<int> ucount{5, 15};
    const int n = ucount(rng);
    for (int i = 0; i < n; ++i) {
      SceneObject o;
      o.shape = Shape2D(std::uniform_int_distribution<int>{0, 2}(rng));
      const double rho = 1.5 + 5.0 * u01(rng);
      const double alpha = 2.0 * M_PI * u01(rng);
      // alpha is measured from north toward west; see header note.
      o.u = -rho * std::sin(alpha);
      o.v = rho * std::cos(alpha);
      o.width = 0.8 + 0.8 * u01(rng);
      o.height = 0.8 + 1.4 * u01(rng);
      for (float& c : o.color) c = float(0.2 + 0.8 * u01(rng));
      s.objects.push_back(o);
    }
    return s;
  }
};

struct RenderSizes {
  std::size_t ground_h = 64, ground_w = 256;
  std::size_t aerial_s = 128;
};

struct CrossViewPair {
  Tensor<float> ground, aerial;
  std::uint64_t id = 0;
};

namespace detail {

constexpr double kEyeHeight = 1.0;

inline void paint(Tensor<float>& img, std::size_t row, std::size_t col,
                  const float* color) {
  const std::size_t hw = img.dim(1) * img.dim(2);
  float* d = img.data().data();
  const std::size_t at = row * img.dim(2) + col;
  for (std::size_t c = 0; c < 3; ++c) d[c * hw + at] = color[c];
}

}  // namespace detail

// Orthographic top-down raster; objects painted in list order.
inline Tensor<float> render_aerial(const SceneSpec& spec, std::size_t s_px) {
  check_usage(s_px >= 2, "render_aerial: implausible raster size");
  Tensor<float> img({3, s_px, s_px});
  const std::size_t hw = s_px * s_px;
  for (std::size_t c = 0; c < 3; ++c)
    std::fill_n(img.data().begin() + c * hw, hw, spec.background[c]);
  const double ppu = double(s_px) / 16.0;  // pixels per world unit
  const double cx = double(s_px) / 2.0;
  for (const SceneObject& o : spec.objects) {
    const double half = o.width / 2.0 * ppu;
    const double ccol = cx + o.u * ppu;
    const double crow = cx - o.v * ppu;
    const long r0 = std::max(0L, long(std::floor(crow - half)));
    const long r1 = std::min(long(s_px) - 1, long(std::ceil(crow + half)));
    const long c0 = std::max(0L, long(std::floor(ccol - half)));
    const long c1 = std::min(long(s_px) - 1, long(std::ceil(ccol + half)));
    for (long r = r0; r <= r1; ++r)
      for (long c = c0; c <= c1; ++c) {
        const double lx = (double(c) + 0.5 - ccol) / half;
        const double ly = (crow - (double(r) + 0.5)) / half;  // +north
        if (inside_shape(o.shape, lx, ly))
          detail::paint(img, std::size_t(r), std::size_t(c), o.color);
      }
  }
  return img;
}

// Cylindrical panorama at heading 0: column maps azimuth, row maps
// elevation, so nearer objects subtend more rows and columns. Farther
// objects are painted first.
inline Tensor<float> render_panorama(const SceneSpec& spec, std::size_t hg,
                                     std::size_t wg) {
  check_usage(hg >= 2 && wg >= 2, "render_panorama: implausible raster size");
  Tensor<float> img({3, hg, wg});
  const std::size_t hw = hg * wg;
  for (std::size_t c = 0; c < 3; ++c)
    std::fill_n(img.data().begin() + c * hw, hw, spec.background[c]);

  std::vector<std::size_t> order(spec.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a,
                                                   std::size_t b) {
    const auto& oa = spec.objects[a];
    const auto& ob = spec.objects[b];
    return oa.u * oa.u + oa.v * oa.v > ob.u * ob.u + ob.v * ob.v;
  });

  for (std::size_t idx : order) {
    const SceneObject& o = spec.objects[idx];
    const double rho = std::hypot(o.u, o.v);
    if (rho < 1e-9) continue;  // degenerate: on top of the camera
    double alpha = std::atan2(-o.u, o.v);
    if (alpha < 0) alpha += 2.0 * M_PI;
    const double half_ang = std::atan2(o.width / 2.0, rho);
    const double phi_top = std::atan2(o.height - detail::kEyeHeight, rho);
    const double phi_bot = -std::atan2(detail::kEyeHeight, rho);
    const double ccol = double(wg) * alpha / (2.0 * M_PI);
    const double half_cols = half_ang * double(wg) / (2.0 * M_PI);
    const double row_top = (0.5 - phi_top / M_PI) * double(hg);
    const double row_bot = (0.5 - phi_bot / M_PI) * double(hg);
    const long rr0 = std::max(0L, long(std::floor(row_top)));
    const long rr1 = std::min(long(hg) - 1, long(std::ceil(row_bot)));
    const long jj0 = long(std::floor(ccol - half_cols)) - 1;
    const long jj1 = long(std::ceil(ccol + half_cols)) + 1;
    for (long r = rr0; r <= rr1; ++r) {
      const double rc = double(r) + 0.5;
      if (rc < row_top || rc > row_bot) continue;
      const double ly = 1.0 - 2.0 * (rc - row_top) / (row_bot - row_top);
      for (long j = jj0; j <= jj1; ++j) {
        const double lx = (double(j) + 0.5 - ccol) / half_cols;
        if (!inside_shape(o.shape, lx, ly)) continue;
        const long col = ((j % long(wg)) + long(wg)) % long(wg);
        detail::paint(img, std::size_t(r), std::size_t(col), o.color);
      }
    }
  }
  return img;
}

// out[c, r, j] = img[c, r, (j + k) mod W].
template <typename T>
Tensor<T> roll_columns(const Tensor<T>& img, std::size_t k) {
  check_dims(img.rank() == 3, "roll_columns: want [C,H,W], got " +
                                  shape_str(img.shape()));
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  k %= w;
  Tensor<T> out(img.shape());
  const T* src = img.data().data();
  T* dst = out.data().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < h; ++r) {
      const T* row = src + (ch * h + r) * w;
      T* orow = dst + (ch * h + r) * w;
      for (std::size_t j = 0; j < w; ++j) orow[j] = row[(j + k) % w];
    }
  return out;
}

// Renders both views; the heading enters only as an exact column roll of
// the canonical panorama, so heading changes commute with rolls bit-for-bit.
inline CrossViewPair render_pair(const SceneSpec& spec,
                                 const RenderSizes& sz) {
  CrossViewPair p;
  p.aerial = render_aerial(spec, sz.aerial_s);
  Tensor<float> pano = render_panorama(spec, sz.ground_h, sz.ground_w);
  p.ground = spec.heading_cols % sz.ground_w == 0
                 ? pano
                 : roll_columns(pano, spec.heading_cols % sz.ground_w);
  return p;
}

// Resamples a square aerial image onto panorama coordinates. Background
// holds one value per channel for taps outside the raster; empty means 0.
template <typename T>
Tensor<T> polar_transform(const Tensor<T>& aerial, std::size_t hg,
                          std::size_t wg,
                          std::span<const T> background = {}) {
  check_dims(aerial.rank() == 3, "polar_transform: want [C,S,S], got " +
                                     shape_str(aerial.shape()));
  check_usage(aerial.dim(1) == aerial.dim(2),
              "polar_transform: input must be square, got " +
                  shape_str(aerial.shape()));
  check_usage(hg >= 1 && wg >= 1, "polar_transform: empty target");
  const std::size_t ch = aerial.dim(0), s = aerial.dim(1);
  check_usage(background.empty() || background.size() == ch,
              "polar_transform: background channel count mismatch");
  Tensor<T> out({ch, hg, wg});
  const T* src = aerial.data().data();
  T* dst = out.data().data();
  const double sd = double(s);
  for (std::size_t i = 0; i < hg; ++i) {
    const double radius = (sd / 2.0) * (double(hg - i) / double(hg));
    for (std::size_t j = 0; j < wg; ++j) {
      const double theta = 2.0 * M_PI * double(j) / double(wg);
      const double x_up = sd / 2.0 + radius * std::cos(theta);
      const double y_col = sd / 2.0 - radius * std::sin(theta);
      // Continuous corner-origin coordinates to pixel-center space.
      const double rp = (sd - x_up) - 0.5;
      const double cp = y_col - 0.5;
      const long r0 = long(std::floor(rp)), c0 = long(std::floor(cp));
      const double fr = rp - double(r0), fc = cp - double(c0);
      const double w00 = (1 - fr) * (1 - fc), w01 = (1 - fr) * fc;
      const double w10 = fr * (1 - fc), w11 = fr * fc;
      for (std::size_t c = 0; c < ch; ++c) {
        const T bg = background.empty() ? T(0) : background[c];
        auto tap = [&](long r, long cc) -> double {
          if (r < 0 || r >= long(s) || cc < 0 || cc >= long(s))
            return double(bg);
          return double(src[(c * s + std::size_t(r)) * s + std::size_t(cc)]);
        };
        const double v = w00 * tap(r0, c0) + w01 * tap(r0, c0 + 1) +
                         w10 * tap(r0 + 1, c0) + w11 * tap(r0 + 1, c0 + 1);
        dst[(c * hg + i) * wg + j] = T(v);
      }
    }
  }
  return out;
}

struct GeneratorParams {
  std::size_t n_pairs = 0;
  std::uint64_t seed = 0;
  bool aligned = true;
  RenderSizes sizes;

  KvList to_kv() const {
    return {
        {"n_pairs", std::to_string(n_pairs)},
        {"seed", std::to_string(seed)},
        {"aligned", aligned ? "1" : "0"},
        {"ground_h", std::to_string(sizes.ground_h)},
        {"ground_w", std::to_string(sizes.ground_w)},
        {"aerial_s", std::to_string(sizes.aerial_s)},
    };
  }

  static GeneratorParams from_kv(const KvMap& kv) {
    GeneratorParams p;
    KvMap seen = kv;
    auto take = [&](const char* key) {
      const auto it = seen.find(key);
      if (it == seen.end())
        throw DataError(std::string("generator params: missing key '") + key +
                        "'");
      std::string v = it->second;
      seen.erase(it);
      return v;
    };
    p.n_pairs = parse_u64(take("n_pairs"));
    p.seed = parse_u64(take("seed"));
    p.aligned = parse_bool(take("aligned"));
    p.sizes.ground_h = parse_u64(take("ground_h"));
    p.sizes.ground_w = parse_u64(take("ground_w"));
    p.sizes.aerial_s = parse_u64(take("aerial_s"));
    if (!seen.empty())
      throw DataError("generator params: unknown key '" +
                      seen.begin()->first + "'");
    return p;
  }

  bool operator==(const GeneratorParams& o) const {
    return n_pairs == o.n_pairs && seed == o.seed && aligned == o.aligned &&
           sizes.ground_h == o.sizes.ground_h &&
           sizes.ground_w == o.sizes.ground_w &&
           sizes.aerial_s == o.sizes.aerial_s;
  }
};

enum class Split { kTrain, kVal, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw UsageError("to_string: unknown split");
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split '" + s + "'");
}

// Pair ids with their headings, split 70/10/20 by position: train gets
// floor(7n/10), validation up to floor(8n/10), the remainder tests.
struct DatasetManifest {
  GeneratorParams params;
  std::vector<std::uint64_t> ids;
  std::vector<std::uint32_t> headings;

  std::size_t n_train() const { return params.n_pairs * 7 / 10; }
  std::size_t n_val() const { return params.n_pairs * 8 / 10 - n_train(); }
  std::size_t n_test() const {
    return params.n_pairs - params.n_pairs * 8 / 10;
  }

  // Indices into ids/pairs for one split, in stored order.
  std::vector<std::size_t> split_indices(Split s) const {
    std::size_t lo = 0, hi = 0;
    switch (s) {
      case Split::kTrain: lo = 0; hi = n_train(); break;
      case Split::kVal: lo = n_train(); hi = n_train() + n_val(); break;
      case Split::kTest: lo = n_train() + n_val(); hi = params.n_pairs; break;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = lo; i < hi; ++i) out.push_back(i);
    return out;
  }

  void validate() const {
    check_usage(ids.size() == params.n_pairs &&
                    headings.size() == params.n_pairs,
                "manifest: id/heading count disagrees with n_pairs");
    for (std::uint32_t h : headings)
      check_usage(h < params.sizes.ground_w,
                  "manifest: heading roll beyond panorama width");
  }

  std::string to_text() const {
    std::string out = "kind=dataset_manifest\n";
    for (const auto& [k, v] : params.to_kv()) out += k + "=" + v + "\n";
    out += "pairs:\n";
    for (std::size_t i = 0; i < ids.size(); ++i)
      out += std::to_string(ids[i]) + " " + std::to_string(headings[i]) +
             "\n";
    return out;
  }

  static DatasetManifest from_text(const std::string& text) {
    DatasetManifest m;
    KvMap header;
    std::vector<std::string> lines = split(text, '\n');
    std::size_t li = 0;
    bool in_pairs = false;
    for (; li < lines.size(); ++li) {
      const std::string line = trim(lines[li]);
      if (line.empty()) continue;
      if (line == "pairs:") {
        in_pairs = true;
        ++li;
        break;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw DataError("manifest: expected key=value, got '" + line + "'");
      const std::string key = line.substr(0, eq);
      if (!header.emplace(key, line.substr(eq + 1)).second)
        throw DataError("manifest: duplicate key '" + key + "'");
    }
    if (!in_pairs) throw DataError("manifest: missing pairs section");
    const auto kind = header.find("kind");
    if (kind == header.end() || kind->second != "dataset_manifest")
      throw DataError("manifest: wrong or missing kind");
    header.erase("kind");
    m.params = GeneratorParams::from_kv(header);
    for (; li < lines.size(); ++li) {
      const std::string line = trim(lines[li]);
      if (line.empty()) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos)
        throw DataError("manifest: malformed pair line '" + line + "'");
      m.ids.push_back(parse_u64(line.substr(0, sp)));
      m.headings.push_back(std::uint32_t(parse_u64(line.substr(sp + 1))));
    }
    m.validate();
    return m;
  }
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<CrossViewPair> pairs;  // aligned with manifest.ids
};

// Platform-independent Fisher-Yates; rejection sampling keeps it unbiased.
inline void deterministic_shuffle(std::vector<std::size_t>& v,
                                  std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::uint64_t bound = i;
    const std::uint64_t lim = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r;
    do {
      r = rng();
    } while (r >= lim);
    std::swap(v[i - 1], v[r % bound]);
  }
}

// Renders the whole dataset. Scene content depends only on (seed, index);
// headings are drawn afterwards so aligned and unaligned datasets with the
// same seed share scenes.
inline Dataset make_dataset(const GeneratorParams& params) {
  check_usage(params.n_pairs >= 2, "make_dataset: need at least 2 pairs");
  Dataset ds;
  ds.manifest.params = params;
  std::mt19937_64 rng(params.seed);
  std::vector<std::uint64_t> scene_seeds;
  for (std::size_t i = 0; i < params.n_pairs; ++i)
    scene_seeds.push_back(rng());
  for (std::size_t i = 0; i < params.n_pairs; ++i) {
    std::uint32_t heading = 0;
    if (!params.aligned)
      heading = std::uint32_t(
          std::uniform_int_distribution<std::uint64_t>{
              0, params.sizes.ground_w - 1}(rng));
    SceneSpec spec = SceneSpec::random(scene_seeds[i]);
    spec.heading_cols = heading;
    CrossViewPair pair = render_pair(spec, params.sizes);
    pair.id = i;
    ds.manifest.ids.push_back(i);
    ds.manifest.headings.push_back(heading);
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

// Directory layout: manifest.txt, cache.blob (exact tensors), and lossy
// pairs/<id>_{g,a}.ppm exports for eyeballing.
inline void write_dataset(const std::filesystem::path& dir,
                          const Dataset& ds) {
  ds.manifest.validate();
  std::filesystem::create_directories(dir / "pairs");
  write_text_file(dir / "manifest.txt", ds.manifest.to_text());
  NamedBlobFile blob;
  blob.meta.emplace_back("kind", "dataset_cache");
  for (const auto& [k, v] : ds.manifest.params.to_kv())
    blob.meta.emplace_back(k, v);
  for (const CrossViewPair& p : ds.pairs) {
    blob.tensors.emplace_back(std::to_string(p.id) + "_g", p.ground);
    blob.tensors.emplace_back(std::to_string(p.id) + "_a", p.aerial);
    write_ppm(dir / "pairs" / (std::to_string(p.id) + "_g.ppm"), p.ground);
    write_ppm(dir / "pairs" / (std::to_string(p.id) + "_a.ppm"), p.aerial);
  }
  blob.write(dir / "cache.blob");
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = DatasetManifest::from_text(read_text_file(dir /
                                                          "manifest.txt"));
  NamedBlobFile blob = NamedBlobFile::read(dir / "cache.blob");
  const KvMap meta = blob.meta_map();
  const auto kind = meta.find("kind");
  if (kind == meta.end() || kind->second != "dataset_cache")
    throw DataError("dataset cache: wrong or missing kind");
  KvMap params_kv = meta;
  params_kv.erase("kind");
  if (!(GeneratorParams::from_kv(params_kv) == ds.manifest.params))
    throw DataError("dataset cache: parameters disagree with manifest");
  if (blob.tensors.size() != 2 * ds.manifest.ids.size())
    throw DataError("dataset cache: tensor count mismatch");
  for (std::size_t i = 0; i < ds.manifest.ids.size(); ++i) {
    const std::string id = std::to_string(ds.manifest.ids[i]);
    auto& [gname, g] = blob.tensors[2 * i];
    auto& [aname, a] = blob.tensors[2 * i + 1];
    if (gname != id + "_g" || aname != id + "_a")
      throw DataError("dataset cache: tensor order disagrees with manifest");
    CrossViewPair p;
    p.id = ds.manifest.ids[i];
    p.ground = g;
    p.aerial = a;
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

// Aerial corner pixels always lie outside the object placement radius, so
// they carry the scene background color.
inline std::vector<float> background_of(const Tensor<float>& aerial) {
  std::vector<float> bg(aerial.dim(0));
  const std::size_t hw = aerial.dim(1) * aerial.dim(2);
  for (std::size_t c = 0; c < bg.size(); ++c)
    bg[c] = aerial.data()[c * hw];
  return bg;
}

// Replaces every aerial image with its polar warp onto ground coordinates.
inline std::vector<CrossViewPair> polar_warp_pairs(
    const std::vector<CrossViewPair>& pairs, std::size_t hg, std::size_t wg) {
  std::vector<CrossViewPair> out;
  for (const CrossViewPair& p : pairs) {
    CrossViewPair q;
    q.id = p.id;
    q.ground = p.ground;
    const std::vector<float> bg = background_of(p.aerial);
    q.aerial = polar_transform(p.aerial, hg, wg, std::span<const float>(bg));
    out.push_back(std::move(q));
  }
  return out;
}

// One epoch of batches over the given subset: shuffled, chunked, and with
// a trailing chunk of fewer than 2 pairs dropped (it has no negatives).
inline std::vector<TripletBatch<float>> batch_iter(
    const std::vector<CrossViewPair>& pairs,
    std::span<const std::size_t> subset, std::size_t batch_size,
    std::uint64_t shuffle_seed) {
  check_usage(batch_size >= 2, "batch_iter: batch size must be at least 2");
  std::vector<std::size_t> order(subset.begin(), subset.end());
  for (std::size_t i : order)
    check_usage(i < pairs.size(), "batch_iter: subset index out of range");
  std::mt19937_64 rng(shuffle_seed);
  deterministic_shuffle(order, rng);
  std::vector<TripletBatch<float>> batches;
  for (std::size_t at = 0; at < order.size(); at += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - at);
    if (n < 2) break;
    TripletBatch<float> b;
    for (std::size_t k = 0; k < n; ++k) {
      const CrossViewPair& p = pairs[order[at + k]];
      b.ground.push_back(p.ground);
      b.aerial.push_back(p.aerial);
      b.ids.push_back(p.id);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

inline std::vector<TripletBatch<float>> batch_iter(const Dataset& ds,
                                                   Split split,
                                                   std::size_t batch_size,
                                                   std::uint64_t shuffle_seed) {
  const std::vector<std::size_t> subset = ds.manifest.split_indices(split);
  return batch_iter(ds.pairs, std::span<const std::size_t>(subset),
                    batch_size, shuffle_seed);
}

}  // namespace egotr
