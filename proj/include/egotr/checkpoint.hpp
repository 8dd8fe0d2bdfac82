// SPDX-License-Identifier: Apache-2.0
//
// Checkpointing: the full model configuration rides in the container's
// key-value header, so a checkpoint reconstructs the model without any
// side channel. Parameters are stored bit-exact as float32, keyed by the
// stable visit order names; loading verifies name-set and shape agreement
// in both directions.

#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "egotr/io.hpp"
#include "egotr/model.hpp"

namespace egotr {

inline void save_checkpoint(const std::filesystem::path& path,
                            EgoTrModel<float>& model) {
  NamedBlobFile f;
  f.meta.emplace_back("kind", "checkpoint");
  for (auto& [k, v] : model.config.to_kv()) f.meta.emplace_back(k, v);
  model.visit_params([&](const std::string& name, Tensor<float>& t) {
    t.ensure_finite("checkpoint parameter " + name);
    f.tensors.emplace_back(name, t);
  });
  f.write(path);
}

inline EgoTrModel<float> load_checkpoint(const std::filesystem::path& path) {
  const NamedBlobFile f = NamedBlobFile::read(path);
  KvMap meta = f.meta_map();
  const auto kind = meta.find("kind");
  if (kind == meta.end() || kind->second != "checkpoint")
    throw DataError(path.string() + ": not a checkpoint file");
  meta.erase(kind);
  ModelConfig cfg = ModelConfig::from_kv(meta);
  EgoTrModel<float> model = EgoTrModel<float>::init(cfg, 0);
  std::map<std::string, Tensor<float>> want;
  model.visit_params([&](const std::string& name, Tensor<float>& t) {
    want.emplace(name, t);
  });
  std::map<std::string, bool> seen;
  for (const auto& [name, stored] : f.tensors) {
    const auto it = want.find(name);
    if (it == want.end())
      throw DataError(path.string() + ": unexpected tensor '" + name + "'");
    if (seen[name])
      throw DataError(path.string() + ": duplicate tensor '" + name + "'");
    seen[name] = true;
    Tensor<float> dst = it->second;
    if (stored.shape() != dst.shape())
      throw DataError(path.string() + ": tensor '" + name + "' has shape " +
                      shape_str(stored.shape()) + ", model wants " +
                      shape_str(dst.shape()));
    auto s = stored.data();
    std::copy(s.begin(), s.end(), dst.data().begin());
  }
  if (seen.size() != want.size())
    throw DataError(path.string() + ": checkpoint is missing parameters");
  return model;
}

}  // namespace egotr
