#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lvf/tensor.hpp"

namespace lvf {

// A checkpoint is a directory of OLVT tensor files plus manifest.json listing
// the tensor names and whatever run metadata the writer attaches.
void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, Tensor>>& tensors,
                     const nlohmann::json& meta);

struct LoadedCheckpoint {
  std::map<std::string, Tensor> tensors;
  nlohmann::json meta;  // manifest minus the tensor listing

  const Tensor& get(const std::string& name) const;  // IoError when absent
};

LoadedCheckpoint load_checkpoint(const std::string& dir);

// Stable content hash over the manifest and all tensor payloads, for
// bit-identity comparisons between runs.
std::string checkpoint_hash(const std::string& dir);

}  // namespace lvf
