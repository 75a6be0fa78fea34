#include "lvf/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include "lvf/error.hpp"
#include "lvf/hash.hpp"

namespace fs = std::filesystem;

namespace lvf {

namespace {

std::string tensor_file(const std::string& name) { return name + ".olvt"; }

}  // namespace

void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, Tensor>>& tensors,
                     const nlohmann::json& meta) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir);
  nlohmann::json manifest = meta;
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.find('/') != std::string::npos)
      throw ContractError("bad tensor name for checkpoint: '" + name + "'");
    save_tensor((fs::path(dir) / tensor_file(name)).string(), t);
    names.push_back(name);
  }
  manifest["tensors"] = names;
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write checkpoint manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("no checkpoint manifest in " + dir);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const std::exception& e) {
    throw IoError("unreadable checkpoint manifest in " + dir + ": " + e.what());
  }
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array())
    throw IoError("checkpoint manifest in " + dir + " lists no tensors");
  LoadedCheckpoint ck;
  for (const auto& n : manifest["tensors"]) {
    std::string name = n.get<std::string>();
    ck.tensors.emplace(name,
                       load_tensor((fs::path(dir) / tensor_file(name)).string()));
  }
  manifest.erase("tensors");
  ck.meta = manifest;
  return ck;
}

const Tensor& LoadedCheckpoint::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw IoError("checkpoint has no tensor '" + name + "'");
  return it->second;
}

std::string checkpoint_hash(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("no checkpoint manifest in " + dir);
  nlohmann::json manifest;
  in >> manifest;
  uint64_t h = fnv1a64(manifest.dump());
  if (manifest.contains("tensors"))
    for (const auto& n : manifest["tensors"]) {
      std::ifstream tf(fs::path(dir) / tensor_file(n.get<std::string>()),
                       std::ios::binary);
      if (!tf) throw IoError("checkpoint tensor file missing for '" +
                             n.get<std::string>() + "'");
      std::string payload((std::istreambuf_iterator<char>(tf)),
                          std::istreambuf_iterator<char>());
      h = fnv1a64(payload, h);
    }
  return hex64(h);
}

}  // namespace lvf
