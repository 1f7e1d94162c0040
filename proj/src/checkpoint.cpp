#include "bstrat/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace bstrat {

using nlohmann::json;

void save_tensors(const std::string& stem, const std::vector<NamedTensor>& tensors,
                  const std::string& kind) {
  json manifest;
  manifest["kind"] = kind;
  manifest["dtype"] = "f32le";
  json list = json::array();
  size_t offset = 0;
  size_t total = 0;
  for (const auto& nt : tensors) total += static_cast<size_t>(nt.tensor.numel());
  std::vector<float> blob;
  blob.reserve(total);
  for (const auto& nt : tensors) {
    json entry;
    entry["name"] = nt.name;
    entry["shape"] = nt.tensor.shape;
    entry["offset"] = offset;
    list.push_back(entry);
    for (double x : nt.tensor.v) blob.push_back(static_cast<float>(x));
    offset += static_cast<size_t>(nt.tensor.numel());
  }
  manifest["tensors"] = list;
  std::ofstream mf(stem + ".json");
  if (!mf) throw std::runtime_error("cannot write manifest: " + stem + ".json");
  mf << manifest.dump(2) << "\n";
  std::ofstream bf(stem + ".f32", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot write blob: " + stem + ".f32");
  bf.write(reinterpret_cast<const char*>(blob.data()),
           static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!bf) throw std::runtime_error("short write: " + stem + ".f32");
}

std::vector<NamedTensor> load_tensors(const std::string& stem) {
  std::ifstream mf(stem + ".json");
  if (!mf) throw std::runtime_error("cannot open manifest: " + stem + ".json");
  json manifest;
  mf >> manifest;
  if (manifest.value("dtype", "") != "f32le")
    throw std::runtime_error("load_tensors: unsupported dtype in " + stem + ".json");

  std::ifstream bf(stem + ".f32", std::ios::binary | std::ios::ate);
  if (!bf) throw std::runtime_error("cannot open blob: " + stem + ".f32");
  const auto bytes = static_cast<size_t>(bf.tellg());
  if (bytes % sizeof(float) != 0)
    throw std::runtime_error("load_tensors: blob size not a multiple of 4 bytes");
  std::vector<float> blob(bytes / sizeof(float));
  bf.seekg(0);
  bf.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));
  if (!bf) throw std::runtime_error("short read: " + stem + ".f32");

  std::vector<NamedTensor> out;
  for (const auto& entry : manifest.at("tensors")) {
    NamedTensor nt;
    nt.name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int>>();
    const auto offset = entry.at("offset").get<size_t>();
    nt.tensor = Tensor(shape);
    const auto n = static_cast<size_t>(nt.tensor.numel());
    if (offset + n > blob.size())
      throw std::runtime_error("load_tensors: tensor '" + nt.name + "' overruns blob");
    for (size_t i = 0; i < n; ++i) nt.tensor.v[i] = static_cast<double>(blob[offset + i]);
    out.push_back(std::move(nt));
  }
  return out;
}

void save_params(const std::string& stem, const ad::NamedParams& params) {
  std::vector<NamedTensor> tensors;
  tensors.reserve(params.size());
  for (const auto& [name, p] : params) tensors.push_back({name, p->value});
  save_tensors(stem, tensors, "params");
}

void load_params(const std::string& stem, const ad::NamedParams& params) {
  auto tensors = load_tensors(stem);
  if (tensors.size() != params.size())
    throw std::runtime_error("load_params: checkpoint has " + std::to_string(tensors.size()) +
                             " tensors, model expects " + std::to_string(params.size()));
  // Same order and names required: a checkpoint is only valid for the exact
  // module layout that produced it.
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (tensors[i].name != name)
      throw std::runtime_error("load_params: name mismatch at slot " + std::to_string(i) +
                               ": checkpoint '" + tensors[i].name + "' vs model '" + name + "'");
    if (tensors[i].tensor.shape != p->value.shape)
      throw std::runtime_error("load_params: shape mismatch for '" + name + "': checkpoint " +
                               tensors[i].tensor.shape_str() + " vs model " +
                               p->value.shape_str());
    p->value = std::move(tensors[i].tensor);
  }
}

}  // namespace bstrat
