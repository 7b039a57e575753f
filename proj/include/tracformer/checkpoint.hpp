#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracformer/error.hpp"
#include "tracformer/model.hpp"

namespace tracformer {

// Checkpoint file layout:
//   8-byte magic "TRACFMT1"
//   uint64 little-endian manifest byte length
//   manifest JSON: {"config": ..., "tensors": [{name, shape, offset, count}]}
//   one blob of raw little-endian float32 data (offsets are into the blob)
// Loading and re-saving a checkpoint reproduces it byte for byte.

namespace detail {
constexpr char kCkptMagic[8] = {'T', 'R', 'A', 'C', 'F', 'M', 'T', '1'};
}

template <typename S>
void save_checkpoint(const std::string& path, Model<S>& model) {
  nlohmann::json manifest;
  manifest["config"] = model.config.to_json();
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  auto params = model.parameters();
  for (auto& [name, t] : params) {
    tensors.push_back(nlohmann::json{
        {"name", name}, {"shape", t->shape()}, {"offset", offset}, {"count", t->size()}});
    offset += t->size() * sizeof(float);
  }
  manifest["tensors"] = std::move(tensors);
  const std::string mtext = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(detail::kCkptMagic, 8);
  const uint64_t mlen = mtext.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  std::vector<float> buf;
  for (auto& [name, t] : params) {
    buf.resize(t->size());
    for (size_t i = 0; i < t->size(); ++i) buf[i] = static_cast<float>((*t)[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw DataError("checkpoint write failed: " + path);
}

template <typename S>
Model<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCkptMagic, 8) != 0) throw DataError("not a checkpoint file: " + path);
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw DataError("truncated checkpoint manifest: " + path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad checkpoint manifest: ") + e.what());
  }

  Model<S> model;
  model.config = ModelConfig::from_json(manifest.at("config"));
  model.config.validate();
  detail::allocate_model(model);

  auto params = model.parameters();
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != params.size()) throw DataError("checkpoint tensor list does not match this model layout");
  std::vector<float> buf;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& entry = tensors[i];
    auto& [name, t] = params[i];
    if (entry.at("name").get<std::string>() != name) throw DataError("checkpoint tensor order mismatch at " + name);
    if (entry.at("shape").get<std::vector<int>>() != t->shape()) throw DataError("checkpoint shape mismatch at " + name);
    const size_t count = entry.at("count").get<size_t>();
    if (count != t->size()) throw DataError("checkpoint element count mismatch at " + name);
    buf.resize(count);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw DataError("truncated checkpoint blob at " + name);
    for (size_t j = 0; j < count; ++j) (*t)[j] = static_cast<S>(buf[j]);
  }
  return model;
}

}  // namespace tracformer
