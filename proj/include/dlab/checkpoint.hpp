#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dlab/dataset_io.hpp"
#include "dlab/vae.hpp"

namespace dlab {

// Checkpoint file "DCKPT1": one JSON manifest line (config, step, seed,
// per-tensor offsets), then a float64 LE blob. Round-trip is bit-exact.

struct Checkpoint {
  VaeModel model;
  int64_t step = 0;
  uint64_t seed = 0;
};

inline void save_checkpoint(VaeModel& model, int64_t step, uint64_t seed,
                            const std::string& path) {
  nlohmann::json manifest;
  manifest["magic"] = "DCKPT1";
  manifest["step"] = step;
  manifest["seed"] = seed;
  manifest["config"] = {{"arch", model.config.arch},
                        {"input_dim", model.config.input_dim},
                        {"latent_dim", model.config.latent_dim},
                        {"hidden", model.config.hidden},
                        {"beta", model.config.beta},
                        {"variational", model.config.variational}};

  size_t offset = 0;
  nlohmann::json tensors = nlohmann::json::array();
  for (Param& p : model.params) {
    const size_t len = p.value.data.size() * sizeof(double);
    tensors.push_back(
        {{"name", p.name}, {"shape", p.value.shape}, {"offset", offset}, {"length", len}});
    offset += len;
  }
  manifest["tensors"] = tensors;

  std::vector<uint8_t> blob(offset);
  size_t cursor = 0;
  for (Param& p : model.params) {
    const size_t len = p.value.data.size() * sizeof(double);
    std::memcpy(blob.data() + cursor, p.value.data.data(), len);
    cursor += len;
  }
  manifest["blob_sha256"] = detail::sha256_hex(blob.data(), blob.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("save_checkpoint: cannot open " + path + " for writing");
  const std::string header = manifest.dump();
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.put('\n');
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("load_checkpoint: cannot open " + path);
  std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const size_t newline = contents.find('\n');
  if (newline == std::string::npos)
    throw ParseError("load_checkpoint: no manifest terminator");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(contents.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("load_checkpoint: manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.contains("magic") || manifest["magic"] != "DCKPT1")
    throw ParseError("load_checkpoint: bad magic, expected DCKPT1");

  ModelConfig config;
  const auto& jc = manifest.at("config");
  config.arch = jc.at("arch").get<std::string>();
  config.input_dim = jc.at("input_dim").get<int64_t>();
  config.latent_dim = jc.at("latent_dim").get<int64_t>();
  config.hidden = jc.at("hidden").get<std::vector<int64_t>>();
  config.beta = jc.at("beta").get<double>();
  config.variational = jc.at("variational").get<bool>();

  Checkpoint ck;
  ck.step = manifest.at("step").get<int64_t>();
  ck.seed = manifest.at("seed").get<uint64_t>();
  ck.model = make_vae_model(config, 0);

  const size_t blob_start = newline + 1;
  const size_t blob_size = contents.size() - blob_start;
  const uint8_t* blob = reinterpret_cast<const uint8_t*>(contents.data()) + blob_start;
  if (detail::sha256_hex(blob, blob_size) != manifest.at("blob_sha256").get<std::string>())
    throw ParseError("load_checkpoint: blob sha256 mismatch, file is corrupt");

  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != ck.model.params.size())
    throw ParseError("load_checkpoint: tensor count does not match config");
  for (size_t i = 0; i < ck.model.params.size(); ++i) {
    Param& p = ck.model.params[i];
    const auto& jt = tensors[i];
    if (jt.at("name").get<std::string>() != p.name)
      throw ParseError("load_checkpoint: tensor " + std::to_string(i) + " name mismatch: " +
                       jt.at("name").get<std::string>() + " vs " + p.name);
    if (jt.at("shape").get<Shape>() != p.value.shape)
      throw ParseError("load_checkpoint: tensor " + p.name + " shape mismatch");
    const size_t offset = jt.at("offset").get<size_t>();
    const size_t length = jt.at("length").get<size_t>();
    if (offset + length > blob_size || length != p.value.data.size() * sizeof(double))
      throw ParseError("load_checkpoint: tensor " + p.name + " extent out of range");
    std::memcpy(p.value.data.data(), blob + offset, length);
  }
  return ck;
}

}  // namespace dlab
