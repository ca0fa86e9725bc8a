#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "dlab/dataset.hpp"

static_assert(std::endian::native == std::endian::little,
              "DLAB1 serialization assumes a little-endian host");

namespace dlab {

namespace detail {

inline std::string sha256_hex(const uint8_t* data, size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int digest_len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data, len) != 1 ||
      EVP_DigestFinal_ex(ctx, digest, &digest_len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256: digest computation failed");
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(digest_len * 2);
  for (unsigned int i = 0; i < digest_len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

}  // namespace detail

// DLAB1 file layout: one JSON manifest line terminated by '\n', then a binary
// region holding float32 LE images (row-major) followed by uint16 LE factor
// indices. Offsets in the manifest are relative to the binary region start.
// `extra` lands under a "config" manifest key (pipeline settings, reports);
// the loader ignores it.
inline void save_dataset(const LabeledDataset& ds, const std::string& path,
                         const nlohmann::json& extra = nlohmann::json()) {
  ds.validate();
  const int64_t n = ds.n(), d = ds.dim();
  const size_t images_bytes = static_cast<size_t>(n * d) * sizeof(float);
  const size_t indices_bytes = ds.factor_indices.size() * sizeof(uint16_t);

  std::vector<uint8_t> blob(images_bytes + indices_bytes);
  {
    std::vector<float> f32(static_cast<size_t>(n * d));
    for (size_t i = 0; i < f32.size(); ++i) f32[i] = static_cast<float>(ds.images.data[i]);
    std::memcpy(blob.data(), f32.data(), images_bytes);
  }
  std::memcpy(blob.data() + images_bytes, ds.factor_indices.data(), indices_bytes);

  nlohmann::json manifest;
  manifest["magic"] = "DLAB1";
  manifest["kind"] = ds.kind;
  manifest["provenance"] = ds.provenance;
  manifest["seed"] = ds.seed;
  manifest["n"] = n;
  manifest["d"] = d;
  manifest["image_side"] = ds.image_side;
  nlohmann::json factors = nlohmann::json::array();
  for (const Factor& f : ds.grid.factors)
    factors.push_back({{"name", f.name}, {"levels", f.levels}, {"values", f.values}});
  manifest["factors"] = factors;
  manifest["images_offset"] = 0;
  manifest["images_length"] = images_bytes;
  manifest["indices_offset"] = images_bytes;
  manifest["indices_length"] = indices_bytes;
  manifest["blob_sha256"] = detail::sha256_hex(blob.data(), blob.size());
  if (!extra.is_null()) manifest["config"] = extra;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("save_dataset: cannot open " + path + " for writing");
  const std::string header = manifest.dump();
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.put('\n');
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path);
}

inline LabeledDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("load_dataset: cannot open " + path);
  std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const size_t newline = contents.find('\n');
  if (newline == std::string::npos)
    throw ParseError("load_dataset: no manifest terminator in first " +
                     std::to_string(contents.size()) + " bytes");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(contents.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("load_dataset: manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.contains("magic") || manifest["magic"] != "DLAB1")
    throw ParseError("load_dataset: bad magic at offset 0, expected DLAB1 manifest");

  const size_t blob_start = newline + 1;
  const size_t blob_size = contents.size() - blob_start;
  const size_t images_off = manifest.at("images_offset").get<size_t>();
  const size_t images_len = manifest.at("images_length").get<size_t>();
  const size_t indices_off = manifest.at("indices_offset").get<size_t>();
  const size_t indices_len = manifest.at("indices_length").get<size_t>();
  if (images_off + images_len > blob_size || indices_off + indices_len > blob_size ||
      images_len + indices_len != blob_size)
    throw ParseError("load_dataset: blob length mismatch at offset " +
                     std::to_string(blob_start) + ": manifest declares " +
                     std::to_string(images_len + indices_len) + " bytes, file holds " +
                     std::to_string(blob_size));

  const uint8_t* blob = reinterpret_cast<const uint8_t*>(contents.data()) + blob_start;
  const std::string digest = detail::sha256_hex(blob, blob_size);
  if (digest != manifest.at("blob_sha256").get<std::string>())
    throw ParseError("load_dataset: blob sha256 mismatch, file is corrupt");

  LabeledDataset ds;
  ds.kind = manifest.at("kind").get<std::string>();
  ds.provenance = manifest.at("provenance").get<std::string>();
  ds.seed = manifest.at("seed").get<uint64_t>();
  ds.image_side = manifest.at("image_side").get<int64_t>();
  const int64_t n = manifest.at("n").get<int64_t>();
  const int64_t d = manifest.at("d").get<int64_t>();
  for (const auto& jf : manifest.at("factors")) {
    Factor f;
    f.name = jf.at("name").get<std::string>();
    f.levels = jf.at("levels").get<int>();
    f.values = jf.at("values").get<std::vector<double>>();
    ds.grid.factors.push_back(std::move(f));
  }

  if (images_len != static_cast<size_t>(n * d) * sizeof(float))
    throw ParseError("load_dataset: image payload does not match n*d");
  ds.images = NdArray::zeros({n, d});
  {
    std::vector<float> f32(static_cast<size_t>(n * d));
    std::memcpy(f32.data(), blob + images_off, images_len);
    for (size_t i = 0; i < f32.size(); ++i) ds.images.data[i] = static_cast<double>(f32[i]);
  }
  const size_t expect_idx = static_cast<size_t>(n) * static_cast<size_t>(ds.grid.num_factors());
  if (indices_len != expect_idx * sizeof(uint16_t))
    throw ParseError("load_dataset: index payload does not match n*num_factors");
  ds.factor_indices.resize(expect_idx);
  std::memcpy(ds.factor_indices.data(), blob + indices_off, indices_len);
  ds.validate();
  return ds;
}

}  // namespace dlab
