#pragma once

// On-disk tensor layout shared by embedder weights and model artifacts:
//
//   <dir>/manifest.json   {"format": "hsd-weights", "version": 1,
//                          "dtype": "f64" | "f32", "config": {...},
//                          "tensors": [{"name", "rows", "cols", "offset"}]}
//   <dir>/tensors.bin     little-endian row-major values, `offset` in elements
//
// f32 blobs are accepted for converted third-party checkpoints; everything
// this library writes is f64 so reloaded models predict bit-identically.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "hsd/autodiff.hpp"
#include "hsd/error.hpp"

namespace hsd::weights {

static_assert(std::endian::native == std::endian::little, "tensor blobs assume a little-endian host");

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kLayoutHelp =
    "expected <dir>/manifest.json and <dir>/tensors.bin (format hsd-weights v1; transformers also read <dir>/vocab.txt)";

struct Bundle {
  nlohmann::json config;
  std::map<std::string, ad::Matrix> tensors;
};

inline void save(const std::filesystem::path& dir, const nlohmann::json& config, const ad::Params& params) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format", "hsd-weights"}, {"version", kFormatVersion}, {"dtype", "f64"},
                          {"config", config}, {"tensors", nlohmann::json::array()}};
  std::ofstream blob(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw Error("cannot write " + (dir / "tensors.bin").string());
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    const ad::Matrix& m = p.var.value();
    manifest["tensors"].push_back({{"name", p.name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    blob.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
    offset += static_cast<std::uint64_t>(m.size());
  }
  if (!blob) throw Error("write failed: " + (dir / "tensors.bin").string());
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw Error("write failed: " + (dir / "manifest.json").string());
}

inline Bundle load(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  const auto blob_path = dir / "tensors.bin";
  if (!std::filesystem::exists(manifest_path) || !std::filesystem::exists(blob_path))
    throw DataError("missing weight files in '" + dir.string() + "': " + kLayoutHelp);
  std::ifstream in(manifest_path);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad weight manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "hsd-weights" || manifest.value("version", 0) != kFormatVersion)
    throw DataError("unsupported weight manifest " + manifest_path.string() + ": " + kLayoutHelp);
  const std::string dtype = manifest.value("dtype", "f64");
  if (dtype != "f64" && dtype != "f32") throw DataError("unsupported dtype " + dtype);
  const std::size_t width = dtype == "f64" ? 8 : 4;

  std::ifstream blob(blob_path, std::ios::binary);
  Bundle bundle;
  bundle.config = manifest.value("config", nlohmann::json::object());
  for (const auto& t : manifest.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    std::vector<char> raw(static_cast<std::size_t>(rows * cols) * width);
    blob.seekg(static_cast<std::streamoff>(offset * width));
    blob.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!blob) throw DataError("truncated tensor blob " + blob_path.string());
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(rows, cols);
    if (width == 8) {
      std::memcpy(m.data(), raw.data(), raw.size());
    } else {
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        float f;
        std::memcpy(&f, raw.data() + i * 4, 4);
        m.data()[i] = f;
      }
    }
    bundle.tensors[t.at("name").get<std::string>()] = m;
  }
  return bundle;
}

// Copies tensors into same-named parameters; names and shapes must match.
inline void assign(ad::Params& params, const Bundle& bundle, const std::string& source) {
  for (auto& p : params) {
    const auto it = bundle.tensors.find(p.name);
    if (it == bundle.tensors.end()) throw DataError(source + ": missing tensor '" + p.name + "'");
    if (it->second.rows() != p.var.rows() || it->second.cols() != p.var.cols())
      throw DataError(source + ": tensor '" + p.name + "' has shape " + std::to_string(it->second.rows()) + "x" +
                      std::to_string(it->second.cols()) + ", expected " + std::to_string(p.var.rows()) + "x" +
                      std::to_string(p.var.cols()));
    p.var.mutable_value() = it->second;
  }
}

}  // namespace hsd::weights
