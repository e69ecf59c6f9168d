// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mogen/common.hpp"
#include "mogen/nn.hpp"

// Model checkpoint file format, "MGCK":
//   magic "MGCK" | u32 version | u64 meta_len | meta (UTF-8 JSON)
//   u32 tensor_count | per tensor: u32 name_len | name | u64 rows | u64 cols
//   followed by rows*cols doubles, column-major, little-endian.
// Tensors are written sorted by name so files are byte-stable.

namespace mogen::ckpt {

inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  check_io(in.good(), "checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save(const std::filesystem::path& path, const nn::ParamStore& store,
                 const nlohmann::json& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check_io(out.good(), "checkpoint: cannot open for writing: " + path.string());

  out.write("MGCK", 4);
  detail::write_pod<std::uint32_t>(out, kVersion);
  const std::string meta_str = meta.dump();
  detail::write_pod<std::uint64_t>(out, meta_str.size());
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

  std::vector<const nn::Param*> params;
  for (const auto& p : store.all()) params.push_back(p.get());
  std::sort(params.begin(), params.end(),
            [](const nn::Param* a, const nn::Param* b) { return a->name < b->name; });

  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const nn::Param* p : params) {
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.rows()));
    detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.cols()));
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p->value.size())));
  }
  out.flush();
  check_io(out.good(), "checkpoint: write failure: " + path.string());
}

// Reads only the metadata block.
inline nlohmann::json peek_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  check_io(in.good(), "checkpoint: cannot open: " + path.string());
  char magic[4];
  in.read(magic, 4);
  check_io(in.good() && std::string(magic, 4) == "MGCK",
           "checkpoint: bad magic in " + path.string());
  const auto version = detail::read_pod<std::uint32_t>(in);
  check_io(version == kVersion, "checkpoint: unsupported version in " + path.string());
  const auto meta_len = detail::read_pod<std::uint64_t>(in);
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  check_io(in.good(), "checkpoint: truncated metadata in " + path.string());
  nlohmann::json meta = nlohmann::json::parse(meta_str, nullptr, false);
  check_io(!meta.is_discarded(), "checkpoint: corrupt metadata in " + path.string());
  return meta;
}

// Loads tensors into an already constructed store. The tensor sets and all
// shapes must match exactly.
inline nlohmann::json load(const std::filesystem::path& path, nn::ParamStore& store) {
  std::ifstream in(path, std::ios::binary);
  check_io(in.good(), "checkpoint: cannot open: " + path.string());
  char magic[4];
  in.read(magic, 4);
  check_io(in.good() && std::string(magic, 4) == "MGCK",
           "checkpoint: bad magic in " + path.string());
  const auto version = detail::read_pod<std::uint32_t>(in);
  check_io(version == kVersion, "checkpoint: unsupported version in " + path.string());
  const auto meta_len = detail::read_pod<std::uint64_t>(in);
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  check_io(in.good(), "checkpoint: truncated metadata in " + path.string());
  nlohmann::json meta = nlohmann::json::parse(meta_str, nullptr, false);
  check_io(!meta.is_discarded(), "checkpoint: corrupt metadata in " + path.string());

  const auto count = detail::read_pod<std::uint32_t>(in);
  check_io(count == store.tensor_count(),
           "checkpoint: tensor count mismatch in " + path.string());
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    check_io(in.good(), "checkpoint: truncated tensor name in " + path.string());
    const auto rows = static_cast<Eigen::Index>(detail::read_pod<std::uint64_t>(in));
    const auto cols = static_cast<Eigen::Index>(detail::read_pod<std::uint64_t>(in));
    nn::Param* p = store.find(name);
    check_io(p != nullptr, "checkpoint: unknown tensor '" + name + "' in " + path.string());
    check_io(p->value.rows() == rows && p->value.cols() == cols,
             "checkpoint: shape mismatch for tensor '" + name + "' in " + path.string());
    in.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(rows * cols)));
    check_io(in.good(), "checkpoint: truncated tensor data in " + path.string());
    p->m.setZero();
    p->v.setZero();
  }
  return meta;
}

}  // namespace mogen::ckpt
