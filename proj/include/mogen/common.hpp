// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mogen {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments or malformed data handed to a library call.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// 6D rotation input whose columns cannot be orthonormalized.
class DegenerateRotationError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Filesystem or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// Inconsistent run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Optimization blew up (non-finite loss or gradients).
class TrainingError : public Error {
 public:
  using Error::Error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

inline void check_io(bool cond, const std::string& msg) {
  if (!cond) throw IoError(msg);
}

inline void check_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

// FNV-1a, used for config/dataset digests. Not cryptographic.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Rows of Nx9 matrices hold row-major 3x3 blocks; Mat itself is column-major,
// so rows are unpacked by element rather than by pointer.
inline Mat3 unpack3x3(const Mat& m, Eigen::Index row) {
  Mat3 a;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) a(r, c) = m(row, 3 * r + c);
  }
  return a;
}

inline void pack3x3(Mat& m, Eigen::Index row, const Mat3& a) {
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m(row, 3 * r + c) = a(r, c);
  }
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  check_io(in.good(), "cannot open file for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  check_io(!in.bad(), "read failure: " + path.string());
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& content) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check_io(out.good(), "cannot open file for writing: " + path.string());
  out << content;
  out.flush();
  check_io(out.good(), "write failure: " + path.string());
}

inline std::string file_digest(const std::filesystem::path& path) {
  return hex64(fnv1a64(read_text_file(path)));
}

}  // namespace mogen
