// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

#include "mogen/common.hpp"
#include "mogen/rng.hpp"

namespace testutil {

inline mogen::Mat random_matrix(mogen::Rng& rng, Eigen::Index r, Eigen::Index c,
                                double scale = 1.0) {
  return rng.normal_matrix(r, c, scale);
}

inline mogen::Mat random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  mogen::Rng rng(seed);
  return rng.normal_matrix(r, c, 1.0);
}

// Fresh scratch directory under the build tree for filesystem tests.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mogen_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
