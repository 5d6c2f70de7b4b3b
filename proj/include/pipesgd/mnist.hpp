// Copyright 2026 The pipesgd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

#pragma once

#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "pipesgd/numerics.hpp"

// Reader for the IDX format used by the MNIST distribution files.
namespace pipesgd::numerics {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open IDX file '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& buf,
                               std::size_t offset, const std::string& path) {
  if (offset + 4 > buf.size()) {
    throw ConfigError("IDX file '" + path + "' truncated in header");
  }
  return (std::uint32_t{buf[offset]} << 24) |
         (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

}  // namespace detail

struct IdxImages {
  std::uint32_t count = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;
};

inline IdxImages read_idx_images(const std::string& path) {
  const auto buf = detail::read_file(path);
  const std::uint32_t magic = detail::read_be32(buf, 0, path);
  if (magic != kIdxImagesMagic) {
    throw ConfigError("'" + path + "' is not an IDX image file (magic " +
                      std::to_string(magic) + ")");
  }
  IdxImages img;
  img.count = detail::read_be32(buf, 4, path);
  img.rows = detail::read_be32(buf, 8, path);
  img.cols = detail::read_be32(buf, 12, path);
  const std::size_t expected =
      std::size_t{img.count} * std::size_t{img.rows} * std::size_t{img.cols};
  if (buf.size() != 16 + expected) {
    throw ConfigError("IDX image file '" + path + "' has " +
                      std::to_string(buf.size() - 16) +
                      " payload bytes, header implies " +
                      std::to_string(expected));
  }
  img.pixels.assign(buf.begin() + 16, buf.end());
  return img;
}

inline std::vector<std::uint8_t> read_idx_labels(const std::string& path) {
  const auto buf = detail::read_file(path);
  const std::uint32_t magic = detail::read_be32(buf, 0, path);
  if (magic != kIdxLabelsMagic) {
    throw ConfigError("'" + path + "' is not an IDX label file (magic " +
                      std::to_string(magic) + ")");
  }
  const std::uint32_t count = detail::read_be32(buf, 4, path);
  if (buf.size() != 8 + std::size_t{count}) {
    throw ConfigError("IDX label file '" + path + "' length mismatch");
  }
  return {buf.begin() + 8, buf.end()};
}

// Pixels scaled to [0, 1]. num_classes defaults to 10 (digits).
inline Dataset load_mnist(const std::string& images_path,
                          const std::string& labels_path,
                          std::size_t num_classes = 10) {
  IdxImages img = read_idx_images(images_path);
  std::vector<std::uint8_t> labels = read_idx_labels(labels_path);
  if (labels.size() != img.count) {
    throw ConfigError("MNIST image/label count mismatch: " +
                      std::to_string(img.count) + " vs " +
                      std::to_string(labels.size()));
  }
  Dataset data;
  data.dim = std::size_t{img.rows} * img.cols;
  data.num_classes = num_classes;
  data.features.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    data.features[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  }
  data.labels.assign(labels.begin(), labels.end());
  data.validate();
  return data;
}

}  // namespace pipesgd::numerics
