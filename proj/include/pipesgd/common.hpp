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

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pipesgd {

static_assert(std::endian::native == std::endian::little,
              "wire formats assume a little-endian host");

// Error hierarchy. Each module throws the most specific type; the CLI maps
// ConfigError -> exit 2 and TransportError -> exit 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CodecError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

class TimeoutError : public TransportError {
 public:
  using TransportError::TransportError;
};

class CollectiveError : public Error {
 public:
  using Error::Error;
};

// Violated internal protocol invariant (e.g. a gradient slot written twice).
class LogicError : public Error {
 public:
  using Error::Error;
};

// Flat vector of 32-bit reals: parameters and gradients.
class GradVec {
 public:
  GradVec() = default;
  explicit GradVec(std::size_t n, float fill = 0.0f) : values_(n, fill) {}
  explicit GradVec(std::vector<float> values) : values_(std::move(values)) {}
  GradVec(std::initializer_list<float> values) : values_(values) {}

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  float& operator[](std::size_t i) noexcept { return values_[i]; }
  float operator[](std::size_t i) const noexcept { return values_[i]; }

  float* data() noexcept { return values_.data(); }
  const float* data() const noexcept { return values_.data(); }

  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  std::span<float> span() noexcept { return values_; }
  std::span<const float> span() const noexcept { return values_; }

  const std::vector<float>& values() const& noexcept { return values_; }
  std::vector<float> values() && noexcept { return std::move(values_); }

  bool operator==(const GradVec&) const = default;

 private:
  std::vector<float> values_;
};

inline bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(),
                     [](float v) { return std::isfinite(v); });
}

// Bitwise equality; distinguishes -0.0f from 0.0f.
inline bool bit_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
}

namespace detail {

// Little-endian byte (de)serialization helpers.
template <typename T>
void put_le(std::vector<std::byte>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  const auto* p = reinterpret_cast<const std::byte*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get_le(std::span<const std::byte> in, std::size_t offset) {
  static_assert(std::is_trivially_copyable_v<T>);
  if (offset + sizeof(T) > in.size()) {
    throw CorruptionError("truncated buffer: need " +
                          std::to_string(offset + sizeof(T)) + " bytes, have " +
                          std::to_string(in.size()));
  }
  T value;
  std::memcpy(&value, in.data() + offset, sizeof(T));
  return value;
}

}  // namespace detail
}  // namespace pipesgd
