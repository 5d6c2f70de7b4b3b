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

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pipesgd/common.hpp"

// Lightweight elementwise gradient codecs used inside AllReduce.
//
//   none    - raw little-endian f32
//   trunc16 - upper half of the IEEE-754 single encoding (sign, exponent,
//             7 mantissa bits), rounded to nearest-even on the dropped half
//   quant8  - symmetric 8-bit scalar quantization, code = round(x / scale)
//             clamped to [-127, 127], scale ~ max|x| / 127
//
// Serialized block: u8 codec | u32 n_elems | f32 scale | payload.
namespace pipesgd::codec {

enum class CodecId : std::uint8_t { none = 0, trunc16 = 1, quant8 = 2 };

inline constexpr std::size_t kBlockHeaderBytes = 1 + 4 + 4;

inline std::string_view to_string(CodecId c) {
  switch (c) {
    case CodecId::none:
      return "none";
    case CodecId::trunc16:
      return "trunc16";
    case CodecId::quant8:
      return "quant8";
  }
  return "invalid";
}

inline CodecId parse_codec(std::string_view name) {
  if (name == "none") return CodecId::none;
  if (name == "trunc16") return CodecId::trunc16;
  if (name == "quant8") return CodecId::quant8;
  throw ConfigError("unknown codec '" + std::string(name) +
                    "' (expected none, trunc16 or quant8)");
}

inline CodecId codec_from_tag(std::uint8_t tag) {
  if (tag > 2) {
    throw CorruptionError("unknown codec tag " + std::to_string(tag));
  }
  return static_cast<CodecId>(tag);
}

inline constexpr std::size_t bytes_per_element(CodecId c) {
  switch (c) {
    case CodecId::none:
      return 4;
    case CodecId::trunc16:
      return 2;
    case CodecId::quant8:
      return 1;
  }
  return 0;
}

// Serialized size of a block of n elements, header included.
inline constexpr std::size_t wire_size(CodecId c, std::size_t n_elems) {
  return kBlockHeaderBytes + n_elems * bytes_per_element(c);
}

struct CompressedBlock {
  CodecId codec = CodecId::none;
  std::uint32_t n_elems = 0;
  float scale = 0.0f;
  std::vector<std::byte> payload;

  bool operator==(const CompressedBlock&) const = default;
};

// Single-value primitives, exposed for tests and for the per-hop reducers.

inline std::uint16_t trunc16_encode(float x) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
  std::uint32_t upper = bits >> 16;
  const std::uint32_t lower = bits & 0xFFFFu;
  if (lower > 0x8000u || (lower == 0x8000u && (upper & 1u))) {
    const std::uint32_t rounded = upper + 1;
    // Never round a finite value up into the infinity encoding.
    if ((rounded & 0x7F80u) != 0x7F80u) upper = rounded;
  }
  return static_cast<std::uint16_t>(upper);
}

inline float trunc16_decode(std::uint16_t half) {
  return std::bit_cast<float>(std::uint32_t{half} << 16);
}

// Scale for a block whose largest magnitude is max_abs. max_abs / 127 is
// truncated to 16 significant bits so that code * scale is exact in single
// precision for every code in [-127, 127]; this makes decode exact, the
// half-step error bound hold without round-off slack, and re-encoding a
// decoded block reproduce the same scale and codes.
inline float quant8_scale(float max_abs) {
  if (max_abs == 0.0f) return 0.0f;
  const double ideal = static_cast<double>(max_abs) / 127.0;
  int exp = 0;
  const double mant = std::frexp(ideal, &exp);
  const double truncated = std::ldexp(std::floor(std::ldexp(mant, 16)), exp - 16);
  float s = static_cast<float>(truncated);
  if (static_cast<double>(s) != truncated) {
    // Subnormal range: round up so no code needs clamping.
    if (static_cast<double>(s) < truncated) {
      s = std::nextafter(s, std::numeric_limits<float>::infinity());
    }
  }
  if (s == 0.0f) s = std::numeric_limits<float>::denorm_min();
  return s;
}

inline std::int8_t quant8_encode(float x, float scale) {
  if (scale == 0.0f) return 0;
  const double q = static_cast<double>(x) / static_cast<double>(scale);
  double code = std::round(q);  // ties away from zero
  code = std::clamp(code, -127.0, 127.0);
  return static_cast<std::int8_t>(code);
}

inline float quant8_decode(std::int8_t code, float scale) {
  return static_cast<float>(code) * scale;
}

inline CompressedBlock compress(std::span<const float> values, CodecId codec) {
  if (values.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw CodecError("block too large for a u32 element count");
  }
  if (!all_finite(values)) {
    throw CodecError("cannot compress a block containing NaN or Inf");
  }
  CompressedBlock block;
  block.codec = codec;
  block.n_elems = static_cast<std::uint32_t>(values.size());
  block.payload.resize(values.size() * bytes_per_element(codec));
  std::byte* out = block.payload.data();
  switch (codec) {
    case CodecId::none:
      if (!values.empty()) std::memcpy(out, values.data(), values.size_bytes());
      break;
    case CodecId::trunc16:
      for (std::size_t i = 0; i < values.size(); ++i) {
        const std::uint16_t h = trunc16_encode(values[i]);
        std::memcpy(out + 2 * i, &h, 2);
      }
      break;
    case CodecId::quant8: {
      float max_abs = 0.0f;
      for (float v : values) max_abs = std::max(max_abs, std::fabs(v));
      block.scale = quant8_scale(max_abs);
      for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = static_cast<std::byte>(quant8_encode(values[i], block.scale));
      }
      break;
    }
  }
  return block;
}

inline void validate(const CompressedBlock& block) {
  const std::size_t expected =
      std::size_t{block.n_elems} * bytes_per_element(block.codec);
  if (block.payload.size() != expected) {
    throw CorruptionError("block payload is " +
                          std::to_string(block.payload.size()) +
                          " bytes, expected " + std::to_string(expected) +
                          " for " + std::to_string(block.n_elems) + " " +
                          std::string(to_string(block.codec)) + " elements");
  }
  if (!(block.scale >= 0.0f) || !std::isfinite(block.scale)) {
    throw CorruptionError("block scale must be finite and >= 0");
  }
  if (block.codec != CodecId::quant8 && block.scale != 0.0f) {
    throw CorruptionError("non-quant8 block carries a scale");
  }
}

// Writes the decoded block into `out` (out.size() == n_elems).
inline void decompress_into(const CompressedBlock& block, std::span<float> out) {
  validate(block);
  if (out.size() != block.n_elems) {
    throw CorruptionError("decompress target has " + std::to_string(out.size()) +
                          " slots for " + std::to_string(block.n_elems) +
                          " elements");
  }
  const std::byte* in = block.payload.data();
  switch (block.codec) {
    case CodecId::none:
      if (!out.empty()) std::memcpy(out.data(), in, out.size_bytes());
      break;
    case CodecId::trunc16:
      for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint16_t h;
        std::memcpy(&h, in + 2 * i, 2);
        out[i] = trunc16_decode(h);
      }
      break;
    case CodecId::quant8:
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = quant8_decode(static_cast<std::int8_t>(in[i]), block.scale);
      }
      break;
  }
}

inline GradVec decompress(const CompressedBlock& block) {
  GradVec out(block.n_elems);
  decompress_into(block, out.span());
  return out;
}

inline std::vector<std::byte> serialize(const CompressedBlock& block) {
  validate(block);
  std::vector<std::byte> out;
  out.reserve(wire_size(block.codec, block.n_elems));
  out.push_back(static_cast<std::byte>(block.codec));
  detail::put_le<std::uint32_t>(out, block.n_elems);
  detail::put_le<float>(out, block.scale);
  out.insert(out.end(), block.payload.begin(), block.payload.end());
  return out;
}

inline CompressedBlock deserialize(std::span<const std::byte> bytes) {
  if (bytes.size() < kBlockHeaderBytes) {
    throw CorruptionError("serialized block shorter than its header");
  }
  CompressedBlock block;
  block.codec = codec_from_tag(static_cast<std::uint8_t>(bytes[0]));
  block.n_elems = detail::get_le<std::uint32_t>(bytes, 1);
  block.scale = detail::get_le<float>(bytes, 5);
  block.payload.assign(bytes.begin() + kBlockHeaderBytes, bytes.end());
  validate(block);
  return block;
}

}  // namespace pipesgd::codec
