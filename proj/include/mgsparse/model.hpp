#pragma once

#include <string>
#include <vector>

#include "mgsparse/numerics.hpp"

namespace mgsparse {

// One feedforward block: out = w2 * relu(w1 * x + b1) + b2.
// d is the residual-stream width, f the hidden width.
struct FFBlock {
  std::size_t d = 0;
  std::size_t f = 0;
  Matrix w1;  // f x d
  Vector b1;  // f
  Matrix w2;  // d x f
  Vector b2;  // d

  FFBlock() = default;
  FFBlock(std::size_t d_, std::size_t f_)
      : d(d_), f(f_), w1(f_, d_), b1(f_, 0.0f), w2(d_, f_), b2(d_, 0.0f) {}
};

// Residual stack of FF blocks sharing one width d. Immutable after
// construction or loading; safe to share across threads read-only.
struct BaseModel {
  std::size_t d = 0;
  std::size_t f = 0;
  std::vector<FFBlock> layers;

  std::size_t layer_count() const { return layers.size(); }
};

struct FFResult {
  Vector hidden;  // post-ReLU, length f
  Vector out;     // length d
};

inline FFResult ff_forward(const FFBlock& block, const Vector& x) {
  require(x.size() == block.d, errc::dim_mismatch,
          "ff_forward: x.len " + std::to_string(x.size()) + " != d " + std::to_string(block.d));
  Vector pre = matvec(block.w1, x);
  add_inplace(pre, block.b1);
  Vector hidden = relu(pre);
  Vector out = matvec(block.w2, hidden);
  add_inplace(out, block.b2);
  return {std::move(hidden), std::move(out)};
}

struct ForwardTrace {
  std::vector<Vector> inputs;   // residual stream entering each layer
  std::vector<Vector> hiddens;  // post-ReLU hidden of each layer
  Vector final;                 // residual stream after the last layer
};

// Residual wiring: x_{l+1} = x_l + ff(x_l).
inline ForwardTrace model_forward(const BaseModel& m, const Vector& x) {
  require(x.size() == m.d, errc::dim_mismatch, "model_forward: x.len != d");
  ForwardTrace t;
  t.inputs.reserve(m.layers.size());
  t.hiddens.reserve(m.layers.size());
  Vector cur = x;
  for (const FFBlock& block : m.layers) {
    t.inputs.push_back(cur);
    FFResult r = ff_forward(block, cur);
    t.hiddens.push_back(std::move(r.hidden));
    add_inplace(cur, r.out);
  }
  t.final = std::move(cur);
  return t;
}

// ---- checkpoint format ----
// "MGSB" | version u32 | d u32 | f u32 | layer_count u32 |
// per layer: w1 row-major, b1, w2 row-major, b2 as little-endian f32.

inline constexpr std::uint32_t kCheckpointVersion = 1;
// Caps d*f*layers at construction/load time; 1<<28 floats is 1 GiB of weights.
inline constexpr std::uint64_t kMaxWeightFloats = 1ull << 28;

inline void save_checkpoint(const BaseModel& m, const std::string& path) {
  require(!m.layers.empty(), errc::bad_argument, "save_checkpoint: model has no layers");
  for (const FFBlock& b : m.layers)
    require(b.d == m.d && b.f == m.f, errc::dim_mismatch,
            "save_checkpoint: layers must share the model's d and f");
  auto os = open_out(path);
  write_magic(os, "MGSB");
  write_u32(os, kCheckpointVersion);
  write_u32(os, static_cast<std::uint32_t>(m.d));
  write_u32(os, static_cast<std::uint32_t>(m.f));
  write_u32(os, static_cast<std::uint32_t>(m.layers.size()));
  for (const FFBlock& b : m.layers) {
    write_f32_array(os, b.w1.data);
    write_f32_array(os, b.b1);
    write_f32_array(os, b.w2.data);
    write_f32_array(os, b.b2);
  }
  require(bool(os), errc::io_failure, "write failed: " + path);
}

inline BaseModel load_checkpoint(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "MGSB", "checkpoint " + path);
  expect_version(is, kCheckpointVersion, "checkpoint");
  std::uint32_t d = read_u32(is, "d");
  std::uint32_t f = read_u32(is, "f");
  std::uint32_t layers = read_u32(is, "layer_count");
  require(d > 0 && f > 0 && layers > 0, errc::dim_overflow, "checkpoint has zero dimension");
  std::uint64_t per_layer = 2ull * d * f + d + f;
  require(per_layer * layers <= kMaxWeightFloats, errc::dim_overflow,
          "checkpoint dimensions exceed weight limit");
  BaseModel m;
  m.d = d;
  m.f = f;
  m.layers.reserve(layers);
  for (std::uint32_t l = 0; l < layers; ++l) {
    FFBlock b(d, f);
    read_f32_array(is, b.w1.data, "w1");
    read_f32_array(is, b.b1, "b1");
    read_f32_array(is, b.w2.data, "w2");
    read_f32_array(is, b.b2, "b2");
    m.layers.push_back(std::move(b));
  }
  return m;
}

}  // namespace mgsparse
