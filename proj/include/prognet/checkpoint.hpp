#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prognet/adam.hpp"
#include "prognet/tensor.hpp"

namespace prognet {

// Little-endian binary container:
//   magic "PGNETCK\n", u32 version,
//   u64 config length + flat-config text,
//   i64 epoch, u32 rng word count + u64 words,
//   u32 tensor count, then per tensor: u32 name length + name, u8 dtype
//   (0 = f64, 1 = f32), u32 ndim, i64 dims, raw values,
//   u8 optimizer flag; when set: 5 f64 hyperparameters (lr, beta1, beta2,
//   eps, weight_decay), i64 step count, then per tensor the first and second
//   moment arrays in parameter order.
struct Checkpoint {
  uint32_t version = 1;
  std::string config_text;
  int64_t epoch = 0;
  std::vector<uint64_t> rng_state;
  std::vector<NamedTensor> params;
  bool has_optimizer = false;
  AdamConfig adam_cfg;
  int64_t adam_step = 0;
  std::vector<std::vector<real_t>> adam_m, adam_v;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace prognet
