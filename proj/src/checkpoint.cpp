#include "prognet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace prognet {

namespace {

constexpr char kMagic[8] = {'P', 'G', 'N', 'E', 'T', 'C', 'K', '\n'};

#ifdef PROGNET_SINGLE_PRECISION
constexpr uint8_t kDtype = 1;
#else
constexpr uint8_t kDtype = 0;
#endif

void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
  for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
#endif
  put_bytes(os, buf, sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
  for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
#endif
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<uint32_t>(os, static_cast<uint32_t>(s.size()));
  put_bytes(os, s.data(), s.size());
}

std::string get_string(std::istream& is) {
  const uint32_t n = get<uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

void put_values(std::ostream& os, const std::vector<real_t>& v) {
  for (real_t x : v) put<real_t>(os, x);
}

std::vector<real_t> get_values(std::istream& is, size_t n) {
  std::vector<real_t> v(n);
  for (auto& x : v) x = get<real_t>(is);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  put_bytes(os, kMagic, 8);
  put<uint32_t>(os, ckpt.version);
  put<uint64_t>(os, ckpt.config_text.size());
  put_bytes(os, ckpt.config_text.data(), ckpt.config_text.size());
  put<int64_t>(os, ckpt.epoch);
  put<uint32_t>(os, static_cast<uint32_t>(ckpt.rng_state.size()));
  for (uint64_t w : ckpt.rng_state) put<uint64_t>(os, w);
  put<uint32_t>(os, static_cast<uint32_t>(ckpt.params.size()));
  for (const auto& p : ckpt.params) {
    put_string(os, p.name);
    put<uint8_t>(os, kDtype);
    put<uint32_t>(os, static_cast<uint32_t>(p.tensor.ndim()));
    for (int64_t d : p.tensor.shape()) put<int64_t>(os, d);
    put_values(os, p.tensor.data());
  }
  put<uint8_t>(os, ckpt.has_optimizer ? 1 : 0);
  if (ckpt.has_optimizer) {
    if (ckpt.adam_m.size() != ckpt.params.size() || ckpt.adam_v.size() != ckpt.params.size())
      throw std::invalid_argument("checkpoint: optimizer state does not match parameter count");
    put<double>(os, ckpt.adam_cfg.lr);
    put<double>(os, ckpt.adam_cfg.beta1);
    put<double>(os, ckpt.adam_cfg.beta2);
    put<double>(os, ckpt.adam_cfg.eps);
    put<double>(os, ckpt.adam_cfg.weight_decay);
    put<int64_t>(os, ckpt.adam_step);
    for (size_t i = 0; i < ckpt.params.size(); ++i) {
      put_values(os, ckpt.adam_m[i]);
      put_values(os, ckpt.adam_v[i]);
    }
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  Checkpoint ckpt;
  ckpt.version = get<uint32_t>(is);
  if (ckpt.version != 1)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(ckpt.version));
  const uint64_t cfg_len = get<uint64_t>(is);
  ckpt.config_text.resize(cfg_len);
  is.read(ckpt.config_text.data(), static_cast<std::streamsize>(cfg_len));
  ckpt.epoch = get<int64_t>(is);
  const uint32_t n_rng = get<uint32_t>(is);
  for (uint32_t i = 0; i < n_rng; ++i) ckpt.rng_state.push_back(get<uint64_t>(is));
  const uint32_t n_params = get<uint32_t>(is);
  for (uint32_t i = 0; i < n_params; ++i) {
    NamedTensor nt;
    nt.name = get_string(is);
    const uint8_t dtype = get<uint8_t>(is);
    if (dtype != kDtype)
      throw std::runtime_error("checkpoint scalar type does not match this build: " + path);
    const uint32_t ndim = get<uint32_t>(is);
    Shape shape;
    for (uint32_t d = 0; d < ndim; ++d) shape.push_back(get<int64_t>(is));
    auto values = get_values(is, static_cast<size_t>(numel_of(shape)));
    nt.tensor = Tensor::from_data(shape, std::move(values));
    ckpt.params.push_back(std::move(nt));
  }
  ckpt.has_optimizer = get<uint8_t>(is) != 0;
  if (ckpt.has_optimizer) {
    ckpt.adam_cfg.lr = get<double>(is);
    ckpt.adam_cfg.beta1 = get<double>(is);
    ckpt.adam_cfg.beta2 = get<double>(is);
    ckpt.adam_cfg.eps = get<double>(is);
    ckpt.adam_cfg.weight_decay = get<double>(is);
    ckpt.adam_step = get<int64_t>(is);
    for (const auto& p : ckpt.params) {
      const size_t n = static_cast<size_t>(p.tensor.numel());
      ckpt.adam_m.push_back(get_values(is, n));
      ckpt.adam_v.push_back(get_values(is, n));
    }
  }
  if (!is) throw std::runtime_error("truncated checkpoint: " + path);
  return ckpt;
}

}  // namespace prognet
