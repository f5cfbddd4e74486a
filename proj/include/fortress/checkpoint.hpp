#pragma once

// Binary checkpoint:
//   "FKPT" | u32 version=1 | u32 len + canonical JSON config | u32 count |
//   count x (u16 len + name | u8 dtype | u8 ndim | ndim x u32 dims | raw LE values)
// dtype 0 = 32-bit float, 1 = 64-bit float. All integers little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fortress/model.hpp"

namespace fortress {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'F', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Sorted-key compact JSON, the canonical text form for configs.
inline std::string canonical_json(const nlohmann::json& j) { return j.dump(); }

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.append(p, sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) { bytes_.append(static_cast<const char*>(p), n); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}
  template <typename U>
  U get() {
    U v;
    get_bytes(&v, sizeof(U));
    return v;
  }
  void get_bytes(void* dst, std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

template <Scalar T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <Scalar T>
std::string serialize_checkpoint(const FortressModel<T>& model) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  const std::string cfg = canonical_json(nlohmann::json(model.config()));
  w.put(static_cast<std::uint32_t>(cfg.size()));
  w.put_bytes(cfg.data(), cfg.size());
  const auto tensors = model.store().named_tensors();
  w.put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.put(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put(detail::dtype_code<T>());
    w.put(std::uint8_t{4});
    for (std::size_t d : {t->shape().n, t->shape().c, t->shape().h, t->shape().w}) w.put(static_cast<std::uint32_t>(d));
    w.put_bytes(t->data(), t->numel() * sizeof(T));
  }
  return w.bytes();
}

/// Builds a fresh model from the stored config and fills every tensor; any
/// mismatch throws before the model is returned.
template <Scalar T>
FortressModel<T> deserialize_checkpoint(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto cfg_len = r.get<std::uint32_t>();
  std::string cfg_text(cfg_len, '\0');
  r.get_bytes(cfg_text.data(), cfg_len);
  ModelConfig cfg;
  try {
    cfg = nlohmann::json::parse(cfg_text).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config rejected: ") + e.what());
  }
  FortressModel<T> model = [&] {
    try {
      return FortressModel<T>::build(cfg, 0);
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint config rejected: ") + e.what());
    }
  }();

  std::vector<std::pair<std::string, Tensor<T>*>> slots;
  for (auto& p : model.store().params()) slots.emplace_back(p.name, &p.value);
  for (auto& b : model.store().buffers()) slots.emplace_back(b.name, &b.value);
  std::vector<bool> filled(slots.size(), false);

  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>();
    std::string name(name_len, '\0');
    r.get_bytes(name.data(), name_len);
    const auto dtype = r.get<std::uint8_t>();
    const auto ndim = r.get<std::uint8_t>();
    std::vector<std::uint32_t> dims(ndim);
    for (auto& d : dims) d = r.get<std::uint32_t>();
    if (dtype != detail::dtype_code<T>()) {
      throw FormatError("tensor " + name + " has dtype code " + std::to_string(dtype) + ", expected " +
                        std::to_string(detail::dtype_code<T>()));
    }
    std::size_t slot = slots.size();
    for (std::size_t k = 0; k < slots.size(); ++k)
      if (slots[k].first == name) slot = k;
    if (slot == slots.size()) throw FormatError("unknown parameter name " + name);
    if (filled[slot]) throw FormatError("duplicate tensor " + name);
    Tensor<T>& dst = *slots[slot].second;
    const Shape s = dst.shape();
    if (ndim != 4 || dims[0] != s.n || dims[1] != s.c || dims[2] != s.h || dims[3] != s.w) {
      throw FormatError("tensor " + name + " has the wrong shape for its config");
    }
    r.get_bytes(dst.data(), dst.numel() * sizeof(T));
    filled[slot] = true;
  }
  for (std::size_t k = 0; k < slots.size(); ++k)
    if (!filled[k]) throw FormatError("checkpoint is missing tensor " + slots[k].first);
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return model;
}

template <Scalar T>
void save_checkpoint(const FortressModel<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::ios_base::failure("failed writing " + path);
}

template <Scalar T>
FortressModel<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint<T>(ss.str());
}

}  // namespace fortress
