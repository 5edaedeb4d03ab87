#pragma once

// Binary checkpoint container: magic, format version, a config record, a
// free-form state record and a list of named tensors (dtype, shape, raw
// little-endian data).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "recat/config.hpp"
#include "recat/error.hpp"
#include "recat/model.hpp"
#include "recat/numerics.hpp"

namespace recat {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'R', 'E', 'C', 'A', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::string dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::size_t> shape;
  std::vector<char> bytes;
};

namespace detail {

template <class V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class V>
V get(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw CheckpointError("truncated checkpoint");
  return v;
}

inline std::string get_string(std::istream& in, std::uint64_t limit = std::uint64_t{1} << 32) {
  const auto n = get<std::uint64_t>(in);
  if (n > limit) throw CheckpointError("corrupt string length in checkpoint");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw CheckpointError("truncated checkpoint");
  return s;
}

}  // namespace detail

struct Checkpoint {
  std::string config;
  std::string state;
  std::vector<TensorRecord> tensors;

  template <class T>
  void add(const std::string& name, const Tensor<T>& t) {
    TensorRecord r{name, dtype_of<T>(), t.shape(), {}};
    r.bytes.resize(t.size() * sizeof(T));
    std::memcpy(r.bytes.data(), t.data(), r.bytes.size());
    tensors.push_back(std::move(r));
  }

  const TensorRecord* find(const std::string& name) const {
    for (const auto& r : tensors)
      if (r.name == name) return &r;
    return nullptr;
  }

  /// Copies a stored tensor into `into`, which must already have the
  /// stored shape and dtype.
  template <class T>
  void restore(const std::string& name, Tensor<T>& into) const {
    const auto* r = find(name);
    if (!r) throw CheckpointError("checkpoint has no tensor '" + name + "'");
    if (r->dtype != dtype_of<T>()) {
      throw CheckpointError("dtype mismatch for '" + name + "': stored " + dtype_name(r->dtype) + ", expected " +
                            dtype_name(dtype_of<T>()));
    }
    if (r->shape != into.shape()) {
      Tensor<T> probe(r->shape);
      throw CheckpointError("shape mismatch for '" + name + "': stored " + probe.shape_string() + ", expected " +
                            into.shape_string());
    }
    std::memcpy(into.data(), r->bytes.data(), r->bytes.size());
  }

  void write(std::ostream& out) const {
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    detail::put_string(out, config);
    detail::put_string(out, state);
    detail::put<std::uint64_t>(out, tensors.size());
    for (const auto& r : tensors) {
      detail::put_string(out, r.name);
      detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(r.dtype));
      detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
      for (auto d : r.shape) detail::put<std::uint64_t>(out, d);
      out.write(r.bytes.data(), static_cast<std::streamsize>(r.bytes.size()));
    }
    if (!out) throw CheckpointError("failed writing checkpoint");
  }

  static Checkpoint read(std::istream& in) {
    char magic[sizeof(kCheckpointMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
      throw CheckpointError("not a checkpoint file (bad magic)");
    }
    const auto version = detail::get<std::uint32_t>(in);
    if (version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    ck.config = detail::get_string(in);
    ck.state = detail::get_string(in);
    const auto count = detail::get<std::uint64_t>(in);
    for (std::uint64_t t = 0; t < count; ++t) {
      TensorRecord r;
      r.name = detail::get_string(in, 4096);
      const auto dt = detail::get<std::uint8_t>(in);
      if (dt != 1 && dt != 2) throw CheckpointError("unknown dtype tag for '" + r.name + "'");
      r.dtype = static_cast<DType>(dt);
      const auto rank = detail::get<std::uint32_t>(in);
      if (rank > 8) throw CheckpointError("corrupt rank for '" + r.name + "'");
      std::size_t elems = 1;
      for (std::uint32_t k = 0; k < rank; ++k) {
        r.shape.push_back(detail::get<std::uint64_t>(in));
        elems *= r.shape.back();
      }
      const std::size_t width = r.dtype == DType::f32 ? 4 : 8;
      if (elems > (std::size_t{1} << 34) / width) throw CheckpointError("corrupt size for '" + r.name + "'");
      r.bytes.resize(elems * width);
      in.read(r.bytes.data(), static_cast<std::streamsize>(r.bytes.size()));
      if (!in) throw CheckpointError("truncated data for '" + r.name + "'");
      ck.tensors.push_back(std::move(r));
    }
    return ck;
  }

  void save(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw CheckpointError("cannot write '" + tmp + "'");
      write(out);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint to '" + path + "'");
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
    return read(in);
  }
};

template <class T>
void add_params(Checkpoint& ck, const ParameterSet<T>& ps, const std::string& prefix = "") {
  for (const auto& p : ps) ck.add(prefix + p->name, p->value);
}

template <class T>
void load_params(const Checkpoint& ck, ParameterSet<T>& ps, const std::string& prefix = "") {
  for (auto& p : ps) ck.restore(prefix + p->name, p->value);
}

template <class T>
Checkpoint model_checkpoint(const ReCatModel<T>& model) {
  Checkpoint ck;
  ck.config = model.config().to_map().to_string();
  add_params(ck, model.params());
  add_params(ck, model.parser_params());
  return ck;
}

template <class T>
std::unique_ptr<ReCatModel<T>> model_from_checkpoint(const Checkpoint& ck) {
  ReCatConfig cfg;
  const auto cm = ConfigMap::parse_string(ck.config);
  cfg.read(cm);
  cm.check_consumed();
  auto model = std::make_unique<ReCatModel<T>>(cfg);
  load_params(ck, model->params());
  load_params(ck, model->parser_params());
  return model;
}

}  // namespace recat
