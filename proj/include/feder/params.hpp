#pragma once

// ModelParams: the ordered list of named layer tensors shipped between server
// and clients, plus its binary serialization.
//
// Binary layout (all integers little-endian):
//   "FEDERPRM"                         8-byte magic
//   u32 version (= 1)
//   u32 layer count
//   per layer:  u32 name length, name bytes (UTF-8), u32 rank,
//               rank x u64 dims, u8 dtype (1 = IEEE-754 binary64)
//   payload:    for each layer in order, its values row-major as
//               little-endian binary64
// Round-trips bit-exactly, including signed zeros.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "feder/error.hpp"
#include "feder/linalg.hpp"

namespace feder {

struct Layer {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;

  Layer() = default;
  Layer(std::string n, std::vector<std::size_t> s)
      : name(std::move(n)), shape(std::move(s)), values(element_count(shape), 0.0) {}
  Layer(std::string n, std::vector<std::size_t> s, std::vector<double> v)
      : name(std::move(n)), shape(std::move(s)), values(std::move(v)) {
    if (values.size() != element_count(shape)) {
      throw ShapeMismatchError("layer '" + name + "' shape does not match its value count");
    }
  }

  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t size() const noexcept { return values.size(); }

  bool is_conv() const noexcept { return rank() == 4; }
  // Only 4-D and 2-D tensors have a spectrum; biases do not.
  bool has_spectrum() const noexcept { return rank() == 4 || rank() == 2; }

  linalg::Tensor4 as_tensor4() const {
    if (rank() != 4) throw ShapeMismatchError("layer '" + name + "' is not 4-D");
    return linalg::Tensor4({shape[0], shape[1], shape[2], shape[3]}, values);
  }
  linalg::Matrix as_matrix() const {
    if (rank() != 2) throw ShapeMismatchError("layer '" + name + "' is not 2-D");
    return linalg::Matrix(shape[0], shape[1], values);
  }

  bool operator==(const Layer&) const = default;

  static std::size_t element_count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
};

struct ModelParams {
  std::vector<Layer> layers;

  std::size_t size() const noexcept { return layers.size(); }
  const Layer& operator[](std::size_t i) const { return layers.at(i); }
  Layer& operator[](std::size_t i) { return layers.at(i); }

  const Layer& find(std::string_view name) const {
    for (const auto& l : layers) {
      if (l.name == name) return l;
    }
    throw InvalidArgumentError("no layer named '" + std::string(name) + "'");
  }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
  }

  bool operator==(const ModelParams&) const = default;
};

// Gradients share the ModelParams structure.
using Gradient = ModelParams;

inline bool congruent(const ModelParams& a, const ModelParams& b) noexcept {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.layers[i].name != b.layers[i].name || a.layers[i].shape != b.layers[i].shape) return false;
  }
  return true;
}

inline void require_congruent(const ModelParams& a, const ModelParams& b, std::string_view context) {
  if (!congruent(a, b)) throw ShapeMismatchError(std::string(context) + ": parameter structures differ");
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams out;
  out.layers.reserve(p.size());
  for (const auto& l : p.layers) out.layers.emplace_back(l.name, l.shape);
  return out;
}

// a += c * b
inline void axpy(ModelParams& a, double c, const ModelParams& b) {
  require_congruent(a, b, "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto& av = a.layers[i].values;
    const auto& bv = b.layers[i].values;
    for (std::size_t j = 0; j < av.size(); ++j) av[j] += c * bv[j];
  }
}

inline double squared_norm(const Layer& l) noexcept {
  double s = 0.0;
  for (double v : l.values) s += v * v;
  return s;
}

// Global l2 norm over every parameter.
inline double l2_norm(const ModelParams& p) noexcept {
  double s = 0.0;
  for (const auto& l : p.layers) s += squared_norm(l);
  return std::sqrt(s);
}

inline double l2_distance(const ModelParams& a, const ModelParams& b) {
  require_congruent(a, b, "l2_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a.layers[i].size(); ++j) {
      const double d = a.layers[i].values[j] - b.layers[i].values[j];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

inline bool all_finite(const ModelParams& p) noexcept {
  for (const auto& l : p.layers) {
    for (double v : l.values) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

namespace detail {

inline constexpr char kParamsMagic[8] = {'F', 'E', 'D', 'E', 'R', 'P', 'R', 'M'};
inline constexpr std::uint32_t kParamsVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <class T>
  T get() {
    static_assert(std::is_unsigned_v<T>);
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return v;
  }

  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const noexcept { return pos_ == data_.size(); }

private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IoError("truncated parameter stream");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const ModelParams& p) {
  std::string out(detail::kParamsMagic, sizeof(detail::kParamsMagic));
  detail::put_le<std::uint32_t>(out, detail::kParamsVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.size()));
  for (const auto& l : p.layers) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.name.size()));
    out += l.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.rank()));
    for (std::size_t d : l.shape) detail::put_le<std::uint64_t>(out, d);
    detail::put_le<std::uint8_t>(out, detail::kDtypeF64);
  }
  for (const auto& l : p.layers) {
    for (double v : l.values) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline ModelParams deserialize(std::string_view data) {
  detail::Reader in(data);
  if (in.bytes(sizeof(detail::kParamsMagic)) != std::string_view(detail::kParamsMagic, sizeof(detail::kParamsMagic))) {
    throw IoError("not a parameter stream (bad magic)");
  }
  if (const auto v = in.get<std::uint32_t>(); v != detail::kParamsVersion) {
    throw IoError("unsupported parameter stream version " + std::to_string(v));
  }
  const auto count = in.get<std::uint32_t>();
  ModelParams p;
  p.layers.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = in.get<std::uint32_t>();
    std::string name(in.bytes(name_len));
    const auto rank = in.get<std::uint32_t>();
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>());
    if (in.get<std::uint8_t>() != detail::kDtypeF64) throw IoError("unsupported dtype for layer '" + name + "'");
    p.layers.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& l : p.layers) {
    for (double& v : l.values) v = std::bit_cast<double>(in.get<std::uint64_t>());
  }
  if (!in.done()) throw IoError("trailing bytes after parameter stream");
  return p;
}

inline void save(const ModelParams& p, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const auto bytes = serialize(p);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write to '" + path + "' failed");
}

inline ModelParams load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace feder
