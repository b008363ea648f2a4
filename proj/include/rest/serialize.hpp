#pragma once

// Versioned binary model files.
//
// Layout (all integers little-endian):
//   8 bytes   magic "RESTMODL"
//   u32       format version (kFormatVersion)
//   u32       model kind (ModelKind)
//   u32       metadata count, then that many f64 metadata values
//   then one record per network (classifier: 1, actor-critic: actor, critic):
//     u32 x3    input channels, height, width
//     u32       layer count, then per layer: u32 kind, i32 units, i32 kernel,
//               f64 rate, f64 init_scale
//     u64       parameter scalar count, then that many f64 values
// Parameters are written in Network::params() order, each matrix column-major.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/nn.hpp"

namespace rest::io {

inline constexpr char kModelMagic[8] = {'R', 'E', 'S', 'T', 'M', 'O', 'D', 'L'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class ModelKind : std::uint32_t { kClassifier = 1, kActorCritic = 2 };

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

inline void write_f64(std::ostream& os, double v) { write_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t read_le(std::istream& is, int bytes) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), bytes)) throw FormatError("model file: truncated");
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint32_t read_u32(std::istream& is) { return static_cast<std::uint32_t>(read_le(is, 4)); }
inline std::uint64_t read_u64(std::istream& is) { return read_le(is, 8); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

template <class S>
void write_network(std::ostream& os, const nn::Network<S>& net) {
  const nn::Shape in = net.input_shape();
  write_u32(os, static_cast<std::uint32_t>(in.channels));
  write_u32(os, static_cast<std::uint32_t>(in.height));
  write_u32(os, static_cast<std::uint32_t>(in.width));
  write_u32(os, static_cast<std::uint32_t>(net.specs().size()));
  for (const nn::LayerSpec& spec : net.specs()) {
    write_u32(os, static_cast<std::uint32_t>(spec.kind));
    write_u32(os, static_cast<std::uint32_t>(spec.units));
    write_u32(os, static_cast<std::uint32_t>(spec.kernel));
    write_f64(os, spec.rate);
    write_f64(os, spec.init_scale);
  }
  write_u64(os, net.parameter_count());
  for (const nn::Param<S>* p : net.params()) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      write_f64(os, static_cast<double>(p->value.data()[i]));
    }
  }
}

template <class S>
nn::Network<S> read_network(std::istream& is) {
  nn::Shape in;
  in.channels = static_cast<int>(read_u32(is));
  in.height = static_cast<int>(read_u32(is));
  in.width = static_cast<int>(read_u32(is));
  const std::uint32_t layer_count = read_u32(is);
  if (layer_count > 1024) throw FormatError("model file: implausible layer count");
  std::vector<nn::LayerSpec> specs;
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    nn::LayerSpec spec;
    const std::uint32_t kind = read_u32(is);
    if (kind < 1 || kind > 6) throw FormatError("model file: unknown layer kind " + std::to_string(kind));
    spec.kind = static_cast<nn::LayerKind>(kind);
    spec.units = static_cast<std::int32_t>(read_u32(is));
    spec.kernel = static_cast<std::int32_t>(read_u32(is));
    spec.rate = read_f64(is);
    spec.init_scale = read_f64(is);
    specs.push_back(spec);
  }
  nn::Network<S> net;
  try {
    net = nn::Network<S>(in, specs, 0);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("model file: bad architecture: ") + e.what());
  }
  const std::uint64_t count = read_u64(is);
  if (count != net.parameter_count()) throw FormatError("model file: parameter count mismatch");
  for (nn::Param<S>* p : net.params()) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      p->value.data()[i] = static_cast<S>(read_f64(is));
    }
    p->zero_grad();
  }
  return net;
}

inline void write_header(std::ostream& os, ModelKind kind, const std::vector<double>& metadata) {
  os.write(kModelMagic, sizeof kModelMagic);
  write_u32(os, kFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(kind));
  write_u32(os, static_cast<std::uint32_t>(metadata.size()));
  for (double v : metadata) write_f64(os, v);
}

/// Validates magic, version and kind; returns the metadata values.
inline std::vector<double> read_header(std::istream& is, ModelKind expected) {
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kModelMagic)) {
    throw FormatError("model file: bad magic");
  }
  const std::uint32_t version = read_u32(is);
  if (version != kFormatVersion) {
    throw FormatError("model file: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t kind = read_u32(is);
  if (kind != static_cast<std::uint32_t>(expected)) throw FormatError("model file: wrong model kind");
  const std::uint32_t n = read_u32(is);
  if (n > 4096) throw FormatError("model file: implausible metadata count");
  std::vector<double> metadata(n);
  for (double& v : metadata) v = read_f64(is);
  return metadata;
}

inline std::ofstream open_for_write(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  return os;
}

inline std::ifstream open_for_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return is;
}

}  // namespace rest::io
