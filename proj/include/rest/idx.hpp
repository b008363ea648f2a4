#pragma once

// IDX reader/writer for MNIST-style files: big-endian u32 magic
// (0x00000803 images, 0x00000801 labels), big-endian u32 dimensions, then
// unsigned bytes.

#include <algorithm>
#include <cmath>
#include <iterator>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/image.hpp"

namespace rest::io {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IdxError("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void put_be32(std::ofstream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  os.write(b, 4);
}

}  // namespace detail

/// Single-channel images from an IDX3 byte stream, intensities scaled to [0,1].
inline std::vector<ImageTensor> parse_idx_images(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 16) throw IdxError("idx images: truncated header");
  if (detail::be32(bytes, 0) != kIdxImagesMagic) throw IdxError("idx images: bad magic");
  const std::uint32_t count = detail::be32(bytes, 4);
  const std::uint32_t rows = detail::be32(bytes, 8);
  const std::uint32_t cols = detail::be32(bytes, 12);
  if (rows == 0 || cols == 0) throw IdxError("idx images: zero-sized images");
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  if (bytes.size() - 16 < static_cast<std::size_t>(count) * pixels) {
    throw IdxError("idx images: truncated payload");
  }
  std::vector<ImageTensor> images;
  images.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ImageTensor img(static_cast<int>(rows), static_cast<int>(cols), 1);
    const unsigned char* src = bytes.data() + 16 + i * pixels;
    for (std::size_t p = 0; p < pixels; ++p) img.data[p] = src[p] / 255.0;
    images.push_back(std::move(img));
  }
  return images;
}

inline std::vector<int> parse_idx_labels(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8) throw IdxError("idx labels: truncated header");
  if (detail::be32(bytes, 0) != kIdxLabelsMagic) throw IdxError("idx labels: bad magic");
  const std::uint32_t count = detail::be32(bytes, 4);
  if (bytes.size() - 8 < count) throw IdxError("idx labels: truncated payload");
  return {bytes.begin() + 8, bytes.begin() + 8 + count};
}

/// Loads an image/label file pair, checking that the record counts agree.
inline LabeledSet ingest_idx(const std::string& images_path, const std::string& labels_path) {
  LabeledSet set;
  set.images = parse_idx_images(detail::read_all(images_path));
  set.labels = parse_idx_labels(detail::read_all(labels_path));
  if (set.images.size() != set.labels.size()) {
    throw IdxError("idx: image count " + std::to_string(set.images.size()) +
                   " does not match label count " + std::to_string(set.labels.size()));
  }
  return set;
}

/// Writes single-channel images, quantizing intensities to bytes.
inline void write_idx(const LabeledSet& set, const std::string& images_path,
                      const std::string& labels_path) {
  if (set.empty()) throw IdxError("write_idx: empty set");
  const ImageTensor& first = set.images.front();
  std::ofstream im(images_path, std::ios::binary | std::ios::trunc);
  std::ofstream lb(labels_path, std::ios::binary | std::ios::trunc);
  if (!im || !lb) throw IdxError("write_idx: cannot open output files");
  detail::put_be32(im, kIdxImagesMagic);
  detail::put_be32(im, static_cast<std::uint32_t>(set.size()));
  detail::put_be32(im, static_cast<std::uint32_t>(first.height));
  detail::put_be32(im, static_cast<std::uint32_t>(first.width));
  detail::put_be32(lb, kIdxLabelsMagic);
  detail::put_be32(lb, static_cast<std::uint32_t>(set.size()));
  for (std::size_t i = 0; i < set.size(); ++i) {
    const ImageTensor& img = set.images[i];
    if (!img.same_shape(first) || img.channels != 1) {
      throw IdxError("write_idx: images must share one single-channel shape");
    }
    for (double v : img.data) {
      im.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    }
    lb.put(static_cast<char>(static_cast<unsigned char>(set.labels[i])));
  }
}

}  // namespace rest::io
