#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace rest {

/// H x W x C grid of intensities in [0,1].
///
/// Storage is channel-major (CHW): the value of channel c at row y, column x
/// lives at data[(c * height + y) * width + x]. For the single-channel images
/// used throughout this is the same as row-major HW.
struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  ImageTensor() = default;
  ImageTensor(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, fill) {
    if (h <= 0 || w <= 0 || c <= 0) {
      throw std::invalid_argument("ImageTensor: dimensions must be positive");
    }
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  bool same_shape(const ImageTensor& other) const {
    return height == other.height && width == other.width &&
           channels == other.channels;
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

inline void validate_image(const ImageTensor& image, const char* who) {
  if (image.height <= 0 || image.width <= 0 || image.channels <= 0 ||
      image.data.size() != static_cast<std::size_t>(image.height) *
                               image.width * image.channels) {
    throw std::invalid_argument(std::string(who) + ": invalid or zero-sized image");
  }
}

/// Images with one class label each; images[i] belongs to labels[i].
struct LabeledSet {
  std::vector<ImageTensor> images;
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }

  void push_back(ImageTensor image, int label) {
    images.push_back(std::move(image));
    labels.push_back(label);
  }

  /// First `count` items (or all, when fewer are available).
  LabeledSet head(std::size_t count) const {
    LabeledSet out;
    count = std::min(count, size());
    out.images.assign(images.begin(), images.begin() + count);
    out.labels.assign(labels.begin(), labels.begin() + count);
    return out;
  }
};

}  // namespace rest
