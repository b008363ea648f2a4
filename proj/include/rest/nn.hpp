#pragma once

// Small CPU neural-network toolkit: convolution, pooling, dense, activation
// and dropout layers with hand-written backward passes, a sequential
// container and Adam.
//
// Activations are Eigen matrices with one column per sample; each column is a
// CHW-flattened feature map. All layers are value types held in a
// std::variant, so networks copy like ordinary values. Forward passes are
// const: whatever backward needs is written to a caller-owned Tape, so a
// frozen network can be evaluated from several threads at once.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "rest/random.hpp"

namespace rest::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

struct Shape {
  int channels = 1;
  int height = 1;
  int width = 1;
  int size() const { return channels * height * width; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

enum class LayerKind : std::uint32_t {
  kConv2d = 1,
  kMaxPool2 = 2,
  kRelu = 3,
  kDense = 4,
  kDropout = 5,
  kTanh = 6,
};

/// Architecture descriptor for one layer. `units` is the output channel count
/// (conv) or output width (dense); `kernel` is the square conv kernel size;
/// `rate` is the dropout probability; `init_scale` multiplies the He-normal
/// initial weights (0 gives a zero-initialized layer).
struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  int units = 0;
  int kernel = 0;
  double rate = 0.0;
  double init_scale = 1.0;

  static LayerSpec conv(int channels, int kernel) { return {LayerKind::kConv2d, channels, kernel}; }
  static LayerSpec pool() { return {LayerKind::kMaxPool2}; }
  static LayerSpec relu() { return {LayerKind::kRelu}; }
  static LayerSpec tanh() { return {LayerKind::kTanh}; }
  static LayerSpec dense(int units, double init_scale = 1.0) {
    return {LayerKind::kDense, units, 0, 0.0, init_scale};
  }
  static LayerSpec dropout(double rate) { return {LayerKind::kDropout, 0, 0, rate}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

template <class S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Forward-pass behaviour switch. Only dropout depends on it.
struct ForwardMode {
  bool dropout_active = false;
  Rng* rng = nullptr;
};

/// Per-layer values recorded by a forward pass for the backward pass.
template <class S>
struct LayerCache {
  Mat<S> values;
  std::vector<int> indices;
};

namespace detail {

template <class S>
void he_init(Mat<S>& w, int fan_in, double scale, Rng& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      w(i, j) = static_cast<S>(scale == 0.0 ? 0.0 : scale * normal(rng));
    }
  }
}

}  // namespace detail

/// Valid (no padding, stride 1) square-kernel convolution.
template <class S>
class Conv2d {
 public:
  Conv2d(Shape in, int out_channels, int kernel)
      : in_(in), out_channels_(out_channels), kernel_(kernel) {
    if (kernel <= 0 || out_channels <= 0 || in.height < kernel || in.width < kernel) {
      throw std::invalid_argument("Conv2d: kernel does not fit input");
    }
    const int patch = in.channels * kernel * kernel;
    weight_ = {"conv.weight", Mat<S>::Zero(out_channels, patch), Mat<S>::Zero(out_channels, patch)};
    bias_ = {"conv.bias", Mat<S>::Zero(out_channels, 1), Mat<S>::Zero(out_channels, 1)};
  }

  Shape output_shape() const {
    return {out_channels_, in_.height - kernel_ + 1, in_.width - kernel_ + 1};
  }

  void init(double scale, Rng& rng) {
    detail::he_init(weight_.value, in_.channels * kernel_ * kernel_, scale, rng);
    bias_.value.setZero();
  }

  Mat<S> forward(const Mat<S>& x, const ForwardMode&, LayerCache<S>* cache) const {
    const Shape out = output_shape();
    const Eigen::Index pixels = out.height * out.width;
    const Eigen::Index n = x.cols();
    Mat<S> rows = im2row(x);
    Mat<S> prod = rows * weight_.value.transpose();  // (n*pixels) x out_channels
    if (cache) cache->values = std::move(rows);
    Mat<S> y(out.size(), n);
    for (Eigen::Index s = 0; s < n; ++s) {
      for (int co = 0; co < out_channels_; ++co) {
        y.col(s).segment(co * pixels, pixels) =
            prod.col(co).segment(s * pixels, pixels).array() + bias_.value(co, 0);
      }
    }
    return y;
  }

  Mat<S> backward(const Mat<S>& g, const LayerCache<S>& cache, bool need_input_grad = true) {
    const Shape out = output_shape();
    const Eigen::Index pixels = out.height * out.width;
    const Eigen::Index n = g.cols();
    Mat<S> grad_rows(n * pixels, out_channels_);
    for (Eigen::Index s = 0; s < n; ++s) {
      for (int co = 0; co < out_channels_; ++co) {
        grad_rows.col(co).segment(s * pixels, pixels) = g.col(s).segment(co * pixels, pixels);
      }
    }
    const Mat<S>& rows = cache.values;  // patch matrix saved by forward
    weight_.grad.noalias() += grad_rows.transpose() * rows;
    bias_.grad.noalias() += grad_rows.colwise().sum().transpose();
    if (!need_input_grad) return {};
    const Mat<S> drows = grad_rows * weight_.value;
    return row2im(drows, n);
  }

  std::vector<Param<S>*> params() { return {&weight_, &bias_}; }
  LayerSpec spec() const { return LayerSpec::conv(out_channels_, kernel_); }

 private:
  // Patch matrix: row (s * pixels + p) holds the receptive field of output
  // pixel p in sample s, ordered (channel, ky, kx).
  Mat<S> im2row(const Mat<S>& x) const {
    const Shape out = output_shape();
    const Eigen::Index pixels = out.height * out.width;
    const Eigen::Index n = x.cols();
    Mat<S> rows(n * pixels, in_.channels * kernel_ * kernel_);
    for (Eigen::Index s = 0; s < n; ++s) {
      const S* src = x.col(s).data();
      for (int ci = 0; ci < in_.channels; ++ci) {
        for (int ky = 0; ky < kernel_; ++ky) {
          for (int kx = 0; kx < kernel_; ++kx) {
            const Eigen::Index idx = (ci * kernel_ + ky) * kernel_ + kx;
            S* dst = rows.col(idx).data() + s * pixels;
            for (int oy = 0; oy < out.height; ++oy) {
              const S* line = src + (ci * in_.height + oy + ky) * in_.width + kx;
              for (int ox = 0; ox < out.width; ++ox) *dst++ = line[ox];
            }
          }
        }
      }
    }
    return rows;
  }

  Mat<S> row2im(const Mat<S>& drows, Eigen::Index n) const {
    const Shape out = output_shape();
    const Eigen::Index pixels = out.height * out.width;
    Mat<S> dx = Mat<S>::Zero(in_.size(), n);
    for (Eigen::Index s = 0; s < n; ++s) {
      S* dst = dx.col(s).data();
      for (int ci = 0; ci < in_.channels; ++ci) {
        for (int ky = 0; ky < kernel_; ++ky) {
          for (int kx = 0; kx < kernel_; ++kx) {
            const Eigen::Index idx = (ci * kernel_ + ky) * kernel_ + kx;
            const S* src = drows.col(idx).data() + s * pixels;
            for (int oy = 0; oy < out.height; ++oy) {
              S* line = dst + (ci * in_.height + oy + ky) * in_.width + kx;
              for (int ox = 0; ox < out.width; ++ox) line[ox] += *src++;
            }
          }
        }
      }
    }
    return dx;
  }

  Shape in_;
  int out_channels_;
  int kernel_;
  Param<S> weight_;
  Param<S> bias_;
};

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
template <class S>
class MaxPool2 {
 public:
  explicit MaxPool2(Shape in) : in_(in) {
    if (in.height < 2 || in.width < 2) throw std::invalid_argument("MaxPool2: input too small");
  }

  Shape output_shape() const { return {in_.channels, in_.height / 2, in_.width / 2}; }

  Mat<S> forward(const Mat<S>& x, const ForwardMode&, LayerCache<S>* cache) const {
    const Shape out = output_shape();
    Mat<S> y(out.size(), x.cols());
    std::vector<int> argmax(static_cast<std::size_t>(out.size()) * x.cols(), 0);
    std::size_t k = 0;
    for (Eigen::Index s = 0; s < x.cols(); ++s) {
      for (int c = 0; c < out.channels; ++c) {
        for (int oy = 0; oy < out.height; ++oy) {
          for (int ox = 0; ox < out.width; ++ox, ++k) {
            int best = (c * in_.height + 2 * oy) * in_.width + 2 * ox;
            for (int dy = 0; dy < 2; ++dy) {
              for (int dx = 0; dx < 2; ++dx) {
                const int idx = (c * in_.height + 2 * oy + dy) * in_.width + 2 * ox + dx;
                if (x(idx, s) > x(best, s)) best = idx;
              }
            }
            argmax[k] = best;
            y((c * out.height + oy) * out.width + ox, s) = x(best, s);
          }
        }
      }
    }
    if (cache) cache->indices = std::move(argmax);
    return y;
  }

  Mat<S> backward(const Mat<S>& g, const LayerCache<S>& cache, bool = true) {
    const int out_size = output_shape().size();
    Mat<S> dx = Mat<S>::Zero(in_.size(), g.cols());
    for (Eigen::Index s = 0; s < g.cols(); ++s) {
      for (int o = 0; o < out_size; ++o) {
        dx(cache.indices[static_cast<std::size_t>(s) * out_size + o], s) += g(o, s);
      }
    }
    return dx;
  }

  std::vector<Param<S>*> params() { return {}; }
  LayerSpec spec() const { return LayerSpec::pool(); }

 private:
  Shape in_;
};

template <class S>
class Relu {
 public:
  explicit Relu(Shape in) : in_(in) {}
  Shape output_shape() const { return in_; }

  Mat<S> forward(const Mat<S>& x, const ForwardMode&, LayerCache<S>* cache) const {
    Mat<S> y = x.cwiseMax(S(0));
    if (cache) cache->values = y;
    return y;
  }
  Mat<S> backward(const Mat<S>& g, const LayerCache<S>& cache, bool = true) {
    return (cache.values.array() > S(0)).select(g, S(0));
  }

  std::vector<Param<S>*> params() { return {}; }
  LayerSpec spec() const { return LayerSpec::relu(); }

 private:
  Shape in_;
};

template <class S>
class Tanh {
 public:
  explicit Tanh(Shape in) : in_(in) {}
  Shape output_shape() const { return in_; }

  Mat<S> forward(const Mat<S>& x, const ForwardMode&, LayerCache<S>* cache) const {
    Mat<S> y = x.array().tanh();
    if (cache) cache->values = y;
    return y;
  }
  Mat<S> backward(const Mat<S>& g, const LayerCache<S>& cache, bool = true) {
    return (g.array() * (S(1) - cache.values.array().square())).matrix();
  }

  std::vector<Param<S>*> params() { return {}; }
  LayerSpec spec() const { return LayerSpec::tanh(); }

 private:
  Shape in_;
};

/// Inverted dropout: active units are scaled by 1/(1-rate) so inference needs
/// no rescaling.
template <class S>
class Dropout {
 public:
  Dropout(Shape in, double rate) : in_(in), rate_(rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("Dropout: rate must be in [0,1)");
  }
  Shape output_shape() const { return in_; }
  double rate() const { return rate_; }

  Mat<S> forward(const Mat<S>& x, const ForwardMode& mode, LayerCache<S>* cache) const {
    if (!mode.dropout_active || rate_ == 0.0) {
      if (cache) cache->values.resize(0, 0);
      return x;
    }
    if (mode.rng == nullptr) throw std::invalid_argument("Dropout: active dropout needs an rng");
    std::bernoulli_distribution keep(1.0 - rate_);
    const S scale = static_cast<S>(1.0 / (1.0 - rate_));
    Mat<S> mask(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      for (Eigen::Index i = 0; i < x.rows(); ++i) mask(i, j) = keep(*mode.rng) ? scale : S(0);
    }
    Mat<S> y = x.cwiseProduct(mask);
    if (cache) cache->values = std::move(mask);
    return y;
  }
  Mat<S> backward(const Mat<S>& g, const LayerCache<S>& cache, bool = true) {
    return cache.values.size() == 0 ? g : g.cwiseProduct(cache.values);
  }

  std::vector<Param<S>*> params() { return {}; }
  LayerSpec spec() const { return LayerSpec::dropout(rate_); }

 private:
  Shape in_;
  double rate_;
};

template <class S>
class Dense {
 public:
  Dense(Shape in, int units) : in_(in), units_(units) {
    if (units <= 0) throw std::invalid_argument("Dense: units must be positive");
    weight_ = {"dense.weight", Mat<S>::Zero(units, in.size()), Mat<S>::Zero(units, in.size())};
    bias_ = {"dense.bias", Mat<S>::Zero(units, 1), Mat<S>::Zero(units, 1)};
  }
  Shape output_shape() const { return {units_, 1, 1}; }

  void init(double scale, Rng& rng) {
    detail::he_init(weight_.value, in_.size(), scale, rng);
    bias_.value.setZero();
  }

  Mat<S> forward(const Mat<S>& x, const ForwardMode&, LayerCache<S>* cache) const {
    if (cache) cache->values = x;
    Mat<S> y = weight_.value * x;
    y.colwise() += bias_.value.col(0);
    return y;
  }
  Mat<S> backward(const Mat<S>& g, const LayerCache<S>& cache, bool need_input_grad = true) {
    weight_.grad.noalias() += g * cache.values.transpose();
    bias_.grad.noalias() += g.rowwise().sum();
    if (!need_input_grad) return {};
    return weight_.value.transpose() * g;
  }

  std::vector<Param<S>*> params() { return {&weight_, &bias_}; }
  LayerSpec spec() const { return LayerSpec::dense(units_); }

 private:
  Shape in_;
  int units_;
  Param<S> weight_;
  Param<S> bias_;
};

template <class S>
using AnyLayer = std::variant<Conv2d<S>, MaxPool2<S>, Relu<S>, Tanh<S>, Dropout<S>, Dense<S>>;

/// Feed-forward stack of layers built from an architecture descriptor.
template <class S>
class Network {
 public:
  using Scalar = S;
  using Tape = std::vector<LayerCache<S>>;

  Network() = default;

  Network(Shape input, std::vector<LayerSpec> specs, std::uint64_t seed)
      : input_(input), specs_(std::move(specs)) {
    Rng rng(seed);
    Shape shape = input;
    for (const LayerSpec& spec : specs_) {
      layers_.push_back(make_layer(spec, shape));
      std::visit(
          [&](auto& layer) {
            using L = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<L, Conv2d<S>> || std::is_same_v<L, Dense<S>>) {
              layer.init(spec.init_scale, rng);
            }
            shape = layer.output_shape();
          },
          layers_.back());
    }
    output_ = shape;
  }

  const Shape& input_shape() const { return input_; }
  const Shape& output_shape() const { return output_; }
  const std::vector<LayerSpec>& specs() const { return specs_; }

  /// Evaluates the stack. Pass a tape to record what backward() needs.
  Mat<S> forward(const Mat<S>& x, const ForwardMode& mode = {}, Tape* tape = nullptr) const {
    if (x.rows() != input_.size()) {
      throw std::invalid_argument("Network::forward: input has " + std::to_string(x.rows()) +
                                  " features, expected " + std::to_string(input_.size()));
    }
    if (tape) tape->resize(layers_.size());
    Mat<S> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      LayerCache<S>* cache = tape ? &(*tape)[i] : nullptr;
      h = std::visit([&](const auto& l) { return l.forward(h, mode, cache); }, layers_[i]);
    }
    return h;
  }

  /// Accumulates parameter gradients for the forward pass recorded on `tape`
  /// and returns the gradient with respect to the input.
  /// With `need_input_grad` false the returned matrix may be empty; the first
  /// layer then skips its input-gradient product.
  Mat<S> backward(const Mat<S>& grad_output, const Tape& tape, bool need_input_grad = true) {
    if (tape.size() != layers_.size()) throw std::logic_error("Network::backward: tape mismatch");
    Mat<S> g = grad_output;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const bool propagate = need_input_grad || i > 0;
      g = std::visit([&](auto& l) { return l.backward(g, tape[i], propagate); }, layers_[i]);
    }
    return g;
  }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    for (auto& layer : layers_) {
      for (Param<S>* p : std::visit([](auto& l) { return l.params(); }, layer)) out.push_back(p);
    }
    return out;
  }

  std::vector<const Param<S>*> params() const {
    auto* self = const_cast<Network*>(this);
    std::vector<const Param<S>*> out;
    for (Param<S>* p : self->params()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Param<S>* p : params()) p->zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Param<S>* p : params()) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  bool has_dropout() const {
    return std::any_of(specs_.begin(), specs_.end(),
                       [](const LayerSpec& s) { return s.kind == LayerKind::kDropout; });
  }

  /// Same architecture and parameter values in another scalar type.
  template <class T>
  Network<T> cast() const {
    Network<T> out(input_, specs_, 0);
    auto src = params();
    auto dst = out.params();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i]->value = src[i]->value.template cast<T>();
      dst[i]->zero_grad();
    }
    return out;
  }

 private:
  static AnyLayer<S> make_layer(const LayerSpec& spec, Shape in) {
    switch (spec.kind) {
      case LayerKind::kConv2d: return Conv2d<S>(in, spec.units, spec.kernel);
      case LayerKind::kMaxPool2: return MaxPool2<S>(in);
      case LayerKind::kRelu: return Relu<S>(in);
      case LayerKind::kTanh: return Tanh<S>(in);
      case LayerKind::kDropout: return Dropout<S>(in, spec.rate);
      case LayerKind::kDense: return Dense<S>(in, spec.units);
    }
    throw std::invalid_argument("Network: unknown layer kind");
  }

  Shape input_;
  Shape output_;
  std::vector<LayerSpec> specs_;
  std::vector<AnyLayer<S>> layers_;
};

/// Adam with bias correction; state is laid out to match Network::params().
template <class S>
class Adam {
 public:
  explicit Adam(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Param<S>*>& params) {
    if (m_.empty()) {
      for (const Param<S>* p : params) {
        m_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      }
    }
    if (m_.size() != params.size()) throw std::logic_error("Adam: parameter set changed");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const S step = static_cast<S>(lr_ * std::sqrt(c2) / c1);
    const S b1 = static_cast<S>(beta1_);
    const S b2 = static_cast<S>(beta2_);
    const S eps = static_cast<S>(eps_ * std::sqrt(c2));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (S(1) - b1) * params[i]->grad;
      v_[i] = b2 * v_[i] + (S(1) - b2) * params[i]->grad.cwiseProduct(params[i]->grad);
      params[i]->value.array() -= step * m_[i].array() / (v_[i].array().sqrt() + eps);
    }
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  std::int64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Mat<S>> m_, v_;
};

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
template <class S>
double clip_grad_norm(const std::vector<Param<S>*>& params, double max_norm) {
  double sq = 0.0;
  for (const Param<S>* p : params) sq += static_cast<double>(p->grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const S f = static_cast<S>(max_norm / (norm + 1e-12));
    for (Param<S>* p : params) p->grad *= f;
  }
  return norm;
}

/// Column-wise softmax computed in double precision.
template <class S>
Eigen::MatrixXd softmax(const Mat<S>& logits) {
  Eigen::MatrixXd z = logits.template cast<double>();
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double mx = z.col(j).maxCoeff();
    z.col(j) = (z.col(j).array() - mx).exp();
    z.col(j) /= z.col(j).sum();
  }
  return z;
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
template <class S>
double softmax_cross_entropy(const Mat<S>& logits, const std::vector<int>& labels, Mat<S>* grad) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.cols()) {
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  }
  const Eigen::MatrixXd p = softmax(logits);
  const double n = static_cast<double>(logits.cols());
  double loss = 0.0;
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    if (y < 0 || y >= p.rows()) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    loss -= std::log(std::max(p(y, j), 1e-300));
  }
  if (grad != nullptr) {
    Eigen::MatrixXd g = p;
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(labels[static_cast<std::size_t>(j)], j) -= 1.0;
    *grad = (g / n).template cast<S>();
  }
  return loss / n;
}

}  // namespace rest::nn
