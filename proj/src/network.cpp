#include "psx/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

namespace psx {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ConvGeometry {
  std::size_t in_h, in_w, in_c;
  std::size_t out_h, out_w, filters;
  std::size_t kh, kw, stride;
  std::ptrdiff_t pad_top, pad_left;

  std::size_t patch() const { return kh * kw * in_c; }
  std::size_t positions() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const LayerSpec& layer, const Shape& in, const Shape& out) {
  ConvGeometry g{in[0], in[1], in[2], out[0], out[1], out[2], layer.kernel_h, layer.kernel_w,
                 layer.stride, 0, 0};
  if (layer.padding == Padding::same) {
    const auto pad = [](std::size_t o, std::size_t s, std::size_t k, std::size_t i) {
      const auto needed = static_cast<std::ptrdiff_t>((o - 1) * s + k) - static_cast<std::ptrdiff_t>(i);
      return std::max<std::ptrdiff_t>(needed, 0);
    };
    g.pad_top = pad(g.out_h, g.stride, g.kh, g.in_h) / 2;
    g.pad_left = pad(g.out_w, g.stride, g.kw, g.in_w) / 2;
  }
  return g;
}

// Unrolls receptive fields into rows ordered (ky, kx, channel), matching the
// kernel's (kh, kw, in, out) layout.
template <typename T>
void im2col(const ConvGeometry& g, const T* in, T* cols) {
  const std::size_t patch = g.patch();
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      T* row = cols + (oy * g.out_w + ox) * patch;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - g.pad_top;
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - g.pad_left;
          T* dst = row + (ky * g.kw + kx) * g.in_c;
          if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
              ix >= static_cast<std::ptrdiff_t>(g.in_w)) {
            std::fill(dst, dst + g.in_c, T{0});
          } else {
            const T* src = in + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * g.in_c;
            std::copy(src, src + g.in_c, dst);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, T* in_grad) {
  const std::size_t patch = g.patch();
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      const T* row = cols + (oy * g.out_w + ox) * patch;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - g.pad_top;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - g.pad_left;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
          const T* src = row + (ky * g.kw + kx) * g.in_c;
          T* dst = in_grad + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * g.in_c;
          for (std::size_t c = 0; c < g.in_c; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

template <typename T>
void accumulate(ParameterGradients<T>& grads, const std::string& name, const BasicTensor<T>& delta) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads.emplace(name, delta);
    return;
  }
  auto dst = it->second.values();
  const auto src = delta.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
const BasicTensor<T>& GradientTape<T>::layer_output(std::size_t index) const {
  if (index + 1 == records_.size()) return output_;
  return records_.at(index + 1).input;
}

template <typename T>
Network<T>::Network(const ModelBundle& bundle)
    : manifest_(bundle.manifest()),
      output_shapes_(bundle.layer_output_shapes()),
      feature_index_(bundle.feature_index()) {
  for (const auto& layer : manifest_.layers) {
    std::vector<std::size_t> slots;
    for (const auto& w : layer.weights) {
      slots.push_back(params_.size());
      param_names_.push_back(w.name);
      params_.push_back(bundle.weight(w.name).template cast<T>());
      trainable_.push_back(w.trainable);
    }
    layer_params_.push_back(std::move(slots));
  }
}

template <typename T>
std::size_t Network<T>::layer_index(std::string_view name) const {
  const auto index = find_layer(manifest_, name);
  if (!index) fail(ErrorCode::unknown_layer, "unknown layer '" + std::string(name) + "'");
  return *index;
}

template <typename T>
std::size_t Network<T>::param_slot(std::string_view name) const {
  for (std::size_t i = 0; i < param_names_.size(); ++i) {
    if (param_names_[i] == name) return i;
  }
  fail(ErrorCode::unknown_weight, "unknown weight '" + std::string(name) + "'");
}

template <typename T>
const BasicTensor<T>& Network<T>::parameter(std::string_view name) const {
  return params_[param_slot(name)];
}

template <typename T>
BasicTensor<T>& Network<T>::parameter(std::string_view name) {
  return params_[param_slot(name)];
}

template <typename T>
bool Network<T>::parameter_trainable(std::string_view name) const {
  return trainable_[param_slot(name)];
}

template <typename T>
ModelBundle Network<T>::to_bundle() const {
  ModelBundle::WeightStore weights;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    weights.emplace(param_names_[i], params_[i].template cast<float>());
  }
  return ModelBundle(manifest_, std::move(weights));
}

template <typename T>
void Network<T>::check_input(const BasicTensor<T>& input) const {
  if (input.shape() != manifest_.input_shape) {
    fail(ErrorCode::shape_mismatch, "input shape " + shape_string(input.shape()) + " does not match model input " +
                                        shape_string(manifest_.input_shape));
  }
}

template <typename T>
std::size_t Network<T>::resolve_end(std::optional<std::size_t> end) const {
  const auto e = end.value_or(layer_count());
  if (e > layer_count()) {
    fail(ErrorCode::unknown_layer, "layer range end " + std::to_string(e) + " exceeds layer count " +
                                       std::to_string(layer_count()));
  }
  return e;
}

template <typename T>
BasicTensor<T> Network<T>::apply(std::size_t index, const BasicTensor<T>& input,
                                 typename GradientTape<T>::Record* record, Rng* dropout_rng) const {
  const LayerSpec& layer = manifest_.layers[index];
  const Shape& out_shape = output_shapes_[index];
  const Shape& in_shape = index == 0 ? manifest_.input_shape : output_shapes_[index - 1];
  if (input.shape() != in_shape) {
    fail(ErrorCode::shape_mismatch, "layer '" + layer.name + "' expects " + shape_string(in_shape) + ", got " +
                                        shape_string(input.shape()));
  }
  const auto& slots = layer_params_[index];
  BasicTensor<T> out(out_shape);

  switch (layer.kind) {
    case LayerKind::conv2d: {
      const auto g = conv_geometry(layer, in_shape, out_shape);
      std::vector<T> cols(g.positions() * g.patch());
      im2col(g, input.data(), cols.data());
      Eigen::Map<const RowMatrix<T>> col_map(cols.data(), g.positions(), g.patch());
      Eigen::Map<const RowMatrix<T>> kernel(params_[slots[0]].data(), g.patch(), g.filters);
      Eigen::Map<const Vector<T>> bias(params_[slots[1]].data(), g.filters);
      Eigen::Map<RowMatrix<T>> result(out.data(), g.positions(), g.filters);
      result.noalias() = col_map * kernel;
      result.rowwise() += bias.transpose();
      break;
    }
    case LayerKind::maxpool2d: {
      const std::size_t w = in_shape[1], c = in_shape[2], p = layer.pool;
      if (record) record->argmax.resize(out.size());
      for (std::size_t oy = 0; oy < out_shape[0]; ++oy) {
        for (std::size_t ox = 0; ox < out_shape[1]; ++ox) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            std::size_t best = ((oy * p) * w + ox * p) * c + ch;
            for (std::size_t ky = 0; ky < p; ++ky) {
              for (std::size_t kx = 0; kx < p; ++kx) {
                const std::size_t at = ((oy * p + ky) * w + ox * p + kx) * c + ch;
                if (input[at] > input[best]) best = at;
              }
            }
            const std::size_t o = (oy * out_shape[1] + ox) * c + ch;
            out[o] = input[best];
            if (record) record->argmax[o] = static_cast<std::uint32_t>(best);
          }
        }
      }
      break;
    }
    case LayerKind::dense: {
      Eigen::Map<const Vector<T>> x(input.data(), in_shape[0]);
      Eigen::Map<const RowMatrix<T>> kernel(params_[slots[0]].data(), in_shape[0], layer.units);
      Eigen::Map<const Vector<T>> bias(params_[slots[1]].data(), layer.units);
      Eigen::Map<Vector<T>> y(out.data(), layer.units);
      y.noalias() = kernel.transpose() * x;
      y += bias;
      break;
    }
    case LayerKind::relu:
      for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
      break;
    case LayerKind::batchnorm: {
      const std::size_t c = in_shape.back();
      const auto& gamma = params_[slots[0]];
      const auto& beta = params_[slots[1]];
      const auto& mean = params_[slots[2]];
      const auto& var = params_[slots[3]];
      for (std::size_t i = 0; i < input.size(); ++i) {
        const std::size_t ch = i % c;
        const T scale = gamma[ch] / std::sqrt(var[ch] + static_cast<T>(layer.epsilon));
        out[i] = (input[i] - mean[ch]) * scale + beta[ch];
      }
      break;
    }
    case LayerKind::dropout:
      if (dropout_rng && layer.rate > 0.0) {
        const T keep_scale = static_cast<T>(1.0 / (1.0 - layer.rate));
        record->mask.resize(input.size());
        for (std::size_t i = 0; i < input.size(); ++i) {
          record->mask[i] = dropout_rng->uniform() < layer.rate ? T{0} : keep_scale;
          out[i] = input[i] * record->mask[i];
        }
      } else {
        out = input;
      }
      break;
    case LayerKind::flatten:
      out = input.reshaped(out_shape);
      break;
    case LayerKind::softmax: {
      const std::size_t c = in_shape.back();
      for (std::size_t row = 0; row < input.size() / c; ++row) {
        const T* z = input.data() + row * c;
        T* y = out.data() + row * c;
        const T peak = *std::max_element(z, z + c);
        T sum = 0;
        for (std::size_t k = 0; k < c; ++k) sum += (y[k] = std::exp(z[k] - peak));
        for (std::size_t k = 0; k < c; ++k) y[k] /= sum;
      }
      break;
    }
  }

  if (!out.all_finite()) {
    fail(ErrorCode::non_finite, "layer '" + layer.name + "' produced a non-finite value");
  }
  return out;
}

template <typename T>
BasicTensor<T> Network<T>::forward(const BasicTensor<T>& input, std::optional<std::size_t> end) const {
  check_input(input);
  const auto e = resolve_end(end);
  BasicTensor<T> x = input;
  for (std::size_t i = 0; i < e; ++i) x = apply(i, x, nullptr, nullptr);
  return x;
}

template <typename T>
BasicTensor<T> Network<T>::forward_until(const BasicTensor<T>& input, std::string_view stop_layer) const {
  return forward(input, layer_index(stop_layer) + 1);
}

template <typename T>
GradientTape<T> Network<T>::record(const BasicTensor<T>& input, std::optional<std::size_t> end,
                                   Rng* dropout_rng) const {
  check_input(input);
  const auto e = resolve_end(end);
  GradientTape<T> tape;
  tape.records_.reserve(e);
  BasicTensor<T> x = input;
  for (std::size_t i = 0; i < e; ++i) {
    auto& rec = tape.records_.emplace_back();
    rec.input = std::move(x);
    x = apply(i, rec.input, &rec, dropout_rng);
  }
  tape.output_ = e == 0 ? input : std::move(x);
  return tape;
}

template <typename T>
BasicTensor<T> Network<T>::replay(const GradientTape<T>& tape) const {
  if (tape.depth() == 0) return tape.output();
  BasicTensor<T> x = tape.input();
  for (std::size_t i = 0; i < tape.depth(); ++i) {
    const auto& rec = tape.records_[i];
    if (!rec.mask.empty()) {
      BasicTensor<T> out(x.shape());
      for (std::size_t k = 0; k < x.size(); ++k) out[k] = x[k] * rec.mask[k];
      x = std::move(out);
    } else {
      x = apply(i, x, nullptr, nullptr);
    }
  }
  return x;
}

template <typename T>
BasicTensor<T> Network<T>::backward(const GradientTape<T>& tape, const BasicTensor<T>& output_grad,
                                    std::optional<std::size_t> end, ParameterGradients<T>* weight_grads) const {
  const std::size_t e = end.value_or(tape.depth());
  if (e > tape.depth()) {
    fail(ErrorCode::invalid_argument, "backward range exceeds the recorded tape depth");
  }
  const Shape& expected = e == 0 ? manifest_.input_shape : output_shapes_[e - 1];
  if (output_grad.shape() != expected) {
    fail(ErrorCode::shape_mismatch, "output gradient shape " + shape_string(output_grad.shape()) +
                                        " does not match " + shape_string(expected));
  }
  BasicTensor<T> grad = output_grad;
  for (std::size_t idx = e; idx-- > 0;) {
    const LayerSpec& layer = manifest_.layers[idx];
    const auto& rec = tape.records_[idx];
    const BasicTensor<T>& input = rec.input;
    const Shape& in_shape = input.shape();
    const auto& slots = layer_params_[idx];
    BasicTensor<T> in_grad(in_shape);

    switch (layer.kind) {
      case LayerKind::conv2d: {
        const auto g = conv_geometry(layer, in_shape, output_shapes_[idx]);
        Eigen::Map<const RowMatrix<T>> dout(grad.data(), g.positions(), g.filters);
        Eigen::Map<const RowMatrix<T>> kernel(params_[slots[0]].data(), g.patch(), g.filters);
        std::vector<T> cols(g.positions() * g.patch());
        if (weight_grads) {
          im2col(g, input.data(), cols.data());
          Eigen::Map<const RowMatrix<T>> col_map(cols.data(), g.positions(), g.patch());
          BasicTensor<T> dk(params_[slots[0]].shape());
          Eigen::Map<RowMatrix<T>>(dk.data(), g.patch(), g.filters).noalias() = col_map.transpose() * dout;
          BasicTensor<T> db(params_[slots[1]].shape());
          Eigen::Map<Vector<T>>(db.data(), g.filters) = dout.colwise().sum().transpose();
          accumulate(*weight_grads, param_names_[slots[0]], dk);
          accumulate(*weight_grads, param_names_[slots[1]], db);
        }
        Eigen::Map<RowMatrix<T>> dcols(cols.data(), g.positions(), g.patch());
        dcols.noalias() = dout * kernel.transpose();
        col2im_add(g, cols.data(), in_grad.data());
        break;
      }
      case LayerKind::maxpool2d:
        for (std::size_t o = 0; o < grad.size(); ++o) in_grad[rec.argmax[o]] += grad[o];
        break;
      case LayerKind::dense: {
        const std::size_t n = in_shape[0];
        Eigen::Map<const Vector<T>> dy(grad.data(), layer.units);
        Eigen::Map<const RowMatrix<T>> kernel(params_[slots[0]].data(), n, layer.units);
        Eigen::Map<Vector<T>>(in_grad.data(), n).noalias() = kernel * dy;
        if (weight_grads) {
          Eigen::Map<const Vector<T>> x(input.data(), n);
          BasicTensor<T> dk(params_[slots[0]].shape());
          Eigen::Map<RowMatrix<T>>(dk.data(), n, layer.units).noalias() = x * dy.transpose();
          accumulate(*weight_grads, param_names_[slots[0]], dk);
          accumulate(*weight_grads, param_names_[slots[1]], grad);
        }
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < grad.size(); ++i) in_grad[i] = input[i] > T{0} ? grad[i] : T{0};
        break;
      case LayerKind::batchnorm: {
        const std::size_t c = in_shape.back();
        const auto& gamma = params_[slots[0]];
        const auto& mean = params_[slots[2]];
        const auto& var = params_[slots[3]];
        BasicTensor<T> dgamma(gamma.shape());
        BasicTensor<T> dbeta(gamma.shape());
        for (std::size_t i = 0; i < grad.size(); ++i) {
          const std::size_t ch = i % c;
          const T inv_std = T{1} / std::sqrt(var[ch] + static_cast<T>(layer.epsilon));
          in_grad[i] = grad[i] * gamma[ch] * inv_std;
          dgamma[ch] += grad[i] * (input[i] - mean[ch]) * inv_std;
          dbeta[ch] += grad[i];
        }
        if (weight_grads) {
          accumulate(*weight_grads, param_names_[slots[0]], dgamma);
          accumulate(*weight_grads, param_names_[slots[1]], dbeta);
        }
        break;
      }
      case LayerKind::dropout:
        if (!rec.mask.empty()) {
          for (std::size_t i = 0; i < grad.size(); ++i) in_grad[i] = grad[i] * rec.mask[i];
        } else {
          in_grad = grad;
        }
        break;
      case LayerKind::flatten:
        in_grad = grad.reshaped(in_shape);
        break;
      case LayerKind::softmax: {
        const BasicTensor<T>& y = tape.layer_output(idx);
        const std::size_t c = in_shape.back();
        for (std::size_t row = 0; row < grad.size() / c; ++row) {
          const std::size_t base = row * c;
          T dot = 0;
          for (std::size_t k = 0; k < c; ++k) dot += grad[base + k] * y[base + k];
          for (std::size_t k = 0; k < c; ++k) in_grad[base + k] = y[base + k] * (grad[base + k] - dot);
        }
        break;
      }
    }
    if (!in_grad.all_finite()) {
      fail(ErrorCode::non_finite, "non-finite gradient at layer '" + layer.name + "'");
    }
    grad = std::move(in_grad);
  }
  return grad;
}

template class GradientTape<float>;
template class GradientTape<double>;
template class Network<float>;
template class Network<double>;

template <typename T>
LossEvaluation<T> cross_entropy_from_logits(const BasicTensor<T>& logits, const CrossEntropyLoss& loss) {
  if (logits.rank() != 1) fail(ErrorCode::shape_mismatch, "cross-entropy expects a logit vector");
  if (loss.target >= logits.size()) {
    fail(ErrorCode::invalid_argument, "target class " + std::to_string(loss.target) + " out of range for " +
                                          std::to_string(logits.size()) + " classes");
  }
  const auto z = logits.values();
  const double peak = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (T v : z) sum += std::exp(static_cast<double>(v) - peak);
  const double log_norm = peak + std::log(sum);
  LossEvaluation<T> result;
  result.loss = log_norm - static_cast<double>(z[loss.target]);
  result.probabilities = BasicTensor<T>(logits.shape());
  result.logit_grad = BasicTensor<T>(logits.shape());
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double p = std::exp(static_cast<double>(z[k]) - log_norm);
    result.probabilities[k] = static_cast<T>(p);
    result.logit_grad[k] = static_cast<T>(p - (k == loss.target ? 1.0 : 0.0));
  }
  return result;
}

template LossEvaluation<float> cross_entropy_from_logits(const Tensor&, const CrossEntropyLoss&);
template LossEvaluation<double> cross_entropy_from_logits(const TensorD&, const CrossEntropyLoss&);

namespace {

template <typename T>
std::size_t softmax_layer(const Network<T>& network) {
  const auto& layers = network.manifest().layers;
  if (layers.empty() || layers.back().kind != LayerKind::softmax) {
    fail(ErrorCode::unsupported, "loss gradients need a model that ends in softmax");
  }
  return layers.size() - 1;
}

}  // namespace

template <typename T>
BasicTensor<T> input_gradient(const Network<T>& network, const BasicTensor<T>& input,
                              const CrossEntropyLoss& loss) {
  const std::size_t logits_end = softmax_layer(network);
  const auto tape = network.record(input, logits_end);
  const auto eval = cross_entropy_from_logits(tape.output(), loss);
  return network.backward(tape, eval.logit_grad, logits_end);
}

template Tensor input_gradient(const Network<float>&, const Tensor&, const CrossEntropyLoss&);
template TensorD input_gradient(const Network<double>&, const TensorD&, const CrossEntropyLoss&);

Tensor input_gradient(const ModelBundle& bundle, const Tensor& input, const CrossEntropyLoss& loss) {
  return input_gradient(Network<float>(bundle), input, loss);
}

double cross_entropy_loss(const Network<double>& network, const TensorD& input, const CrossEntropyLoss& loss) {
  const auto logits = network.forward(input, softmax_layer(network));
  return cross_entropy_from_logits(logits, loss).loss;
}

TensorD finite_difference_gradient(const std::function<double(const TensorD&)>& loss, const TensorD& input,
                                   double step) {
  if (!(step > 0.0)) fail(ErrorCode::invalid_argument, "finite-difference step must be positive");
  TensorD grad(input.shape());
  TensorD probe = input;
  for (std::size_t i = 0; i < input.size(); ++i) {
    probe[i] = input[i] + step;
    const double up = loss(probe);
    probe[i] = input[i] - step;
    const double down = loss(probe);
    probe[i] = input[i];
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

TensorD finite_difference_gradient(const Network<double>& network, const TensorD& input,
                                   const CrossEntropyLoss& loss, double step) {
  return finite_difference_gradient(
      [&](const TensorD& x) { return cross_entropy_loss(network, x, loss); }, input, step);
}

TensorD finite_difference_gradient(const ModelBundle& bundle, const TensorD& input,
                                   const CrossEntropyLoss& loss, double step) {
  return finite_difference_gradient(Network<double>(bundle), input, loss, step);
}

}  // namespace psx
