#pragma once

// The segmentation U-Net: three 2x2 poolings down, three nearest-neighbour
// upsamplings back up, two 3x3 conv + batchnorm + activation units per block,
// channel-concatenated skip connections and a final 3x3 conv to the output
// channels.
//
// Channel schedule for base b: b, 2b, 4b, 4b (bottleneck) down; the up path
// takes 8b -> 4b, 6b -> 2b, 3b -> b after concatenation.

#include <array>
#include <cstdint>
#include <iomanip>
#include <locale>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fxq/autograd.hpp"
#include "fxq/errors.hpp"
#include "fxq/ops.hpp"
#include "fxq/quant_layers.hpp"
#include "fxq/tensor.hpp"

namespace fxq {

struct UNetSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t base_channels = 64;
  std::size_t height = 200;
  std::size_t width = 200;

  void validate() const {
    if (in_channels == 0 || out_channels == 0 || base_channels == 0) {
      throw ContractError("UNetSpec channel counts must be positive");
    }
    if (height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0) {
      throw ShapeError("U-Net input " + std::to_string(height) + "x" + std::to_string(width) +
                       " must be divisible by 8");
    }
  }
};

inline constexpr std::size_t kNumConvs = 15;      // 14 block convs + output conv
inline constexpr std::size_t kNumBatchNorms = 14;
inline constexpr std::size_t kKernel = 3;

struct ConvDescriptor {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  bool full_precision = false;  // weights stay unquantized
  bool has_batchnorm = true;

  std::size_t weight_count() const { return out_channels * in_channels * kKernel * kKernel; }
  std::size_t param_count() const { return weight_count() + out_channels; }
};

enum class LayerKind { conv, batchnorm, activation, block_end, up_end, maxpool, upsample, dropout };

struct LayerRecord {
  std::string name;  // e.g. "Conv2dQuant-33"
  LayerKind kind;
  Shape output_shape;  // C,H,W
  std::size_t params = 0;
  int conv_index = -1;  // conv / batchnorm rows
  bool full_precision = true;
};

/// Layer table plus conv wiring of one U-Net instance.
struct ModelGraph {
  UNetSpec spec;
  QuantConfig quant;
  std::array<ConvDescriptor, kNumConvs> convs{};
  std::vector<LayerRecord> layers;
};

namespace detail {

inline bool conv_is_full_precision(std::size_t index, const QuantConfig& qc) {
  if (qc.method == QuantMethod::none) return true;
  if (index == 0 && (qc.first_layer_full_precision || qc.first_block_full_precision)) return true;
  if (index == 1 && qc.first_block_full_precision) return true;
  if (index == kNumConvs - 1 && qc.last_layer_full_precision) return true;
  return false;
}

inline std::string activation_layer_name(QuantMethod m) {
  switch (m) {
    case QuantMethod::fixed: return "QuantLayer";
    case QuantMethod::ternary: return "TernaryTanh";
    default: return "ReLU";
  }
}

}  // namespace detail

/// Lays out the network and its per-layer table.
inline ModelGraph build_unet(const UNetSpec& spec, const QuantConfig& qc) {
  spec.validate();
  qc.validate();
  ModelGraph g{spec, qc, {}, {}};
  const std::size_t b = spec.base_channels;
  const std::array<std::pair<std::size_t, std::size_t>, kNumConvs> io{{
      {spec.in_channels, b}, {b, b},              // down 1
      {b, 2 * b}, {2 * b, 2 * b},                 // down 2
      {2 * b, 4 * b}, {4 * b, 4 * b},             // down 3
      {4 * b, 4 * b}, {4 * b, 4 * b},             // bottleneck
      {8 * b, 4 * b}, {4 * b, 4 * b},             // up 1
      {6 * b, 2 * b}, {2 * b, 2 * b},             // up 2
      {3 * b, b}, {b, b},                         // up 3
      {b, spec.out_channels},                     // output
  }};
  for (std::size_t i = 0; i < kNumConvs; ++i) {
    g.convs[i] = {io[i].first, io[i].second, detail::conv_is_full_precision(i, qc), i + 1 < kNumConvs};
  }

  std::size_t h = spec.height, w = spec.width;
  auto add = [&](std::string type, LayerKind kind, std::size_t channels, std::size_t params = 0, int conv = -1,
                 bool fp = true) {
    g.layers.push_back({type + "-" + std::to_string(g.layers.size() + 1), kind, {channels, h, w}, params, conv, fp});
  };
  const std::string act_name = detail::activation_layer_name(qc.method);
  auto unit = [&](std::size_t ci) {
    const auto& c = g.convs[ci];
    add(c.full_precision ? "Conv2d" : "Conv2dQuant", LayerKind::conv, c.out_channels, c.param_count(),
        static_cast<int>(ci), c.full_precision);
    add("BatchNorm2d", LayerKind::batchnorm, c.out_channels, 2 * c.out_channels, static_cast<int>(ci),
        c.full_precision);
    add(act_name, LayerKind::activation, c.out_channels);
  };
  auto block = [&](std::size_t ci) {
    unit(ci);
    unit(ci + 1);
    add("DownConv", LayerKind::block_end, g.convs[ci + 1].out_channels);
  };

  for (std::size_t d = 0; d < 4; ++d) {
    block(2 * d);
    if (qc.dropout_p > 0.0) add("Dropout", LayerKind::dropout, g.convs[2 * d + 1].out_channels);
    if (d < 3) {
      h /= 2;
      w /= 2;
      add("MaxPool2d", LayerKind::maxpool, g.convs[2 * d + 1].out_channels);
    }
  }
  for (std::size_t u = 0; u < 3; ++u) {
    const std::size_t ci = 8 + 2 * u;
    h *= 2;
    w *= 2;
    add("Upsample", LayerKind::upsample, g.convs[ci - 1].out_channels);
    block(ci);
    add("UpConv", LayerKind::up_end, g.convs[ci + 1].out_channels);
  }
  const auto& last = g.convs[kNumConvs - 1];
  add(last.full_precision ? "Conv2d" : "Conv2dQuant", LayerKind::conv, last.out_channels, last.param_count(),
      static_cast<int>(kNumConvs - 1), last.full_precision);
  return g;
}

struct ParameterTable {
  std::vector<LayerRecord> rows;
  std::size_t total = 0;
};

inline ParameterTable count_parameters(const ModelGraph& g) {
  ParameterTable t{g.layers, 0};
  for (const auto& r : g.layers) t.total += r.params;
  return t;
}

/// 4837249 -> "4,837,249".
inline std::string with_thousands(std::size_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

inline std::string format_parameter_table(const ParameterTable& t) {
  std::ostringstream os;
  const std::string rule(64, '-');
  os << rule << "\n"
     << std::setw(26) << "Layer (type)" << std::setw(21) << "Output Shape" << std::setw(15) << "Param #" << "\n"
     << std::string(64, '=') << "\n";
  for (const auto& r : t.rows) {
    std::ostringstream shape;
    shape << "[" << r.output_shape[0] << ", " << r.output_shape[1] << ", " << r.output_shape[2] << "]";
    os << std::setw(26) << r.name << std::setw(21) << shape.str() << std::setw(15) << with_thousands(r.params)
       << "\n";
  }
  os << std::string(64, '=') << "\n"
     << "Total params: " << with_thousands(t.total) << "\n"
     << "Trainable params: " << with_thousands(t.total) << "\n"
     << "Non-trainable params: 0\n"
     << rule << "\n";
  return os.str();
}

// --- size accounting --------------------------------------------------------

inline int bits_per_quantized_param(const QuantConfig& qc) {
  switch (qc.method) {
    case QuantMethod::fixed: return qc.weight_format.storage_bits();
    case QuantMethod::binary: return 1;
    case QuantMethod::ternary: return 2;
    default: return 32;
  }
}

struct SizeReport {
  std::size_t params = 0;
  int bits_per_param = 32;
  // Every parameter at the quantized width, exempt layers included.
  std::uint64_t table_bits = 0;
  // Exempt first/last layers kept at 32 bits.
  std::uint64_t exempt_bits = 0;

  double table_bytes() const { return static_cast<double>(table_bits) / 8.0; }
  double table_mib() const { return table_bytes() / 1048576.0; }
  double exempt_bytes() const { return static_cast<double>(exempt_bits) / 8.0; }
  double exempt_mib() const { return exempt_bytes() / 1048576.0; }
};

/// Parameter storage for the given quantization. Batchnorm parameters are
/// charged at the width of the conv they fold into.
inline SizeReport model_size(const ModelGraph& g, const QuantConfig& qc) {
  SizeReport r;
  r.bits_per_param = bits_per_quantized_param(qc);
  for (const auto& row : g.layers) {
    if (row.params == 0) continue;
    r.params += row.params;
    r.table_bits += static_cast<std::uint64_t>(row.params) * static_cast<std::uint64_t>(r.bits_per_param);
    const bool exempt = qc.method == QuantMethod::none || detail::conv_is_full_precision(
                                                              static_cast<std::size_t>(row.conv_index), qc);
    r.exempt_bits += static_cast<std::uint64_t>(row.params) * static_cast<std::uint64_t>(exempt ? 32 : r.bits_per_param);
  }
  return r;
}

// --- parameters and forward -----------------------------------------------

template <typename T>
struct ConvParams {
  Var<T> weight;
  Var<T> bias;
};

template <typename T>
struct BatchNormParams {
  Var<T> gamma;
  Var<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// Output shapes recorded layer by layer during a forward pass.
using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

/// Trainable U-Net: full-precision shadow weights, quantized on every forward.
template <typename T>
class UNet {
 public:
  explicit UNet(ModelGraph graph, BatchNormOptions bn = {}) : graph_(std::move(graph)), bn_(bn) {
    for (std::size_t i = 0; i < kNumConvs; ++i) {
      const auto& d = graph_.convs[i];
      convs_[i].weight = Var<T>::parameter(Tensor<T>({d.out_channels, d.in_channels, kKernel, kKernel}));
      convs_[i].bias = Var<T>::parameter(Tensor<T>({d.out_channels}));
      if (d.has_batchnorm) {
        bns_[i].gamma = Var<T>::parameter(Tensor<T>({d.out_channels}, T(1)));
        bns_[i].beta = Var<T>::parameter(Tensor<T>({d.out_channels}));
        bns_[i].running_mean = Tensor<T>({d.out_channels});
        bns_[i].running_var = Tensor<T>({d.out_channels}, T(1));
      }
    }
  }

  const ModelGraph& graph() const noexcept { return graph_; }
  const UNetSpec& spec() const noexcept { return graph_.spec; }
  const QuantConfig& quant() const noexcept { return graph_.quant; }
  const BatchNormOptions& batchnorm_options() const noexcept { return bn_; }
  void set_batchnorm_options(BatchNormOptions bn) { bn_ = bn; }

  ConvParams<T>& conv(std::size_t i) { return convs_.at(i); }
  const ConvParams<T>& conv(std::size_t i) const { return convs_.at(i); }
  BatchNormParams<T>& bn(std::size_t i) { return bns_.at(i); }
  const BatchNormParams<T>& bn(std::size_t i) const { return bns_.at(i); }

  /// Trainable tensors in a fixed order: conv weight, conv bias, then gamma, beta.
  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> p;
    for (std::size_t i = 0; i < kNumConvs; ++i) {
      p.push_back(convs_[i].weight);
      p.push_back(convs_[i].bias);
      if (graph_.convs[i].has_batchnorm) {
        p.push_back(bns_[i].gamma);
        p.push_back(bns_[i].beta);
      }
    }
    return p;
  }

  void zero_grad() {
    for (auto& v : parameters()) v.zero_grad();
  }

  /// Weights as seen by the forward pass (quantized unless exempt).
  Var<T> effective_weight(std::size_t i) const {
    const auto& w = convs_[i].weight;
    if (graph_.convs[i].full_precision) return w;
    switch (graph_.quant.method) {
      case QuantMethod::fixed: return quant_weights(w, graph_.quant.weight_format);
      case QuantMethod::binary: return binarize(w);
      case QuantMethod::ternary: return ternarize(w);
      default: return w;
    }
  }

  /// Train mode uses batch statistics (and dropout when configured); eval
  /// mode runs the unfolded network on the running statistics.
  template <typename Rng = std::mt19937_64>
  Var<T> forward(const Tensor<T>& batch, Mode mode, Rng* dropout_rng = nullptr, ShapeTrace* trace = nullptr) {
    check_input(batch);
    BatchNormOptions opt = bn_;
    opt.mode = mode;
    const bool train = mode == Mode::train;
    auto record = [&](const Var<T>& v) {
      if (trace) trace->emplace_back(graph_.layers[trace->size()].name, Shape(v.shape().begin() + 1, v.shape().end()));
    };
    auto unit = [&](const Var<T>& in, std::size_t ci) {
      Var<T> y = conv2d(in, effective_weight(ci), convs_[ci].bias, kKernel / 2);
      record(y);
      y = batchnorm(y, bns_[ci].gamma, bns_[ci].beta, bns_[ci].running_mean, bns_[ci].running_var, opt);
      record(y);
      y = activate(y);
      record(y);
      return y;
    };
    auto block = [&](const Var<T>& in, std::size_t ci) {
      Var<T> y = unit(unit(in, ci), ci + 1);
      record(y);
      return y;
    };
    auto drop = [&](const Var<T>& v) {
      if (graph_.quant.dropout_p <= 0.0) return v;
      record(v);
      if (!train) return v;
      if (!dropout_rng) throw ContractError("dropout enabled but no random generator supplied");
      return dropout(v, graph_.quant.dropout_p, *dropout_rng, true);
    };

    std::array<Var<T>, 3> skips;
    Var<T> x = Var<T>::constant(batch);
    for (std::size_t d = 0; d < 3; ++d) {
      skips[d] = drop(block(x, 2 * d));
      x = maxpool2d(skips[d]);
      record(x);
    }
    x = drop(block(x, 6));
    for (std::size_t u = 0; u < 3; ++u) {
      x = upsample_nearest2x(x);
      record(x);
      x = block(concat_channels(skips[2 - u], x), 8 + 2 * u);
      record(x);
    }
    x = conv2d(x, effective_weight(kNumConvs - 1), convs_[kNumConvs - 1].bias, kKernel / 2);
    record(x);
    return x;
  }

 private:
  void check_input(const Tensor<T>& batch) const {
    const Shape& s = batch.shape();
    if (s.size() != 4 || s[1] != graph_.spec.in_channels || s[2] % 8 != 0 || s[3] % 8 != 0 || s[2] == 0 ||
        s[3] == 0) {
      throw ShapeError("U-Net input " + shape_string(s) + " incompatible with " +
                       std::to_string(graph_.spec.in_channels) + " input channels and 3 poolings");
    }
  }

  Var<T> activate(const Var<T>& v) const {
    switch (graph_.quant.method) {
      case QuantMethod::fixed: return quant_activation(v, graph_.quant.act_format);
      case QuantMethod::ternary: return ternary_tanh(v);
      default: return activation(v, Activation::relu);
    }
  }

  ModelGraph graph_;
  BatchNormOptions bn_;
  std::array<ConvParams<T>, kNumConvs> convs_;
  std::array<BatchNormParams<T>, kNumConvs> bns_;
};

/// Copy of `net` with the same parameters under another quantization policy.
template <typename T>
UNet<T> with_quant_config(const UNet<T>& net, const QuantConfig& qc) {
  UNet<T> out(build_unet(net.spec(), qc), net.batchnorm_options());
  for (std::size_t i = 0; i < kNumConvs; ++i) {
    out.conv(i).weight.mutable_value() = net.conv(i).weight.value();
    out.conv(i).bias.mutable_value() = net.conv(i).bias.value();
    if (!net.graph().convs[i].has_batchnorm) continue;
    out.bn(i).gamma.mutable_value() = net.bn(i).gamma.value();
    out.bn(i).beta.mutable_value() = net.bn(i).beta.value();
    out.bn(i).running_mean = net.bn(i).running_mean;
    out.bn(i).running_var = net.bn(i).running_var;
  }
  return out;
}

// --- inference with batchnorm folded away ----------------------------------

enum class FoldOrder : std::uint8_t {
  // Fold batchnorm into the shadow weights, then quantize the folded weights.
  fold_then_quantize = 0,
  // Quantize the shadow weights, then apply the folded batchnorm as a
  // per-output-channel scale and bias.
  quantize_then_scale = 1,
};

template <typename T>
struct InferenceLayer {
  Tensor<T> weight;         // weights as multiplied by the conv
  Tensor<T> bias;           // folded bias
  Tensor<T> channel_scale;  // empty unless quantize_then_scale
  T ternary_scale = 0;      // ternary layers: the magnitude s of weight
  bool quantized = false;
};

/// Batchnorm-free network used for evaluation and deployment.
template <typename T>
struct InferenceModel {
  ModelGraph graph;
  FoldOrder order = FoldOrder::fold_then_quantize;
  std::array<InferenceLayer<T>, kNumConvs> layers;

  Tensor<T> forward(const Tensor<T>& batch) const {
    auto unit = [&](const Var<T>& in, std::size_t ci) {
      const auto& l = layers[ci];
      Var<T> y = conv2d(in, Var<T>::constant(l.weight), Var<T>(), kKernel / 2);
      Tensor<T>& v = y.mutable_value();
      const std::size_t c = l.bias.size(), plane = v.dim(2) * v.dim(3);
      for (std::size_t n = 0; n < v.dim(0); ++n) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          T* p = v.raw() + (n * c + ch) * plane;
          const T s = l.channel_scale.empty() ? T(1) : l.channel_scale[ch];
          for (std::size_t j = 0; j < plane; ++j) p[j] = p[j] * s + l.bias[ch];
        }
      }
      return ci + 1 < kNumConvs ? activate(y) : y;
    };
    auto block = [&](const Var<T>& in, std::size_t ci) { return unit(unit(in, ci), ci + 1); };
    std::array<Var<T>, 3> skips;
    Var<T> x = Var<T>::constant(batch);
    for (std::size_t d = 0; d < 3; ++d) {
      skips[d] = block(x, 2 * d);
      x = maxpool2d(skips[d]);
    }
    x = block(x, 6);
    for (std::size_t u = 0; u < 3; ++u) x = block(concat_channels(skips[2 - u], upsample_nearest2x(x)), 8 + 2 * u);
    return unit(x, kNumConvs - 1).value();
  }

 private:
  Var<T> activate(const Var<T>& v) const {
    switch (graph.quant.method) {
      case QuantMethod::fixed: return quant_activation(v, graph.quant.act_format);
      case QuantMethod::ternary: return ternary_tanh(v);
      default: return activation(v, Activation::relu);
    }
  }
};

namespace detail {

template <typename T>
void quantize_layer(InferenceLayer<T>& l, const QuantConfig& qc) {
  l.quantized = true;
  switch (qc.method) {
    case QuantMethod::fixed: l.weight = fixed_point_tensor(l.weight, qc.weight_format); break;
    case QuantMethod::binary: l.weight = binarize_tensor(l.weight); break;
    case QuantMethod::ternary: {
      auto t = ternarize_tensor(l.weight);
      l.weight = std::move(t.values);
      l.ternary_scale = t.scale;
      break;
    }
    default: l.quantized = false; break;
  }
}

}  // namespace detail

template <typename T>
InferenceModel<T> fold_for_inference(const UNet<T>& net, FoldOrder order) {
  InferenceModel<T> m{net.graph(), order, {}};
  const double eps = net.batchnorm_options().eps;
  for (std::size_t i = 0; i < kNumConvs; ++i) {
    const auto& d = net.graph().convs[i];
    auto& l = m.layers[i];
    const auto& w = net.conv(i).weight.value();
    const auto& b = net.conv(i).bias.value();
    const bool quantize = !d.full_precision && net.quant().method != QuantMethod::none;
    if (!d.has_batchnorm) {
      l.weight = w;
      l.bias = b;
      if (quantize) detail::quantize_layer(l, net.quant());
      continue;
    }
    const auto& bn = net.bn(i);
    if (order == FoldOrder::fold_then_quantize || !quantize) {
      auto f = fold_batchnorm(w, b, bn.gamma.value(), bn.beta.value(), bn.running_mean, bn.running_var, eps);
      l.weight = std::move(f.weight);
      l.bias = std::move(f.bias);
      if (quantize) detail::quantize_layer(l, net.quant());
    } else {
      l.weight = w;
      detail::quantize_layer(l, net.quant());
      // Scale of one and zero shift fold to the per-channel affine alone.
      Tensor<T> ones(b.shape(), T(1));
      auto f = fold_batchnorm(ones.reshaped({b.size(), 1}), b, bn.gamma.value(), bn.beta.value(), bn.running_mean,
                              bn.running_var, eps);
      l.channel_scale = f.weight.reshaped({b.size()});
      l.bias = std::move(f.bias);
    }
  }
  return m;
}

}  // namespace fxq
