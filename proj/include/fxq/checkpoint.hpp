#pragma once

// FXQ1 model container.
//
// Layout (all integers little-endian):
//
//   "FXQ1"  u32 version  u8 kind  u8 fold_order
//   u32 in_channels  u32 out_channels  u32 base_channels  u32 height  u32 width
//   u8 method  u8 w_ibits  u8 w_fbits  u8 a_ibits  u8 a_fbits  u8 exemption_flags
//   f64 dropout_p  f64 bn_momentum  f64 bn_eps
//   u32 tensor_count, then per tensor:
//     u16 name_len, name, u8 encoding, u8 bits, u8 rank, u32 dims[rank],
//     [f32 scale when encoding == ternary], u64 payload_bytes, payload
//
// kind 0 holds the training state (shadow weights and batchnorm, all f32).
// kind 1 holds a batchnorm-folded inference model; its quantized conv weights
// are integer codes packed LSB-first at the quantizer's storage width.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "fxq/errors.hpp"
#include "fxq/fixedpoint.hpp"
#include "fxq/quant_layers.hpp"
#include "fxq/unet.hpp"

namespace fxq {

inline constexpr char kCheckpointMagic[4] = {'F', 'X', 'Q', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint8_t { training = 0, inference = 1 };

enum class TensorEncoding : std::uint8_t { f32 = 0, fixed = 1, binary = 2, ternary = 3 };

// --- bit packing -----------------------------------------------------------

/// Packs the low `bits` bits of every code, LSB-first, into a byte stream.
inline std::vector<std::uint8_t> pack_bits(const std::vector<std::uint32_t>& codes, int bits) {
  if (bits < 1 || bits > 32) throw ContractError("pack_bits width must be 1..32");
  const std::uint64_t total = static_cast<std::uint64_t>(codes.size()) * static_cast<std::uint64_t>(bits);
  std::vector<std::uint8_t> out(static_cast<std::size_t>((total + 7) / 8), 0);
  std::uint64_t pos = 0;
  for (std::uint32_t c : codes) {
    for (int j = 0; j < bits; ++j, ++pos) {
      if ((c >> j) & 1u) out[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
    }
  }
  return out;
}

inline std::vector<std::uint32_t> unpack_bits(const std::vector<std::uint8_t>& bytes, std::size_t count, int bits) {
  if (bits < 1 || bits > 32) throw ContractError("unpack_bits width must be 1..32");
  if (bytes.size() * 8 < static_cast<std::uint64_t>(count) * static_cast<std::uint64_t>(bits)) {
    throw FormatError("packed payload too short");
  }
  std::vector<std::uint32_t> out(count, 0);
  std::uint64_t pos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    for (int j = 0; j < bits; ++j, ++pos) {
      if ((bytes[pos / 8] >> (pos % 8)) & 1u) out[i] |= 1u << j;
    }
  }
  return out;
}

/// Sign-magnitude field of width storage_bits: top bit is the sign for signed formats.
inline std::uint32_t fixed_code_to_field(std::int64_t code, const QFormat& q) {
  const std::uint64_t mag = static_cast<std::uint64_t>(code < 0 ? -code : code);
  std::uint64_t field = mag;
  if (q.is_signed && code < 0) field |= std::uint64_t{1} << (q.storage_bits() - 1);
  return static_cast<std::uint32_t>(field);
}

inline std::int64_t field_to_fixed_code(std::uint32_t field, const QFormat& q) {
  if (!q.is_signed) return field;
  const std::uint32_t sign_bit = 1u << (q.storage_bits() - 1);
  const auto mag = static_cast<std::int64_t>(field & (sign_bit - 1));
  return (field & sign_bit) ? -mag : mag;
}

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    // Host is little-endian on every supported target; keep the order explicit.
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    buf_.insert(buf_.end(), b, b + sizeof(U));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    unsigned char b[sizeof(U)];
    std::memcpy(b, buf_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> out(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte offset " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

struct StoredTensor {
  std::string name;
  TensorEncoding encoding = TensorEncoding::f32;
  int bits = 32;
  Shape shape;
  float scale = 0.0f;
  std::vector<std::uint8_t> payload;
};

inline void write_header(ByteWriter& w, CheckpointKind kind, FoldOrder order, const ModelGraph& g,
                         const BatchNormOptions& bn) {
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(kind));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(order));
  for (std::size_t v : {g.spec.in_channels, g.spec.out_channels, g.spec.base_channels, g.spec.height, g.spec.width}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  const auto& q = g.quant;
  w.put<std::uint8_t>(static_cast<std::uint8_t>(q.method));
  for (int v : {q.weight_format.ibits, q.weight_format.fbits, q.act_format.ibits, q.act_format.fbits}) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(v));
  }
  w.put<std::uint8_t>(static_cast<std::uint8_t>((q.first_layer_full_precision ? 1 : 0) |
                                                (q.last_layer_full_precision ? 2 : 0) |
                                                (q.first_block_full_precision ? 4 : 0)));
  w.put<double>(q.dropout_p);
  w.put<double>(bn.momentum);
  w.put<double>(bn.eps);
}

template <typename T>
StoredTensor f32_tensor(std::string name, const Tensor<T>& t) {
  StoredTensor s{std::move(name), TensorEncoding::f32, 32, t.shape(), 0.0f, {}};
  ByteWriter w;
  for (T v : t.data()) w.put<float>(static_cast<float>(v));
  s.payload = std::move(w.buffer());
  return s;
}

inline void write_tensor(ByteWriter& w, const StoredTensor& t) {
  w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
  w.bytes(t.name.data(), t.name.size());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.encoding));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.bits));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
  for (std::size_t d : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  if (t.encoding == TensorEncoding::ternary) w.put<float>(t.scale);
  w.put<std::uint64_t>(t.payload.size());
  w.bytes(t.payload.data(), t.payload.size());
}

inline StoredTensor read_tensor(ByteReader& r) {
  StoredTensor t;
  const auto len = r.get<std::uint16_t>();
  const auto name = r.bytes(len);
  t.name.assign(name.begin(), name.end());
  const auto enc = r.get<std::uint8_t>();
  if (enc > 3) throw FormatError("unknown tensor encoding at byte offset " + std::to_string(r.offset() - 1));
  t.encoding = static_cast<TensorEncoding>(enc);
  t.bits = r.get<std::uint8_t>();
  const auto rank = r.get<std::uint8_t>();
  for (int i = 0; i < rank; ++i) t.shape.push_back(r.get<std::uint32_t>());
  if (t.encoding == TensorEncoding::ternary) t.scale = r.get<float>();
  const auto n = r.get<std::uint64_t>();
  t.payload = r.bytes(static_cast<std::size_t>(n));
  return t;
}

template <typename T>
Tensor<T> decode_tensor(const StoredTensor& s, const QuantConfig& qc) {
  const std::size_t count = shape_numel(s.shape);
  Tensor<T> out(s.shape);
  switch (s.encoding) {
    case TensorEncoding::f32: {
      if (s.payload.size() != count * 4) throw FormatError("tensor '" + s.name + "' has a bad f32 payload size");
      ByteReader r(s.payload);
      for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<T>(r.get<float>());
      break;
    }
    case TensorEncoding::fixed: {
      if (s.bits != qc.weight_format.storage_bits()) throw FormatError("tensor '" + s.name + "' bit width mismatch");
      const auto fields = unpack_bits(s.payload, count, s.bits);
      for (std::size_t i = 0; i < count; ++i) {
        out[i] = static_cast<T>(decode_fixed_point(field_to_fixed_code(fields[i], qc.weight_format), qc.weight_format));
      }
      break;
    }
    case TensorEncoding::binary: {
      const auto fields = unpack_bits(s.payload, count, 1);
      for (std::size_t i = 0; i < count; ++i) out[i] = fields[i] ? T(1) : T(-1);
      break;
    }
    case TensorEncoding::ternary: {
      const auto fields = unpack_bits(s.payload, count, 2);
      const T sc = static_cast<T>(s.scale);
      for (std::size_t i = 0; i < count; ++i) out[i] = fields[i] == 1 ? sc : fields[i] == 2 ? -sc : T(0);
      break;
    }
  }
  return out;
}

template <typename T>
StoredTensor encode_weight(std::string name, const InferenceLayer<T>& l, const QuantConfig& qc) {
  if (!l.quantized) return f32_tensor(std::move(name), l.weight);
  StoredTensor s{std::move(name), TensorEncoding::f32, 32, l.weight.shape(), 0.0f, {}};
  std::vector<std::uint32_t> fields(l.weight.size());
  switch (qc.method) {
    case QuantMethod::fixed:
      s.encoding = TensorEncoding::fixed;
      s.bits = qc.weight_format.storage_bits();
      for (std::size_t i = 0; i < fields.size(); ++i) {
        const auto enc = encode_fixed_point(static_cast<double>(l.weight[i]), qc.weight_format);
        if (enc.value != static_cast<double>(l.weight[i])) {
          throw ContractError("weight " + std::to_string(i) + " of '" + s.name + "' is not in " +
                              qc.weight_format.to_string());
        }
        fields[i] = fixed_code_to_field(enc.code, qc.weight_format);
      }
      break;
    case QuantMethod::binary:
      s.encoding = TensorEncoding::binary;
      s.bits = 1;
      for (std::size_t i = 0; i < fields.size(); ++i) fields[i] = l.weight[i] > T(0) ? 1u : 0u;
      break;
    case QuantMethod::ternary:
      s.encoding = TensorEncoding::ternary;
      s.bits = 2;
      s.scale = static_cast<float>(l.ternary_scale);
      for (std::size_t i = 0; i < fields.size(); ++i) {
        fields[i] = l.weight[i] > T(0) ? 1u : l.weight[i] < T(0) ? 2u : 0u;
      }
      break;
    default: return f32_tensor(s.name, l.weight);
  }
  s.payload = pack_bits(fields, s.bits);
  return s;
}

inline std::string conv_name(std::size_t i, const char* what) { return "conv" + std::to_string(i) + "." + what; }
inline std::string bn_name(std::size_t i, const char* what) { return "bn" + std::to_string(i) + "." + what; }

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const UNet<T>& net) {
  detail::ByteWriter w;
  detail::write_header(w, CheckpointKind::training, FoldOrder::fold_then_quantize, net.graph(),
                       net.batchnorm_options());
  std::vector<detail::StoredTensor> ts;
  for (std::size_t i = 0; i < kNumConvs; ++i) {
    ts.push_back(detail::f32_tensor(detail::conv_name(i, "weight"), net.conv(i).weight.value()));
    ts.push_back(detail::f32_tensor(detail::conv_name(i, "bias"), net.conv(i).bias.value()));
    if (!net.graph().convs[i].has_batchnorm) continue;
    ts.push_back(detail::f32_tensor(detail::bn_name(i, "gamma"), net.bn(i).gamma.value()));
    ts.push_back(detail::f32_tensor(detail::bn_name(i, "beta"), net.bn(i).beta.value()));
    ts.push_back(detail::f32_tensor(detail::bn_name(i, "running_mean"), net.bn(i).running_mean));
    ts.push_back(detail::f32_tensor(detail::bn_name(i, "running_var"), net.bn(i).running_var));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) detail::write_tensor(w, t);
  return std::move(w.buffer());
}

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const InferenceModel<T>& m) {
  detail::ByteWriter w;
  detail::write_header(w, CheckpointKind::inference, m.order, m.graph, BatchNormOptions{});
  std::vector<detail::StoredTensor> ts;
  for (std::size_t i = 0; i < kNumConvs; ++i) {
    const auto& l = m.layers[i];
    ts.push_back(detail::encode_weight(detail::conv_name(i, "weight"), l, m.graph.quant));
    ts.push_back(detail::f32_tensor(detail::conv_name(i, "bias"), l.bias));
    if (!l.channel_scale.empty()) ts.push_back(detail::f32_tensor(detail::conv_name(i, "scale"), l.channel_scale));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) detail::write_tensor(w, t);
  return std::move(w.buffer());
}

inline void write_file(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for '" + path + "'");
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <typename T>
void save_checkpoint(const UNet<T>& net, const std::string& path) {
  write_file(encode_checkpoint(net), path);
}

template <typename T>
void save_checkpoint(const InferenceModel<T>& m, const std::string& path) {
  write_file(encode_checkpoint(m), path);
}

template <typename T>
struct Checkpoint {
  CheckpointKind kind = CheckpointKind::training;
  std::optional<UNet<T>> net;              // kind == training
  std::optional<InferenceModel<T>> model;  // kind == inference
};

template <typename T>
Checkpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("not an FXQ1 checkpoint (bad magic at byte offset 0)");
  }
  detail::ByteReader r(bytes);
  r.bytes(4);
  if (const auto v = r.get<std::uint32_t>(); v != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v));
  }
  const auto kind = r.get<std::uint8_t>();
  const auto order = r.get<std::uint8_t>();
  if (kind > 1 || order > 1) throw FormatError("bad checkpoint kind/fold order at byte offset 8");
  UNetSpec spec;
  spec.in_channels = r.get<std::uint32_t>();
  spec.out_channels = r.get<std::uint32_t>();
  spec.base_channels = r.get<std::uint32_t>();
  spec.height = r.get<std::uint32_t>();
  spec.width = r.get<std::uint32_t>();
  QuantConfig qc;
  const auto method = r.get<std::uint8_t>();
  if (method > 3) throw FormatError("bad quantization method in checkpoint");
  qc.method = static_cast<QuantMethod>(method);
  qc.weight_format = {r.get<std::uint8_t>(), r.get<std::uint8_t>(), true};
  qc.act_format = {r.get<std::uint8_t>(), r.get<std::uint8_t>(), false};
  const auto flags = r.get<std::uint8_t>();
  qc.first_layer_full_precision = flags & 1;
  qc.last_layer_full_precision = flags & 2;
  qc.first_block_full_precision = flags & 4;
  qc.dropout_p = r.get<double>();
  BatchNormOptions bn;
  bn.momentum = r.get<double>();
  bn.eps = r.get<double>();
  ModelGraph graph = build_unet(spec, qc);

  const auto count = r.get<std::uint32_t>();
  std::vector<detail::StoredTensor> ts;
  for (std::uint32_t i = 0; i < count; ++i) ts.push_back(detail::read_tensor(r));
  if (!r.done()) throw FormatError("trailing bytes after checkpoint at offset " + std::to_string(r.offset()));
  auto find = [&](const std::string& name) -> const detail::StoredTensor* {
    for (const auto& t : ts) {
      if (t.name == name) return &t;
    }
    return nullptr;
  };
  auto get = [&](const std::string& name, const Shape& shape) {
    const auto* t = find(name);
    if (!t) throw FormatError("checkpoint lacks tensor '" + name + "'");
    if (t->shape != shape) {
      throw FormatError("tensor '" + name + "' has shape " + shape_string(t->shape) + ", expected " +
                        shape_string(shape));
    }
    return detail::decode_tensor<T>(*t, qc);
  };

  Checkpoint<T> ck;
  ck.kind = static_cast<CheckpointKind>(kind);
  if (ck.kind == CheckpointKind::training) {
    ck.net.emplace(graph, bn);
    auto& net = *ck.net;
    for (std::size_t i = 0; i < kNumConvs; ++i) {
      net.conv(i).weight.mutable_value() = get(detail::conv_name(i, "weight"), net.conv(i).weight.shape());
      net.conv(i).bias.mutable_value() = get(detail::conv_name(i, "bias"), net.conv(i).bias.shape());
      if (!graph.convs[i].has_batchnorm) continue;
      const Shape c{graph.convs[i].out_channels};
      net.bn(i).gamma.mutable_value() = get(detail::bn_name(i, "gamma"), c);
      net.bn(i).beta.mutable_value() = get(detail::bn_name(i, "beta"), c);
      net.bn(i).running_mean = get(detail::bn_name(i, "running_mean"), c);
      net.bn(i).running_var = get(detail::bn_name(i, "running_var"), c);
    }
  } else {
    InferenceModel<T> m{graph, static_cast<FoldOrder>(order), {}};
    for (std::size_t i = 0; i < kNumConvs; ++i) {
      const auto& d = graph.convs[i];
      auto& l = m.layers[i];
      const detail::StoredTensor* wt = find(detail::conv_name(i, "weight"));
      if (!wt) throw FormatError("checkpoint lacks tensor '" + detail::conv_name(i, "weight") + "'");
      l.weight = get(wt->name, {d.out_channels, d.in_channels, kKernel, kKernel});
      l.quantized = wt->encoding != TensorEncoding::f32;
      l.ternary_scale = static_cast<T>(wt->scale);
      l.bias = get(detail::conv_name(i, "bias"), {d.out_channels});
      if (find(detail::conv_name(i, "scale"))) l.channel_scale = get(detail::conv_name(i, "scale"), {d.out_channels});
    }
    ck.model.emplace(std::move(m));
  }
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(read_file(path));
}

/// Inference view of any checkpoint; training checkpoints are folded with `order`.
template <typename T>
InferenceModel<T> load_inference_model(const std::string& path, FoldOrder order) {
  auto ck = load_checkpoint<T>(path);
  if (ck.model) return std::move(*ck.model);
  return fold_for_inference(*ck.net, order);
}

}  // namespace fxq
