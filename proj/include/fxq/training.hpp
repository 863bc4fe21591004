#pragma once

// Quantization-aware training: Glorot init, Adam on the full-precision shadow
// weights, cosine-annealed learning rate, per-epoch validation.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fxq/data.hpp"
#include "fxq/errors.hpp"
#include "fxq/losses.hpp"
#include "fxq/ops.hpp"
#include "fxq/quant_layers.hpp"
#include "fxq/unet.hpp"

namespace fxq {

enum class LossKind { dice, combined };

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "dice") return LossKind::dice;
  if (s == "combined") return LossKind::combined;
  throw ParseError("unknown loss '" + s + "'");
}

inline std::string to_string(LossKind k) { return k == LossKind::dice ? "dice" : "combined"; }

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 4;
  double lr0 = 1e-3;
  double lr_min = 0.0;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::dice;
  double lambda = 0.5;
  double eps = 1.0;
  std::size_t eval_every = 1;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  // Check every quantized weight against its format after each epoch.
  bool debug_checks = false;

  void validate() const {
    if (epochs < 1) throw ContractError("epochs must be >= 1");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (!(lr0 > lr_min && lr_min >= 0.0)) throw ContractError("need lr0 > lr_min >= 0");
    if (eval_every < 1) throw ContractError("eval_every must be >= 1");
    if (lambda < 0.0 || lambda > 1.0) throw ContractError("lambda must lie in [0, 1]");
    if (eps <= 0.0) throw ContractError("dice eps must be positive");
  }
};

/// Uniform samples in [-a, a], a = sqrt(6 / (fan_in + fan_out)).
template <typename T, typename Rng>
Tensor<T> glorot_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  if (fan_in == 0 || fan_out == 0) throw ContractError("glorot_init needs positive fans");
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

/// Glorot conv weights, zero biases, identity batchnorm.
template <typename T, typename Rng>
void initialize(UNet<T>& net, Rng& rng) {
  for (std::size_t i = 0; i < kNumConvs; ++i) {
    const auto& d = net.graph().convs[i];
    const std::size_t area = kKernel * kKernel;
    net.conv(i).weight.mutable_value() = glorot_init<T>(net.conv(i).weight.shape(), d.in_channels * area,
                                                        d.out_channels * area, rng);
    net.conv(i).bias.mutable_value().fill(T(0));
    if (d.has_batchnorm) {
      auto& bn = net.bn(i);
      bn.gamma.mutable_value().fill(T(1));
      bn.beta.mutable_value().fill(T(0));
      bn.running_mean.fill(T(0));
      bn.running_var.fill(T(1));
    }
  }
}

/// lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2
inline double cosine_lr(double lr0, double lr_min, double t, double total) {
  if (total <= 0.0) throw ContractError("cosine_lr needs a positive period");
  if (t < 0.0 || t > total) throw ContractError("cosine_lr step outside [0, T]");
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t / total));
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept in double.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Var<T>> params, AdamOptions opt = {}) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.value().size(), 0.0);
      v_.emplace_back(p.value().size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      if (p.grad().size() != m_[k].size()) throw ContractError("Adam state does not match parameter shape");
      Tensor<T>& w = p.mutable_value();
      const Tensor<T>& g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        m_[k][i] = opt_.beta1 * m_[k][i] + (1.0 - opt_.beta1) * gi;
        v_[k][i] = opt_.beta2 * v_[k][i] + (1.0 - opt_.beta2) * gi * gi;
        const double mh = m_[k][i] / c1, vh = v_[k][i] / c2;
        w[i] = static_cast<T>(w[i] - lr * mh / (std::sqrt(vh) + opt_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  std::vector<Var<T>> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct HistoryRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_dice = 0.0;  // NaN when not evaluated this epoch
};

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  os << "epoch,lr,train_loss,val_dice\n";
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.lr << ',' << r.train_loss << ',';
    if (!std::isnan(r.val_dice)) os << r.val_dice;
    os << '\n';
  }
  return os.str();
}

inline void write_history_csv(const std::vector<HistoryRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f << history_csv(rows);
}

inline constexpr FoldOrder kDefaultFoldOrder = FoldOrder::quantize_then_scale;

/// Mean per-sample dice score (0-100) of the batchnorm-folded network.
template <typename T>
double evaluate(const InferenceModel<T>& model, const std::vector<Sample<T>>& data, double eps = 1.0,
                std::size_t batch = 8) {
  if (data.empty()) throw ContractError("evaluate on an empty dataset");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double total = 0.0;
  for (std::size_t first = 0; first < data.size(); first += batch) {
    const std::size_t count = std::min(batch, data.size() - first);
    auto [images, masks] = make_batch(data, order, first, count);
    const Tensor<T> logits = model.forward(images);
    const std::size_t plane = logits.size() / count;
    for (std::size_t i = 0; i < count; ++i) {
      Tensor<T> l(Shape{plane}, std::vector<T>(logits.raw() + i * plane, logits.raw() + (i + 1) * plane));
      Tensor<T> m(Shape{plane}, std::vector<T>(masks.raw() + i * plane, masks.raw() + (i + 1) * plane));
      total += dice_score(l, m, 0.5, eps);
    }
  }
  return total / static_cast<double>(data.size());
}

template <typename T>
double evaluate(const UNet<T>& net, const std::vector<Sample<T>>& data, FoldOrder order = kDefaultFoldOrder,
                double eps = 1.0) {
  return evaluate(fold_for_inference(net, order), data, eps);
}

/// Returns true iff every forward weight of a quantized layer is a value the
/// layer's quantizer can produce.
template <typename T>
bool quantized_weights_valid(const UNet<T>& net) {
  const auto& qc = net.quant();
  for (std::size_t i = 0; i < kNumConvs; ++i) {
    if (net.graph().convs[i].full_precision) continue;
    const Tensor<T> w = net.effective_weight(i).value();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double v = w[j];
      switch (qc.method) {
        case QuantMethod::fixed:
          if (to_fixed_point(v, qc.weight_format) != v || std::fabs(v) > qc.weight_format.max_value()) return false;
          break;
        case QuantMethod::binary:
          if (v != 1.0 && v != -1.0) return false;
          break;
        default: break;
      }
    }
  }
  return true;
}

struct TrainResult {
  std::vector<HistoryRow> history;
  std::size_t best_epoch = 0;
  double best_val_dice = -1.0;
};

/// Runs cfg.epochs epochs of shuffled mini-batch training from the model's
/// current (freshly initialized) state. On return the model holds the
/// parameters of the epoch with the best validation dice.
template <typename T>
TrainResult train(UNet<T>& net, const std::vector<Sample<T>>& train_set, const std::vector<Sample<T>>& val_set,
                  const TrainConfig& cfg, const std::function<void(const HistoryRow&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("training set is empty");
  net.set_batchnorm_options({Mode::train, cfg.bn_momentum, cfg.bn_eps});

  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5DEECE66DULL);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<Var<T>> params = net.parameters();
  Adam<T> adam(params);

  TrainResult result;
  std::vector<Tensor<T>> best_params;
  std::vector<std::pair<Tensor<T>, Tensor<T>>> best_stats;
  auto snapshot = [&] {
    best_params.clear();
    for (const auto& p : params) best_params.push_back(p.value());
    best_stats.clear();
    for (std::size_t i = 0; i + 1 < kNumConvs; ++i) best_stats.emplace_back(net.bn(i).running_mean, net.bn(i).running_var);
  };

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg.lr0, cfg.lr_min, static_cast<double>(epoch), static_cast<double>(cfg.epochs));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - first);
      auto [images, masks] = make_batch(train_set, order, first, count);
      adam.zero_grad();
      Var<T> logits = net.forward(images, Mode::train, &dropout_rng);
      Var<T> p = activation(logits, Activation::sigmoid);
      Var<T> loss = cfg.loss == LossKind::dice ? dice_loss(p, masks, cfg.eps) : combined_loss(p, masks, cfg.eps, cfg.lambda);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw DomainError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                          std::to_string(batches + 1));
      }
      backward(loss);
      adam.step(lr);
      loss_sum += lv;
      ++batches;
      for (const auto& prm : params) {
        if (!prm.value().all_finite()) {
          throw DomainError("non-finite shadow weight at epoch " + std::to_string(epoch + 1) + ", batch " +
                            std::to_string(batches));
        }
      }
    }
    if (cfg.debug_checks && !quantized_weights_valid(net)) {
      throw DomainError("quantized weight outside its format after epoch " + std::to_string(epoch + 1));
    }

    HistoryRow row{epoch + 1, lr, loss_sum / static_cast<double>(batches), std::nan("")};
    const bool last = epoch + 1 == cfg.epochs;
    if (!val_set.empty() && ((epoch + 1) % cfg.eval_every == 0 || last)) {
      row.val_dice = evaluate(net, val_set, kDefaultFoldOrder, cfg.eps);
      if (row.val_dice > result.best_val_dice) {
        result.best_val_dice = row.val_dice;
        result.best_epoch = epoch + 1;
        snapshot();
      }
    }
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);
  }

  if (!best_params.empty()) {
    for (std::size_t k = 0; k < params.size(); ++k) params[k].mutable_value() = best_params[k];
    for (std::size_t i = 0; i + 1 < kNumConvs; ++i) {
      net.bn(i).running_mean = best_stats[i].first;
      net.bn(i).running_var = best_stats[i].second;
    }
  } else {
    result.best_epoch = cfg.epochs;
  }
  return result;
}

}  // namespace fxq
