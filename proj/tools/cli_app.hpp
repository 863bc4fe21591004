#pragma once

// fxq command-line front end. run() returns 0 on success, 1 on a usage error
// and 2 when the command itself fails.

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fxq/fxq.hpp"

namespace fxq::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

namespace detail {

inline CLI::Validator qformat_validator(bool is_signed) {
  return CLI::Validator(
      [is_signed](std::string& s) -> std::string {
        try {
          parse_qformat(s, is_signed).validate();
        } catch (const std::exception& e) {
          return e.what();
        }
        return {};
      },
      "QI.F");
}

inline ExperimentConfig resolve_config(const std::string& path, const std::vector<std::string>& sets,
                                       const std::optional<std::uint64_t>& seed) {
  ExperimentConfig c = path.empty() ? ExperimentConfig{} : load_config(path);
  for (const auto& s : sets) apply_override(c, s);
  if (seed) c.train.seed = *seed;
  c.validate();
  return c;
}

inline void print_size_report(std::ostream& out, const ExperimentConfig& c) {
  const ModelGraph g = build_unet(c.model, c.quant);
  out << format_parameter_table(count_parameters(g));
  const SizeReport r = model_size(g, c.quant);
  out << std::fixed << std::setprecision(2);
  out << "\nConfigured quantization: " << to_string(c.quant.method);
  if (c.quant.method == QuantMethod::fixed) {
    out << " (weights " << c.quant.weight_format.to_string() << ", activations " << c.quant.act_format.to_string()
        << ")";
  }
  out << "\n  all layers at " << r.bits_per_param << " bits: " << r.table_mib() << " MiB\n"
      << "  with full-precision exemptions: " << r.exempt_mib() << " MiB\n\n";

  struct Row {
    const char* label;
    QuantMethod method;
    QFormat wq;
  };
  const Row rows[] = {{"full precision", QuantMethod::none, {0, 4, true}},
                      {"Q8.8", QuantMethod::fixed, {8, 8, true}},
                      {"Q0.8", QuantMethod::fixed, {0, 8, true}},
                      {"Q0.4", QuantMethod::fixed, {0, 4, true}},
                      {"Q0.2", QuantMethod::fixed, {0, 2, true}},
                      {"ternary", QuantMethod::ternary, {0, 4, true}},
                      {"binary", QuantMethod::binary, {0, 4, true}}};
  out << std::left << std::setw(16) << "weights" << std::right << std::setw(6) << "bits" << std::setw(12)
      << "size [MiB]" << "\n";
  for (const auto& row : rows) {
    QuantConfig q = c.quant;
    q.method = row.method;
    q.weight_format = row.wq;
    const SizeReport s = model_size(build_unet(c.model, q), q);
    out << std::left << std::setw(16) << row.label << std::right << std::setw(6) << s.bits_per_param << std::setw(12)
        << s.table_mib() << "\n";
  }
  out.unsetf(std::ios::floatfield);
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Fixed-point quantized U-Net segmentation toolkit", "fxq"};
  app.require_subcommand(1, 1);

  // train
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", config_path, "TOML config")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--set", sets, "Override a config field, section.key=value");
  train_cmd->add_option("--seed", seed, "Override train.seed");
  train_cmd->add_flag("--quiet", quiet, "Suppress per-epoch output");

  // eval
  std::string model_path, data_dir;
  std::string fold_order_name;
  double dice_eps = 1.0;
  auto* eval_cmd = app.add_subcommand("eval", "Mean dice of a model on a dataset directory");
  eval_cmd->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_dir, "Directory with images/ and masks/")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--fold-order", fold_order_name, "fold_then_quantize or quantize_then_scale")
      ->check(CLI::IsMember({"fold_then_quantize", "quantize_then_scale"}));
  eval_cmd->add_option("--eps", dice_eps, "Dice smoothing term")->check(CLI::PositiveNumber);

  // size
  std::string size_config;
  std::vector<std::string> size_sets;
  auto* size_cmd = app.add_subcommand("size", "Parameter table and model size report");
  size_cmd->add_option("--config", size_config, "TOML config (defaults to the base-64 model)")->check(CLI::ExistingFile);
  size_cmd->add_option("--set", size_sets, "Override a config field, section.key=value");

  // quantize
  std::string wq_text, aq_text, method_name, out_path;
  auto* quant_cmd = app.add_subcommand("quantize", "Fold batchnorm, quantize and write a packed checkpoint");
  quant_cmd->add_option("--model", model_path, "Training checkpoint")->required()->check(CLI::ExistingFile);
  quant_cmd->add_option("--wq", wq_text, "Weight format, e.g. Q0.4")->check(detail::qformat_validator(true));
  quant_cmd->add_option("--aq", aq_text, "Activation format, e.g. Q6.0")->check(detail::qformat_validator(false));
  quant_cmd->add_option("--method", method_name, "fixed, binary, ternary or none")
      ->check(CLI::IsMember({"fixed", "binary", "ternary", "none"}));
  quant_cmd->add_option("--fold-order", fold_order_name, "fold_then_quantize or quantize_then_scale")
      ->check(CLI::IsMember({"fold_then_quantize", "quantize_then_scale"}));
  quant_cmd->add_option("--out", out_path, "Output checkpoint")->required();

  // predict
  std::string image_path, mask_path, overlay_path;
  auto* predict_cmd = app.add_subcommand("predict", "Segment one image and write an overlay");
  predict_cmd->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--image", image_path, "Input PGM")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--mask", mask_path, "Ground-truth PGM")->check(CLI::ExistingFile);
  predict_cmd->add_option("--out", overlay_path, "Output PPM")->required();
  predict_cmd->add_option("--fold-order", fold_order_name, "fold_then_quantize or quantize_then_scale")
      ->check(CLI::IsMember({"fold_then_quantize", "quantize_then_scale"}));

  // bench
  std::size_t elements = 10'000'000, iterations = 10;
  std::uint64_t bench_seed = 0;
  auto* bench_cmd = app.add_subcommand("bench", "Time ReLU against Tanh");
  bench_cmd->add_option("--elements", elements, "Tensor size")->check(CLI::Range(std::size_t{10'000}, std::size_t{1} << 32));
  bench_cmd->add_option("--iterations", iterations, "Timed passes")->check(CLI::Range(std::size_t{10}, std::size_t{1'000'000}));
  bench_cmd->add_option("--seed", bench_seed, "Input RNG seed");

  // gen-data
  std::size_t n = 0, side = 64;
  std::uint64_t data_seed = 0;
  std::string out_dir, style_name = "blobs";
  auto* gen_cmd = app.add_subcommand("gen-data", "Write synthetic image/mask PGM pairs");
  gen_cmd->add_option("--n", n, "Number of samples")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--size", side, "Image side, divisible by 8")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", data_seed, "Generator seed");
  gen_cmd->add_option("--out", out_dir, "Output directory")->required();
  gen_cmd->add_option("--style", style_name, "blobs or rings")->check(CLI::IsMember({"blobs", "rings"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const FoldOrder fold_order = fold_order_name.empty()                 ? kDefaultFoldOrder
                               : fold_order_name == "fold_then_quantize" ? FoldOrder::fold_then_quantize
                                                                         : FoldOrder::quantize_then_scale;
  try {
    if (*train_cmd) {
      const ExperimentConfig c = detail::resolve_config(config_path, sets, seed);
      const auto data = prepare_data<float>(c);
      UNet<float> net(build_unet(c.model, c.quant));
      std::mt19937_64 rng(c.train.seed);
      initialize(net, rng);
      const auto result = train<float>(net, data.train, data.test, c.train, [&](const HistoryRow& r) {
        if (quiet) return;
        out << "epoch " << r.epoch << "  lr " << r.lr << "  loss " << r.train_loss;
        if (!std::isnan(r.val_dice)) out << "  val dice " << r.val_dice;
        out << std::endl;
      });
      save_checkpoint(net, c.checkpoint_path);
      write_history_csv(result.history, c.history_path);
      out << "best val dice " << result.best_val_dice << " at epoch " << result.best_epoch << "\n"
          << "checkpoint: " << c.checkpoint_path << "\nhistory: " << c.history_path << "\n";
    } else if (*eval_cmd) {
      const auto model = load_inference_model<float>(model_path, fold_order);
      const auto data = load_dataset_dir<float>(data_dir);
      out << "mean dice " << std::fixed << std::setprecision(2) << evaluate(model, data, dice_eps) << "\n";
      out.unsetf(std::ios::floatfield);
    } else if (*size_cmd) {
      detail::print_size_report(out, detail::resolve_config(size_config, size_sets, std::nullopt));
    } else if (*quant_cmd) {
      auto ck = load_checkpoint<float>(model_path);
      if (!ck.net) throw ContractError("'" + model_path + "' is already a packed inference checkpoint");
      QuantConfig qc = ck.net->quant();
      if (!method_name.empty()) qc.method = parse_quant_method(method_name);
      else if (!wq_text.empty() || !aq_text.empty()) qc.method = QuantMethod::fixed;
      if (!wq_text.empty()) qc.weight_format = parse_qformat(wq_text, true);
      if (!aq_text.empty()) qc.act_format = parse_qformat(aq_text, false);
      const UNet<float> net = with_quant_config(*ck.net, qc);
      const auto model = fold_for_inference(net, fold_order);
      save_checkpoint(model, out_path);
      const SizeReport r = model_size(net.graph(), qc);
      out << "wrote " << out_path << " (" << to_string(qc.method);
      if (qc.method == QuantMethod::fixed) out << " " << qc.weight_format.to_string() << "/" << qc.act_format.to_string();
      out << ", " << std::fixed << std::setprecision(2) << r.exempt_mib() << " MiB of parameters, "
          << std::filesystem::file_size(out_path) << " bytes on disk)\n";
      out.unsetf(std::ios::floatfield);
    } else if (*predict_cmd) {
      const auto model = load_inference_model<float>(model_path, fold_order);
      const Tensor<float> image = load_pgm<float>(image_path);
      const Tensor<float> logits = model.forward(image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}));
      Tensor<float> pred(image.shape());
      for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = logits[i] > 0.0f ? 1.0f : 0.0f;
      Tensor<float> truth = pred;
      if (!mask_path.empty()) {
        truth = load_pgm<float>(mask_path);
        for (auto& v : truth.data()) v = v > 0.5f ? 1.0f : 0.0f;
        out << "dice " << std::fixed << std::setprecision(2)
            << dice_score(logits.reshaped(truth.shape()), truth) << "\n";
        out.unsetf(std::ios::floatfield);
      }
      write_ppm(render_overlay(pred, truth), overlay_path);
      out << "wrote " << overlay_path << "\n";
    } else if (*bench_cmd) {
      std::vector<BenchResult> rows;
      for (BenchOp op : {BenchOp::relu, BenchOp::tanh}) rows.push_back(bench_activation(op, elements, iterations, bench_seed));
      print_bench_table(out, rows);
    } else if (*gen_cmd) {
      const auto data = synth_dataset<float>(n, side, side, data_seed, parse_synth_style(style_name));
      save_dataset_dir(data, out_dir);
      out << "wrote " << n << " samples to " << out_dir << "\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace fxq::cli
