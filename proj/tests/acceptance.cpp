// Acceptance runner: one PASS/FAIL line per criterion.
//
//   fxq_acceptance              run all criteria
//   fxq_acceptance --criterion N

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "support.hpp"

using namespace fxq;
using fxq::oracles::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// --- 1 ----------------------------------------------------------------------

Outcome architecture() {
  const auto t0 = Clock::now();
  QuantConfig qc;
  qc.method = QuantMethod::fixed;
  qc.first_block_full_precision = true;
  const auto report = count_parameters(build_unet({}, qc));
  const auto& ref = oracles::reference_table();
  std::size_t mismatches = 0;
  if (report.rows.size() != ref.size()) ++mismatches;
  for (std::size_t i = 0; i < std::min(report.rows.size(), ref.size()); ++i) {
    mismatches += report.rows[i].params != ref[i].params || report.rows[i].name != ref[i].name;
  }
  const std::string table = format_parameter_table(report);
  const bool total_ok = report.total == oracles::kReferenceTotal &&
                        table.find("Total params: 4,837,249") != std::string::npos;
  const double dt = seconds_since(t0);
  return {mismatches == 0 && total_ok && dt < 1.0,
          std::to_string(ref.size()) + " rows, " + std::to_string(mismatches) + " mismatches, total " +
              with_thousands(report.total) + fmt(", %.3f s", dt)};
}

// --- 2 ----------------------------------------------------------------------

Outcome memory_table() {
  const auto t0 = Clock::now();
  struct Row {
    const char* label;
    QuantMethod method;
    QFormat wq;
    double mib;
  };
  const Row rows[] = {{"FP", QuantMethod::none, {0, 4, true}, 18.45},   {"Q8.8", QuantMethod::fixed, {8, 8, true}, 9.23},
                      {"Q0.8", QuantMethod::fixed, {0, 8, true}, 4.61}, {"Q0.4", QuantMethod::fixed, {0, 4, true}, 2.31},
                      {"Q0.2", QuantMethod::fixed, {0, 2, true}, 1.15}, {"ternary", QuantMethod::ternary, {0, 4, true}, 1.15}};
  bool ok = true;
  std::ostringstream d;
  for (const auto& r : rows) {
    QuantConfig qc;
    qc.method = r.method;
    qc.weight_format = r.wq;
    const double got = model_size(build_unet({}, qc), qc).table_mib();
    const bool row_ok = std::fabs(got - r.mib) <= 0.005 * r.mib;
    ok &= row_ok;
    d << r.label << "=" << fmt("%.3f", got) << (row_ok ? "" : "(!)") << " ";
  }
  QuantConfig bnn;
  bnn.method = QuantMethod::binary;
  const double b = model_size(build_unet({}, bnn), bnn).table_mib();
  const bool b_ok = b >= 0.56 && b <= 0.58;
  ok &= b_ok;
  d << "BNN=" << fmt("%.3f", b) << (b_ok ? "" : "(!)");
  const double dt = seconds_since(t0);
  return {ok && dt < 1.0, d.str() + fmt(" MiB, %.3f s", dt)};
}

// --- 3 ----------------------------------------------------------------------

Outcome quantizer_oracle() {
  const auto t0 = Clock::now();
  const QFormat formats[] = {{0, 2, true}, {0, 4, true}, {0, 8, true}, {8, 8, true}, {6, 0, false}, {2, 2, true}};
  std::mt19937_64 rng(20240601);
  std::size_t failures = 0, checked = 0;
  for (const auto& q : formats) {
    const auto set = representable_set(q);
    const oracles::FixedPointOracle oracle(q.ibits, q.fbits, q.is_signed);
    const double range = 1.5 * std::ldexp(1.0, q.ibits) + 1.0;
    std::uniform_real_distribution<double> dist(-range, range);
    for (int i = 0; i < 10000; ++i) {
      double x = dist(rng);
      // Every 8th sample lands exactly on a rounding tie.
      if (i % 8 == 0) x = (std::round(x * std::ldexp(1.0, q.fbits)) + 0.5) / std::ldexp(1.0, q.fbits);
      const double got = to_fixed_point(x, q);
      const bool member = std::binary_search(set.begin(), set.end(), got);
      const double want = oracle(x);
      failures += !member || got != want;
      ++checked;
    }
  }
  const double dt = seconds_since(t0);
  return {failures == 0 && dt < 5.0,
          std::to_string(checked) + " values, " + std::to_string(failures) + " failures" + fmt(", %.2f s", dt)};
}

// --- 4 ----------------------------------------------------------------------

using V = Var<double>;

Tensor<double> grad_through(const std::function<V(const V&)>& op, const Tensor<double>& x, const Tensor<double>& g) {
  auto p = V::parameter(x);
  backward(sum(mul(op(p), V::constant(g))));
  return p.grad();
}

Outcome ste_and_gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(4);
  std::size_t ste_fail = 0;
  for (int t = 0; t < 100; ++t) {
    const QFormat aq{t % 2 ? 6 : 4, 0, false};
    const auto x = random_tensor<double>({2, 3, 4, 4}, rng, -20, 80);
    const auto g = random_tensor<double>(x.shape(), rng);
    const auto ga = grad_through([&](const V& v) { return quant_activation(v, aq); }, x, g);
    for (std::size_t i = 0; i < x.size(); ++i) ste_fail += ga[i] != g[i] * clamp_gradient_mask(x[i], aq.ibits);

    const QFormat wq{0, t % 2 ? 4 : 2, true};
    const auto w = random_tensor<double>({4, 3, 3, 3}, rng, -2, 2);
    const auto up = random_tensor<double>(w.shape(), rng);
    const auto gw = grad_through([&](const V& v) { return quant_weights(v, wq); }, w, up);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double frac = std::fabs(w[i]) - std::floor(std::fabs(w[i]));
      ste_fail += gw[i] != up[i] * clamp_gradient_mask(frac, wq.fbits);
    }
  }

  double worst = 0.0;
  std::size_t instances = 0;
  for (int t = 0; t < 20; ++t) {
    auto x = V::parameter(random_tensor<double>({2, 2, 5, 5}, rng));
    auto w = V::parameter(random_tensor<double>({3, 2, 3, 3}, rng));
    auto b = V::parameter(random_tensor<double>({3}, rng));
    const auto conv_probe = random_tensor<double>({2, 3, 5, 5}, rng);
    worst = std::max(worst, oracles::gradient_check(
                                [&] { return sum(mul(conv2d(x, w, b, 1), V::constant(conv_probe))); }, {x, w, b}));

    auto gamma = V::parameter(random_tensor<double>({2}, rng, 0.5, 1.5));
    auto beta = V::parameter(random_tensor<double>({2}, rng));
    const auto bn_probe = random_tensor<double>({2, 2, 5, 5}, rng);
    Tensor<double> rm({2}), rv({2}, 1.0);
    worst = std::max(worst, oracles::gradient_check(
                                [&] {
                                  return sum(mul(batchnorm(x, gamma, beta, rm, rv, {Mode::train, 0.1, 1e-5}),
                                                 V::constant(bn_probe)));
                                },
                                {x, gamma, beta}));

    auto p = V::parameter(random_tensor<double>({2, 1, 5, 5}, rng, 0.05, 0.95));
    Tensor<double> r({2, 1, 5, 5});
    for (auto& v : r.data()) v = static_cast<double>(rng() % 2);
    worst = std::max(worst, oracles::gradient_check([&] { return dice_loss(p, r); }, {p}));
    instances += 3;
  }
  const double dt = seconds_since(t0);
  return {ste_fail == 0 && worst <= 1e-4 && dt < 30.0,
          std::to_string(ste_fail) + " STE mismatches over 200 tensors; " + std::to_string(instances) +
              " finite-difference instances, worst relative error " + fmt("%.2e", worst) + fmt(", %.2f s", dt)};
}

// --- 5 ----------------------------------------------------------------------

Outcome folding() {
  const auto t0 = Clock::now();
  UNetSpec s;
  s.base_channels = 8;
  s.height = s.width = 32;
  UNet<double> net(build_unet(s, {}));
  std::mt19937_64 rng(5);
  initialize(net, rng);
  for (std::size_t i = 0; i + 1 < kNumConvs; ++i) {
    const std::size_t c = net.graph().convs[i].out_channels;
    net.conv(i).bias.mutable_value() = random_tensor<double>({c}, rng, -0.1, 0.1);
    net.bn(i).gamma.mutable_value() = random_tensor<double>({c}, rng, 0.5, 1.5);
    net.bn(i).beta.mutable_value() = random_tensor<double>({c}, rng, -0.2, 0.2);
    net.bn(i).running_mean = random_tensor<double>({c}, rng, -0.3, 0.3);
    net.bn(i).running_var = random_tensor<double>({c}, rng, 0.5, 2.0);
  }
  const auto model = fold_for_inference(net, kDefaultFoldOrder);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto x = random_tensor<double>({1, 1, 32, 32}, rng, 0, 1);
    worst = std::max(worst, max_abs_diff(model.forward(x), net.forward(x, Mode::eval).value()));
  }
  const double dt = seconds_since(t0);
  return {worst <= 1e-5 && dt < 30.0, "100 inputs, max |folded - unfolded| = " + fmt("%.2e", worst) + fmt(", %.2f s", dt)};
}

// --- 6, 7, 9 ----------------------------------------------------------------

struct RunResult {
  double final_dice = 0.0;
  std::string history_csv;
  std::vector<std::uint8_t> checkpoint;
};

struct DeskSetup {
  UNetSpec spec;
  DatasetSplit<float> data;
  TrainConfig train;
};

DeskSetup desk_setup() {
  DeskSetup d;
  d.spec.base_channels = 8;
  d.spec.height = d.spec.width = 64;
  d.data = split_dataset(synth_dataset<float>(300, 64, 64, 7, SynthStyle::blobs), 0.8, 7);
  d.train.epochs = 50;
  d.train.batch_size = 4;
  d.train.lr0 = 1e-3;
  d.train.lr_min = 0.0;
  // Only the last epoch is scored, so the returned model is the final one.
  d.train.eval_every = d.train.epochs;
  return d;
}

RunResult desk_run(const DeskSetup& d, const QuantConfig& qc, std::uint64_t seed, const std::string& label) {
  const auto t0 = Clock::now();
  UNet<float> net(build_unet(d.spec, qc));
  std::mt19937_64 rng(seed);
  initialize(net, rng);
  TrainConfig tc = d.train;
  tc.seed = seed;
  const auto r = train<float>(net, d.data.train, d.data.test, tc);
  RunResult out{r.history.back().val_dice, history_csv(r.history), encode_checkpoint(net)};
  std::cerr << "  " << label << " seed " << seed << ": final test dice " << fmt("%.2f", out.final_dice)
            << fmt(" (%.0f s)", seconds_since(t0)) << std::endl;
  return out;
}

QuantConfig method_config(QuantMethod m, QFormat wq = {0, 4, true}, QFormat aq = {6, 0, false}) {
  QuantConfig qc;
  qc.method = m;
  qc.weight_format = wq;
  qc.act_format = aq;
  return qc;
}

Outcome desk_training() {
  const auto t0 = Clock::now();
  const auto d = desk_setup();
  if (d.data.train.size() != 240 || d.data.test.size() != 60) return {false, "unexpected split sizes"};
  const double fp = desk_run(d, method_config(QuantMethod::none), 1, "full precision").final_dice;
  const double fx = desk_run(d, method_config(QuantMethod::fixed), 1, "Q6.0/Q0.4").final_dice;
  const double bn = desk_run(d, method_config(QuantMethod::binary), 1, "binary").final_dice;
  const double tn = desk_run(d, method_config(QuantMethod::ternary), 1, "ternary").final_dice;
  const double dt = seconds_since(t0);
  const bool ok = fp >= 95.0 && fx >= fp - 5.0 && bn >= 60.0 && tn >= 60.0 && dt <= 15 * 60.0;
  return {ok, "dice FP " + fmt("%.2f", fp) + ", Q6.0/Q0.4 " + fmt("%.2f", fx) + ", binary " + fmt("%.2f", bn) +
                  ", ternary " + fmt("%.2f", tn) + fmt(", %.0f s", dt)};
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

Outcome dropout_replication() {
  const auto t0 = Clock::now();
  const auto d = desk_setup();
  std::vector<double> with, without;
  for (std::uint64_t seed : {1, 2, 3}) {
    QuantConfig qc = method_config(QuantMethod::fixed, {0, 2, true}, {4, 0, false});
    without.push_back(desk_run(d, qc, seed, "Q4.0/Q0.2").final_dice);
    qc.dropout_p = 0.5;
    with.push_back(desk_run(d, qc, seed, "Q4.0/Q0.2 dropout 0.5").final_dice);
  }
  const double mw = median3(with), mo = median3(without);
  const double dt = seconds_since(t0);
  return {mw < mo && dt <= 15 * 60.0, "median dice with dropout " + fmt("%.2f", mw) + ", without " + fmt("%.2f", mo) +
                                          fmt(", %.0f s", dt)};
}

Outcome determinism() {
  const auto t0 = Clock::now();
  const auto d = desk_setup();
  const auto dir = std::filesystem::temp_directory_path() / "fxq_acceptance_determinism";
  std::filesystem::create_directories(dir);
  std::vector<std::vector<std::uint8_t>> csv, ck;
  for (int run = 0; run < 2; ++run) {
    const auto r = desk_run(d, method_config(QuantMethod::none), 1, "full precision run " + std::to_string(run + 1));
    const auto h = (dir / ("history" + std::to_string(run) + ".csv")).string();
    const auto c = (dir / ("model" + std::to_string(run) + ".fxq")).string();
    write_file({r.history_csv.begin(), r.history_csv.end()}, h);
    write_file(r.checkpoint, c);
    csv.push_back(read_file(h));
    ck.push_back(read_file(c));
  }
  std::filesystem::remove_all(dir);
  const bool ok = csv[0] == csv[1] && ck[0] == ck[1];
  return {ok, std::string("history CSV ") + (csv[0] == csv[1] ? "identical" : "differs") + " (" +
                  std::to_string(csv[0].size()) + " bytes), checkpoint " + (ck[0] == ck[1] ? "identical" : "differs") +
                  " (" + std::to_string(ck[0].size()) + " bytes)" + fmt(", %.0f s", seconds_since(t0))};
}

// --- 8 ----------------------------------------------------------------------

Outcome bench() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::ostringstream d;
  d << "tanh/relu ratios";
  for (std::uint64_t run = 0; run < 3; ++run) {
    const auto r = bench_activation(BenchOp::tanh, 10'000'000, 10, run);
    ok &= r.ratio_vs_relu > 1.0;
    d << " " << fmt("%.2f", r.ratio_vs_relu);
  }
  const double dt = seconds_since(t0);
  return {ok && dt < 60.0, d.str() + fmt(", %.1f s", dt)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner", "fxq_acceptance"};
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::function<Outcome()>> criteria = {architecture,  memory_table,       quantizer_oracle,
                                                          ste_and_gradients, folding,      desk_training,
                                                          dropout_replication, bench,      determinism};
  bool all = true;
  for (int i = 1; i <= 9; ++i) {
    if (only != 0 && i != only) continue;
    Outcome o;
    try {
      o = criteria[static_cast<std::size_t>(i - 1)]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "criterion " << i << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    all &= o.pass;
  }
  return all ? 0 : 1;
}
