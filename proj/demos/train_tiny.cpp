// Trains a small quantized U-Net on synthetic blobs and reports test dice
// before and after packing the weights.
#include <cstdio>
#include <random>

#include "fxq/fxq.hpp"

int main(int argc, char** argv) {
  const std::size_t epochs = argc > 1 ? std::stoul(argv[1]) : 10;

  fxq::UNetSpec spec;
  spec.base_channels = 4;
  spec.height = spec.width = 32;

  fxq::QuantConfig qc;
  qc.method = fxq::QuantMethod::fixed;
  qc.weight_format = fxq::parse_qformat("Q0.4", true);
  qc.act_format = fxq::parse_qformat("Q6.0");

  const auto data = fxq::split_dataset(fxq::synth_dataset<float>(100, 32, 32, 1), 0.8, 1);
  fxq::UNet<float> net(fxq::build_unet(spec, qc));
  std::mt19937_64 rng(1);
  fxq::initialize(net, rng);

  fxq::TrainConfig tc;
  tc.epochs = epochs;
  tc.eval_every = epochs;
  fxq::train<float>(net, data.train, data.test, tc, [](const fxq::HistoryRow& r) {
    std::printf("epoch %2zu  lr %.2e  loss %.4f\n", r.epoch, r.lr, r.train_loss);
  });

  const auto model = fxq::fold_for_inference(net, fxq::kDefaultFoldOrder);
  const auto bytes = fxq::encode_checkpoint(model);
  const auto back = fxq::decode_checkpoint<float>(bytes);
  std::printf("test dice %.2f, from packed checkpoint %.2f (%zu bytes)\n", fxq::evaluate(model, data.test),
              fxq::evaluate(*back.model, data.test), bytes.size());
}
