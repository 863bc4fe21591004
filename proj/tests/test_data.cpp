#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "support.hpp"

using namespace fxq;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fxq_test_" + name);
  fs::remove_all(p);
  return p;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f << bytes;
}

}  // namespace

TEST(Synth, DeterministicAndWellFormed) {
  const auto a = synth_dataset<float>(5, 32, 48, 3);
  const auto b = synth_dataset<float>(5, 32, 48, 3);
  const auto c = synth_dataset<float>(5, 32, 48, 4);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask, b[i].mask);
    EXPECT_EQ(a[i].image.shape(), (Shape{1, 32, 48}));
    double fg = 0;
    for (float v : a[i].mask.data()) {
      EXPECT_TRUE(v == 0.0f || v == 1.0f);
      fg += v;
    }
    EXPECT_GT(fg, 0.0);
    for (float v : a[i].image.data()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
  }
  EXPECT_NE(a[0].image, c[0].image);
  EXPECT_THROW(synth_dataset<float>(1, 30, 32, 0), ShapeError);
}

TEST(Synth, RingsAreHollow) {
  const auto d = synth_dataset<float>(3, 64, 64, 5, SynthStyle::rings);
  const auto b = synth_dataset<float>(3, 64, 64, 5, SynthStyle::blobs);
  for (std::size_t i = 0; i < 3; ++i) {
    double ring = 0, blob = 0;
    for (std::size_t j = 0; j < d[i].mask.size(); ++j) {
      ring += d[i].mask[j];
      blob += b[i].mask[j];
    }
    EXPECT_LT(ring, blob);
  }
}

TEST(Split, SizesAndCoverage) {
  std::size_t k = 0;
  const auto idx = split_indices(10, 0.8, 1, &k);
  EXPECT_EQ(k, 8u);
  split_indices(5, 0.8, 1, &k);
  EXPECT_EQ(k, 4u);
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 10u);
  EXPECT_THROW(split_indices(1, 0.8, 1, &k), ContractError);
  EXPECT_THROW(split_indices(10, 1.0, 1, &k), ContractError);

  const auto data = synth_dataset<float>(10, 8, 8, 2);
  const auto s1 = split_dataset(data, 0.8, 9), s2 = split_dataset(data, 0.8, 9);
  ASSERT_EQ(s1.train.size(), 8u);
  ASSERT_EQ(s1.test.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(s1.test[i].image, s2.test[i].image);
}

TEST(Pgm, LoadsScaledBytes) {
  const auto p = scratch("load.pgm");
  write_bytes(p, std::string("P5\n# comment\n2 2\n255\n") + std::string("\x00\xff\x80\x40", 4));
  const auto t = load_pgm<double>(p.string());
  EXPECT_EQ(t.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(t[0], 0.0);
  EXPECT_EQ(t[1], 1.0);
  EXPECT_EQ(t[2], 128.0 / 255.0);
  EXPECT_EQ(t[3], 64.0 / 255.0);
}

TEST(Pgm, RoundTripBound) {
  std::mt19937_64 rng(3);
  const auto x = oracles::random_tensor<double>({1, 7, 9}, rng, 0, 1);
  const auto p = scratch("rt.pgm");
  save_pgm(x, p.string());
  EXPECT_LE(max_abs_diff(load_pgm<double>(p.string()), x), 1.0 / 510.0 + 1e-12);
}

TEST(Pgm, FormatErrors) {
  const auto p = scratch("bad.pgm");
  write_bytes(p, "P2\n2 2\n255\n0 0 0 0\n");
  EXPECT_THROW(load_pgm<double>(p.string()), FormatError);
  write_bytes(p, "P5\n2 2\n255\n\x01\x02");
  try {
    load_pgm<double>(p.string());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
  write_bytes(p, "P5\n2 2\n65535\n");
  EXPECT_THROW(load_pgm<double>(p.string()), FormatError);
  EXPECT_THROW(load_pgm<double>((p.string() + ".missing")), FormatError);
}

TEST(DatasetDir, RoundTrip) {
  const auto dir = scratch("dir");
  const auto data = synth_dataset<float>(4, 16, 16, 8);
  save_dataset_dir(data, dir);
  EXPECT_TRUE(fs::exists(dir / "images" / "0003.pgm"));
  EXPECT_TRUE(fs::exists(dir / "masks" / "0000.pgm"));
  const auto back = load_dataset_dir<float>(dir);
  ASSERT_EQ(back.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back[i].mask, data[i].mask);
    EXPECT_LE(max_abs_diff(back[i].image, data[i].image), 1.0f / 510.0f + 1e-6f);
  }
  fs::remove_all(dir);
}

TEST(MakeBatch, StacksInOrder) {
  const auto data = synth_dataset<float>(3, 8, 8, 1);
  const auto [x, y] = make_batch(data, {2, 0, 1}, 0, 2);
  EXPECT_EQ(x.shape(), (Shape{2, 1, 8, 8}));
  EXPECT_EQ(x[0], data[2].image[0]);
  EXPECT_EQ(y[64], data[0].mask[0]);
}
