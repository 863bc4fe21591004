#pragma once

// Synthetic segmentation data, PGM (P5) image files and train/test splits.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fxq/errors.hpp"
#include "fxq/tensor.hpp"

namespace fxq {

/// One image/mask pair, each [1,H,W]. Mask entries are 0 or 1.
template <typename T>
struct Sample {
  Tensor<T> image;
  Tensor<T> mask;
};

enum class SynthStyle { blobs, rings };

inline SynthStyle parse_synth_style(const std::string& s) {
  if (s == "blobs") return SynthStyle::blobs;
  if (s == "rings") return SynthStyle::rings;
  throw ParseError("unknown synthetic style '" + s + "'");
}

inline constexpr double kSynthNoiseSigma = 0.1;

/// Images with 1-3 bright ellipses (or rings) on a smoothly textured
/// background plus Gaussian noise; the mask marks the shapes.
template <typename T>
std::vector<Sample<T>> synth_dataset(std::size_t n, std::size_t height, std::size_t width, std::uint64_t seed,
                                     SynthStyle style = SynthStyle::blobs) {
  if (n == 0) throw ContractError("synth_dataset needs n >= 1");
  if (height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0) {
    throw ShapeError("synthetic image size must be divisible by 8");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kSynthNoiseSigma);
  const double side = static_cast<double>(std::min(height, width));
  const double two_pi = 2.0 * std::numbers::pi;

  std::vector<Sample<T>> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    Sample<T> smp{Tensor<T>({1, height, width}), Tensor<T>({1, height, width})};
    const double base = 0.15 + 0.1 * unit(rng);
    const double fx = two_pi * (1.0 + 2.0 * unit(rng)) / static_cast<double>(width);
    const double fy = two_pi * (1.0 + 2.0 * unit(rng)) / static_cast<double>(height);
    const double px = two_pi * unit(rng), py = two_pi * unit(rng);

    struct Shape2 {
      double cx, cy, a, b, cos_t, sin_t, level;
    };
    const int count = 1 + static_cast<int>(unit(rng) * 3.0);
    std::vector<Shape2> shapes;
    for (int k = 0; k < count; ++k) {
      const double a = side * (0.08 + 0.12 * unit(rng));
      const double b = side * (0.08 + 0.12 * unit(rng));
      const double r = std::max(a, b);
      const double cx = r + unit(rng) * (static_cast<double>(width) - 2.0 * r);
      const double cy = r + unit(rng) * (static_cast<double>(height) - 2.0 * r);
      const double t = std::numbers::pi * unit(rng);
      shapes.push_back({cx, cy, a, b, std::cos(t), std::sin(t), 0.6 + 0.2 * unit(rng)});
    }

    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double xd = static_cast<double>(x) + 0.5, yd = static_cast<double>(y) + 0.5;
        double v = base + 0.07 * std::sin(fx * xd + px) * std::sin(fy * yd + py);
        bool inside = false;
        for (const auto& sh : shapes) {
          const double dx = xd - sh.cx, dy = yd - sh.cy;
          const double u = (dx * sh.cos_t + dy * sh.sin_t) / sh.a;
          const double w = (-dx * sh.sin_t + dy * sh.cos_t) / sh.b;
          const double rr = u * u + w * w;
          const bool hit = style == SynthStyle::blobs ? rr <= 1.0 : (rr <= 1.0 && rr >= 0.36);
          if (hit) {
            inside = true;
            v = std::max(v, sh.level);
          }
        }
        v += noise(rng);
        smp.image[y * width + x] = static_cast<T>(std::clamp(v, 0.0, 1.0));
        smp.mask[y * width + x] = inside ? T(1) : T(0);
      }
    }
    out.push_back(std::move(smp));
  }
  return out;
}

template <typename T>
struct DatasetSplit {
  std::vector<Sample<T>> train;
  std::vector<Sample<T>> test;
};

/// Index permutation behind split_dataset: first part train, rest test.
inline std::vector<std::size_t> split_indices(std::size_t n, double train_fraction, std::uint64_t seed,
                                              std::size_t* train_count) {
  if (n < 2) throw ContractError("split needs at least 2 samples");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ContractError("train fraction must lie in (0, 1)");
  std::size_t k = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
  k = std::clamp<std::size_t>(k, 1, n - 1);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  *train_count = k;
  return idx;
}

template <typename T>
DatasetSplit<T> split_dataset(const std::vector<Sample<T>>& data, double train_fraction, std::uint64_t seed) {
  std::size_t k = 0;
  const auto idx = split_indices(data.size(), train_fraction, seed, &k);
  DatasetSplit<T> s;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < k ? s.train : s.test).push_back(data[idx[i]]);
  return s;
}

// --- PGM -------------------------------------------------------------------

/// Reads an 8-bit binary PGM (P5, maxval 255) into [1,H,W] scaled to [0,1].
template <typename T = float>
Tensor<T> load_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> std::size_t {
    throw FormatError(path + ": " + what + " at byte offset " + std::to_string(pos));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') fail("expected P5 magic");
  pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) return fail("expected number");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (v > (1u << 24)) return fail("header value too large");
    }
    return v;
  };
  const std::size_t w = number(), h = number(), maxval = number();
  if (w == 0 || h == 0) fail("zero image dimension");
  if (maxval != 255) fail("only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) fail("missing header terminator");
  ++pos;
  if (bytes.size() - pos < w * h) {
    pos = bytes.size();
    fail("truncated payload (need " + std::to_string(w * h) + " bytes)");
  }
  Tensor<T> t({1, h, w});
  for (std::size_t i = 0; i < w * h; ++i) {
    t[i] = static_cast<T>(static_cast<unsigned char>(bytes[pos + i]) / 255.0);
  }
  return t;
}

/// Writes the last two dims of `t` as an 8-bit P5 PGM; values clamp to [0,1].
template <typename T>
void save_pgm(const Tensor<T>& t, const std::string& path) {
  const Shape& s = t.shape();
  if (s.size() < 2) throw ShapeError("save_pgm needs an image tensor, got " + shape_string(s));
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  if (h * w != t.size()) throw ShapeError("save_pgm expects a single-channel image, got " + shape_string(s));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f << "P5\n" << w << " " << h << "\n255\n";
  std::string payload(t.size(), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = std::clamp(static_cast<double>(t[i]), 0.0, 1.0);
    payload[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!f) throw FormatError("write failed for '" + path + "'");
}

inline std::string sample_file_name(std::size_t i) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << i << ".pgm";
  return os.str();
}

/// Writes images/NNNN.pgm and masks/NNNN.pgm under `dir`.
template <typename T>
void save_dataset_dir(const std::vector<Sample<T>>& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  for (std::size_t i = 0; i < data.size(); ++i) {
    save_pgm(data[i].image, (dir / "images" / sample_file_name(i)).string());
    save_pgm(data[i].mask, (dir / "masks" / sample_file_name(i)).string());
  }
}

/// Loads every images/*.pgm with its same-named mask; masks binarize at 0.5.
template <typename T>
std::vector<Sample<T>> load_dataset_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> names;
  if (!std::filesystem::is_directory(dir / "images")) {
    throw FormatError("'" + dir.string() + "' has no images/ directory");
  }
  for (const auto& e : std::filesystem::directory_iterator(dir / "images")) {
    if (e.path().extension() == ".pgm") names.push_back(e.path().filename());
  }
  std::sort(names.begin(), names.end());
  std::vector<Sample<T>> out;
  for (const auto& name : names) {
    Sample<T> s{load_pgm<T>((dir / "images" / name).string()), load_pgm<T>((dir / "masks" / name).string())};
    for (auto& v : s.mask.data()) v = v > T(0.5) ? T(1) : T(0);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw FormatError("'" + dir.string() + "' contains no samples");
  return out;
}

/// Stacks samples [first, first+count) of `order` into N,1,H,W batches.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<Sample<T>>& data, const std::vector<std::size_t>& order,
                                           std::size_t first, std::size_t count) {
  const Shape& s = data.at(order.at(first)).image.shape();
  const std::size_t plane = s[0] * s[1] * s[2];
  Tensor<T> images({count, s[0], s[1], s[2]}), masks({count, s[0], s[1], s[2]});
  for (std::size_t i = 0; i < count; ++i) {
    const auto& smp = data.at(order.at(first + i));
    if (smp.image.shape() != s) throw ShapeError("dataset samples have mixed shapes");
    std::copy_n(smp.image.raw(), plane, images.raw() + i * plane);
    std::copy_n(smp.mask.raw(), plane, masks.raw() + i * plane);
  }
  return {std::move(images), std::move(masks)};
}

}  // namespace fxq
