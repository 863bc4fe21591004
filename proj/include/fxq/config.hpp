#pragma once

// Experiment configuration read from a small TOML subset:
//   [section] headers, key = value pairs, '#' comments,
//   values are "strings", integers, reals or true/false.
// Every field is addressable as "section.key", which is also the syntax
// accepted by apply_override for command-line overrides.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fxq/data.hpp"
#include "fxq/errors.hpp"
#include "fxq/fixedpoint.hpp"
#include "fxq/quant_layers.hpp"
#include "fxq/training.hpp"
#include "fxq/unet.hpp"

namespace fxq {

struct TomlValue {
  enum class Kind { string, integer, real, boolean } kind = Kind::string;
  std::string text;  // unquoted string, or the literal as written
  int line = 0;
};

/// Flat "section.key" -> value map.
using TomlTable = std::map<std::string, TomlValue>;

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline bool is_bare_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
  }
  return true;
}

inline bool looks_integer(const std::string& s) {
  std::size_t i = (s[0] == '+' || s[0] == '-') ? 1 : 0;
  if (i == s.size()) return false;
  for (; i < s.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(s[i])) && s[i] != '_') return false;
  }
  return true;
}

inline bool looks_real(const std::string& s) {
  char* end = nullptr;
  std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && (s.find_first_of(".eE") != std::string::npos);
}

/// Parses one value literal; `bare_ok` lets unquoted words through as strings.
inline TomlValue parse_value(const std::string& raw, int line, bool bare_ok) {
  const std::string v = trim(raw);
  auto fail = [&](const std::string& what) -> TomlValue {
    throw ParseError("line " + std::to_string(line) + ": " + what);
  };
  if (v.empty()) return fail("missing value");
  if (v.front() == '"') {
    std::string out;
    std::size_t i = 1;
    for (; i < v.size() && v[i] != '"'; ++i) {
      if (v[i] == '\\' && i + 1 < v.size()) {
        const char e = v[++i];
        out += e == 'n' ? '\n' : e == 't' ? '\t' : e;
      } else {
        out += v[i];
      }
    }
    if (i != v.size() - 1) return fail("unterminated or trailing text after string");
    return {TomlValue::Kind::string, out, line};
  }
  if (v == "true" || v == "false") return {TomlValue::Kind::boolean, v, line};
  if (looks_integer(v)) return {TomlValue::Kind::integer, v, line};
  if (looks_real(v)) return {TomlValue::Kind::real, v, line};
  if (bare_ok) return {TomlValue::Kind::string, v, line};
  return fail("cannot parse value '" + v + "'");
}

/// Drops a '#' comment that is not inside a string.
inline std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (in_string && line[i] == '\\') {
      ++i;
      continue;
    }
    if (line[i] == '"') in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

}  // namespace detail

inline TomlTable parse_toml(const std::string& text) {
  TomlTable table;
  std::istringstream in(text);
  std::string raw, section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = detail::trim(detail::strip_comment(raw));
    if (line.empty()) continue;
    auto fail = [&](const std::string& what) {
      throw ParseError("line " + std::to_string(line_no) + ": " + what);
    };
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (!detail::is_bare_key(section)) fail("bad section name '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    if (!detail::is_bare_key(key)) fail("bad key '" + key + "'");
    const std::string full = section.empty() ? key : section + "." + key;
    if (table.count(full)) fail("duplicate key '" + full + "'");
    table[full] = detail::parse_value(line.substr(eq + 1), line_no, false);
  }
  return table;
}

// --- typed configuration ----------------------------------------------------

enum class DataSource { synthetic, directory };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  std::string dir;  // directory source: images/ and masks/ live here
  std::size_t n = 300;
  std::uint64_t seed = 7;
  SynthStyle style = SynthStyle::blobs;
  double train_fraction = 0.8;
};

struct ExperimentConfig {
  UNetSpec model;
  QuantConfig quant;
  TrainConfig train;
  DataConfig data;
  FoldOrder fold_order = kDefaultFoldOrder;
  std::string checkpoint_path = "model.fxq";
  std::string history_path = "history.csv";

  void validate() const {
    model.validate();
    quant.validate();
    train.validate();
    if (data.source == DataSource::synthetic && data.n < 2) throw ContractError("data.n must be >= 2");
    if (data.source == DataSource::directory && data.dir.empty()) throw ContractError("data.dir is required");
    if (!(data.train_fraction > 0.0 && data.train_fraction < 1.0)) {
      throw ContractError("data.train_fraction must lie in (0, 1)");
    }
  }
};

namespace detail {

inline std::string where(const std::string& key, const TomlValue& v) {
  return v.line > 0 ? "line " + std::to_string(v.line) + ": " + key : key;
}

inline std::uint64_t as_uint(const std::string& key, const TomlValue& v) {
  if (v.kind != TomlValue::Kind::integer || v.text[0] == '-') {
    throw ParseError(where(key, v) + " expects a non-negative integer");
  }
  std::string digits;
  for (char c : v.text) {
    if (c != '_' && c != '+') digits += c;
  }
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), out);
  if (ec != std::errc{} || p != digits.data() + digits.size()) throw ParseError(where(key, v) + " is out of range");
  return out;
}

inline double as_real(const std::string& key, const TomlValue& v) {
  if (v.kind != TomlValue::Kind::integer && v.kind != TomlValue::Kind::real) {
    throw ParseError(where(key, v) + " expects a number");
  }
  std::string s;
  for (char c : v.text) {
    if (c != '_') s += c;
  }
  return std::strtod(s.c_str(), nullptr);
}

inline bool as_bool(const std::string& key, const TomlValue& v) {
  if (v.kind != TomlValue::Kind::boolean) throw ParseError(where(key, v) + " expects true or false");
  return v.text == "true";
}

inline const std::string& as_string(const std::string& key, const TomlValue& v) {
  if (v.kind != TomlValue::Kind::string) throw ParseError(where(key, v) + " expects a string");
  return v.text;
}

inline FoldOrder parse_fold_order(const std::string& s) {
  if (s == "fold_then_quantize") return FoldOrder::fold_then_quantize;
  if (s == "quantize_then_scale") return FoldOrder::quantize_then_scale;
  throw ParseError("unknown fold order '" + s + "'");
}

}  // namespace detail

inline std::string to_string(FoldOrder o) {
  return o == FoldOrder::fold_then_quantize ? "fold_then_quantize" : "quantize_then_scale";
}

/// Sets one "section.key" field. Unknown keys are errors.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const TomlValue& v) {
  using namespace detail;
  auto size = [&] { return static_cast<std::size_t>(as_uint(key, v)); };
  try {
    if (key == "model.in_channels") c.model.in_channels = size();
    else if (key == "model.out_channels") c.model.out_channels = size();
    else if (key == "model.base_channels") c.model.base_channels = size();
    else if (key == "model.height") c.model.height = size();
    else if (key == "model.width") c.model.width = size();
    else if (key == "quant.method") c.quant.method = parse_quant_method(as_string(key, v));
    else if (key == "quant.weight_format") c.quant.weight_format = parse_qformat(as_string(key, v), true);
    else if (key == "quant.act_format") c.quant.act_format = parse_qformat(as_string(key, v), false);
    else if (key == "quant.first_layer_full_precision") c.quant.first_layer_full_precision = as_bool(key, v);
    else if (key == "quant.last_layer_full_precision") c.quant.last_layer_full_precision = as_bool(key, v);
    else if (key == "quant.first_block_full_precision") c.quant.first_block_full_precision = as_bool(key, v);
    else if (key == "quant.dropout_p") c.quant.dropout_p = as_real(key, v);
    else if (key == "train.epochs") c.train.epochs = size();
    else if (key == "train.batch_size") c.train.batch_size = size();
    else if (key == "train.lr0") c.train.lr0 = as_real(key, v);
    else if (key == "train.lr_min") c.train.lr_min = as_real(key, v);
    else if (key == "train.seed") c.train.seed = as_uint(key, v);
    else if (key == "train.loss") c.train.loss = parse_loss_kind(as_string(key, v));
    else if (key == "train.lambda") c.train.lambda = as_real(key, v);
    else if (key == "train.eps") c.train.eps = as_real(key, v);
    else if (key == "train.eval_every") c.train.eval_every = size();
    else if (key == "train.bn_momentum") c.train.bn_momentum = as_real(key, v);
    else if (key == "train.bn_eps") c.train.bn_eps = as_real(key, v);
    else if (key == "train.debug_checks") c.train.debug_checks = as_bool(key, v);
    else if (key == "train.fold_order") c.fold_order = parse_fold_order(as_string(key, v));
    else if (key == "train.checkpoint") c.checkpoint_path = as_string(key, v);
    else if (key == "train.history") c.history_path = as_string(key, v);
    else if (key == "data.source") {
      const auto& s = as_string(key, v);
      if (s == "synthetic") c.data.source = DataSource::synthetic;
      else if (s == "directory") c.data.source = DataSource::directory;
      else throw ParseError("unknown data source '" + s + "'");
    } else if (key == "data.dir") c.data.dir = as_string(key, v);
    else if (key == "data.n") c.data.n = size();
    else if (key == "data.seed") c.data.seed = as_uint(key, v);
    else if (key == "data.style") c.data.style = parse_synth_style(as_string(key, v));
    else if (key == "data.train_fraction") c.data.train_fraction = as_real(key, v);
    else throw ParseError("unknown config key '" + key + "'");
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    if (v.line > 0 && msg.rfind("line ", 0) != 0) throw ParseError("line " + std::to_string(v.line) + ": " + msg);
    throw;
  }
}

/// "section.key=value"; the value may be a bare word.
inline void apply_override(ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ParseError("override '" + assignment + "' is not key=value");
  apply_setting(c, detail::trim(assignment.substr(0, eq)), detail::parse_value(assignment.substr(eq + 1), 0, true));
}

inline ExperimentConfig config_from_toml(const std::string& text) {
  ExperimentConfig c;
  for (const auto& [k, v] : parse_toml(text)) apply_setting(c, k, v);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return config_from_toml(ss.str());
}

/// Inverse of config_from_toml.
inline std::string to_toml(const ExperimentConfig& c) {
  std::ostringstream o;
  o.precision(17);
  auto b = [](bool v) { return v ? "true" : "false"; };
  auto q = [](const std::string& s) {
    std::string out = "\"";
    for (char ch : s) {
      if (ch == '"' || ch == '\\') out += '\\';
      out += ch == '\n' ? std::string("\\n") : ch == '\t' ? std::string("\\t") : std::string(1, ch);
    }
    return out + "\"";
  };
  o << "[model]\n"
    << "in_channels = " << c.model.in_channels << "\n"
    << "out_channels = " << c.model.out_channels << "\n"
    << "base_channels = " << c.model.base_channels << "\n"
    << "height = " << c.model.height << "\n"
    << "width = " << c.model.width << "\n\n";
  o << "[quant]\n"
    << "method = " << q(to_string(c.quant.method)) << "\n"
    << "weight_format = " << q(c.quant.weight_format.to_string()) << "\n"
    << "act_format = " << q(c.quant.act_format.to_string()) << "\n"
    << "first_layer_full_precision = " << b(c.quant.first_layer_full_precision) << "\n"
    << "last_layer_full_precision = " << b(c.quant.last_layer_full_precision) << "\n"
    << "first_block_full_precision = " << b(c.quant.first_block_full_precision) << "\n"
    << "dropout_p = " << std::showpoint << c.quant.dropout_p << std::noshowpoint << "\n\n";
  o << "[train]\n"
    << "epochs = " << c.train.epochs << "\n"
    << "batch_size = " << c.train.batch_size << "\n"
    << std::showpoint << "lr0 = " << c.train.lr0 << "\n"
    << "lr_min = " << c.train.lr_min << std::noshowpoint << "\n"
    << "seed = " << c.train.seed << "\n"
    << "loss = " << q(to_string(c.train.loss)) << "\n"
    << std::showpoint << "lambda = " << c.train.lambda << "\n"
    << "eps = " << c.train.eps << std::noshowpoint << "\n"
    << "eval_every = " << c.train.eval_every << "\n"
    << std::showpoint << "bn_momentum = " << c.train.bn_momentum << "\n"
    << "bn_eps = " << c.train.bn_eps << std::noshowpoint << "\n"
    << "debug_checks = " << b(c.train.debug_checks) << "\n"
    << "fold_order = " << q(to_string(c.fold_order)) << "\n"
    << "checkpoint = " << q(c.checkpoint_path) << "\n"
    << "history = " << q(c.history_path) << "\n\n";
  o << "[data]\n"
    << "source = " << q(c.data.source == DataSource::synthetic ? "synthetic" : "directory") << "\n"
    << "dir = " << q(c.data.dir) << "\n"
    << "n = " << c.data.n << "\n"
    << "seed = " << c.data.seed << "\n"
    << "style = " << q(c.data.style == SynthStyle::blobs ? "blobs" : "rings") << "\n"
    << std::showpoint << "train_fraction = " << c.data.train_fraction << std::noshowpoint << "\n";
  return o.str();
}

/// Loads or synthesizes the dataset described by `c` and splits it.
template <typename T>
DatasetSplit<T> prepare_data(const ExperimentConfig& c) {
  std::vector<Sample<T>> all = c.data.source == DataSource::synthetic
                                   ? synth_dataset<T>(c.data.n, c.model.height, c.model.width, c.data.seed, c.data.style)
                                   : load_dataset_dir<T>(c.data.dir);
  for (const auto& s : all) {
    if (s.image.shape() != Shape{c.model.in_channels, c.model.height, c.model.width}) {
      throw ShapeError("dataset image shape " + shape_string(s.image.shape()) + " does not match the model input");
    }
  }
  return split_dataset(all, c.data.train_fraction, c.data.seed);
}

}  // namespace fxq
