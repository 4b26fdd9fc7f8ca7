#pragma once

// Run configuration and its flat `key = value` text form. Lines starting
// with '#' are comments; unknown keys are rejected.

#include "easyfirst/tensor.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace easyfirst {

struct ModelConfig {
  std::size_t image_height = 32;
  std::size_t image_width = 128;
  std::vector<std::size_t> conv_channels{32, 64, 128};
  std::size_t d_model = 128;
  std::size_t heads = 4;
  std::size_t d_ffn = 256;
  std::size_t backbone_units = 2;
  std::size_t decoder_layers = 1;
  std::size_t max_length = 30;  // L: decoder positions including the EOS tail

  std::size_t downsample() const { return std::size_t{1} << conv_channels.size(); }
  std::size_t grid_height() const { return image_height / downsample(); }
  std::size_t grid_width() const { return image_width / downsample(); }

  void validate() const {
    if (conv_channels.empty()) throw ConfigError("conv_channels must list at least one stage");
    if (conv_channels.back() != d_model) throw ConfigError("last conv channel count must equal d_model");
    if (image_height % downsample() != 0 || image_width % downsample() != 0) {
      throw ConfigError("image extents " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                        " must be divisible by " + std::to_string(downsample()));
    }
    if (heads == 0 || d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
    if (d_model % 4 != 0) throw ConfigError("d_model must be divisible by 4 for 2D positional encoding");
    if (max_length < 2) throw ConfigError("max_length must be >= 2");
    if (decoder_layers == 0) throw ConfigError("decoder_layers must be >= 1");
  }
};

enum class IterationLoss { full, sampled };

struct TrainConfig {
  std::size_t iterations = 5;  // K
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 1;
  std::string precision = "float32";
  bool mimicking = true;
  IterationLoss iteration_loss = IterationLoss::full;
  double lambda_nat = 1.0;
  double lambda_at = 1.0;
  double lambda_ffn = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double layer_norm_eps = 1e-5;
  double cosine_eps = 1e-8;
  bool train_eos_mask = true;  // hide keys past the label's EOS once it is committed
  std::size_t eval_every = 500;
  std::size_t val_samples = 200;
  bool eos_postprocess = true;  // inference-time length post-processing

  void validate(std::size_t max_length) const {
    if (iterations < 1 || iterations > max_length) {
      throw ConfigError("iterations K=" + std::to_string(iterations) + " must lie in [1, " +
                        std::to_string(max_length) + "]");
    }
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (precision != "float32" && precision != "float64") throw ConfigError("precision must be float32 or float64");
  }
};

struct RenderConfig {
  std::size_t height = 32;
  std::size_t width = 128;
  std::size_t glyph_scale = 3;
  std::size_t min_length = 1;
  std::size_t max_length = 10;
  double noise_sigma = 0.05;
  int jitter_y = 2;        // per-glyph vertical offset bound, pixels
  int jitter_x = 2;        // extra inter-glyph spacing bound, pixels
  double max_slope = 0.03;  // baseline slope bound, pixels per pixel
  double min_contrast = 0.35;

  void validate() const {
    if (min_length < 1 || min_length > max_length) throw ConfigError("label length bounds are inconsistent");
    if (glyph_scale == 0) throw ConfigError("glyph_scale must be >= 1");
    if (height < 7 * glyph_scale) throw ConfigError("image height too small for the glyph scale");
    if (noise_sigma < 0 || jitter_x < 0 || jitter_y < 0 || max_slope < 0) {
      throw ConfigError("noise and jitter settings must be non-negative");
    }
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  RenderConfig render;

  void validate() const {
    model.validate();
    train.validate(model.max_length);
    render.validate();
    if (render.height != model.image_height || render.width != model.image_width) {
      throw ConfigError("render size must match the model input size");
    }
    if (render.max_length >= model.max_length) {
      throw ConfigError("label max length must leave room for EOS within the decoder length");
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError("invalid value '" + text + "' for key " + key);
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "on" || text == "1") return true;
  if (text == "false" || text == "off" || text == "0") return false;
  throw ConfigError("invalid boolean '" + text + "' for key " + key);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct ConfigField {
  std::function<void(const std::string&, const std::string&)> set;
  std::function<std::string()> get;
};

inline std::map<std::string, ConfigField> config_fields(RunConfig& c) {
  std::map<std::string, ConfigField> f;
  auto size_field = [&f](const std::string& key, std::size_t& ref) {
    f[key] = {[&ref](const std::string& k, const std::string& v) { ref = parse_number<std::size_t>(k, v); },
              [&ref] { return std::to_string(ref); }};
  };
  auto int_field = [&f](const std::string& key, int& ref) {
    f[key] = {[&ref](const std::string& k, const std::string& v) { ref = parse_number<int>(k, v); },
              [&ref] { return std::to_string(ref); }};
  };
  auto double_field = [&f](const std::string& key, double& ref) {
    f[key] = {[&ref](const std::string& k, const std::string& v) { ref = parse_number<double>(k, v); },
              [&ref] { return format_double(ref); }};
  };
  auto bool_field = [&f](const std::string& key, bool& ref) {
    f[key] = {[&ref](const std::string& k, const std::string& v) { ref = parse_bool(k, v); },
              [&ref] { return std::string(ref ? "true" : "false"); }};
  };

  size_field("image_height", c.model.image_height);
  size_field("image_width", c.model.image_width);
  f["conv_channels"] = {[&c](const std::string& k, const std::string& v) {
                          c.model.conv_channels.clear();
                          std::stringstream ss(v);
                          std::string item;
                          while (std::getline(ss, item, ',')) {
                            c.model.conv_channels.push_back(parse_number<std::size_t>(k, trim(item)));
                          }
                        },
                        [&c] {
                          std::string out;
                          for (std::size_t i = 0; i < c.model.conv_channels.size(); ++i) {
                            if (i) out += ',';
                            out += std::to_string(c.model.conv_channels[i]);
                          }
                          return out;
                        }};
  size_field("d_model", c.model.d_model);
  size_field("heads", c.model.heads);
  size_field("d_ffn", c.model.d_ffn);
  size_field("backbone_units", c.model.backbone_units);
  size_field("decoder_layers", c.model.decoder_layers);
  size_field("max_length", c.model.max_length);

  size_field("iterations", c.train.iterations);
  double_field("lr", c.train.lr);
  size_field("batch_size", c.train.batch_size);
  size_field("epochs", c.train.epochs);
  f["seed"] = {[&c](const std::string& k, const std::string& v) { c.train.seed = parse_number<std::uint64_t>(k, v); },
               [&c] { return std::to_string(c.train.seed); }};
  f["precision"] = {[&c](const std::string&, const std::string& v) { c.train.precision = v; },
                    [&c] { return c.train.precision; }};
  bool_field("mimicking", c.train.mimicking);
  f["iteration_loss"] = {[&c](const std::string& k, const std::string& v) {
                           if (v == "full") c.train.iteration_loss = IterationLoss::full;
                           else if (v == "sampled") c.train.iteration_loss = IterationLoss::sampled;
                           else throw ConfigError("invalid value '" + v + "' for key " + k);
                         },
                         [&c] {
                           return std::string(c.train.iteration_loss == IterationLoss::full ? "full" : "sampled");
                         }};
  double_field("lambda_nat", c.train.lambda_nat);
  double_field("lambda_at", c.train.lambda_at);
  double_field("lambda_ffn", c.train.lambda_ffn);
  double_field("adam_beta1", c.train.adam_beta1);
  double_field("adam_beta2", c.train.adam_beta2);
  double_field("adam_eps", c.train.adam_eps);
  double_field("layer_norm_eps", c.train.layer_norm_eps);
  double_field("cosine_eps", c.train.cosine_eps);
  bool_field("train_eos_mask", c.train.train_eos_mask);
  size_field("eval_every", c.train.eval_every);
  size_field("val_samples", c.train.val_samples);
  bool_field("eos_postprocess", c.train.eos_postprocess);

  size_field("glyph_scale", c.render.glyph_scale);
  size_field("label_min_length", c.render.min_length);
  size_field("label_max_length", c.render.max_length);
  double_field("noise_sigma", c.render.noise_sigma);
  int_field("jitter_y", c.render.jitter_y);
  int_field("jitter_x", c.render.jitter_x);
  double_field("max_slope", c.render.max_slope);
  double_field("min_contrast", c.render.min_contrast);
  return f;
}

}  // namespace detail

/// Applies `key = value` lines on top of `base`.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  auto fields = detail::config_fields(base);
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto stripped = detail::trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(std::string_view(stripped).substr(0, eq));
    const auto value = detail::trim(std::string_view(stripped).substr(eq + 1));
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second.set(key, value);
  }
  base.render.height = base.model.image_height;
  base.render.width = base.model.image_width;
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Every key in a stable (sorted) order; parse_config(to_text(c)) == c.
inline std::string to_text(const RunConfig& config) {
  RunConfig copy = config;
  auto fields = detail::config_fields(copy);
  std::string out;
  for (const auto& [key, field] : fields) out += key + " = " + field.get() + "\n";
  return out;
}

}  // namespace easyfirst
