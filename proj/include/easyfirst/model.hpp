#pragma once

// Backbone, parallel decoder and autoregressive teacher.
//
// The backbone turns an H×W grayscale image into an (H/8)×(W/8) grid of
// d_model features (three stride-2 conv stages, then transformer units).
// Both decoders read that grid through 2D cross-attention; keys carry the 2D
// positional encoding, values do not.

#include "easyfirst/config.hpp"
#include "easyfirst/decoding.hpp"
#include "easyfirst/params.hpp"
#include "easyfirst/transformer.hpp"
#include "easyfirst/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace easyfirst {

/// Backbone output. `grid` rows are grid cells flattened row-major
/// (index r·width + c); `keys` = grid + position, used by cross-attention.
template <typename T>
struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor<T> grid;      // [(height·width) × d]
  Tensor<T> position;  // [(height·width) × d]
  Tensor<T> keys;      // [(height·width) × d]

  std::size_t channels() const { return grid.cols(); }
};

template <typename T>
struct ConvStageWeights {
  LinearWeights<T> conv;  // [(9·C_in) × C_out]
  NormWeights<T> norm;
};

template <typename T>
struct BackboneWeights {
  std::vector<ConvStageWeights<T>> stages;
  std::vector<EncoderUnitWeights<T>> units;

  static BackboneWeights create(ParameterStore<T>& store, const ModelConfig& cfg) {
    BackboneWeights w;
    std::size_t in = 1;
    for (std::size_t s = 0; s < cfg.conv_channels.size(); ++s) {
      const auto out = cfg.conv_channels[s];
      const auto name = "backbone.conv" + std::to_string(s);
      w.stages.push_back({LinearWeights<T>::create(store, name, 9 * in, out), NormWeights<T>::create(store, name + ".norm", out)});
      in = out;
    }
    for (std::size_t u = 0; u < cfg.backbone_units; ++u) {
      w.units.push_back(EncoderUnitWeights<T>::create(store, "backbone.unit" + std::to_string(u), cfg.d_model, cfg.d_ffn));
    }
    return w;
  }
};

/// Image [H×W×1] → feature map. Each conv stage is 3×3/stride 2/pad 1 →
/// ReLU → LayerNorm over channels.
template <typename T>
FeatureMap<T> encode_image(const Tensor<T>& image, const BackboneWeights<T>& w, const ModelConfig& cfg) {
  if (image.rank() != 3 || image.shape()[2] != 1) {
    throw DimensionError("encode_image expects [H x W x 1], got " + to_string(image.shape()));
  }
  auto h = image.shape()[0], wd = image.shape()[1];
  const auto factor = std::size_t{1} << w.stages.size();
  if (h % factor != 0 || wd % factor != 0) {
    throw ConfigError("image extents " + std::to_string(h) + "x" + std::to_string(wd) + " are not divisible by " +
                      std::to_string(factor));
  }
  Tensor<T> x = image;
  for (const auto& stage : w.stages) {
    const auto cols = im2col(x, 3, 2, 1);
    h /= 2;
    wd /= 2;
    const auto out = layer_norm(relu(linear(cols, stage.conv)), stage.norm);
    x = reshape(out, {h, wd, out.cols()});
  }
  FeatureMap<T> fm;
  fm.height = h;
  fm.width = wd;
  const auto d = x.shape()[2];
  fm.position = positional_encoding_2d<T>(h, wd, d);
  Tensor<T> grid = add(reshape(x, {h * wd, d}), fm.position);
  for (const auto& unit : w.units) grid = encoder_unit(grid, unit, cfg.heads);
  fm.grid = grid;
  fm.keys = add(grid, fm.position);
  return fm;
}

template <typename T>
struct DecoderWeights {
  Tensor<T> embedding;  // [num_inputs × d]
  std::vector<DecoderLayerWeights<T>> layers;
  LinearWeights<T> classifier;  // d → 37

  static DecoderWeights create(ParameterStore<T>& store, const std::string& name, const ModelConfig& cfg) {
    DecoderWeights w;
    w.embedding = store.add(name + ".embedding", {Vocab::num_inputs, cfg.d_model}, Init::xavier_uniform);
    for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
      w.layers.push_back(DecoderLayerWeights<T>::create(store, name + ".layer" + std::to_string(l), cfg.d_model, cfg.d_ffn));
    }
    w.classifier = LinearWeights<T>::create(store, name + ".classifier", cfg.d_model, Vocab::num_classes);
    return w;
  }
};

template <typename T>
struct DecoderOutputs {
  Tensor<T> logits;    // [rows × 37]
  Tensor<T> features;  // [rows × d], post-norm FFN output
};

/// Runs a decoder over `tokens` computing outputs only for `query_rows`.
/// `visibility` is the full [L×L] self-attention mask. With several layers all
/// rows are computed and the requested ones selected at the end.
template <typename T>
DecoderOutputs<T> run_decoder(const DecoderWeights<T>& w, const ModelConfig& cfg, std::span<const int> tokens,
                              std::span<const std::size_t> query_rows, const AttentionMask& visibility,
                              const FeatureMap<T>& fm, const Tensor<T>& positions) {
  const auto n = tokens.size();
  if (visibility.queries != n || visibility.keys != n) throw DimensionError("decoder mask does not match token count");
  if (n > positions.rows()) throw DimensionError("token sequence longer than the positional table");
  std::vector<std::size_t> idx(tokens.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= Vocab::num_inputs) {
      throw DimensionError("token " + std::to_string(tokens[i]) + " outside decoder input vocabulary");
    }
    idx[i] = static_cast<std::size_t>(tokens[i]);
  }
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto pos = n == positions.rows() ? positions : gather_rows(positions, std::span<const std::size_t>(all));
  const Tensor<T> x = add(gather_rows(w.embedding, std::span<const std::size_t>(idx)), pos);

  const bool subset = w.layers.size() == 1 && query_rows.size() != n;
  if (!subset) {
    Tensor<T> h = x;
    for (const auto& layer : w.layers) h = decoder_layer(h, h, visibility, fm.keys, fm.grid, layer, cfg.heads);
    if (query_rows.size() != n) h = gather_rows(h, query_rows);
    return {linear(h, w.classifier), h};
  }
  // Keys: every row visible to at least one query row.
  std::vector<std::uint8_t> used(n, 0);
  for (auto q : query_rows)
    for (std::size_t k = 0; k < n; ++k)
      if (visibility(q, k)) used[k] = 1;
  std::vector<std::size_t> key_rows;
  for (std::size_t k = 0; k < n; ++k)
    if (used[k]) key_rows.push_back(k);
  AttentionMask mask{query_rows.size(), key_rows.size(), std::vector<std::uint8_t>(query_rows.size() * key_rows.size())};
  for (std::size_t i = 0; i < query_rows.size(); ++i)
    for (std::size_t j = 0; j < key_rows.size(); ++j) mask.set(i, j, visibility(query_rows[i], key_rows[j]));
  const auto q = gather_rows(x, query_rows);
  const auto k = key_rows.size() == n ? x : gather_rows(x, std::span<const std::size_t>(key_rows));
  const auto h = decoder_layer(q, k, mask, fm.keys, fm.grid, w.layers.front(), cfg.heads);
  return {linear(h, w.classifier), h};
}

/// Backbone + parallel decoder + autoregressive teacher with one shared
/// parameter store. Parameter names are prefixed "backbone.", "parallel." and
/// "teacher.".
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : config_(cfg), store_(seed) {
    cfg.validate();
    backbone_ = BackboneWeights<T>::create(store_, cfg);
    parallel_ = DecoderWeights<T>::create(store_, "parallel", cfg);
    teacher_ = DecoderWeights<T>::create(store_, "teacher", cfg);
    positions_ = positional_encoding<T>(cfg.max_length + 1, cfg.d_model);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  const BackboneWeights<T>& backbone() const { return backbone_; }
  const DecoderWeights<T>& parallel() const { return parallel_; }
  const DecoderWeights<T>& teacher() const { return teacher_; }
  const Tensor<T>& positions() const { return positions_; }

  FeatureMap<T> encode(const Tensor<T>& image) const { return encode_image(image, backbone_, config_); }

 private:
  ModelConfig config_;
  ParameterStore<T> store_;
  BackboneWeights<T> backbone_;
  DecoderWeights<T> parallel_;
  DecoderWeights<T> teacher_;
  Tensor<T> positions_;
};

/// Self-attention visibility for the parallel decoder: MASK keys hidden
/// (diagonal kept), and keys past `eos_cut` hidden.
inline AttentionMask parallel_visibility(std::span<const int> tokens, std::optional<std::size_t> eos_cut) {
  auto mask = build_parallel_mask(tokens, Vocab::mask);
  if (eos_cut) {
    for (std::size_t q = 0; q < mask.queries; ++q)
      for (std::size_t k = *eos_cut + 1; k < mask.keys; ++k)
        if (k != q) mask.set(q, k, false);
  }
  return mask;
}

/// Parallel decoder outputs for `query_rows` given the current inputs.
template <typename T>
DecoderOutputs<T> parallel_forward(const Model<T>& model, const FeatureMap<T>& fm, std::span<const int> tokens,
                                   std::span<const std::size_t> query_rows, std::optional<std::size_t> eos_cut = {}) {
  return run_decoder(model.parallel(), model.config(), tokens, query_rows, parallel_visibility(tokens, eos_cut), fm,
                     model.positions());
}

template <typename T>
struct TeacherOutputs {
  Tensor<T> logits;    // [T × 37]
  Tensor<T> features;  // [T × d]
};

/// Teacher-forced pass over an EOS-terminated label: inputs are the labels
/// shifted right behind BOS, with a causal mask.
template <typename T>
TeacherOutputs<T> teacher_forward(const Model<T>& model, const FeatureMap<T>& fm, std::span<const int> labels) {
  if (labels.empty() || labels.back() != Vocab::eos) throw ConfigError("teacher labels must end with EOS");
  if (labels.size() > model.config().max_length) throw ConfigError("teacher labels exceed max length");
  std::vector<int> inputs{Vocab::bos};
  inputs.insert(inputs.end(), labels.begin(), labels.end() - 1);
  std::vector<std::size_t> rows(inputs.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  auto out = run_decoder(model.teacher(), model.config(), inputs, rows, build_future_mask(inputs.size()), fm,
                         model.positions());
  return {out.logits, out.features};
}

template <typename T>
std::vector<double> softmax_row(const Tensor<T>& logits, std::size_t row) {
  const auto c = logits.cols();
  std::vector<double> out(c);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(logits.at(row, j)));
  double z = 0;
  for (std::size_t j = 0; j < c; ++j) {
    out[j] = std::exp(static_cast<double>(logits.at(row, j)) - mx);
    z += out[j];
  }
  for (auto& v : out) v /= z;
  return out;
}

/// One fixed-shape pass over all L positions; rows for pending positions are
/// reported.
template <typename T>
class ParallelPredictor {
 public:
  ParallelPredictor(const Model<T>& model, const FeatureMap<T>& fm) : model_(model), fm_(fm) {}

  StepProbabilities operator()(const DecodeState& state) const {
    NoGrad<T> no_grad;
    std::vector<std::size_t> rows(state.length());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    const auto out = parallel_forward(model_, fm_, state.tokens, rows, state.eos_cut);
    StepProbabilities probs(state.length());
    for (auto t : state.pending()) probs.set_row(t, softmax_row(out.logits, t));
    return probs;
  }

 private:
  const Model<T>& model_;
  const FeatureMap<T>& fm_;
};

/// Next-token distribution from the teacher. The prefix is padded to L
/// positions and recomputed in full on every call (no cache); the causal mask
/// keeps the padding invisible.
template <typename T>
class TeacherPredictor {
 public:
  TeacherPredictor(const Model<T>& model, const FeatureMap<T>& fm) : model_(model), fm_(fm) {}

  std::vector<double> operator()(std::span<const int> prefix) const {
    NoGrad<T> no_grad;
    const auto length = model_.config().max_length;
    if (prefix.empty() || prefix.size() > length) throw DimensionError("teacher prefix length out of range");
    std::vector<int> padded(prefix.begin(), prefix.end());
    padded.resize(length, Vocab::mask);
    std::vector<std::size_t> rows(length);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    const auto out = run_decoder(model_.teacher(), model_.config(), padded, rows, build_future_mask(length), fm_,
                                 model_.positions());
    return softmax_row(out.logits, prefix.size() - 1);
  }

 private:
  const Model<T>& model_;
  const FeatureMap<T>& fm_;
};

/// Image [H×W] in [0,1] as a [H×W×1] tensor.
template <typename T>
Tensor<T> image_tensor(std::span<const float> pixels, std::size_t height, std::size_t width) {
  if (pixels.size() != height * width) throw DimensionError("image pixel count does not match its extents");
  return Tensor<T>({height, width, 1}, std::vector<T>(pixels.begin(), pixels.end()));
}

/// Easy-first recognition of one image.
template <typename T>
DecodeResult recognize(const Model<T>& model, const Tensor<T>& image, const DecodeOptions& options) {
  NoGrad<T> no_grad;
  const auto fm = model.encode(image);
  return decode(ParallelPredictor<T>(model, fm), model.config().max_length, options);
}

/// Greedy left-to-right recognition with the teacher.
template <typename T>
GreedyResult teacher_greedy_decode(const Model<T>& model, const Tensor<T>& image) {
  NoGrad<T> no_grad;
  const auto fm = model.encode(image);
  return greedy_decode(TeacherPredictor<T>(model, fm), model.config().max_length);
}

}  // namespace easyfirst
