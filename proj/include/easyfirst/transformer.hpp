#pragma once

// Attention building blocks shared by the backbone and both decoders.
// Blocks are post-norm: every sublayer is LayerNorm(x + sublayer(x)).

#include "easyfirst/params.hpp"
#include "easyfirst/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace easyfirst {

/// Visibility of keys per query; true = visible. Every query row must see at
/// least one key.
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> visible;

  static AttentionMask full(std::size_t queries, std::size_t keys) {
    return {queries, keys, std::vector<std::uint8_t>(queries * keys, 1)};
  }

  bool operator()(std::size_t q, std::size_t k) const { return visible[q * keys + k] != 0; }
  void set(std::size_t q, std::size_t k, bool v) { visible[q * keys + k] = v ? 1 : 0; }

  void validate() const {
    if (visible.size() != queries * keys) throw DimensionError("attention mask storage does not match its extents");
    for (std::size_t q = 0; q < queries; ++q) {
      bool any = false;
      for (std::size_t k = 0; k < keys && !any; ++k) any = (*this)(q, k);
      if (!any) throw DimensionError("attention mask row " + std::to_string(q) + " hides every key");
    }
  }
};

/// Bidirectional mask that hides MASK-token keys; each position always sees
/// itself so the all-MASK first iteration stays well defined.
inline AttentionMask build_parallel_mask(std::span<const int> tokens, int mask_token) {
  if (tokens.empty()) throw DimensionError("build_parallel_mask: empty token sequence");
  const auto n = tokens.size();
  AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k < n; ++k) m.set(q, k, q == k || tokens[k] != mask_token);
  return m;
}

/// Lower-triangular visibility: query t sees keys 0..t.
inline AttentionMask build_future_mask(std::size_t length) {
  if (length == 0) throw DimensionError("build_future_mask: length must be >= 1");
  AttentionMask m{length, length, std::vector<std::uint8_t>(length * length, 0)};
  for (std::size_t q = 0; q < length; ++q)
    for (std::size_t k = 0; k <= q; ++k) m.set(q, k, true);
  return m;
}

/// Sinusoidal encodings [length×dim]: even columns sin, odd columns cos.
template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("positional encoding dim must be even, got " + std::to_string(dim));
  if (length == 0) throw ConfigError("positional encoding length must be >= 1");
  std::vector<T> values(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * freq;
      values[pos * dim + 2 * i] = static_cast<T>(std::sin(angle));
      values[pos * dim + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return Tensor<T>({length, dim}, std::move(values));
}

/// Encodings for a height×width grid flattened row-major (index r·width + c):
/// the first dim/2 columns encode the row, the rest the column.
template <typename T>
Tensor<T> positional_encoding_2d(std::size_t height, std::size_t width, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0) {
    throw ConfigError("2D positional encoding dim must be divisible by 4, got " + std::to_string(dim));
  }
  const auto half = dim / 2;
  const auto rows = positional_encoding<T>(height, half);
  const auto cols = positional_encoding<T>(width, half);
  std::vector<T> values(height * width * dim);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      T* dst = values.data() + (r * width + c) * dim;
      std::copy_n(rows.data().data() + r * half, half, dst);
      std::copy_n(cols.data().data() + c * half, half, dst + half);
    }
  return Tensor<T>({height * width, dim}, std::move(values));
}

template <typename T>
struct LinearWeights {
  Tensor<T> weight;  // [in×out]
  Tensor<T> bias;    // [out]

  static LinearWeights create(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out) {
    return {store.add(name + ".weight", {in, out}, Init::xavier_uniform), store.add(name + ".bias", {out}, Init::zeros)};
  }
};

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearWeights<T>& w) {
  return add_bias(matmul(x, w.weight), w.bias);
}

template <typename T>
struct NormWeights {
  Tensor<T> gamma;
  Tensor<T> beta;

  static NormWeights create(ParameterStore<T>& store, const std::string& name, std::size_t dim) {
    return {store.add(name + ".gamma", {dim}, Init::ones), store.add(name + ".beta", {dim}, Init::zeros)};
  }
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const NormWeights<T>& w, T eps = T(1e-5)) {
  return layer_norm(x, w.gamma, w.beta, eps);
}

template <typename T>
struct AttentionWeights {
  LinearWeights<T> query, key, value, output;

  static AttentionWeights create(ParameterStore<T>& store, const std::string& name, std::size_t dim) {
    return {LinearWeights<T>::create(store, name + ".q", dim, dim), LinearWeights<T>::create(store, name + ".k", dim, dim),
            LinearWeights<T>::create(store, name + ".v", dim, dim),
            LinearWeights<T>::create(store, name + ".o", dim, dim)};
  }
};

/// Multi-head scaled dot-product attention. Query rows come from `q`, keys
/// and values from `k` and `v`; hidden keys get zero weight.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionWeights<T>& w, std::size_t heads, const AttentionMask& mask) {
  const auto dim = q.shape().back();
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("model width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (mask.queries != q.rows() || mask.keys != k.rows() || k.rows() != v.rows()) {
    throw DimensionError("attention mask " + std::to_string(mask.queries) + "x" + std::to_string(mask.keys) +
                         " does not match queries " + to_string(q.shape()) + " / keys " + to_string(k.shape()));
  }
  const auto head_dim = dim / heads;
  const T scale_factor = T{1} / std::sqrt(static_cast<T>(head_dim));
  const auto qp = linear(q, w.query);
  const auto kp = linear(k, w.key);
  const auto vp = linear(v, w.value);
  std::vector<Tensor<T>> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = heads == 1 ? qp : slice_cols(qp, h * head_dim, head_dim);
    const auto kh = heads == 1 ? kp : slice_cols(kp, h * head_dim, head_dim);
    const auto vh = heads == 1 ? vp : slice_cols(vp, h * head_dim, head_dim);
    const auto scores = scale(matmul_transposed(qh, kh), scale_factor);
    const auto weights = masked_softmax(scores, std::span<const std::uint8_t>(mask.visible));
    outputs.push_back(matmul(weights, vh));
  }
  const auto merged = heads == 1 ? outputs.front() : concat_cols(outputs);
  return linear(merged, w.output);
}

template <typename T>
struct FeedForwardWeights {
  LinearWeights<T> expand, project;
  NormWeights<T> norm;

  static FeedForwardWeights create(ParameterStore<T>& store, const std::string& name, std::size_t dim,
                                   std::size_t hidden) {
    return {LinearWeights<T>::create(store, name + ".fc1", dim, hidden),
            LinearWeights<T>::create(store, name + ".fc2", hidden, dim), NormWeights<T>::create(store, name + ".norm", dim)};
  }
};

/// LayerNorm(x + W2·relu(W1·x)). The returned rows are the block's "FFN
/// output" used for mimicking.
template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardWeights<T>& w) {
  const auto hidden = relu(linear(x, w.expand));
  return layer_norm(add(x, linear(hidden, w.project)), w.norm);
}

template <typename T>
struct AttentionBlockWeights {
  AttentionWeights<T> attention;
  NormWeights<T> norm;

  static AttentionBlockWeights create(ParameterStore<T>& store, const std::string& name, std::size_t dim) {
    return {AttentionWeights<T>::create(store, name, dim), NormWeights<T>::create(store, name + ".norm", dim)};
  }
};

/// LayerNorm(query + attention(query, key, value)).
template <typename T>
Tensor<T> attention_block(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value,
                          const AttentionBlockWeights<T>& w, std::size_t heads, const AttentionMask& mask) {
  return layer_norm(add(query, multi_head_attention(query, key, value, w.attention, heads, mask)), w.norm);
}

/// Self-attention + FFN unit used on top of the convolutional stack.
template <typename T>
struct EncoderUnitWeights {
  AttentionBlockWeights<T> self_attention;
  FeedForwardWeights<T> ffn;

  static EncoderUnitWeights create(ParameterStore<T>& store, const std::string& name, std::size_t dim,
                                   std::size_t hidden) {
    return {AttentionBlockWeights<T>::create(store, name + ".self", dim),
            FeedForwardWeights<T>::create(store, name + ".ffn", dim, hidden)};
  }
};

template <typename T>
Tensor<T> encoder_unit(const Tensor<T>& x, const EncoderUnitWeights<T>& w, std::size_t heads) {
  const auto mask = AttentionMask::full(x.rows(), x.rows());
  return feed_forward(attention_block(x, x, x, w.self_attention, heads, mask), w.ffn);
}

/// Masked self-attention, 2D cross-attention and FFN.
template <typename T>
struct DecoderLayerWeights {
  AttentionBlockWeights<T> self_attention;
  AttentionBlockWeights<T> cross_attention;
  FeedForwardWeights<T> ffn;

  static DecoderLayerWeights create(ParameterStore<T>& store, const std::string& name, std::size_t dim,
                                    std::size_t hidden) {
    return {AttentionBlockWeights<T>::create(store, name + ".self", dim),
            AttentionBlockWeights<T>::create(store, name + ".cross", dim),
            FeedForwardWeights<T>::create(store, name + ".ffn", dim, hidden)};
  }
};

/// One decoder layer. `query` holds the rows being computed, `keys` the rows
/// they may attend to (with `self_mask` giving visibility). `memory_keys` /
/// `memory_values` are the flattened feature grid.
template <typename T>
Tensor<T> decoder_layer(const Tensor<T>& query, const Tensor<T>& keys, const AttentionMask& self_mask,
                        const Tensor<T>& memory_keys, const Tensor<T>& memory_values,
                        const DecoderLayerWeights<T>& w, std::size_t heads) {
  const auto attended = attention_block(query, keys, keys, w.self_attention, heads, self_mask);
  const auto cross_mask = AttentionMask::full(query.rows(), memory_keys.rows());
  const auto crossed = attention_block(attended, memory_keys, memory_values, w.cross_attention, heads, cross_mask);
  return feed_forward(crossed, w.ffn);
}

}  // namespace easyfirst
