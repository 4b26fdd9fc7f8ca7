#pragma once

#include "easyfirst/tensor.hpp"

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace easyfirst {

/// Recognition symbols: 10 digits, 26 lowercase letters and EOS form the 37
/// classifier outputs. MASK and BOS exist only as decoder inputs.
struct Vocab {
  static constexpr std::string_view characters = "0123456789abcdefghijklmnopqrstuvwxyz";
  static constexpr std::size_t num_characters = 36;
  static constexpr int eos = 36;
  static constexpr std::size_t num_classes = 37;
  static constexpr int mask = 37;
  static constexpr int bos = 38;
  static constexpr std::size_t num_inputs = 39;

  static std::optional<int> index_of(char c) {
    const auto pos = characters.find(c);
    if (pos == std::string_view::npos) return std::nullopt;
    return static_cast<int>(pos);
  }

  static bool is_character(int token) { return token >= 0 && token < static_cast<int>(num_characters); }

  static char symbol(int token) {
    if (is_character(token)) return characters[static_cast<std::size_t>(token)];
    if (token == eos) return '#';
    if (token == mask) return '_';
    if (token == bos) return '^';
    throw DimensionError("token index " + std::to_string(token) + " outside vocabulary");
  }

  /// Character indices of `text`; throws on symbols outside the vocabulary.
  static std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) {
      auto idx = index_of(c);
      if (!idx) throw ConfigError(std::string("character '") + c + "' is not in the vocabulary");
      out.push_back(*idx);
    }
    return out;
  }

  /// Characters before the first EOS; MASK/BOS are rejected.
  static std::string decode(std::span<const int> tokens) {
    std::string out;
    for (int t : tokens) {
      if (t == eos) break;
      if (!is_character(t)) throw DimensionError("cannot decode non-character token " + std::to_string(t));
      out.push_back(characters[static_cast<std::size_t>(t)]);
    }
    return out;
  }

  /// One symbol per position with '_' for MASK and '#' for EOS.
  static std::string render(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) out.push_back(symbol(t));
    return out;
  }

  static bool covers(std::string_view text) {
    for (char c : text)
      if (!index_of(c)) return false;
    return true;
  }
};

/// Label indices padded with EOS to `length`. The label must be shorter than
/// `length` so at least one EOS terminates it.
inline std::vector<int> padded_targets(std::string_view label, std::size_t length) {
  if (label.size() >= length) {
    throw ConfigError("label '" + std::string(label) + "' does not fit max length " + std::to_string(length));
  }
  auto out = Vocab::encode(label);
  out.resize(length, Vocab::eos);
  return out;
}

}  // namespace easyfirst
