#pragma once

// Easy-first iterative decoding.
//
// Every iteration predicts all still-MASK positions in parallel, commits the
// k = ceil(L/K) most confident of them and returns the rest to MASK. Committed
// positions are never re-predicted. With length post-processing enabled, the
// leftmost committed EOS fixes the text length: everything after it becomes a
// committed EOS and is hidden from attention in later iterations.
//
// The loop is independent of any network: a predictor is any callable
// mapping a DecodeState to per-position class probabilities.

#include "easyfirst/vocab.hpp"

#include <json.hpp>

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace easyfirst {

/// Class probabilities [length × num_classes]; only rows flagged `computed`
/// carry meaningful values.
struct StepProbabilities {
  std::size_t length = 0;
  std::size_t classes = Vocab::num_classes;
  std::vector<double> values;
  std::vector<std::uint8_t> computed;

  explicit StepProbabilities(std::size_t length_ = 0, std::size_t classes_ = Vocab::num_classes)
      : length(length_), classes(classes_), values(length_ * classes_, 0.0), computed(length_, 0) {}

  std::span<const double> row(std::size_t t) const { return {values.data() + t * classes, classes}; }
  std::span<double> row(std::size_t t) { return {values.data() + t * classes, classes}; }

  void set_row(std::size_t t, std::span<const double> probs) {
    if (probs.size() != classes) throw DimensionError("probability row has the wrong class count");
    std::copy(probs.begin(), probs.end(), values.begin() + static_cast<std::ptrdiff_t>(t * classes));
    computed[t] = 1;
  }

  /// (argmax class, max probability); ties go to the lower class index.
  std::pair<int, double> best(std::size_t t) const {
    const auto r = row(t);
    std::size_t arg = 0;
    for (std::size_t j = 1; j < r.size(); ++j)
      if (r[j] > r[arg]) arg = j;
    return {static_cast<int>(arg), r[arg]};
  }
};

struct DecodeState {
  std::vector<int> tokens;                // y^i; MASK where uncommitted
  std::vector<std::uint8_t> committed;
  std::vector<double> confidence;         // max-class probability at commit time
  std::vector<int> commit_iteration;      // -1 while uncommitted
  std::vector<std::uint8_t> forced;       // committed by length post-processing
  std::size_t iteration = 0;
  std::optional<std::size_t> eos_cut;

  static DecodeState initial(std::size_t length) {
    if (length == 0) throw ConfigError("decode length must be >= 1");
    DecodeState s;
    s.tokens.assign(length, Vocab::mask);
    s.committed.assign(length, 0);
    s.confidence.assign(length, 0.0);
    s.commit_iteration.assign(length, -1);
    s.forced.assign(length, 0);
    return s;
  }

  std::size_t length() const { return tokens.size(); }
  std::size_t committed_count() const {
    return static_cast<std::size_t>(std::count(committed.begin(), committed.end(), std::uint8_t{1}));
  }
  bool complete() const { return committed_count() == length(); }

  std::vector<std::size_t> pending() const {
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < length(); ++t)
      if (!committed[t]) out.push_back(t);
    return out;
  }

  /// Keys usable by self-attention: committed tokens up to the EOS cut.
  std::vector<std::uint8_t> key_visibility() const {
    std::vector<std::uint8_t> v(length(), 0);
    for (std::size_t t = 0; t < length(); ++t)
      v[t] = tokens[t] != Vocab::mask && (!eos_cut || t <= *eos_cut);
    return v;
  }
};

/// Positions committed per iteration: ceil(L/K).
inline std::size_t schedule_k(std::size_t length, std::size_t iterations) {
  if (iterations < 1 || iterations > length) {
    throw ConfigError("iteration count " + std::to_string(iterations) + " must lie in [1, " +
                      std::to_string(length) + "]");
  }
  return (length + iterations - 1) / iterations;
}

/// The (at most) k pending positions with the highest max-class probability,
/// ties broken by lower position, returned in ascending position order.
inline std::vector<std::size_t> select_commits(const DecodeState& state, const StepProbabilities& probs,
                                               std::size_t k) {
  if (k < 1) throw ConfigError("commit count k must be >= 1");
  if (probs.length != state.length()) throw DimensionError("probability table length does not match the state");
  auto candidates = state.pending();
  for (auto t : candidates) {
    if (!probs.computed[t]) throw DimensionError("no prediction for pending position " + std::to_string(t));
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    return probs.best(a).second > probs.best(b).second;
  });
  candidates.resize(std::min(k, candidates.size()));
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

/// Commits the top-k pending positions. Committed values are the argmax
/// predictions, or `commit_values[t]` when given (teacher forcing).
inline DecodeState update_step(DecodeState state, const StepProbabilities& probs, std::size_t k,
                               std::span<const int> commit_values = {}) {
  if (!commit_values.empty() && commit_values.size() != state.length()) {
    throw DimensionError("commit value sequence length does not match the state");
  }
  const auto picks = select_commits(state, probs, k);
  ++state.iteration;
  for (auto t : picks) {
    const auto [arg, conf] = probs.best(t);
    state.tokens[t] = commit_values.empty() ? arg : commit_values[t];
    state.committed[t] = 1;
    state.confidence[t] = conf;
    state.commit_iteration[t] = static_cast<int>(state.iteration);
  }
  return state;
}

/// Leftmost committed EOS fixes the length; later positions become committed
/// EOS.
inline DecodeState eos_postprocess(DecodeState state) {
  std::optional<std::size_t> first;
  for (std::size_t t = 0; t < state.length(); ++t) {
    if (state.committed[t] && state.tokens[t] == Vocab::eos) {
      first = t;
      break;
    }
  }
  if (!first) return state;
  state.eos_cut = first;
  for (std::size_t t = *first + 1; t < state.length(); ++t) {
    if (state.committed[t] && state.tokens[t] == Vocab::eos) continue;
    state.tokens[t] = Vocab::eos;
    state.committed[t] = 1;
    state.forced[t] = 1;
    state.confidence[t] = 0.0;
    if (state.commit_iteration[t] < 0) state.commit_iteration[t] = static_cast<int>(state.iteration);
  }
  return state;
}

struct Prediction {
  std::size_t position;
  int token;
  double confidence;
};

/// One easy-first iteration as seen from outside.
struct IterationRecord {
  std::size_t iteration = 0;
  std::size_t k = 0;
  std::vector<Prediction> predictions;  // every pending position this iteration
  std::vector<std::size_t> committed;
  std::vector<std::size_t> abandoned;
  std::vector<std::size_t> forced;     // set to EOS by post-processing this iteration
  std::optional<std::size_t> eos_cut;
  std::vector<int> tokens;                      // y^i after update and post-processing
  std::vector<std::vector<double>> probabilities;  // per prediction, when recorded
};

struct DecodeTrace {
  std::vector<IterationRecord> iterations;
};

struct DecodeOptions {
  std::size_t iterations = 5;
  bool eos_postprocess = true;
  bool record_probabilities = false;
};

struct DecodeResult {
  std::string text;
  DecodeState state;
  DecodeTrace trace;
  std::size_t steps = 0;  // predictor invocations
};

template <typename P>
concept StatePredictor = requires(P& p, const DecodeState& s) {
  { p(s) } -> std::convertible_to<StepProbabilities>;
};

/// Final text: characters before the EOS cut. Without a cut (post-processing
/// off, or no EOS predicted) every non-EOS position is kept, so stray
/// characters after an EOS survive.
inline std::string final_text(const DecodeState& state) {
  const auto end = state.eos_cut ? *state.eos_cut : state.length();
  std::vector<int> kept;
  for (std::size_t t = 0; t < end; ++t)
    if (Vocab::is_character(state.tokens[t])) kept.push_back(state.tokens[t]);
  return Vocab::decode(kept);
}

template <StatePredictor Predictor>
DecodeResult decode(Predictor&& predict, std::size_t length, const DecodeOptions& options) {
  const auto k = schedule_k(length, options.iterations);
  DecodeResult result;
  result.state = DecodeState::initial(length);
  // Fixed schedule: exactly K predictor passes, even once every position is
  // committed, so the number of sequential steps never depends on the input.
  for (std::size_t i = 0; i < options.iterations; ++i) {
    const StepProbabilities probs = predict(static_cast<const DecodeState&>(result.state));
    ++result.steps;
    IterationRecord rec;
    rec.k = k;
    const auto pending = result.state.pending();
    for (auto t : pending) {
      if (!probs.computed[t]) throw DimensionError("predictor skipped pending position " + std::to_string(t));
      const auto [arg, conf] = probs.best(t);
      rec.predictions.push_back({t, arg, conf});
      if (options.record_probabilities) {
        const auto r = probs.row(t);
        rec.probabilities.emplace_back(r.begin(), r.end());
      }
    }
    const auto forced_before = result.state.forced;
    result.state = update_step(std::move(result.state), probs, k);
    const auto after_update = result.state.committed;
    if (options.eos_postprocess) result.state = eos_postprocess(std::move(result.state));
    rec.iteration = result.state.iteration;
    for (auto t : pending) {
      if (after_update[t]) rec.committed.push_back(t);
      else if (!result.state.committed[t]) rec.abandoned.push_back(t);
    }
    for (std::size_t t = 0; t < result.state.length(); ++t)
      if (result.state.forced[t] && !forced_before[t]) rec.forced.push_back(t);
    rec.eos_cut = result.state.eos_cut;
    rec.tokens = result.state.tokens;
    result.trace.iterations.push_back(std::move(rec));
  }
  result.text = final_text(result.state);
  return result;
}

// ---------------------------------------------------------------------------
// Greedy left-to-right decoding
// ---------------------------------------------------------------------------

struct GreedyStep {
  std::size_t step;
  int token;
  double confidence;
};

struct GreedyResult {
  std::string text;
  std::vector<int> tokens;  // generated tokens, including a terminating EOS if produced
  std::vector<GreedyStep> steps;
  std::size_t passes = 0;
};

template <typename P>
concept NextTokenPredictor = requires(P& p, std::span<const int> prefix) {
  { p(prefix) } -> std::convertible_to<std::vector<double>>;
};

/// Feeds argmax tokens back one at a time, starting from [BOS], until EOS or
/// `max_steps` tokens.
template <NextTokenPredictor Predictor>
GreedyResult greedy_decode(Predictor&& predict, std::size_t max_steps) {
  GreedyResult result;
  std::vector<int> prefix{Vocab::bos};
  for (std::size_t step = 1; step <= max_steps; ++step) {
    const std::vector<double> probs = predict(std::span<const int>(prefix));
    ++result.passes;
    if (probs.size() != Vocab::num_classes) throw DimensionError("next-token distribution has the wrong size");
    const auto arg = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    result.steps.push_back({step, arg, probs[static_cast<std::size_t>(arg)]});
    result.tokens.push_back(arg);
    if (arg == Vocab::eos) break;
    prefix.push_back(arg);
  }
  result.text = Vocab::decode(result.tokens);
  return result;
}

// ---------------------------------------------------------------------------
// Trace serialization: one JSON object per line
// ---------------------------------------------------------------------------

inline std::string to_json_lines(const DecodeTrace& trace, bool with_probabilities = false) {
  std::string out;
  for (const auto& rec : trace.iterations) {
    nlohmann::ordered_json j;
    j["iteration"] = rec.iteration;
    j["k"] = rec.k;
    auto preds = nlohmann::ordered_json::array();
    for (const auto& p : rec.predictions) {
      nlohmann::ordered_json e;
      e["pos"] = p.position;
      e["token"] = std::string(1, Vocab::symbol(p.token));
      e["confidence"] = p.confidence;
      preds.push_back(std::move(e));
    }
    j["predictions"] = std::move(preds);
    j["committed"] = rec.committed;
    j["abandoned"] = rec.abandoned;
    j["forced"] = rec.forced;
    j["eos_cut"] = rec.eos_cut ? nlohmann::ordered_json(*rec.eos_cut) : nlohmann::ordered_json(nullptr);
    j["y"] = Vocab::render(rec.tokens);
    if (with_probabilities) j["probabilities"] = rec.probabilities;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::string to_json_lines(const GreedyResult& result) {
  std::string out;
  for (const auto& s : result.steps) {
    nlohmann::ordered_json j;
    j["step"] = s.step;
    j["token"] = std::string(1, Vocab::symbol(s.token));
    j["confidence"] = s.confidence;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace easyfirst
