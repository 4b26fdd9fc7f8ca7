#pragma once

// Joint training of the backbone, parallel decoder and teacher.
//
// Per sample: encode the image once, run the teacher with teacher forcing,
// replay the easy-first schedule on the parallel decoder with label values
// committed in confidence order, then combine
//   total = λ_nat·L_nat + λ_at·L_at + λ_ffn·L_ffn.
// Gradients of a batch are accumulated sample by sample and applied with Adam.

#include "easyfirst/config.hpp"
#include "easyfirst/datagen.hpp"
#include "easyfirst/decoding.hpp"
#include "easyfirst/harness.hpp"
#include "easyfirst/model.hpp"
#include "easyfirst/optim.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace easyfirst {

/// Non-finite loss or gradient; the message carries a diagnostic dump.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossBreakdown {
  double nat = 0;
  double at = 0;
  double ffn = 0;
  double total = 0;
};

template <typename T>
struct ParallelPass {
  Tensor<T> nat;                   // mean CE over every (iteration, pending position) pair
  std::vector<Tensor<T>> features;  // FFN outputs of rows 0..valid_rows-1, one per supervised iteration
  std::vector<DecodeState> states;  // state entering each supervised iteration
};

namespace detail {

inline std::optional<std::size_t> leftmost_committed_eos(const DecodeState& s) {
  for (std::size_t t = 0; t < s.length(); ++t)
    if (s.committed[t] && s.tokens[t] == Vocab::eos) return t;
  return std::nullopt;
}

}  // namespace detail

/// Replays the easy-first schedule under teacher forcing. Commit order comes
/// from the model's confidence; committed values come from `targets` [L].
/// In sampled mode a single uniformly chosen iteration is supervised and the
/// iterations before it run without a tape.
template <typename T>
ParallelPass<T> parallel_training_pass(const Model<T>& model, const FeatureMap<T>& fm, std::span<const int> targets,
                                       std::size_t valid_rows, const TrainConfig& cfg, std::mt19937_64& rng) {
  const auto L = model.config().max_length;
  if (targets.size() != L) throw DimensionError("training targets must span the decoder length");
  if (valid_rows == 0 || valid_rows > L) throw DimensionError("valid row count out of range");
  const auto K = cfg.iterations;
  const auto k = schedule_k(L, K);
  std::size_t supervised = 0;
  if (cfg.iteration_loss == IterationLoss::sampled) {
    supervised = std::uniform_int_distribution<std::size_t>(0, K - 1)(rng);
  }
  const std::vector<std::size_t> target_ids(targets.begin(), targets.end());

  ParallelPass<T> pass;
  std::vector<Tensor<T>> terms;
  std::size_t counted = 0;
  auto state = DecodeState::initial(L);
  for (std::size_t i = 0; i < K; ++i) {
    const auto pending = state.pending();
    if (pending.empty()) break;
    const auto cut = cfg.train_eos_mask ? detail::leftmost_committed_eos(state) : std::nullopt;
    const bool supervise = cfg.iteration_loss == IterationLoss::full || i == supervised;

    // Rows: every pending position, plus the mimicked rows when supervised.
    std::vector<std::uint8_t> want(L, 0);
    for (auto t : pending) want[t] = 1;
    if (supervise)
      for (std::size_t t = 0; t < valid_rows; ++t) want[t] = 1;
    std::vector<std::size_t> rows;
    std::vector<std::size_t> where(L, L);
    for (std::size_t t = 0; t < L; ++t)
      if (want[t]) {
        where[t] = rows.size();
        rows.push_back(t);
      }

    std::optional<NoGrad<T>> no_grad;
    if (!supervise) no_grad.emplace();
    const auto out = parallel_forward(model, fm, state.tokens, rows, cut);
    StepProbabilities probs(L);
    for (auto t : pending) probs.set_row(t, softmax_row(out.logits, where[t]));
    if (supervise) {
      std::vector<std::size_t> row_targets(rows.size());
      std::vector<std::uint8_t> ignore(rows.size());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        row_targets[r] = target_ids[rows[r]];
        ignore[r] = state.committed[rows[r]];
      }
      const auto ce = cross_entropy(out.logits, std::span<const std::size_t>(row_targets),
                                    std::span<const std::uint8_t>(ignore));
      terms.push_back(scale(ce, static_cast<T>(pending.size())));
      counted += pending.size();
      std::vector<std::size_t> feature_rows(valid_rows);
      for (std::size_t t = 0; t < valid_rows; ++t) feature_rows[t] = where[t];
      pass.features.push_back(gather_rows(out.features, std::span<const std::size_t>(feature_rows)));
      pass.states.push_back(state);
    }
    state = update_step(std::move(state), probs, k, targets);
    if (supervise && cfg.iteration_loss == IterationLoss::sampled) break;
  }
  if (terms.empty()) throw DimensionError("parallel training pass supervised no positions");
  pass.nat = scale(add_n(terms), T{1} / static_cast<T>(counted));
  return pass;
}

/// Mean over iterations of the per-row cosine distance between each parallel
/// feature block and `teacher_features`, which must already be detached.
template <typename T>
Tensor<T> mimic_loss(std::span<const Tensor<T>> parallel_features, const Tensor<T>& teacher_features,
                     T eps = T(1e-8)) {
  if (parallel_features.empty()) throw DimensionError("mimic_loss needs at least one feature block");
  if (teacher_features.requires_grad()) throw TapeError("mimic_loss: teacher features must be detached");
  std::vector<Tensor<T>> terms;
  for (const auto& f : parallel_features) terms.push_back(cosine_distance(f, teacher_features, {}, eps));
  return scale(add_n(terms), T{1} / static_cast<T>(terms.size()));
}

template <typename T>
struct SampleLoss {
  Tensor<T> total;
  Tensor<T> nat;
  Tensor<T> at;
  Tensor<T> ffn;  // undefined when mimicking is off
  LossBreakdown parts;
};

/// Loss of one sample. Records onto the active tape, if any.
template <typename T>
SampleLoss<T> sample_loss(const Model<T>& model, const Sample& sample, const TrainConfig& cfg, std::mt19937_64& rng) {
  const auto L = model.config().max_length;
  const auto fm = model.encode(image_tensor<T>(sample.image, sample.height, sample.width));
  auto labels = Vocab::encode(sample.label);
  labels.push_back(Vocab::eos);
  if (labels.size() > L) throw DataError("label '" + sample.label + "' does not fit the decoder length");
  const auto targets = padded_targets(sample.label, L);

  const auto teacher = teacher_forward(model, fm, labels);
  const std::vector<std::size_t> label_ids(labels.begin(), labels.end());
  SampleLoss<T> out;
  out.at = cross_entropy(teacher.logits, std::span<const std::size_t>(label_ids));
  const auto pass = parallel_training_pass(model, fm, targets, labels.size(), cfg, rng);
  out.nat = pass.nat;
  std::vector<Tensor<T>> terms{scale(out.nat, static_cast<T>(cfg.lambda_nat)),
                               scale(out.at, static_cast<T>(cfg.lambda_at))};
  if (cfg.mimicking) {
    out.ffn = mimic_loss<T>(pass.features, stop_gradient(teacher.features), static_cast<T>(cfg.cosine_eps));
    terms.push_back(scale(out.ffn, static_cast<T>(cfg.lambda_ffn)));
  }
  out.total = add_n(terms);
  out.parts.nat = static_cast<double>(out.nat.item());
  out.parts.at = static_cast<double>(out.at.item());
  out.parts.ffn = cfg.mimicking ? static_cast<double>(out.ffn.item()) : 0.0;
  out.parts.total = static_cast<double>(out.total.item());
  return out;
}

namespace detail {

inline std::string diagnostic(std::size_t step, const Sample& s, const LossBreakdown& parts, const char* what) {
  std::ostringstream os;
  os.precision(9);
  os << what << " at step " << step << "\n  sample: " << (s.filename.empty() ? "<memory>" : s.filename)
     << " label='" << s.label << "' seed=" << s.seed << "\n  L_nat=" << parts.nat << " L_at=" << parts.at
     << " L_ffn=" << parts.ffn << " total=" << parts.total;
  return os.str();
}

}  // namespace detail

/// Owns the optimizer state; one call to step() is one Adam update.
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, const TrainConfig& cfg)
      : model_(model), cfg_(cfg), rng_(detail::splitmix64(cfg.seed ^ 0x5eedULL)), params_(model.parameters().tensors()) {
    cfg.validate(model.config().max_length);
    options_.lr = cfg.lr;
    options_.beta1 = cfg.adam_beta1;
    options_.beta2 = cfg.adam_beta2;
    options_.eps = cfg.adam_eps;
  }

  /// Mean loss parts over the batch, measured before the update.
  LossBreakdown step(std::span<const Sample> batch) {
    if (batch.empty()) throw DataError("empty training batch");
    ++steps_;
    model_.parameters().zero_grad();
    LossBreakdown mean;
    const T weight = T{1} / static_cast<T>(batch.size());
    for (const auto& s : batch) {
      Tape<T> tape;
      typename Tape<T>::Scope scope(&tape);
      const auto loss = sample_loss(model_, s, cfg_, rng_);
      if (!std::isfinite(loss.parts.total) || !std::isfinite(loss.parts.nat) || !std::isfinite(loss.parts.at) ||
          !std::isfinite(loss.parts.ffn)) {
        throw NumericalError(detail::diagnostic(steps_, s, loss.parts, "non-finite loss"));
      }
      tape.backward(scale(loss.total, weight));
      mean.nat += loss.parts.nat / static_cast<double>(batch.size());
      mean.at += loss.parts.at / static_cast<double>(batch.size());
      mean.ffn += loss.parts.ffn / static_cast<double>(batch.size());
      mean.total += loss.parts.total / static_cast<double>(batch.size());
    }
    for (const auto& [name, p] : model_.parameters().entries()) {
      for (auto g : p.grad()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericalError(detail::diagnostic(steps_, batch.front(), mean, "non-finite gradient") +
                               "\n  parameter: " + name);
        }
      }
    }
    adam_step(std::span<Tensor<T>>(params_), state_, options_);
    return mean;
  }

  std::size_t steps() const { return steps_; }
  const AdamState<T>& optimizer() const { return state_; }

 private:
  Model<T>& model_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<Tensor<T>> params_;
  AdamState<T> state_;
  AdamOptions options_;
  std::size_t steps_ = 0;
};

struct MetricsRow {
  std::size_t step = 0;
  LossBreakdown loss;
  std::optional<double> val_accuracy;
};

inline std::string to_text(const MetricsRow& row) {
  std::ostringstream os;
  os.precision(6);
  os << row.step << '\t' << row.loss.nat << '\t' << row.loss.at << '\t' << row.loss.ffn << '\t' << row.loss.total
     << '\t';
  if (row.val_accuracy) os << *row.val_accuracy;
  else os << '-';
  return os.str();
}

inline constexpr std::string_view metrics_header = "step\tL_nat\tL_at\tL_ffn\ttotal\tval_accuracy";

struct TrainHooks {
  std::ostream* metrics = nullptr;                       // one line per step
  std::function<void(const MetricsRow&)> on_step;        // after each step
  std::function<void(std::size_t step)> on_checkpoint;   // at every evaluation point
  std::size_t max_steps = 0;                             // 0 = run every epoch
};

/// Runs `cfg.train.epochs` shuffled passes over `train_set`. Validation word
/// accuracy on the first `val_samples` of `val_set` is computed every
/// `eval_every` steps and after the last step.
template <typename T>
std::vector<MetricsRow> train(Model<T>& model, const RunConfig& cfg, std::span<const Sample> train_set,
                              std::span<const Sample> val_set, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  check_vocabulary(train_set);
  for (const auto& s : train_set) check_image_size(model, s);
  Trainer<T> trainer(model, cfg.train);
  const auto val = val_set.subspan(0, std::min(val_set.size(), cfg.train.val_samples));
  const DecodeOptions decode_options{cfg.train.iterations, cfg.train.eos_postprocess, false};

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 shuffle_rng(detail::splitmix64(cfg.train.seed));
  const auto B = cfg.train.batch_size;
  const std::size_t per_epoch = (train_set.size() + B - 1) / B;
  std::size_t total_steps = per_epoch * cfg.train.epochs;
  if (hooks.max_steps) total_steps = std::min(total_steps, hooks.max_steps);

  if (hooks.metrics) *hooks.metrics << metrics_header << '\n';
  std::vector<MetricsRow> rows;
  std::vector<Sample> batch;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs && trainer.steps() < total_steps; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < per_epoch && trainer.steps() < total_steps; ++b) {
      batch.clear();
      for (std::size_t i = b * B; i < std::min(order.size(), (b + 1) * B); ++i) batch.push_back(train_set[order[i]]);
      MetricsRow row;
      row.loss = trainer.step(batch);
      row.step = trainer.steps();
      const bool last = row.step == total_steps;
      if (!val.empty() && (last || (cfg.train.eval_every && row.step % cfg.train.eval_every == 0))) {
        row.val_accuracy = evaluate(model, val, decode_options).word_accuracy();
        if (hooks.on_checkpoint) hooks.on_checkpoint(row.step);
      }
      if (hooks.metrics) *hooks.metrics << to_text(row) << '\n' << std::flush;
      if (hooks.on_step) hooks.on_step(row);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace easyfirst
