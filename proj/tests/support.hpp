#pragma once

#include "easyfirst/decoding.hpp"
#include "easyfirst/tensor.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace testing_support {

using easyfirst::Tensor;

inline Tensor<double> random_tensor(easyfirst::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(easyfirst::element_count(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

struct GradCheck {
  double max_rel_error = 0;  // worst tensor-wise ‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-4)
  double max_abs_grad = 0;
};

/// Central finite differences against the tape for every element of every
/// tensor in `wrt`. Non-scalar outputs are reduced with a fixed random
/// projection so the whole Jacobian is exercised.
inline GradCheck gradcheck(std::vector<Tensor<double>> wrt, const std::function<Tensor<double>()>& forward,
                           std::mt19937_64& rng, double h = 1e-5) {
  using namespace easyfirst;
  Tensor<double> probe;
  {
    NoGrad<double> off;
    probe = forward();
  }
  const auto n = probe.size();
  const auto projection = random_tensor({n, 1}, rng);
  auto objective = [&] {
    const auto out = forward();
    if (n == 1) return reshape(out, {1, 1});
    return matmul(reshape(out, {1, n}), projection);
  };

  for (auto& w : wrt) {
    w.set_requires_grad(true);
    w.zero_grad();
  }
  {
    Tape<double> tape;
    Tape<double>::Scope scope(&tape);
    tape.backward(objective());
  }
  GradCheck result;
  for (auto& w : wrt) {
    const auto analytic = std::vector<double>(w.grad().begin(), w.grad().end());
    std::vector<double> numeric(w.size());
    auto values = w.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      NoGrad<double> off;
      const double saved = values[i];
      values[i] = saved + h;
      const double up = objective().item();
      values[i] = saved - h;
      const double down = objective().item();
      values[i] = saved;
      numeric[i] = (up - down) / (2 * h);
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
      result.max_abs_grad = std::max(result.max_abs_grad, std::abs(analytic[i]));
    }
    // Absolute floor: tensors whose true gradient is zero (e.g. key biases
    // under softmax shift invariance) only carry finite-difference noise.
    const double denom = std::max(std::sqrt(std::max(na, nn)), 1e-4);
    result.max_rel_error = std::max(result.max_rel_error, std::sqrt(diff) / denom);
  }
  return result;
}

/// Per-iteration hand-set probability tables. Row t of table i puts `p` on
/// one class and spreads 1-p evenly over the other 36.
struct StubTable {
  std::vector<std::pair<char, double>> rows;  // (symbol, p); '#' = EOS
};

inline std::vector<double> peaked(int token, double p) {
  std::vector<double> row(easyfirst::Vocab::num_classes, (1.0 - p) / 36.0);
  row[static_cast<std::size_t>(token)] = p;
  return row;
}

inline int token_of(char c) {
  if (c == '#') return easyfirst::Vocab::eos;
  return *easyfirst::Vocab::index_of(c);
}

/// Stub predictor: iteration i (1-based) reads tables[min(i-1, size-1)].
struct StubPredictor {
  std::vector<StubTable> tables;
  mutable std::size_t calls = 0;

  easyfirst::StepProbabilities operator()(const easyfirst::DecodeState& s) const {
    ++calls;
    const auto& table = tables[std::min(s.iteration, tables.size() - 1)];
    easyfirst::StepProbabilities probs(s.length());
    for (auto t : s.pending()) probs.set_row(t, peaked(token_of(table.rows[t].first), table.rows[t].second));
    return probs;
  }
};

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("easyfirst_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
