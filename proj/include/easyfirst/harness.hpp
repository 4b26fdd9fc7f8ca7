#pragma once

// Evaluation, iteration sweeps, latency benchmarks and FFN-similarity export.

#include "easyfirst/datagen.hpp"
#include "easyfirst/decoding.hpp"
#include "easyfirst/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace easyfirst {

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// 1 - edit distance / longer length, in [0,1].
inline double character_accuracy(std::string_view truth, std::string_view prediction) {
  const auto longest = std::max(truth.size(), prediction.size());
  if (longest == 0) return 1.0;
  return 1.0 - static_cast<double>(edit_distance(truth, prediction)) / static_cast<double>(longest);
}

struct LengthBucket {
  std::size_t count = 0;
  std::size_t word_correct = 0;
  double char_sum = 0;

  double word_accuracy() const { return count ? static_cast<double>(word_correct) / static_cast<double>(count) : 0.0; }
  double char_accuracy() const { return count ? char_sum / static_cast<double>(count) : 0.0; }
};

/// Accuracies are fractions in [0,1]. Buckets are keyed by label length.
struct EvalReport {
  std::size_t samples = 0;
  std::size_t word_correct = 0;
  double char_sum = 0;
  std::map<std::size_t, LengthBucket> by_length;
  std::vector<std::string> predictions;

  double word_accuracy() const { return samples ? static_cast<double>(word_correct) / static_cast<double>(samples) : 0.0; }
  double char_accuracy() const { return samples ? char_sum / static_cast<double>(samples) : 0.0; }

  void add(const std::string& truth, const std::string& prediction) {
    const bool exact = truth == prediction;
    const double chars = character_accuracy(truth, prediction);
    ++samples;
    word_correct += exact ? 1 : 0;
    char_sum += chars;
    auto& bucket = by_length[truth.size()];
    ++bucket.count;
    bucket.word_correct += exact ? 1 : 0;
    bucket.char_sum += chars;
    predictions.push_back(prediction);
  }

  /// Words ≥ `min_length` pooled into one bucket.
  LengthBucket at_least(std::size_t min_length) const {
    LengthBucket out;
    for (auto it = by_length.lower_bound(min_length); it != by_length.end(); ++it) {
      out.count += it->second.count;
      out.word_correct += it->second.word_correct;
      out.char_sum += it->second.char_sum;
    }
    return out;
  }
};

inline std::string to_text(const EvalReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "samples\t" << r.samples << "\nword_accuracy\t" << r.word_accuracy() << "\nchar_accuracy\t"
     << r.char_accuracy() << "\nlength\tcount\tword_accuracy\tchar_accuracy\n";
  for (const auto& [len, b] : r.by_length) {
    os << len << '\t' << b.count << '\t' << b.word_accuracy() << '\t' << b.char_accuracy() << '\n';
  }
  return os.str();
}

inline void check_vocabulary(std::span<const Sample> samples) {
  for (const auto& s : samples) {
    if (!Vocab::covers(s.label)) throw DataError("label '" + s.label + "' has characters outside the model vocabulary");
  }
}

template <typename T>
void check_image_size(const Model<T>& model, const Sample& s) {
  if (s.height != model.config().image_height || s.width != model.config().image_width) {
    throw DataError("image " + s.filename + " is " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                    ", model expects " + std::to_string(model.config().image_height) + "x" +
                    std::to_string(model.config().image_width));
  }
}

/// Scores any recognizer mapping a Sample to text.
template <typename Recognizer>
EvalReport evaluate_with(Recognizer&& recognize_one, std::span<const Sample> samples) {
  check_vocabulary(samples);
  EvalReport report;
  for (const auto& s : samples) report.add(s.label, recognize_one(s));
  return report;
}

/// Easy-first decode of every sample.
template <typename T>
EvalReport evaluate(const Model<T>& model, std::span<const Sample> samples, const DecodeOptions& options) {
  return evaluate_with(
      [&](const Sample& s) {
        check_image_size(model, s);
        return recognize(model, image_tensor<T>(s.image, s.height, s.width), options).text;
      },
      samples);
}

/// Greedy left-to-right decode of every sample with the teacher.
template <typename T>
EvalReport evaluate_teacher(const Model<T>& model, std::span<const Sample> samples) {
  return evaluate_with(
      [&](const Sample& s) {
        check_image_size(model, s);
        return teacher_greedy_decode(model, image_tensor<T>(s.image, s.height, s.width)).text;
      },
      samples);
}

// ---------------------------------------------------------------------------
// Iteration sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  std::size_t iterations = 0;
  EvalReport report;
  double mean_ms = 0;  // decode only, backbone excluded
};

template <typename T>
std::vector<SweepRow> iteration_sweep(const Model<T>& model, std::span<const Sample> samples,
                                      std::span<const std::size_t> iteration_list, bool eos_postprocess = true) {
  check_vocabulary(samples);
  for (auto k : iteration_list) schedule_k(model.config().max_length, k);
  std::vector<SweepRow> rows;
  for (auto k : iteration_list) {
    SweepRow row;
    row.iterations = k;
    double total_ms = 0;
    for (const auto& s : samples) {
      check_image_size(model, s);
      NoGrad<T> no_grad;
      const auto fm = model.encode(image_tensor<T>(s.image, s.height, s.width));
      const auto start = std::chrono::steady_clock::now();
      const auto result = decode(ParallelPredictor<T>(model, fm), model.config().max_length,
                                 DecodeOptions{k, eos_postprocess, false});
      total_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      row.report.add(s.label, result.text);
    }
    row.mean_ms = samples.empty() ? 0.0 : total_ms / static_cast<double>(samples.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string sweep_tsv(std::span<const SweepRow> rows) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os << "iterations\tsamples\tword_accuracy\tchar_accuracy\tmean_ms\n";
  for (const auto& r : rows) {
    os.precision(4);
    os << r.iterations << '\t' << r.report.samples << '\t' << r.report.word_accuracy() << '\t'
       << r.report.char_accuracy() << '\t';
    os.precision(3);
    os << r.mean_ms << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Latency benchmark
// ---------------------------------------------------------------------------

struct BenchOptions {
  std::size_t warmup = 20;
  std::size_t decodes = 200;
  std::vector<std::size_t> iterations{1, 5};
  bool greedy = true;
};

/// One decoding configuration. Times are per decode in milliseconds and
/// exclude the shared backbone.
struct BenchEntry {
  std::string name;
  std::size_t iterations = 0;  // 0 for greedy
  std::vector<double> ms;
  std::vector<std::size_t> steps;           // sequential predictor passes per decode
  std::vector<std::size_t> expected_steps;  // K, or output length + 1 for greedy
  std::vector<std::size_t> label_lengths;

  double mean_ms() const {
    return ms.empty() ? 0.0 : std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  }
  double median_ms() const {
    if (ms.empty()) return 0.0;
    auto sorted = ms;
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    return n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  }
  bool steps_as_expected() const { return steps == expected_steps; }

  /// Mean latency over decodes whose label length satisfies `pred`.
  template <typename Pred>
  double mean_ms_where(Pred pred) const {
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < ms.size(); ++i)
      if (pred(label_lengths[i])) {
        sum += ms[i];
        ++n;
      }
    return n ? sum / static_cast<double>(n) : 0.0;
  }

  std::map<std::size_t, double> mean_ms_by_length() const {
    std::map<std::size_t, std::pair<double, std::size_t>> acc;
    for (std::size_t i = 0; i < ms.size(); ++i) {
      auto& a = acc[label_lengths[i]];
      a.first += ms[i];
      ++a.second;
    }
    std::map<std::size_t, double> out;
    for (const auto& [len, a] : acc) out[len] = a.first / static_cast<double>(a.second);
    return out;
  }
};

struct BenchReport {
  std::vector<BenchEntry> entries;

  const BenchEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

template <typename T>
BenchReport bench_latency(const Model<T>& model, std::span<const Sample> samples, const BenchOptions& options = {}) {
  if (samples.empty()) throw DataError("bench needs at least one sample");
  std::vector<FeatureMap<T>> features;
  {
    NoGrad<T> no_grad;
    for (const auto& s : samples) {
      check_image_size(model, s);
      features.push_back(model.encode(image_tensor<T>(s.image, s.height, s.width)));
    }
  }
  const auto L = model.config().max_length;
  using clock = std::chrono::steady_clock;
  BenchReport report;
  auto run = [&](BenchEntry entry, auto&& decode_one) {
    for (std::size_t i = 0; i < options.warmup; ++i) decode_one(i % samples.size());
    for (std::size_t i = 0; i < options.decodes; ++i) {
      const auto idx = i % samples.size();
      const auto start = clock::now();
      const auto [steps, expected] = decode_one(idx);
      entry.ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - start).count());
      entry.steps.push_back(steps);
      entry.expected_steps.push_back(expected);
      entry.label_lengths.push_back(samples[idx].label.size());
    }
    report.entries.push_back(std::move(entry));
  };
  for (auto k : options.iterations) {
    schedule_k(L, k);
    BenchEntry e;
    e.name = "K=" + std::to_string(k);
    e.iterations = k;
    run(std::move(e), [&](std::size_t idx) {
      const auto r = decode(ParallelPredictor<T>(model, features[idx]), L, DecodeOptions{k, true, false});
      return std::pair<std::size_t, std::size_t>{r.steps, k};
    });
  }
  if (options.greedy) {
    BenchEntry e;
    e.name = "greedy";
    run(std::move(e), [&](std::size_t idx) {
      const auto r = greedy_decode(TeacherPredictor<T>(model, features[idx]), L);
      const bool ended = !r.tokens.empty() && r.tokens.back() == Vocab::eos;
      return std::pair<std::size_t, std::size_t>{r.passes, ended ? r.text.size() + 1 : L};
    });
  }
  return report;
}

inline std::string to_text(const BenchReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "config\tdecodes\tmean_ms\tmedian_ms\tmean_steps\tsteps_as_expected\n";
  for (const auto& e : r.entries) {
    const double mean_steps =
        static_cast<double>(std::accumulate(e.steps.begin(), e.steps.end(), std::size_t{0})) /
        static_cast<double>(std::max<std::size_t>(1, e.steps.size()));
    os << e.name << '\t' << e.ms.size() << '\t' << e.mean_ms() << '\t' << e.median_ms() << '\t' << mean_steps << '\t'
       << (e.steps_as_expected() ? "yes" : "no") << '\n';
  }
  os << "\nconfig\tlabel_length\tmean_ms\n";
  for (const auto& e : r.entries)
    for (const auto& [len, ms] : e.mean_ms_by_length()) os << e.name << '\t' << len << '\t' << ms << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// FFN similarity
// ---------------------------------------------------------------------------

/// Row-wise cosine similarity matrix of `features` [T×d].
template <typename T>
std::vector<std::vector<double>> cosine_matrix(const Tensor<T>& features) {
  const auto n = features.rows(), d = features.cols();
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) norms[i] += static_cast<double>(features.at(i, c)) * features.at(i, c);
  for (auto& v : norms) v = std::sqrt(v);
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(features.at(i, c)) * features.at(j, c);
      const double v = i == j ? 1.0 : dot / std::max(norms[i] * norms[j], 1e-12);
      m[i][j] = m[j][i] = v;
    }
  return m;
}

inline double mean_off_diagonal(const std::vector<std::vector<double>>& m) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j)
      if (i != j) {
        sum += m[i][j];
        ++n;
      }
  return n ? sum / static_cast<double>(n) : 0.0;
}

struct FfnSimilarity {
  std::string text;                          // decoded text defining T = |text| + 1
  std::vector<std::vector<double>> parallel;  // first-iteration parallel decoder
  std::vector<std::vector<double>> teacher;   // teacher forced on the decoded text
};

/// Similarity of FFN outputs across the first T positions, where T is the
/// decoded length plus the EOS position, capped at L.
template <typename T>
FfnSimilarity ffn_similarity(const Model<T>& model, const Sample& sample, std::size_t iterations) {
  check_image_size(model, sample);
  NoGrad<T> no_grad;
  const auto fm = model.encode(image_tensor<T>(sample.image, sample.height, sample.width));
  const auto L = model.config().max_length;
  FfnSimilarity out;
  out.text = decode(ParallelPredictor<T>(model, fm), L, DecodeOptions{iterations, true, false}).text;
  if (out.text.size() < 2) throw DataError("ffn similarity needs a decoded length >= 2, got '" + out.text + "'");
  const auto t = std::min(out.text.size() + 1, L);
  std::vector<std::size_t> rows(t);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const std::vector<int> all_mask(L, Vocab::mask);
  out.parallel = cosine_matrix(parallel_forward(model, fm, all_mask, rows).features);
  // Teacher row i only sees inputs before i, so a full-length decode is cut
  // to the first T - 1 characters.
  auto labels = Vocab::encode(out.text.substr(0, t - 1));
  labels.push_back(Vocab::eos);
  out.teacher = cosine_matrix(teacher_forward(model, fm, labels).features);
  return out;
}

inline std::string matrix_tsv(const std::vector<std::vector<double>>& m) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  for (const auto& row : m) {
    for (std::size_t j = 0; j < row.size(); ++j) os << (j ? "\t" : "") << row[j];
    os << '\n';
  }
  return os.str();
}

/// Mean off-diagonal similarity of first-iteration parallel FFN outputs,
/// averaged over samples. Positions follow each sample's label length.
template <typename T>
double mean_parallel_ffn_similarity(const Model<T>& model, std::span<const Sample> samples) {
  double sum = 0;
  std::size_t n = 0;
  const auto L = model.config().max_length;
  const std::vector<int> all_mask(L, Vocab::mask);
  for (const auto& s : samples) {
    const auto t = std::min(s.label.size() + 1, L);
    if (t < 2) continue;
    check_image_size(model, s);
    NoGrad<T> no_grad;
    const auto fm = model.encode(image_tensor<T>(s.image, s.height, s.width));
    std::vector<std::size_t> rows(t);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    sum += mean_off_diagonal(cosine_matrix(parallel_forward(model, fm, all_mask, rows).features));
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace easyfirst
