// Command-line front end: data generation, training, evaluation, iteration
// sweeps, latency benchmarks, FFN-similarity export and decode traces.
//
// Exit codes: 0 success, 1 usage error, 2 data or checkpoint error,
// 3 numerical abort during training.

#include "easyfirst/checkpoint.hpp"
#include "easyfirst/harness.hpp"
#include "easyfirst/training.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace easyfirst;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iterations;
  std::string checkpoint;
  std::string dataset;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "random seed (overrides config)");
  cmd->add_option("--iterations,-K", f.iterations, "easy-first iteration count K (overrides config)");
  cmd->add_option("--checkpoint", f.checkpoint, "checkpoint path");
  cmd->add_option("--dataset", f.dataset, "dataset directory (a split directory or its parent)");
  cmd->add_option("--out", f.out, "output path");
}

RunConfig resolve_config(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
  if (f.seed) cfg.train.seed = *f.seed;
  if (f.iterations) cfg.train.iterations = *f.iterations;
  cfg.validate();
  return cfg;
}

/// `dir` itself when it holds index.tsv, else dir/<split>.
fs::path split_dir(const std::string& dir, Split split) {
  if (dir.empty()) throw ConfigError("--dataset is required");
  const fs::path p(dir);
  if (fs::exists(p / "index.tsv")) return p;
  return p / std::string(split_name(split));
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required");
}

/// Writes to --out, or stdout when it is empty.
void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

std::size_t resolve_k(const CommonFlags& f, const RunConfig& stored) {
  const auto k = f.iterations.value_or(stored.train.iterations);
  schedule_k(stored.model.max_length, k);
  return k;
}

int cmd_gen_data(const CommonFlags& f, std::size_t train_n, std::size_t val_n, std::size_t test_n) {
  require(f.out, "--out");
  const auto cfg = resolve_config(f);
  const auto seed = cfg.train.seed;
  if (train_n) gen_dataset(f.out, train_n, seed, Split::train, cfg.render);
  if (val_n) gen_dataset(f.out, val_n, seed, Split::val, cfg.render);
  if (test_n) gen_dataset(f.out, test_n, seed, Split::test, cfg.render);
  std::cout << "wrote " << train_n << " train, " << val_n << " val, " << test_n << " test samples to " << f.out << '\n';
  return 0;
}

template <typename T>
int run_training(const CommonFlags& f, const RunConfig& cfg, std::size_t max_steps) {
  const auto train_set = load_dataset(split_dir(f.dataset, Split::train));
  std::vector<Sample> val_set;
  if (fs::exists(fs::path(f.dataset) / "val" / "index.tsv")) val_set = load_dataset(fs::path(f.dataset) / "val");
  Model<T> model(cfg.model, cfg.train.seed);
  const auto metrics_path = f.out.empty() ? f.checkpoint + ".metrics.tsv" : f.out;
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw DataError("cannot open metrics log " + metrics_path);
  TrainHooks hooks;
  hooks.metrics = &metrics;
  hooks.max_steps = max_steps;
  hooks.on_checkpoint = [&](std::size_t) { save_checkpoint(f.checkpoint, model, cfg); };
  hooks.on_step = [](const MetricsRow& row) {
    if (row.val_accuracy) std::cerr << "step " << row.step << "  " << to_text(row) << '\n';
  };
  try {
    train(model, cfg, std::span<const Sample>(train_set), std::span<const Sample>(val_set), hooks);
  } catch (const NumericalError& e) {
    const auto dump = f.checkpoint + ".diagnostic.txt";
    std::ofstream(dump) << e.what() << '\n';
    throw;
  }
  save_checkpoint(f.checkpoint, model, cfg);
  std::cout << "checkpoint written to " << f.checkpoint << '\n';
  return 0;
}

int cmd_train(const CommonFlags& f, std::size_t max_steps) {
  require(f.checkpoint, "--checkpoint");
  const auto cfg = resolve_config(f);
  if (cfg.train.precision == "float64") return run_training<double>(f, cfg, max_steps);
  return run_training<float>(f, cfg, max_steps);
}

int cmd_eval(const CommonFlags& f, bool no_postprocess, bool teacher) {
  require(f.checkpoint, "--checkpoint");
  const auto loaded = load_checkpoint<float>(f.checkpoint);
  const auto samples = load_dataset(split_dir(f.dataset, Split::test));
  const auto report = teacher ? evaluate_teacher(loaded.model, std::span<const Sample>(samples))
                              : evaluate(loaded.model, std::span<const Sample>(samples),
                                         DecodeOptions{resolve_k(f, loaded.config), !no_postprocess, false});
  emit(f.out, to_text(report));
  return 0;
}

int cmd_sweep(const CommonFlags& f, std::vector<std::size_t> ks) {
  require(f.checkpoint, "--checkpoint");
  const auto loaded = load_checkpoint<float>(f.checkpoint);
  const auto samples = load_dataset(split_dir(f.dataset, Split::test));
  const auto rows = iteration_sweep(loaded.model, std::span<const Sample>(samples), std::span<const std::size_t>(ks));
  emit(f.out, sweep_tsv(rows));
  return 0;
}

int cmd_bench(const CommonFlags& f, BenchOptions options) {
  require(f.checkpoint, "--checkpoint");
  const auto loaded = load_checkpoint<float>(f.checkpoint);
  const auto samples = load_dataset(split_dir(f.dataset, Split::test));
  emit(f.out, to_text(bench_latency(loaded.model, std::span<const Sample>(samples), options)));
  return 0;
}

const Sample& pick(const std::vector<Sample>& samples, std::size_t index) {
  if (index >= samples.size()) {
    throw ConfigError("--index " + std::to_string(index) + " out of range (" + std::to_string(samples.size()) +
                      " samples)");
  }
  return samples[index];
}

int cmd_ffn_sim(const CommonFlags& f, std::size_t index) {
  require(f.checkpoint, "--checkpoint");
  require(f.out, "--out");
  const auto loaded = load_checkpoint<float>(f.checkpoint);
  const auto samples = load_dataset(split_dir(f.dataset, Split::test));
  const auto sim = ffn_similarity(loaded.model, pick(samples, index), resolve_k(f, loaded.config));
  emit(f.out + ".parallel.tsv", matrix_tsv(sim.parallel));
  emit(f.out + ".teacher.tsv", matrix_tsv(sim.teacher));
  std::cout << "text\t" << sim.text << "\nparallel_mean_off_diagonal\t" << mean_off_diagonal(sim.parallel)
            << "\nteacher_mean_off_diagonal\t" << mean_off_diagonal(sim.teacher) << '\n';
  return 0;
}

int cmd_trace(const CommonFlags& f, std::size_t index, const std::string& image, bool probabilities, bool greedy) {
  require(f.checkpoint, "--checkpoint");
  const auto loaded = load_checkpoint<float>(f.checkpoint);
  Sample sample;
  if (!image.empty()) {
    sample.image = read_pgm(image, sample.height, sample.width);
  } else {
    const auto samples = load_dataset(split_dir(f.dataset, Split::test));
    sample = pick(samples, index);
  }
  check_image_size(loaded.model, sample);
  const auto img = image_tensor<float>(sample.image, sample.height, sample.width);
  if (greedy) {
    emit(f.out, to_json_lines(teacher_greedy_decode(loaded.model, img)));
    return 0;
  }
  const auto result = recognize(loaded.model, img, DecodeOptions{resolve_k(f, loaded.config), true, probabilities});
  emit(f.out, to_json_lines(result.trace, probabilities));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Easy-first parallel text recognizer"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* gen = app.add_subcommand("gen-data", "render train/val/test splits");
  add_common(gen, flags);
  std::size_t train_n = 50000, val_n = 500, test_n = 2000;
  gen->add_option("--train", train_n, "training samples")->capture_default_str();
  gen->add_option("--val", val_n, "validation samples")->capture_default_str();
  gen->add_option("--test", test_n, "test samples")->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "train a model; --checkpoint is the output");
  add_common(train_cmd, flags);
  std::size_t max_steps = 0;
  train_cmd->add_option("--max-steps", max_steps, "stop after this many optimizer steps (0 = all epochs)");

  auto* eval = app.add_subcommand("eval", "accuracy report with per-length buckets");
  add_common(eval, flags);
  bool no_postprocess = false, teacher = false;
  eval->add_flag("--no-eos-postprocess", no_postprocess, "disable length post-processing");
  eval->add_flag("--teacher", teacher, "greedy decode with the autoregressive teacher");

  auto* sweep = app.add_subcommand("sweep", "accuracy and latency across iteration counts");
  add_common(sweep, flags);
  std::vector<std::size_t> ks{1, 2, 3, 5, 10, 30};
  sweep->add_option("--ks", ks, "iteration counts")->delimiter(',')->capture_default_str();

  auto* bench = app.add_subcommand("bench", "single-threaded decode latency: K=1, K=5, greedy");
  add_common(bench, flags);
  BenchOptions bench_options;
  bench->add_option("--warmup", bench_options.warmup)->check(CLI::Range(20, 1 << 20))->capture_default_str();
  bench->add_option("--decodes", bench_options.decodes)->check(CLI::Range(200, 1 << 24))->capture_default_str();

  auto* ffn = app.add_subcommand("ffn-sim", "FFN-output cosine similarity matrices for one sample");
  add_common(ffn, flags);
  std::size_t index = 0;
  ffn->add_option("--index", index, "sample index in the split")->capture_default_str();

  auto* trace = app.add_subcommand("trace", "per-iteration decode trace as JSON lines");
  add_common(trace, flags);
  std::string image;
  bool probabilities = false, greedy = false;
  trace->add_option("--index", index, "sample index in the split")->capture_default_str();
  trace->add_option("--image", image, "PGM image to decode instead of a dataset sample")->check(CLI::ExistingFile);
  trace->add_flag("--probabilities", probabilities, "include full class distributions");
  trace->add_flag("--greedy", greedy, "trace teacher greedy decoding instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(flags, train_n, val_n, test_n);
    if (*train_cmd) return cmd_train(flags, max_steps);
    if (*eval) return cmd_eval(flags, no_postprocess, teacher);
    if (*sweep) return cmd_sweep(flags, ks);
    if (*bench) return cmd_bench(flags, bench_options);
    if (*ffn) return cmd_ffn_sim(flags, index);
    if (*trace) return cmd_trace(flags, index, image, probabilities, greedy);
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
