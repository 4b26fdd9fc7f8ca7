// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.
//
// Criteria 1-3 and the untrained half of 4 re-run the unit-test oracles as
// subprocesses so the tolerances and instance counts live in one place.
// Criteria 4-9 train a fixed set of models on a generated dataset; data and
// checkpoints are cached in the work directory and reused when their stored
// configuration matches.

#include "easyfirst/checkpoint.hpp"
#include "easyfirst/harness.hpp"
#include "easyfirst/training.hpp"

#include <CLI11.hpp>

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace easyfirst;

namespace {

struct Outcome {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Outcome> outcomes;

void report(int id, bool pass, const std::string& detail) {
  outcomes.push_back({id, pass, detail});
  std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

std::string fmt(double v, int precision = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

struct Options {
  fs::path work;
  fs::path tests;
  fs::path config;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  bool retrain = false;
  bool oracles_only = false;
};

// ---------------------------------------------------------------------------
// Unit-test oracles as subprocesses
// ---------------------------------------------------------------------------

struct SuiteRun {
  bool ok = true;
  double seconds = 0;
  std::string failed;
};

SuiteRun run_suites(const Options& opt, const std::vector<std::pair<std::string, std::string>>& suites,
                    const std::string& log_name) {
  SuiteRun run;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < suites.size(); ++i) {
    const auto& [binary, filter] = suites[i];
    const auto log = opt.work / (log_name + "." + std::to_string(i) + ".log");
    const auto cmd = "'" + (opt.tests / binary).string() + "' --gtest_filter='" + filter + "' > '" + log.string() +
                     "' 2>&1";
    const int status = std::system(cmd.c_str());
    // A filter that matches nothing also exits 0, so require a pass count.
    std::ifstream in(log);
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    const auto passed = text.find("[  PASSED  ] ");
    const bool ran = passed != std::string::npos && std::atoi(text.c_str() + passed + 13) > 0;
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0 || !ran) {
      run.ok = false;
      run.failed += (run.failed.empty() ? "" : ", ") + binary + ":" + filter;
    }
  }
  run.seconds = seconds_since(start);
  return run;
}

void criterion_1(const Options& opt) {
  const auto run = run_suites(opt,
                              {{"test_tensor", "Gradients.*"},
                               {"test_transformer", "Gradients.*"},
                               {"test_training", "TrainingLoss.GradientsMatchFiniteDifferences"}},
                              "criterion1");
  const bool pass = run.ok && run.seconds < 120;
  report(1, pass,
         "finite-difference suite, 20 instances per operation and block, rel err < 1e-4 at 64-bit; " +
             fmt(run.seconds, 1) + " s (limit 120)" + (run.ok ? "" : "; failed: " + run.failed));
}

void criterion_2(const Options& opt) {
  const auto run = run_suites(opt,
                              {{"test_decoding", "DecodeProperties.*:Schedule.*:EosPostprocess.*:Decode.*"},
                               {"test_transformer",
                                "Masks.*:Attention.HiddenKeyHasNoInfluence:ParallelDecoder.KeysPastEosCutHaveNoInfluence"}},
                              "criterion2");
  const bool pass = run.ok && run.seconds < 60;
  report(2, pass,
         "1000 randomized stub decodes plus masked-key probes; " + fmt(run.seconds, 1) + " s (limit 60)" +
             (run.ok ? "" : "; failed: " + run.failed));
}

void criterion_3(const Options& opt) {
  const auto run = run_suites(opt, {{"test_decoding", "Golden.*"}}, "criterion3");
  report(3, run.ok, "K in {1, 2, L} traces and teacher greedy trace byte-identical to golden files" +
                        (run.ok ? std::string() : "; failed: " + run.failed));
}

// ---------------------------------------------------------------------------
// Data and models
// ---------------------------------------------------------------------------

struct Datasets {
  std::vector<Sample> train, val, test;
};

Datasets prepare_data(const Options& opt, const RunConfig& cfg) {
  const auto dir = opt.work / "data";
  const auto stamp = dir / "render.cfg";
  std::ostringstream want;
  want << to_text(cfg) << "train_count = 50000\nval_count = 500\ntest_count = 2000\n";
  std::string have;
  if (fs::exists(stamp)) {
    std::ifstream in(stamp);
    have.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  // The whole run config is stamped; only the render section and seed matter
  // but a coarse key keeps the cache logic obvious.
  if (have != want.str() || !fs::exists(dir / "test" / "index.tsv")) {
    std::cerr << "generating dataset in " << dir << std::endl;
    fs::remove_all(dir);
    gen_dataset(dir, 50000, cfg.train.seed, Split::train, cfg.render);
    gen_dataset(dir, 500, cfg.train.seed, Split::val, cfg.render);
    gen_dataset(dir, 2000, cfg.train.seed, Split::test, cfg.render);
    std::ofstream(stamp) << want.str();
  }
  return {load_dataset(dir / "train"), load_dataset(dir / "val"), load_dataset(dir / "test")};
}

struct TrainedModel {
  std::string name;
  std::uint64_t seed;
  bool mimicking;
  fs::path path;
};

TrainedModel ensure_model(const Options& opt, const RunConfig& base, const Datasets& data, std::uint64_t seed,
                          bool mimicking) {
  RunConfig cfg = base;
  cfg.train.seed = seed;
  cfg.train.mimicking = mimicking;
  TrainedModel m{(mimicking ? "mimic_seed" : "plain_seed") + std::to_string(seed), seed, mimicking, {}};
  m.path = opt.work / "models" / (m.name + ".ckpt");
  fs::create_directories(m.path.parent_path());
  if (!opt.retrain && fs::exists(m.path)) {
    try {
      if (to_text(load_checkpoint<float>(m.path).config) == to_text(cfg)) return m;
    } catch (const DataError&) {
    }
  }
  std::cerr << "training " << m.name << std::endl;
  const auto start = std::chrono::steady_clock::now();
  Model<float> model(cfg.model, cfg.train.seed);
  std::ofstream metrics(opt.work / "models" / (m.name + ".metrics.tsv"), std::ios::trunc);
  TrainHooks hooks;
  hooks.metrics = &metrics;
  hooks.on_step = [&](const MetricsRow& row) {
    if (row.val_accuracy) std::cerr << "  " << m.name << " step " << row.step << " val " << *row.val_accuracy << std::endl;
  };
  train(model, cfg, std::span<const Sample>(data.train), std::span<const Sample>(data.val), hooks);
  save_checkpoint(m.path, model, cfg);
  std::cerr << "  " << m.name << " trained in " << fmt(seconds_since(start) / 60.0, 1) << " min" << std::endl;
  return m;
}

// ---------------------------------------------------------------------------
// Trained-model criteria
// ---------------------------------------------------------------------------

/// Perturbs input token p of a padded teacher sequence and checks that every
/// output row before p is bit-identical.
bool teacher_causal(const Model<double>& model, std::span<const Sample> samples, std::size_t count) {
  const auto L = model.config().max_length;
  std::vector<std::size_t> rows(L);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const auto mask = build_future_mask(L);
  NoGrad<double> no_grad;
  for (std::size_t i = 0; i < count && i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto fm = model.encode(image_tensor<double>(s.image, s.height, s.width));
    std::vector<int> inputs{Vocab::bos};
    for (auto t : Vocab::encode(s.label)) inputs.push_back(t);
    inputs.resize(L, Vocab::mask);
    const auto base = run_decoder(model.teacher(), model.config(), inputs, rows, mask, fm, model.positions());
    for (std::size_t p = 1; p < L; ++p) {
      auto changed = inputs;
      changed[p] = static_cast<int>((static_cast<std::size_t>(changed[p] == Vocab::mask ? 0 : changed[p]) + 7 + i) %
                                    Vocab::num_characters);
      const auto probe = run_decoder(model.teacher(), model.config(), changed, rows, mask, fm, model.positions());
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < Vocab::num_classes; ++c)
          if (base.logits.at(r, c) != probe.logits.at(r, c)) return false;
    }
  }
  return true;
}

void criterion_4(const Options& opt, const std::vector<TrainedModel>& models, const Datasets& data) {
  const auto untrained = run_suites(opt, {{"test_transformer", "Teacher.CausalityProbeUntrained"}}, "criterion4");
  bool trained_ok = true;
  std::string failed;
  for (const auto& m : models) {
    const auto loaded = load_checkpoint<double>(m.path);
    if (!teacher_causal(loaded.model, std::span<const Sample>(data.test), 20)) {
      trained_ok = false;
      failed += " " + m.name;
    }
  }
  report(4, untrained.ok && trained_ok,
         "teacher perturbation probe exact at 64-bit: untrained " + std::string(untrained.ok ? "ok" : "FAILED") +
             ", trained " + std::to_string(models.size()) + " checkpoints x 20 images " +
             (trained_ok ? "ok" : "FAILED:" + failed));
}

struct ModelEval {
  std::vector<double> sweep;  // word accuracy for K = 1..5
  double postprocess_on = 0, postprocess_off = 0;  // on the length <= 5 or >= 8 subset
  double ffn_similarity = 0;
  double long_accuracy = 0;  // label length >= 8 at the configured K
  std::size_t long_count = 0;
  std::string buckets;
};

ModelEval evaluate_model(const TrainedModel& m, const Datasets& data, std::size_t k) {
  const auto loaded = load_checkpoint<float>(m.path);
  const auto& model = loaded.model;
  const std::span<const Sample> test(data.test);
  ModelEval e;
  const std::vector<std::size_t> ks{1, 2, 3, 4, 5};
  for (const auto& row : iteration_sweep(model, test, std::span<const std::size_t>(ks)))
    e.sweep.push_back(row.report.word_accuracy());

  std::vector<Sample> tails;
  for (const auto& s : data.test)
    if (s.label.size() <= 5 || s.label.size() >= 8) tails.push_back(s);
  e.postprocess_on = evaluate(model, std::span<const Sample>(tails), DecodeOptions{k, true, false}).word_accuracy();
  e.postprocess_off = evaluate(model, std::span<const Sample>(tails), DecodeOptions{k, false, false}).word_accuracy();

  e.ffn_similarity = mean_parallel_ffn_similarity(model, test.first(200));
  const auto full = evaluate(model, test, DecodeOptions{k, true, false});
  const auto long_bucket = full.at_least(8);
  e.long_accuracy = long_bucket.word_accuracy();
  e.long_count = long_bucket.count;
  e.buckets = to_text(full);
  return e;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void criterion_5(const std::vector<ModelEval>& mimic) {
  std::vector<double> avg(5, 0.0);
  for (const auto& e : mimic)
    for (std::size_t i = 0; i < 5; ++i) avg[i] += 100.0 * e.sweep[i] / static_cast<double>(mimic.size());
  bool monotone = true;
  for (std::size_t i = 0; i + 1 < 5; ++i) monotone = monotone && avg[i + 1] >= avg[i] - 0.3;
  const double gain = avg[4] - avg[0];
  std::string per_seed;
  for (const auto& e : mimic) per_seed += " " + fmt(100.0 * (e.sweep[4] - e.sweep[0]));
  std::string curve;
  for (auto v : avg) curve += " " + fmt(v);
  report(5, gain >= 1.0 && monotone,
         "seed-mean word accuracy K=1..5:" + curve + "; K=5 - K=1 = " + fmt(gain) + " points (need >= 1.0, per seed:" +
             per_seed + "); non-decreasing within 0.3: " + (monotone ? "yes" : "no"));
}

void criterion_6(const std::vector<ModelEval>& mimic, const std::vector<ModelEval>& plain) {
  std::vector<double> sim_m, sim_p, acc_m, acc_p;
  for (const auto& e : mimic) {
    sim_m.push_back(e.ffn_similarity);
    acc_m.push_back(100.0 * e.sweep[4]);
  }
  for (const auto& e : plain) {
    sim_p.push_back(e.ffn_similarity);
    acc_p.push_back(100.0 * e.sweep[4]);
  }
  const bool lower = mean(sim_m) < mean(sim_p);
  const bool not_worse = mean(acc_m) >= mean(acc_p) - 0.3;
  report(6, lower && not_worse,
         "mean off-diagonal FFN cosine over 200 samples: mimicking " + fmt(mean(sim_m), 4) + " vs none " +
             fmt(mean(sim_p), 4) + (lower ? " (lower)" : " (NOT lower)") + "; word accuracy " + fmt(mean(acc_m)) +
             " vs " + fmt(mean(acc_p)) + " (allowed drop 0.3)");
}

void criterion_7(const std::vector<ModelEval>& mimic) {
  std::vector<double> on, off;
  for (const auto& e : mimic) {
    on.push_back(100.0 * e.postprocess_on);
    off.push_back(100.0 * e.postprocess_off);
  }
  const double drop = mean(on) - mean(off);
  report(7, drop >= 0.5,
         "lengths <= 5 and >= 8: word accuracy with post-processing " + fmt(mean(on)) + ", without " + fmt(mean(off)) +
             "; drop " + fmt(drop) + " points (need >= 0.5)");
}

void criterion_8(const TrainedModel& m, const Datasets& data, std::size_t k_par) {
  const auto loaded = load_checkpoint<float>(m.path);
  std::vector<Sample> samples;
  for (const auto& s : data.test)
    if (s.label.size() >= 4) samples.push_back(s);
  BenchOptions options;
  options.warmup = 20;
  options.decodes = std::max<std::size_t>(200, samples.size());
  options.iterations = {1, k_par};
  const auto bench = bench_latency(loaded.model, std::span<const Sample>(samples), options);
  const auto* k1 = bench.find("K=1");
  const auto* k5 = bench.find("K=" + std::to_string(k_par));
  const auto* greedy = bench.find("greedy");
  auto long_only = [](std::size_t len) { return len >= 8; };
  const double t1 = k1->mean_ms_where(long_only), t5 = k5->mean_ms_where(long_only),
               tg = greedy->mean_ms_where(long_only);
  const bool ordered = t1 < t5 && t5 < tg;
  const bool steps = k1->steps_as_expected() && k5->steps_as_expected() && greedy->steps_as_expected();

  const auto by5 = k5->mean_ms_by_length();
  const auto byg = greedy->mean_ms_by_length();
  double flat_mean = 0;
  for (std::size_t len = 4; len <= 10; ++len) flat_mean += by5.at(len) / 7.0;
  double worst = 0;
  for (std::size_t len = 4; len <= 10; ++len) worst = std::max(worst, std::abs(by5.at(len) / flat_mean - 1.0));
  const bool flat = worst <= 0.10;
  // Least-squares slope of greedy latency against label length.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t len = 4; len <= 10; ++len) {
    const double x = static_cast<double>(len), y = byg.at(len);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double slope = (7 * sxy - sx * sy) / (7 * sxx - sx * sx);
  const bool grows = slope > 0 && byg.at(10) > byg.at(4);
  report(8, ordered && steps && flat && grows,
         "labels >= 8: K=1 " + fmt(t1, 3) + " ms < K=" + std::to_string(k_par) + " " + fmt(t5, 3) + " ms < greedy " +
             fmt(tg, 3) + " ms: " + (ordered ? "yes" : "no") + "; step counts 1/" + std::to_string(k_par) +
             "/length+1: " + (steps ? "yes" : "no") + "; K=" + std::to_string(k_par) +
             " max deviation over lengths 4-10 " + fmt(100 * worst, 1) + "% (limit 10%); greedy " +
             fmt(byg.at(4), 3) + " -> " + fmt(byg.at(10), 3) + " ms, slope " + fmt(slope, 4) + " ms/char");
}

void criterion_9(const std::vector<ModelEval>& mimic, const std::vector<ModelEval>& plain,
                 const std::vector<TrainedModel>& names, const fs::path& work) {
  std::vector<double> m, p;
  for (const auto& e : mimic) m.push_back(100.0 * e.long_accuracy);
  for (const auto& e : plain) p.push_back(100.0 * e.long_accuracy);
  const double gap = mean(m) - mean(p);
  std::ofstream out(work / "length_buckets.txt", std::ios::trunc);
  for (std::size_t i = 0; i < names.size(); ++i)
    out << "# " << names[i].name << '\n' << (i < mimic.size() ? mimic[i] : plain[i - mimic.size()]).buckets << '\n';
  std::ostringstream per;
  for (std::size_t i = 0; i < m.size() && i < p.size(); ++i) per << ' ' << fmt(m[i] - p[i]);
  report(9, gap >= 0.0,
         "per-length reports in " + (work / "length_buckets.txt").string() + "; length >= 8 word accuracy mimicking " +
             fmt(mean(m)) + " vs none " + fmt(mean(p)) + ", gap " + fmt(gap) + " points (need >= 0, per seed:" +
             per.str() + ")");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-9"};
  Options opt;
  opt.work = EASYFIRST_ACCEPTANCE_WORK;
  opt.tests = EASYFIRST_TEST_BINARIES;
  opt.config = EASYFIRST_ACCEPTANCE_CONFIG;
  app.add_option("--work", opt.work, "cache directory for data, checkpoints and logs")->capture_default_str();
  app.add_option("--tests", opt.tests, "directory holding the unit-test binaries")->capture_default_str();
  app.add_option("--config", opt.config, "training configuration")->check(CLI::ExistingFile)->capture_default_str();
  app.add_option("--seeds", opt.seeds, "training seeds")->delimiter(',');
  app.add_flag("--retrain", opt.retrain, "ignore cached checkpoints");
  app.add_flag("--oracles-only", opt.oracles_only, "run criteria 1-3 only (no training)");
  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(opt.work);
    const auto start = std::chrono::steady_clock::now();
    criterion_1(opt);
    criterion_2(opt);
    criterion_3(opt);
    if (opt.oracles_only) {
      bool ok = true;
      for (const auto& o : outcomes) ok = ok && o.pass;
      return ok ? 0 : 1;
    }

    RunConfig cfg = load_config(opt.config.string());
    cfg.validate();
    const auto data = prepare_data(opt, cfg);
    std::vector<TrainedModel> mimic_models, plain_models;
    for (auto seed : opt.seeds) mimic_models.push_back(ensure_model(opt, cfg, data, seed, true));
    for (auto seed : opt.seeds) plain_models.push_back(ensure_model(opt, cfg, data, seed, false));
    std::vector<TrainedModel> all = mimic_models;
    all.insert(all.end(), plain_models.begin(), plain_models.end());

    criterion_4(opt, all, data);
    const auto k = cfg.train.iterations;
    std::vector<ModelEval> mimic, plain;
    for (const auto& m : mimic_models) mimic.push_back(evaluate_model(m, data, k));
    for (const auto& m : plain_models) plain.push_back(evaluate_model(m, data, k));
    criterion_5(mimic);
    criterion_6(mimic, plain);
    criterion_7(mimic);
    criterion_8(mimic_models.front(), data, k);
    criterion_9(mimic, plain, all, opt.work);
    std::cerr << "acceptance finished in " << fmt(seconds_since(start) / 60.0, 1) << " min" << std::endl;
  } catch (const std::exception& e) {
    std::cerr << "acceptance aborted: " << e.what() << std::endl;
    return 2;
  }

  std::size_t passed = 0;
  for (const auto& o : outcomes) passed += o.pass ? 1 : 0;
  std::cout << passed << "/" << outcomes.size() << " criteria passed" << std::endl;
  return passed == outcomes.size() && outcomes.size() == 9 ? 0 : 1;
}
