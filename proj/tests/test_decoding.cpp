#include "easyfirst/decoding.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

using namespace easyfirst;
using testing_support::peaked;
using testing_support::StubPredictor;
using testing_support::StubTable;
using testing_support::token_of;

namespace {

StepProbabilities table_of(std::span<const double> confidences) {
  StepProbabilities probs(confidences.size());
  for (std::size_t t = 0; t < confidences.size(); ++t) probs.set_row(t, peaked(static_cast<int>(t % 10), confidences[t]));
  return probs;
}

DecodeState state_from(const std::string& rendered) {
  auto s = DecodeState::initial(rendered.size());
  for (std::size_t t = 0; t < rendered.size(); ++t) {
    if (rendered[t] == '_') continue;
    s.tokens[t] = token_of(rendered[t]);
    s.committed[t] = 1;
  }
  return s;
}

/// "cat" + EOS over L = 6; iteration 1 is unsure about 'a' and has a stray
/// 'x' in the tail.
StubPredictor cat_stub() {
  return StubPredictor{{StubTable{{{'c', 0.9}, {'a', 0.5}, {'t', 0.8}, {'#', 0.7}, {'#', 0.6}, {'x', 0.4}}},
                        StubTable{{{'c', 0.9}, {'a', 0.95}, {'t', 0.8}, {'#', 0.7}, {'#', 0.3}, {'#', 0.2}}}}};
}

std::string read_golden(const std::string& name) {
  std::ifstream in(std::string(EASYFIRST_TEST_DATA) + "/golden/" + name, std::ios::binary);
  EXPECT_TRUE(in) << name;
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST(Schedule, CommitCounts) {
  EXPECT_EQ(schedule_k(30, 5), 6u);
  EXPECT_EQ(schedule_k(30, 30), 1u);
  EXPECT_EQ(schedule_k(30, 1), 30u);
  EXPECT_EQ(schedule_k(7, 3), 3u);
  EXPECT_THROW(schedule_k(30, 0), ConfigError);
  EXPECT_THROW(schedule_k(30, 31), ConfigError);
}

TEST(Schedule, UnevenDivisionCommitsThreeThreeOne) {
  std::vector<std::size_t> counts;
  StubPredictor stub{{StubTable{{{'a', 0.9}, {'b', 0.8}, {'c', 0.7}, {'d', 0.6}, {'e', 0.5}, {'f', 0.4}, {'g', 0.3}}}}};
  const auto result = decode(stub, 7, {3, false, false});
  for (const auto& rec : result.trace.iterations) counts.push_back(rec.committed.size());
  EXPECT_EQ(counts, (std::vector<std::size_t>{3, 3, 1}));
  EXPECT_EQ(result.text, "abcdefg");
}

TEST(Select, TopKByConfidence) {
  const std::vector<double> conf{0.9, 0.2, 0.8, 0.4};
  const auto picks = select_commits(DecodeState::initial(4), table_of(conf), 2);
  EXPECT_EQ(picks, (std::vector<std::size_t>{0, 2}));
  const auto next = update_step(DecodeState::initial(4), table_of(conf), 2);
  EXPECT_EQ(Vocab::render(next.tokens), "0_2_");
  EXPECT_EQ(next.commit_iteration[0], 1);
  EXPECT_EQ(next.commit_iteration[1], -1);
  EXPECT_DOUBLE_EQ(next.confidence[2], 0.8);
}

TEST(Select, TiesGoToLowerPosition) {
  const std::vector<double> conf{0.5, 0.5, 0.5};
  EXPECT_EQ(select_commits(DecodeState::initial(3), table_of(conf), 1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(select_commits(DecodeState::initial(3), table_of(conf), 2), (std::vector<std::size_t>{0, 1}));
}

TEST(Select, TiesBetweenClassesGoToLowerClass) {
  StepProbabilities probs(1);
  std::vector<double> row(Vocab::num_classes, 0.0);
  row[7] = 0.5;
  row[3] = 0.5;
  probs.set_row(0, row);
  EXPECT_EQ(probs.best(0).first, 3);
}

TEST(Select, KBeyondRemainingCommitsAll) {
  auto s = state_from("a__b_");
  const std::vector<double> conf{0.1, 0.3, 0.2, 0.1, 0.9};
  EXPECT_EQ(select_commits(s, table_of(conf), 10), (std::vector<std::size_t>{1, 2, 4}));
  const auto next = update_step(s, table_of(conf), 10);
  EXPECT_TRUE(next.complete());
  EXPECT_EQ(next.tokens[0], token_of('a'));
  EXPECT_EQ(next.tokens[3], token_of('b'));
}

TEST(Select, CommittedPositionsAreNotCandidates) {
  auto s = state_from("x___");
  const std::vector<double> conf{0.99, 0.1, 0.2, 0.3};
  EXPECT_EQ(select_commits(s, table_of(conf), 1), (std::vector<std::size_t>{3}));
}

TEST(Select, MissingRowIsRejected) {
  StepProbabilities probs(2);
  probs.set_row(0, peaked(1, 0.9));
  EXPECT_THROW(select_commits(DecodeState::initial(2), probs, 1), DimensionError);
  EXPECT_THROW(select_commits(DecodeState::initial(3), probs, 1), DimensionError);
}

TEST(Update, TeacherForcedValues) {
  const std::vector<double> conf{0.9, 0.2, 0.8};
  const std::vector<int> labels{20, 21, 22};
  const auto next = update_step(DecodeState::initial(3), table_of(conf), 2, labels);
  EXPECT_EQ(next.tokens[0], 20);
  EXPECT_EQ(next.tokens[1], Vocab::mask);
  EXPECT_EQ(next.tokens[2], 22);
}

TEST(EosPostprocess, CutAndTail) {
  auto s = eos_postprocess(state_from("cat#_x"));
  EXPECT_EQ(s.eos_cut, std::optional<std::size_t>{3});
  EXPECT_EQ(Vocab::render(s.tokens), "cat###");
  EXPECT_TRUE(s.complete());
  EXPECT_EQ(s.forced, (std::vector<std::uint8_t>{0, 0, 0, 0, 1, 1}));
  EXPECT_EQ(final_text(s), "cat");
}

TEST(EosPostprocess, NoEosIsUnchanged) {
  const auto before = state_from("ab_c__");
  const auto after = eos_postprocess(before);
  EXPECT_FALSE(after.eos_cut);
  EXPECT_EQ(after.tokens, before.tokens);
  EXPECT_EQ(after.committed, before.committed);
}

TEST(EosPostprocess, LeftmostEosWins) {
  const auto s = eos_postprocess(state_from("ab#_d#"));
  EXPECT_EQ(s.eos_cut, std::optional<std::size_t>{2});
  EXPECT_EQ(Vocab::render(s.tokens), "ab####");
  EXPECT_EQ(s.forced, (std::vector<std::uint8_t>{0, 0, 0, 1, 1, 0}));
  EXPECT_EQ(final_text(s), "ab");
}

TEST(EosPostprocess, KeysPastCutAreHidden) {
  const auto s = eos_postprocess(state_from("a#__"));
  EXPECT_EQ(s.key_visibility(), (std::vector<std::uint8_t>{1, 1, 0, 0}));
}

TEST(Decode, AlwaysRunsExactlyKPasses) {
  for (std::size_t k : {1, 2, 3, 6}) {
    auto stub = cat_stub();
    const auto result = decode(stub, 6, {k, true, false});
    EXPECT_EQ(result.steps, k);
    EXPECT_EQ(stub.calls, k);
    EXPECT_EQ(result.text, "cat");
  }
}

TEST(Decode, WithoutPostprocessingTailSurvives) {
  auto stub = cat_stub();
  const auto result = decode(stub, 6, {1, false, false});
  EXPECT_EQ(Vocab::render(result.state.tokens), "cat##x");
  EXPECT_EQ(result.text, "catx");
  EXPECT_FALSE(result.state.eos_cut);
}

TEST(Golden, TraceMatchesHandComputedFiles) {
  const std::pair<std::size_t, const char*> cases[] = {{1, "cat_k1.jsonl"}, {2, "cat_k2.jsonl"}, {6, "cat_k6.jsonl"}};
  for (const auto& [k, file] : cases) {
    auto stub = cat_stub();
    const auto result = decode(stub, 6, {k, true, false});
    EXPECT_EQ(to_json_lines(result.trace), read_golden(file)) << file;
  }
}

TEST(Golden, GreedyTraceMatchesHandComputedFile) {
  const std::string target = "cat#";
  const std::vector<double> conf{0.9, 0.8, 0.7, 0.6};
  std::size_t calls = 0;
  const auto result = greedy_decode(
      [&](std::span<const int> prefix) {
        ++calls;
        EXPECT_EQ(prefix.front(), Vocab::bos);
        const auto i = prefix.size() - 1;
        return peaked(token_of(target[i]), conf[i]);
      },
      6);
  EXPECT_EQ(result.text, "cat");
  EXPECT_EQ(result.passes, 4u);
  EXPECT_EQ(calls, 4u);
  EXPECT_EQ(to_json_lines(result), read_golden("cat_greedy.jsonl"));
}

TEST(Greedy, StopsAtMaxStepsWithoutEos) {
  const auto result = greedy_decode([](std::span<const int>) { return peaked(token_of('z'), 0.9); }, 5);
  EXPECT_EQ(result.text, "zzzzz");
  EXPECT_EQ(result.passes, 5u);
}

TEST(Trace, ProbabilitiesAreRecordedOnRequest) {
  auto stub = cat_stub();
  const auto result = decode(stub, 6, {2, true, true});
  ASSERT_EQ(result.trace.iterations[0].probabilities.size(), 6u);
  EXPECT_DOUBLE_EQ(result.trace.iterations[0].probabilities[0][static_cast<std::size_t>(token_of('c'))], 0.9);
  EXPECT_NE(to_json_lines(result.trace, true).find("\"probabilities\""), std::string::npos);
}

// Random predictors: every structural invariant of the loop over 1000 decodes.
TEST(DecodeProperties, RandomizedInvariants) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> length_dist(1, 30);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto length = length_dist(rng);
    const auto iterations = std::uniform_int_distribution<std::size_t>(1, length)(rng);
    const bool post = trial % 4 != 0;
    const double eos_rate = u(rng) * 0.3;
    std::vector<DecodeState> seen;
    auto predictor = [&](const DecodeState& s) {
      seen.push_back(s);
      StepProbabilities probs(s.length());
      for (auto t : s.pending()) {
        std::vector<double> row(Vocab::num_classes);
        double z = 0;
        for (auto& v : row) z += (v = u(rng) * u(rng));
        if (u(rng) < eos_rate) z += (row[Vocab::eos] += 2.0);
        for (auto& v : row) v /= z;
        probs.set_row(t, row);
      }
      return probs;
    };
    const auto result = decode(predictor, length, {iterations, post, false});
    const auto k = schedule_k(length, iterations);

    ASSERT_EQ(result.steps, iterations);
    ASSERT_EQ(result.trace.iterations.size(), iterations);
    ASSERT_TRUE(result.state.complete());
    for (auto tok : result.state.tokens) {
      ASSERT_GE(tok, 0);
      ASSERT_LT(tok, static_cast<int>(Vocab::num_classes));
    }

    std::optional<std::size_t> previous_cut;
    for (std::size_t i = 0; i < iterations; ++i) {
      const auto& rec = result.trace.iterations[i];
      const auto& before = seen[i];
      const auto pending = before.pending();
      ASSERT_EQ(rec.committed.size(), std::min(k, pending.size()));
      // Committed confidences dominate abandoned ones.
      double weakest = 1.0;
      for (auto t : rec.committed)
        for (const auto& p : rec.predictions)
          if (p.position == t) weakest = std::min(weakest, p.confidence);
      for (const auto& p : rec.predictions) {
        if (std::find(rec.committed.begin(), rec.committed.end(), p.position) == rec.committed.end()) {
          ASSERT_LE(p.confidence, weakest);
        }
      }
      // Committed tokens persist, except tail positions overridden by the cut.
      const auto& after = i + 1 < iterations ? seen[i + 1].tokens : result.state.tokens;
      for (std::size_t t = 0; t < length; ++t) {
        if (!before.committed[t]) continue;
        if (after[t] != before.tokens[t]) {
          ASSERT_TRUE(post);
          ASSERT_TRUE(rec.eos_cut && t > *rec.eos_cut);
          ASSERT_EQ(after[t], Vocab::eos);
        }
      }
      if (post) {
        if (previous_cut) {
          ASSERT_TRUE(rec.eos_cut);
          ASSERT_LE(*rec.eos_cut, *previous_cut);
        }
        previous_cut = rec.eos_cut;
        if (rec.eos_cut) {
          for (std::size_t t = *rec.eos_cut; t < length; ++t) ASSERT_EQ(rec.tokens[t], Vocab::eos);
        }
      } else {
        ASSERT_FALSE(rec.eos_cut);
      }
    }

    const auto& text = result.text;
    ASSERT_LE(text.size(), length);
    for (char c : text) ASSERT_TRUE(Vocab::index_of(c).has_value());
    if (post) ASSERT_EQ(text.size(), result.state.eos_cut.value_or(length));

    // Stored confidence is the max-class probability of the committing iteration.
    for (std::size_t t = 0; t < length; ++t) {
      if (result.state.forced[t]) continue;
      const auto& rec = result.trace.iterations[static_cast<std::size_t>(result.state.commit_iteration[t]) - 1];
      const auto it = std::find_if(rec.predictions.begin(), rec.predictions.end(),
                                   [&](const Prediction& p) { return p.position == t; });
      ASSERT_NE(it, rec.predictions.end());
      ASSERT_EQ(it->confidence, result.state.confidence[t]);
    }
  }
}
