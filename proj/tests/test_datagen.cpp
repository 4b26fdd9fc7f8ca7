#include "easyfirst/datagen.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <set>

using namespace easyfirst;
using testing_support::TempDir;

namespace {

RenderConfig clean_config() {
  RenderConfig cfg;
  cfg.noise_sigma = 0;
  cfg.jitter_x = 0;
  cfg.jitter_y = 0;
  cfg.max_slope = 0;
  return cfg;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Template matching against the font atlas. Reconstructs the clean layout
// (fixed 1-unit gaps, one margin, vertically centred), resamples each
// candidate glyph into the output columns it touches and keeps the glyph with
// the smallest squared residual. Layout hypotheses (length, left edge) are
// scored by the total residual of the whole image.
class TemplateOracle {
 public:
  explicit TemplateOracle(const RenderConfig& cfg)
      : cfg_(cfg), scale_(static_cast<int>(cfg.glyph_scale)), gw_(5 * scale_), gh_(7 * scale_) {}

  std::string read(const Sample& s) const {
    const int H = static_cast<int>(s.height), W = static_cast<int>(s.width);
    const double bg = s.image[0];
    double contrast = 0;
    for (auto v : s.image)
      if (std::abs(v - bg) > std::abs(contrast)) contrast = v - bg;
    std::vector<double> ink(s.image.size());
    for (std::size_t i = 0; i < ink.size(); ++i) ink[i] = (s.image[i] - bg) / contrast;

    int lo = W, hi = -1;
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c)
        if (ink[static_cast<std::size_t>(r * W + c)] > 0.25) {
          lo = std::min(lo, c);
          hi = std::max(hi, c);
        }

    double best = std::numeric_limits<double>::infinity();
    std::string best_text;
    for (int n = static_cast<int>(cfg_.min_length); n <= static_cast<int>(cfg_.max_length); ++n) {
      const int natural = gw_ * n + scale_ * (n - 1);
      const int canvas = std::max(W, natural + 2 * scale_);
      const int slack = canvas - natural - 2 * scale_;
      for (int x0 = scale_; x0 <= scale_ + slack; ++x0) {
        if (canvas == W && (x0 > lo || x0 + gw_ < lo || x0 + natural - 1 < hi || x0 + natural - 1 > hi + gw_)) continue;
        double residual = 0;
        std::string text;
        std::vector<char> covered(static_cast<std::size_t>(W), 0);
        for (int i = 0; i < n; ++i) {
          const int x = x0 + i * (gw_ + scale_);
          double slot_best = std::numeric_limits<double>::infinity();
          char slot_char = '?';
          for (std::size_t ch = 0; ch < Vocab::num_characters; ++ch) {
            const double e = slot_residual(ink, H, W, canvas, x, static_cast<int>(ch), covered, false);
            if (e < slot_best) {
              slot_best = e;
              slot_char = Vocab::characters[ch];
            }
          }
          slot_residual(ink, H, W, canvas, x, 0, covered, true);
          residual += slot_best;
          text.push_back(slot_char);
        }
        for (int c = 0; c < W; ++c)
          if (!covered[static_cast<std::size_t>(c)])
            for (int r = 0; r < H; ++r) residual += ink[static_cast<std::size_t>(r * W + c)] * ink[static_cast<std::size_t>(r * W + c)];
        if (residual < best) {
          best = residual;
          best_text = text;
        }
      }
    }
    return best_text;
  }

 private:
  // Squared error over the output columns touched by a glyph whose left edge
  // is canvas column `x`. With `mark` set, only records those columns.
  double slot_residual(const std::vector<double>& ink, int H, int W, int canvas, int x, int token,
                       std::vector<char>& covered, bool mark) const {
    const double ratio = static_cast<double>(canvas) / W;
    const int j0 = static_cast<int>(std::floor(x / ratio));
    const int j1 = std::min(W - 1, static_cast<int>(std::ceil((x + gw_) / ratio)) - 1);
    const int y = (H - gh_) / 2;
    double err = 0;
    for (int j = j0; j <= j1; ++j) {
      if (mark) {
        covered[static_cast<std::size_t>(j)] = 1;
        continue;
      }
      const double a = j * ratio, b = a + ratio;
      std::array<double, 7> column{};  // template coverage per font row
      for (int c = std::max(x, static_cast<int>(std::floor(a))); c < x + gw_ && c < b; ++c) {
        const double overlap = std::min(b, c + 1.0) - std::max(a, static_cast<double>(c));
        if (overlap <= 0) continue;
        const auto fc = static_cast<std::size_t>((c - x) / scale_);
        for (std::size_t fr = 0; fr < 7; ++fr)
          if (font::glyphs[static_cast<std::size_t>(token)][fr][fc] == '#') column[fr] += overlap / ratio;
      }
      for (int r = 0; r < H; ++r) {
        const int fr = r - y;
        const double t = fr >= 0 && fr < gh_ ? column[static_cast<std::size_t>(fr / scale_)] : 0.0;
        const double d = ink[static_cast<std::size_t>(r * W + j)] - t;
        err += d * d;
      }
    }
    return err;
  }

  RenderConfig cfg_;
  int scale_, gw_, gh_;
};

}  // namespace

TEST(RenderSample, SameSeedGivesIdenticalBytes) {
  const RenderConfig cfg;
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 0xdeadbeefULL}) {
    const auto a = render_sample(seed, cfg), b = render_sample(seed, cfg);
    EXPECT_EQ(a.label, b.label);
    ASSERT_EQ(a.image.size(), b.image.size());
    EXPECT_EQ(0, std::memcmp(a.image.data(), b.image.data(), a.image.size() * sizeof(float)));
  }
}

TEST(RenderSample, ShapeRangeAndQuantization) {
  const RenderConfig cfg;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = render_sample(seed, cfg);
    ASSERT_EQ(s.height, 32u);
    ASSERT_EQ(s.width, 128u);
    ASSERT_EQ(s.image.size(), 32u * 128u);
    ASSERT_GE(s.label.size(), 1u);
    ASSERT_LE(s.label.size(), 10u);
    ASSERT_TRUE(Vocab::covers(s.label));
    for (auto v : s.image) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
      ASSERT_EQ(v, static_cast<float>(std::lround(v * 255.0f)) / 255.0f);
    }
  }
}

TEST(RenderSample, TemplateOracleRecoversCleanLabels) {
  const auto cfg = clean_config();
  const TemplateOracle oracle(cfg);
  std::size_t correct = 0;
  std::vector<std::string> misses;
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto s = render_sample(sample_seed(7, Split::test, i), cfg);
    const auto read = oracle.read(s);
    if (read == s.label) ++correct;
    else if (misses.size() < 5) misses.push_back(s.label + " -> " + read);
  }
  EXPECT_EQ(correct, 1000u) << (misses.empty() ? "" : misses.front());
}

TEST(RenderSample, LabelLengthsAreUniform) {
  const RenderConfig cfg;
  constexpr std::size_t n = 100000;
  std::map<std::size_t, std::size_t> counts;
  for (std::size_t i = 0; i < n; ++i) ++counts[sample_label(sample_seed(1, Split::train, i), cfg).size()];
  ASSERT_EQ(counts.size(), 10u);
  for (const auto& [len, count] : counts) {
    EXPECT_GE(len, 1u);
    EXPECT_LE(len, 10u);
    EXPECT_NEAR(static_cast<double>(count) / n, 0.1, 0.02) << "length " << len;
  }
}

TEST(RenderSample, SampleLabelMatchesRenderedLabel) {
  const RenderConfig cfg;
  for (std::uint64_t seed = 100; seed < 150; ++seed) EXPECT_EQ(sample_label(seed, cfg), render_sample(seed, cfg).label);
}

TEST(RenderSample, EveryCharacterAppearsInTraining) {
  const RenderConfig cfg;
  std::set<char> seen;
  for (const auto& s : generate_samples(2000, 1, Split::train, cfg)) seen.insert(s.label.begin(), s.label.end());
  EXPECT_EQ(seen.size(), Vocab::num_characters);
}

TEST(Pgm, RoundTripIsBitExact) {
  TempDir dir;
  const auto s = render_sample(3, RenderConfig{});
  write_pgm(dir.path() / "x.pgm", s.image, s.height, s.width);
  std::size_t h = 0, w = 0;
  const auto back = read_pgm(dir.path() / "x.pgm", h, w);
  EXPECT_EQ(h, s.height);
  EXPECT_EQ(w, s.width);
  EXPECT_EQ(back, s.image);
  EXPECT_EQ(read_bytes(dir.path() / "x.pgm").substr(0, 14), "P5\n128 32\n255\n");
}

TEST(Pgm, MalformedFilesAreDataErrors) {
  TempDir dir;
  std::ofstream(dir.path() / "bad.pgm") << "P2\n2 2\n255\n0 0 0 0\n";
  std::ofstream(dir.path() / "short.pgm", std::ios::binary) << "P5\n4 4\n255\nab";
  std::size_t h = 0, w = 0;
  EXPECT_THROW(read_pgm(dir.path() / "bad.pgm", h, w), DataError);
  EXPECT_THROW(read_pgm(dir.path() / "short.pgm", h, w), DataError);
  EXPECT_THROW(read_pgm(dir.path() / "missing.pgm", h, w), DataError);
}

TEST(GenDataset, CountTenWritesTenFilesAndTenRows) {
  TempDir dir;
  const auto split = gen_dataset(dir.path(), 10, 5, Split::val, RenderConfig{});
  std::size_t images = 0;
  for (const auto& e : std::filesystem::directory_iterator(split)) images += e.path().extension() == ".pgm";
  EXPECT_EQ(images, 10u);
  std::ifstream index(split / "index.tsv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(index, line)) {
    ++rows;
    EXPECT_NE(line.find('\t'), std::string::npos);
  }
  EXPECT_EQ(rows, 10u);
  const auto loaded = load_dataset(split);
  ASSERT_EQ(loaded.size(), 10u);
  const auto expected = generate_samples(10, 5, Split::val, RenderConfig{});
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(loaded[i].label, expected[i].label);
    EXPECT_EQ(loaded[i].image, expected[i].image);
  }
}

TEST(GenDataset, SplitsAreDisjoint) {
  TempDir dir;
  std::map<Split, std::set<std::string>> names;
  std::set<std::uint64_t> seeds;
  std::size_t total = 0;
  for (auto split : {Split::train, Split::val, Split::test}) {
    for (const auto& s : load_dataset(gen_dataset(dir.path(), 50, 9, split, RenderConfig{}))) names[split].insert(s.filename);
    for (std::size_t i = 0; i < 50; ++i) seeds.insert(sample_seed(9, split, i));
    total += 50;
  }
  EXPECT_EQ(seeds.size(), total);
  for (const auto& a : names[Split::train]) {
    EXPECT_FALSE(names[Split::val].count(a));
    EXPECT_FALSE(names[Split::test].count(a));
  }
  for (const auto& a : names[Split::val]) EXPECT_FALSE(names[Split::test].count(a));
}

TEST(GenDataset, RegenerationReproducesFiles) {
  TempDir a, b;
  const auto da = gen_dataset(a.path(), 20, 11, Split::test, RenderConfig{});
  const auto db = gen_dataset(b.path(), 20, 11, Split::test, RenderConfig{});
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(da)) {
    EXPECT_EQ(read_bytes(e.path()), read_bytes(db / e.path().filename())) << e.path().filename();
    ++files;
  }
  EXPECT_EQ(files, 21u);
}

TEST(GenDataset, Errors) {
  TempDir dir;
  EXPECT_THROW(gen_dataset(dir.path(), 0, 1, Split::train, RenderConfig{}), ConfigError);
  std::ofstream(dir.path() / "file") << "x";
  EXPECT_THROW(gen_dataset(dir.path() / "file", 1, 1, Split::train, RenderConfig{}), DataError);
  EXPECT_THROW(load_dataset(dir.path() / "nowhere"), DataError);
}
