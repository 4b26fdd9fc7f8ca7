#pragma once

// Deterministic synthetic text images.
//
// Glyphs come from a built-in 5×7 bitmap font scaled by `glyph_scale`. Text is
// laid out on a canvas of the target height; if it does not fit the target
// width the canvas is widened and then box-resampled horizontally, the way
// word crops are resized to a fixed input size. Pixel values are quantized to
// 8 bits so a sample survives a PGM round trip bit-exactly.

#include "easyfirst/config.hpp"
#include "easyfirst/vocab.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace easyfirst {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sample {
  std::vector<float> image;  // height × width, row-major, values k/255
  std::size_t height = 0;
  std::size_t width = 0;
  std::string label;
  std::uint64_t seed = 0;
  std::string filename;
};

namespace font {

inline constexpr std::size_t glyph_width = 5;
inline constexpr std::size_t glyph_height = 7;

using Bitmap = std::array<std::string_view, glyph_height>;

// clang-format off
inline constexpr std::array<Bitmap, Vocab::num_characters> glyphs{{
  {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},  // 0
  {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},  // 1
  {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},  // 2
  {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},  // 3
  {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},  // 4
  {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},  // 5
  {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},  // 6
  {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},  // 7
  {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},  // 8
  {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},  // 9
  {".....", ".....", ".###.", "....#", ".####", "#...#", ".####"},  // a
  {"#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."},  // b
  {".....", ".....", ".###.", "#....", "#....", "#...#", ".###."},  // c
  {"....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"},  // d
  {".....", ".....", ".###.", "#...#", "#####", "#....", ".###."},  // e
  {"..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."},  // f
  {".....", ".####", "#...#", "#...#", ".####", "....#", ".###."},  // g
  {"#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"},  // h
  {"..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."},  // i
  {"...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."},  // j
  {"#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."},  // k
  {".#...", ".#...", ".#...", ".#...", ".#...", ".#..#", "..##."},  // l
  {".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"},  // m
  {".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"},  // n
  {".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."},  // o
  {".....", "####.", "#...#", "####.", "#....", "#....", "#...."},  // p
  {".....", ".####", "#...#", ".####", "....#", "....#", "....#"},  // q
  {".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."},  // r
  {".....", ".....", ".####", "#....", ".###.", "....#", "####."},  // s
  {".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."},  // t
  {".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"},  // u
  {".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."},  // v
  {".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."},  // w
  {".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"},  // x
  {".....", "#...#", "#...#", ".####", "....#", "#...#", ".###."},  // y
  {".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"},  // z
}};
// clang-format on

inline bool ink(int token, std::size_t row, std::size_t col) {
  return glyphs[static_cast<std::size_t>(token)][row][col] == '#';
}

}  // namespace font

/// Geometry of one rendered glyph on the pre-resample canvas.
struct GlyphPlacement {
  int token;
  int x;  // left edge
  int y;  // top edge
};

struct Layout {
  std::size_t canvas_width = 0;
  std::vector<GlyphPlacement> glyphs;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::string draw_label(std::mt19937_64& rng, const RenderConfig& cfg) {
  std::uniform_int_distribution<std::size_t> len_dist(cfg.min_length, cfg.max_length);
  std::uniform_int_distribution<std::size_t> char_dist(0, Vocab::num_characters - 1);
  const auto n = len_dist(rng);
  std::string label;
  for (std::size_t i = 0; i < n; ++i) label.push_back(Vocab::characters[char_dist(rng)]);
  return label;
}

/// Area-averaging horizontal resample of rows of `src_width` to `dst_width`.
inline std::vector<float> resample_columns(const std::vector<float>& src, std::size_t height, std::size_t src_width,
                                           std::size_t dst_width) {
  if (src_width == dst_width) return src;
  std::vector<float> dst(height * dst_width, 0.0f);
  const double ratio = static_cast<double>(src_width) / static_cast<double>(dst_width);
  for (std::size_t j = 0; j < dst_width; ++j) {
    const double lo = static_cast<double>(j) * ratio, hi = lo + ratio;
    for (auto c = static_cast<std::size_t>(lo); c < src_width && static_cast<double>(c) < hi; ++c) {
      const double overlap = std::min(hi, static_cast<double>(c + 1)) - std::max(lo, static_cast<double>(c));
      if (overlap <= 0) continue;
      for (std::size_t r = 0; r < height; ++r)
        dst[r * dst_width + j] += static_cast<float>(overlap / ratio) * src[r * src_width + c];
    }
  }
  return dst;
}

}  // namespace detail

/// Label drawn by render_sample for `seed`.
inline std::string sample_label(std::uint64_t seed, const RenderConfig& cfg) {
  std::mt19937_64 rng(seed);
  return detail::draw_label(rng, cfg);
}

/// Ink coverage in [0,1] of `layout` on a canvas [height × canvas_width].
inline std::vector<float> rasterize(const Layout& layout, std::size_t height, std::size_t scale) {
  std::vector<float> canvas(height * layout.canvas_width, 0.0f);
  for (const auto& g : layout.glyphs) {
    for (std::size_t r = 0; r < font::glyph_height * scale; ++r) {
      const int y = g.y + static_cast<int>(r);
      if (y < 0 || y >= static_cast<int>(height)) continue;
      for (std::size_t c = 0; c < font::glyph_width * scale; ++c) {
        const int x = g.x + static_cast<int>(c);
        if (x < 0 || x >= static_cast<int>(layout.canvas_width)) continue;
        if (font::ink(g.token, r / scale, c / scale)) {
          canvas[static_cast<std::size_t>(y) * layout.canvas_width + static_cast<std::size_t>(x)] = 1.0f;
        }
      }
    }
  }
  return canvas;
}

inline Sample render_sample(std::uint64_t seed, const RenderConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Sample s;
  s.seed = seed;
  s.height = cfg.height;
  s.width = cfg.width;
  s.label = detail::draw_label(rng, cfg);

  const int scale = static_cast<int>(cfg.glyph_scale);
  const int gw = static_cast<int>(font::glyph_width) * scale;
  const int gh = static_cast<int>(font::glyph_height) * scale;
  const int margin = scale;
  std::uniform_int_distribution<int> gap_jitter(0, cfg.jitter_x);
  std::vector<int> gaps;
  int natural = gw * static_cast<int>(s.label.size());
  for (std::size_t i = 1; i < s.label.size(); ++i) {
    gaps.push_back(scale + gap_jitter(rng));
    natural += gaps.back();
  }
  Layout layout;
  layout.canvas_width = std::max<std::size_t>(cfg.width, static_cast<std::size_t>(natural + 2 * margin));
  const int slack = static_cast<int>(layout.canvas_width) - natural - 2 * margin;
  std::uniform_int_distribution<int> start_dist(0, std::max(0, slack));
  int x = margin + start_dist(rng);
  std::uniform_real_distribution<double> slope_dist(-cfg.max_slope, cfg.max_slope);
  const double slope = cfg.max_slope > 0 ? slope_dist(rng) : 0.0;
  std::uniform_int_distribution<int> y_jitter(-cfg.jitter_y, cfg.jitter_y);
  const int y_base = (static_cast<int>(cfg.height) - gh) / 2;
  const double centre = static_cast<double>(layout.canvas_width) / 2.0;
  for (std::size_t i = 0; i < s.label.size(); ++i) {
    int y = y_base + y_jitter(rng) + static_cast<int>(std::lround(slope * (x + gw / 2.0 - centre)));
    y = std::clamp(y, 0, static_cast<int>(cfg.height) - gh);
    layout.glyphs.push_back({*Vocab::index_of(s.label[i]), x, y});
    if (i + 1 < s.label.size()) x += gw + gaps[i];
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double low = unit(rng) * (1.0 - cfg.min_contrast);
  const double high = low + cfg.min_contrast + unit(rng) * (1.0 - cfg.min_contrast - low);
  const bool dark_text = unit(rng) < 0.5;
  const double bg = dark_text ? high : low;
  const double fg = dark_text ? low : high;

  const auto ink = detail::resample_columns(rasterize(layout, cfg.height, cfg.glyph_scale), cfg.height,
                                            layout.canvas_width, cfg.width);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma > 0 ? cfg.noise_sigma : 1.0);
  s.image.resize(cfg.height * cfg.width);
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    double v = bg + (fg - bg) * static_cast<double>(ink[i]);
    if (cfg.noise_sigma > 0) v += noise(rng);
    v = std::clamp(v, 0.0, 1.0);
    s.image[i] = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Portable graymap I/O
// ---------------------------------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, std::span<const float> pixels, std::size_t height,
                      std::size_t width) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  std::vector<unsigned char> bytes(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

inline std::vector<float> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  auto token = [&in, &path]() {
    std::string t;
    while (in >> std::ws && in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
    }
    if (!(in >> t)) throw DataError("truncated PGM header in " + path.string());
    return t;
  };
  if (token() != "P5") throw DataError(path.string() + " is not a binary PGM");
  try {
    width = std::stoul(token());
    height = std::stoul(token());
    if (std::stoul(token()) != 255) throw DataError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw DataError("malformed PGM header in " + path.string());
  }
  in.get();
  std::vector<unsigned char> bytes(width * height);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw DataError("truncated PGM data in " + path.string());
  std::vector<float> pixels(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return pixels;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum class Split { train = 0, val = 1, test = 2 };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

/// Seed of sample `index` in `split`; splits never share seeds in practice and
/// never share filenames by construction.
inline std::uint64_t sample_seed(std::uint64_t split_seed, Split split, std::size_t index) {
  return detail::splitmix64(detail::splitmix64(split_seed * 4 + static_cast<std::uint64_t>(split)) + index);
}

inline std::vector<Sample> generate_samples(std::size_t count, std::uint64_t split_seed, Split split,
                                            const RenderConfig& cfg) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(render_sample(sample_seed(split_seed, split, i), cfg));
    std::ostringstream name;
    name << split_name(split) << '_' << std::setw(6) << std::setfill('0') << i << ".pgm";
    out.back().filename = name.str();
  }
  return out;
}

/// Writes `count` samples of `split` under dir/<split>/ plus index.tsv with
/// one "filename<TAB>label" line per sample.
inline std::filesystem::path gen_dataset(const std::filesystem::path& dir, std::size_t count,
                                         std::uint64_t split_seed, Split split, const RenderConfig& cfg) {
  if (count < 1) throw ConfigError("dataset count must be >= 1");
  const auto split_dir = dir / std::string(split_name(split));
  std::error_code ec;
  std::filesystem::create_directories(split_dir, ec);
  if (ec) throw DataError("cannot create " + split_dir.string() + ": " + ec.message());
  std::ofstream index(split_dir / "index.tsv", std::ios::binary);
  if (!index) throw DataError("cannot write " + (split_dir / "index.tsv").string());
  for (const auto& s : generate_samples(count, split_seed, split, cfg)) {
    write_pgm(split_dir / s.filename, s.image, s.height, s.width);
    index << s.filename << '\t' << s.label << '\n';
  }
  if (!index) throw DataError("short write to index in " + split_dir.string());
  return split_dir;
}

/// Reads dir/index.tsv and every image it names.
inline std::vector<Sample> load_dataset(const std::filesystem::path& split_dir) {
  std::ifstream index(split_dir / "index.tsv", std::ios::binary);
  if (!index) throw DataError("missing index.tsv in " + split_dir.string());
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(index, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(split_dir.string() + "/index.tsv line " + std::to_string(lineno) + ": missing tab");
    }
    Sample s;
    s.filename = line.substr(0, tab);
    s.label = line.substr(tab + 1);
    s.image = read_pgm(split_dir / s.filename, s.height, s.width);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw DataError("dataset " + split_dir.string() + " is empty");
  return out;
}

}  // namespace easyfirst
