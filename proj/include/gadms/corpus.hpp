#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gadms/encoder.hpp"
#include "gadms/rng.hpp"
#include "gadms/tokenizer.hpp"

namespace gadms {

// ---------------------------------------------------------------------------
// Attribute vocabulary and procedural rendering
// ---------------------------------------------------------------------------

struct AttributeSlot {
  std::string name;
  std::vector<std::string> values;
};

// Four caption slots, each rendered into its own band of the patch grid so
// every value is visually distinct and recoverable from the image alone.
struct AttributeSpec {
  std::vector<AttributeSlot> slots;

  static AttributeSpec standard() {
    AttributeSpec s;
    s.slots = {
        {"top", {"red", "blue", "green", "yellow", "black", "white", "purple",
                 "orange"}},
        {"bottom", {"red", "blue", "green", "yellow", "black", "white",
                    "purple", "orange"}},
        {"hairstyle", {"short", "long", "ponytail", "bun", "curly"}},
        {"accessory",
         {"backpack", "handbag", "hat", "scarf", "umbrella", "none"}},
    };
    return s;
  }

  const AttributeSlot& slot(const std::string& name) const {
    for (const auto& s : slots)
      if (s.name == name) return s;
    fail(ErrorKind::Template, "unknown caption slot: " + name);
  }

  int value_index(const std::string& slot_name, const std::string& value) const {
    const AttributeSlot& s = slot(slot_name);
    for (std::size_t i = 0; i < s.values.size(); ++i)
      if (s.values[i] == value) return static_cast<int>(i);
    fail(ErrorKind::Template, "unknown value for slot " + slot_name + ": " + value);
  }
};

namespace render {

// Exact decimal constants so records survive a JSON round trip bit-for-bit.
inline const std::array<double, 3>& color_rgb(const std::string& name) {
  static const std::map<std::string, std::array<double, 3>> table = {
      {"red", {0.9, 0.1, 0.1}},    {"blue", {0.1, 0.2, 0.9}},
      {"green", {0.1, 0.8, 0.2}},  {"yellow", {0.95, 0.9, 0.1}},
      {"black", {0.05, 0.05, 0.05}}, {"white", {0.95, 0.95, 0.95}},
      {"purple", {0.6, 0.15, 0.8}}, {"orange", {0.95, 0.55, 0.1}},
  };
  auto it = table.find(name);
  check(it != table.end(), ErrorKind::Template, "no render rule for color " + name);
  return it->second;
}

// Gray-level bar codes across the 4 columns of the hair / accessory rows.
inline const std::array<double, 4>& hairstyle_pattern(const std::string& name) {
  static const std::map<std::string, std::array<double, 4>> table = {
      {"short", {0.9, 0.1, 0.1, 0.9}},    {"long", {0.1, 0.9, 0.9, 0.1}},
      {"ponytail", {0.9, 0.9, 0.1, 0.1}}, {"bun", {0.1, 0.1, 0.9, 0.9}},
      {"curly", {0.9, 0.1, 0.9, 0.1}},
  };
  auto it = table.find(name);
  check(it != table.end(), ErrorKind::Template,
        "no render rule for hairstyle " + name);
  return it->second;
}

inline const std::array<double, 4>& accessory_pattern(const std::string& name) {
  static const std::map<std::string, std::array<double, 4>> table = {
      {"backpack", {1.0, 1.0, 0.0, 0.0}}, {"handbag", {0.0, 0.0, 1.0, 1.0}},
      {"hat", {1.0, 0.0, 1.0, 0.0}},      {"scarf", {0.0, 1.0, 0.0, 1.0}},
      {"umbrella", {1.0, 0.0, 0.0, 1.0}}, {"none", {0.0, 0.0, 0.0, 0.0}},
  };
  auto it = table.find(name);
  check(it != table.end(), ErrorKind::Template,
        "no render rule for accessory " + name);
  return it->second;
}

// Patch layout on the default 8x4 grid: row 0 hair pattern, rows 1-3 top
// color, rows 4-6 bottom color, row 7 accessory pattern.
inline Mat person_image(const std::map<std::string, std::string>& slots,
                        const EncoderConfig& cfg) {
  check(cfg.grid_cols == 4 && cfg.grid_rows == 8 && cfg.patch_channels == 3,
        ErrorKind::Config, "render rule is specific to the 8x4x3 patch grid");
  const auto& top = color_rgb(slots.at("top"));
  const auto& bottom = color_rgb(slots.at("bottom"));
  const auto& hair = hairstyle_pattern(slots.at("hairstyle"));
  const auto& acc = accessory_pattern(slots.at("accessory"));
  Mat img(cfg.grid_rows * cfg.grid_cols, cfg.patch_channels);
  for (int r = 0; r < cfg.grid_rows; ++r) {
    for (int c = 0; c < cfg.grid_cols; ++c) {
      const Eigen::Index p = r * cfg.grid_cols + c;
      if (r == 0) {
        img.row(p).setConstant(hair[static_cast<std::size_t>(c)]);
      } else if (r <= 3) {
        for (int ch = 0; ch < 3; ++ch)
          img(p, ch) = top[static_cast<std::size_t>(ch)];
      } else if (r <= 6) {
        for (int ch = 0; ch < 3; ++ch)
          img(p, ch) = bottom[static_cast<std::size_t>(ch)];
      } else {
        img.row(p).setConstant(acc[static_cast<std::size_t>(c)]);
      }
    }
  }
  return img;
}

}  // namespace render

// Caption skeletons; {name} marks a slot. Every template uses each slot
// exactly once and only single-word values, so one slot = one token.
inline const std::vector<std::string>& standard_templates() {
  static const std::vector<std::string> t = {
      "a person with {hairstyle} hair wearing a {top} top and {bottom} pants "
      "carrying a {accessory}",
      "person has {hairstyle} hair a {top} shirt {bottom} trousers and a "
      "{accessory}",
      "the person in a {top} top and {bottom} pants with {hairstyle} hair "
      "holds a {accessory}",
      "someone with {hairstyle} hair dressed in a {top} jacket and {bottom} "
      "shorts carrying a {accessory}",
  };
  return t;
}

// ---------------------------------------------------------------------------
// Pair generation
// ---------------------------------------------------------------------------

struct SyntheticPair {
  std::string pair_id;
  int template_index = -1;
  std::vector<std::string> words;  // caption content words, in order
  std::map<std::string, std::string> true_slots;     // what the image shows
  std::map<std::string, std::string> caption_slots;  // what the caption says
  // Positions of contradicting words in padded token coordinates
  // (word index + 1, accounting for the leading sos).
  std::vector<int> noise_positions;
  Mat image;
};

namespace detail {

inline bool is_placeholder(const std::string& w) {
  return w.size() >= 3 && w.front() == '{' && w.back() == '}';
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

}  // namespace detail

// Samples attributes, renders the image from the true values, fills the
// caption, then corrupts each slot word with probability noise_rate by an
// attribute word the image does not show, recording the corrupted positions.
// Drawing the lie from outside the rendered values keeps every corrupted
// claim verifiably false against the image even when two slots share a
// vocabulary (top and bottom both use the color words).
inline SyntheticPair generate_pair(Rng& rng, const AttributeSpec& spec,
                                   const std::string& tmpl, double noise_rate,
                                   const EncoderConfig& cfg) {
  check(noise_rate >= 0.0 && noise_rate <= 1.0, ErrorKind::Config,
        "noise rate must lie in [0, 1]");
  SyntheticPair pair;
  pair.words = detail::split_words(tmpl);
  struct SlotUse {
    std::string name;
    int word_index;
  };
  std::vector<SlotUse> uses;
  for (std::size_t i = 0; i < pair.words.size(); ++i) {
    if (!detail::is_placeholder(pair.words[i])) continue;
    const std::string name = pair.words[i].substr(1, pair.words[i].size() - 2);
    const AttributeSlot& slot = spec.slot(name);
    const int vi = static_cast<int>(rng.below(slot.values.size()));
    pair.words[i] = slot.values[static_cast<std::size_t>(vi)];
    pair.true_slots[name] = pair.words[i];
    pair.caption_slots[name] = pair.words[i];
    uses.push_back(SlotUse{name, static_cast<int>(i)});
  }
  pair.image = render::person_image(pair.true_slots, cfg);
  std::vector<std::string> absent;
  for (const auto& s : spec.slots)
    for (const auto& v : s.values) {
      bool shown = false;
      for (const auto& [name, val] : pair.true_slots) shown |= (val == v);
      if (!shown && std::find(absent.begin(), absent.end(), v) == absent.end())
        absent.push_back(v);
    }
  for (const SlotUse& u : uses) {
    if (rng.uniform() >= noise_rate) continue;
    const std::string& lie =
        absent[static_cast<std::size_t>(rng.below(absent.size()))];
    pair.words[static_cast<std::size_t>(u.word_index)] = lie;
    pair.caption_slots[u.name] = lie;
    pair.noise_positions.push_back(u.word_index + 1);
  }
  return pair;
}

// ---------------------------------------------------------------------------
// Corpus on disk
// ---------------------------------------------------------------------------

struct PairRecord {
  std::string pair_id;
  int identity = -1;  // global pair index; the retrieval ground-truth key
  int template_index = -1;
  std::string caption;
  std::vector<int> tokens;  // content word ids (no sos/eos/pad)
  std::vector<int> noise_positions;
  nlohmann::json slots;  // true attribute values
  Mat image;
};

struct Corpus {
  nlohmann::json manifest;
  Tokenizer vocab;
  EncoderConfig encoder;  // grid + text length the records were built for
  std::vector<PairRecord> train;
  std::vector<PairRecord> test;
};

namespace detail {

inline nlohmann::json record_to_json(const PairRecord& r) {
  std::vector<double> img(r.image.data(),
                          r.image.data() + static_cast<std::size_t>(r.image.size()));
  return nlohmann::json{{"pair_id", r.pair_id},
                        {"identity", r.identity},
                        {"template", r.template_index},
                        {"caption", r.caption},
                        {"tokens", r.tokens},
                        {"noise_truth", r.noise_positions},
                        {"slots", r.slots},
                        {"image", img}};
}

inline PairRecord record_from_json(const nlohmann::json& j,
                                   const EncoderConfig& cfg) {
  PairRecord r;
  try {
    r.pair_id = j.at("pair_id").get<std::string>();
    r.identity = j.at("identity").get<int>();
    r.template_index = j.at("template").get<int>();
    r.caption = j.at("caption").get<std::string>();
    r.tokens = j.at("tokens").get<std::vector<int>>();
    r.noise_positions = j.at("noise_truth").get<std::vector<int>>();
    r.slots = j.at("slots");
    const auto img = j.at("image").get<std::vector<double>>();
    const Eigen::Index rows = cfg.grid_rows * cfg.grid_cols;
    check(static_cast<Eigen::Index>(img.size()) == rows * cfg.patch_channels,
          ErrorKind::MalformedRecord, "image blob size mismatch");
    r.image = Eigen::Map<const Mat>(img.data(), rows, cfg.patch_channels);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::MalformedRecord, std::string("bad pair record: ") + e.what());
  }
  return r;
}

inline std::string pair_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "pair-%06d", index);
  return buf;
}

}  // namespace detail

// Deterministic vocabulary: specials, then template words, then slot values,
// in declaration order.
inline Tokenizer build_vocab(const AttributeSpec& spec,
                             const std::vector<std::string>& templates) {
  Tokenizer tk;
  for (const auto& tmpl : templates)
    for (const auto& w : detail::split_words(tmpl))
      if (!detail::is_placeholder(w)) tk.intern(w);
  for (const auto& slot : spec.slots)
    for (const auto& v : slot.values) tk.intern(v);
  return tk;
}

struct CorpusStats {
  int corrupted_slots = 0;
  int total_slots = 0;
  double realized_noise_fraction() const {
    return total_slots == 0
               ? 0.0
               : static_cast<double>(corrupted_slots) / total_slots;
  }
};

// Generates train+test splits and writes manifest.json, vocab.json,
// train.jsonl and test.jsonl under `dir`. Pair i draws from its own RNG
// stream, so generation order (or parallelism) cannot change the corpus.
inline nlohmann::json build_corpus(const std::string& dir, int train_n,
                                   int test_n, double noise_rate,
                                   std::uint64_t seed,
                                   const EncoderConfig& cfg) {
  check(train_n >= 1 && test_n >= 0, ErrorKind::Config,
        "corpus needs at least one training pair");
  const AttributeSpec spec = AttributeSpec::standard();
  const auto& templates = standard_templates();
  Tokenizer vocab = build_vocab(spec, templates);
  check(vocab.size() <= cfg.vocab_size, ErrorKind::Config,
        "vocabulary exceeds the configured size");

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  check(!ec, ErrorKind::Io, "cannot create corpus directory " + dir);

  CorpusStats stats;
  auto emit_split = [&](const std::string& file, int count, int offset) {
    std::ofstream os(fs::path(dir) / file);
    check(os.good(), ErrorKind::Io, "cannot write corpus split " + file);
    for (int i = 0; i < count; ++i) {
      const int index = offset + i;
      Rng rng = derive_stream(seed, Stream::Corpus,
                              {static_cast<std::uint64_t>(index)});
      const int ti = static_cast<int>(rng.below(templates.size()));
      SyntheticPair pair = generate_pair(
          rng, spec, templates[static_cast<std::size_t>(ti)], noise_rate, cfg);
      PairRecord rec;
      rec.pair_id = detail::pair_name(index);
      rec.identity = index;
      rec.template_index = ti;
      std::string caption;
      for (const auto& w : pair.words) {
        if (!caption.empty()) caption += ' ';
        caption += w;
        rec.tokens.push_back(vocab.id(w));
      }
      rec.caption = caption;
      check(static_cast<int>(rec.tokens.size()) + 2 <= cfg.max_text_len,
            ErrorKind::Length, "caption exceeds the token budget");
      rec.noise_positions = pair.noise_positions;
      rec.slots = nlohmann::json(pair.true_slots);
      rec.image = pair.image;
      os << detail::record_to_json(rec).dump() << "\n";
      stats.corrupted_slots += static_cast<int>(pair.noise_positions.size());
      stats.total_slots += static_cast<int>(pair.true_slots.size());
    }
    check(os.good(), ErrorKind::Io, "corpus split write failed: " + file);
  };
  emit_split("train.jsonl", train_n, 0);
  emit_split("test.jsonl", test_n, train_n);
  vocab.save((fs::path(dir) / "vocab.json").string());

  nlohmann::json manifest{
      {"format_version", 1},
      {"train_count", train_n},
      {"test_count", test_n},
      {"noise_rate", noise_rate},
      {"realized_noise_fraction", stats.realized_noise_fraction()},
      {"seed", seed},
      {"grid_rows", cfg.grid_rows},
      {"grid_cols", cfg.grid_cols},
      {"patch_channels", cfg.patch_channels},
      {"max_text_len", cfg.max_text_len},
      {"vocab_file", "vocab.json"},
      {"train_file", "train.jsonl"},
      {"test_file", "test.jsonl"}};
  std::ofstream os(fs::path(dir) / "manifest.json");
  check(os.good(), ErrorKind::Io, "cannot write corpus manifest");
  os << manifest.dump(2) << "\n";
  check(os.good(), ErrorKind::Io, "corpus manifest write failed");
  return manifest;
}

inline Corpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  Corpus c;
  {
    std::ifstream is(fs::path(dir) / "manifest.json");
    check(is.good(), ErrorKind::Io, "cannot open corpus manifest in " + dir);
    try {
      is >> c.manifest;
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Integrity, std::string("bad corpus manifest: ") + e.what());
    }
  }
  check(c.manifest.value("format_version", -1) == 1, ErrorKind::Compatibility,
        "unsupported corpus format version");
  c.encoder.grid_rows = c.manifest.at("grid_rows").get<int>();
  c.encoder.grid_cols = c.manifest.at("grid_cols").get<int>();
  c.encoder.patch_channels = c.manifest.at("patch_channels").get<int>();
  c.encoder.max_text_len = c.manifest.at("max_text_len").get<int>();
  c.vocab = Tokenizer::load(
      (fs::path(dir) / c.manifest.at("vocab_file").get<std::string>()).string());

  auto read_split = [&](const std::string& file, int expect) {
    std::vector<PairRecord> out;
    std::ifstream is(fs::path(dir) / file);
    check(is.good(), ErrorKind::Io, "cannot open corpus split " + file);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::MalformedRecord,
             std::string("bad corpus line: ") + e.what());
      }
      out.push_back(detail::record_from_json(j, c.encoder));
    }
    check(static_cast<int>(out.size()) == expect, ErrorKind::Integrity,
          "corpus split size disagrees with the manifest: " + file);
    return out;
  };
  c.train = read_split(c.manifest.at("train_file").get<std::string>(),
                       c.manifest.at("train_count").get<int>());
  c.test = read_split(c.manifest.at("test_file").get<std::string>(),
                      c.manifest.at("test_count").get<int>());
  return c;
}

}  // namespace gadms
