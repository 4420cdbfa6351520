// Synthetic paired corpus: rendering rules invert cleanly, noise injection is
// truthful and hits its configured rate, generation is order-independent and
// byte-deterministic, and the on-disk format round-trips losslessly.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gadms/corpus.hpp"
#include "helpers.hpp"

using namespace gadms;
namespace fs = std::filesystem;

namespace {

EncoderConfig corpus_config() {
  EncoderConfig cfg;  // defaults carry the 8x4x3 grid the renderer expects
  return cfg;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is.good());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) out.push_back(line);
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::path("/tmp") / name;
  fs::remove_all(dir);
  return dir;
}

// placeholder slot name -> content word index, read off the template text
std::map<std::string, int> slot_word_indices(const std::string& tmpl) {
  std::map<std::string, int> out;
  std::istringstream ss(tmpl);
  std::string w;
  int i = 0;
  while (ss >> w) {
    if (w.size() >= 3 && w.front() == '{' && w.back() == '}')
      out[w.substr(1, w.size() - 2)] = i;
    ++i;
  }
  return out;
}

// Recover the attribute values from the rendered patches by inverting the
// band layout; exact equality is safe because the palette is exact decimals.
std::map<std::string, std::string> invert_image(const Mat& img,
                                                const AttributeSpec& spec) {
  std::map<std::string, std::string> out;
  auto match_color = [&](Eigen::Index p) {
    for (const auto& name : spec.slot("top").values) {
      const auto& rgb = render::color_rgb(name);
      if (img(p, 0) == rgb[0] && img(p, 1) == rgb[1] && img(p, 2) == rgb[2])
        return name;
    }
    FAIL("unrecognized color patch");
    return std::string();
  };
  out["top"] = match_color(1 * 4 + 0);
  out["bottom"] = match_color(4 * 4 + 0);
  for (const auto& name : spec.slot("hairstyle").values) {
    const auto& pat = render::hairstyle_pattern(name);
    bool all = true;
    for (int c = 0; c < 4; ++c) all = all && img(c, 0) == pat[size_t(c)];
    if (all) out["hairstyle"] = name;
  }
  for (const auto& name : spec.slot("accessory").values) {
    const auto& pat = render::accessory_pattern(name);
    bool all = true;
    for (int c = 0; c < 4; ++c) all = all && img(7 * 4 + c, 0) == pat[size_t(c)];
    if (all) out["accessory"] = name;
  }
  REQUIRE(out.size() == 4);
  return out;
}

}  // namespace

TEST_CASE("rendered images encode every attribute recoverably") {
  const AttributeSpec spec = AttributeSpec::standard();
  const EncoderConfig cfg = corpus_config();
  Rng rng = derive_stream(130, Stream::Init);
  for (int trial = 0; trial < 20; ++trial) {
    SyntheticPair pair = generate_pair(rng, spec, standard_templates()[0],
                                       0.0, cfg);
    REQUIRE(pair.image.rows() == cfg.grid_rows * cfg.grid_cols);
    REQUIRE(pair.image.cols() == 3);
    REQUIRE(pair.image.minCoeff() >= 0.0);
    REQUIRE(pair.image.maxCoeff() <= 1.0);
    const auto shown = invert_image(pair.image, spec);
    REQUIRE(shown == pair.true_slots);
  }
  SECTION("the renderer refuses other grids") {
    EncoderConfig odd = cfg;
    odd.grid_rows = 4;
    REQUIRE_THROWS_AS(
        render::person_image({{"top", "red"},
                              {"bottom", "blue"},
                              {"hairstyle", "short"},
                              {"accessory", "none"}},
                             odd),
        Error);
  }
}

TEST_CASE("noise extremes behave exactly") {
  const AttributeSpec spec = AttributeSpec::standard();
  const EncoderConfig cfg = corpus_config();

  SECTION("zero noise leaves every caption truthful") {
    Rng rng = derive_stream(131, Stream::Init);
    for (int t = 0; t < 25; ++t) {
      const SyntheticPair p =
          generate_pair(rng, spec, standard_templates()[t % 4], 0.0, cfg);
      REQUIRE(p.noise_positions.empty());
      REQUIRE(p.caption_slots == p.true_slots);
    }
  }
  SECTION("full noise replaces every slot word with an absent attribute") {
    Rng rng = derive_stream(132, Stream::Init);
    for (int t = 0; t < 25; ++t) {
      const SyntheticPair p =
          generate_pair(rng, spec, standard_templates()[t % 4], 1.0, cfg);
      REQUIRE(p.noise_positions.size() == 4);
      for (const auto& [name, truth] : p.true_slots) {
        const std::string& said = p.caption_slots.at(name);
        REQUIRE(said != truth);
        // the lie is a real attribute word...
        bool in_vocab = false;
        for (const auto& s : spec.slots)
          for (const auto& v : s.values) in_vocab |= (v == said);
        REQUIRE(in_vocab);
        // ...that no slot of the image actually shows
        for (const auto& [other_name, other_truth] : p.true_slots)
          REQUIRE(said != other_truth);
      }
      // the image always shows the truth
      REQUIRE(invert_image(p.image, spec) == p.true_slots);
    }
  }
  SECTION("rates outside [0,1] are refused") {
    Rng rng = derive_stream(133, Stream::Init);
    REQUIRE_THROWS_AS(
        generate_pair(rng, spec, standard_templates()[0], -0.1, cfg), Error);
    REQUIRE_THROWS_AS(
        generate_pair(rng, spec, standard_templates()[0], 1.5, cfg), Error);
  }
}

TEST_CASE("corpus generation is deterministic and order independent") {
  const EncoderConfig cfg = corpus_config();
  const fs::path a = fresh_dir("gadms_corpus_a");
  const fs::path b = fresh_dir("gadms_corpus_b");
  build_corpus(a.string(), 6, 3, 0.25, 42, cfg);
  build_corpus(b.string(), 6, 3, 0.25, 42, cfg);

  for (const char* f : {"manifest.json", "vocab.json", "train.jsonl",
                        "test.jsonl"})
    REQUIRE(read_file(a / f) == read_file(b / f));

  SECTION("each pair owns its stream, so split boundaries do not matter") {
    const fs::path c = fresh_dir("gadms_corpus_c");
    build_corpus(c.string(), 9, 0, 0.25, 42, cfg);
    std::vector<std::string> joined = read_lines(a / "train.jsonl");
    for (const auto& l : read_lines(a / "test.jsonl")) joined.push_back(l);
    REQUIRE(read_lines(c / "train.jsonl") == joined);
  }
  SECTION("a different seed moves the corpus") {
    const fs::path d = fresh_dir("gadms_corpus_d");
    build_corpus(d.string(), 6, 3, 0.25, 43, cfg);
    REQUIRE(read_file(d / "train.jsonl") != read_file(a / "train.jsonl"));
  }
}

TEST_CASE("generated records are internally consistent") {
  const EncoderConfig cfg = corpus_config();
  const AttributeSpec spec = AttributeSpec::standard();
  const fs::path dir = fresh_dir("gadms_corpus_consistency");
  const nlohmann::json manifest =
      build_corpus(dir.string(), 40, 10, 0.3, 7, cfg);
  const Corpus corpus = load_corpus(dir.string());

  REQUIRE(corpus.train.size() == 40);
  REQUIRE(corpus.test.size() == 10);

  std::set<std::string> ids;
  int corrupted = 0, total_slots = 0;
  auto check_split = [&](const std::vector<PairRecord>& split) {
    for (const PairRecord& r : split) {
      REQUIRE(ids.insert(r.pair_id).second);  // pair ids globally unique

      const auto wordmap =
          slot_word_indices(standard_templates()[size_t(r.template_index)]);
      std::istringstream ss(r.caption);
      std::vector<std::string> words;
      std::string w;
      while (ss >> w) words.push_back(w);

      // tokens are the caption under the saved vocabulary
      REQUIRE(corpus.vocab.encode_words(r.caption) == r.tokens);
      for (int id : r.tokens) REQUIRE(id < cfg.vocab_size);
      REQUIRE(static_cast<int>(r.tokens.size()) + 2 <= cfg.max_text_len);

      // noise positions point at exactly the slot words that contradict the
      // image; every other slot word matches what the image shows
      const auto shown = invert_image(r.image, spec);
      const std::set<int> noisy(r.noise_positions.begin(),
                                r.noise_positions.end());
      for (const auto& [slot, wi] : wordmap) {
        const bool corrupt = noisy.count(wi + 1) > 0;
        if (corrupt)
          REQUIRE(words[size_t(wi)] != shown.at(slot));
        else
          REQUIRE(words[size_t(wi)] == shown.at(slot));
      }
      REQUIRE(noisy.size() == r.noise_positions.size());
      for (int p : r.noise_positions) {
        bool is_slot_word = false;
        for (const auto& [slot, wi] : wordmap) is_slot_word |= (wi + 1 == p);
        REQUIRE(is_slot_word);
      }
      // the stored slot json matches the rendered truth
      for (const auto& [slot, value] : shown)
        REQUIRE(r.slots.at(slot).get<std::string>() == value);

      corrupted += static_cast<int>(r.noise_positions.size());
      total_slots += 4;
    }
  };
  check_split(corpus.train);
  check_split(corpus.test);

  SECTION("the realized noise fraction sits within 3 standard errors") {
    const double p = 0.3;
    const double se = std::sqrt(p * (1.0 - p) / total_slots);
    const double realized = double(corrupted) / total_slots;
    REQUIRE(std::abs(realized - p) < 3.0 * se);
    REQUIRE(manifest.at("realized_noise_fraction").get<double>() == realized);
  }
}

TEST_CASE("the on-disk corpus round-trips losslessly") {
  const EncoderConfig cfg = corpus_config();
  const fs::path dir = fresh_dir("gadms_corpus_roundtrip");
  build_corpus(dir.string(), 5, 2, 0.5, 21, cfg);
  const Corpus corpus = load_corpus(dir.string());

  const auto train_lines = read_lines(dir / "train.jsonl");
  REQUIRE(train_lines.size() == corpus.train.size());
  for (std::size_t i = 0; i < train_lines.size(); ++i)
    REQUIRE(detail::record_to_json(corpus.train[i]).dump() == train_lines[i]);

  SECTION("tampered manifests and splits are rejected") {
    {
      nlohmann::json m;
      std::ifstream is(dir / "manifest.json");
      is >> m;
      m["format_version"] = 2;
      std::ofstream os(dir / "manifest.json");
      os << m.dump(2) << "\n";
    }
    REQUIRE_THROWS_AS(load_corpus(dir.string()), Error);
  }
  SECTION("a truncated split is an integrity error") {
    {
      std::ofstream os(dir / "test.jsonl", std::ios::app);
      os << train_lines[0] << "\n";  // now one record too many
    }
    REQUIRE_THROWS_AS(load_corpus(dir.string()), Error);
  }
  SECTION("a corrupt line is a malformed record") {
    {
      std::ofstream os(dir / "test.jsonl", std::ios::app);
      os << "{not json\n";
    }
    REQUIRE_THROWS_AS(load_corpus(dir.string()), Error);
  }
  SECTION("a missing directory is an io error") {
    REQUIRE_THROWS_AS(load_corpus("/tmp/gadms_corpus_missing"), Error);
  }
}

TEST_CASE("the attribute vocabulary fits the default token budget") {
  const Tokenizer vocab =
      build_vocab(AttributeSpec::standard(), standard_templates());
  const EncoderConfig cfg = corpus_config();
  REQUIRE(vocab.size() > 4);
  REQUIRE(vocab.size() <= cfg.vocab_size);
  REQUIRE(vocab.word(0) == Tokenizer::kPad);
  REQUIRE(vocab.word(1) == Tokenizer::kSos);
  REQUIRE(vocab.word(2) == Tokenizer::kEos);
  REQUIRE(vocab.word(3) == Tokenizer::kMask);
  REQUIRE(vocab.id("red") == vocab.id("red"));
  REQUIRE_THROWS_AS(vocab.id("no-such-word"), Error);

  SECTION("every template fits the default token budget") {
    for (const auto& t : standard_templates()) {
      std::istringstream ss(t);
      std::string w;
      int n = 0;
      while (ss >> w) ++n;
      REQUIRE(n + 2 <= cfg.max_text_len);
    }
  }
}
