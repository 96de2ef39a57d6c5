#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tokasr/rng.hpp"
#include "tokasr/tokens.hpp"

namespace tokasr {

constexpr int kCorpusFormatVersion = 1;

// One aligned training/test example. `boundaries[i]` is the index of the
// LAST speech frame of text token i's segment; the final boundary is T-1,
// so the segments partition [0, T).
struct Utterance {
  std::string id;
  std::vector<TokenId> speech;
  std::vector<TokenId> text;        // vocab text ids, not character indices
  std::vector<int> boundaries;
};

inline void validate_utterance(const Utterance& u, const VocabSpec& vocab) {
  const auto fail = [&](const std::string& what) {
    throw std::runtime_error("utterance '" + u.id + "': " + what);
  };
  const int T = static_cast<int>(u.speech.size());
  const int L = static_cast<int>(u.text.size());
  if (L < 1) fail("empty text");
  if (T < L) fail("fewer speech frames than text tokens");
  if (static_cast<int>(u.boundaries.size()) != L) fail("boundary count differs from text length");
  for (TokenId s : u.speech)
    if (!vocab.is_speech(s)) fail("speech token " + std::to_string(s) + " outside speech range");
  for (TokenId t : u.text)
    if (!vocab.is_text(t)) fail("text token " + std::to_string(t) + " outside text range");
  int prev = -1;
  for (int b : u.boundaries) {
    if (b <= prev) fail("boundaries not strictly increasing");
    if (b < 0 || b >= T) fail("boundary " + std::to_string(b) + " outside [0, T)");
    prev = b;
  }
  if (u.boundaries.back() != T - 1) fail("final boundary is not the last frame");
}

// Per-character emission templates. When the speech range is large enough,
// each character gets a private first unit ("onset") and shared mid units;
// onsets make the character identity recoverable from its segment while the
// shared mid pool keeps cluster overlap in the data. Tiny vocabularies fall
// back to fully random templates.
struct Lexicon {
  VocabSpec vocab;
  std::uint64_t seed = 0;
  std::vector<std::vector<TokenId>> templates;     // per character index
  std::vector<std::vector<int>> fixed_repeats;     // empty unless deterministic emission

  bool deterministic_repeats() const { return !fixed_repeats.empty(); }
};

inline Lexicon gen_lexicon(std::uint64_t seed, const VocabSpec& vocab, bool fixed_repeats = false) {
  Lexicon lex;
  lex.vocab = vocab;
  lex.seed = seed;
  lex.templates.resize(vocab.n_text);
  Rng rng(mix_seed(seed, 0x1e78));

  const bool structured = vocab.n_speech >= vocab.n_text + 3;
  std::vector<TokenId> onsets;
  if (structured) {
    onsets.resize(vocab.n_text);
    for (int c = 0; c < vocab.n_text; ++c) onsets[c] = c;
    for (int c = vocab.n_text - 1; c > 0; --c) std::swap(onsets[c], onsets[rng.next_int(c + 1)]);
  }

  for (int c = 0; c < vocab.n_text; ++c) {
    const int max_len = std::min(4, vocab.n_speech);
    const int len = 2 + rng.next_int(std::max(1, max_len - 1));
    std::vector<TokenId>& tpl = lex.templates[c];
    if (structured) {
      tpl.push_back(onsets[c]);
      while (static_cast<int>(tpl.size()) < len) {
        TokenId u = vocab.n_text + rng.next_int(vocab.n_speech - vocab.n_text);
        if (std::find(tpl.begin(), tpl.end(), u) == tpl.end()) tpl.push_back(u);
      }
    } else {
      while (static_cast<int>(tpl.size()) < len) {
        TokenId u = rng.next_int(vocab.n_speech);
        if (std::find(tpl.begin(), tpl.end(), u) == tpl.end()) tpl.push_back(u);
      }
    }
  }

  if (fixed_repeats) {
    lex.fixed_repeats.resize(vocab.n_text);
    Rng rrng(mix_seed(seed, 0x8e9a));
    for (int c = 0; c < vocab.n_text; ++c) {
      for (size_t m = 0; m < lex.templates[c].size(); ++m)
        lex.fixed_repeats[c].push_back(1 + rrng.next_int(3));
    }
  }
  return lex;
}

// Emits one utterance: every template unit repeats 1-3 times (uniform, or
// the lexicon's fixed count), then each frame is replaced by a uniform
// random cluster with probability p_sub. Alignment is exact by construction.
inline Utterance synth_utterance(const Lexicon& lex, std::uint64_t seed, const std::vector<TokenId>& text,
                                 double p_sub) {
  if (text.empty()) throw std::invalid_argument("synth_utterance: empty text");
  if (p_sub < 0.0 || p_sub >= 0.5) throw std::invalid_argument("synth_utterance: p_sub must be in [0, 0.5)");
  Utterance u;
  u.text = text;
  Rng rng(mix_seed(seed, 0x5e9d));
  for (TokenId t : text) {
    if (!lex.vocab.is_text(t))
      throw std::invalid_argument("synth_utterance: unknown text id " + std::to_string(t));
    const int c = lex.vocab.char_index(t);
    const auto& tpl = lex.templates[c];
    for (size_t m = 0; m < tpl.size(); ++m) {
      const int reps = lex.deterministic_repeats() ? lex.fixed_repeats[c][m] : 1 + rng.next_int(3);
      for (int r = 0; r < reps; ++r) u.speech.push_back(tpl[m]);
    }
    u.boundaries.push_back(static_cast<int>(u.speech.size()) - 1);
  }
  if (p_sub > 0.0) {
    for (TokenId& s : u.speech)
      if (rng.bernoulli(p_sub)) s = rng.next_int(lex.vocab.n_speech);
  }
  return u;
}

struct CorpusConfig {
  int n_train = 2000;
  int n_test = 200;
  int len_min = 3;
  int len_max = 12;
  std::uint64_t seed = 1234;
  double p_sub = 0.05;
  int n_speech = 64;
  int n_text = 20;
  bool fixed_repeats = false;

  void validate() const {
    if (n_train <= 0 || n_test <= 0) throw std::invalid_argument("corpus: utterance counts must be positive");
    if (len_min < 1 || len_max > 64 || len_min > len_max)
      throw std::invalid_argument("corpus: len range must satisfy 1 <= min <= max <= 64");
  }
};

inline nlohmann::json vocab_to_json(const VocabSpec& v) {
  return {{"n_speech", v.n_speech}, {"n_text", v.n_text}, {"boundary_id", v.boundary_id},
          {"pad_id", v.pad_id}, {"sos_text_id", v.sos_text_id}, {"total_vocab", v.total_vocab}};
}

inline VocabSpec vocab_from_json(const nlohmann::json& j) {
  VocabSpec v = build_vocab(j.at("n_speech").get<int>(), j.at("n_text").get<int>());
  if (j.contains("total_vocab") && j.at("total_vocab").get<int>() != v.total_vocab)
    throw std::runtime_error("corpus manifest: inconsistent vocabulary layout");
  return v;
}

struct CorpusManifest {
  int format_version = kCorpusFormatVersion;
  VocabSpec vocab;
  std::uint64_t lexicon_seed = 0;
  CorpusConfig config;
};

inline nlohmann::json manifest_to_json(const CorpusManifest& m) {
  return {{"format_version", m.format_version},
          {"vocab", vocab_to_json(m.vocab)},
          {"lexicon_seed", m.lexicon_seed},
          {"config",
           {{"n_train", m.config.n_train}, {"n_test", m.config.n_test}, {"len_min", m.config.len_min},
            {"len_max", m.config.len_max}, {"seed", m.config.seed}, {"p_sub", m.config.p_sub},
            {"n_speech", m.config.n_speech}, {"n_text", m.config.n_text},
            {"fixed_repeats", m.config.fixed_repeats}}}};
}

inline CorpusManifest manifest_from_json(const nlohmann::json& j) {
  CorpusManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kCorpusFormatVersion)
    throw std::runtime_error("corpus manifest: format_version " + std::to_string(m.format_version) +
                             " unsupported (expected " + std::to_string(kCorpusFormatVersion) + ")");
  m.vocab = vocab_from_json(j.at("vocab"));
  m.lexicon_seed = j.at("lexicon_seed").get<std::uint64_t>();
  const auto& c = j.at("config");
  m.config.n_train = c.at("n_train").get<int>();
  m.config.n_test = c.at("n_test").get<int>();
  m.config.len_min = c.at("len_min").get<int>();
  m.config.len_max = c.at("len_max").get<int>();
  m.config.seed = c.at("seed").get<std::uint64_t>();
  m.config.p_sub = c.at("p_sub").get<double>();
  m.config.n_speech = c.at("n_speech").get<int>();
  m.config.n_text = c.at("n_text").get<int>();
  m.config.fixed_repeats = c.value("fixed_repeats", false);
  return m;
}

inline nlohmann::json utterance_to_json(const Utterance& u) {
  return {{"id", u.id}, {"speech", u.speech}, {"text", u.text}, {"boundaries", u.boundaries}};
}

inline void write_utterances(const std::string& path, const std::vector<Utterance>& utts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& u : utts) out << utterance_to_json(u).dump() << '\n';
}

// One utterance drawn from (corpus seed, global utterance index), so serial
// and parallel generation produce identical corpora.
inline Utterance gen_one_utterance(const CorpusConfig& cfg, const Lexicon& lex, int index,
                                   const std::string& id) {
  Rng rng(mix_seed(cfg.seed, 0xc0de, static_cast<std::uint64_t>(index)));
  const int len = cfg.len_min + rng.next_int(cfg.len_max - cfg.len_min + 1);
  std::vector<TokenId> text(len);
  for (int i = 0; i < len; ++i) text[i] = lex.vocab.text_id(rng.next_int(lex.vocab.n_text));
  Utterance u = synth_utterance(lex, rng.next_u64(), text, cfg.p_sub);
  u.id = id;
  return u;
}

struct GeneratedCorpus {
  CorpusManifest manifest;
  std::vector<Utterance> train;
  std::vector<Utterance> test;
};

inline GeneratedCorpus gen_corpus(const CorpusConfig& cfg, int workers = 1) {
  cfg.validate();
  const VocabSpec vocab = build_vocab(cfg.n_speech, cfg.n_text);
  const std::uint64_t lexicon_seed = mix_seed(cfg.seed, 0x1ec5);
  GeneratedCorpus out;
  out.manifest = CorpusManifest{kCorpusFormatVersion, vocab, lexicon_seed, cfg};
  const Lexicon lex = gen_lexicon(lexicon_seed, vocab, cfg.fixed_repeats);

  const int total = cfg.n_train + cfg.n_test;
  std::vector<Utterance> all(total);
  const auto gen_range = [&](int lo, int hi) {
    char buf[32];
    for (int i = lo; i < hi; ++i) {
      const bool is_train = i < cfg.n_train;
      std::snprintf(buf, sizeof buf, "%s_%06d", is_train ? "train" : "test", is_train ? i : i - cfg.n_train);
      all[i] = gen_one_utterance(cfg, lex, i, buf);
    }
  };
  if (workers <= 1) {
    gen_range(0, total);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (total + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const int lo = w * chunk, hi = std::min(total, lo + chunk);
      if (lo < hi) pool.emplace_back(gen_range, lo, hi);
    }
    for (auto& t : pool) t.join();
  }
  out.train.assign(all.begin(), all.begin() + cfg.n_train);
  out.test.assign(all.begin() + cfg.n_train, all.end());
  return out;
}

inline void write_corpus(const GeneratedCorpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const auto manifest_path = dir + "/manifest.json";
  std::ofstream mf(manifest_path, std::ios::binary);
  if (!mf) throw std::runtime_error("cannot write " + manifest_path);
  mf << manifest_to_json(corpus.manifest).dump(2) << '\n';
  write_utterances(dir + "/train.jsonl", corpus.train);
  write_utterances(dir + "/test.jsonl", corpus.test);
}

inline CorpusManifest load_manifest(const std::string& dir) {
  const auto path = dir + "/manifest.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return manifest_from_json(j);
}

// Loads one corpus file, validating every utterance against the manifest's
// vocabulary. Parse failures report the line number; invariant violations
// report the utterance id.
inline std::vector<Utterance> load_utterances(const std::string& path, const VocabSpec& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<Utterance> utts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Utterance u;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      u.id = j.at("id").get<std::string>();
      u.speech = j.at("speech").get<std::vector<TokenId>>();
      u.text = j.at("text").get<std::vector<TokenId>>();
      u.boundaries = j.at("boundaries").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    validate_utterance(u, vocab);
    utts.push_back(std::move(u));
  }
  return utts;
}

}  // namespace tokasr
