#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tokasr {

using TokenId = std::int32_t;

enum class TokenKind { Speech, Text, Boundary, Pad, SosText };

// Unified vocabulary layout shared by every module. Ids are contiguous:
// speech clusters first, then text tokens, then the three specials.
struct VocabSpec {
  int n_speech = 0;
  int n_text = 0;
  TokenId boundary_id = -1;
  TokenId pad_id = -1;
  TokenId sos_text_id = -1;
  int total_vocab = 0;

  bool is_speech(TokenId id) const { return id >= 0 && id < n_speech; }
  bool is_text(TokenId id) const { return id >= n_speech && id < n_speech + n_text; }

  // Text token id for character index c in [0, n_text).
  TokenId text_id(int c) const { return static_cast<TokenId>(n_speech + c); }
  // Character index of a text token id. Caller must check is_text.
  int char_index(TokenId id) const { return static_cast<int>(id) - n_speech; }
};

inline VocabSpec build_vocab(int n_speech, int n_text) {
  if (n_speech < 2) throw std::invalid_argument("build_vocab: n_speech must be >= 2, got " + std::to_string(n_speech));
  if (n_text < 2) throw std::invalid_argument("build_vocab: n_text must be >= 2, got " + std::to_string(n_text));
  VocabSpec v;
  v.n_speech = n_speech;
  v.n_text = n_text;
  v.boundary_id = n_speech + n_text;
  v.pad_id = v.boundary_id + 1;
  v.sos_text_id = v.boundary_id + 2;
  v.total_vocab = n_speech + n_text + 3;
  return v;
}

inline TokenKind token_kind(const VocabSpec& vocab, TokenId id) {
  if (id < 0 || id >= vocab.total_vocab) {
    throw std::out_of_range("token_kind: id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(vocab.total_vocab));
  }
  if (id < vocab.n_speech) return TokenKind::Speech;
  if (id < vocab.n_speech + vocab.n_text) return TokenKind::Text;
  if (id == vocab.boundary_id) return TokenKind::Boundary;
  if (id == vocab.pad_id) return TokenKind::Pad;
  return TokenKind::SosText;
}

inline bool operator==(const VocabSpec& a, const VocabSpec& b) {
  return a.n_speech == b.n_speech && a.n_text == b.n_text;
}

}  // namespace tokasr
