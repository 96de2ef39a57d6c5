#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tokasr/corpus.hpp"
#include "tokasr/tokens.hpp"

namespace tokasr {

enum class Modality : std::uint8_t { SpeechStream = 0, TextSlot = 1 };
enum class LossKind : std::uint8_t { None = 0, SpeechCE, BoundaryCE, TextCE };
enum class LayoutKind { BTI, TTI };
enum class MaskVariant { Global, Causal, RightChunk };

// Position indices given to text slots. StreamPoint places slot k at the
// stream point its query is issued from (bound + 1), so training matches
// streaming inference exactly. Trailing appends slots after the stream,
// which is only computable when the final stream length is known.
enum class TextPositionMode { StreamPoint, Trailing };

// Lookahead policy for text queries. Dynamic uses the length of the next
// speech segment (zero for the last token); Fixed uses a constant frame
// count.
struct DeltaPolicy {
  enum class Mode { Dynamic, Fixed };
  Mode mode = Mode::Dynamic;
  int fixed = 0;

  static DeltaPolicy dynamic() { return {Mode::Dynamic, 0}; }
  static DeltaPolicy fixed_frames(int n) {
    if (n < 0) throw std::invalid_argument("DeltaPolicy: fixed lookahead must be >= 0");
    return {Mode::Fixed, n};
  }
};

// One training example after sequence construction. For BTI the first
// stream_len entries are the speech stream (speech tokens plus boundary
// tokens) and the rest are text slots; for TTI everything is one stream.
struct LayoutSequence {
  LayoutKind kind = LayoutKind::BTI;
  VocabSpec vocab;
  std::vector<TokenId> inputs;
  std::vector<int> positions;
  std::vector<Modality> modality;
  std::vector<TokenId> targets;        // -1 where no target
  std::vector<LossKind> loss_kind;
  std::vector<int> text_bounds;        // per text slot: largest visible stream index r_k
  std::vector<int> trigger_index;      // per text slot: its boundary's stream index t'_k
  int stream_len = 0;

  int size() const { return static_cast<int>(inputs.size()); }
  int n_text_slots() const { return static_cast<int>(text_bounds.size()); }
};

struct AttentionMask {
  int n = 0;
  std::vector<std::uint8_t> bits;  // row-major, bits[i*n+j] == query i may attend key j

  explicit AttentionMask(int side = 0) : n(side), bits(static_cast<size_t>(side) * side, 0) {}
  bool at(int i, int j) const { return bits[static_cast<size_t>(i) * n + j] != 0; }
  void set(int i, int j, bool v) { bits[static_cast<size_t>(i) * n + j] = v ? 1 : 0; }
};

// Boundary indicator over the BTI speech stream: boundary i (1-based) sits
// immediately after the last frame of its segment, offset by the i-1
// boundaries already inserted, i.e. at stream index t_{y_i} + i.
inline std::vector<std::uint8_t> boundary_path(const Utterance& utt) {
  const int T = static_cast<int>(utt.speech.size());
  const int L = static_cast<int>(utt.boundaries.size());
  std::vector<std::uint8_t> path(T + L, 0);
  for (int k = 0; k < L; ++k) path[utt.boundaries[k] + k + 1] = 1;
  return path;
}

namespace detail {

inline std::vector<int> segment_lengths(const Utterance& utt) {
  std::vector<int> lens;
  int prev = -1;
  for (int b : utt.boundaries) {
    lens.push_back(b - prev);
    prev = b;
  }
  return lens;
}

inline int slot_delta(const DeltaPolicy& policy, const std::vector<int>& seg_lens, int k) {
  if (policy.mode == DeltaPolicy::Mode::Fixed) return policy.fixed;
  return (k + 1 < static_cast<int>(seg_lens.size())) ? seg_lens[k + 1] : 0;
}

}  // namespace detail

// BTI: speech stream with boundary tokens inserted at the boundary path,
// followed by one text slot per text token. Slot k's input is SOS or the
// previous text token, its target is y_k, and it may attend the stream up
// to r_k = min(t'_k + delta_k, stream_len - 1).
inline LayoutSequence build_bti_layout(const Utterance& utt, const VocabSpec& vocab, const DeltaPolicy& policy,
                                       TextPositionMode pos_mode = TextPositionMode::StreamPoint) {
  validate_utterance(utt, vocab);
  const int T = static_cast<int>(utt.speech.size());
  const int L = static_cast<int>(utt.text.size());
  const int stream_len = T + L;

  LayoutSequence seq;
  seq.kind = LayoutKind::BTI;
  seq.vocab = vocab;
  seq.stream_len = stream_len;
  seq.inputs.reserve(stream_len + L);

  const auto path = boundary_path(utt);
  int frame = 0;
  for (int p = 0; p < stream_len; ++p) seq.inputs.push_back(path[p] ? vocab.boundary_id : utt.speech[frame++]);
  for (int p = 0; p < stream_len; ++p) {
    seq.positions.push_back(p);
    seq.modality.push_back(Modality::SpeechStream);
    if (p + 1 < stream_len) {
      seq.targets.push_back(seq.inputs[p + 1]);
      seq.loss_kind.push_back(seq.inputs[p + 1] == vocab.boundary_id ? LossKind::BoundaryCE : LossKind::SpeechCE);
    } else {
      seq.targets.push_back(-1);
      seq.loss_kind.push_back(LossKind::None);
    }
  }

  const auto seg_lens = detail::segment_lengths(utt);
  for (int k = 0; k < L; ++k) {
    const int trigger = utt.boundaries[k] + k + 1;
    const int bound = std::min(trigger + detail::slot_delta(policy, seg_lens, k), stream_len - 1);
    seq.trigger_index.push_back(trigger);
    seq.text_bounds.push_back(bound);
    seq.inputs.push_back(k == 0 ? vocab.sos_text_id : utt.text[k - 1]);
    seq.positions.push_back(pos_mode == TextPositionMode::StreamPoint ? bound + 1 : stream_len + k);
    seq.modality.push_back(Modality::TextSlot);
    seq.targets.push_back(utt.text[k]);
    seq.loss_kind.push_back(LossKind::TextCE);
  }
  return seq;
}

// TTI: text tokens inserted into the speech stream after frame
// min(t_{y_i} + delay, T - 1). Everything is one stream with next-token
// targets; the final position's target is BOUNDARY, which doubles as the
// end-of-utterance mark the decoder stops on.
inline LayoutSequence build_tti_layout(const Utterance& utt, const VocabSpec& vocab, int delay) {
  validate_utterance(utt, vocab);
  if (delay < 0) throw std::invalid_argument("build_tti_layout: delay must be >= 0");
  const int T = static_cast<int>(utt.speech.size());
  const int L = static_cast<int>(utt.text.size());

  LayoutSequence seq;
  seq.kind = LayoutKind::TTI;
  seq.vocab = vocab;
  seq.stream_len = T + L;
  seq.inputs.reserve(T + L);

  int next_text = 0;
  for (int t = 0; t < T; ++t) {
    seq.inputs.push_back(utt.speech[t]);
    while (next_text < L && std::min(utt.boundaries[next_text] + delay, T - 1) == t) {
      seq.inputs.push_back(utt.text[next_text]);
      ++next_text;
    }
  }

  const int n = static_cast<int>(seq.inputs.size());
  for (int p = 0; p < n; ++p) {
    seq.positions.push_back(p);
    seq.modality.push_back(Modality::SpeechStream);
    if (p + 1 < n) {
      seq.targets.push_back(seq.inputs[p + 1]);
      seq.loss_kind.push_back(vocab.is_text(seq.inputs[p + 1]) ? LossKind::TextCE : LossKind::SpeechCE);
    } else {
      seq.targets.push_back(vocab.boundary_id);
      seq.loss_kind.push_back(LossKind::BoundaryCE);
    }
  }
  return seq;
}

// Attention mask construction.
//
// BTI: speech-stream rows are causal over the stream and never see text
// columns. Text slot k sees the stream prefix through t'_k (Causal) or r_k
// (RightChunk), plus text slots <= k. Global widens speech rows to the whole
// stream and text rows to everything up to their own slot.
//
// TTI: Causal is plain lower-triangular. Global gives speech-token rows all
// speech-token columns plus preceding text, and text-token rows everything
// up to themselves; with a large delay this is the non-streaming layout.
inline AttentionMask build_mask(const LayoutSequence& layout, MaskVariant variant) {
  const int n = layout.size();
  AttentionMask mask(n);

  if (layout.kind == LayoutKind::TTI) {
    if (variant == MaskVariant::RightChunk)
      throw std::invalid_argument("build_mask: RightChunk is undefined for TTI layouts");
    if (variant == MaskVariant::Causal) {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) mask.set(i, j, true);
    } else {
      for (int i = 0; i < n; ++i) {
        const bool text_row = layout.vocab.is_text(layout.inputs[i]);
        for (int j = 0; j < n; ++j) {
          const bool text_col = layout.vocab.is_text(layout.inputs[j]);
          if (text_row) {
            mask.set(i, j, j <= i);
          } else {
            mask.set(i, j, !text_col || j <= i);
          }
        }
      }
    }
    return mask;
  }

  const int stream_len = layout.stream_len;
  for (int i = 0; i < stream_len; ++i) {
    if (variant == MaskVariant::Global) {
      for (int j = 0; j < stream_len; ++j) mask.set(i, j, true);
    } else {
      for (int j = 0; j <= i; ++j) mask.set(i, j, true);
    }
  }
  for (int k = 0; k < layout.n_text_slots(); ++k) {
    const int row = stream_len + k;
    int visible_stream = 0;
    switch (variant) {
      case MaskVariant::Global: visible_stream = stream_len; break;
      case MaskVariant::Causal: visible_stream = layout.trigger_index[k] + 1; break;
      case MaskVariant::RightChunk: visible_stream = layout.text_bounds[k] + 1; break;
    }
    for (int j = 0; j < visible_stream; ++j) mask.set(row, j, true);
    for (int m = 0; m <= k; ++m) mask.set(row, stream_len + m, true);
  }
  return mask;
}

inline void write_mask_csv(const AttentionMask& mask, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (int i = 0; i < mask.n; ++i) {
    for (int j = 0; j < mask.n; ++j) {
      if (j) out << ',';
      out << (mask.at(i, j) ? '1' : '0');
    }
    out << '\n';
  }
}

// Plain PBM (P1): black pixels mark visible key positions.
inline void write_mask_pbm(const AttentionMask& mask, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P1\n" << mask.n << ' ' << mask.n << '\n';
  for (int i = 0; i < mask.n; ++i) {
    for (int j = 0; j < mask.n; ++j) {
      if (j) out << ' ';
      out << (mask.at(i, j) ? '1' : '0');
    }
    out << '\n';
  }
}

}  // namespace tokasr
