#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "tokasr/corpus.hpp"
#include "tokasr/rng.hpp"
#include "tokasr/tokens.hpp"

namespace tokasr {

struct AugmentConfig {
  std::vector<double> speed_factors = {0.9, 1.0, 1.1};
  double trigger_shift_p = 0.3;
  int trigger_shift_max = 4;
  double time_mask_p = 0.3;
  double dedup_p = 0.5;

  void validate() const {
    for (double f : speed_factors)
      if (f <= 0.0) throw std::invalid_argument("augment: speed factors must be positive");
    if (speed_factors.empty()) throw std::invalid_argument("augment: need at least one speed factor");
    if (trigger_shift_p < 0 || trigger_shift_p > 1 || time_mask_p < 0 || time_mask_p > 1 ||
        dedup_p < 0 || dedup_p > 1)
      throw std::invalid_argument("augment: probabilities must be in [0, 1]");
    if (trigger_shift_max < 1) throw std::invalid_argument("augment: trigger_shift_max must be >= 1");
  }
};

namespace detail {

// Maximal runs of identical tokens, split at segment borders so that no run
// crosses a boundary. Each entry is (first frame, length, segment index).
struct Run {
  int begin;
  int len;
  int segment;
};

inline std::vector<Run> segment_runs(const Utterance& u) {
  std::vector<Run> runs;
  int seg = 0;
  int t = 0;
  const int T = static_cast<int>(u.speech.size());
  while (t < T) {
    const int seg_end = u.boundaries[seg];  // inclusive
    int e = t;
    while (e + 1 <= seg_end && u.speech[e + 1] == u.speech[t]) ++e;
    runs.push_back({t, e - t + 1, seg});
    t = e + 1;
    if (t > seg_end) ++seg;
  }
  return runs;
}

}  // namespace detail

// Token-domain speed perturbation: every within-segment run of length r is
// stretched to max(1, round(r / factor)) frames (round half away from zero);
// boundaries are rebuilt from the stretched segment lengths.
inline Utterance speed_perturb(const Utterance& utt, double factor) {
  if (factor <= 0.0) throw std::invalid_argument("speed_perturb: factor must be positive");
  Utterance out;
  out.id = utt.id;
  out.text = utt.text;
  const auto runs = detail::segment_runs(utt);
  std::vector<int> seg_len(utt.boundaries.size(), 0);
  for (const auto& r : runs) {
    const int stretched = std::max(1, static_cast<int>(std::lround(static_cast<double>(r.len) / factor)));
    for (int i = 0; i < stretched; ++i) out.speech.push_back(utt.speech[r.begin]);
    seg_len[r.segment] += stretched;
  }
  int acc = 0;
  for (int len : seg_len) {
    acc += len;
    out.boundaries.push_back(acc - 1);
  }
  return out;
}

// Shifts each non-final boundary by +/-{1..max_shift} with probability p,
// clamping left to right so boundaries stay strictly increasing inside
// [0, T-1]. The final boundary is pinned to the utterance end.
inline Utterance trigger_shift(const Utterance& utt, Rng& rng, double p, int max_shift) {
  Utterance out = utt;
  const int L = static_cast<int>(out.boundaries.size());
  for (int k = 0; k + 1 < L; ++k) {
    if (!rng.bernoulli(p)) continue;
    const int mag = 1 + rng.next_int(max_shift);
    const int delta = rng.bernoulli(0.5) ? mag : -mag;
    const int lo = (k == 0 ? 0 : out.boundaries[k - 1] + 1);
    const int hi = out.boundaries[k + 1] - 1;
    out.boundaries[k] = std::clamp(out.boundaries[k] + delta, lo, hi);
  }
  return out;
}

// Replaces each non-boundary token with PAD with probability p. Applied to a
// layout's input tokens after construction; targets are never touched.
inline std::vector<TokenId> time_mask(const std::vector<TokenId>& inputs, const VocabSpec& vocab, Rng& rng,
                                      double p) {
  std::vector<TokenId> out = inputs;
  for (TokenId& t : out) {
    if (t == vocab.boundary_id) continue;
    if (rng.bernoulli(p)) t = vocab.pad_id;
  }
  return out;
}

// Collapses each maximal duplicate run to its first frame with probability p.
// Runs covering two or more boundary indices are left intact; collapsing them
// would merge segments and break strict boundary ordering. A boundary at
// original index t remaps to (number of kept frames with index <= t) - 1.
inline Utterance random_dedup(const Utterance& utt, Rng& rng, double p) {
  const int T = static_cast<int>(utt.speech.size());
  std::vector<char> keep(T, 1);

  int t = 0;
  size_t next_boundary = 0;
  while (t < T) {
    int e = t;
    while (e + 1 < T && utt.speech[e + 1] == utt.speech[t]) ++e;
    while (next_boundary < utt.boundaries.size() && utt.boundaries[next_boundary] < t) ++next_boundary;
    int boundaries_inside = 0;
    for (size_t b = next_boundary; b < utt.boundaries.size() && utt.boundaries[b] <= e; ++b)
      ++boundaries_inside;
    if (e > t && boundaries_inside <= 1 && rng.bernoulli(p)) {
      for (int i = t + 1; i <= e; ++i) keep[i] = 0;
    }
    t = e + 1;
  }

  Utterance out;
  out.id = utt.id;
  out.text = utt.text;
  std::vector<int> new_index(T, -1);
  int kept = 0;
  for (int i = 0; i < T; ++i) {
    if (keep[i]) {
      out.speech.push_back(utt.speech[i]);
      ++kept;
    }
    new_index[i] = kept - 1;
  }
  for (int b : utt.boundaries) out.boundaries.push_back(new_index[b]);
  return out;
}

struct DedupResult {
  std::vector<TokenId> speech;
  std::vector<int> remap;  // original frame index -> deduplicated index
};

// Collapses every duplicate run to one frame. Idempotent. The remap converts
// original frame indices into deduplicated ones for latency accounting.
inline DedupResult global_dedup(const std::vector<TokenId>& speech) {
  DedupResult out;
  out.remap.resize(speech.size());
  for (size_t i = 0; i < speech.size(); ++i) {
    if (i == 0 || speech[i] != speech[i - 1]) out.speech.push_back(speech[i]);
    out.remap[i] = static_cast<int>(out.speech.size()) - 1;
  }
  return out;
}

// Training-time composite: speed perturbation with a random factor, trigger
// shift, then random de-duplication. Time masking runs later, on the layout.
inline Utterance augment_utterance(const Utterance& utt, const AugmentConfig& cfg, Rng& rng) {
  const double factor = cfg.speed_factors[rng.next_int(static_cast<int>(cfg.speed_factors.size()))];
  Utterance out = speed_perturb(utt, factor);
  out = trigger_shift(out, rng, cfg.trigger_shift_p, cfg.trigger_shift_max);
  out = random_dedup(out, rng, cfg.dedup_p);
  return out;
}

}  // namespace tokasr
