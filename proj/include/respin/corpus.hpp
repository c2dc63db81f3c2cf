#pragma once

// Seeded order-1 Markov token stream standing in for a text corpus.
// Identical (vocab, seed, length) gives an identical stream.

#include "respin/common.hpp"

#include <vector>

namespace respin {

struct CorpusConfig {
  int vocab = 64;
  uint64_t seed = 1;
  int train_tokens = 65536;
  int eval_tokens = 8192;
  double dirichlet_alpha = 0.3;
};

struct SyntheticCorpus {
  CorpusConfig cfg;
  Matrix transition;  // V x V row-stochastic chain (kept for diagnostics)
  std::vector<int> train;
  std::vector<int> eval;
};

SyntheticCorpus make_corpus(const CorpusConfig& cfg);

}  // namespace respin
