#include "respin/corpus.hpp"

namespace respin {

SyntheticCorpus make_corpus(const CorpusConfig& cfg) {
  if (cfg.vocab < 2) throw ConfigError("corpus: vocab must be >= 2");
  if (cfg.train_tokens < 2 || cfg.eval_tokens < 2)
    throw ConfigError("corpus: need nonempty train and eval splits");

  Rng rng(cfg.seed);
  const int v = cfg.vocab;
  Matrix p(v, v);
  for (int i = 0; i < v; ++i) {
    double row_sum = 0.0;
    for (int j = 0; j < v; ++j) {
      p(i, j) = rng.gamma(cfg.dirichlet_alpha);
      row_sum += p(i, j);
    }
    p.row(i) /= row_sum;
  }

  SyntheticCorpus out;
  out.cfg = cfg;
  out.transition = p;

  int total = cfg.train_tokens + cfg.eval_tokens;
  std::vector<int> stream(total);
  int cur = static_cast<int>(rng.uniform_int(v));
  for (int t = 0; t < total; ++t) {
    stream[t] = cur;
    double u = rng.uniform();
    double acc = 0.0;
    int next = v - 1;
    for (int j = 0; j < v; ++j) {
      acc += p(cur, j);
      if (u < acc) {
        next = j;
        break;
      }
    }
    cur = next;
  }
  out.train.assign(stream.begin(), stream.begin() + cfg.train_tokens);
  out.eval.assign(stream.begin() + cfg.train_tokens, stream.end());
  return out;
}

}  // namespace respin
