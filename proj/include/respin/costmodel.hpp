#pragma once

// Analytical per-token MAC and parameter accounting for the rotation
// schemes. Counting conventions (declared, since published tables do not
// state theirs):
//   - a linear layer of shape (out x in) costs out*in MACs per token;
//   - an FHT of size N costs 2 * N * ceil(log2 N) MACs (each butterfly
//     counted as an add-subtract pair), the composition that reconciles
//     with the published rotation-overhead totals;
//   - the subspace residual path costs exactly 2rD + r^2 per application,
//     matching TransitionApprox::macs_per_token.

#include "respin/rotscheme.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace respin {

struct GeometrySpec {
  std::string name;
  int layers = 0;
  int dim = 0;
  int d_ffn = 0;
  int n_heads = 0;
  int d_head = 0;
  int vocab = 0;
  int rank = 32;

  void validate() const;
};

// Residual-path variant for the cost table.
enum class ResidualCost { None, Dense, Subspace };

struct CostReport {
  std::string geometry;
  std::string scheme;
  int rank = 0;
  int64_t base_macs = 0;          // model linear layers, per token
  int64_t fht_r4 = 0;             // online FFN-hidden FHT, per token
  int64_t fht_r5 = 0;             // online per-head value FHT, per token
  int64_t residual_macs = 0;      // residual basis alignment, per token
  int64_t online_extra_macs = 0;  // fht_r4 + fht_r5 + residual_macs
  int64_t trainable_params = 0;
  int64_t online_params = 0;
};

int64_t fht_macs(int64_t n);

CostReport cost(const GeometrySpec& geom, Scheme scheme,
                ResidualCost residual = ResidualCost::Subspace);

// One row per (geometry, scheme/residual variant). Schemes covered:
// identity, global (FHT only), layerwise-dense, layerwise-subspace.
std::vector<CostReport> cost_table(const std::vector<GeometrySpec>& geoms);

// Named presets: llama2-7b, llama2-13b, llama3-8b, llama3.2-1b,
// llama3.2-3b, toy. Throws ConfigError for unknown names.
GeometrySpec geometry_preset(const std::string& name);
std::vector<std::string> geometry_preset_names();

std::string cost_csv_header();
std::string cost_csv_row(const CostReport& r);

}  // namespace respin
