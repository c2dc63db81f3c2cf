#include "respin/costmodel.hpp"

#include <cmath>
#include <sstream>

namespace respin {

void GeometrySpec::validate() const {
  if (layers < 1 || dim < 1 || d_ffn < 1 || n_heads < 1 || d_head < 1)
    throw ConfigError("GeometrySpec: dimensions must be positive");
  if (dim != n_heads * d_head) throw ConfigError("GeometrySpec: dim != n_heads * d_head");
  if (rank < 0 || rank > dim) throw ConfigError("GeometrySpec: rank must be in [0, dim]");
}

namespace {

int ceil_log2(int64_t n) {
  int k = 0;
  while ((int64_t{1} << k) < n) ++k;
  return k;
}

}  // namespace

int64_t fht_macs(int64_t n) { return 2 * n * ceil_log2(n); }

CostReport cost(const GeometrySpec& geom, Scheme scheme, ResidualCost residual) {
  geom.validate();
  const int64_t l = geom.layers;
  const int64_t d = geom.dim;
  const int64_t f = geom.d_ffn;
  const int64_t dh = geom.d_head;
  const int64_t heads = geom.n_heads;
  const int64_t r = geom.rank;

  CostReport rep;
  rep.geometry = geom.name;
  rep.scheme = scheme_name(scheme);
  rep.base_macs = l * (4 * d * d + 3 * d * f) + static_cast<int64_t>(geom.vocab) * d;

  if (scheme == Scheme::Identity) {
    rep.rank = 0;
    return rep;
  }

  rep.fht_r4 = l * fht_macs(f);
  rep.fht_r5 = l * heads * fht_macs(dh);

  switch (residual) {
    case ResidualCost::None:
      rep.rank = 0;
      break;
    case ResidualCost::Dense:
      rep.rank = static_cast<int>(d);
      rep.residual_macs = 2 * l * d * d;
      rep.online_params = 2 * l * d * d;
      break;
    case ResidualCost::Subspace:
      rep.rank = geom.rank;
      rep.residual_macs = 2 * l * (2 * r * d + r * r);
      rep.online_params = 2 * l * (r * d + r * r);
      break;
  }
  if (scheme != Scheme::LayerWise) {
    // Global schemes share one basis: every transition is identity.
    rep.rank = 0;
    rep.residual_macs = 0;
    rep.online_params = 0;
  }

  switch (scheme) {
    case Scheme::Identity:
      break;
    case Scheme::GlobalHadamard:
      rep.trainable_params = 0;
      break;
    case Scheme::GlobalLearned:
      rep.trainable_params = d * d + dh * dh;
      break;
    case Scheme::LayerWise:
      rep.trainable_params = l * (2 * d * d + dh * dh);
      break;
  }

  rep.online_extra_macs = rep.fht_r4 + rep.fht_r5 + rep.residual_macs;
  return rep;
}

std::vector<CostReport> cost_table(const std::vector<GeometrySpec>& geoms) {
  std::vector<CostReport> rows;
  for (const GeometrySpec& g : geoms) {
    rows.push_back(cost(g, Scheme::Identity, ResidualCost::None));
    rows.push_back(cost(g, Scheme::GlobalHadamard, ResidualCost::None));
    rows.push_back(cost(g, Scheme::GlobalLearned, ResidualCost::None));
    CostReport dense = cost(g, Scheme::LayerWise, ResidualCost::Dense);
    dense.scheme = "layerwise-dense";
    rows.push_back(dense);
    CostReport sub = cost(g, Scheme::LayerWise, ResidualCost::Subspace);
    sub.scheme = "layerwise-subspace";
    rows.push_back(sub);
  }
  return rows;
}

GeometrySpec geometry_preset(const std::string& name) {
  GeometrySpec g;
  g.name = name;
  if (name == "llama2-7b") {
    g.layers = 32; g.dim = 4096; g.d_ffn = 11008; g.n_heads = 32; g.vocab = 32000;
  } else if (name == "llama2-13b") {
    g.layers = 40; g.dim = 5120; g.d_ffn = 13824; g.n_heads = 40; g.vocab = 32000;
  } else if (name == "llama3-8b") {
    g.layers = 32; g.dim = 4096; g.d_ffn = 14336; g.n_heads = 32; g.vocab = 128256;
  } else if (name == "llama3.2-1b") {
    g.layers = 16; g.dim = 2048; g.d_ffn = 8192; g.n_heads = 32; g.vocab = 128256;
  } else if (name == "llama3.2-3b") {
    g.layers = 28; g.dim = 3072; g.d_ffn = 8192; g.n_heads = 24; g.vocab = 128256;
  } else if (name == "toy") {
    g.layers = 4; g.dim = 128; g.d_ffn = 256; g.n_heads = 4; g.vocab = 64; g.rank = 8;
  } else {
    throw ConfigError("unknown geometry preset: " + name);
  }
  g.d_head = g.dim / g.n_heads;
  return g;
}

std::vector<std::string> geometry_preset_names() {
  return {"llama2-7b", "llama2-13b", "llama3-8b", "llama3.2-1b", "llama3.2-3b", "toy"};
}

std::string cost_csv_header() {
  return "geometry,scheme,rank,base_macs,fht_r4,fht_r5,residual_macs,"
         "online_extra_macs,trainable_params,online_params";
}

std::string cost_csv_row(const CostReport& r) {
  std::ostringstream os;
  os << r.geometry << ',' << r.scheme << ',' << r.rank << ',' << r.base_macs << ','
     << r.fht_r4 << ',' << r.fht_r5 << ',' << r.residual_macs << ','
     << r.online_extra_macs << ',' << r.trainable_params << ',' << r.online_params;
  return os.str();
}

}  // namespace respin
