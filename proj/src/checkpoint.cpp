#include "respin/checkpoint.hpp"

#include "json.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>

namespace respin {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts need a swap pass");

std::string sha256_hex(const void* data, size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int digest_len = 0;
  EVP_Digest(data, len, digest, &digest_len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * digest_len);
  for (unsigned int i = 0; i < digest_len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read file: " + p.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(data.data(), data.size());
}

void write_file_atomic(const fs::path& p, const std::string& content) {
  fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write file: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
  }
  fs::rename(tmp, p);
}

void write_hashes_sidecar(const fs::path& dir) {
  json hashes = json::object();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "hashes.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files)
    hashes[fs::relative(f, dir).generic_string()] = sha256_file(f);
  write_file_atomic(dir / "hashes.json", hashes.dump(2) + "\n");
}

namespace {

struct TensorOut {
  json entries = json::array();
  fs::path dir;

  void add(const std::string& name, const Matrix& m) {
    std::string blob(sizeof(double) * m.rows() * m.cols(), '\0');
    size_t off = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        double v = m(i, j);
        std::memcpy(blob.data() + off, &v, sizeof(double));
        off += sizeof(double);
      }
    std::string file = name + ".bin";
    write_file_atomic(dir / file, blob);
    entries.push_back({{"name", name},
                       {"rows", m.rows()},
                       {"cols", m.cols()},
                       {"dtype", "f64"},
                       {"byte_order", "le"},
                       {"file", file},
                       {"sha256", sha256_hex(blob.data(), blob.size())}});
  }
  void add(const std::string& name, const Vector& v) { add(name, Matrix(v.transpose())); }
};

Matrix read_tensor(const fs::path& dir, const json& entry) {
  fs::path file = dir / entry.at("file").get<std::string>();
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("checkpoint blob missing: " + file.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (sha256_hex(blob.data(), blob.size()) != entry.at("sha256").get<std::string>())
    throw ConfigError("checkpoint blob hash mismatch: " + file.string());
  Eigen::Index rows = entry.at("rows");
  Eigen::Index cols = entry.at("cols");
  if (blob.size() != sizeof(double) * static_cast<size_t>(rows * cols))
    throw ConfigError("checkpoint blob size mismatch: " + file.string());
  Matrix m(rows, cols);
  size_t off = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      double v;
      std::memcpy(&v, blob.data() + off, sizeof(double));
      m(i, j) = v;
      off += sizeof(double);
    }
  return m;
}

json model_config_json(const ModelConfig& c) {
  return {{"layers", c.layers}, {"dim", c.dim},     {"n_heads", c.n_heads},
          {"d_ffn", c.d_ffn},   {"vocab", c.vocab}, {"ctx", c.ctx},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers");
  c.dim = j.at("dim");
  c.n_heads = j.at("n_heads");
  c.d_ffn = j.at("d_ffn");
  c.vocab = j.at("vocab");
  c.ctx = j.at("ctx");
  c.seed = j.at("seed");
  c.validate();
  return c;
}

}  // namespace

void save_model(const fs::path& dir, const ToyTransformer& model, const std::string& note) {
  fs::create_directories(dir);
  TensorOut out;
  out.dir = dir;
  out.add("embed", model.embed);
  out.add("pos", model.pos);
  out.add("unembed", model.unembed);
  out.add("final_gain", model.final_gain);
  for (int i = 0; i < model.cfg.layers; ++i) {
    const LayerWeights& l = model.layers[i];
    std::string s = "." + std::to_string(i);
    out.add("norm1_gain" + s, l.norm1_gain);
    out.add("norm2_gain" + s, l.norm2_gain);
    out.add("w_q" + s, l.w_q);
    out.add("w_k" + s, l.w_k);
    out.add("w_v" + s, l.w_v);
    out.add("w_o" + s, l.w_o);
    out.add("w_gate" + s, l.w_gate);
    out.add("w_up" + s, l.w_up);
    out.add("w_down" + s, l.w_down);
    if (l.t_attn.kind == ResidualKind::Dense) out.add("t_attn" + s, l.t_attn.dense);
    if (l.t_ffn.kind == ResidualKind::Dense) out.add("t_ffn" + s, l.t_ffn.dense);
  }
  json manifest = {{"format_version", 1},
                   {"kind", "model"},
                   {"config", model_config_json(model.cfg)},
                   {"fht_value", model.fht_value},
                   {"fht_ffn", model.fht_ffn},
                   {"note", note},
                   {"tensors", out.entries}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

ToyTransformer load_model(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("missing checkpoint manifest in " + dir.string());
  json manifest = json::parse(in);
  if (manifest.at("kind") != "model")
    throw ConfigError("not a model checkpoint: " + dir.string());

  ToyTransformer m;
  m.cfg = model_config_from_json(manifest.at("config"));
  m.fht_value = manifest.at("fht_value");
  m.fht_ffn = manifest.at("fht_ffn");

  std::map<std::string, json> by_name;
  for (const auto& e : manifest.at("tensors")) by_name[e.at("name")] = e;
  auto tensor = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("checkpoint tensor missing: " + name);
    return read_tensor(dir, it->second);
  };
  auto vector = [&](const std::string& name) { return Vector(tensor(name).row(0)); };

  m.embed = tensor("embed");
  m.pos = tensor("pos");
  m.unembed = tensor("unembed");
  m.final_gain = vector("final_gain");
  m.layers.resize(m.cfg.layers);
  for (int i = 0; i < m.cfg.layers; ++i) {
    LayerWeights& l = m.layers[i];
    std::string s = "." + std::to_string(i);
    l.norm1_gain = vector("norm1_gain" + s);
    l.norm2_gain = vector("norm2_gain" + s);
    l.w_q = tensor("w_q" + s);
    l.w_k = tensor("w_k" + s);
    l.w_v = tensor("w_v" + s);
    l.w_o = tensor("w_o" + s);
    l.w_gate = tensor("w_gate" + s);
    l.w_up = tensor("w_up" + s);
    l.w_down = tensor("w_down" + s);
    if (by_name.count("t_attn" + s))
      l.t_attn = {ResidualKind::Dense, tensor("t_attn" + s), {}};
    if (by_name.count("t_ffn" + s))
      l.t_ffn = {ResidualKind::Dense, tensor("t_ffn" + s), {}};
  }
  return m;
}

void save_rotations(const fs::path& dir, const RotationSet& rots, uint64_t init_seed) {
  fs::create_directories(dir);
  TensorOut out;
  out.dir = dir;
  if (rots.global()) {
    out.add("R", rots.r1[0].matrix());
    out.add("R3", rots.r3[0].matrix());
  } else {
    for (int i = 0; i < rots.layers; ++i) {
      std::string s = "." + std::to_string(i);
      out.add("R1" + s, rots.r1[i].matrix());
      out.add("R2" + s, rots.r2[i].matrix());
      out.add("R3" + s, rots.r3[i].matrix());
    }
  }
  json manifest = {{"format_version", 1},
                   {"kind", "rotations"},
                   {"scheme", scheme_name(rots.scheme)},
                   {"layers", rots.layers},
                   {"dim", rots.dim},
                   {"d_head", rots.d_head},
                   {"online_fht", rots.online_fht},
                   {"init_seed", init_seed},
                   {"tensors", out.entries}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedRotations load_rotations(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("missing rotations manifest in " + dir.string());
  json manifest = json::parse(in);
  if (manifest.at("kind") != "rotations")
    throw ConfigError("not a rotations checkpoint: " + dir.string());

  LoadedRotations out;
  out.init_seed = manifest.at("init_seed");
  RotationSet& rs = out.rots;
  rs.scheme = scheme_from_name(manifest.at("scheme"));
  rs.layers = manifest.at("layers");
  rs.dim = manifest.at("dim");
  rs.d_head = manifest.at("d_head");
  rs.online_fht = manifest.at("online_fht");

  std::map<std::string, json> by_name;
  for (const auto& e : manifest.at("tensors")) by_name[e.at("name")] = e;
  auto rot = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("rotation tensor missing: " + name);
    return OrthogonalMatrix(read_tensor(dir, it->second));
  };
  if (rs.global()) {
    rs.r1.push_back(rot("R"));
    rs.r3.push_back(rot("R3"));
  } else {
    for (int i = 0; i < rs.layers; ++i) {
      std::string s = "." + std::to_string(i);
      rs.r1.push_back(rot("R1" + s));
      rs.r2.push_back(rot("R2" + s));
      rs.r3.push_back(rot("R3" + s));
    }
  }
  return out;
}

}  // namespace respin
