#include "adaponder/params.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace adaponder {

int64_t gate_count(const Config& cfg) { return cfg.shared_gate ? 1 : cfg.K - 1; }

std::string gate_prefix(const Config& cfg, int64_t i) {
  return "gate" + std::to_string(cfg.shared_gate ? 0 : i);
}

namespace {

template <typename T>
Tensor<T> randn(Rng& rng, std::vector<int64_t> shape, double std) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(rng.gaussian() * std);
  return t;
}

}  // namespace

template <typename T>
ParameterStore<T> init_params(const Config& cfg, Rng& rng) {
  const int64_t d = cfg.d_model, dff = cfg.d_ff_resolved(), gh = cfg.gate_hidden_resolved();
  const double wstd = 0.02;
  // GPT-2 style: residual-feeding projections scaled down by sqrt(2*L)
  const double rstd = wstd / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

  ParameterStore<T> ps;
  ps.add("embed.V", randn<T>(rng, {cfg.vocab_size, d}, wstd), true, false);
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    ps.add(p + "ln1.g", Tensor<T>::full({d}, T(1)), false, false);
    ps.add(p + "ln1.b", Tensor<T>::zeros({d}), false, false);
    ps.add(p + "attn.wq", randn<T>(rng, {d, d}, wstd), true, false);
    ps.add(p + "attn.bq", Tensor<T>::zeros({d}), false, false);
    ps.add(p + "attn.wk", randn<T>(rng, {d, d}, wstd), true, false);
    ps.add(p + "attn.bk", Tensor<T>::zeros({d}), false, false);
    ps.add(p + "attn.wv", randn<T>(rng, {d, d}, wstd), true, false);
    ps.add(p + "attn.bv", Tensor<T>::zeros({d}), false, false);
    ps.add(p + "attn.wo", randn<T>(rng, {d, d}, rstd), true, false);
    ps.add(p + "attn.bo", Tensor<T>::zeros({d}), false, false);
    ps.add(p + "ln2.g", Tensor<T>::full({d}, T(1)), false, false);
    ps.add(p + "ln2.b", Tensor<T>::zeros({d}), false, false);
    ps.add(p + "ffn.w1", randn<T>(rng, {dff, d}, wstd), true, false);
    ps.add(p + "ffn.b1", Tensor<T>::zeros({dff}), false, false);
    ps.add(p + "ffn.w2", randn<T>(rng, {d, dff}, rstd), true, false);
    ps.add(p + "ffn.b2", Tensor<T>::zeros({d}), false, false);
  }
  ps.add("final_ln.g", Tensor<T>::full({d}, T(1)), false, false);
  ps.add("final_ln.b", Tensor<T>::zeros({d}), false, false);
  if (!cfg.tie_update_embedding) {
    ps.add("head.W", randn<T>(rng, {cfg.vocab_size, d}, wstd), true, false);
  }
  for (int64_t i = 0; i < gate_count(cfg); ++i) {
    const std::string p = "gate" + std::to_string(i) + ".";
    ps.add(p + "w1", randn<T>(rng, {gh, d}, wstd), true, true);
    ps.add(p + "b1", Tensor<T>::zeros({gh}), false, true);
    // zero-init output row + bias so every token starts at s = sigmoid(gate_bias_init)
    ps.add(p + "w2", Tensor<T>::zeros({1, gh}), true, true);
    ps.add(p + "b2", Tensor<T>::full({1}, static_cast<T>(cfg.gate_bias_init)), false, true);
  }
  return ps;
}

template ParameterStore<float> init_params<float>(const Config&, Rng&);
template ParameterStore<double> init_params<double>(const Config&, Rng&);

// ------------------------------------------------------------- checkpoint io

void Checkpoint::put_f32(const std::string& name, const Tensor<float>& t) {
  names.push_back(name);
  dtypes.push_back("f32");
  shapes.push_back(t.shape);
  std::vector<uint8_t> buf(t.data.size() * sizeof(float));
  std::memcpy(buf.data(), t.data.data(), buf.size());
  buffers.push_back(std::move(buf));
}

void Checkpoint::put_raw(const std::string& name, const std::string& bytes) {
  names.push_back(name);
  dtypes.push_back("raw");
  shapes.push_back({static_cast<int64_t>(bytes.size())});
  buffers.push_back(std::vector<uint8_t>(bytes.begin(), bytes.end()));
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& n : names) {
    if (n == name) return true;
  }
  return false;
}

Tensor<float> Checkpoint::get_f32(const std::string& name) const {
  for (size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) {
      if (dtypes[i] != "f32") throw std::runtime_error("checkpoint entry not f32: " + name);
      Tensor<float> t(shapes[i]);
      if (buffers[i].size() != t.data.size() * sizeof(float)) {
        throw std::runtime_error("checkpoint buffer size mismatch: " + name);
      }
      std::memcpy(t.data.data(), buffers[i].data(), buffers[i].size());
      return t;
    }
  }
  throw std::runtime_error("checkpoint entry missing: " + name);
}

std::string Checkpoint::get_raw(const std::string& name) const {
  for (size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return std::string(buffers[i].begin(), buffers[i].end());
  }
  throw std::runtime_error("checkpoint entry missing: " + name);
}

namespace {

constexpr char kMagic[8] = {'A', 'P', 'L', 'M', 'C', 'K', 'P', '1'};

void write_u64(FILE* f, uint64_t v) {
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  if (std::fwrite(b, 1, 8, f) != 8) throw std::runtime_error("checkpoint write failed");
}

uint64_t read_u64(FILE* f) {
  uint8_t b[8];
  if (std::fread(b, 1, 8, f) != 8) throw std::runtime_error("checkpoint read failed");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_str(FILE* f, const std::string& s) {
  write_u64(f, s.size());
  if (!s.empty() && std::fwrite(s.data(), 1, s.size(), f) != s.size()) {
    throw std::runtime_error("checkpoint write failed");
  }
}

std::string read_str(FILE* f) {
  const uint64_t n = read_u64(f);
  std::string s(n, '\0');
  if (n && std::fread(s.data(), 1, n, f) != n) throw std::runtime_error("checkpoint read failed");
  return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  try {
    if (std::fwrite(kMagic, 1, 8, f) != 8) throw std::runtime_error("checkpoint write failed");
    write_u64(f, static_cast<uint64_t>(ck.step));
    write_str(f, ck.config_text);
    write_u64(f, ck.names.size());
    for (size_t i = 0; i < ck.names.size(); ++i) {
      write_str(f, ck.names[i]);
      write_str(f, ck.dtypes[i]);
      write_u64(f, ck.shapes[i].size());
      for (int64_t e : ck.shapes[i]) write_u64(f, static_cast<uint64_t>(e));
      write_u64(f, ck.buffers[i].size());
      if (!ck.buffers[i].empty() &&
          std::fwrite(ck.buffers[i].data(), 1, ck.buffers[i].size(), f) != ck.buffers[i].size()) {
        throw std::runtime_error("checkpoint write failed");
      }
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
}

Checkpoint load_checkpoint(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  Checkpoint ck;
  try {
    char magic[8];
    if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kMagic, 8) != 0) {
      throw std::runtime_error("not a checkpoint file: " + path);
    }
    ck.step = static_cast<int64_t>(read_u64(f));
    ck.config_text = read_str(f);
    const uint64_t count = read_u64(f);
    for (uint64_t i = 0; i < count; ++i) {
      ck.names.push_back(read_str(f));
      ck.dtypes.push_back(read_str(f));
      const uint64_t nd = read_u64(f);
      std::vector<int64_t> shape;
      for (uint64_t k = 0; k < nd; ++k) shape.push_back(static_cast<int64_t>(read_u64(f)));
      ck.shapes.push_back(std::move(shape));
      const uint64_t bytes = read_u64(f);
      std::vector<uint8_t> buf(bytes);
      if (bytes && std::fread(buf.data(), 1, bytes, f) != bytes) {
        throw std::runtime_error("checkpoint read failed");
      }
      ck.buffers.push_back(std::move(buf));
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
  return ck;
}

void pack_params(Checkpoint& ck, const ParameterStore<float>& ps, const std::string& prefix) {
  for (const auto& p : ps.all()) ck.put_f32(prefix + p.name, p.value);
}

void unpack_params(const Checkpoint& ck, ParameterStore<float>& ps, const std::string& prefix) {
  for (auto& p : ps.all()) {
    Tensor<float> t = ck.get_f32(prefix + p.name);
    if (t.shape != p.value.shape) {
      throw std::runtime_error("checkpoint shape mismatch for " + p.name);
    }
    p.value = std::move(t);
  }
}

}  // namespace adaponder
