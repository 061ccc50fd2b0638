#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "adaponder/config.hpp"
#include "adaponder/tensor.hpp"

namespace adaponder {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = false;  // weight decay applies (2-D matrices only)
  bool gate = false;   // gate MLP parameter (the only group updated under freeze_backbone)
};

// Named parameters in a fixed insertion order. The order is part of the
// deterministic contract: init, optimizer sweeps and checkpoints all follow it.
template <typename T>
class ParameterStore {
 public:
  Param<T>& add(const std::string& name, Tensor<T> value, bool decay, bool gate) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    index_[name] = params_.size();
    params_.push_back(Param<T>{name, std::move(value), Tensor<T>{}, decay, gate});
    Param<T>& p = params_.back();
    p.grad = Tensor<T>::zeros(p.value.shape);
    return p;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Param<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no such parameter: " + name);
    return params_[it->second];
  }
  const Param<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("no such parameter: " + name);
    return params_[it->second];
  }

  std::vector<Param<T>>& all() { return params_; }
  const std::vector<Param<T>>& all() const { return params_; }
  size_t size() const { return params_.size(); }

  void zero_grads() {
    for (auto& p : params_) p.grad.fill(T(0));
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& p : params_) {
      Tensor<U> v(p.value.shape);
      for (int64_t i = 0; i < v.numel(); ++i) v.at(i) = static_cast<U>(p.value.at(i));
      out.add(p.name, std::move(v), p.decay, p.gate);
    }
    return out;
  }

 private:
  std::vector<Param<T>> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Builds the full model parameter set for a validated config, in a fixed
// order: embedding, per-layer blocks, final norm, optional untied head, gates.
template <typename T>
ParameterStore<T> init_params(const Config& cfg, Rng& rng);

// Number of distinct gate MLPs: K-1, or 1 when shared.
int64_t gate_count(const Config& cfg);

// name of gate i's parameter prefix, honoring shared_gate
std::string gate_prefix(const Config& cfg, int64_t i);

// ------------------------------------------------------------- checkpoints

// Serialized map {name -> dtype, shape, raw little-endian buffer} plus config
// text, training step and any extra named state (optimizer moments, rng).
// load(save(p)) round-trips bitwise.
struct Checkpoint {
  int64_t step = 0;
  std::string config_text;
  std::vector<std::string> names;                  // in file order
  std::vector<std::string> dtypes;                 // "f32" | "f64" | "raw"
  std::vector<std::vector<int64_t>> shapes;
  std::vector<std::vector<uint8_t>> buffers;

  void put_f32(const std::string& name, const Tensor<float>& t);
  void put_raw(const std::string& name, const std::string& bytes);
  bool has(const std::string& name) const;
  Tensor<float> get_f32(const std::string& name) const;
  std::string get_raw(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// params <-> checkpoint under a name prefix ("" for model weights)
void pack_params(Checkpoint& ck, const ParameterStore<float>& ps, const std::string& prefix);
void unpack_params(const Checkpoint& ck, ParameterStore<float>& ps, const std::string& prefix);

}  // namespace adaponder
