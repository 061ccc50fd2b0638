#include "adaponder/model.hpp"

namespace adaponder {

template <typename T>
BackboneOut<T> backbone_forward(Tape<T>& tape, const TapedParams<T>& tp, const Config& cfg,
                                typename Tape<T>::Id E,
                                const std::vector<typename Tape<T>::Id>& prev_k,
                                const std::vector<typename Tape<T>::Id>& prev_v,
                                const Tensor<T>& mask, int64_t B, int64_t n) {
  using Id = typename Tape<T>::Id;
  const bool has_prev = !prev_k.empty();
  if (has_prev && static_cast<int64_t>(prev_k.size()) != cfg.n_layers) {
    throw std::invalid_argument("backbone_forward: prev cache layer count mismatch");
  }
  BackboneOut<T> out;
  Id x = E;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Id a = tape.layernorm(x, tp.id(p + "ln1.g"), tp.id(p + "ln1.b"));
    Id q = tape.linear(a, tp.id(p + "attn.wq"), tp.id(p + "attn.bq"));
    Id k = tape.linear(a, tp.id(p + "attn.wk"), tp.id(p + "attn.bk"));
    Id v = tape.linear(a, tp.id(p + "attn.wv"), tp.id(p + "attn.bv"));
    Id qr = tape.rotary(q, B, n, cfg.n_heads);
    Id kr = tape.rotary(k, B, n, cfg.n_heads);
    // KV alignment happens here, before attention reads the caches
    Id k_al = has_prev ? tape.where(mask, kr, prev_k[static_cast<size_t>(l)]) : kr;
    Id v_al = has_prev ? tape.where(mask, v, prev_v[static_cast<size_t>(l)]) : v;
    Id att = tape.attention(qr, k_al, v_al, B, n, cfg.n_heads);
    x = tape.add(x, tape.linear(att, tp.id(p + "attn.wo"), tp.id(p + "attn.bo")));
    Id b = tape.layernorm(x, tp.id(p + "ln2.g"), tp.id(p + "ln2.b"));
    Id f = tape.linear(tape.gelu(tape.linear(b, tp.id(p + "ffn.w1"), tp.id(p + "ffn.b1"))),
                       tp.id(p + "ffn.w2"), tp.id(p + "ffn.b2"));
    x = tape.add(x, f);
    out.k_al.push_back(k_al);
    out.v_al.push_back(v_al);
  }
  out.h = tape.layernorm(x, tp.id("final_ln.g"), tp.id("final_ln.b"));
  const char* head = cfg.tie_update_embedding ? "embed.V" : "head.W";
  out.z = tape.linear(out.h, tp.id(head));
  return out;
}

template <typename T>
std::pair<typename Tape<T>::Id, typename Tape<T>::Id> gate(Tape<T>& tape,
                                                           const TapedParams<T>& tp,
                                                           const Config& cfg,
                                                           typename Tape<T>::Id h, int64_t i) {
  using Id = typename Tape<T>::Id;
  if (i < 0 || i >= cfg.K - 1) {
    throw std::invalid_argument("gate: iteration " + std::to_string(i) +
                                " out of range (the final iteration has no gate)");
  }
  const std::string p = gate_prefix(cfg, i) + ".";
  Id hidden = tape.gelu(tape.linear(h, tp.id(p + "w1"), tp.id(p + "b1")));
  Id g2 = tape.linear(hidden, tp.id(p + "w2"), tp.id(p + "b2"));  // [M,1]
  Id g = tape.reshape(g2, {tape.val(g2).dim(0)});
  Id s = tape.sigmoid(g);
  return {g, s};
}

template <typename T>
typename Tape<T>::Id update_embeddings(Tape<T>& tape, const TapedParams<T>& tp,
                                       typename Tape<T>::Id E, typename Tape<T>::Id z,
                                       typename Tape<T>::Id s, const Tensor<T>& m_next) {
  using Id = typename Tape<T>::Id;
  Id P = tape.softmax(z);
  Id upd = tape.matmul(P, tp.id("embed.V"));
  return tape.masked_scaled_add(E, upd, s, m_next);
}

template <typename T>
IterationTrace<T> recurrent_forward(Tape<T>& tape, const TapedParams<T>& tp, const Config& cfg,
                                    const std::vector<int32_t>& tokens, int64_t B, int64_t n,
                                    const MaskPolicy<T>& policy) {
  using Id = typename Tape<T>::Id;
  const int64_t M = B * n;
  if (static_cast<int64_t>(tokens.size()) != M) {
    throw std::invalid_argument("recurrent_forward: token count != B*n");
  }
  IterationTrace<T> trace;
  trace.B = B;
  trace.n = n;

  Id E = tape.embedding(tp.id("embed.V"), tokens);
  Tensor<T> m = Tensor<T>::full({M}, T(1));  // m^0
  std::vector<Id> prev_k, prev_v;

  for (int64_t i = 0; i < cfg.K; ++i) {
    BackboneOut<T> bo = backbone_forward(tape, tp, cfg, E, prev_k, prev_v, m, B, n);
    typename IterationTrace<T>::Iter it;
    it.E = E;
    it.h = bo.h;
    it.z = bo.z;
    it.mask = m;
    it.k_al = bo.k_al;
    it.v_al = bo.v_al;
    if (i < cfg.K - 1) {
      Id s_id;
      if (cfg.gate_bypass) {
        s_id = tape.leaf(Tensor<T>::full({M}, T(1)), "bypass_s");
        it.g = -1;
      } else {
        auto [g_id, sid] = gate(tape, tp, cfg, bo.h, i);
        it.g = g_id;
        s_id = sid;
      }
      it.s = s_id;
      const Tensor<T>& s_vals = tape.val(s_id);
      Tensor<T> m_next =
          policy ? policy(static_cast<int>(i), s_vals, m) : update_mask(m, s_vals, cfg.tau);
      if (m_next.numel() != M) throw std::invalid_argument("mask policy returned bad shape");
      E = update_embeddings(tape, tp, E, bo.z, s_id, m_next);
      m = std::move(m_next);
    }
    prev_k = bo.k_al;
    prev_v = bo.v_al;
    trace.iters.push_back(std::move(it));
  }
  trace.final_mask = m;

  // halt iteration from the mask history: first i with m^{i+1} = 0
  trace.halt_iter.assign(static_cast<size_t>(M), static_cast<int>(cfg.K - 1));
  for (int64_t t = 0; t < M; ++t) {
    for (int64_t i = 0; i + 1 < cfg.K; ++i) {
      if (trace.iters[static_cast<size_t>(i + 1)].mask.at(t) == T(0)) {
        trace.halt_iter[static_cast<size_t>(t)] = static_cast<int>(i);
        break;
      }
    }
  }
  return trace;
}

#define INSTANTIATE(T)                                                                        \
  template BackboneOut<T> backbone_forward<T>(Tape<T>&, const TapedParams<T>&, const Config&, \
                                              Tape<T>::Id, const std::vector<Tape<T>::Id>&,   \
                                              const std::vector<Tape<T>::Id>&,                \
                                              const Tensor<T>&, int64_t, int64_t);            \
  template std::pair<Tape<T>::Id, Tape<T>::Id> gate<T>(Tape<T>&, const TapedParams<T>&,       \
                                                       const Config&, Tape<T>::Id, int64_t);  \
  template Tape<T>::Id update_embeddings<T>(Tape<T>&, const TapedParams<T>&, Tape<T>::Id,     \
                                            Tape<T>::Id, Tape<T>::Id, const Tensor<T>&);      \
  template IterationTrace<T> recurrent_forward<T>(Tape<T>&, const TapedParams<T>&,            \
                                                  const Config&, const std::vector<int32_t>&, \
                                                  int64_t, int64_t, const MaskPolicy<T>&);

INSTANTIATE(float)
INSTANTIATE(double)
#undef INSTANTIATE

}  // namespace adaponder
