#include "adaponder/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "adaponder/kernels.hpp"

namespace adaponder {

FlopsReport count_flops(const std::vector<int>& halt_iter, int64_t n, const Config& cfg) {
  const double d = static_cast<double>(cfg.d_model);
  const double dff = static_cast<double>(cfg.d_ff_resolved());
  const double gh = static_cast<double>(cfg.gate_hidden_resolved());
  const double V = static_cast<double>(cfg.vocab_size);
  const double L = static_cast<double>(cfg.n_layers);

  FlopsReport r;
  r.halt_hist.assign(static_cast<size_t>(cfg.K), 0);
  r.tokens = static_cast<int64_t>(halt_iter.size());
  double mult_sum = 0;
  for (size_t idx = 0; idx < halt_iter.size(); ++idx) {
    const int h = halt_iter[idx];
    if (h < 0 || h >= cfg.K) throw std::invalid_argument("count_flops: halt_iter out of range");
    r.halt_hist[static_cast<size_t>(h)]++;
    const double runs = static_cast<double>(h + 1);
    mult_sum += runs;
    const double ctx = static_cast<double>(static_cast<int64_t>(idx) % n + 1);
    r.backbone += runs * L * (8.0 * d * d + 4.0 * ctx * d + 4.0 * d * dff);
    r.head += runs * 2.0 * d * V;
    r.update += static_cast<double>(h) * 2.0 * V * d;
    const double gate_runs =
        cfg.gate_bypass ? 0.0 : static_cast<double>(std::min<int64_t>(h + 1, cfg.K - 1));
    r.gate += gate_runs * (2.0 * d * gh + 2.0 * gh);
  }
  r.total = r.backbone + r.head + r.update + r.gate;
  r.multiplier = r.tokens > 0 ? mult_sum / static_cast<double>(r.tokens) : 0.0;
  return r;
}

template <typename T>
DecodeState<T> DecodeState<T>::make(const Config& cfg) {
  DecodeState<T> st;
  st.kcache.resize(static_cast<size_t>(cfg.K));
  st.vcache.resize(static_cast<size_t>(cfg.K));
  for (int64_t i = 0; i < cfg.K; ++i) {
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      st.kcache[static_cast<size_t>(i)].push_back(
          Tensor<T>::zeros({cfg.max_seq_len, cfg.d_model}));
      st.vcache[static_cast<size_t>(i)].push_back(
          Tensor<T>::zeros({cfg.max_seq_len, cfg.d_model}));
    }
  }
  return st;
}

namespace {

template <typename T>
void ln_row(const T* x, const T* g, const T* b, T* y, int64_t d, T eps = T(1e-5)) {
  T mu = T(0);
  for (int64_t j = 0; j < d; ++j) mu += x[j];
  mu /= static_cast<T>(d);
  T var = T(0);
  for (int64_t j = 0; j < d; ++j) {
    const T dv = x[j] - mu;
    var += dv * dv;
  }
  var /= static_cast<T>(d);
  const T rs = T(1) / std::sqrt(var + eps);
  for (int64_t j = 0; j < d; ++j) y[j] = (x[j] - mu) * rs * g[j] + b[j];
}

// y = x * W^T + b for a single row
template <typename T>
void lin_row(const T* x, const Tensor<T>& W, const Tensor<T>* b, T* y, int64_t in, int64_t out) {
  kernels::par::matmul_nt(x, W.data.data(), y, 1, in, out);
  if (b) {
    for (int64_t j = 0; j < out; ++j) y[j] += b->at(j);
  }
}

template <typename T>
void rotary_row(T* x, int64_t pos, int64_t heads, int64_t dh, T base = T(10000)) {
  const int64_t half = dh / 2;
  for (int64_t h = 0; h < heads; ++h) {
    T* xr = x + h * dh;
    for (int64_t c = 0; c < half; ++c) {
      const T theta = static_cast<T>(pos) *
                      std::pow(base, -static_cast<T>(2 * c) / static_cast<T>(dh));
      const T co = std::cos(theta), si = std::sin(theta);
      const T x0 = xr[c], x1 = xr[c + half];
      xr[c] = x0 * co - x1 * si;
      xr[c + half] = x0 * si + x1 * co;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> decode_extend(DecodeState<T>& state, const ParameterStore<T>& ps, const Config& cfg,
                        int32_t token, const std::vector<int>* forced_halt) {
  const int64_t p = state.len;
  if (p >= cfg.max_seq_len) throw std::runtime_error("decode: context overflow");
  if (token < 0 || token >= cfg.vocab_size) throw std::invalid_argument("decode: bad token id");
  const int64_t d = cfg.d_model, H = cfg.n_heads, dh = d / H;
  const int64_t dff = cfg.d_ff_resolved(), gh = cfg.gate_hidden_resolved();
  const int64_t V = cfg.vocab_size;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  const Tensor<T>& embed = ps.get("embed.V").value;
  std::vector<T> E(embed.data.data() + token * d, embed.data.data() + (token + 1) * d);
  std::vector<T> x(static_cast<size_t>(d)), a(static_cast<size_t>(d)), q(static_cast<size_t>(d)),
      k(static_cast<size_t>(d)), v(static_cast<size_t>(d)), att(static_cast<size_t>(d)),
      tmp(static_cast<size_t>(d)), ff(static_cast<size_t>(dff)), gt(static_cast<size_t>(gh));
  std::vector<T> z(static_cast<size_t>(V)), P(static_cast<size_t>(V));
  std::vector<T> probs(static_cast<size_t>(p + 1));
  Tensor<T> z_halt({V});
  int halt = static_cast<int>(cfg.K - 1);

  for (int64_t i = 0; i < cfg.K; ++i) {
    x.assign(E.begin(), E.end());
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      ln_row(x.data(), ps.get(pre + "ln1.g").value.data.data(),
             ps.get(pre + "ln1.b").value.data.data(), a.data(), d);
      lin_row(a.data(), ps.get(pre + "attn.wq").value, &ps.get(pre + "attn.bq").value, q.data(), d, d);
      lin_row(a.data(), ps.get(pre + "attn.wk").value, &ps.get(pre + "attn.bk").value, k.data(), d, d);
      lin_row(a.data(), ps.get(pre + "attn.wv").value, &ps.get(pre + "attn.bv").value, v.data(), d, d);
      rotary_row(q.data(), p, H, dh);
      rotary_row(k.data(), p, H, dh);
      // this position's fresh K/V lands in slot i before attention reads it
      Tensor<T>& kc = state.kcache[static_cast<size_t>(i)][static_cast<size_t>(l)];
      Tensor<T>& vc = state.vcache[static_cast<size_t>(i)][static_cast<size_t>(l)];
      std::copy_n(k.data(), d, kc.data.data() + p * d);
      std::copy_n(v.data(), d, vc.data.data() + p * d);
      // causal attention over slot i rows 0..p
      kernels::flop_counter().add(static_cast<uint64_t>(4 * (p + 1) * d));
      for (int64_t h = 0; h < H; ++h) {
        const T* qh = q.data() + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j <= p; ++j) {
          const T* kj = kc.data.data() + j * d + h * dh;
          T s = T(0);
          for (int64_t c = 0; c < dh; ++c) s += qh[c] * kj[c];
          probs[static_cast<size_t>(j)] = s * scale;
          mx = std::max(mx, probs[static_cast<size_t>(j)]);
        }
        T sum = T(0);
        for (int64_t j = 0; j <= p; ++j) {
          probs[static_cast<size_t>(j)] = std::exp(probs[static_cast<size_t>(j)] - mx);
          sum += probs[static_cast<size_t>(j)];
        }
        const T inv = T(1) / sum;
        T* oh = att.data() + h * dh;
        std::fill_n(oh, dh, T(0));
        for (int64_t j = 0; j <= p; ++j) {
          const T w = probs[static_cast<size_t>(j)] * inv;
          const T* vj = vc.data.data() + j * d + h * dh;
          for (int64_t c = 0; c < dh; ++c) oh[c] += w * vj[c];
        }
      }
      lin_row(att.data(), ps.get(pre + "attn.wo").value, &ps.get(pre + "attn.bo").value,
              tmp.data(), d, d);
      for (int64_t c = 0; c < d; ++c) x[static_cast<size_t>(c)] += tmp[static_cast<size_t>(c)];
      ln_row(x.data(), ps.get(pre + "ln2.g").value.data.data(),
             ps.get(pre + "ln2.b").value.data.data(), a.data(), d);
      lin_row(a.data(), ps.get(pre + "ffn.w1").value, &ps.get(pre + "ffn.b1").value, ff.data(), d, dff);
      kernels::serial::gelu_fwd(ff.data(), ff.data(), dff);
      lin_row(ff.data(), ps.get(pre + "ffn.w2").value, &ps.get(pre + "ffn.b2").value, tmp.data(), dff, d);
      for (int64_t c = 0; c < d; ++c) x[static_cast<size_t>(c)] += tmp[static_cast<size_t>(c)];
    }
    ln_row(x.data(), ps.get("final_ln.g").value.data.data(),
           ps.get("final_ln.b").value.data.data(), a.data(), d);
    const Tensor<T>& headW =
        cfg.tie_update_embedding ? ps.get("embed.V").value : ps.get("head.W").value;
    lin_row<T>(a.data(), headW, nullptr, z.data(), d, V);

    bool stop = (i == cfg.K - 1);
    T s_val = T(1);
    if (!stop && !cfg.gate_bypass) {
      const std::string gp = gate_prefix(cfg, i) + ".";
      lin_row(a.data(), ps.get(gp + "w1").value, &ps.get(gp + "b1").value, gt.data(), d, gh);
      kernels::serial::gelu_fwd(gt.data(), gt.data(), gh);
      T g = T(0);
      kernels::par::matmul_nt(gt.data(), ps.get(gp + "w2").value.data.data(), &g, 1, gh, 1);
      g += ps.get(gp + "b2").value.at(0);
      s_val = T(1) / (T(1) + std::exp(-g));
      if (forced_halt) {
        stop = (*forced_halt)[static_cast<size_t>(p)] <= static_cast<int>(i);
      } else {
        stop = static_cast<double>(s_val) < cfg.tau;
      }
    } else if (!stop && cfg.gate_bypass && forced_halt) {
      stop = (*forced_halt)[static_cast<size_t>(p)] <= static_cast<int>(i);
    }

    if (stop) {
      halt = static_cast<int>(i);
      std::copy(z.begin(), z.end(), z_halt.data.begin());
      // freeze: copy this iteration's K/V row into every remaining slot
      for (int64_t j = i + 1; j < cfg.K; ++j) {
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
          std::copy_n(state.kcache[static_cast<size_t>(i)][static_cast<size_t>(l)].data.data() + p * d, d,
                      state.kcache[static_cast<size_t>(j)][static_cast<size_t>(l)].data.data() + p * d);
          std::copy_n(state.vcache[static_cast<size_t>(i)][static_cast<size_t>(l)].data.data() + p * d, d,
                      state.vcache[static_cast<size_t>(j)][static_cast<size_t>(l)].data.data() + p * d);
        }
      }
      break;
    }

    // continue pondering: E += s * softmax(z) V
    kernels::serial::softmax_rows(z.data(), P.data(), 1, V);
    kernels::par::matmul_nn(P.data(), embed.data.data(), tmp.data(), 1, V, d);
    for (int64_t c = 0; c < d; ++c) E[static_cast<size_t>(c)] += s_val * tmp[static_cast<size_t>(c)];
  }

  state.halt_iter.push_back(halt);
  state.tokens.push_back(token);
  state.len++;
  return z_halt;
}

template <typename T>
int32_t decode_step(DecodeState<T>& state, const ParameterStore<T>& ps, const Config& cfg,
                    int32_t token, double temperature, int64_t top_k) {
  Tensor<T> z = decode_extend(state, ps, cfg, token);
  const int64_t V = z.numel();
  if (temperature <= 0.0) {
    int32_t best = 0;
    for (int64_t j = 1; j < V; ++j) {
      if (z.at(j) > z.at(best)) best = static_cast<int32_t>(j);
    }
    return best;
  }
  std::vector<std::pair<T, int32_t>> cand;
  cand.reserve(static_cast<size_t>(V));
  for (int64_t j = 0; j < V; ++j) cand.emplace_back(z.at(j), static_cast<int32_t>(j));
  std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const int64_t keep = top_k > 0 ? std::min<int64_t>(top_k, V) : V;
  double mx = static_cast<double>(cand[0].first);
  std::vector<double> w(static_cast<size_t>(keep));
  double sum = 0;
  for (int64_t j = 0; j < keep; ++j) {
    w[static_cast<size_t>(j)] = std::exp((static_cast<double>(cand[static_cast<size_t>(j)].first) - mx) / temperature);
    sum += w[static_cast<size_t>(j)];
  }
  double r = state.rng.uniform() * sum;
  for (int64_t j = 0; j < keep; ++j) {
    r -= w[static_cast<size_t>(j)];
    if (r <= 0) return cand[static_cast<size_t>(j)].second;
  }
  return cand[static_cast<size_t>(keep - 1)].second;
}

template <typename T>
void prefill(DecodeState<T>& state, const ParameterStore<T>& ps, const Config& cfg,
             const std::vector<int32_t>& prompt) {
  if (prompt.empty()) return;
  const int64_t n = static_cast<int64_t>(prompt.size());
  if (state.len + n > cfg.max_seq_len) throw std::runtime_error("prefill: context overflow");
  if (state.len != 0) throw std::logic_error("prefill: state already holds positions");
  Tape<T> tape;
  tape.recording = false;
  TapedParams<T> tp(tape, ps);
  IterationTrace<T> trace = recurrent_forward(tape, tp, cfg, prompt, 1, n);
  const int64_t d = cfg.d_model;
  for (int64_t i = 0; i < cfg.K; ++i) {
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      const Tensor<T>& ka = tape.val(trace.iters[static_cast<size_t>(i)].k_al[static_cast<size_t>(l)]);
      const Tensor<T>& va = tape.val(trace.iters[static_cast<size_t>(i)].v_al[static_cast<size_t>(l)]);
      std::copy_n(ka.data.data(), n * d,
                  state.kcache[static_cast<size_t>(i)][static_cast<size_t>(l)].data.data());
      std::copy_n(va.data.data(), n * d,
                  state.vcache[static_cast<size_t>(i)][static_cast<size_t>(l)].data.data());
    }
  }
  state.halt_iter = trace.halt_iter;
  state.tokens = prompt;
  state.len = n;
}

template <typename T>
EvalReport evaluate(const ParameterStore<T>& ps, const Corpus& corpus, const std::string& split,
                    const Config& cfg, std::vector<TokenHaltRecord>* records,
                    const MaskPolicy<T>& policy) {
  const int64_t eval_B = 8;
  std::vector<Batch> batches = split_windows(corpus, split, eval_B, cfg.max_seq_len);
  if (batches.empty()) throw std::runtime_error("evaluate: split has no full window");

  double nll_sum = 0;
  int64_t tokens = 0;
  std::vector<int> all_halts;
  for (const Batch& batch : batches) {
    Tape<T> tape;
    tape.recording = false;
    TapedParams<T> tp(tape, ps);
    IterationTrace<T> trace =
        recurrent_forward(tape, tp, cfg, batch.inputs, batch.B, batch.n, policy);
    const int64_t M = batch.B * batch.n;
    for (int64_t t = 0; t < M; ++t) {
      const int h = trace.halt_iter[static_cast<size_t>(t)];
      const Tensor<T>& z = tape.val(trace.iters[static_cast<size_t>(h)].z);
      const int64_t V = z.dim(1);
      const T* zr = z.data.data() + t * V;
      T mx = zr[0];
      for (int64_t j = 1; j < V; ++j) mx = std::max(mx, zr[j]);
      T se = T(0);
      for (int64_t j = 0; j < V; ++j) se += std::exp(zr[j] - mx);
      const int32_t y = batch.targets[static_cast<size_t>(t)];
      const double nll = static_cast<double>(std::log(se) + mx - zr[y]);
      nll_sum += nll;
      if (records) {
        TokenHaltRecord rec;
        rec.position = t % batch.n;
        rec.halt_iter = h;
        for (int64_t i = 0; i + 1 < cfg.K; ++i) {
          rec.s_history.push_back(
              static_cast<double>(tape.val(trace.iters[static_cast<size_t>(i)].s).at(t)));
        }
        rec.nll = nll;
        records->push_back(std::move(rec));
      }
      all_halts.push_back(h);
    }
    tokens += M;
  }

  EvalReport r;
  r.tokens = tokens;
  r.mean_nll = nll_sum / static_cast<double>(tokens);
  r.ppl = std::exp(r.mean_nll);
  r.flops = count_flops(all_halts, cfg.max_seq_len, cfg);
  return r;
}

template <typename T>
GenerateResult generate(const ParameterStore<T>& ps, const Config& cfg, const std::string& prompt,
                        int64_t max_new_tokens, double temperature, int64_t top_k,
                        uint64_t seed) {
  std::vector<int32_t> prompt_ids;
  for (unsigned char c : prompt) prompt_ids.push_back(static_cast<int32_t>(c));
  if (prompt_ids.empty()) prompt_ids.push_back(0x0A);

  DecodeState<T> st = DecodeState<T>::make(cfg);
  st.rng = Rng(seed);
  if (static_cast<int64_t>(prompt_ids.size()) > 1) {
    prefill(st, ps, cfg,
            std::vector<int32_t>(prompt_ids.begin(), prompt_ids.end() - 1));
  }

  GenerateResult out;
  int32_t next = prompt_ids.back();
  std::string text;
  for (int64_t i = 0; i < max_new_tokens && st.len < cfg.max_seq_len; ++i) {
    next = decode_step(st, ps, cfg, next, temperature, top_k);
    text.push_back(static_cast<char>(static_cast<unsigned char>(next)));
  }
  out.text = std::move(text);
  out.halt_iter = st.halt_iter;
  return out;
}

#define INSTANTIATE(T)                                                                         \
  template struct DecodeState<T>;                                                              \
  template Tensor<T> decode_extend<T>(DecodeState<T>&, const ParameterStore<T>&,               \
                                      const Config&, int32_t, const std::vector<int>*);       \
  template int32_t decode_step<T>(DecodeState<T>&, const ParameterStore<T>&, const Config&,    \
                                  int32_t, double, int64_t);                                   \
  template void prefill<T>(DecodeState<T>&, const ParameterStore<T>&, const Config&,           \
                           const std::vector<int32_t>&);                                       \
  template EvalReport evaluate<T>(const ParameterStore<T>&, const Corpus&, const std::string&, \
                                  const Config&, std::vector<TokenHaltRecord>*,                \
                                  const MaskPolicy<T>&);                                       \
  template GenerateResult generate<T>(const ParameterStore<T>&, const Config&,                 \
                                      const std::string&, int64_t, double, int64_t, uint64_t);

INSTANTIATE(float)
INSTANTIATE(double)
#undef INSTANTIATE

}  // namespace adaponder
