#include "adaponder/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <stdexcept>

#include "adaponder/kernels.hpp"

#include <nlohmann/json.hpp>

namespace adaponder {

double k_schedule(int64_t step, int64_t S0, int64_t S1, double k_max) {
  if (S0 >= S1) throw std::invalid_argument("k_schedule: S0 must be < S1");
  if (step <= S0) return 0.0;
  if (step >= S1) return k_max;
  return static_cast<double>(step - S0) / static_cast<double>(S1 - S0) * k_max;
}

double lr_at(int64_t step, const Config& cfg) {
  const double total = static_cast<double>(cfg.total_steps);
  const int64_t warmup = std::max<int64_t>(1, static_cast<int64_t>(cfg.warmup_ratio * total));
  if (step <= warmup) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double min_lr = 0.1 * cfg.lr;
  const double frac = static_cast<double>(step - warmup) / std::max(1.0, total - warmup);
  return min_lr + 0.5 * (cfg.lr - min_lr) * (1.0 + std::cos(M_PI * std::min(1.0, frac)));
}

template <typename T>
typename Tape<T>::Id ce_loss(Tape<T>& tape, const IterationTrace<T>& trace,
                             const std::vector<int32_t>& targets, const Config& cfg) {
  const int64_t M = trace.B * trace.n;
  if (static_cast<int64_t>(targets.size()) != M) {
    throw std::invalid_argument("ce_loss: target count mismatch");
  }
  const T w = T(1) / static_cast<T>(M);
  typename Tape<T>::Id total = -1;
  for (int64_t i = 0; i < cfg.K; ++i) {
    std::vector<T> weights(static_cast<size_t>(M), T(0));
    bool any = false;
    for (int64_t t = 0; t < M; ++t) {
      const int hi = cfg.ce_at_final ? static_cast<int>(cfg.K - 1)
                                     : trace.halt_iter[static_cast<size_t>(t)];
      if (hi == static_cast<int>(i)) {
        weights[static_cast<size_t>(t)] = w;
        any = true;
      }
    }
    if (!any) continue;
    typename Tape<T>::Id li =
        tape.cross_entropy(trace.iters[static_cast<size_t>(i)].z, targets, weights);
    total = total < 0 ? li : tape.add(total, li);
  }
  if (total < 0) throw std::logic_error("ce_loss: no tokens assigned to any iteration");
  return total;
}

template <typename T>
typename Tape<T>::Id ponder_loss(Tape<T>& tape, const IterationTrace<T>& trace, double k_s,
                                 const Config& cfg) {
  if (k_s < 0.0 || k_s > 1.0) throw std::invalid_argument("ponder_loss: k_s must be in [0,1]");
  if (cfg.K < 2 || cfg.gate_bypass || k_s == 0.0) {
    return tape.leaf(Tensor<T>::zeros({1}), "ponder_zero");
  }
  const int64_t M = trace.B * trace.n;
  // collect (value, flat index into the concatenated gate vectors) for tokens
  // active when the gate ran
  std::vector<std::pair<T, int64_t>> entries;
  std::vector<typename Tape<T>::Id> parts;
  for (int64_t i = 0; i + 1 < cfg.K; ++i) {
    const auto& it = trace.iters[static_cast<size_t>(i)];
    const typename Tape<T>::Id src = cfg.ponder_on_logits ? it.g : it.s;
    if (src < 0) throw std::logic_error("ponder_loss: missing gate node");
    parts.push_back(src);
    const Tensor<T>& vals = tape.val(src);
    for (int64_t t = 0; t < M; ++t) {
      if (it.mask.at(t) != T(0)) entries.emplace_back(vals.at(t), i * M + t);
    }
  }
  const int64_t N = static_cast<int64_t>(entries.size());
  const int64_t c = static_cast<int64_t>(std::ceil(k_s * static_cast<double>(N)));
  if (N == 0 || c == 0) return tape.leaf(Tensor<T>::zeros({1}), "ponder_zero");
  std::stable_sort(entries.begin(), entries.end());
  std::vector<int64_t> idx(static_cast<size_t>(c));
  for (int64_t i = 0; i < c; ++i) idx[static_cast<size_t>(i)] = entries[static_cast<size_t>(i)].second;
  typename Tape<T>::Id cat = tape.concat1d(parts);
  typename Tape<T>::Id sel = tape.gather1d(cat, std::move(idx));
  return tape.scale(tape.sum_all(sel), T(1) / static_cast<T>(c));
}

template <typename T>
double prune_rate(const IterationTrace<T>& trace, const Config& cfg) {
  if (cfg.K < 2) return 0.0;
  const int64_t M = trace.B * trace.n;
  int64_t pruned = 0;
  for (int64_t i = 1; i < cfg.K; ++i) {
    const Tensor<T>& m = trace.iters[static_cast<size_t>(i)].mask;
    for (int64_t t = 0; t < M; ++t) {
      if (m.at(t) == T(0)) ++pruned;
    }
  }
  return static_cast<double>(pruned) / static_cast<double>(M * (cfg.K - 1));
}

template <typename T>
void AdamW<T>::step(ParameterStore<T>& ps, int64_t t, double lr, const Config& cfg) {
  if (m.size() != ps.size()) throw std::logic_error("AdamW not initialized for this store");
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  auto& params = ps.all();
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param<T>& p = params[pi];
    if (cfg.freeze_backbone && !p.gate) continue;
    Tensor<T>&pm = m[pi], &pv = v[pi];
    const int64_t n = p.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(p.grad.at(i));
      const double mi = b1 * static_cast<double>(pm.at(i)) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(pv.at(i)) + (1.0 - b2) * g * g;
      pm.at(i) = static_cast<T>(mi);
      pv.at(i) = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      double upd = lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      if (p.decay && cfg.weight_decay > 0.0) {
        upd += lr * cfg.weight_decay * static_cast<double>(p.value.at(i));
      }
      p.value.at(i) = static_cast<T>(static_cast<double>(p.value.at(i)) - upd);
    }
  }
}

namespace {

template <typename T>
double clip_grads(ParameterStore<T>& ps, double max_norm) {
  if (max_norm <= 0.0) return 0.0;
  double sq = 0.0;
  for (const auto& p : ps.all()) {
    for (int64_t i = 0; i < p.grad.numel(); ++i) {
      const double g = static_cast<double>(p.grad.at(i));
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : ps.all()) {
      for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad.at(i) *= s;
    }
  }
  return norm;
}

void dump_bad_batch(const Batch& batch, int64_t step) {
  const std::string path = "bad_batch_step" + std::to_string(step) + ".json";
  nlohmann::json j;
  j["step"] = step;
  j["B"] = batch.B;
  j["n"] = batch.n;
  j["inputs"] = batch.inputs;
  j["targets"] = batch.targets;
  FILE* f = std::fopen(path.c_str(), "wb");
  if (f) {
    const std::string text = j.dump();
    std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
  }
}

}  // namespace

template <typename T>
TrainMetrics train_step(ParameterStore<T>& ps, AdamW<T>& opt, const Batch& batch, int64_t step,
                        const Config& cfg) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  TrainMetrics m;
  m.step = step;
  m.k_s = k_schedule(step, cfg.S0, cfg.S1, cfg.k_max);
  m.lr = lr_at(step, cfg);

  try {
    Tape<T> tape;
    TapedParams<T> tp(tape, ps);
    IterationTrace<T> trace = recurrent_forward(tape, tp, cfg, batch.inputs, batch.B, batch.n);
    typename Tape<T>::Id ce = ce_loss(tape, trace, batch.targets, cfg);
    typename Tape<T>::Id total = ce;
    m.loss_ce = static_cast<double>(tape.val(ce).at(0));
    if (step > cfg.S0 && cfg.lambda > 0.0) {
      typename Tape<T>::Id pl = ponder_loss(tape, trace, m.k_s, cfg);
      m.loss_ponder = static_cast<double>(tape.val(pl).at(0));
      total = tape.add(ce, tape.scale(pl, static_cast<T>(cfg.lambda)));
    }
    if (!std::isfinite(m.loss_ce) || !std::isfinite(m.loss_ponder)) {
      throw std::runtime_error("non-finite loss");
    }
    m.prune_rate = prune_rate(trace, cfg);
    ps.zero_grads();
    tape.backward(total);
    tp.harvest(tape, ps);
  } catch (const std::exception& e) {
    dump_bad_batch(batch, step);
    throw std::runtime_error("train_step " + std::to_string(step) + " failed (" + e.what() +
                             "); offending batch dumped to bad_batch_step" +
                             std::to_string(step) + ".json");
  }

  clip_grads(ps, cfg.grad_clip);
  opt.step(ps, step, m.lr, cfg);

  const double dt = std::chrono::duration<double>(clock::now() - t0).count();
  m.tokens_per_sec = static_cast<double>(batch.B * batch.n) / std::max(1e-9, dt);
  return m;
}

void save_train_checkpoint(const std::string& path, const ParameterStore<float>& ps,
                           const AdamW<float>& opt, int64_t step, const Config& cfg,
                           const Rng& data_rng) {
  Checkpoint ck;
  ck.step = step;
  ck.config_text = dump_config(cfg);
  pack_params(ck, ps, "");
  const auto& params = ps.all();
  for (size_t i = 0; i < params.size(); ++i) {
    ck.put_f32("opt.m." + params[i].name, opt.m[i]);
    ck.put_f32("opt.v." + params[i].name, opt.v[i]);
  }
  ck.put_raw("rng.data", std::to_string(data_rng.state));
  save_checkpoint(ck, path);
}

LoadedTrainState load_train_checkpoint(const std::string& path, ParameterStore<float>& ps,
                                       AdamW<float>& opt) {
  const Checkpoint ck = load_checkpoint(path);
  unpack_params(ck, ps, "");
  opt.init(ps);
  auto& params = ps.all();
  for (size_t i = 0; i < params.size(); ++i) {
    opt.m[i] = ck.get_f32("opt.m." + params[i].name);
    opt.v[i] = ck.get_f32("opt.v." + params[i].name);
  }
  LoadedTrainState st;
  st.step = ck.step;
  st.data_rng.state = std::stoull(ck.get_raw("rng.data"));
  return st;
}

TrainResult train(const Config& cfg, const Corpus& corpus, const std::string& out_dir,
                  const std::string& resume_from) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  kernels::set_threads(static_cast<int>(cfg.threads));

  // the effective config is written before any work begins
  {
    FILE* f = std::fopen((out_dir + "/effective.cfg").c_str(), "wb");
    if (!f) throw std::runtime_error("cannot write effective config in " + out_dir);
    const std::string text = dump_config(cfg);
    std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
  }

  Rng init_rng(static_cast<uint64_t>(cfg.seed));
  ParameterStore<float> ps = init_params<float>(cfg, init_rng);
  AdamW<float> opt;
  opt.init(ps);
  Rng data_rng(static_cast<uint64_t>(cfg.seed) ^ 0xDA7Au);
  int64_t start_step = 0;
  if (!resume_from.empty()) {
    LoadedTrainState st = load_train_checkpoint(resume_from, ps, opt);
    start_step = st.step;
    data_rng = st.data_rng;
  }

  const std::string metrics_path = out_dir + "/metrics.jsonl";
  FILE* mf = std::fopen(metrics_path.c_str(), resume_from.empty() ? "wb" : "ab");
  if (!mf) throw std::runtime_error("cannot write metrics log in " + out_dir);

  TrainResult result;
  result.metrics_path = metrics_path;
  TrainMetrics last;
  for (int64_t step = start_step + 1; step <= cfg.total_steps; ++step) {
    Batch batch = next_batch(corpus, cfg.batch_size, cfg.max_seq_len, data_rng);
    last = train_step(ps, opt, batch, step, cfg);
    if (step % cfg.log_interval == 0 || step == cfg.total_steps) {
      nlohmann::json j = {{"step", last.step},
                          {"loss_ce", last.loss_ce},
                          {"loss_ponder", last.loss_ponder},
                          {"k_s", last.k_s},
                          {"lr", last.lr},
                          {"prune_rate", last.prune_rate},
                          {"tokens_per_sec", last.tokens_per_sec}};
      const std::string line = j.dump() + "\n";
      std::fwrite(line.data(), 1, line.size(), mf);
      std::fflush(mf);
    }
    if (cfg.ckpt_interval > 0 && step % cfg.ckpt_interval == 0 && step != cfg.total_steps) {
      save_train_checkpoint(out_dir + "/step_" + std::to_string(step) + ".ckpt", ps, opt, step,
                            cfg, data_rng);
    }
  }
  std::fclose(mf);

  result.final_checkpoint = out_dir + "/final.ckpt";
  save_train_checkpoint(result.final_checkpoint, ps, opt, cfg.total_steps, cfg, data_rng);
  result.last = last;
  return result;
}

#define INSTANTIATE(T)                                                                     \
  template Tape<T>::Id ce_loss<T>(Tape<T>&, const IterationTrace<T>&,                      \
                                  const std::vector<int32_t>&, const Config&);             \
  template Tape<T>::Id ponder_loss<T>(Tape<T>&, const IterationTrace<T>&, double,          \
                                      const Config&);                                      \
  template double prune_rate<T>(const IterationTrace<T>&, const Config&);                  \
  template struct AdamW<T>;                                                                \
  template TrainMetrics train_step<T>(ParameterStore<T>&, AdamW<T>&, const Batch&,         \
                                      int64_t, const Config&);

INSTANTIATE(float)
INSTANTIATE(double)
#undef INSTANTIATE

}  // namespace adaponder
