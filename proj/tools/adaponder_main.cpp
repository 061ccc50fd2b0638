#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "adaponder/analysis.hpp"
#include "adaponder/config.hpp"
#include "adaponder/data.hpp"
#include "adaponder/gradcheck.hpp"
#include "adaponder/inference.hpp"
#include "adaponder/kernels.hpp"
#include "adaponder/model.hpp"
#include "adaponder/training.hpp"

namespace fs = std::filesystem;
using namespace adaponder;

namespace {

std::vector<std::string> split_paths(const std::string& csv) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start <= csv.size()) {
    size_t comma = csv.find(',', start);
    if (comma == std::string::npos) comma = csv.size();
    std::string p = csv.substr(start, comma - start);
    if (!p.empty()) out.push_back(p);
    start = comma + 1;
  }
  return out;
}

void write_file(const std::string& path, const std::string& text) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write " + path);
  std::fwrite(text.data(), 1, text.size(), f);
  std::fclose(f);
}

// every run drops its exact effective config before doing work
void dump_effective(const Config& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  write_file(out_dir + "/effective.cfg", dump_config(cfg));
}

Corpus corpus_from_config(const Config& cfg) {
  if (cfg.data.empty()) {
    throw std::runtime_error("no corpus: set the 'data' config key to a comma-separated file list");
  }
  return ingest(split_paths(cfg.data), cfg.val_fraction);
}

struct CkptBundle {
  Config cfg;
  ParameterStore<float> ps;
  int64_t step = 0;
};

CkptBundle load_model(const std::string& path, const std::vector<std::string>& overrides) {
  Checkpoint ck = load_checkpoint(path);
  Config cfg = parse_config(ck.config_text);
  for (const std::string& ov : overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("override must be key=value");
    apply_override(cfg, ov.substr(0, eq), ov.substr(eq + 1));
  }
  cfg.validate();
  Rng rng(static_cast<uint64_t>(cfg.seed));
  CkptBundle b{cfg, init_params<float>(cfg, rng), ck.step};
  unpack_params(ck, b.ps, "");
  return b;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaponder: recurrent-refinement LM with learned token-wise early exit"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs/out", ckpt_path, split = "val", prompt;
  std::string resume_path;
  std::vector<std::string> overrides;
  std::vector<double> target_multipliers;
  std::string policy_filter;
  int64_t seed = -1, max_new_tokens = 256, top_k = 0;
  double temperature = 0.0;

  auto add_common = [&](CLI::App* cmd, bool needs_config, bool needs_ckpt) {
    if (needs_config) cmd->add_option("--config", config_path, "config file (key=value)");
    if (needs_ckpt) cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed, "seed override");
    cmd->add_option("--set", overrides, "config override key=value (repeatable)");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train from a config");
  add_common(train_cmd, true, false);
  train_cmd->add_option("--resume", resume_path, "resume from checkpoint");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, false, true);
  eval_cmd->add_option("--split", split, "split to evaluate")->check(CLI::IsMember({"train", "val"}));

  CLI::App* gen_cmd = app.add_subcommand("generate", "sample text from a checkpoint");
  add_common(gen_cmd, false, true);
  gen_cmd->add_option("--prompt", prompt, "prompt text");
  gen_cmd->add_option("--max-new-tokens", max_new_tokens, "tokens to generate");
  gen_cmd->add_option("--temperature", temperature, "sampling temperature (0 = greedy)");
  gen_cmd->add_option("--top-k", top_k, "top-k sampling cutoff (0 = all)");

  CLI::App* ah_cmd = app.add_subcommand("analyze-halt", "halt-step/NLL statistics");
  add_common(ah_cmd, false, true);
  ah_cmd->add_option("--split", split, "split")->check(CLI::IsMember({"train", "val"}));

  CLI::App* iso_cmd = app.add_subcommand("analyze-isoflop", "iso-FLOP policy comparison");
  add_common(iso_cmd, false, true);
  iso_cmd->add_option("--split", split, "split")->check(CLI::IsMember({"train", "val"}));
  iso_cmd->add_option("--target-multiplier", target_multipliers, "target multiplier (repeatable)");
  iso_cmd->add_option("--policy", policy_filter, "restrict to one policy")
      ->check(CLI::IsMember({"adaptive", "uniform", "geometric"}));

  CLI::App* gc_cmd = app.add_subcommand("grad-check", "finite-difference check (float64)");
  add_common(gc_cmd, true, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train_cmd->parsed()) {
      if (seed >= 0) overrides.push_back("seed=" + std::to_string(seed));
      Config cfg = load_config(config_path, overrides);
      dump_effective(cfg, out_dir);
      Corpus corpus = corpus_from_config(cfg);
      TrainResult r = train(cfg, corpus, out_dir, resume_path);
      std::printf("final checkpoint: %s\n", r.final_checkpoint.c_str());
      std::printf("final step %lld: loss_ce=%.4f prune_rate=%.4f\n",
                  static_cast<long long>(r.last.step), r.last.loss_ce, r.last.prune_rate);
    } else if (eval_cmd->parsed()) {
      CkptBundle b = load_model(ckpt_path, overrides);
      kernels::set_threads(static_cast<int>(b.cfg.threads));
      dump_effective(b.cfg, out_dir);
      Corpus corpus = corpus_from_config(b.cfg);
      std::vector<TokenHaltRecord> records;
      EvalReport rep = evaluate(b.ps, corpus, split, b.cfg, &records);
      nlohmann::json j = {{"nll", rep.mean_nll},
                          {"ppl", rep.ppl},
                          {"multiplier", rep.flops.multiplier},
                          {"halt_histogram", rep.flops.halt_hist},
                          {"tokens", rep.tokens}};
      write_file(out_dir + "/eval_report.json", j.dump(2) + "\n");
      // line-delimited halt trace: {position, halt_iter, s_history}
      std::string trace;
      for (const auto& rec : records) {
        nlohmann::json tj = {{"position", rec.position},
                             {"halt_iter", rec.halt_iter},
                             {"s_history", rec.s_history}};
        trace += tj.dump() + "\n";
      }
      write_file(out_dir + "/halt_trace.jsonl", trace);
      std::printf("%s\n", j.dump().c_str());
    } else if (gen_cmd->parsed()) {
      CkptBundle b = load_model(ckpt_path, overrides);
      kernels::set_threads(static_cast<int>(b.cfg.threads));
      GenerateResult g = generate(b.ps, b.cfg, prompt, max_new_tokens, temperature, top_k,
                                  seed >= 0 ? static_cast<uint64_t>(seed) : 1);
      std::printf("%s\n", g.text.c_str());
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::string trace;
        for (size_t i = 0; i < g.halt_iter.size(); ++i) {
          nlohmann::json tj = {{"position", i}, {"halt_iter", g.halt_iter[i]}};
          trace += tj.dump() + "\n";
        }
        write_file(out_dir + "/generate_halts.jsonl", trace);
      }
    } else if (ah_cmd->parsed()) {
      CkptBundle b = load_model(ckpt_path, overrides);
      kernels::set_threads(static_cast<int>(b.cfg.threads));
      dump_effective(b.cfg, out_dir);
      Corpus corpus = corpus_from_config(b.cfg);
      std::vector<TokenHaltRecord> records;
      evaluate(b.ps, corpus, split, b.cfg, &records);
      HaltStats stats = halt_nll_stats(records, b.cfg.K);
      write_file(out_dir + "/halt_nll.csv", halt_stats_csv(stats));
      std::printf("%s", halt_stats_csv(stats).c_str());
    } else if (iso_cmd->parsed()) {
      CkptBundle b = load_model(ckpt_path, overrides);
      kernels::set_threads(static_cast<int>(b.cfg.threads));
      dump_effective(b.cfg, out_dir);
      Corpus corpus = corpus_from_config(b.cfg);
      if (target_multipliers.empty()) target_multipliers = {3.0, 3.5};
      const uint64_t sweep_seed = seed >= 0 ? static_cast<uint64_t>(seed) : 1;
      std::vector<IsoFlopRow> rows;
      if (policy_filter.empty()) {
        rows = iso_flop_sweep(b.ps, corpus, split, b.cfg, target_multipliers, sweep_seed);
      } else {
        for (double target : target_multipliers) {
          PruningPolicy pol;
          pol.kind = policy_kind_from_name(policy_filter);
          PolicyEval pe = apply_policy(b.ps, corpus, split, b.cfg, pol, target, sweep_seed);
          rows.push_back(IsoFlopRow{policy_filter, target, pe.achieved_multiplier, pe.eval_loss});
        }
      }
      write_file(out_dir + "/isoflop.csv", iso_flop_csv(rows));
      std::printf("%s", iso_flop_csv(rows).c_str());
    } else if (gc_cmd->parsed()) {
      // small float64 model, full Stage-2 loss
      if (seed >= 0) overrides.push_back("seed=" + std::to_string(seed));
      Config cfg = load_config(config_path, overrides);
      dump_effective(cfg, out_dir);
      Rng rng(static_cast<uint64_t>(cfg.seed));
      ParameterStore<double> ps = init_params<double>(cfg, rng);
      // fixed random batch
      Rng brng(7);
      std::vector<int32_t> inputs, targets;
      const int64_t n = std::min<int64_t>(cfg.max_seq_len, 8);
      for (int64_t t = 0; t < n; ++t) {
        inputs.push_back(static_cast<int32_t>(brng.below(static_cast<uint64_t>(cfg.vocab_size))));
        targets.push_back(static_cast<int32_t>(brng.below(static_cast<uint64_t>(cfg.vocab_size))));
      }
      const double k_s = cfg.k_max > 0 ? cfg.k_max : 0.5;
      auto loss_of = [&](const ParameterStore<double>& p) {
        Tape<double> tape;
        tape.recording = false;
        TapedParams<double> tp(tape, p);
        IterationTrace<double> tr = recurrent_forward(tape, tp, cfg, inputs, 1, n);
        auto ce = ce_loss(tape, tr, targets, cfg);
        auto pl = ponder_loss(tape, tr, k_s, cfg);
        return tape.val(ce).at(0) + cfg.lambda * tape.val(pl).at(0);
      };
      auto grads_of = [&](ParameterStore<double>& p) {
        Tape<double> tape;
        TapedParams<double> tp(tape, p);
        IterationTrace<double> tr = recurrent_forward(tape, tp, cfg, inputs, 1, n);
        auto ce = ce_loss(tape, tr, targets, cfg);
        auto pl = ponder_loss(tape, tr, k_s, cfg);
        auto total = tape.add(ce, tape.scale(pl, cfg.lambda));
        tape.backward(total);
        tp.harvest(tape, p);
      };
      GradCheckReport rep = grad_check<double>(ps, loss_of, grads_of, 1e-5, 0);
      std::printf("grad-check: max_rel_err=%.3e max_abs_err=%.3e worst=%s[%lld] over %lld elements\n",
                  rep.max_rel_err, rep.max_abs_err, rep.worst_param.c_str(),
                  static_cast<long long>(rep.worst_index), static_cast<long long>(rep.checked));
      if (rep.max_rel_err >= 1e-5) {
        std::fprintf(stderr, "grad-check FAILED (tolerance 1e-5)\n");
        return 2;
      }
    }
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 2;
  }
  return 0;
}
