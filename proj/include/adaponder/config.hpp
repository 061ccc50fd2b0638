#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace adaponder {

// Full run configuration. Flat key=value text format with '#' comments.
// Defaults follow the published hyperparameters; dimension defaults are the
// desk-scale profile. gate_hidden=0 and d_ff=0 resolve to d_model/2 and
// 4*d_model at validation time.
struct Config {
  // recurrence / gating
  int64_t K = 4;
  double tau = 1e-4;
  double lambda = 0.1;
  double k_max = 0.1;
  int64_t S0 = 2000;
  int64_t S1 = 2400;
  bool shared_gate = false;
  int64_t gate_hidden = 0;
  double gate_bias_init = 4.0;

  // model
  int64_t vocab_size = 256;
  int64_t d_model = 128;
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t d_ff = 0;
  int64_t max_seq_len = 256;
  bool tie_update_embedding = true;

  // training
  int64_t batch_size = 32;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double warmup_ratio = 0.02;
  std::string lr_schedule = "cosine";
  int64_t total_steps = 5000;
  int64_t seed = 1;
  bool freeze_backbone = false;
  double grad_clip = 1.0;

  // alternative objective placements (both default to the primary choice)
  bool ponder_on_logits = false;
  bool ce_at_final = false;
  bool gate_bypass = false;

  // run plumbing
  std::string data;  // comma-separated list of corpus files
  double val_fraction = 0.05;
  int64_t log_interval = 50;
  int64_t ckpt_interval = 1000;
  int64_t threads = 0;

  int64_t gate_hidden_resolved() const { return gate_hidden > 0 ? gate_hidden : d_model / 2; }
  int64_t d_ff_resolved() const { return d_ff > 0 ? d_ff : 4 * d_model; }

  // throws std::invalid_argument naming the offending key
  void validate() const;
};

// Parse config text; unknown keys and type errors name the key.
Config parse_config(const std::string& text);

// Load from file, then apply ADAPONDER_* environment overrides, then the
// key=value override list (highest precedence). Empty path = all defaults.
Config load_config(const std::string& path, const std::vector<std::string>& overrides = {});

// Apply one "key=value" override to an existing config.
void apply_override(Config& c, const std::string& key, const std::string& value);

// Canonical text form: fixed key order, shortest round-trip float formatting.
// parse_config(dump_config(c)) == c exactly.
std::string dump_config(const Config& c);

bool operator==(const Config& a, const Config& b);

}  // namespace adaponder
