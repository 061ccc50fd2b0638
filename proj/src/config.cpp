#include "adaponder/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace adaponder {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

struct Field {
  const char* key;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

void parse_into(int64_t& dst, const std::string& key, const std::string& v) {
  const char* b = v.data();
  const char* e = b + v.size();
  auto [p, ec] = std::from_chars(b, e, dst);
  if (ec != std::errc() || p != e)
    throw std::invalid_argument("config key '" + key + "': expected integer, got '" + v + "'");
}

void parse_into(double& dst, const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    dst = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': expected number, got '" + v + "'");
  }
}

void parse_into(bool& dst, const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") {
    dst = true;
  } else if (v == "false" || v == "0") {
    dst = false;
  } else {
    throw std::invalid_argument("config key '" + key + "': expected true/false, got '" + v + "'");
  }
}

void parse_into(std::string& dst, const std::string&, const std::string& v) { dst = v; }

std::string to_text(int64_t v) { return std::to_string(v); }
std::string to_text(double v) { return fmt_double(v); }
std::string to_text(bool v) { return v ? "true" : "false"; }
std::string to_text(const std::string& v) { return v; }

#define FIELD(name)                                                       \
  Field{#name,                                                            \
        [](Config& c, const std::string& v) { parse_into(c.name, #name, v); }, \
        [](const Config& c) { return to_text(c.name); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      FIELD(K),          FIELD(tau),          FIELD(lambda),        FIELD(k_max),
      FIELD(S0),         FIELD(S1),           FIELD(shared_gate),   FIELD(gate_hidden),
      FIELD(gate_bias_init),
      FIELD(vocab_size), FIELD(d_model),      FIELD(n_layers),      FIELD(n_heads),
      FIELD(d_ff),       FIELD(max_seq_len),  FIELD(tie_update_embedding),
      FIELD(batch_size), FIELD(lr),           FIELD(adam_beta1),    FIELD(adam_beta2),
      FIELD(adam_eps),   FIELD(weight_decay), FIELD(warmup_ratio),  FIELD(lr_schedule),
      FIELD(total_steps), FIELD(seed),        FIELD(freeze_backbone), FIELD(grad_clip),
      FIELD(ponder_on_logits), FIELD(ce_at_final), FIELD(gate_bypass),
      FIELD(data),       FIELD(val_fraction), FIELD(log_interval),  FIELD(ckpt_interval),
      FIELD(threads),
  };
  return f;
}

#undef FIELD

const Field& find_field(const std::string& key) {
  for (const Field& f : fields()) {
    if (key == f.key) return f;
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

void fail(const std::string& key, const std::string& why) {
  throw std::invalid_argument("config key '" + key + "': " + why);
}

}  // namespace

void Config::validate() const {
  if (K < 1) fail("K", "must be >= 1");
  if (!(tau > 0.0 && tau < 1.0)) fail("tau", "must be in (0,1)");
  if (lambda < 0.0) fail("lambda", "must be >= 0");
  if (!(k_max >= 0.0 && k_max <= 1.0)) fail("k_max", "must be in [0,1]");
  if (!(S0 < S1)) fail("S0", "must satisfy S0 < S1");
  if (gate_hidden < 0) fail("gate_hidden", "must be >= 0");
  if (vocab_size < 2) fail("vocab_size", "must be >= 2");
  if (d_model < 1) fail("d_model", "must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0) fail("n_heads", "d_model must be divisible by n_heads");
  if (n_layers < 1) fail("n_layers", "must be >= 1");
  if (max_seq_len < 2) fail("max_seq_len", "must be >= 2");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(warmup_ratio > 0.0 && warmup_ratio < 1.0)) fail("warmup_ratio", "must be in (0,1)");
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) fail("adam_beta1", "must be in (0,1)");
  if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) fail("adam_beta2", "must be in (0,1)");
  if (adam_eps <= 0.0) fail("adam_eps", "must be > 0");
  if (weight_decay < 0.0) fail("weight_decay", "must be >= 0");
  if (lr <= 0.0) fail("lr", "must be > 0");
  if (lr_schedule != "cosine") fail("lr_schedule", "only 'cosine' is supported");
  if (total_steps < 1) fail("total_steps", "must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail("val_fraction", "must be in (0,1)");
  if (grad_clip < 0.0) fail("grad_clip", "must be >= 0 (0 disables)");
  if (threads < 0) fail("threads", "must be >= 0");
}

Config parse_config(const std::string& text) {
  Config c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config parse error at line " + std::to_string(lineno) +
                                  ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    find_field(key).set(c, value);
  }
  return c;
}

void apply_override(Config& c, const std::string& key, const std::string& value) {
  find_field(key).set(c, value);
}

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  Config c;
  if (!path.empty()) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("cannot open config file: " + path);
    std::string text;
    char buf[4096];
    size_t got;
    while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0) text.append(buf, got);
    std::fclose(f);
    c = parse_config(text);
  }
  // environment overrides: ADAPONDER_<KEY uppercased>
  for (const Field& f : fields()) {
    std::string env = "ADAPONDER_";
    for (const char* p = f.key; *p; ++p) {
      env += static_cast<char>(std::toupper(static_cast<unsigned char>(*p)));
    }
    if (const char* v = std::getenv(env.c_str())) f.set(c, v);
  }
  for (const std::string& ov : overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("override must be key=value, got '" + ov + "'");
    }
    apply_override(c, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
  }
  c.validate();
  return c;
}

std::string dump_config(const Config& c) {
  std::string out;
  for (const Field& f : fields()) {
    out += f.key;
    out += "=";
    out += f.get(c);
    out += "\n";
  }
  return out;
}

bool operator==(const Config& a, const Config& b) {
  for (const Field& f : fields()) {
    if (f.get(a) != f.get(b)) return false;
  }
  return true;
}

}  // namespace adaponder
